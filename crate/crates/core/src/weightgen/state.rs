//! Initialization of θ and combiner state.
//!
//! θ is drawn group by group, in id order, from the θ stream; the combiner
//! state comes from its own stream.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{GenerationKind, GenerationPlan};
use crate::archspec::NetworkSpec;
use crate::autodiff::Tensor;
use crate::paramstore::ParameterGroup;
use crate::rng;

/// `n` draws of `N(0, 2 / fan_in)`.
pub fn he_normal(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Groups with θ_j drawn from `N(0, 2/F_j)`, where `F_j` is the fan-in of the
/// member with the most weights (first such on ties).
pub(crate) fn init_groups(net: &NetworkSpec, plan: &GenerationPlan, seed: u64) -> Vec<ParameterGroup> {
    let mut rng = rng::stream(seed, rng::THETA);
    plan.group_sizes
        .iter()
        .zip(&plan.group_members)
        .enumerate()
        .map(|(j, (&size, members))| {
            let widest = members
                .iter()
                .copied()
                .reduce(|a, b| {
                    if net.layers()[b].weight_count() > net.layers()[a].weight_count() {
                        b
                    } else {
                        a
                    }
                })
                .expect("groups have members");
            let mut g = ParameterGroup::new(j, size, members.clone());
            g.theta = Tensor::vector(he_normal(&mut rng, size, net.layers()[widest].fan_in()));
            g
        })
        .collect()
}

/// Learned combiner and mask tensors. Entries are `None` where a layer or
/// group does not use them.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinerState {
    /// WAvg coefficients, `[K̃_i]`.
    pub alpha: Vec<Option<Tensor>>,
    /// Emb layer embeddings, `[E]`.
    pub phi: Vec<Option<Tensor>>,
    /// Emb projection, `[K̃_j^max, E]`.
    pub proj_w: Vec<Option<Tensor>>,
    pub proj_b: Vec<Option<Tensor>>,
    /// Upsampling masks by tile (`masks[j][t-1]` modulates tile `t`).
    pub masks: Vec<Vec<Tensor>>,
}

impl CombinerState {
    pub fn init(plan: &GenerationPlan, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::COMBINER);
        let n = plan.layers.len();
        let p = plan.num_groups();
        let e = plan.emb_dim;
        let inv_sqrt_e = 1.0 / (e as f64).sqrt();
        let mut state = CombinerState {
            alpha: vec![None; n],
            phi: vec![None; n],
            proj_w: vec![None; p],
            proj_b: vec![None; p],
            masks: vec![Vec::new(); p],
        };
        for j in 0..p {
            let in_group = |kind| {
                (0..n)
                    .filter(|&i| plan.layers[i].group == j && plan.layers[i].kind() == kind)
                    .collect::<Vec<_>>()
            };
            let mut wavg = in_group(GenerationKind::WAvg);
            wavg.sort_by_key(|&i| (plan.layers[i].template_count(), i));
            let dims: Vec<usize> = wavg.iter().map(|&i| plan.layers[i].template_count()).collect();
            for (i, a) in wavg.into_iter().zip(orthogonal_rows(&mut rng, &dims)) {
                state.alpha[i] = Some(Tensor::vector(a));
            }
            for i in in_group(GenerationKind::Emb) {
                state.phi[i] = Some(Tensor::vector(normal_vec(&mut rng, e, inv_sqrt_e)));
            }
            let rows = plan.emb_rows[j];
            if rows > 0 {
                let w = normal_vec(&mut rng, rows * e, inv_sqrt_e);
                state.proj_w[j] = Some(Tensor::new(vec![rows, e], w).expect("sized"));
                state.proj_b[j] = Some(Tensor::zeros(&[rows]));
            }
            state.masks[j] = (0..plan.mask_pool[j])
                .map(|_| Tensor::full(&[plan.mask_window], 1.0))
                .collect();
        }
        state
    }
}

/// Unit vectors of the given (ascending) dimensions, each orthogonal to all
/// earlier ones after zero-padding them to its dimension. Once the earlier
/// vectors fill the space, further rows are random unit vectors.
pub(crate) fn orthogonal_rows(rng: &mut impl Rng, dims: &[usize]) -> Vec<Vec<f64>> {
    let unit = |mut v: Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    };
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut rows = Vec::with_capacity(dims.len());
    for &d in dims {
        let mut v = normal_vec(rng, d, 1.0);
        if basis.len() >= d {
            rows.push(unit(v));
            continue;
        }
        // Two Gram-Schmidt passes keep the residual overlap at rounding level.
        for _ in 0..2 {
            for r in &basis {
                let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (x, a) in v.iter_mut().zip(r) {
                    *x -= dot * a;
                }
            }
        }
        let v = unit(v);
        basis.push(v.clone());
        rows.push(v);
    }
    rows
}
