use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::archspec::LayerSpec;
use crate::autodiff::gradcheck::{central_differences, max_relative_error, STEP};
use crate::paramstore::Provenance;

/// Dense chain `dims[0] → dims[1] → …`, no biases.
fn chain(dims: &[usize]) -> NetworkSpec {
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec::dense(&format!("fc{i}"), w[1], w[0]).with_bias(false))
        .collect();
    NetworkSpec::new(layers, vec![dims[0]], *dims.last().unwrap()).unwrap()
}

fn budget(total: usize, k: usize, combiner: Combiner, upsampler: Upsampler) -> BudgetSpec {
    let mut b = BudgetSpec::new(total);
    b.max_templates = k;
    b.combiner = combiner;
    b.upsampler = upsampler;
    b.mask_window = 3;
    b.emb_dim = 5;
    b
}

fn generated(gen: &Generator, net: &NetworkSpec, layer: usize) -> (GenerationKind, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = gen.bind(&mut tape);
    let shape = &net.layers()[layer].weight_shape;
    let w = gen.generate(&mut tape, &bound, layer, shape).unwrap();
    assert_eq!(tape.shape(w.var), shape.as_slice());
    (w.kind, tape.value(w.var).data().to_vec())
}

#[test]
fn dispatch_examples() {
    let net = chain(&[4, 5]);
    let single = GroupMapping::single(&net);
    let wavg = |t| budget(t, 8, Combiner::WAvg, Upsampler::Mask);

    let gen = Generator::from_mapping(&net, &single, &wavg(20), 0).unwrap();
    let (kind, w) = generated(&gen, &net, 0);
    assert_eq!(kind, GenerationKind::Identity);
    assert_eq!(w, gen.groups[0].theta.data());

    let gen = Generator::from_mapping(&net, &single, &wavg(40), 0).unwrap();
    assert_eq!(gen.plan.layers[0].template_count(), 2);
    assert_eq!(generated(&gen, &net, 0).0, GenerationKind::WAvg);

    let net = chain(&[3, 7]);
    let gen = Generator::from_mapping(&net, &GroupMapping::single(&net), &wavg(7), 0).unwrap();
    assert_eq!(gen.plan.layers[0].tiles(), 3);
    assert_eq!(generated(&gen, &net, 0).0, GenerationKind::Mask);
}

#[test]
fn single_template_is_used_directly() {
    let net = chain(&[4, 5]);
    let gen = Generator::from_mapping(
        &net,
        &GroupMapping::single(&net),
        &budget(30, 8, Combiner::WAvg, Upsampler::Mask),
        3,
    )
    .unwrap();
    let (kind, w) = generated(&gen, &net, 0);
    assert_eq!(kind, GenerationKind::Direct);
    assert_eq!(w, gen.groups[0].theta.data()[..20]);
    assert_eq!(gen.census(), 30);
}

/// RR layers in one group select successive templates by query order.
#[test]
fn rr_uses_group_query_order() {
    let net = chain(&[2, 2, 2, 2]);
    let gen = Generator::from_mapping(
        &net,
        &GroupMapping::single(&net),
        &budget(12, 3, Combiner::Rr, Upsampler::Mask),
        5,
    )
    .unwrap();
    let theta = gen.groups[0].theta.data();
    for layer in 0..3 {
        let (kind, w) = generated(&gen, &net, layer);
        assert_eq!(kind, GenerationKind::Rr);
        let GenerationCase::Downsample {
            templates: TemplateSource::Views(views),
            call_index,
            ..
        } = &gen.plan.layers[layer].case
        else {
            panic!("downsampled")
        };
        assert_eq!(*call_index, layer);
        let pick = views[layer % views.len()];
        let expect: Vec<f64> = pick.indices(12).map(|i| theta[i]).collect();
        assert_eq!(w, expect);
    }
}

fn all_methods() -> Vec<(Combiner, Upsampler)> {
    let mut v = Vec::new();
    for c in [Combiner::WAvg, Combiner::Emb, Combiner::Rr, Combiner::Avg] {
        for u in [Upsampler::Repeat, Upsampler::Inter, Upsampler::Mask] {
            v.push((c, u));
        }
    }
    v
}

#[test]
fn generated_shapes_match_declared() {
    let conv = NetworkSpec::new(
        vec![
            LayerSpec::conv("c1", 4, 2, 3, 3).with_geometry(1, 1),
            LayerSpec::conv("c2", 3, 4, 2, 2).with_geometry(2, 0),
            LayerSpec::dense("fc", 5, 12),
        ],
        vec![2, 4, 4],
        5,
    )
    .unwrap();
    let total = conv.total_weights();
    for (c, u) in all_methods() {
        for t in [total / 5, total / 2, total, total * 3] {
            for p in 1..=3 {
                let assignment: Vec<usize> = (0..3).map(|i| i % p).collect();
                let mapping = GroupMapping::new(&conv, assignment, p, Provenance::Manual).unwrap();
                let gen = Generator::from_mapping(&conv, &mapping, &budget(t, 4, c, u), 1).unwrap();
                for layer in 0..3 {
                    generated(&gen, &conv, layer);
                }
            }
        }
    }
}

/// Cross-entropy of a dense net whose weights all come from the generator,
/// with gradients for every generator tensor in `params` order.
fn network_loss(gen: &Generator, net: &NetworkSpec, x: &Tensor, labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let bound = gen.bind(&mut tape);
    let mut h = tape.constant(x.clone());
    for (i, l) in net.layers().iter().enumerate() {
        let w = gen.generate(&mut tape, &bound, i, &l.weight_shape).unwrap();
        let wt = tape.transpose(w.var).unwrap();
        h = tape.matmul(h, wt).unwrap();
        if i + 1 < net.layers().len() {
            // Smooth nonlinearity; ReLU kinks would upset finite differences.
            let sq = tape.mul(h, h).unwrap();
            h = tape.add(h, sq).unwrap();
        }
    }
    let loss = tape.softmax_cross_entropy(h, labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = bound
        .all
        .iter()
        .zip(gen.params())
        .map(|(v, (_, _, t))| grads.get(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]))
        .collect();
    (tape.value(loss).data()[0], g)
}

fn randomize_state(gen: &mut Generator, rng: &mut ChaCha8Rng) {
    for (role, t) in gen.params_mut() {
        if role.is_combiner() {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        }
    }
}

fn gradient_error(gen: &Generator, net: &NetworkSpec, x: &Tensor, labels: &[usize]) -> f64 {
    let (_, analytic) = network_loss(gen, net, x, labels);
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let base = gen.params()[k].2.data().to_vec();
        let numeric = central_differences(&base, STEP, |v| {
            let mut probe = gen.clone();
            probe.params_mut()[k].1.data_mut().copy_from_slice(v);
            network_loss(&probe, net, x, labels).0
        });
        worst = worst.max(max_relative_error(a, &numeric, 1e-3));
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for (idx, (c, u)) in all_methods().into_iter().enumerate() {
        for trial in 0..4u64 {
            let seed = idx as u64 * 100 + trial;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d0 = rng.random_range(2..5);
            let d1 = rng.random_range(2..5);
            let d2 = rng.random_range(2..4);
            let net = chain(&[d0, d1, d2]);
            let total = match trial {
                0 => net.total_weights() / 3,
                1 => net.total_weights() * 3 + 1,
                2 => net.layers()[0].weight_count().max(net.layers()[1].weight_count()) - 1,
                _ => net.total_weights(),
            };
            let mapping = if trial == 3 {
                GroupMapping::one_per_layer(&net, Provenance::Manual)
            } else {
                GroupMapping::single(&net)
            };
            let mut gen = Generator::from_mapping(&net, &mapping, &budget(total, 4, c, u), seed).unwrap();
            randomize_state(&mut gen, &mut rng);
            let x = Tensor::new(vec![3, d0], (0..3 * d0).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..d2)).collect();
            let err = gradient_error(&gen, &net, &x, &labels);
            assert!(err <= 1e-5, "{c}/{u} trial {trial}: {err:e}");
        }
    }
}

#[test]
fn mask_with_neutral_pool_equals_repeat() {
    for seed in 0..10 {
        let net = chain(&[4, 9, 3]);
        let mapping = GroupMapping::single(&net);
        let mask = Generator::from_mapping(&net, &mapping, &budget(10, 8, Combiner::WAvg, Upsampler::Mask), seed)
            .unwrap();
        let repeat =
            Generator::from_mapping(&net, &mapping, &budget(10, 8, Combiner::WAvg, Upsampler::Repeat), seed)
                .unwrap();
        assert_eq!(mask.groups[0].theta, repeat.groups[0].theta);
        assert_eq!(generated(&mask, &net, 0).1, generated(&repeat, &net, 0).1);
        assert_eq!(mask.plan.mask_pool, vec![3]);
    }
}

#[test]
fn uniform_wavg_equals_avg() {
    for seed in 0..10 {
        let net = chain(&[3, 4, 2]);
        let mapping = GroupMapping::single(&net);
        let mut wavg =
            Generator::from_mapping(&net, &mapping, &budget(61, 8, Combiner::WAvg, Upsampler::Mask), seed).unwrap();
        let avg =
            Generator::from_mapping(&net, &mapping, &budget(61, 8, Combiner::Avg, Upsampler::Mask), seed).unwrap();
        for a in wavg.state.alpha.iter_mut().flatten() {
            let k = a.len();
            a.data_mut().iter_mut().for_each(|x| *x = 1.0 / k as f64);
        }
        for layer in 0..2 {
            assert_eq!(generated(&wavg, &net, layer).1, generated(&avg, &net, layer).1);
        }
    }
}

#[test]
fn one_hot_wavg_selects_template() {
    for seed in 0..10 {
        let net = chain(&[3, 4, 2]);
        let mut gen = Generator::from_mapping(
            &net,
            &GroupMapping::single(&net),
            &budget(50, 8, Combiner::WAvg, Upsampler::Mask),
            seed,
        )
        .unwrap();
        let GenerationCase::Downsample {
            templates: TemplateSource::Views(views),
            ..
        } = gen.plan.layers[0].case.clone()
        else {
            panic!("downsampled")
        };
        let pick = seed as usize % views.len();
        let a = gen.state.alpha[0].as_mut().unwrap();
        a.data_mut().iter_mut().enumerate().for_each(|(k, x)| *x = (k == pick) as u8 as f64);
        let theta = gen.groups[0].theta.data();
        let expect: Vec<f64> = views[pick].indices(50).map(|i| theta[i]).collect();
        assert_eq!(generated(&gen, &net, 0).1, expect);
    }
}

#[test]
fn same_length_interpolation_is_identity() {
    for n in 1..12 {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(v.clone()));
        let y = tape.linear_resize_1d(x, n).unwrap();
        assert_eq!(tape.value(y).data(), v.as_slice());
    }
}

#[test]
fn alpha_rows_start_orthogonal() {
    let net = chain(&[2, 2, 2]);
    let gen = Generator::from_mapping(
        &net,
        &GroupMapping::single(&net),
        &budget(16, 4, Combiner::WAvg, Upsampler::Mask),
        9,
    )
    .unwrap();
    let a0 = gen.state.alpha[0].as_ref().unwrap().data();
    let a1 = gen.state.alpha[1].as_ref().unwrap().data();
    assert_eq!(a0.len(), 4);
    let dot: f64 = a0.iter().zip(a1).map(|(a, b)| a * b).sum();
    assert!(dot.abs() < 1e-12, "{dot:e}");
}

#[test]
fn orthogonal_rows_beyond_capacity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows = state::orthogonal_rows(&mut rng, &[2, 3, 3, 3, 3, 5]);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for r in &rows {
        assert!((dot(r, r) - 1.0).abs() < 1e-12);
    }
    for i in 0..3 {
        for j in 0..i {
            assert!(dot(&rows[i], &rows[j]).abs() < 1e-12);
        }
    }
    // Rows 3 and 4 find R^3 full; row 5 has room again.
    for j in 0..3 {
        assert!(dot(&rows[5], &rows[j]).abs() < 1e-12);
    }
}

#[test]
fn initialization_is_deterministic() {
    let net = chain(&[5, 6, 3]);
    let mapping = GroupMapping::single(&net);
    let b = budget(17, 8, Combiner::Emb, Upsampler::Mask);
    let a = Generator::from_mapping(&net, &mapping, &b, 42).unwrap();
    let c = Generator::from_mapping(&net, &mapping, &b, 42).unwrap();
    assert_eq!(a.state, c.state);
    for layer in 0..2 {
        assert_eq!(generated(&a, &net, layer).1, generated(&c, &net, layer).1);
    }
    let d = Generator::from_mapping(&net, &mapping, &b, 43).unwrap();
    assert_ne!(a.groups[0].theta, d.groups[0].theta);
    assert!(a.state.masks[0].iter().all(|m| m.data().iter().all(|&x| x == 1.0)));
}

#[test]
fn overhead_examples() {
    let net = chain(&[2, 2, 2, 2]);
    let mut b = budget(40, 8, Combiner::Emb, Upsampler::Mask);
    b.emb_dim = 24;
    let r = overhead_param_count(&net, &GroupMapping::single(&net), &b).unwrap();
    assert_eq!(r.total, 24 * 3 + (24 * 8 + 8));
    assert_eq!(r.total, 272);

    // K̃ = [4, 1, 3] under 60 parameters.
    let net = chain(&[2, 7, 5, 4]);
    let p = GenerationPlan::new(
        &net,
        &GroupMapping::single(&net),
        &budget(60, 8, Combiner::WAvg, Upsampler::Mask),
    )
    .unwrap();
    let ks: Vec<usize> = p.layers.iter().map(LayerPlan::template_count).collect();
    assert_eq!(ks, vec![4, 1, 3]);
    assert_eq!(OverheadReport::from_plan(&net, &p).total, 7);

    let net = chain(&[3, 4, 5]);
    let exact = budget(net.total_weights(), 8, Combiner::Emb, Upsampler::Mask);
    let r = overhead_param_count(&net, &GroupMapping::one_per_layer(&net, Provenance::Manual), &exact).unwrap();
    assert_eq!(r.total, 0);
}

#[test]
fn biases_are_reported_separately() {
    let net = NetworkSpec::new(
        vec![LayerSpec::dense("a", 4, 3), LayerSpec::dense("b", 2, 4).with_bias(false)],
        vec![3],
        2,
    )
    .unwrap();
    let r = overhead_param_count(&net, &GroupMapping::single(&net), &BudgetSpec::new(10)).unwrap();
    assert_eq!(r.layer_biases, vec![("a".to_string(), 4), ("b".to_string(), 0)]);
    assert_eq!(r.biases, 4);
}

#[test]
fn flop_examples() {
    let net = chain(&[10, 10]);
    let single = GroupMapping::single(&net);
    let r = weightgen_flops(&net, &single, &budget(200, 8, Combiner::WAvg, Upsampler::Mask), 64).unwrap();
    assert_eq!(r.layers[0].generation, 200);
    let r = weightgen_flops(&net, &single, &budget(100, 8, Combiner::WAvg, Upsampler::Mask), 64).unwrap();
    assert_eq!(r.generation, 0);
    assert_eq!(r.layers[0].kind, GenerationKind::Identity);
    let r = weightgen_flops(&net, &single, &budget(40, 8, Combiner::WAvg, Upsampler::Inter), 64).unwrap();
    assert_eq!(r.generation, 200);
    let r = weightgen_flops(&net, &single, &budget(40, 8, Combiner::WAvg, Upsampler::Mask), 64).unwrap();
    assert_eq!(r.generation, 60);
}

#[test]
fn preliminary_plan_layout() {
    let net = chain(&[3, 8, 6, 2]);
    let plan = GenerationPlan::preliminary(&net, 4, Combiner::WAvg, 24, false).unwrap();
    assert_eq!(plan.group_sizes, vec![48]);
    for l in &plan.layers {
        assert_eq!(
            l.case,
            GenerationCase::Downsample {
                templates: TemplateSource::ResizedChunks { chunk_len: 12, count: 4 },
                kind: GenerationKind::WAvg,
                call_index: match l.case {
                    GenerationCase::Downsample { call_index, .. } => call_index,
                    _ => unreachable!(),
                },
            }
        );
    }
    let gen = Generator::new(&net, plan, 0);
    for layer in 0..3 {
        generated(&gen, &net, layer);
    }
    assert!(GenerationPlan::preliminary(&net, 4, Combiner::Rr, 24, false).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn census_matches_overhead_formula(
        dims in prop::collection::vec(1usize..7, 3..6),
        frac in 0.1f64..4.0,
        p in 1usize..4,
        k in prop::sample::select(vec![1usize, 4, 8]),
        ci in 0usize..4,
        ui in 0usize..3,
        seed in 0u64..1000,
    ) {
        let net = chain(&dims);
        let layers = net.layers().len();
        let p = p.min(layers);
        let total = ((net.total_weights() as f64 * frac) as usize).max(p);
        let combiner = [Combiner::WAvg, Combiner::Emb, Combiner::Rr, Combiner::Avg][ci];
        let upsampler = [Upsampler::Repeat, Upsampler::Inter, Upsampler::Mask][ui];
        let assignment: Vec<usize> = (0..layers).map(|i| i % p).collect();
        let mapping = GroupMapping::new(&net, assignment, p, Provenance::Manual).unwrap();
        let b = budget(total, k, combiner, upsampler);
        let Ok(gen) = Generator::from_mapping(&net, &mapping, &b, seed) else {
            // Too few parameters for some group; allocation rejects it.
            return Ok(());
        };
        let overhead = overhead_param_count(&net, &mapping, &b).unwrap();
        prop_assert_eq!(gen.census(), total + overhead.total);
        for layer in 0..layers {
            generated(&gen, &net, layer);
        }
    }
}
