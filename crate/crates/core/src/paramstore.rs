//! The parameter budget: groups, their sizes, round-robin template views and
//! the layer→group mapping file.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::archspec::NetworkSpec;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Auto,
    Manual,
    Single,
    Random,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Auto => "auto",
            Provenance::Manual => "manual",
            Provenance::Single => "single",
            Provenance::Random => "random",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "auto" => Provenance::Auto,
            "manual" => Provenance::Manual,
            "single" => Provenance::Single,
            "random" => Provenance::Random,
            other => return Err(Error::Mapping(format!("unknown provenance '{other}'"))),
        })
    }
}

/// Total assignment of layers (in declaration order) to groups `0..P`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMapping {
    layer_ids: Vec<String>,
    assignment: Vec<usize>,
    num_groups: usize,
    provenance: Provenance,
}

const MAPPING_HEADER: &str = "npas-mapping v1";

impl GroupMapping {
    pub fn new(
        net: &NetworkSpec,
        assignment: Vec<usize>,
        num_groups: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if assignment.len() != net.layers().len() {
            return Err(Error::Mapping(format!(
                "{} assignments for {} layers",
                assignment.len(),
                net.layers().len()
            )));
        }
        if num_groups == 0 {
            return Err(Error::Mapping("group count must be >= 1".into()));
        }
        if let Some((i, g)) = assignment.iter().enumerate().find(|(_, g)| **g >= num_groups) {
            return Err(Error::Mapping(format!(
                "layer '{}' mapped to group {g}, outside [0, {num_groups})",
                net.layers()[i].id
            )));
        }
        Ok(GroupMapping {
            layer_ids: net.layers().iter().map(|l| l.id.clone()).collect(),
            assignment,
            num_groups,
            provenance,
        })
    }

    /// Every layer in group 0.
    pub fn single(net: &NetworkSpec) -> Self {
        Self::new(net, vec![0; net.layers().len()], 1, Provenance::Single).expect("valid")
    }

    /// One group per layer, in declaration order.
    pub fn one_per_layer(net: &NetworkSpec, provenance: Provenance) -> Self {
        let n = net.layers().len();
        Self::new(net, (0..n).collect(), n, provenance).expect("valid")
    }

    pub fn group_of(&self, layer: usize) -> usize {
        self.assignment[layer]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn layer_ids(&self) -> &[String] {
        &self.layer_ids
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == group)
            .collect()
    }

    /// Checks that the mapping names exactly the layers of `net`, in order.
    pub fn check_matches(&self, net: &NetworkSpec) -> Result<()> {
        let ids: Vec<&str> = net.layers().iter().map(|l| l.id.as_str()).collect();
        let mine: Vec<&str> = self.layer_ids.iter().map(String::as_str).collect();
        if ids != mine {
            return Err(Error::Mapping(format!(
                "mapping covers layers {mine:?} but the network declares {ids:?}"
            )));
        }
        Ok(())
    }

    /// Mapping document, layers in declaration order.
    pub fn serialize(&self) -> String {
        let mut out = format!(
            "{MAPPING_HEADER}\nprovenance {}\ngroups {}\n",
            self.provenance, self.num_groups
        );
        for (id, g) in self.layer_ids.iter().zip(&self.assignment) {
            out.push_str(&format!("layer {id} {g}\n"));
        }
        out
    }

    pub fn parse(text: &str, net: &NetworkSpec) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, MAPPING_HEADER)) => {}
            _ => return Err(Error::Mapping(format!("missing '{MAPPING_HEADER}' header"))),
        }
        let mut provenance = None;
        let mut groups = None;
        let mut assigned: HashMap<String, usize> = HashMap::new();
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Mapping(format!("line {lineno}: cannot parse '{line}'"));
            match fields[..] {
                ["provenance", p] => provenance = Some(p.parse()?),
                ["groups", n] => groups = Some(n.parse::<usize>().map_err(|_| bad())?),
                ["layer", id, g] => {
                    if net.layer_index(id).is_none() {
                        return Err(Error::Mapping(format!(
                            "line {lineno}: layer '{id}' is not in the network"
                        )));
                    }
                    let g = g.parse::<usize>().map_err(|_| bad())?;
                    if assigned.insert(id.to_string(), g).is_some() {
                        return Err(Error::Mapping(format!(
                            "line {lineno}: layer '{id}' assigned twice"
                        )));
                    }
                }
                _ => return Err(bad()),
            }
        }
        let provenance = provenance.ok_or_else(|| Error::Mapping("missing provenance".into()))?;
        let groups = groups.ok_or_else(|| Error::Mapping("missing group count".into()))?;
        let mut assignment = Vec::with_capacity(net.layers().len());
        for layer in net.layers() {
            match assigned.get(&layer.id) {
                Some(&g) => assignment.push(g),
                None => {
                    return Err(Error::Mapping(format!("layer '{}' is not mapped", layer.id)))
                }
            }
        }
        Self::new(net, assignment, groups, provenance)
    }
}

/// A contiguous, wrap-around window of a group's parameters used as one
/// template for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateView {
    pub layer: usize,
    pub template_index: usize,
    pub start: usize,
    pub len: usize,
    pub wraps: bool,
}

impl TemplateView {
    /// Parameter indices covered, in order.
    pub fn indices(&self, theta_len: usize) -> impl Iterator<Item = usize> {
        let start = self.start;
        (0..self.len).map(move |t| (start + t) % theta_len)
    }
}

/// One cell of the budget partition.
#[derive(Debug, Clone)]
pub struct ParameterGroup {
    pub id: usize,
    pub theta: Tensor,
    /// Member layer indices in declaration order.
    pub members: Vec<usize>,
    cursor: usize,
}

impl ParameterGroup {
    pub fn new(id: usize, size: usize, members: Vec<usize>) -> Self {
        ParameterGroup {
            id,
            theta: Tensor::zeros(&[size]),
            members,
            cursor: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.theta.len()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn reset_cursor(&mut self) {
        self.cursor = 0;
    }

    /// Next `K̃` round-robin views for a layer of `weight_count` weights.
    pub fn take_templates(
        &mut self,
        layer: usize,
        weight_count: usize,
        max_templates: usize,
    ) -> Result<Vec<TemplateView>> {
        let size = self.size();
        if size < weight_count {
            return Err(Error::Contract(format!(
                "group {} has {size} parameters, fewer than the {weight_count} weights of layer \
                 {layer}; this layer must be upsampled",
                self.id
            )));
        }
        let k = template_count(size, weight_count, max_templates);
        let views = (0..k)
            .map(|t| {
                let start = (self.cursor + t * weight_count) % size;
                TemplateView {
                    layer,
                    template_index: t,
                    start,
                    len: weight_count,
                    wraps: start + weight_count > size,
                }
            })
            .collect();
        self.cursor = (self.cursor + k * weight_count) % size;
        Ok(views)
    }
}

/// `K̃ = max(1, min(⌊|θ_j| / |w_i|⌋, K))`.
pub fn template_count(theta_len: usize, weight_count: usize, max_templates: usize) -> usize {
    (theta_len / weight_count).min(max_templates).max(1)
}

/// Splits `total_params` across the mapping's groups proportionally to the
/// weight count each group serves; the remainder goes to the group with the
/// largest demand (lowest id on ties).
pub fn allocate_sizes(net: &NetworkSpec, mapping: &GroupMapping, total_params: usize) -> Result<Vec<usize>> {
    mapping.check_matches(net)?;
    let p = mapping.num_groups();
    if total_params < p {
        return Err(Error::Allocation {
            group: 0,
            reason: format!("cannot split {total_params} parameters across {p} groups"),
        });
    }
    let mut demand = vec![0u128; p];
    for (i, layer) in net.layers().iter().enumerate() {
        demand[mapping.group_of(i)] += layer.weight_count() as u128;
    }
    let total_demand: u128 = demand.iter().sum();
    let mut sizes: Vec<usize> = demand
        .iter()
        .map(|&s| (total_params as u128 * s / total_demand) as usize)
        .collect();
    let assigned: usize = sizes.iter().sum();
    let largest = (0..p)
        .max_by(|&a, &b| demand[a].cmp(&demand[b]).then(b.cmp(&a)))
        .expect("p >= 1");
    sizes[largest] += total_params - assigned;
    if let Some(g) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Allocation {
            group: g,
            reason: if demand[g] == 0 {
                "has no member layers".into()
            } else {
                "receives zero parameters".into()
            },
        });
    }
    Ok(sizes)
}

/// Sized, zero-initialized groups for a mapping.
pub fn allocate_groups(
    net: &NetworkSpec,
    mapping: &GroupMapping,
    total_params: usize,
) -> Result<Vec<ParameterGroup>> {
    let sizes = allocate_sizes(net, mapping, total_params)?;
    Ok(sizes
        .into_iter()
        .enumerate()
        .map(|(j, size)| ParameterGroup::new(j, size, mapping.members(j)))
        .collect())
}

/// How many template views cover each parameter index.
pub fn coverage(views: &[TemplateView], theta_len: usize) -> Vec<usize> {
    let mut counts = vec![0; theta_len];
    for v in views {
        for i in v.indices(theta_len) {
            counts[i] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspec::LayerSpec;

    /// Dense chain whose layer `i` has `counts[i]` weights.
    fn net(counts: &[usize]) -> NetworkSpec {
        let mut layers = Vec::new();
        let mut prev = 1;
        for (i, &c) in counts.iter().enumerate() {
            assert_eq!(c % prev, 0, "test nets need divisible counts");
            let out = c / prev;
            layers.push(LayerSpec::dense(&format!("l{i}"), out, prev));
            prev = out;
        }
        NetworkSpec::new(layers, vec![1], prev).unwrap()
    }

    #[test]
    fn single_group_gets_everything() {
        let n = net(&[4, 8]);
        assert_eq!(allocate_sizes(&n, &GroupMapping::single(&n), 1000).unwrap(), vec![1000]);
    }

    fn dense_chain(shapes: &[(usize, usize)]) -> NetworkSpec {
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, &(o, n))| LayerSpec::dense(&format!("l{i}"), o, n))
            .collect();
        NetworkSpec::new(layers, vec![shapes[0].1], shapes.last().unwrap().0).unwrap()
    }

    #[test]
    fn proportional_sizes() {
        // counts 100, 200, 100 mapped [0, 0, 1] -> demands [300, 100]
        let n = dense_chain(&[(100, 1), (2, 100), (50, 2)]);
        let m = GroupMapping::new(&n, vec![0, 0, 1], 2, Provenance::Manual).unwrap();
        assert_eq!(allocate_sizes(&n, &m, 1000).unwrap(), vec![750, 250]);
    }

    #[test]
    fn remainder_to_lowest_largest() {
        let n = NetworkSpec::new(
            vec![
                LayerSpec::dense("a", 1, 1),
                LayerSpec::dense("b", 1, 1),
                LayerSpec::dense("c", 1, 1),
            ],
            vec![1],
            1,
        )
        .unwrap();
        let m = GroupMapping::one_per_layer(&n, Provenance::Manual);
        assert_eq!(allocate_sizes(&n, &m, 10).unwrap(), vec![4, 3, 3]);
    }

    #[test]
    fn empty_group_is_an_error() {
        let n = net(&[4, 8]);
        let m = GroupMapping::new(&n, vec![0, 0], 2, Provenance::Manual).unwrap();
        let err = allocate_sizes(&n, &m, 100).unwrap_err().to_string();
        assert!(err.contains("group 1"), "{err}");
    }

    #[test]
    fn starved_group_is_an_error() {
        let n = dense_chain(&[(1000, 1), (1, 1000), (1, 1)]);
        let m = GroupMapping::new(&n, vec![0, 0, 1], 2, Provenance::Manual).unwrap();
        let err = allocate_sizes(&n, &m, 2).unwrap_err().to_string();
        assert!(err.contains("group 1") && err.contains("zero"), "{err}");
        assert!(allocate_sizes(&n, &m, 1).is_err());
    }

    #[test]
    fn template_counts() {
        assert_eq!(template_count(100, 30, 4), 3);
        assert_eq!(template_count(1000, 30, 4), 4);
        assert_eq!(template_count(20, 30, 4), 1);
    }

    #[test]
    fn round_robin_offsets() {
        let mut g = ParameterGroup::new(0, 100, vec![0, 1, 2]);
        let a = g.take_templates(0, 40, 1).unwrap();
        let b = g.take_templates(1, 40, 1).unwrap();
        assert_eq!((a[0].start, b[0].start), (0, 40));
        let c = g.take_templates(2, 40, 1).unwrap();
        assert_eq!(c[0].start, 80);
        assert!(c[0].wraps);
        let idx: Vec<usize> = c[0].indices(100).collect();
        assert_eq!(idx[19], 99);
        assert_eq!(idx[20], 0);
        assert_eq!(*idx.last().unwrap(), 19);

        let mut g = ParameterGroup::new(0, 100, vec![0]);
        let v = g.take_templates(0, 30, 3).unwrap();
        assert_eq!(v.iter().map(|v| v.start).collect::<Vec<_>>(), vec![0, 30, 60]);
        assert_eq!(g.cursor(), 90);
    }

    #[test]
    fn upsampling_case_is_a_contract_violation() {
        let mut g = ParameterGroup::new(0, 20, vec![0]);
        assert!(matches!(g.take_templates(0, 30, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn mapping_round_trip_and_errors() {
        let n = net(&[4, 8]);
        let m = GroupMapping::new(&n, vec![0, 0], 1, Provenance::Auto).unwrap();
        let text = m.serialize();
        assert_eq!(GroupMapping::parse(&text, &n).unwrap(), m);
        assert!(text.contains("provenance auto"));

        let ghost = text.replace("layer l1 0", "layer ghost 0");
        let err = GroupMapping::parse(&ghost, &n).unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");

        let missing = text.replace("layer l1 0\n", "");
        assert!(GroupMapping::parse(&missing, &n).is_err());
        let out_of_range = text.replace("layer l1 0", "layer l1 3");
        assert!(GroupMapping::parse(&out_of_range, &n).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn budget_is_exact(widths in prop::collection::vec(1usize..40, 2..7), extra in 0usize..5000, seed in any::<u64>()) {
                let shapes: Vec<(usize, usize)> = widths.windows(2).map(|w| (w[1], w[0])).collect();
                let n = dense_chain(&shapes);
                let layers = shapes.len();
                let p = 1 + (seed as usize % layers);
                let assignment = (0..layers).map(|i| i % p).collect();
                let m = GroupMapping::new(&n, assignment, p, Provenance::Random).unwrap();
                let total = p + extra;
                if let Ok(sizes) = allocate_sizes(&n, &m, total) {
                    prop_assert_eq!(sizes.iter().sum::<usize>(), total);
                    prop_assert!(sizes.iter().all(|&s| s >= 1));
                }
            }

            #[test]
            fn round_robin_balance(size in 1usize..300, layers in prop::collection::vec((1usize..300, 1usize..6), 1..8)) {
                let mut g = ParameterGroup::new(0, size, vec![]);
                let mut views = Vec::new();
                for (i, &(w, k)) in layers.iter().enumerate() {
                    if w > size { continue; }
                    let vs = g.take_templates(i, w, k).unwrap();
                    // within-layer disjointness
                    let c = coverage(&vs, size);
                    prop_assert!(c.iter().all(|&x| x <= 1));
                    views.extend(vs);
                }
                let c = coverage(&views, size);
                let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
                prop_assert!(hi - lo <= 1);
            }
        }
    }
}
