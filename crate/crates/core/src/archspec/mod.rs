//! Declarative description of the target network and its parameter budget.

mod config;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::ConvGeometry;
use crate::error::{Error, Result};

pub use config::{
    BudgetAmount, DataConfig, ExperimentConfig, MappingConfig, MappingMode, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    None,
    Softmax,
}

/// One layer's weight requirement.
///
/// Dense weights are `[out, in]`; conv weights are `[filters, channels, kh, kw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    #[serde(rename = "shape")]
    pub weight_shape: Vec<usize>,
    #[serde(rename = "bias", default = "yes")]
    pub has_bias: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl LayerSpec {
    /// ReLU-activated with a bias, unlike the document defaults.
    pub fn dense(id: &str, outputs: usize, inputs: usize) -> Self {
        LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Dense,
            weight_shape: vec![outputs, inputs],
            has_bias: true,
            activation: Activation::Relu,
            stride: 1,
            padding: 0,
        }
    }

    pub fn conv(id: &str, filters: usize, channels: usize, kh: usize, kw: usize) -> Self {
        LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Conv2d,
            weight_shape: vec![filters, channels, kh, kw],
            has_bias: true,
            activation: Activation::Relu,
            stride: 1,
            padding: 0,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_geometry(mut self, stride: usize, padding: usize) -> Self {
        self.stride = stride;
        self.padding = padding;
        self
    }

    /// `|w_i|`.
    pub fn weight_count(&self) -> usize {
        self.weight_shape.iter().product()
    }

    pub fn bias_count(&self) -> usize {
        if self.has_bias {
            self.weight_shape[0]
        } else {
            0
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight_shape[1..].iter().product()
    }
}

/// A sequential chain of layers with validated shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    num_classes: usize,
    /// Per-sample activation shape after each layer.
    output_shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawNetwork {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        let bad = |layer: &str, reason: String| Error::Layer {
            layer: layer.to_string(),
            reason,
        };
        if layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input_shape {input_shape:?}")));
        }
        let mut seen = HashSet::new();
        let mut current = input_shape.clone();
        let mut output_shapes = Vec::with_capacity(layers.len());
        for layer in &layers {
            if layer.id.is_empty() || layer.id.contains(char::is_whitespace) {
                return Err(bad(&layer.id, "layer ids must be nonempty without whitespace".into()));
            }
            if !seen.insert(layer.id.as_str()) {
                return Err(bad(&layer.id, "duplicate layer id".into()));
            }
            if layer.weight_shape.contains(&0) {
                return Err(bad(&layer.id, format!("zero extent in {:?}", layer.weight_shape)));
            }
            current = match layer.kind {
                LayerKind::Dense => {
                    let [out, inp] = layer.weight_shape[..] else {
                        return Err(bad(&layer.id, "dense shape must be [out, in]".into()));
                    };
                    let flat: usize = current.iter().product();
                    if flat != inp {
                        return Err(bad(
                            &layer.id,
                            format!("expects {inp} inputs but receives {current:?} ({flat})"),
                        ));
                    }
                    vec![out]
                }
                LayerKind::Conv2d => {
                    let [f, c, kh, kw] = layer.weight_shape[..] else {
                        return Err(bad(&layer.id, "conv2d shape must be [F, C, kh, kw]".into()));
                    };
                    let [ch, h, w] = current[..] else {
                        return Err(bad(
                            &layer.id,
                            format!("conv2d needs a [C, H, W] input, receives {current:?}"),
                        ));
                    };
                    if ch != c {
                        return Err(bad(
                            &layer.id,
                            format!("expects {c} channels but receives {ch}"),
                        ));
                    }
                    let oh = ConvGeometry::out_extent(h, kh, layer.stride, layer.padding);
                    let ow = ConvGeometry::out_extent(w, kw, layer.stride, layer.padding);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(bad(
                            &layer.id,
                            format!(
                                "kernel {kh}x{kw} stride {} padding {} does not tile {h}x{w}",
                                layer.stride, layer.padding
                            ),
                        ));
                    };
                    vec![f, oh, ow]
                }
            };
            output_shapes.push(current.clone());
        }
        let out: usize = current.iter().product();
        if out != num_classes {
            let last = &layers[layers.len() - 1].id;
            return Err(bad(
                last,
                format!("network emits {out} outputs but num_classes is {num_classes}"),
            ));
        }
        Ok(NetworkSpec {
            layers,
            input_shape,
            num_classes,
            output_shapes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.output_shapes[layer]
    }

    pub fn input_shape_of(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.input_shape
        } else {
            &self.output_shapes[layer - 1]
        }
    }

    pub fn weight_counts(&self) -> Vec<usize> {
        self.layers.iter().map(LayerSpec::weight_count).collect()
    }

    /// `Σ_i |w_i|`.
    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(LayerSpec::weight_count).sum()
    }

    pub fn total_biases(&self) -> usize {
        self.layers.iter().map(LayerSpec::bias_count).sum()
    }

    /// Multiply-adds of layer `i` for one sample.
    pub fn layer_macs(&self, i: usize) -> u64 {
        let l = &self.layers[i];
        match l.kind {
            LayerKind::Dense => l.weight_count() as u64,
            LayerKind::Conv2d => {
                let out = &self.output_shapes[i];
                l.weight_count() as u64 * (out[1] * out[2]) as u64
            }
        }
    }

    /// Multiply-adds of one forward pass for one sample.
    pub fn forward_macs(&self) -> u64 {
        (0..self.layers.len()).map(|i| self.layer_macs(i)).sum()
    }

    pub(crate) fn to_raw(&self) -> RawNetwork {
        RawNetwork {
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            layers: self.layers.clone(),
        }
    }

    pub(crate) fn from_raw(raw: RawNetwork) -> Result<Self> {
        Self::new(raw.layers, raw.input_shape, raw.num_classes)
    }

    /// Renders the network as a standalone `[network]` document.
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Doc {
            network: RawNetwork,
        }
        toml::to_string(&Doc {
            network: self.to_raw(),
        })
        .expect("network serializes")
    }
}

/// Parses a document holding (at least) a `[network]` section.
pub fn parse_network_config(text: &str) -> Result<NetworkSpec> {
    #[derive(Deserialize)]
    struct Doc {
        network: RawNetwork,
    }
    let doc: Doc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    NetworkSpec::from_raw(doc.network)
}

/// `max_i |w_i|`.
pub fn largest_layer_weights(net: &NetworkSpec) -> usize {
    net.layers()
        .iter()
        .map(LayerSpec::weight_count)
        .max()
        .expect("network has layers")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    WAvg,
    Emb,
    Rr,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsampler {
    Repeat,
    Inter,
    Mask,
}

impl fmt::Display for Combiner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combiner::WAvg => "wavg",
            Combiner::Emb => "emb",
            Combiner::Rr => "rr",
            Combiner::Avg => "avg",
        })
    }
}

impl fmt::Display for Upsampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Upsampler::Repeat => "repeat",
            Upsampler::Inter => "inter",
            Upsampler::Mask => "mask",
        })
    }
}

/// Resolved budget and weight-generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSpec {
    /// `|θ|`, excluding biases.
    pub total_params: usize,
    pub num_groups: usize,
    pub max_templates: usize,
    pub combiner: Combiner,
    pub upsampler: Upsampler,
    pub mask_window: usize,
    pub emb_dim: usize,
    pub emb_softmax: bool,
}

pub const DEFAULT_TEMPLATES: usize = 8;
pub const DEFAULT_MASK_WINDOW: usize = 9;
pub const DEFAULT_EMB_DIM: usize = 24;

impl BudgetSpec {
    pub fn new(total_params: usize) -> Self {
        BudgetSpec {
            total_params,
            num_groups: 1,
            max_templates: DEFAULT_TEMPLATES,
            combiner: Combiner::WAvg,
            upsampler: Upsampler::Mask,
            mask_window: DEFAULT_MASK_WINDOW,
            emb_dim: DEFAULT_EMB_DIM,
            emb_softmax: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("budget: {what} must be >= 1")))
            }
        };
        check(self.total_params >= 1, "total_params")?;
        check(self.num_groups >= 1, "groups")?;
        check(self.max_templates >= 1, "templates")?;
        check(self.mask_window >= 1, "mask_window")?;
        check(self.emb_dim >= 1, "emb_dim")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    #[serde(rename = "LB")]
    Low,
    #[serde(rename = "HB")]
    High,
    #[serde(rename = "EXACT")]
    Exact,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Low => "LB",
            Regime::High => "HB",
            Regime::Exact => "EXACT",
        })
    }
}

pub fn classify_regime(net: &NetworkSpec, budget: &BudgetSpec) -> Regime {
    classify_count(net.total_weights(), budget.total_params)
}

pub(crate) fn classify_count(weights: usize, params: usize) -> Regime {
    match params.cmp(&weights) {
        std::cmp::Ordering::Less => Regime::Low,
        std::cmp::Ordering::Greater => Regime::High,
        std::cmp::Ordering::Equal => Regime::Exact,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MLP: &str = r#"
[network]
input_shape = [784]
num_classes = 10

[[network.layers]]
id = "fc1"
kind = "dense"
shape = [256, 784]
activation = "relu"

[[network.layers]]
id = "fc2"
kind = "dense"
shape = [10, 256]
"#;

    #[test]
    fn parses_mlp() {
        let net = parse_network_config(MLP).unwrap();
        assert_eq!(net.weight_counts(), vec![200704, 2560]);
        assert_eq!(largest_layer_weights(&net), 200704);
        assert_eq!(net.total_biases(), 266);
    }

    #[test]
    fn duplicate_id_is_named() {
        let doc = MLP.replace("\"fc2\"", "\"fc1\"");
        let err = parse_network_config(&doc).unwrap_err().to_string();
        assert!(err.contains("fc1") && err.contains("duplicate"), "{err}");
    }

    #[test]
    fn unknown_kind_rejected() {
        let doc = MLP.replace("kind = \"dense\"\nshape = [10", "kind = \"gru\"\nshape = [10");
        assert!(parse_network_config(&doc).is_err());
    }

    #[test]
    fn non_composable_shapes_rejected() {
        let doc = MLP.replace("[10, 256]", "[10, 255]");
        let err = parse_network_config(&doc).unwrap_err().to_string();
        assert!(err.contains("fc2"), "{err}");
    }

    #[test]
    fn conv_stack_counts() {
        let net = NetworkSpec::new(
            vec![
                LayerSpec::conv("c1", 16, 3, 3, 3).with_geometry(1, 1),
                LayerSpec::conv("c2", 16, 16, 3, 3).with_geometry(1, 1),
                LayerSpec::dense("fc", 10, 16 * 4 * 4).with_activation(Activation::None),
            ],
            vec![3, 4, 4],
            10,
        )
        .unwrap();
        assert_eq!(&net.weight_counts()[..2], &[432, 2304]);
        assert_eq!(largest_layer_weights(&net), 2560);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let err = NetworkSpec::new(
            vec![
                LayerSpec::conv("c1", 16, 3, 3, 3),
                LayerSpec::conv("c2", 16, 8, 3, 3),
            ],
            vec![3, 8, 8],
            16 * 4 * 4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("c2"));
    }

    #[test]
    fn regimes() {
        let r = |p| classify_count(1000, p);
        assert_eq!(r(250), Regime::Low);
        assert_eq!(r(4000), Regime::High);
        assert_eq!(r(1000), Regime::Exact);
    }

    #[test]
    fn largest_layer_ties() {
        let net = NetworkSpec::new(
            vec![
                LayerSpec::conv("a", 16, 3, 3, 3).with_geometry(1, 1),
                LayerSpec::conv("b", 16, 16, 3, 3).with_geometry(1, 1),
                LayerSpec::conv("c", 16, 16, 3, 3).with_geometry(1, 1),
            ],
            vec![3, 1, 1],
            16,
        )
        .unwrap();
        assert_eq!(net.weight_counts(), vec![432, 2304, 2304]);
        assert_eq!(largest_layer_weights(&net), 2304);
    }

    #[test]
    fn single_layer_is_its_own_largest() {
        let net =
            NetworkSpec::new(vec![LayerSpec::conv("a", 16, 3, 3, 3)], vec![3, 3, 3], 16).unwrap();
        assert_eq!(largest_layer_weights(&net), 432);
    }

    #[test]
    fn toml_round_trip() {
        let net = parse_network_config(MLP).unwrap();
        let again = parse_network_config(&net.to_toml()).unwrap();
        assert_eq!(net, again);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_net() -> impl Strategy<Value = NetworkSpec> {
            (1usize..6, prop::collection::vec(1usize..40, 1..6)).prop_map(|(input, widths)| {
                let mut prev = input;
                let mut layers = Vec::new();
                for (i, w) in widths.iter().enumerate() {
                    layers.push(LayerSpec::dense(&format!("l{i}"), *w, prev).with_bias(i % 2 == 0));
                    prev = *w;
                }
                NetworkSpec::new(layers, vec![input], prev).unwrap()
            })
        }

        proptest! {
            #[test]
            fn serialize_round_trip(net in arb_net()) {
                prop_assert_eq!(parse_network_config(&net.to_toml()).unwrap(), net);
            }

            #[test]
            fn regime_matches_independent_sum(net in arb_net(), budget in 1usize..5000) {
                let mut total = 0usize;
                for l in net.layers() {
                    let mut c = 1;
                    for d in &l.weight_shape { c *= d; }
                    total += c;
                }
                let r = classify_regime(&net, &BudgetSpec::new(budget));
                let expect = if budget < total { Regime::Low } else if budget > total { Regime::High } else { Regime::Exact };
                prop_assert_eq!(r, expect);
            }
        }
    }
}
