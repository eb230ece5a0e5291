//! The feature-fusion model: a convolutional encoder/decoder pair shared by
//! every domain plus a small classifier head on the target features.
//!
//! Training minimizes L = λ_R·L_R + λ_D·L_D + λ_C·L_C where L_R is the summed
//! per-domain reconstruction error, L_D the MMD distance between pooled
//! source features and target features, and L_C the target cross-entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernel::{DomainPooling, KernelSpec};
use crate::ops;
use crate::rng;
use crate::tensor::{Param, Tensor};

/// Width of the classifier's hidden layer.
pub const CLASSIFIER_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DffArch {
    /// Input image shape (C, H, W); H and W must be divisible by 4.
    pub input: (usize, usize, usize),
    /// Channel widths after the first and second encoder convolutions.
    pub encoder_channels: (usize, usize),
    /// Number of target classes, at least 2.
    pub num_classes: usize,
}

impl Default for DffArch {
    fn default() -> Self {
        DffArch { input: (1, 64, 64), encoder_channels: (16, 32), num_classes: 2 }
    }
}

impl DffArch {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("input shape has a zero extent: {:?}", self.input)));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} not divisible by 4 (two pooling stages)"
            )));
        }
        let (c1, c2) = self.encoder_channels;
        if c1 == 0 || c2 == 0 {
            return Err(Error::config("encoder channel widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Length of the flattened bottleneck feature vector.
    pub fn feature_dim(&self) -> usize {
        let (_, h, w) = self.input;
        self.encoder_channels.1 * (h / 4) * (w / 4)
    }
}

/// Loss weights (λ_R, λ_D, λ_C).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambda {
    pub r: f64,
    pub d: f64,
    pub c: f64,
}

impl Default for Lambda {
    fn default() -> Self {
        Lambda { r: 1.0, d: 1.0, c: 1.0 }
    }
}

impl Lambda {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_r", self.r), ("lambda_d", self.d), ("lambda_c", self.c)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.r == 0.0 && self.d == 0.0 && self.c == 0.0 {
            return Err(Error::config("at least one loss weight must be nonzero"));
        }
        Ok(())
    }
}

/// The three loss terms and their weighted total at one training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_r: f64,
    pub l_d: f64,
    pub l_c: f64,
    pub l: f64,
    pub iteration: u64,
}

/// Weighted total with every term checked finite; the offending term is
/// named on failure.
pub fn total_loss(l_r: f64, l_d: f64, l_c: f64, lambda: Lambda, iteration: u64) -> Result<LossBundle> {
    for (name, v) in [("L_R", l_r), ("L_D", l_d), ("L_C", l_c)] {
        if !v.is_finite() {
            return Err(Error::non_finite(format!("loss term {name} is {v} at iteration {iteration}")));
        }
    }
    let l = lambda.r * l_r + lambda.d * l_d + lambda.c * l_c;
    Ok(LossBundle { l_r, l_d, l_c, l, iteration })
}

/// Summed per-domain mean squared reconstruction error. Each domain entry is
/// a batch of (original, reconstruction) pairs.
pub fn reconstruction_loss(domains: &[Vec<(&Tensor, &Tensor)>]) -> Result<f64> {
    if domains.is_empty() || domains.iter().any(|d| d.is_empty()) {
        return Err(Error::invalid("reconstruction_loss: empty domain batch"));
    }
    let mut total = 0.0;
    for batch in domains {
        let mut domain_sum = 0.0;
        for (x, xh) in batch {
            if x.shape() != xh.shape() {
                return Err(Error::shape(
                    "reconstruction_loss",
                    format!("{:?}", x.shape()),
                    format!("{:?}", xh.shape()),
                ));
            }
            let sq: f64 = x
                .data()
                .iter()
                .zip(xh.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            domain_sum += sq / x.len() as f64;
        }
        total += domain_sum / batch.len() as f64;
    }
    Ok(total)
}

/// Mean softmax cross-entropy over a batch of (logits, true class) pairs.
pub fn classification_loss(batch: &[(&Tensor, usize)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("classification_loss: empty batch"));
    }
    let mut total = 0.0;
    for (logits, label) in batch {
        let z = logits.data();
        if *label >= z.len() {
            return Err(Error::invalid(format!(
                "classification_loss: label {label} out of range for {} classes",
                z.len()
            )));
        }
        total += ops::log_sum_exp(z) - z[*label];
    }
    Ok(total / batch.len() as f64)
}

/// How the MMD kernel bandwidths are chosen each step.
#[derive(Debug, Clone)]
pub enum KernelChoice {
    Fixed(KernelSpec),
    /// Median-heuristic bandwidths recomputed from the step's pooled feature
    /// rows; treated as constants by the gradient.
    MedianHeuristic,
}

/// Ids of the parameter leaves inserted into one graph, in declaration order.
pub struct DffNodes {
    ids: Vec<NodeId>,
}

impl DffNodes {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

const ENCODER_RANGE: std::ops::Range<usize> = 0..4;
const DECODER_RANGE: std::ops::Range<usize> = 4..10;
const CLASSIFIER_RANGE: std::ops::Range<usize> = 10..14;

#[derive(Debug, Clone)]
pub struct DffParams {
    arch: DffArch,
    params: Vec<Param>,
}

impl DffParams {
    /// Fan-in-scaled uniform initialization (±sqrt(6/fan_in)), biases zero.
    /// Encoder, decoder and classifier draw from separate seeded streams, so
    /// each block's initial values are independent of the others' sizes.
    pub fn init(arch: DffArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (c_img, _, _) = arch.input;
        let (c1, c2) = arch.encoder_channels;
        let feat = arch.feature_dim();
        let k = arch.num_classes;

        let mut enc = rng::stream(seed, rng::STREAM_ENCODER_INIT);
        let mut dec = rng::stream(seed, rng::STREAM_DECODER_INIT);
        let mut cls = rng::stream(seed, rng::STREAM_CLASSIFIER_INIT);

        let params = vec![
            conv_init(&mut enc, "encoder.conv1.kernels", c1, c_img),
            zero_bias("encoder.conv1.bias", c1),
            conv_init(&mut enc, "encoder.conv2.kernels", c2, c1),
            zero_bias("encoder.conv2.bias", c2),
            conv_init(&mut dec, "decoder.conv1.kernels", c2, c2),
            zero_bias("decoder.conv1.bias", c2),
            conv_init(&mut dec, "decoder.conv2.kernels", c1, c2),
            zero_bias("decoder.conv2.bias", c1),
            conv_init(&mut dec, "decoder.conv3.kernels", c_img, c1),
            zero_bias("decoder.conv3.bias", c_img),
            dense_init(&mut cls, "classifier.dense1.weights", CLASSIFIER_HIDDEN, feat),
            zero_bias("classifier.dense1.bias", CLASSIFIER_HIDDEN),
            dense_init(&mut cls, "classifier.dense2.weights", k, CLASSIFIER_HIDDEN),
            zero_bias("classifier.dense2.bias", k),
        ];
        Ok(DffParams { arch, params })
    }

    pub fn from_parts(arch: DffArch, params: Vec<Param>) -> Result<Self> {
        arch.validate()?;
        let reference = Self::init(arch.clone(), 0)?;
        if params.len() != reference.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (got, want) in params.iter().zip(&reference.params) {
            if got.value.shape() != want.value.shape() {
                return Err(Error::shape(
                    format!("parameter {}", want.name),
                    format!("{:?}", want.value.shape()),
                    format!("{:?}", got.value.shape()),
                ));
            }
        }
        Ok(DffParams { arch, params })
    }

    pub fn arch(&self) -> &DffArch {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Number of encoder parameter tensors at the front of the declaration
    /// order (used to address θ_E / θ_D / Θ_C slices).
    pub fn encoder_indices() -> std::ops::Range<usize> {
        ENCODER_RANGE
    }

    pub fn decoder_indices() -> std::ops::Range<usize> {
        DECODER_RANGE
    }

    pub fn classifier_indices() -> std::ops::Range<usize> {
        CLASSIFIER_RANGE
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn insert(&self, g: &mut Graph) -> DffNodes {
        DffNodes { ids: self.params.iter().map(|p| g.param(p.value.clone())).collect() }
    }

    /// conv(3x3, pad 1) → relu → pool → conv → relu → pool → flatten.
    pub fn encode(&self, g: &mut Graph, nodes: &DffNodes, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.arch.input;
        if g.value(x).shape() != [c, h, w] {
            return Err(Error::shape(
                "encode",
                format!("({c}, {h}, {w})"),
                format!("{:?}", g.value(x).shape()),
            ));
        }
        let ids = &nodes.ids;
        let y = g.conv2d(x, ids[0], 1, 1)?;
        let y = g.bias_channels(y, ids[1])?;
        let y = g.relu(y);
        let y = g.maxpool2(y)?;
        let y = g.conv2d(y, ids[2], 1, 1)?;
        let y = g.bias_channels(y, ids[3])?;
        let y = g.relu(y);
        let y = g.maxpool2(y)?;
        g.reshape(y, vec![self.arch.feature_dim()])
    }

    /// unflatten → conv → relu → upsample → conv → relu → upsample →
    /// conv → sigmoid; the final convolution restores the image channels.
    pub fn decode(&self, g: &mut Graph, nodes: &DffNodes, f: NodeId) -> Result<NodeId> {
        let feat = self.arch.feature_dim();
        if g.value(f).shape() != [feat] {
            return Err(Error::shape(
                "decode",
                format!("({feat},)"),
                format!("{:?}", g.value(f).shape()),
            ));
        }
        let (_, h, w) = self.arch.input;
        let c2 = self.arch.encoder_channels.1;
        let ids = &nodes.ids;
        let y = g.reshape(f, vec![c2, h / 4, w / 4])?;
        let y = g.conv2d(y, ids[4], 1, 1)?;
        let y = g.bias_channels(y, ids[5])?;
        let y = g.relu(y);
        let y = g.upsample2(y)?;
        let y = g.conv2d(y, ids[6], 1, 1)?;
        let y = g.bias_channels(y, ids[7])?;
        let y = g.relu(y);
        let y = g.upsample2(y)?;
        let y = g.conv2d(y, ids[8], 1, 1)?;
        let y = g.bias_channels(y, ids[9])?;
        Ok(g.sigmoid(y))
    }

    /// dense(feature → hidden) → relu → dense(hidden → K); raw logits.
    pub fn classify(&self, g: &mut Graph, nodes: &DffNodes, f: NodeId) -> Result<NodeId> {
        let feat = self.arch.feature_dim();
        if g.value(f).shape() != [feat] {
            return Err(Error::shape(
                "classify",
                format!("({feat},)"),
                format!("{:?}", g.value(f).shape()),
            ));
        }
        let ids = &nodes.ids;
        let y = g.dense(f, ids[10], ids[11])?;
        let y = g.relu(y);
        g.dense(y, ids[12], ids[13])
    }

    /// Predicted class of one image: argmax of the logits, lowest index on
    /// ties.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let mut g = Graph::new();
        let nodes = self.insert(&mut g);
        let xn = g.constant(x.clone());
        let f = self.encode(&mut g, &nodes, xn)?;
        let logits = self.classify(&mut g, &nodes, f)?;
        let z = g.value(logits).data();
        let mut best = 0;
        for (i, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Builds the full per-batch loss graph: encodes and decodes every
    /// source and target sample, classifies the target samples, and forms
    /// L_R, L_D, L_C. The backward objective contains only the terms whose
    /// weight is nonzero, so zero-weighted terms are still reported but can
    /// never perturb the update, not even by rounding.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_graph(
        &self,
        sources: &[Vec<Tensor>],
        target: &[Tensor],
        target_labels: &[usize],
        lambda: Lambda,
        kernel: &KernelChoice,
        pooling: DomainPooling,
        iteration: u64,
    ) -> Result<LossGraph> {
        lambda.validate().map_err(|e| Error::invalid(e.to_string()))?;
        if sources.is_empty() || sources.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("loss_graph: every source domain needs a nonempty batch"));
        }
        if target.is_empty() {
            return Err(Error::invalid("loss_graph: empty target batch"));
        }
        if target.len() != target_labels.len() {
            return Err(Error::invalid(format!(
                "loss_graph: {} target samples but {} labels",
                target.len(),
                target_labels.len()
            )));
        }
        let mut g = Graph::new();
        let nodes = self.insert(&mut g);

        let mut source_features: Vec<Vec<NodeId>> = Vec::with_capacity(sources.len());
        let mut source_inputs: Vec<Vec<NodeId>> = Vec::with_capacity(sources.len());
        for batch in sources {
            let mut feats = Vec::with_capacity(batch.len());
            let mut ins = Vec::with_capacity(batch.len());
            for x in batch {
                let xn = g.constant(x.clone());
                feats.push(self.encode(&mut g, &nodes, xn)?);
                ins.push(xn);
            }
            source_features.push(feats);
            source_inputs.push(ins);
        }
        let mut target_features = Vec::with_capacity(target.len());
        let mut target_inputs = Vec::with_capacity(target.len());
        for x in target {
            let xn = g.constant(x.clone());
            target_features.push(self.encode(&mut g, &nodes, xn)?);
            target_inputs.push(xn);
        }

        // L_R: per-domain mean of per-sample MSE, summed over all domains
        // (sources first, target last).
        let mut domain_terms = Vec::with_capacity(sources.len() + 1);
        for (feats, ins) in source_features.iter().zip(&source_inputs) {
            domain_terms.push(self.domain_mse(&mut g, &nodes, feats, ins)?);
        }
        domain_terms.push(self.domain_mse(&mut g, &nodes, &target_features, &target_inputs)?);
        let l_r_node = g.add_n(&domain_terms)?;

        // L_D between source and target feature rows.
        let spec = match kernel {
            KernelChoice::Fixed(spec) => spec.clone(),
            KernelChoice::MedianHeuristic => {
                let d = self.arch.feature_dim();
                let mut rows = Vec::new();
                for feats in &source_features {
                    for &f in feats {
                        rows.extend_from_slice(g.value(f).data());
                    }
                }
                for &f in &target_features {
                    rows.extend_from_slice(g.value(f).data());
                }
                KernelSpec::median_heuristic(&rows, d)?
            }
        };
        let target_rows = g.row_stack(&target_features)?;
        let l_d_node = match pooling {
            DomainPooling::Pooled => {
                let all: Vec<NodeId> = source_features.iter().flatten().copied().collect();
                let source_rows = g.row_stack(&all)?;
                g.mmd_loss(source_rows, target_rows, &spec)?
            }
            DomainPooling::AveragePerDomain => {
                let mut terms = Vec::with_capacity(source_features.len());
                for feats in &source_features {
                    let rows = g.row_stack(feats)?;
                    terms.push(g.mmd_loss(rows, target_rows, &spec)?);
                }
                let sum = g.add_n(&terms)?;
                g.scale(sum, 1.0 / source_features.len() as f64)
            }
        };

        // L_C over the labelled target batch.
        let mut ce_terms = Vec::with_capacity(target.len());
        for (&f, &label) in target_features.iter().zip(target_labels) {
            let logits = self.classify(&mut g, &nodes, f)?;
            ce_terms.push(g.cross_entropy(logits, label)?);
        }
        let ce_sum = g.add_n(&ce_terms)?;
        let l_c_node = g.scale(ce_sum, 1.0 / target.len() as f64);

        let bundle = total_loss(
            g.value(l_r_node).item(),
            g.value(l_d_node).item(),
            g.value(l_c_node).item(),
            lambda,
            iteration,
        )?;

        let mut weighted = Vec::new();
        for (weight, node) in [(lambda.r, l_r_node), (lambda.d, l_d_node), (lambda.c, l_c_node)] {
            if weight != 0.0 {
                weighted.push(g.scale(node, weight));
            }
        }
        let objective = match weighted.len() {
            0 => unreachable!("lambda validation requires a nonzero weight"),
            1 => weighted[0],
            _ => g.add_n(&weighted)?,
        };

        Ok(LossGraph {
            graph: g,
            param_ids: nodes.ids,
            objective,
            l_r: l_r_node,
            l_d: l_d_node,
            l_c: l_c_node,
            bundle,
        })
    }

    fn domain_mse(
        &self,
        g: &mut Graph,
        nodes: &DffNodes,
        features: &[NodeId],
        inputs: &[NodeId],
    ) -> Result<NodeId> {
        let mut terms = Vec::with_capacity(features.len());
        for (&f, &x) in features.iter().zip(inputs) {
            let xh = self.decode(g, nodes, f)?;
            terms.push(g.mse_loss(xh, x)?);
        }
        let sum = g.add_n(&terms)?;
        Ok(g.scale(sum, 1.0 / features.len() as f64))
    }
}

/// One batch's evaluated loss graph: differentiate `objective`, read the
/// parameter gradients off `param_ids`.
pub struct LossGraph {
    pub graph: Graph,
    pub param_ids: Vec<NodeId>,
    pub objective: NodeId,
    pub l_r: NodeId,
    pub l_d: NodeId,
    pub l_c: NodeId,
    pub bundle: LossBundle,
}

fn conv_init(rng: &mut rand_chacha::ChaCha8Rng, name: &str, c_out: usize, c_in: usize) -> Param {
    let fan_in = (c_in * 9) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..c_out * c_in * 9)
        .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
        .collect();
    Param::new(name, Tensor::from_parts(vec![c_out, c_in, 3, 3], data))
}

fn dense_init(rng: &mut rand_chacha::ChaCha8Rng, name: &str, m: usize, n: usize) -> Param {
    let bound = (6.0 / n as f64).sqrt();
    let data = (0..m * n)
        .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
        .collect();
    Param::new(name, Tensor::from_parts(vec![m, n], data))
}

fn zero_bias(name: &str, n: usize) -> Param {
    Param::new(name, Tensor::zeros(vec![n]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> DffArch {
        DffArch { input: (1, 8, 8), encoder_channels: (2, 3), num_classes: 2 }
    }

    #[test]
    fn arch_validation() {
        assert!(tiny_arch().validate().is_ok());
        let bad = DffArch { input: (1, 6, 8), ..tiny_arch() };
        assert!(bad.validate().is_err());
        let bad = DffArch { num_classes: 1, ..tiny_arch() };
        assert!(bad.validate().is_err());
        assert_eq!(tiny_arch().feature_dim(), 3 * 2 * 2);
    }

    #[test]
    fn encode_output_length_matches_arch() {
        let params = DffParams::init(tiny_arch(), 1).unwrap();
        let mut g = Graph::new();
        let nodes = params.insert(&mut g);
        let x = g.constant(Tensor::full(vec![1, 8, 8], 0.3));
        let f = params.encode(&mut g, &nodes, x).unwrap();
        assert_eq!(g.value(f).shape(), &[12]);
    }

    #[test]
    fn zero_input_zero_bias_encodes_to_zero() {
        let params = DffParams::init(tiny_arch(), 1).unwrap();
        let mut g = Graph::new();
        let nodes = params.insert(&mut g);
        let x = g.constant(Tensor::zeros(vec![1, 8, 8]));
        let f = params.encode(&mut g, &nodes, x).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_shape_and_range() {
        let params = DffParams::init(tiny_arch(), 2).unwrap();
        let mut g = Graph::new();
        let nodes = params.insert(&mut g);
        let f = g.constant(Tensor::full(vec![12], 0.5));
        let xh = params.decode(&mut g, &nodes, f).unwrap();
        assert_eq!(g.value(xh).shape(), &[1, 8, 8]);
        assert!(g.value(xh).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_everything_decodes_to_half() {
        let arch = tiny_arch();
        let mut params = DffParams::init(arch, 3).unwrap();
        for p in params.params_mut() {
            let len = p.value.len();
            let shape = p.value.shape().to_vec();
            p.value = Tensor::new(shape, vec![0.0; len]).unwrap();
        }
        let mut g = Graph::new();
        let nodes = params.insert(&mut g);
        let f = g.constant(Tensor::zeros(vec![12]));
        let xh = params.decode(&mut g, &nodes, f).unwrap();
        assert!(g.value(xh).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn classify_with_zero_weights_returns_bias() {
        let arch = tiny_arch();
        let mut params = DffParams::init(arch, 4).unwrap();
        for p in params.params_mut() {
            if p.name.starts_with("classifier") {
                let len = p.value.len();
                let shape = p.value.shape().to_vec();
                let fill = if p.name == "classifier.dense2.bias" { 0.75 } else { 0.0 };
                p.value = Tensor::new(shape, vec![fill; len]).unwrap();
            }
        }
        let mut g = Graph::new();
        let nodes = params.insert(&mut g);
        let f = g.constant(Tensor::full(vec![12], 0.2));
        let logits = params.classify(&mut g, &nodes, f).unwrap();
        assert_eq!(g.value(logits).data(), &[0.75, 0.75]);
    }

    #[test]
    fn reconstruction_loss_examples() {
        let x = Tensor::full(vec![1, 2, 2], 0.5);
        let same = vec![vec![(&x, &x)]];
        assert_eq!(reconstruction_loss(&same).unwrap(), 0.0);

        let xh = Tensor::full(vec![1, 2, 2], 1.0);
        let off = vec![vec![(&x, &xh)]];
        assert!((reconstruction_loss(&off).unwrap() - 0.25).abs() <= 1e-15);

        // two domains add their per-domain means
        let both = vec![vec![(&x, &xh)], vec![(&x, &x)]];
        assert!((reconstruction_loss(&both).unwrap() - 0.25).abs() <= 1e-15);

        assert!(reconstruction_loss(&[]).is_err());
        assert!(reconstruction_loss(&[vec![]]).is_err());
    }

    #[test]
    fn classification_loss_examples() {
        let z = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let got = classification_loss(&[(&z, 0)]).unwrap();
        assert!((got - 2.0f64.ln()).abs() <= 1e-12);

        let z = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let got = classification_loss(&[(&z, 2)]).unwrap();
        let want = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((got - want).abs() <= 1e-12);

        let z = Tensor::new(vec![2], vec![20.0, -20.0]).unwrap();
        let got = classification_loss(&[(&z, 0)]).unwrap();
        assert!((0.0..=1e-8).contains(&got));

        assert!(classification_loss(&[(&z, 5)]).is_err());
        assert!(classification_loss(&[]).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(0.5, 0.2, 0.3, Lambda::default(), 0).unwrap();
        assert!((b.l - 1.0).abs() <= 1e-15);
        let b = total_loss(1.0, 1.0, 1.0, Lambda { r: 2.0, d: 0.5, c: 1.0 }, 3).unwrap();
        assert!((b.l - 3.5).abs() <= 1e-15);
        assert_eq!(b.iteration, 3);
        let err = total_loss(f64::NAN, 0.0, 0.0, Lambda::default(), 0).unwrap_err();
        assert!(err.to_string().contains("L_R"));
    }

    #[test]
    fn init_is_seeded_and_blockwise_independent() {
        let arch = tiny_arch();
        let a = DffParams::init(arch.clone(), 9).unwrap();
        let b = DffParams::init(arch.clone(), 9).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value.data(), pb.value.data());
        }
        // a different classifier size must not disturb the encoder draw
        let wider = DffArch { num_classes: 3, ..arch };
        let c = DffParams::init(wider, 9).unwrap();
        assert_eq!(a.params()[0].value.data(), c.params()[0].value.data());
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let params = DffParams::init(DffArch::default(), 11).unwrap();
        let k0 = &params.params()[0];
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(k0.value.data().iter().all(|v| v.abs() <= bound));
        let w = &params.params()[10];
        let bound = (6.0f64 / DffArch::default().feature_dim() as f64).sqrt();
        assert!(w.value.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn loss_graph_bundle_is_consistent() {
        let params = DffParams::init(tiny_arch(), 5).unwrap();
        let s0: Vec<Tensor> = (0..2).map(|i| Tensor::full(vec![1, 8, 8], 0.2 + 0.1 * i as f64)).collect();
        let s1: Vec<Tensor> = (0..2).map(|i| Tensor::full(vec![1, 8, 8], 0.6 + 0.1 * i as f64)).collect();
        let t: Vec<Tensor> = (0..2).map(|i| Tensor::full(vec![1, 8, 8], 0.4 + 0.1 * i as f64)).collect();
        let spec = KernelSpec::rbf(vec![1.0]).unwrap();
        let lg = params
            .loss_graph(
                &[s0, s1],
                &t,
                &[0, 1],
                Lambda::default(),
                &KernelChoice::Fixed(spec),
                DomainPooling::Pooled,
                7,
            )
            .unwrap();
        let b = lg.bundle;
        assert_eq!(b.iteration, 7);
        assert!(b.l_r > 0.0 && b.l_d >= 0.0 && b.l_c > 0.0);
        assert!((b.l - (b.l_r + b.l_d + b.l_c)).abs() <= 1e-12);
        assert!((lg.graph.value(lg.objective).item() - b.l).abs() <= 1e-12);
    }

    #[test]
    fn prediction_is_argmax() {
        let params = DffParams::init(tiny_arch(), 6).unwrap();
        let x = Tensor::full(vec![1, 8, 8], 0.4);
        let class = params.predict(&x).unwrap();
        assert!(class < 2);
    }
}
