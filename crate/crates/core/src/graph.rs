//! Tape-based reverse-mode differentiation.
//!
//! A `Graph` is an append-only tape: every operator call evaluates eagerly,
//! records the operator kind plus its input node ids, and returns the id of
//! the new node. `backward` walks the tape in reverse, accumulating adjoints.
//! Gradient buffers are allocated lazily, so nodes that do not feed the loss
//! never receive one and constant leaves are never touched.

use crate::error::{Error, Result};
use crate::kernel::{self, KernelSpec};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node on the tape. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pixels whose floored log-probability falls below this stop contributing
/// gradient; keeps the weighted pixel loss finite for saturated logits.
pub const LOG_PROB_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { padding: usize, stride: usize },
    BiasChannels,
    MaxPool2 { argmax: Vec<u32> },
    Upsample2,
    Dense,
    Relu,
    Sigmoid,
    Add,
    Mul,
    Scale { factor: f64 },
    AddN,
    Reshape,
    ConcatChannels,
    RowStack,
    Sum,
    Mean,
    MseLoss,
    CrossEntropy { label: usize },
    PixelCrossEntropy { labels: Vec<u8>, weights: Vec<f64> },
    MmdLoss { spec: KernelSpec },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    trainable: bool,
}

impl Node {
    fn is_constant_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf) && !self.trainable
    }
}

/// Per-node gradients produced by [`Graph::backward`]. Only trainable leaves
/// and interior nodes reachable from the loss carry buffers; everything else
/// reads as `None` (interior buffers are dropped once consumed, so after a
/// full backward pass only leaves remain).
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value, trainable: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf: inputs, labels, anything held fixed.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Trainable leaf: receives a gradient buffer from `backward`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, vec![], value);
        self.nodes[id.0].trainable = true;
        id
    }

    fn shape3(&self, id: NodeId, context: &str) -> Result<(usize, usize, usize)> {
        match *self.nodes[id.0].value.shape() {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::shape(context, "(C, H, W)", format!("{s:?}"))),
        }
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        padding: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let (c_in, h, w) = self.shape3(input, "conv2d input")?;
        let (c_out, kc_in, kh, kw) = match *self.nodes[kernels.0].value.shape() {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::shape("conv2d kernels", "(C_out, C_in, k, k)", format!("{s:?}"))),
        };
        if kh != kw {
            return Err(Error::shape("conv2d kernels", "square kernel", format!("{kh}x{kw}")));
        }
        if kc_in != c_in {
            return Err(Error::shape("conv2d", format!("kernel C_in {c_in}"), kc_in.to_string()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        if kh > h + 2 * padding || kh > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh} to fit padded {h}x{w}"),
                "kernel larger than padded input",
            ));
        }
        let data = ops::conv2d_fwd(
            self.nodes[input.0].value.data(),
            c_in,
            h,
            w,
            self.nodes[kernels.0].value.data(),
            c_out,
            kh,
            padding,
            stride,
        );
        let h_out = ops::conv_out_extent(h, kh, padding, stride);
        let w_out = ops::conv_out_extent(w, kh, padding, stride);
        let value = Tensor::from_parts(vec![c_out, h_out, w_out], data);
        Ok(self.push(Op::Conv2d { padding, stride }, vec![input, kernels], value))
    }

    /// Adds a per-channel bias to a (C, H, W) map.
    pub fn bias_channels(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.shape3(input, "bias_channels input")?;
        if self.nodes[bias.0].value.shape() != [c] {
            return Err(Error::shape(
                "bias_channels",
                format!("({c},)"),
                format!("{:?}", self.nodes[bias.0].value.shape()),
            ));
        }
        let mut data = self.nodes[input.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data();
        for ch in 0..c {
            for v in &mut data[ch * h * w..(ch + 1) * h * w] {
                *v += b[ch];
            }
        }
        let value = Tensor::from_parts(vec![c, h, w], data);
        Ok(self.push(Op::BiasChannels, vec![input, bias], value))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.shape3(input, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", "even H and W", format!("{h}x{w}")));
        }
        let (data, argmax) = ops::maxpool2_fwd(self.nodes[input.0].value.data(), c, h, w);
        let value = Tensor::from_parts(vec![c, h / 2, w / 2], data);
        Ok(self.push(Op::MaxPool2 { argmax }, vec![input], value))
    }

    pub fn upsample2(&mut self, input: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.shape3(input, "upsample2")?;
        let data = ops::upsample2_fwd(self.nodes[input.0].value.data(), c, h, w);
        let value = Tensor::from_parts(vec![c, 2 * h, 2 * w], data);
        Ok(self.push(Op::Upsample2, vec![input], value))
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = match *self.nodes[input.0].value.shape() {
            [n] => n,
            ref s => return Err(Error::shape("dense input", "(n,)", format!("{s:?}"))),
        };
        let (m, wn) = match *self.nodes[weights.0].value.shape() {
            [m, wn] => (m, wn),
            ref s => return Err(Error::shape("dense weights", "(m, n)", format!("{s:?}"))),
        };
        if wn != n {
            return Err(Error::shape("dense", format!("weights (m, {n})"), format!("(m, {wn})")));
        }
        if self.nodes[bias.0].value.shape() != [m] {
            return Err(Error::shape(
                "dense bias",
                format!("({m},)"),
                format!("{:?}", self.nodes[bias.0].value.shape()),
            ));
        }
        let data = ops::dense_fwd(
            self.nodes[input.0].value.data(),
            self.nodes[weights.0].value.data(),
            self.nodes[bias.0].value.data(),
            m,
            n,
        );
        let value = Tensor::from_parts(vec![m], data);
        Ok(self.push(Op::Dense, vec![input, weights, bias], value))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.nodes[input.0].value.map(|v| v.max(0.0));
        self.push(Op::Relu, vec![input], value)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self.nodes[input.0].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid, vec![input], value)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, context: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::shape(context, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.nodes[a.0].value.shape().to_vec(), data);
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.nodes[a.0].value.shape().to_vec(), data);
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        assert!(factor.is_finite(), "scale factor must be finite");
        let value = self.nodes[input.0].value.map(|v| factor * v);
        self.push(Op::Scale { factor }, vec![input], value)
    }

    pub fn add_n(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let Some((&first, rest)) = inputs.split_first() else {
            return Err(Error::invalid("add_n: no inputs"));
        };
        for &r in rest {
            self.same_shape(first, r, "add_n")?;
        }
        let mut data = self.nodes[first.0].value.data().to_vec();
        for &r in rest {
            for (d, s) in data.iter_mut().zip(self.nodes[r.0].value.data()) {
                *d += s;
            }
        }
        let value = Tensor::from_parts(self.nodes[first.0].value.shape().to_vec(), data);
        Ok(self.push(Op::AddN, inputs.to_vec(), value))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let len: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || len != self.nodes[input.0].value.len() {
            return Err(Error::shape(
                "reshape",
                format!("{} values", self.nodes[input.0].value.len()),
                format!("{shape:?}"),
            ));
        }
        let value = Tensor::from_parts(shape, self.nodes[input.0].value.data().to_vec());
        Ok(self.push(Op::Reshape, vec![input], value))
    }

    /// Stacks two (C, H, W) maps along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ha, wa) = self.shape3(a, "concat_channels")?;
        let (cb, hb, wb) = self.shape3(b, "concat_channels")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{ha}x{wa}"),
                format!("{hb}x{wb}"),
            ));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.nodes[a.0].value.data());
        data.extend_from_slice(self.nodes[b.0].value.data());
        let value = Tensor::from_parts(vec![ca + cb, ha, wa], data);
        Ok(self.push(Op::ConcatChannels, vec![a, b], value))
    }

    /// Stacks n equal-length vectors into an (n, d) row matrix.
    pub fn row_stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let Some((&first, rest)) = rows.split_first() else {
            return Err(Error::invalid("row_stack: no rows"));
        };
        let d = match *self.nodes[first.0].value.shape() {
            [d] => d,
            ref s => return Err(Error::shape("row_stack", "(d,)", format!("{s:?}"))),
        };
        for &r in rest {
            if self.nodes[r.0].value.shape() != [d] {
                return Err(Error::shape(
                    "row_stack",
                    format!("({d},)"),
                    format!("{:?}", self.nodes[r.0].value.shape()),
                ));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.nodes[r.0].value.data());
        }
        let value = Tensor::from_parts(vec![rows.len(), d], data);
        Ok(self.push(Op::RowStack, rows.to_vec(), value))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: f64 = self.nodes[input.0].value.data().iter().sum();
        self.push(Op::Sum, vec![input], Tensor::from_parts(vec![], vec![total]))
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let n = self.nodes[input.0].value.len() as f64;
        let total: f64 = self.nodes[input.0].value.data().iter().sum();
        self.push(Op::Mean, vec![input], Tensor::from_parts(vec![], vec![total / n]))
    }

    /// Mean squared difference over all entries.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape(pred, target, "mse_loss")?;
        let n = self.nodes[pred.0].value.len() as f64;
        let total: f64 = self.nodes[pred.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[target.0].value.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::from_parts(vec![], vec![total / n]);
        Ok(self.push(Op::MseLoss, vec![pred, target], value))
    }

    /// Softmax cross-entropy of a logit vector against one true class index.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let k = match *self.nodes[logits.0].value.shape() {
            [k] => k,
            ref s => return Err(Error::shape("cross_entropy", "(K,)", format!("{s:?}"))),
        };
        if label >= k {
            return Err(Error::invalid(format!(
                "cross_entropy: label {label} out of range for {k} classes"
            )));
        }
        let z = self.nodes[logits.0].value.data();
        let loss = ops::log_sum_exp(z) - z[label];
        let value = Tensor::from_parts(vec![], vec![loss]);
        Ok(self.push(Op::CrossEntropy { label }, vec![logits], value))
    }

    /// Pixel-weighted softmax cross-entropy over a (K, H, W) logit map:
    /// E = (1/(H·W)) Σ_x ω(x) · (−ln p_{l(x)}(x)), with ln p floored at
    /// ln(1e-12). Floored pixels contribute a constant and no gradient.
    pub fn pixel_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[u8],
        weights: &[f64],
    ) -> Result<NodeId> {
        let (k, h, w) = self.shape3(logits, "pixel_cross_entropy")?;
        if labels.len() != h * w || weights.len() != h * w {
            return Err(Error::shape(
                "pixel_cross_entropy",
                format!("{} pixels", h * w),
                format!("{} labels, {} weights", labels.len(), weights.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| usize::from(l) >= k) {
            return Err(Error::invalid(format!(
                "pixel_cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        if weights.iter().any(|wt| !wt.is_finite() || *wt < 0.0) {
            return Err(Error::invalid("pixel_cross_entropy: weights must be finite and nonnegative"));
        }
        let z = self.nodes[logits.0].value.data();
        let plane = h * w;
        let mut total = 0.0;
        let mut col = vec![0.0; k];
        for px in 0..plane {
            for (c, slot) in col.iter_mut().enumerate() {
                *slot = z[c * plane + px];
            }
            let log_p = col[usize::from(labels[px])] - ops::log_sum_exp(&col);
            total += weights[px] * (-log_p.max(LOG_PROB_FLOOR));
        }
        let value = Tensor::from_parts(vec![], vec![total / plane as f64]);
        Ok(self.push(
            Op::PixelCrossEntropy { labels: labels.to_vec(), weights: weights.to_vec() },
            vec![logits],
            value,
        ))
    }

    /// MMD between two (n, d) row matrices under a fixed kernel.
    pub fn mmd_loss(&mut self, x: NodeId, y: NodeId, spec: &KernelSpec) -> Result<NodeId> {
        let (dx, dy) = match (self.nodes[x.0].value.shape(), self.nodes[y.0].value.shape()) {
            ([_, dx], [_, dy]) => (*dx, *dy),
            (sx, sy) => return Err(Error::shape("mmd_loss", "(n, d) matrices", format!("{sx:?} vs {sy:?}"))),
        };
        if dx != dy {
            return Err(Error::shape("mmd_loss", format!("d = {dx}"), format!("d = {dy}")));
        }
        let v = kernel::mmd(
            self.nodes[x.0].value.data(),
            self.nodes[y.0].value.data(),
            dx,
            spec,
        )?;
        let value = Tensor::from_parts(vec![], vec![v]);
        Ok(self.push(Op::MmdLoss { spec: spec.clone() }, vec![x, y], value))
    }

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients;
    /// every trainable leaf is populated (zeros when disconnected), constant
    /// leaves are never touched.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                format!("{:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(go) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    if node.trainable {
                        grads[id] = Some(go);
                    }
                }
                Op::Conv2d { padding, stride } => {
                    let (x, kn) = (node.inputs[0], node.inputs[1]);
                    if self.skip(x) && self.skip(kn) {
                        continue;
                    }
                    let (c_in, h, w) = match *self.nodes[x.0].value.shape() {
                        [c, h, w] => (c, h, w),
                        _ => unreachable!("checked at construction"),
                    };
                    let ks = self.nodes[kn.0].value.shape();
                    let (c_out, k) = (ks[0], ks[2]);
                    let (gi, gk) = ops::conv2d_bwd(
                        self.nodes[x.0].value.data(),
                        c_in,
                        h,
                        w,
                        self.nodes[kn.0].value.data(),
                        c_out,
                        k,
                        *padding,
                        *stride,
                        &go,
                    );
                    self.accumulate(&mut grads, x, &gi);
                    self.accumulate(&mut grads, kn, &gk);
                }
                Op::BiasChannels => {
                    let (x, b) = (node.inputs[0], node.inputs[1]);
                    self.accumulate(&mut grads, x, &go);
                    if !self.skip(b) {
                        let c = self.nodes[b.0].value.len();
                        let plane = node.value.len() / c;
                        let mut gb = vec![0.0; c];
                        for (ch, slot) in gb.iter_mut().enumerate() {
                            *slot = go[ch * plane..(ch + 1) * plane].iter().sum();
                        }
                        self.accumulate(&mut grads, b, &gb);
                    }
                }
                Op::MaxPool2 { argmax } => {
                    let x = node.inputs[0];
                    if self.skip(x) {
                        continue;
                    }
                    let gi = ops::maxpool2_bwd(&go, argmax, self.nodes[x.0].value.len());
                    self.accumulate(&mut grads, x, &gi);
                }
                Op::Upsample2 => {
                    let x = node.inputs[0];
                    if self.skip(x) {
                        continue;
                    }
                    let (c, h, w) = match *self.nodes[x.0].value.shape() {
                        [c, h, w] => (c, h, w),
                        _ => unreachable!(),
                    };
                    let gi = ops::upsample2_bwd(&go, c, h, w);
                    self.accumulate(&mut grads, x, &gi);
                }
                Op::Dense => {
                    let (x, wn, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let n = self.nodes[x.0].value.len();
                    let m = node.value.len();
                    let (gx, gw, gb) = ops::dense_bwd(
                        self.nodes[x.0].value.data(),
                        self.nodes[wn.0].value.data(),
                        m,
                        n,
                        &go,
                    );
                    self.accumulate(&mut grads, x, &gx);
                    self.accumulate(&mut grads, wn, &gw);
                    self.accumulate(&mut grads, b, &gb);
                }
                Op::Relu => {
                    let x = node.inputs[0];
                    if self.skip(x) {
                        continue;
                    }
                    let gi: Vec<f64> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(&go)
                        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, x, &gi);
                }
                Op::Sigmoid => {
                    let x = node.inputs[0];
                    if self.skip(x) {
                        continue;
                    }
                    let gi: Vec<f64> = node
                        .value
                        .data()
                        .iter()
                        .zip(&go)
                        .map(|(y, g)| g * y * (1.0 - y))
                        .collect();
                    self.accumulate(&mut grads, x, &gi);
                }
                Op::Add => {
                    self.accumulate(&mut grads, node.inputs[0], &go);
                    self.accumulate(&mut grads, node.inputs[1], &go);
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    if !self.skip(a) {
                        let ga: Vec<f64> = self.nodes[b.0]
                            .value
                            .data()
                            .iter()
                            .zip(&go)
                            .map(|(v, g)| v * g)
                            .collect();
                        self.accumulate(&mut grads, a, &ga);
                    }
                    if !self.skip(b) {
                        let gb: Vec<f64> = self.nodes[a.0]
                            .value
                            .data()
                            .iter()
                            .zip(&go)
                            .map(|(v, g)| v * g)
                            .collect();
                        self.accumulate(&mut grads, b, &gb);
                    }
                }
                Op::Scale { factor } => {
                    let x = node.inputs[0];
                    if self.skip(x) {
                        continue;
                    }
                    let gi: Vec<f64> = go.iter().map(|g| factor * g).collect();
                    self.accumulate(&mut grads, x, &gi);
                }
                Op::AddN => {
                    for &inp in &node.inputs {
                        self.accumulate(&mut grads, inp, &go);
                    }
                }
                Op::Reshape => {
                    self.accumulate(&mut grads, node.inputs[0], &go);
                }
                Op::ConcatChannels => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let la = self.nodes[a.0].value.len();
                    self.accumulate(&mut grads, a, &go[..la]);
                    self.accumulate(&mut grads, b, &go[la..]);
                }
                Op::RowStack => {
                    let d = node.value.shape()[1];
                    for (i, &inp) in node.inputs.iter().enumerate() {
                        self.accumulate(&mut grads, inp, &go[i * d..(i + 1) * d]);
                    }
                }
                Op::Sum => {
                    let x = node.inputs[0];
                    if self.skip(x) {
                        continue;
                    }
                    let gi = vec![go[0]; self.nodes[x.0].value.len()];
                    self.accumulate(&mut grads, x, &gi);
                }
                Op::Mean => {
                    let x = node.inputs[0];
                    if self.skip(x) {
                        continue;
                    }
                    let n = self.nodes[x.0].value.len();
                    let gi = vec![go[0] / n as f64; n];
                    self.accumulate(&mut grads, x, &gi);
                }
                Op::MseLoss => {
                    let (p, t) = (node.inputs[0], node.inputs[1]);
                    let n = self.nodes[p.0].value.len() as f64;
                    let scale = 2.0 * go[0] / n;
                    if !self.skip(p) {
                        let gp: Vec<f64> = self.nodes[p.0]
                            .value
                            .data()
                            .iter()
                            .zip(self.nodes[t.0].value.data())
                            .map(|(pv, tv)| scale * (pv - tv))
                            .collect();
                        self.accumulate(&mut grads, p, &gp);
                    }
                    if !self.skip(t) {
                        let gt: Vec<f64> = self.nodes[p.0]
                            .value
                            .data()
                            .iter()
                            .zip(self.nodes[t.0].value.data())
                            .map(|(pv, tv)| -scale * (pv - tv))
                            .collect();
                        self.accumulate(&mut grads, t, &gt);
                    }
                }
                Op::CrossEntropy { label } => {
                    let x = node.inputs[0];
                    if self.skip(x) {
                        continue;
                    }
                    let z = self.nodes[x.0].value.data();
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
                    let gi: Vec<f64> = z
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let p = (v - m).exp() / denom;
                            go[0] * (p - if i == *label { 1.0 } else { 0.0 })
                        })
                        .collect();
                    self.accumulate(&mut grads, x, &gi);
                }
                Op::PixelCrossEntropy { labels, weights } => {
                    let x = node.inputs[0];
                    if self.skip(x) {
                        continue;
                    }
                    let (k, h, w) = match *self.nodes[x.0].value.shape() {
                        [k, h, w] => (k, h, w),
                        _ => unreachable!(),
                    };
                    let z = self.nodes[x.0].value.data();
                    let plane = h * w;
                    let mut gi = vec![0.0; z.len()];
                    let mut col = vec![0.0; k];
                    for px in 0..plane {
                        for (c, slot) in col.iter_mut().enumerate() {
                            *slot = z[c * plane + px];
                        }
                        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = col.iter().map(|v| (v - m).exp()).sum();
                        let l = usize::from(labels[px]);
                        let log_p = col[l] - m - denom.ln();
                        if log_p < LOG_PROB_FLOOR {
                            continue;
                        }
                        let scale = go[0] * weights[px] / plane as f64;
                        for c in 0..k {
                            let p = (col[c] - m).exp() / denom;
                            gi[c * plane + px] =
                                scale * (p - if c == l { 1.0 } else { 0.0 });
                        }
                    }
                    self.accumulate(&mut grads, x, &gi);
                }
                Op::MmdLoss { spec } => {
                    let (x, y) = (node.inputs[0], node.inputs[1]);
                    if self.skip(x) && self.skip(y) {
                        continue;
                    }
                    let d = self.nodes[x.0].value.shape()[1];
                    let (_, gx, gy) = kernel::mmd_with_grad(
                        self.nodes[x.0].value.data(),
                        self.nodes[y.0].value.data(),
                        d,
                        spec,
                    )
                    .expect("validated at construction");
                    if !self.skip(x) {
                        let gx: Vec<f64> = gx.iter().map(|g| go[0] * g).collect();
                        self.accumulate(&mut grads, x, &gx);
                    }
                    if !self.skip(y) {
                        let gy: Vec<f64> = gy.iter().map(|g| go[0] * g).collect();
                        self.accumulate(&mut grads, y, &gy);
                    }
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn skip(&self, id: NodeId) -> bool {
        self.nodes[id.0].is_constant_leaf()
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]) {
        if self.skip(id) {
            return;
        }
        let buf = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_power_rule() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn constant_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let prod = g.mul(p, c).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn disconnected_params_get_zero_gradients() {
        let mut g = Graph::new();
        let used = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = g.param(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let loss = g.sum(used);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(used).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(p + p) -> gradient 2 everywhere
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![2], vec![5.0, -1.0]).unwrap());
        let twice = g.add(p, p).unwrap();
        let loss = g.sum(twice);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let ce = g.cross_entropy(z, 0).unwrap();
        assert!((g.value(ce).item() - 2.0f64.ln()).abs() <= 1e-12);

        let z = g.constant(Tensor::new(vec![3], vec![2.0, 1.0, 0.0]).unwrap());
        let ce = g.cross_entropy(z, 0).unwrap();
        let want = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((g.value(ce).item() - want).abs() <= 1e-12);
        assert!((want - 0.407606).abs() <= 1e-6);

        let z = g.constant(Tensor::new(vec![2], vec![20.0, -20.0]).unwrap());
        let ce = g.cross_entropy(z, 0).unwrap();
        assert!(g.value(ce).item() <= 1e-8);
        assert!(g.value(ce).item() >= 0.0);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        assert!(g.cross_entropy(z, 2).is_err());
    }

    #[test]
    fn mse_matches_hand_value() {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let t = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let loss = g.mse_loss(p, t).unwrap();
        assert!((g.value(loss).item() - 2.5).abs() <= 1e-15);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[1.0, 2.0]);
        assert!(grads.get(t).is_none());
    }

    #[test]
    fn concat_splits_gradient_by_block() {
        let mut g = Graph::new();
        let a = g.param(Tensor::full(vec![1, 2, 2], 1.0));
        let b = g.param(Tensor::full(vec![2, 2, 2], 2.0));
        let cat = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(cat).shape(), &[3, 2, 2]);
        let doubled = g.scale(cat, 3.0);
        let loss = g.sum(doubled);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0; 4]);
        assert_eq!(grads.get(b).unwrap(), &[3.0; 8]);
    }

    #[test]
    fn row_stack_routes_rows() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.param(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let m = g.row_stack(&[a, b]).unwrap();
        assert_eq!(g.value(m).shape(), &[2, 2]);
        assert_eq!(g.value(m).data(), &[1.0, 2.0, 3.0, 4.0]);
        let sq = g.mul(m, m).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[2.0, 4.0]);
        assert_eq!(grads.get(b).unwrap(), &[6.0, 8.0]);
    }

    #[test]
    fn pixel_cross_entropy_uniform_logits_give_ln_k() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![3, 2, 2]));
        let labels = [0u8, 1, 2, 0];
        let weights = [1.0; 4];
        let e = g.pixel_cross_entropy(z, &labels, &weights).unwrap();
        assert!((g.value(e).item() - 3.0f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn saturated_pixels_are_floored_and_give_no_gradient() {
        let mut g = Graph::new();
        // class 1 logit enormous, label 0 -> log-prob far below the floor
        let p = g.param(Tensor::new(vec![2, 1, 1], vec![0.0, 100.0]).unwrap());
        let e = g.pixel_cross_entropy(p, &[0], &[1.0]).unwrap();
        assert!((g.value(e).item() - (-LOG_PROB_FLOOR)).abs() <= 1e-12);
        let grads = g.backward(e).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn mmd_loss_node_matches_direct_call() {
        let spec = KernelSpec::rbf(vec![0.5, 1.0]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![0.0, 0.1, 0.9, 1.0]).unwrap());
        let y = g.constant(Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.2, 0.8]).unwrap());
        let m = g.mmd_loss(x, y, &spec).unwrap();
        let direct = kernel::mmd(
            &[0.0, 0.1, 0.9, 1.0],
            &[0.5, 0.5, 0.2, 0.8],
            2,
            &spec,
        )
        .unwrap();
        assert!((g.value(m).item() - direct).abs() <= 1e-15);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 4, 4]));
        let b = g.constant(Tensor::zeros(vec![3, 4]));
        assert!(g.add(a, b).is_err());
        assert!(g.maxpool2(b).is_err());
        let odd = g.constant(Tensor::zeros(vec![1, 3, 4]));
        assert!(g.maxpool2(odd).is_err());
        let k = g.constant(Tensor::zeros(vec![4, 3, 3, 3]));
        assert!(g.conv2d(a, k, 1, 1).is_err());
        assert!(g.reshape(a, vec![5]).is_err());
    }
}
