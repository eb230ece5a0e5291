//! Lung-area segmentation: a reduced residual U-Net (four pooled encoder
//! blocks, four upsampling decoder blocks with skip concatenation), the
//! boundary-emphasizing weight map, and the weighted per-pixel
//! cross-entropy trainer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, Mask};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, LOG_PROB_FLOOR};
use crate::model::LossBundle;
use crate::optim::OptimState;
use crate::rng;
use crate::tensor::{Param, Tensor};
use crate::trainer::TrainConfig;

pub const DEFAULT_BORDER_GAIN: f64 = 10.0;
pub const DEFAULT_BORDER_SIGMA: f64 = 5.0;

/// Depth is fixed at four pooling stages, so inputs must be divisible by 16.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegArch {
    pub input: (usize, usize, usize),
    pub base_channels: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl Default for SegArch {
    fn default() -> Self {
        SegArch { input: (1, 64, 64), base_channels: 4, dropout_rate: 0.25, num_classes: 2 }
    }
}

impl SegArch {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 || self.base_channels == 0 {
            return Err(Error::config("segmentation arch extents must be positive"));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} not divisible by 16 (four pooling stages)"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout rate {} not in [0,1)", self.dropout_rate)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        Ok(())
    }

    /// (input width, block width) for the four encoder blocks.
    fn encoder_widths(&self) -> [(usize, usize); 4] {
        let b = self.base_channels;
        [(self.input.0, b), (b, 2 * b), (2 * b, 4 * b), (4 * b, 8 * b)]
    }

    /// (input width after concat, block width) for the four decoder blocks.
    fn decoder_widths(&self) -> [(usize, usize); 4] {
        let b = self.base_channels;
        [(16 * b, 4 * b), (8 * b, 2 * b), (4 * b, b), (2 * b, b)]
    }
}

/// Per-pixel loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// The border-proximity factor: gain * exp(-(d1+d2)^2 / (2 sigma^2)).
pub fn border_weight(d1: f64, d2: f64, gain: f64, sigma: f64) -> f64 {
    let s = d1 + d2;
    gain * (-(s * s) / (2.0 * sigma * sigma)).exp()
}

/// Class-frequency balancing plus a boost between nearby foreground
/// components: w(x) = total/(K * count(l(x))) + gain*exp(-(d1+d2)^2/(2s^2)),
/// where d1/d2 are distances to the borders of the two nearest distinct
/// foreground components. With fewer than two components the boost vanishes.
pub fn weight_map(mask: &Mask, num_classes: usize, gain: f64, sigma: f64) -> Result<WeightMap> {
    if num_classes < 2 {
        return Err(Error::invalid("weight_map: need at least 2 classes"));
    }
    if !(gain.is_finite() && gain >= 0.0 && sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("weight_map: bad gain {gain} or sigma {sigma}")));
    }
    let (h, w) = (mask.h, mask.w);
    let mut counts = vec![0usize; num_classes];
    for &l in &mask.data {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::data(format!("mask label {l} outside 0..{num_classes}")));
        }
        counts[l] += 1;
    }
    let total = (h * w) as f64;
    let mut data: Vec<f64> = mask
        .data
        .iter()
        .map(|&l| total / (num_classes as f64 * counts[l as usize] as f64))
        .collect();

    let borders = component_borders(mask);
    if borders.len() >= 2 {
        for y in 0..h {
            for x in 0..w {
                // two smallest distances to distinct component borders
                let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
                for border in &borders {
                    let mut best = f64::INFINITY;
                    for &(by, bx) in border {
                        let dy = y as f64 - by as f64;
                        let dx = x as f64 - bx as f64;
                        best = best.min(dy * dy + dx * dx);
                    }
                    if best < d1 {
                        d2 = d1;
                        d1 = best;
                    } else if best < d2 {
                        d2 = best;
                    }
                }
                data[y * w + x] += border_weight(d1.sqrt(), d2.sqrt(), gain, sigma);
            }
        }
    }
    Ok(WeightMap { h, w, data })
}

/// Border pixels of each 4-connected same-label foreground component. A
/// border pixel has an in-image 4-neighbour with a different label.
fn component_borders(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.h, mask.w);
    let at = |y: usize, x: usize| mask.data[y * w + x];
    let mut component = vec![usize::MAX; h * w];
    let mut borders = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || component[start] != usize::MAX {
            continue;
        }
        let id = borders.len();
        let label = mask.data[start];
        let mut border = Vec::new();
        let mut stack = vec![start];
        component[start] = id;
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut is_border = false;
            let mut visit = |ny: usize, nx: usize| {
                if at(ny, nx) == label {
                    let j = ny * w + nx;
                    if component[j] == usize::MAX {
                        component[j] = id;
                        stack.push(j);
                    }
                } else {
                    is_border = true;
                }
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
            if is_border {
                border.push((y, x));
            }
        }
        borders.push(border);
    }
    // a component with an empty border list (mask entirely one foreground
    // class) cannot anchor a distance
    borders.retain(|b| !b.is_empty());
    borders
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_pixel(logits: &Tensor) -> Result<Tensor> {
    let (k, h, w) = match *logits.shape() {
        [k, h, w] => (k, h, w),
        ref s => return Err(Error::shape("softmax_pixel", "(K, H, W)", format!("{s:?}"))),
    };
    let plane = h * w;
    let mut out = vec![0.0; k * plane];
    let data = logits.data();
    for p in 0..plane {
        let mut hi = f64::NEG_INFINITY;
        for c in 0..k {
            hi = hi.max(data[c * plane + p]);
        }
        let mut z = 0.0;
        for c in 0..k {
            let e = (data[c * plane + p] - hi).exp();
            out[c * plane + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * plane + p] /= z;
        }
    }
    Ok(Tensor::new(vec![k, h, w], out).expect("softmax output is finite"))
}

/// Weighted per-pixel negative log-likelihood, averaged over pixels:
/// E = sum_x w(x) * (-ln p_l(x)(x)) / (H*W), probabilities clamped at 1e-12.
pub fn seg_loss(probs: &Tensor, mask: &Mask, weights: &WeightMap) -> Result<f64> {
    let (k, h, w) = match *probs.shape() {
        [k, h, w] => (k, h, w),
        ref s => return Err(Error::shape("seg_loss", "(K, H, W)", format!("{s:?}"))),
    };
    if mask.h != h || mask.w != w || weights.h != h || weights.w != w {
        return Err(Error::shape("seg_loss", format!("{h}x{w}"), format!("{}x{}", mask.h, mask.w)));
    }
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..plane {
        let l = mask.data[p] as usize;
        if l >= k {
            return Err(Error::data(format!("mask label {l} outside 0..{k}")));
        }
        let prob = probs.data()[l * plane + p];
        total += weights.data[p] * (-prob.ln().max(LOG_PROB_FLOOR));
    }
    Ok(total / plane as f64)
}

/// Precomputes all weight maps, fanning out over up to `thread_cap()`
/// threads; output order matches input order regardless of thread count.
pub fn weight_maps(masks: &[Mask], num_classes: usize, gain: f64, sigma: f64) -> Result<Vec<WeightMap>> {
    let threads = crate::thread_cap().min(masks.len());
    if threads <= 1 {
        return masks.iter().map(|m| weight_map(m, num_classes, gain, sigma)).collect();
    }
    let chunk = masks.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = masks
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|m| weight_map(m, num_classes, gain, sigma))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(masks.len());
        for h in handles {
            out.extend(h.join().expect("weight map worker panicked")?);
        }
        Ok(out)
    })
}

const PARAMS_PER_BLOCK: usize = 5;

#[derive(Debug, Clone)]
pub struct SegParams {
    arch: SegArch,
    params: Vec<Param>,
}

pub struct SegNodes {
    ids: Vec<NodeId>,
}

impl SegNodes {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

impl SegParams {
    /// Fan-in uniform init for all convolutions, zero biases; one seed
    /// stream covers the whole network.
    pub fn init(arch: SegArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, rng::STREAM_SEG_INIT);
        let mut params = Vec::new();
        let block = |prefix: &str, c_in: usize, width: usize, params: &mut Vec<Param>, r: &mut ChaCha8Rng| {
            params.push(conv_param(r, &format!("{prefix}.conv_a.kernels"), width, c_in, 3));
            params.push(zero_bias(&format!("{prefix}.conv_a.bias"), width));
            params.push(conv_param(r, &format!("{prefix}.conv_b.kernels"), width, width, 3));
            params.push(zero_bias(&format!("{prefix}.conv_b.bias"), width));
            params.push(conv_param(r, &format!("{prefix}.proj.kernels"), width, c_in, 1));
        };
        for (i, (c_in, width)) in arch.encoder_widths().into_iter().enumerate() {
            block(&format!("enc{}", i + 1), c_in, width, &mut params, &mut r);
        }
        for (i, (c_in, width)) in arch.decoder_widths().into_iter().enumerate() {
            block(&format!("dec{}", i + 1), c_in, width, &mut params, &mut r);
        }
        params.push(conv_param(&mut r, "head.kernels", arch.num_classes, arch.base_channels, 1));
        params.push(zero_bias("head.bias", arch.num_classes));
        Ok(SegParams { arch, params })
    }

    pub fn from_parts(arch: SegArch, params: Vec<Param>) -> Result<Self> {
        let reference = SegParams::init(arch, 0)?;
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
        Ok(SegParams { arch, params })
    }

    pub fn arch(&self) -> &SegArch {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn insert(&self, g: &mut Graph) -> SegNodes {
        SegNodes { ids: self.params.iter().map(|p| g.param(p.value.clone())).collect() }
    }

    /// Residual block: conv3x3 -> relu -> conv3x3, plus a 1x1 projection of
    /// the block input.
    fn res_block(&self, g: &mut Graph, nodes: &SegNodes, block: usize, x: NodeId) -> Result<NodeId> {
        let base = block * PARAMS_PER_BLOCK;
        let a = g.conv2d(x, nodes.ids[base], 1, 1)?;
        let a = g.bias_channels(a, nodes.ids[base + 1])?;
        let a = g.relu(a);
        let b = g.conv2d(a, nodes.ids[base + 2], 1, 1)?;
        let b = g.bias_channels(b, nodes.ids[base + 3])?;
        let p = g.conv2d(x, nodes.ids[base + 4], 0, 1)?;
        g.add(b, p)
    }

    /// Full forward pass to per-pixel logits (K, H, W). `dropout` supplies
    /// the post-pooling mask draws in the encoder; pass None for
    /// deterministic inference.
    pub fn forward(
        &self,
        g: &mut Graph,
        nodes: &SegNodes,
        x: NodeId,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let (.., want_h, want_w) = self.arch.input;
        match *g.value(x).shape() {
            [c, h, w] if c == self.arch.input.0 && h == want_h && w == want_w => {}
            ref s => {
                return Err(Error::shape(
                    "seg forward input",
                    format!("{:?}", [self.arch.input.0, want_h, want_w]),
                    format!("{s:?}"),
                ))
            }
        }
        let mut skips = Vec::with_capacity(4);
        let mut cur = x;
        for block in 0..4 {
            let f = self.res_block(g, nodes, block, cur)?;
            skips.push(f);
            cur = g.maxpool2(f)?;
            if let Some(r) = dropout.as_deref_mut() {
                if self.arch.dropout_rate > 0.0 {
                    cur = apply_dropout(g, cur, self.arch.dropout_rate, r)?;
                }
            }
        }
        for block in 0..4 {
            let up = g.upsample2(cur)?;
            let cat = g.concat_channels(up, skips[3 - block])?;
            cur = self.res_block(g, nodes, 4 + block, cat)?;
        }
        let head = 8 * PARAMS_PER_BLOCK;
        let logits = g.conv2d(cur, nodes.ids[head], 0, 1)?;
        g.bias_channels(logits, nodes.ids[head + 1])
    }

    /// Argmax class per pixel, deterministic (no dropout).
    pub fn predict_mask(&self, x: &Tensor) -> Result<Mask> {
        let mut g = Graph::new();
        let nodes = self.insert(&mut g);
        let xn = g.constant(x.clone());
        let logits = self.forward(&mut g, &nodes, xn, None)?;
        let t = g.value(logits);
        let (k, h, w) = match *t.shape() {
            [k, h, w] => (k, h, w),
            _ => unreachable!("forward returns (K, H, W)"),
        };
        let plane = h * w;
        let data = t.data();
        let mut out = vec![0u8; plane];
        for p in 0..plane {
            let mut best = (data[p], 0usize);
            for c in 1..k {
                if data[c * plane + p] > best.0 {
                    best = (data[c * plane + p], c);
                }
            }
            out[p] = best.1 as u8;
        }
        Mask::new(h, w, out)
    }
}

fn conv_param(r: &mut ChaCha8Rng, name: &str, c_out: usize, c_in: usize, k: usize) -> Param {
    let fan_in = (c_in * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..c_out * c_in * k * k)
        .map(|_| (2.0 * r.random::<f64>() - 1.0) * bound)
        .collect();
    Param::new(name, Tensor::from_parts(vec![c_out, c_in, k, k], data))
}

fn zero_bias(name: &str, n: usize) -> Param {
    Param::new(name, Tensor::zeros(vec![n]))
}

/// Inverted dropout: kept activations are scaled by 1/(1-rate) so the
/// expectation is unchanged; the mask enters the graph as a constant.
fn apply_dropout(g: &mut Graph, x: NodeId, rate: f64, r: &mut ChaCha8Rng) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| if r.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::from_parts(shape, mask));
    g.mul(x, m)
}

/// Zeroes image pixels where the mask is background (class 0).
pub fn apply_mask(image: &Tensor, mask: &Mask) -> Result<Tensor> {
    match *image.shape() {
        [1, h, w] if h == mask.h && w == mask.w => {}
        ref s => {
            return Err(Error::shape(
                "apply_mask",
                format!("(1, {}, {})", mask.h, mask.w),
                format!("{s:?}"),
            ))
        }
    }
    let data = image
        .data()
        .iter()
        .zip(&mask.data)
        .map(|(&v, &m)| if m == 0 { 0.0 } else { v })
        .collect();
    Ok(Tensor::from_parts(image.shape().to_vec(), data))
}

pub struct SegTrainRun {
    pub params: SegParams,
    pub history: Vec<LossBundle>,
    pub abort: Option<Error>,
}

/// Trains the segmenter on a masked domain. Only the iteration counts,
/// batch size, learning rate, method, seed and patience fields of the
/// config apply here; the loss weights and kernel belong to the fusion
/// trainer. The recorded bundles carry the weighted pixel loss in both the
/// classification slot and the total.
pub fn train_seg(data: &Domain, arch: SegArch, cfg: &TrainConfig) -> Result<SegTrainRun> {
    cfg.validate()?;
    arch.validate()?;
    data.validate()?;
    let masks = data
        .masks
        .as_ref()
        .ok_or_else(|| Error::data(format!("domain {} has no masks", data.name)))?;
    let want = vec![arch.input.0, arch.input.1, arch.input.2];
    if *data.samples[0].shape() != want {
        return Err(Error::shape(
            format!("domain {}", data.name),
            format!("{want:?}"),
            format!("{:?}", data.samples[0].shape()),
        ));
    }
    let weights = weight_maps(masks, arch.num_classes, DEFAULT_BORDER_GAIN, DEFAULT_BORDER_SIGMA)?;

    let mut params = SegParams::init(arch, cfg.seed)?;
    let mut opt = OptimState::new(cfg.method, cfg.learning_rate)?;
    let mut dropout_rng = rng::stream(cfg.seed, rng::STREAM_DROPOUT);
    let mut batch_rng = rng::stream(cfg.seed, rng::STREAM_SEG_BATCH);

    let steps = cfg.total_steps()?;
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0u64);
    for step in 0..steps {
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.random_range(0..data.samples.len()))
            .collect();
        let outcome = (|| -> Result<f64> {
            let mut g = Graph::new();
            let nodes = params.insert(&mut g);
            let mut losses = Vec::with_capacity(picks.len());
            for &i in &picks {
                let x = g.constant(data.samples[i].clone());
                let logits = params.forward(&mut g, &nodes, x, Some(&mut dropout_rng))?;
                losses.push(g.pixel_cross_entropy(logits, &masks[i].data, &weights[i].data)?);
            }
            let sum = g.add_n(&losses)?;
            let loss = g.scale(sum, 1.0 / picks.len() as f64);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::non_finite(format!("segmentation loss at step {step}")));
            }
            let grads = g.backward(loss)?;
            let slices: Vec<&[f64]> = nodes
                .ids
                .iter()
                .map(|&id| {
                    grads.get(id).ok_or_else(|| Error::invalid("parameter missing gradient"))
                })
                .collect::<Result<_>>()?;
            opt.step(params.params_mut(), &slices)?;
            Ok(value)
        })();
        match outcome {
            Ok(value) => {
                history.push(LossBundle { l_r: 0.0, l_d: 0.0, l_c: value, l: value, iteration: step });
                if value < best.0 {
                    best = (value, step);
                }
                if let Some(patience) = cfg.patience {
                    if step - best.1 >= patience {
                        break;
                    }
                }
            }
            Err(e) => return Ok(SegTrainRun { params, history, abort: Some(e) }),
        }
    }
    Ok(SegTrainRun { params, history, abort: None })
}

/// Scores predicted masks against ground truth over all pixels of all
/// samples.
pub fn evaluate_seg(params: &SegParams, data: &Domain) -> Result<crate::metrics::MetricsSummary> {
    data.validate()?;
    let masks = data
        .masks
        .as_ref()
        .ok_or_else(|| Error::data(format!("domain {} has no masks", data.name)))?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (x, m) in data.samples.iter().zip(masks) {
        let p = params.predict_mask(x)?;
        pred.extend(p.data.iter().map(|&v| v as usize));
        truth.extend(m.data.iter().map(|&v| v as usize));
    }
    crate::metrics::report(&pred, &truth)
}
