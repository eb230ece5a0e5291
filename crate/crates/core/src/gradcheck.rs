//! Central finite-difference verification of every differentiable operator
//! and of both full models.
//!
//! Each operator case wraps its output as sum(output * random_weights), so a
//! gradient that is wrong but uniform cannot cancel against the reduction.
//! Per tensor at most [`MAX_COMPONENTS`] evenly strided components are
//! differenced; operator-level tensors are small enough that this means full
//! coverage, while the model cases stay well inside the time budget.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernel::{DomainPooling, KernelSpec};
use crate::model::{DffArch, DffParams, KernelChoice, Lambda};
use crate::rng;
use crate::seg::{weight_map, SegArch, SegParams, DEFAULT_BORDER_GAIN, DEFAULT_BORDER_SIGMA};
use crate::tensor::{Param, Tensor};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
const MAX_COMPONENTS: usize = 64;
const HARNESS_SEED: u64 = 1702;

/// One verified case: the largest relative error seen across all inputs.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel: f64,
}

impl CheckResult {
    pub fn ok(&self) -> bool {
        self.max_rel <= TOLERANCE
    }
}

/// |a - n| scaled by the larger magnitude, but never amplified below
/// magnitude 1 (so exact zeros compare absolutely).
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| 2.0 * r.random::<f64>() - 1.0).collect();
    Tensor::from_parts(shape, data)
}

/// Uniform values kept away from zero, for inputs feeding kinked ops.
fn rand_tensor_off_kink(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = 2.0 * r.random::<f64>() - 1.0;
            v.signum() * (v.abs() + 0.05)
        })
        .collect();
    Tensor::from_parts(shape, data)
}

/// Distinct values per pooling window so an EPS nudge cannot flip an argmax.
fn rand_tensor_distinct(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| 2.0 * r.random::<f64>() - 1.0 + i as f64 * 1e-2)
        .collect();
    Tensor::from_parts(shape, data)
}

fn sample_indices(len: usize) -> Vec<usize> {
    if len <= MAX_COMPONENTS {
        (0..len).collect()
    } else {
        let stride = len / MAX_COMPONENTS;
        (0..MAX_COMPONENTS).map(|k| k * stride).collect()
    }
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

struct SubCase {
    inputs: Vec<Tensor>,
    build: Build,
}

struct OpCase {
    name: &'static str,
    subs: Vec<SubCase>,
}

/// Evaluates one subcase at `values`; returns the graph, the leaf ids and
/// the scalar objective sum(output * weights).
fn assemble(
    sub: &SubCase,
    values: &[Tensor],
    weights: &Tensor,
) -> Result<(Graph, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
    let y = (sub.build)(&mut g, &leaves)?;
    let w = g.constant(weights.clone());
    let weighted = g.mul(y, w)?;
    let obj = g.sum(weighted);
    Ok((g, leaves, obj))
}

fn check_sub(sub: &SubCase, rng: &mut ChaCha8Rng, sabotaged: bool) -> Result<f64> {
    // probe once for the output shape, then fix the reduction weights
    let weights = {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = sub.inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = (sub.build)(&mut g, &leaves)?;
        let shape = g.value(y).shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| 0.5 + rng.random::<f64>()).collect();
        Tensor::from_parts(shape, data)
    };

    let (g, leaves, obj) = assemble(sub, &sub.inputs, &weights)?;
    let grads = g.backward(obj)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&id| {
            let mut v = grads.get(id).map(|s| s.to_vec()).unwrap_or_default();
            if sabotaged {
                for x in &mut v {
                    *x = *x * 1.01 + 1e-2;
                }
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;

    let mut max_rel = 0.0f64;
    for (li, input) in sub.inputs.iter().enumerate() {
        for &j in &sample_indices(input.len()) {
            let probe = |delta: f64| -> Result<f64> {
                let mut vals = sub.inputs.to_vec();
                let mut data = vals[li].data().to_vec();
                data[j] += delta;
                vals[li] = Tensor::from_parts(vals[li].shape().to_vec(), data);
                let (g, _, obj) = assemble(sub, &vals, &weights)?;
                Ok(g.value(obj).item())
            };
            let numeric = (probe(EPS)? - probe(-EPS)?) / (2.0 * EPS);
            max_rel = max_rel.max(rel_err(analytic[li][j], numeric));
        }
    }
    Ok(max_rel)
}

fn op_catalog(r: &mut ChaCha8Rng) -> Vec<OpCase> {
    // conv2d covers both the stride-1 fast path and the strided fallback
    let mut cases = vec![OpCase {
        name: "conv2d",
        subs: vec![
            SubCase {
                inputs: vec![rand_tensor(r, vec![2, 5, 5]), rand_tensor(r, vec![3, 2, 3, 3])],
                build: Box::new(|g, l| g.conv2d(l[0], l[1], 1, 1)),
            },
            SubCase {
                inputs: vec![rand_tensor(r, vec![2, 7, 7]), rand_tensor(r, vec![2, 2, 3, 3])],
                build: Box::new(|g, l| g.conv2d(l[0], l[1], 0, 2)),
            },
        ],
    }];
    let mut push = |name: &'static str, inputs: Vec<Tensor>, build: Build| {
        cases.push(OpCase { name, subs: vec![SubCase { inputs, build }] });
    };

    push(
        "bias_channels",
        vec![rand_tensor(r, vec![3, 4, 4]), rand_tensor(r, vec![3])],
        Box::new(|g, l| g.bias_channels(l[0], l[1])),
    );
    push(
        "maxpool2",
        vec![rand_tensor_distinct(r, vec![2, 6, 6])],
        Box::new(|g, l| g.maxpool2(l[0])),
    );
    push("upsample2", vec![rand_tensor(r, vec![2, 3, 3])], Box::new(|g, l| g.upsample2(l[0])));
    push(
        "dense",
        vec![rand_tensor(r, vec![5]), rand_tensor(r, vec![4, 5]), rand_tensor(r, vec![4])],
        Box::new(|g, l| g.dense(l[0], l[1], l[2])),
    );
    push(
        "relu",
        vec![rand_tensor_off_kink(r, vec![7])],
        Box::new(|g, l| Ok(g.relu(l[0]))),
    );
    push("sigmoid", vec![rand_tensor(r, vec![7])], Box::new(|g, l| Ok(g.sigmoid(l[0]))));
    push(
        "add",
        vec![rand_tensor(r, vec![3, 2]), rand_tensor(r, vec![3, 2])],
        Box::new(|g, l| g.add(l[0], l[1])),
    );
    push(
        "mul",
        vec![rand_tensor(r, vec![3, 2]), rand_tensor(r, vec![3, 2])],
        Box::new(|g, l| g.mul(l[0], l[1])),
    );
    push("scale", vec![rand_tensor(r, vec![5])], Box::new(|g, l| Ok(g.scale(l[0], 1.7))));
    push(
        "add_n",
        vec![rand_tensor(r, vec![4]), rand_tensor(r, vec![4]), rand_tensor(r, vec![4])],
        Box::new(|g, l| g.add_n(l)),
    );
    push(
        "reshape",
        vec![rand_tensor(r, vec![2, 6])],
        Box::new(|g, l| g.reshape(l[0], vec![3, 4])),
    );
    push(
        "concat_channels",
        vec![rand_tensor(r, vec![2, 3, 3]), rand_tensor(r, vec![3, 3, 3])],
        Box::new(|g, l| g.concat_channels(l[0], l[1])),
    );
    push(
        "row_stack",
        vec![rand_tensor(r, vec![5]), rand_tensor(r, vec![5]), rand_tensor(r, vec![5])],
        Box::new(|g, l| g.row_stack(l)),
    );
    push("sum", vec![rand_tensor(r, vec![6])], Box::new(|g, l| Ok(g.sum(l[0]))));
    push("mean", vec![rand_tensor(r, vec![6])], Box::new(|g, l| Ok(g.mean(l[0]))));
    push(
        "mse_loss",
        vec![rand_tensor(r, vec![2, 3, 3]), rand_tensor(r, vec![2, 3, 3])],
        Box::new(|g, l| g.mse_loss(l[0], l[1])),
    );
    push(
        "cross_entropy",
        vec![rand_tensor(r, vec![5])],
        Box::new(|g, l| g.cross_entropy(l[0], 2)),
    );
    push(
        "pixel_cross_entropy",
        vec![rand_tensor(r, vec![3, 2, 2])],
        Box::new(|g, l| {
            g.pixel_cross_entropy(l[0], &[0, 2, 1, 1], &[1.0, 0.5, 2.0, 1.5])
        }),
    );
    // rows of y shifted so the discrepancy is far from the sqrt kink at 0
    let mmd_x = rand_tensor(r, vec![4, 3]);
    let mmd_y = {
        let t = rand_tensor(r, vec![3, 3]);
        t.map(|v| v + 0.8)
    };
    push(
        "mmd_loss",
        vec![mmd_x, mmd_y],
        Box::new(|g, l| {
            let spec = KernelSpec::rbf(vec![0.5, 1.0, 2.0]).expect("fixed bandwidths");
            g.mmd_loss(l[0], l[1], &spec)
        }),
    );
    cases
}

/// Differentiates the full joint loss with respect to every parameter and
/// compares strided components against central differences.
fn check_dff_model() -> Result<f64> {
    let arch = DffArch { input: (1, 8, 8), encoder_channels: (2, 3), num_classes: 2 };
    let base = DffParams::init(arch, HARNESS_SEED)?;
    let mut r = rng::stream(HARNESS_SEED, 201);
    let clamp01 = |t: Tensor| t.map(|v| 0.5 + 0.4 * v);
    let sources = vec![vec![
        clamp01(rand_tensor(&mut r, vec![1, 8, 8])),
        clamp01(rand_tensor(&mut r, vec![1, 8, 8])),
    ]];
    let target = vec![
        clamp01(rand_tensor(&mut r, vec![1, 8, 8])),
        clamp01(rand_tensor(&mut r, vec![1, 8, 8])),
    ];
    let labels = [0usize, 1];
    let kernel = KernelChoice::Fixed(KernelSpec::rbf(vec![0.5, 1.0, 2.0])?);
    let lambda = Lambda { r: 1.0, d: 1.0, c: 1.0 };

    let eval = |params: &DffParams| -> Result<f64> {
        let lg = params.loss_graph(
            &sources,
            &target,
            &labels,
            lambda,
            &kernel,
            DomainPooling::Pooled,
            0,
        )?;
        Ok(lg.graph.value(lg.objective).item())
    };

    let lg = base.loss_graph(
        &sources,
        &target,
        &labels,
        lambda,
        &kernel,
        DomainPooling::Pooled,
        0,
    )?;
    let grads = lg.graph.backward(lg.objective)?;
    let analytic: Vec<Vec<f64>> = lg
        .param_ids
        .iter()
        .map(|&id| grads.get(id).map(|s| s.to_vec()).unwrap_or_default())
        .collect();

    let mut max_rel = 0.0f64;
    for (pi, p) in base.params().iter().enumerate() {
        for &j in &sample_indices(p.value.len()) {
            let probe = |delta: f64| -> Result<f64> {
                let mut params: Vec<Param> = base.params().to_vec();
                let mut data = params[pi].value.data().to_vec();
                data[j] += delta;
                params[pi] =
                    Param::new(&params[pi].name, Tensor::from_parts(params[pi].value.shape().to_vec(), data));
                let perturbed = DffParams::from_parts(arch, params)?;
                eval(&perturbed)
            };
            let numeric = (probe(EPS)? - probe(-EPS)?) / (2.0 * EPS);
            max_rel = max_rel.max(rel_err(analytic[pi][j], numeric));
        }
    }
    Ok(max_rel)
}

/// Same treatment for the segmenter: forward plus the boundary-weighted
/// pixel loss, dropout off.
fn check_seg_model() -> Result<f64> {
    let arch = SegArch { input: (1, 16, 16), base_channels: 2, dropout_rate: 0.0, num_classes: 2 };
    let base = SegParams::init(arch, HARNESS_SEED)?;
    let mut r = rng::stream(HARNESS_SEED, 202);
    let image = rand_tensor(&mut r, vec![1, 16, 16]).map(|v| 0.5 + 0.4 * v);
    let mask_data: Vec<u8> = (0..256)
        .map(|i| {
            let (y, x) = (i / 16, i % 16);
            u8::from((4..8).contains(&y) && (3..9).contains(&x) || (10..13).contains(&y) && (10..14).contains(&x))
        })
        .collect();
    let mask = Mask::new(16, 16, mask_data)?;
    let weights = weight_map(&mask, 2, DEFAULT_BORDER_GAIN, DEFAULT_BORDER_SIGMA)?;

    let eval = |params: &SegParams| -> Result<f64> {
        let mut g = Graph::new();
        let nodes = params.insert(&mut g);
        let x = g.constant(image.clone());
        let logits = params.forward(&mut g, &nodes, x, None)?;
        let loss = g.pixel_cross_entropy(logits, &mask.data, &weights.data)?;
        Ok(g.value(loss).item())
    };

    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let nodes = base.insert(&mut g);
        let x = g.constant(image.clone());
        let logits = base.forward(&mut g, &nodes, x, None)?;
        let loss = g.pixel_cross_entropy(logits, &mask.data, &weights.data)?;
        let grads = g.backward(loss)?;
        nodes
            .ids()
            .iter()
            .map(|&id| grads.get(id).map(|s| s.to_vec()).unwrap_or_default())
            .collect()
    };

    let mut max_rel = 0.0f64;
    for (pi, p) in base.params().iter().enumerate() {
        for &j in &sample_indices(p.value.len()) {
            let probe = |delta: f64| -> Result<f64> {
                let mut params: Vec<Param> = base.params().to_vec();
                let mut data = params[pi].value.data().to_vec();
                data[j] += delta;
                params[pi] =
                    Param::new(&params[pi].name, Tensor::from_parts(params[pi].value.shape().to_vec(), data));
                eval(&SegParams::from_parts(arch, params)?)
            };
            let numeric = (probe(EPS)? - probe(-EPS)?) / (2.0 * EPS);
            max_rel = max_rel.max(rel_err(analytic[pi][j], numeric));
        }
    }
    Ok(max_rel)
}

/// Runs the whole suite. `sabotage` corrupts the analytic gradients of the
/// named operator case before comparison, proving the harness can fail.
pub fn run_all(sabotage: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut rng = rng::stream(HARNESS_SEED, 200);
    let mut results = Vec::new();
    for case in op_catalog(&mut rng) {
        let sab = sabotage == Some(case.name);
        let mut max_rel = 0.0f64;
        for sub in &case.subs {
            max_rel = max_rel.max(check_sub(sub, &mut rng, sab)?);
        }
        results.push(CheckResult { name: case.name, max_rel });
    }
    results.push(CheckResult { name: "dff_model", max_rel: check_dff_model()? });
    results.push(CheckResult { name: "seg_model", max_rel: check_seg_model()? });
    if let Some(name) = sabotage {
        if !results.iter().any(|r| r.name == name) {
            return Err(Error::invalid(format!("no gradcheck case named {name}")));
        }
    }
    Ok(results)
}
