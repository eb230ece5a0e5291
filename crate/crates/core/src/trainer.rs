//! The joint training loop: seeded batch pairing over the pooled sources and
//! the target, per-batch loss assembly, parameter updates, and the recorded
//! loss history.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Domain, Role};
use crate::error::{Error, Result};
use crate::kernel::DomainPooling;
use crate::metrics::{self, MetricsSummary};
use crate::model::{DffArch, DffParams, KernelChoice, Lambda, LossBundle};
use crate::optim::{Method, OptimState, DEFAULT_LEARNING_RATE};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Outer iteration count I.
    pub max_iterations: u64,
    /// Batches per iteration N; the run performs I*N update steps.
    pub batch_number: u64,
    pub batch_size: usize,
    pub lambda: Lambda,
    pub learning_rate: f64,
    pub seed: u64,
    pub method: Method,
    pub kernel: KernelChoice,
    pub pooling: DomainPooling,
    /// Stop early when the total loss has not improved for this many steps.
    pub patience: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 10,
            batch_number: 100,
            batch_size: 8,
            lambda: Lambda::default(),
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 1,
            method: Method::AdaptiveMoments,
            kernel: KernelChoice::MedianHeuristic,
            pooling: DomainPooling::default(),
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.batch_number == 0 || self.batch_size == 0 {
            return Err(Error::config("iterations, batch number and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("bad learning rate {}", self.learning_rate)));
        }
        self.lambda.validate()?;
        Ok(())
    }

    pub fn total_steps(&self) -> Result<u64> {
        self.max_iterations
            .checked_mul(self.batch_number)
            .ok_or_else(|| Error::config("iteration count overflows"))
    }
}

/// Seed-deterministic batch source. Source picks are uniform with
/// replacement over the concatenated source pools (so each domain is
/// represented in proportion to its size); target picks are uniform over the
/// target pool. The two draw sequences use independent streams, so source
/// draws never perturb target draws.
pub struct BatchPairing {
    prefix: Vec<usize>,
    total: usize,
    target_size: usize,
    source_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
}

impl BatchPairing {
    pub fn new(source_sizes: &[usize], target_size: usize, seed: u64) -> Result<Self> {
        if source_sizes.is_empty() || source_sizes.contains(&0) || target_size == 0 {
            return Err(Error::invalid("batch pairing needs nonempty pools"));
        }
        let mut prefix = Vec::with_capacity(source_sizes.len());
        let mut total = 0;
        for &s in source_sizes {
            prefix.push(total);
            total += s;
        }
        Ok(BatchPairing {
            prefix,
            total,
            target_size,
            source_rng: rng::stream(seed, rng::STREAM_SOURCE_BATCH),
            target_rng: rng::stream(seed, rng::STREAM_TARGET_BATCH),
        })
    }

    /// Draws one (source, target) batch pair of `batch_size` picks each.
    /// Source picks are (domain index, sample index).
    pub fn next(&mut self, batch_size: usize) -> (Vec<(usize, usize)>, Vec<usize>) {
        let mut source = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let u = self.source_rng.random_range(0..self.total);
            let d = self.prefix.partition_point(|&p| p <= u) - 1;
            source.push((d, u - self.prefix[d]));
        }
        let target = (0..batch_size)
            .map(|_| self.target_rng.random_range(0..self.target_size))
            .collect();
        (source, target)
    }
}

/// Outcome of a training run. `abort` is set when a numerical failure
/// stopped the run early; `params` then hold the last values that every
/// validation pass accepted.
pub struct TrainRun {
    pub params: DffParams,
    pub history: Vec<LossBundle>,
    pub abort: Option<Error>,
}

fn check_domains(sources: &[Domain], target: &Domain, arch: &DffArch) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::data("at least one source domain is required"));
    }
    let want = vec![arch.input.0, arch.input.1, arch.input.2];
    for d in sources {
        d.validate()?;
        if d.role != Role::Source {
            return Err(Error::data(format!("domain {} is not a source", d.name)));
        }
        if *d.samples[0].shape() != want {
            return Err(Error::shape(
                format!("source domain {}", d.name),
                format!("{want:?}"),
                format!("{:?}", d.samples[0].shape()),
            ));
        }
    }
    target.validate()?;
    if target.role != Role::Target || target.labels.is_none() {
        return Err(Error::data(format!("domain {} is not a labeled target", target.name)));
    }
    if *target.samples[0].shape() != want {
        return Err(Error::shape(
            format!("target domain {}", target.name),
            format!("{want:?}"),
            format!("{:?}", target.samples[0].shape()),
        ));
    }
    if target.classes_present().len() < 2 {
        return Err(Error::data(format!(
            "target domain {} has fewer than 2 classes present",
            target.name
        )));
    }
    if target.classes_present().last().copied().unwrap_or(0) >= arch.num_classes {
        return Err(Error::data(format!(
            "target domain {} has labels outside 0..{}",
            target.name, arch.num_classes
        )));
    }
    Ok(())
}

/// Joint training: every step encodes a source batch and a target batch,
/// decodes both, classifies the target samples, assembles the weighted loss,
/// and updates all parameters. Deterministic given the seed.
pub fn train_dff(
    sources: &[Domain],
    target: &Domain,
    arch: DffArch,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    arch.validate()?;
    check_domains(sources, target, &arch)?;
    let labels = target.labels.as_ref().expect("checked above");

    let sizes: Vec<usize> = sources.iter().map(|d| d.samples.len()).collect();
    let mut pairing = BatchPairing::new(&sizes, target.samples.len(), cfg.seed)?;
    let mut params = DffParams::init(arch, cfg.seed)?;
    let mut opt = OptimState::new(cfg.method, cfg.learning_rate)?;

    let steps = cfg.total_steps()?;
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0u64);
    for step in 0..steps {
        let (source_picks, target_picks) = pairing.next(cfg.batch_size);
        let source_batches: Vec<Vec<Tensor>> = match cfg.pooling {
            DomainPooling::Pooled => vec![source_picks
                .iter()
                .map(|&(d, i)| sources[d].samples[i].clone())
                .collect()],
            DomainPooling::AveragePerDomain => {
                let mut by_domain: Vec<Vec<Tensor>> = vec![Vec::new(); sources.len()];
                for &(d, i) in &source_picks {
                    by_domain[d].push(sources[d].samples[i].clone());
                }
                by_domain.retain(|b| !b.is_empty());
                by_domain
            }
        };
        let target_batch: Vec<Tensor> =
            target_picks.iter().map(|&i| target.samples[i].clone()).collect();
        let target_labels: Vec<usize> = target_picks.iter().map(|&i| labels[i]).collect();

        let outcome = (|| -> Result<LossBundle> {
            let lg = params.loss_graph(
                &source_batches,
                &target_batch,
                &target_labels,
                cfg.lambda,
                &cfg.kernel,
                cfg.pooling,
                step,
            )?;
            let grads = lg.graph.backward(lg.objective)?;
            let slices: Vec<&[f64]> = lg
                .param_ids
                .iter()
                .map(|&id| {
                    grads.get(id).ok_or_else(|| Error::invalid("parameter missing gradient"))
                })
                .collect::<Result<_>>()?;
            opt.step(params.params_mut(), &slices)?;
            Ok(lg.bundle)
        })();
        match outcome {
            Ok(bundle) => {
                let total = bundle.l;
                history.push(bundle);
                if total < best.0 {
                    best = (total, step);
                }
                if let Some(patience) = cfg.patience {
                    if step - best.1 >= patience {
                        break;
                    }
                }
            }
            Err(e) => {
                return Ok(TrainRun { params, history, abort: Some(e) });
            }
        }
    }
    Ok(TrainRun { params, history, abort: None })
}

/// Runs encode + classify over a labeled domain and scores the argmax
/// predictions.
pub fn evaluate_classifier(params: &DffParams, data: &Domain) -> Result<MetricsSummary> {
    data.validate()?;
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::data(format!("domain {} is unlabeled", data.name)))?;
    let pred: Vec<usize> = data
        .samples
        .iter()
        .map(|x| params.predict(x))
        .collect::<Result<_>>()?;
    metrics::report(&pred, labels)
}

/// Loss history as CSV: `step,L_R,L_D,L_C,L`, ten significant digits.
pub fn loss_csv(history: &[LossBundle]) -> String {
    let mut out = String::from("step,L_R,L_D,L_C,L\n");
    for b in history {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            b.iteration, b.l_r, b.l_d, b.l_c, b.l
        ));
    }
    out
}

pub fn write_loss_csv(path: &Path, history: &[LossBundle]) -> Result<()> {
    data::atomic_write(path, loss_csv(history).as_bytes())
}
