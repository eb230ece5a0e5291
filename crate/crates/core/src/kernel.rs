//! RBF kernel evaluations and the maximum mean discrepancy (MMD) estimator
//! used as the domain-distance loss between encoder feature batches.
//!
//! The estimator is the biased V-statistic
//!
//!   mmd(X, Y) = sqrt( (1/n1^2) ΣΣ k(x, x') + (1/n2^2) ΣΣ k(y, y')
//!                     - (2/(n1 n2)) ΣΣ k(x, y) )
//!
//! clamped at zero before the root. The kernel is a sum of RBF terms
//! k(a, b) = Σ_γ exp(-γ ‖a-b‖²) over the configured bandwidths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Rbf,
}

#[derive(Debug, Clone)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidths: Vec<f64>,
}

/// How multiple source-domain feature batches enter the domain loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainPooling {
    /// Concatenate all source batches along the sample axis, one MMD call.
    #[default]
    Pooled,
    /// One MMD per source domain against the target, averaged.
    AveragePerDomain,
}

impl KernelSpec {
    pub fn rbf(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::invalid("kernel needs at least one bandwidth"));
        }
        if bandwidths.iter().any(|g| !g.is_finite() || *g <= 0.0) {
            return Err(Error::invalid("kernel bandwidths must be positive and finite"));
        }
        Ok(Self { kind: KernelKind::Rbf, bandwidths })
    }

    /// Median-heuristic bandwidths over a pooled batch of rows: the base γ is
    /// 1 / (2 · median pairwise squared distance), widened by {1/4, 1, 4}.
    /// Falls back to γ = 1 when the batch has no spread.
    pub fn median_heuristic(rows: &[f64], d: usize) -> Result<Self> {
        check_rows("median_heuristic", rows, d)?;
        let n = rows.len() / d;
        let mut dists = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                dists.push(sq_dist(&rows[i * d..(i + 1) * d], &rows[j * d..(j + 1) * d]));
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        let base = if dists.is_empty() {
            1.0
        } else {
            let med = 0.5 * (dists[(dists.len() - 1) / 2] + dists[dists.len() / 2]);
            if med > 0.0 && med.is_finite() {
                1.0 / (2.0 * med)
            } else {
                1.0
            }
        };
        Self::rbf(vec![0.25 * base, base, 4.0 * base])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn check_rows(context: &str, rows: &[f64], d: usize) -> Result<()> {
    if d == 0 {
        return Err(Error::invalid(format!("{context}: zero feature dimension")));
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{context}: empty sample set")));
    }
    if rows.len() % d != 0 {
        return Err(Error::shape(
            context,
            format!("row-major (n, {d})"),
            format!("{} values", rows.len()),
        ));
    }
    Ok(())
}

/// Multi-bandwidth RBF kernel value for one pair of feature vectors.
pub fn kernel_eval(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("kernel_eval", x.len().to_string(), y.len().to_string()));
    }
    if x.is_empty() {
        return Err(Error::invalid("kernel_eval: empty vectors"));
    }
    let sq = sq_dist(x, y);
    Ok(spec.bandwidths.iter().map(|g| (-g * sq).exp()).sum())
}

fn kernel_of_sq(sq: f64, spec: &KernelSpec) -> f64 {
    spec.bandwidths.iter().map(|g| (-g * sq).exp()).sum()
}

/// Σγ γ·exp(-γ d²): the weight that appears in the kernel derivative.
fn kernel_slope_of_sq(sq: f64, spec: &KernelSpec) -> f64 {
    spec.bandwidths.iter().map(|g| g * (-g * sq).exp()).sum()
}

/// MMD between row-major sample sets `x` (n1, d) and `y` (n2, d).
pub fn mmd(x: &[f64], y: &[f64], d: usize, spec: &KernelSpec) -> Result<f64> {
    check_rows("mmd", x, d)?;
    check_rows("mmd", y, d)?;
    let n1 = x.len() / d;
    let n2 = y.len() / d;
    let mut kxx = 0.0;
    for i in 0..n1 {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..n1 {
            kxx += kernel_of_sq(sq_dist(xi, &x[j * d..(j + 1) * d]), spec);
        }
    }
    let mut kyy = 0.0;
    for i in 0..n2 {
        let yi = &y[i * d..(i + 1) * d];
        for j in 0..n2 {
            kyy += kernel_of_sq(sq_dist(yi, &y[j * d..(j + 1) * d]), spec);
        }
    }
    let mut kxy = 0.0;
    for i in 0..n1 {
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..n2 {
            kxy += kernel_of_sq(sq_dist(xi, &y[j * d..(j + 1) * d]), spec);
        }
    }
    let sq = kxx / (n1 * n1) as f64 + kyy / (n2 * n2) as f64 - 2.0 * kxy / (n1 * n2) as f64;
    Ok(sq.max(0.0).sqrt())
}

/// MMD value together with its gradient with respect to every entry of `x`
/// and `y`. Bandwidths are treated as constants. Below 1e-12 the root is not
/// differentiable and the gradient is defined as zero.
pub fn mmd_with_grad(
    x: &[f64],
    y: &[f64],
    d: usize,
    spec: &KernelSpec,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let value = mmd(x, y, d, spec)?;
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; y.len()];
    if value < 1e-12 {
        return Ok((value, gx, gy));
    }
    let n1 = x.len() / d;
    let n2 = y.len() / d;
    let cxx = -4.0 / ((n1 * n1) as f64);
    let cyy = -4.0 / ((n2 * n2) as f64);
    let cxy = 4.0 / ((n1 * n2) as f64);
    for t in 0..n1 {
        let xt = &x[t * d..(t + 1) * d];
        let mut acc = vec![0.0; d];
        for j in 0..n1 {
            let xj = &x[j * d..(j + 1) * d];
            let s = kernel_slope_of_sq(sq_dist(xt, xj), spec);
            for m in 0..d {
                acc[m] += cxx * (xt[m] - xj[m]) * s;
            }
        }
        for j in 0..n2 {
            let yj = &y[j * d..(j + 1) * d];
            let s = kernel_slope_of_sq(sq_dist(xt, yj), spec);
            for m in 0..d {
                acc[m] += cxy * (xt[m] - yj[m]) * s;
            }
        }
        for m in 0..d {
            gx[t * d + m] = acc[m] / (2.0 * value);
        }
    }
    for t in 0..n2 {
        let yt = &y[t * d..(t + 1) * d];
        let mut acc = vec![0.0; d];
        for j in 0..n2 {
            let yj = &y[j * d..(j + 1) * d];
            let s = kernel_slope_of_sq(sq_dist(yt, yj), spec);
            for m in 0..d {
                acc[m] += cyy * (yt[m] - yj[m]) * s;
            }
        }
        for j in 0..n1 {
            let xj = &x[j * d..(j + 1) * d];
            let s = kernel_slope_of_sq(sq_dist(yt, xj), spec);
            for m in 0..d {
                acc[m] += cxy * (yt[m] - xj[m]) * s;
            }
        }
        for m in 0..d {
            gy[t * d + m] = acc[m] / (2.0 * value);
        }
    }
    Ok((value, gx, gy))
}

/// Domain-distance loss between source feature batches and a target batch.
pub fn domain_loss(
    sources: &[&[f64]],
    target: &[f64],
    d: usize,
    spec: &KernelSpec,
    pooling: DomainPooling,
) -> Result<f64> {
    if sources.is_empty() {
        return Err(Error::invalid("domain_loss: no source batches"));
    }
    match pooling {
        DomainPooling::Pooled => {
            let mut pooled = Vec::with_capacity(sources.iter().map(|s| s.len()).sum());
            for s in sources {
                pooled.extend_from_slice(s);
            }
            mmd(&pooled, target, d, spec)
        }
        DomainPooling::AveragePerDomain => {
            let mut total = 0.0;
            for s in sources {
                total += mmd(s, target, d, spec)?;
            }
            Ok(total / sources.len() as f64)
        }
    }
}
