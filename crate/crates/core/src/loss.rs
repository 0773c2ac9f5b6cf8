//! L2-regularized logistic loss, bound estimates and the comparator solver.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::TheoryConstants;

/// A model (or any d-dimensional vector living in model space).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelVector(pub Vec<f64>);

impl ModelVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ModelVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ModelVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// One labelled example `(a, y)` with `y` in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: f64) -> Result<Self> {
        if label != 1.0 && label != -1.0 {
            return Err(Error::InvalidInput(format!("label {label} is not +1 or -1")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature".into()));
        }
        Ok(Self { features, label })
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub lambda: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { lambda: 1e-4 }
    }
}

/// Constants of the regularity assumptions, instantiated from data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimates {
    /// Squared-diameter bound of the domain.
    pub r: f64,
    /// Gradient-norm bound.
    pub g: f64,
    /// Gradient standard-deviation bound.
    pub sigma: f64,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `ln(1 + e^u)` without overflow.
fn log1p_exp(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn check_dim(x: &[f64], s: &Sample) -> Result<()> {
    if x.len() != s.features.len() {
        return Err(Error::DimensionMismatch { expected: s.features.len(), found: x.len() });
    }
    Ok(())
}

/// `ln(1 + exp(-y <a, x>)) + (lambda/2) |x|^2`.
pub fn loss(spec: &LossSpec, x: &[f64], s: &Sample) -> Result<f64> {
    check_dim(x, s)?;
    let margin = s.label * dot(&s.features, x);
    Ok(log1p_exp(-margin) + 0.5 * spec.lambda * norm_sq(x))
}

/// `-y a sigmoid(-y <a, x>) + lambda x`.
pub fn gradient(spec: &LossSpec, x: &[f64], s: &Sample) -> Result<ModelVector> {
    let mut out = vec![0.0; x.len()];
    gradient_into(spec, x, s, &mut out)?;
    Ok(ModelVector(out))
}

pub fn gradient_into(spec: &LossSpec, x: &[f64], s: &Sample, out: &mut [f64]) -> Result<()> {
    check_dim(x, s)?;
    if out.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), found: out.len() });
    }
    let margin = s.label * dot(&s.features, x);
    let scale = -s.label * sigmoid(-margin);
    for ((o, a), xi) in out.iter_mut().zip(&s.features).zip(x) {
        *o = scale * a + spec.lambda * xi;
    }
    Ok(())
}

/// Step size that balances the regret bound:
/// `sqrt(n) R / (sigma sqrt(1 + n C2) + G sqrt(n C1 T))`.
///
/// With `sigma = G = 0` the denominator vanishes and the result is infinite.
pub fn theoretical_gamma(n: usize, rounds: usize, b: &BoundEstimates, c: &TheoryConstants) -> f64 {
    let n = n as f64;
    let t = rounds as f64;
    n.sqrt() * b.r / (b.sigma * (1.0 + n * c.c2).sqrt() + b.g * (n * c.c1 * t).sqrt())
}
/// Summed objective over weighted samples, with its gradient.
fn weighted_loss_and_grad(samples: &[(&Sample, f64)], spec: &LossSpec, x: &[f64], grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    let mut mass = 0.0;
    for &(s, w) in samples {
        let margin = s.label * dot(&s.features, x);
        total += w * log1p_exp(-margin);
        let scale = -w * s.label * sigmoid(-margin);
        for (g, a) in grad.iter_mut().zip(&s.features) {
            *g += scale * a;
        }
        mass += w;
    }
    for (g, xi) in grad.iter_mut().zip(x) {
        *g += mass * spec.lambda * xi;
    }
    total + 0.5 * mass * spec.lambda * norm_sq(x)
}

#[cfg(test)]
fn total_loss_and_grad(samples: &[Sample], spec: &LossSpec, x: &[f64], grad: &mut [f64]) -> f64 {
    let weighted: Vec<(&Sample, f64)> = samples.iter().map(|s| (s, 1.0)).collect();
    weighted_loss_and_grad(&weighted, spec, x, grad)
}

/// Row-major Hessian of the summed objective.
fn weighted_hessian(samples: &[(&Sample, f64)], spec: &LossSpec, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut h = vec![0.0; d * d];
    let mut mass = 0.0;
    for &(s, w) in samples {
        let p = sigmoid(s.label * dot(&s.features, x));
        let c = w * p * (1.0 - p);
        for (r, ar) in s.features.iter().enumerate() {
            let row = &mut h[r * d..(r + 1) * d];
            for (hv, ac) in row[..=r].iter_mut().zip(&s.features) {
                *hv += c * ar * ac;
            }
        }
        mass += w;
    }
    for r in 0..d {
        h[r * d + r] += mass * spec.lambda;
        for c in 0..r {
            h[c * d + r] = h[r * d + c];
        }
    }
    h
}

/// Solves `H v = b` for symmetric positive definite `H` by Cholesky.
fn cholesky_solve(mut h: Vec<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let d = b.len();
    for j in 0..d {
        let diag = h[j * d + j] - (0..j).map(|k| h[j * d + k] * h[j * d + k]).sum::<f64>();
        if diag <= 0.0 || !diag.is_finite() {
            return None;
        }
        let l = diag.sqrt();
        h[j * d + j] = l;
        for i in j + 1..d {
            let v = h[i * d + j] - (0..j).map(|k| h[i * d + k] * h[j * d + k]).sum::<f64>();
            h[i * d + j] = v / l;
        }
    }
    let mut y = b.to_vec();
    for i in 0..d {
        y[i] = (y[i] - (0..i).map(|k| h[i * d + k] * y[k]).sum::<f64>()) / h[i * d + i];
    }
    for i in (0..d).rev() {
        y[i] = (y[i] - (i + 1..d).map(|k| h[k * d + i] * y[k]).sum::<f64>()) / h[i * d + i];
    }
    Some(y)
}

pub const COMPARATOR_MAX_ITERS: usize = 100_000;

/// Dimension up to which the comparator uses Newton directions.
pub const NEWTON_MAX_DIM: usize = 512;

/// Minimizer of the summed loss, stopping once `|grad| <= tol`.
pub fn solve_comparator(samples: &[Sample], spec: &LossSpec, tol: f64) -> Result<ModelVector> {
    let d = samples.first().ok_or(Error::EmptyDataset)?.dim();
    solve_comparator_from(samples, spec, tol, ModelVector::zeros(d))
}

pub fn solve_comparator_from(
    samples: &[Sample],
    spec: &LossSpec,
    tol: f64,
    start: ModelVector,
) -> Result<ModelVector> {
    let weighted: Vec<(&Sample, f64)> = samples.iter().map(|s| (s, 1.0)).collect();
    solve_comparator_weighted(&weighted, spec, tol, start)
}

/// Minimizer of `sum_k w_k f(x; s_k)`, stopping once the gradient norm is
/// at most `tol`.
///
/// Descent directions are Newton steps (gradient steps above
/// [`NEWTON_MAX_DIM`]), each followed by an Armijo backtracking line search.
pub fn solve_comparator_weighted(
    samples: &[(&Sample, f64)],
    spec: &LossSpec,
    tol: f64,
    start: ModelVector,
) -> Result<ModelVector> {
    let first = samples.first().ok_or(Error::EmptyDataset)?.0;
    let d = first.dim();
    if let Some((bad, _)) = samples.iter().find(|(s, _)| s.dim() != d) {
        return Err(Error::DimensionMismatch { expected: d, found: bad.dim() });
    }
    if start.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, found: start.dim() });
    }
    if spec.lambda <= 0.0 {
        return Err(Error::InvalidInput("comparator needs lambda > 0".into()));
    }
    if samples.iter().any(|&(_, w)| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput("sample weights must be finite and non-negative".into()));
    }

    let use_newton = d <= NEWTON_MAX_DIM;
    // Smoothness of the summed objective bounds the first gradient step.
    let lipschitz: f64 = samples.iter().map(|&(s, w)| w * (0.25 * norm_sq(&s.features) + spec.lambda)).sum();
    let mut gd_step = 1.0 / lipschitz;
    let mut x = start.0;
    let mut grad = vec![0.0; d];
    let mut value = weighted_loss_and_grad(samples, spec, &x, &mut grad);
    let mut grad_norm = norm(&grad);
    let mut trial = vec![0.0; d];
    let mut trial_grad = vec![0.0; d];

    for iteration in 0..COMPARATOR_MAX_ITERS {
        if grad_norm <= tol {
            return Ok(ModelVector(x));
        }
        let newton = use_newton
            .then(|| cholesky_solve(weighted_hessian(samples, spec, &x), &grad))
            .flatten();
        let is_newton = newton.is_some();
        let (direction, mut step) = match newton {
            Some(v) => (v, 1.0),
            None => {
                gd_step *= 2.0;
                (grad.clone(), gd_step)
            }
        };
        // direction points uphill; the update subtracts it.
        let slope = dot(&grad, &direction);
        let trial_value = loop {
            for ((t, xi), p) in trial.iter_mut().zip(&x).zip(&direction) {
                *t = xi - step * p;
            }
            let v = weighted_loss_and_grad(samples, spec, &trial, &mut trial_grad);
            // Near the optimum the decrease drowns in the rounding of the
            // objective; a shrinking gradient still certifies a Newton step.
            if v <= value - 1e-4 * step * slope || (is_newton && norm(&trial_grad) < grad_norm) {
                break v;
            }
            step *= 0.5;
            if step < 1e-30 {
                return Err(Error::NonConvergence { iterations: iteration, grad_norm });
            }
        };
        log::debug!("comparator iteration {iteration}: |grad| = {grad_norm:e}, newton = {is_newton}, step = {step:e}");
        if trial == x {
            return Err(Error::NonConvergence { iterations: iteration, grad_norm });
        }
        if !is_newton {
            gd_step = step;
        }
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        value = trial_value;
        grad_norm = norm(&grad);
    }
    if grad_norm <= tol {
        return Ok(ModelVector(x));
    }
    Err(Error::NonConvergence { iterations: COMPARATOR_MAX_ITERS, grad_norm })
}

/// Population standard deviation of per-sample gradients at `x = 0`.
fn gradient_spread_at_zero<'a>(samples: impl Iterator<Item = &'a Sample> + Clone, spec: &LossSpec, d: usize) -> f64 {
    let zero = vec![0.0; d];
    let mut mean = vec![0.0; d];
    let mut count = 0usize;
    let mut g = vec![0.0; d];
    for s in samples.clone() {
        gradient_into(spec, &zero, s, &mut g).expect("dimensions checked by caller");
        for (m, gi) in mean.iter_mut().zip(&g) {
            *m += gi;
        }
        count += 1;
    }
    if count == 0 {
        return 0.0;
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut acc = 0.0;
    for s in samples {
        gradient_into(spec, &zero, s, &mut g).expect("dimensions checked by caller");
        acc += g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    (acc / count as f64).sqrt()
}

/// `G = max |a| + lambda sqrt(radius)`, `sigma` = gradient spread at zero,
/// `R = radius`.
pub fn estimate_bounds(samples: &[Sample], spec: &LossSpec, radius: f64) -> Result<BoundEstimates> {
    estimate_bounds_grouped(&[samples.iter().collect()], spec, radius)
}

/// Like [`estimate_bounds`], but `sigma` is the largest spread over groups
/// (one group per node's stochastic draws).
pub fn estimate_bounds_grouped(
    groups: &[Vec<&Sample>],
    spec: &LossSpec,
    radius: f64,
) -> Result<BoundEstimates> {
    let first = groups.iter().flatten().next().ok_or(Error::EmptyDataset)?;
    let d = first.dim();
    if let Some(bad) = groups.iter().flatten().find(|s| s.dim() != d) {
        return Err(Error::DimensionMismatch { expected: d, found: bad.dim() });
    }
    if radius <= 0.0 {
        return Err(Error::InvalidInput("radius must be positive".into()));
    }
    let max_feature_norm = groups
        .iter()
        .flatten()
        .map(|s| norm(&s.features))
        .fold(0.0, f64::max);
    let sigma = groups
        .iter()
        .map(|group| gradient_spread_at_zero(group.iter().copied(), spec, d))
        .fold(0.0, f64::max);
    Ok(BoundEstimates {
        r: radius,
        g: max_feature_norm + spec.lambda * radius.sqrt(),
        sigma,
    })
}
