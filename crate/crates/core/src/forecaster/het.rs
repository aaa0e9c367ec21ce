//! Heteroscedastic affine predictor.
//!
//! Two affine heads on standardised features: one for the mean, one for
//! `log sigma`. Training minimises
//!
//! ```text
//! L = mean[(y - mu)^2 / (2 sigma^2) + log sigma] + lambda_sigma * mean[(log sigma)^2]
//! ```
//!
//! by full-batch gradient descent with closed-form gradients. The mean head
//! is warm-started from ordinary least squares and the log-sigma bias from
//! the residual spread; a step that would increase the loss is halved until
//! it does not, so recorded losses never go up.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on predicted sigma during fitting.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HetFitConfig {
    pub lambda_sigma: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub min_samples: usize,
    /// Record the training loss every this many iterations.
    pub checkpoint_every: usize,
}

impl Default for HetFitConfig {
    fn default() -> Self {
        Self {
            lambda_sigma: 0.01,
            step_size: 1e-2,
            iterations: 2000,
            min_samples: 10,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HetPredictor {
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub mean_weights: Vec<f64>,
    pub mean_bias: f64,
    pub log_sigma_weights: Vec<f64>,
    pub log_sigma_bias: f64,
    pub lambda_sigma: f64,
}

impl HetPredictor {
    pub fn input_dim(&self) -> usize {
        self.feature_mean.len()
    }

    fn standardize_into(&self, x: &[f64], out: &mut [f64]) {
        for (k, v) in x.iter().enumerate() {
            out[k] = (v - self.feature_mean[k]) / self.feature_scale[k];
        }
    }

    /// Predicted `(mu, sigma)` with `sigma = exp(log sigma) > 0`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("predictor input", self.input_dim(), x.len()));
        }
        let mut z = vec![0.0; x.len()];
        self.standardize_into(x, &mut z);
        let mu = self.mean_bias + dot(&self.mean_weights, &z);
        let log_sigma = self.log_sigma_bias + dot(&self.log_sigma_weights, &z);
        Ok((mu, log_sigma.exp().max(f64::MIN_POSITIVE)))
    }

    /// Training objective on a dataset, using the same sigma floor as fitting.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let (mu, sigma) = self.predict(x)?;
            let s = sigma.max(SIGMA_FLOOR).ln();
            let r = y - mu;
            total += r * r / (2.0 * (2.0 * s).exp()) + s + self.lambda_sigma * s * s;
        }
        Ok(total / xs.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HetFit {
    pub predictor: HetPredictor,
    /// `(iteration, loss)` checkpoints, starting with the warm start.
    pub loss_history: Vec<(usize, f64)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Design {
    /// Standardised features with a trailing bias column.
    x: DMatrix<f64>,
    y: DVector<f64>,
}

fn objective(design: &Design, theta_mu: &DVector<f64>, theta_s: &DVector<f64>, lambda: f64) -> f64 {
    let mu = &design.x * theta_mu;
    let s_raw = &design.x * theta_s;
    let n = design.y.len() as f64;
    let floor = SIGMA_FLOOR.ln();
    let mut total = 0.0;
    for i in 0..design.y.len() {
        let s = s_raw[i].max(floor);
        let r = design.y[i] - mu[i];
        total += r * r * (-2.0 * s).exp() / 2.0 + s + lambda * s * s;
    }
    total / n
}

fn gradient(
    design: &Design,
    theta_mu: &DVector<f64>,
    theta_s: &DVector<f64>,
    lambda: f64,
) -> (DVector<f64>, DVector<f64>) {
    let mu = &design.x * theta_mu;
    let s_raw = &design.x * theta_s;
    let n = design.y.len() as f64;
    let floor = SIGMA_FLOOR.ln();
    let mut d_mu = DVector::zeros(design.y.len());
    let mut d_s = DVector::zeros(design.y.len());
    for i in 0..design.y.len() {
        let clamped = s_raw[i] < floor;
        let s = s_raw[i].max(floor);
        let inv_var = (-2.0 * s).exp();
        let r = design.y[i] - mu[i];
        d_mu[i] = -r * inv_var / n;
        d_s[i] = if clamped {
            0.0
        } else {
            (1.0 - r * r * inv_var + 2.0 * lambda * s) / n
        };
    }
    (design.x.tr_mul(&d_mu), design.x.tr_mul(&d_s))
}

/// Fit the heteroscedastic predictor on `(xs[i], ys[i])` pairs.
pub fn fit_heteroscedastic(xs: &[Vec<f64>], ys: &[f64], config: &HetFitConfig) -> Result<HetFit> {
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::dim("training targets", n, ys.len()));
    }
    if n < config.min_samples.max(1) {
        return Err(Error::InsufficientData(format!(
            "{n} training samples, at least {} required",
            config.min_samples.max(1)
        )));
    }
    if !(config.lambda_sigma >= 0.0 && config.step_size > 0.0) {
        return Err(Error::invalid("lambda_sigma must be >= 0 and step size > 0"));
    }
    let p = xs[0].len();
    if let Some(bad) = xs.iter().find(|x| x.len() != p) {
        return Err(Error::dim("training feature row", p, bad.len()));
    }
    if ys.iter().any(|y| !y.is_finite()) || xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training data must be finite"));
    }

    let mut feature_mean = vec![0.0; p];
    let mut feature_scale = vec![0.0; p];
    for k in 0..p {
        let col: Vec<f64> = xs.iter().map(|x| x[k]).collect();
        let m = crate::math::mean(&col);
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
        feature_mean[k] = m;
        feature_scale[k] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let x = DMatrix::from_fn(n, p + 1, |i, k| {
        if k == p {
            1.0
        } else {
            (xs[i][k] - feature_mean[k]) / feature_scale[k]
        }
    });
    let design = Design {
        x,
        y: DVector::from_column_slice(ys),
    };

    // Warm start: ridge-stabilised least squares for the mean head.
    let gram = design.x.tr_mul(&design.x) + DMatrix::identity(p + 1, p + 1) * 1e-9 * n as f64;
    let rhs = design.x.tr_mul(&design.y);
    let mut theta_mu = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Divergence("least-squares warm start is singular".into()))?;
    let resid = &design.y - &design.x * &theta_mu;
    let rms = (resid.norm_squared() / n as f64).sqrt();
    let mut theta_s = DVector::zeros(p + 1);
    theta_s[p] = rms.max(SIGMA_FLOOR).ln();

    let lambda = config.lambda_sigma;
    let mut loss = objective(&design, &theta_mu, &theta_s, lambda);
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("initial loss is {loss}")));
    }
    let mut history = vec![(0, loss)];
    let mut step = config.step_size;
    let every = config.checkpoint_every.max(1);
    for it in 1..=config.iterations {
        let (g_mu, g_s) = gradient(&design, &theta_mu, &theta_s, lambda);
        if g_mu.iter().chain(g_s.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient at iteration {it}")));
        }
        let mut accepted = false;
        for _ in 0..60 {
            let cand_mu = &theta_mu - &g_mu * step;
            let cand_s = &theta_s - &g_s * step;
            let cand_loss = objective(&design, &cand_mu, &cand_s, lambda);
            if cand_loss.is_nan() {
                return Err(Error::Divergence(format!("loss became NaN at iteration {it}")));
            }
            if cand_loss <= loss {
                theta_mu = cand_mu;
                theta_s = cand_s;
                loss = cand_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent direction left at machine precision.
            history.push((it, loss));
            break;
        }
        step = (step * 2.0).min(config.step_size);
        if it % every == 0 || it == config.iterations {
            history.push((it, loss));
        }
    }
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("final loss is {loss}")));
    }

    let predictor = HetPredictor {
        feature_mean,
        feature_scale,
        mean_weights: theta_mu.iter().take(p).copied().collect(),
        mean_bias: theta_mu[p],
        log_sigma_weights: theta_s.iter().take(p).copied().collect(),
        log_sigma_bias: theta_s[p],
        lambda_sigma: lambda,
    };
    Ok(HetFit {
        predictor,
        loss_history: history,
    })
}
