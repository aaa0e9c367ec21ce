//! Uncertainty-guided graph attention.
//!
//! For a source node `i` with neighbourhood `N(i)` (self included) the
//! attention logits are
//!
//! ```text
//! e_ij  = LeakyReLU(a^T [W h_i || W h_j])
//! u_ij  = gamma * (sigma_i - sigma_j) + delta * 1[j == i]
//! alpha = softmax_j(e_ij + u_ij)
//! ```
//!
//! with `gamma = softplus(gamma_raw) >= 0`. Because `gamma * sigma_i` is
//! shared by every entry of the row it cancels in the softmax, so the ratio
//! between two non-self neighbours is `exp((e_ij - e_ik) + gamma (sigma_k - sigma_j))`:
//! attention shifts towards the more confident neighbour regardless of the
//! source's own uncertainty.
//!
//! The temperature-scaled baseline divides the logits by `1 + beta sigma_i`
//! and never reads the neighbours' uncertainties at all.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::graph::GraphTopology;
use crate::math::{leaky_relu, softmax, softplus};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Node embedding plus its (strictly positive) uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub embedding: DVector<f64>,
    pub uncertainty: f64,
}

impl NodeState {
    pub fn new(embedding: DVector<f64>, uncertainty: f64) -> Result<Self> {
        if !(uncertainty > 0.0 && uncertainty.is_finite()) {
            return Err(Error::invalid(format!("node uncertainty must be positive, got {uncertainty}")));
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("node embedding has non-finite entries"));
        }
        Ok(Self { embedding, uncertainty })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Projection `W` of shape `d' x d`.
    pub weight: DMatrix<f64>,
    /// Attention vector `a` of length `2 d'`.
    pub attn: DVector<f64>,
    pub gamma_raw: f64,
    pub self_loop_bias: f64,
    pub leaky_slope: f64,
}

impl AttentionParams {
    /// Parameters with `gamma_raw = 0`, no self-loop bias and the default
    /// LeakyReLU slope.
    pub fn new(weight: DMatrix<f64>, attn: DVector<f64>) -> Result<Self> {
        let p = Self {
            weight,
            attn,
            gamma_raw: 0.0,
            self_loop_bias: 0.0,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_gamma_raw(mut self, gamma_raw: f64) -> Self {
        self.gamma_raw = gamma_raw;
        self
    }

    pub fn with_self_loop_bias(mut self, delta: f64) -> Self {
        self.self_loop_bias = delta;
        self
    }

    /// Effective `gamma = softplus(gamma_raw)`.
    pub fn gamma(&self) -> f64 {
        softplus(self.gamma_raw)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attn.len() != 2 * self.weight.nrows() {
            return Err(Error::dim("attention vector", 2 * self.weight.nrows(), self.attn.len()));
        }
        let finite = self.weight.iter().chain(self.attn.iter()).all(|v| v.is_finite())
            && self.gamma_raw.is_finite()
            && self.self_loop_bias.is_finite();
        if !finite {
            return Err(Error::invalid("attention parameters must be finite"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope.is_finite()) {
            return Err(Error::invalid("LeakyReLU slope must be positive"));
        }
        Ok(())
    }

    fn project(&self, h: &[f64]) -> Result<DVector<f64>> {
        if h.len() != self.input_dim() {
            return Err(Error::dim("embedding", self.input_dim(), h.len()));
        }
        Ok(&self.weight * DVector::from_column_slice(h))
    }

    fn logit_from_projections(&self, wh_i: &DVector<f64>, wh_j: &DVector<f64>) -> f64 {
        let d = self.output_dim();
        let left = self.attn.rows(0, d).dot(wh_i);
        let right = self.attn.rows(d, d).dot(wh_j);
        leaky_relu(left + right, self.leaky_slope)
    }
}

/// `e_ij = LeakyReLU(a^T [W h_i || W h_j])`.
pub fn attention_logit(h_i: &[f64], h_j: &[f64], params: &AttentionParams) -> Result<f64> {
    let wh_i = params.project(h_i)?;
    let wh_j = params.project(h_j)?;
    Ok(params.logit_from_projections(&wh_i, &wh_j))
}

/// Attention row of source `source` over `neighbors`.
///
/// `logits[k]` is `e_{i, neighbors[k]}` and `sigma` is indexed by node id.
pub fn pugat_attention(
    logits: &[f64],
    sigma: &[f64],
    neighbors: &[usize],
    source: usize,
    params: &AttentionParams,
) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::invalid("attention over an empty neighbourhood"));
    }
    if logits.len() != neighbors.len() {
        return Err(Error::dim("attention logit row", neighbors.len(), logits.len()));
    }
    if source >= sigma.len() {
        return Err(Error::invalid(format!("source {source} has no uncertainty entry")));
    }
    let gamma = params.gamma();
    let sigma_i = sigma[source];
    let mut scores = Vec::with_capacity(neighbors.len());
    for (&e, &j) in logits.iter().zip(neighbors) {
        let sigma_j = *sigma
            .get(j)
            .ok_or_else(|| Error::invalid(format!("neighbour {j} has no uncertainty entry")))?;
        if !(sigma_j > 0.0) || !(sigma_i > 0.0) {
            return Err(Error::invalid("uncertainties must be strictly positive"));
        }
        let self_bias = if j == source { params.self_loop_bias } else { 0.0 };
        scores.push(e + gamma * (sigma_i - sigma_j) + self_bias);
    }
    Ok(softmax(&scores))
}

/// Baseline attention whose temperature `1 + beta sigma_i` depends on the
/// source only.
pub fn temp_scaled_attention(logits: &[f64], sigma_i: f64, beta: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("attention over an empty neighbourhood"));
    }
    if !(sigma_i > 0.0 && sigma_i.is_finite()) {
        return Err(Error::invalid("source uncertainty must be positive"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid("temperature coefficient must be nonnegative"));
    }
    let temperature = 1.0 + beta * sigma_i;
    let scaled: Vec<f64> = logits.iter().map(|e| e / temperature).collect();
    Ok(softmax(&scaled))
}

/// `alpha_ij / alpha_ik` for non-self neighbours `j`, `k`.
pub fn attention_ratio_closed_form(e_ij: f64, e_ik: f64, gamma: f64, sigma_j: f64, sigma_k: f64) -> f64 {
    ((e_ij - e_ik) + gamma * (sigma_k - sigma_j)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attention: AttentionParams,
    /// Uncertainty head weights, length `d'`.
    pub w_sigma: DVector<f64>,
    pub b_sigma: f64,
    pub activation: Activation,
}

impl LayerParams {
    pub fn new(attention: AttentionParams, w_sigma: DVector<f64>, b_sigma: f64) -> Result<Self> {
        if w_sigma.len() != attention.output_dim() {
            return Err(Error::dim("uncertainty head", attention.output_dim(), w_sigma.len()));
        }
        Ok(Self {
            attention,
            w_sigma,
            b_sigma,
            activation: Activation::default(),
        })
    }
}

/// One attention layer over the whole graph.
///
/// `features` is `N x d` (one row per node). Returns the `N x d'` features
/// and the strictly positive per-node uncertainties
/// `softplus(w_sigma^T h'_i + b_sigma)`.
pub fn layer_forward(
    features: &DMatrix<f64>,
    uncertainties: &[f64],
    topology: &GraphTopology,
    layer: &LayerParams,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = topology.node_count();
    if features.nrows() != n {
        return Err(Error::dim("feature rows", n, features.nrows()));
    }
    if uncertainties.len() != n {
        return Err(Error::dim("uncertainties", n, uncertainties.len()));
    }
    let params = &layer.attention;
    if features.ncols() != params.input_dim() {
        return Err(Error::dim("feature columns", params.input_dim(), features.ncols()));
    }
    if layer.w_sigma.len() != params.output_dim() {
        return Err(Error::dim("uncertainty head", params.output_dim(), layer.w_sigma.len()));
    }
    if uncertainties.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("input uncertainties must be strictly positive"));
    }

    // W h_j for every node, as columns.
    let projected = &params.weight * features.transpose();
    let d_out = params.output_dim();
    let mut out = DMatrix::zeros(n, d_out);
    let mut sigma_out = Vec::with_capacity(n);
    for i in 0..n {
        let nbrs = topology.neighbors(i);
        let wh_i = projected.column(i).into_owned();
        let logits: Vec<f64> = nbrs
            .iter()
            .map(|&j| params.logit_from_projections(&wh_i, &projected.column(j).into_owned()))
            .collect();
        let alpha = pugat_attention(&logits, uncertainties, nbrs, i, params)?;
        let mut agg = DVector::zeros(d_out);
        for (&a, &j) in alpha.iter().zip(nbrs) {
            agg.axpy(a, &projected.column(j), 1.0);
        }
        let h = agg.map(|v| layer.activation.apply(v));
        let s = softplus(layer.w_sigma.dot(&h) + layer.b_sigma);
        // softplus underflows to 0 only for arguments below about -745.
        sigma_out.push(s.max(f64::MIN_POSITIVE));
        out.row_mut(i).copy_from(&h.transpose());
    }
    Ok((out, sigma_out))
}
