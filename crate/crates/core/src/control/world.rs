//! Bootstrap ensemble of affine transition models `s' = A s + B a + c`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MEMBERS: usize = 5;
pub const DEFAULT_EPS_FLOOR: f64 = 0.1;
/// Ridge added to the normal equations when the design is rank deficient.
pub const RIDGE_LAMBDA: f64 = 1e-3;
/// Eigenvalue ratio of the Gram matrix below which the design counts as
/// rank deficient.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineModel {
    /// State Jacobian, `ds x ds`.
    pub a: DMatrix<f64>,
    /// Action Jacobian, `ds x da`.
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl AffineModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let ds = a.nrows();
        if a.ncols() != ds {
            return Err(Error::dim("state Jacobian columns", ds, a.ncols()));
        }
        if b.nrows() != ds {
            return Err(Error::dim("action Jacobian rows", ds, b.nrows()));
        }
        if c.len() != ds {
            return Err(Error::dim("model offset", ds, c.len()));
        }
        Ok(Self { a, b, c })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(s) + &self.b * DVector::from_column_slice(a) + &self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModelEnsemble {
    members: Vec<AffineModel>,
    /// Member-average map; equals the mean prediction because members are affine.
    mean: AffineModel,
    pub seeds: Vec<u64>,
    pub ridge_used: Vec<bool>,
}

impl WorldModelEnsemble {
    pub fn from_members(members: Vec<AffineModel>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::invalid("ensemble needs at least one member"))?;
        let (ds, da) = (first.state_dim(), first.action_dim());
        if let Some(m) = members.iter().find(|m| m.state_dim() != ds || m.action_dim() != da) {
            return Err(Error::dim("ensemble member shape", ds + da, m.state_dim() + m.action_dim()));
        }
        let k = members.len() as f64;
        let mut mean = AffineModel {
            a: DMatrix::zeros(ds, ds),
            b: DMatrix::zeros(ds, da),
            c: DVector::zeros(ds),
        };
        for m in &members {
            mean.a += &m.a / k;
            mean.b += &m.b / k;
            mean.c += &m.c / k;
        }
        let n = members.len();
        Ok(Self {
            members,
            mean,
            seeds: vec![0; n],
            ridge_used: vec![false; n],
        })
    }

    pub fn members(&self) -> &[AffineModel] {
        &self.members
    }

    pub fn mean_model(&self) -> &AffineModel {
        &self.mean
    }

    pub fn state_dim(&self) -> usize {
        self.mean.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mean.action_dim()
    }

    pub fn predict_mean(&self, s: &[f64], a: &[f64]) -> DVector<f64> {
        self.mean.predict(s, a)
    }
}

fn check_transitions(data: &[Transition]) -> Result<(usize, usize)> {
    let first = data.first().ok_or_else(|| Error::InsufficientData("no transitions".into()))?;
    let (ds, da) = (first.state.len(), first.action.len());
    for t in data {
        if t.state.len() != ds || t.next_state.len() != ds {
            return Err(Error::dim("transition state", ds, t.state.len().max(t.next_state.len())));
        }
        if t.action.len() != da {
            return Err(Error::dim("transition action", da, t.action.len()));
        }
    }
    Ok((ds, da))
}

/// Least-squares affine fit on the rows listed in `idx`.
fn fit_affine(data: &[Transition], idx: &[usize], ds: usize, da: usize) -> Result<(AffineModel, bool)> {
    let p = ds + da + 1;
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, ds);
    let mut x = DVector::<f64>::zeros(p);
    for &r in idx {
        let t = &data[r];
        x.rows_mut(0, ds).copy_from_slice(&t.state);
        x.rows_mut(ds, da).copy_from_slice(&t.action);
        x[p - 1] = 1.0;
        gram.ger(1.0, &x, &x, 1.0);
        for (k, &y) in t.next_state.iter().enumerate() {
            rhs.column_mut(k).axpy(y, &x, 1.0);
        }
    }
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let deficient = !(max > 0.0) || min <= RANK_TOL * max;
    if deficient {
        for i in 0..p {
            gram[(i, i)] += RIDGE_LAMBDA;
        }
    }
    let theta = gram
        .cholesky()
        .ok_or_else(|| Error::Divergence("normal equations are not positive definite".into()))?
        .solve(&rhs);
    // theta is p x ds; row blocks hold A^T, B^T and c^T.
    let a = theta.rows(0, ds).transpose();
    let b = theta.rows(ds, da).transpose();
    let c = theta.row(p - 1).transpose();
    Ok((AffineModel { a, b, c }, deficient))
}

/// `members` least-squares fits on independent bootstrap resamples.
pub fn fit_world_ensemble(data: &[Transition], members: usize, seed: u64) -> Result<WorldModelEnsemble> {
    let (ds, da) = check_transitions(data)?;
    if members == 0 {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    if data.len() < ds + da + 1 {
        return Err(Error::InsufficientData(format!(
            "{} transitions, need at least {}",
            data.len(),
            ds + da + 1
        )));
    }
    let n = data.len();
    let seeds: Vec<u64> = (0..members as u64).map(|k| seed.wrapping_add(k)).collect();
    let fits = seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            fit_affine(data, &idx, ds, da)
        })
        .collect::<Result<Vec<_>>>()?;
    let ridge_used: Vec<bool> = fits.iter().map(|f| f.1).collect();
    if ridge_used.iter().any(|&r| r) {
        log::warn!("rank-deficient transition design; ridge lambda {RIDGE_LAMBDA} applied");
    }
    let mut ens = WorldModelEnsemble::from_members(fits.into_iter().map(|f| f.0).collect())?;
    ens.seeds = seeds;
    ens.ridge_used = ridge_used;
    Ok(ens)
}

/// Componentwise mean and population variance of member predictions.
pub fn ensemble_predict(ens: &WorldModelEnsemble, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if s.len() != ens.state_dim() {
        return Err(Error::dim("state", ens.state_dim(), s.len()));
    }
    if a.len() != ens.action_dim() {
        return Err(Error::dim("action", ens.action_dim(), a.len()));
    }
    let preds: Vec<DVector<f64>> = ens.members.iter().map(|m| m.predict(s, a)).collect();
    let k = preds.len() as f64;
    let ds = ens.state_dim();
    let mu: Vec<f64> = (0..ds).map(|i| preds.iter().map(|p| p[i]).sum::<f64>() / k).collect();
    let var = (0..ds)
        .map(|i| preds.iter().map(|p| (p[i] - mu[i]).powi(2)).sum::<f64>() / k)
        .collect();
    Ok((mu, var))
}

/// Mean of `||s' - mu_W(s, a)|| / (||s'|| + eps_floor)` over the holdout.
pub fn model_error(ens: &WorldModelEnsemble, holdout: &[Transition], eps_floor: f64) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::InsufficientData("empty holdout set".into()));
    }
    if !(eps_floor >= 0.0) {
        return Err(Error::invalid("eps_floor must be nonnegative"));
    }
    let mut total = 0.0;
    for t in holdout {
        if t.state.len() != ens.state_dim() || t.next_state.len() != ens.state_dim() {
            return Err(Error::dim("holdout state", ens.state_dim(), t.state.len()));
        }
        if t.action.len() != ens.action_dim() {
            return Err(Error::dim("holdout action", ens.action_dim(), t.action.len()));
        }
        let pred = ens.predict_mean(&t.state, &t.action);
        let truth = DVector::from_column_slice(&t.next_state);
        total += (&truth - pred).norm() / (truth.norm() + eps_floor);
    }
    Ok(total / holdout.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn linear_data(n: usize, seed: u64) -> (Vec<Transition>, AffineModel) {
        let truth = AffineModel::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.8]),
            DMatrix::from_row_slice(2, 1, &[0.5, 1.0]),
            DVector::from_vec(vec![0.1, -0.3]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                let a = vec![rng.random_range(-1.0..1.0)];
                let next = truth.predict(&s, &a).as_slice().to_vec();
                Transition { state: s, action: a, next_state: next }
            })
            .collect();
        (data, truth)
    }

    #[test]
    fn noiseless_linear_dynamics_recovered() {
        let (data, truth) = linear_data(200, 1);
        let ens = fit_world_ensemble(&data, DEFAULT_MEMBERS, 3).unwrap();
        assert_eq!(ens.members().len(), 5);
        assert!(ens.ridge_used.iter().all(|r| !r));
        for m in ens.members() {
            assert!((&m.a - &truth.a).abs().max() < 1e-9);
            assert!((&m.b - &truth.b).abs().max() < 1e-9);
            assert!((&m.c - &truth.c).abs().max() < 1e-9);
        }
        let (_, var) = ensemble_predict(&ens, &[0.3, -1.0], &[0.2]).unwrap();
        assert!(var.iter().all(|v| *v < 1e-16));
        assert!(model_error(&ens, &data, DEFAULT_EPS_FLOOR).unwrap() < 1e-9);
    }

    #[test]
    fn fit_is_deterministic_given_seed() {
        let (data, _) = linear_data(50, 2);
        let a = fit_world_ensemble(&data, 5, 9).unwrap();
        let b = fit_world_ensemble(&data, 5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn repeated_point_triggers_ridge() {
        let t = Transition {
            state: vec![1.0, 2.0],
            action: vec![0.5],
            next_state: vec![0.0, 1.0],
        };
        let ens = fit_world_ensemble(&vec![t; 10], 3, 0).unwrap();
        assert!(ens.ridge_used.iter().all(|&r| r));
        assert!(fit_world_ensemble(&[], 3, 0).is_err());
    }

    #[test]
    fn two_member_variance() {
        let mk = |c: f64| AffineModel::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), DVector::from_vec(vec![c])).unwrap();
        let ens = WorldModelEnsemble::from_members(vec![mk(0.0), mk(2.0)]).unwrap();
        let (mu, var) = ensemble_predict(&ens, &[5.0], &[1.0]).unwrap();
        assert_eq!((mu[0], var[0]), (1.0, 1.0));
    }

    #[test]
    fn model_error_examples() {
        let ens = WorldModelEnsemble::from_members(vec![AffineModel::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DVector::from_vec(vec![3.0, 4.5]),
        )
        .unwrap()])
        .unwrap();
        let t = Transition {
            state: vec![0.0, 0.0],
            action: vec![0.0],
            next_state: vec![3.0, 4.0],
        };
        let e = model_error(&ens, std::slice::from_ref(&t), 0.1).unwrap();
        assert!((e - 0.5 / 5.1).abs() < 1e-12);
        let e2 = model_error(&ens, std::slice::from_ref(&t), 0.5).unwrap();
        assert!(e2 < e);
        assert!(model_error(&ens, &[], 0.1).is_err());
    }
}
