//! Convergence bound for DP federated gradient descent under the PL
//! condition, with constant estimation and Monte-Carlo checks on client
//! quadratics `f_c(M) = 1/2 (M - b_c)^T H_c (M - b_c)`.

use std::fmt;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::privacy::noise_sigma;
use crate::rng::{self, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    /// Smoothness constant.
    pub l: f64,
    /// PL constant.
    pub mu: f64,
    pub eta: f64,
    pub t: u64,
    pub clip_s: f64,
    pub delta: f64,
    pub eps_max: f64,
    /// Bound on client gradient divergence (not a privacy parameter).
    pub div_eps: f64,
    pub num_clients: usize,
    pub init_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub value: f64,
    /// `A = 1 - 2 mu eta + mu eta^2 L`.
    pub contraction: f64,
    /// False when `A` lies outside `(0, 1)`; the value is still computed.
    pub contractive: bool,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        for (name, v) in [
            ("L", self.l),
            ("mu", self.mu),
            ("eta", self.eta),
            ("S", self.clip_s),
            ("eps_max", self.eps_max),
            ("init_gap", self.init_gap),
        ] {
            if !pos(v) {
                return Err(Error::param(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::param(format!("delta {} outside (0, 1)", self.delta)));
        }
        if !(self.div_eps.is_finite() && self.div_eps >= 0.0) {
            return Err(Error::param(format!("div_eps {} must be >= 0", self.div_eps)));
        }
        if self.num_clients == 0 {
            return Err(Error::param("num_clients must be >= 1"));
        }
        Ok(())
    }

    /// `A - 1`, kept separate to avoid cancellation when `A` is close to 1.
    fn contraction_minus_one(&self) -> f64 {
        self.mu * self.eta * (self.eta * self.l - 2.0)
    }

    pub fn contraction(&self) -> f64 {
        1.0 + self.contraction_minus_one()
    }

    /// `L^2 (S^2 ln(1.25/delta) / (mu eps_max^2) + eta^2 div_eps^2 / (2 mu C))`.
    pub fn noise_floor(&self) -> f64 {
        let privacy = self.clip_s * self.clip_s * (1.25 / self.delta).ln() / (self.mu * self.eps_max * self.eps_max);
        let drift = self.eta * self.eta * self.div_eps * self.div_eps / (2.0 * self.mu * self.num_clients as f64);
        self.l * self.l * (privacy + drift)
    }
}

/// `A^T init_gap + (1 - A^T) * noise_floor`.
pub fn convergence_bound(inputs: &BoundInputs) -> Result<BoundResult> {
    inputs.validate()?;
    let am1 = inputs.contraction_minus_one();
    let a = 1.0 + am1;
    let contractive = a > 0.0 && a < 1.0;
    if !contractive {
        warn!("contraction factor A = {a} outside (0, 1); the bound does not decay");
    }
    let t = inputs.t as f64;
    let (a_t, one_minus_a_t) = if inputs.t == 0 {
        (1.0, 0.0)
    } else if a > 0.0 {
        let log_a = am1.ln_1p();
        ((t * log_a).exp(), -(t * log_a).exp_m1())
    } else {
        let p = a.powf(t);
        (p, 1.0 - p)
    };
    Ok(BoundResult {
        value: a_t * inputs.init_gap + one_minus_a_t * inputs.noise_floor(),
        contraction: a,
        contractive,
    })
}

/// Finite sum of client quadratics with a shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub hessians: Vec<DMatrix<f64>>,
    pub centers: Vec<DVector<f64>>,
    pub init: DVector<f64>,
}

/// Box of sample points used to bound client gradient divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceGrid {
    /// Points drawn uniformly from the box around the optimum.
    pub points: usize,
    /// Minimum half-width; widened to reach the initial point.
    pub radius: f64,
    pub seed: u64,
}

impl Default for DivergenceGrid {
    fn default() -> Self {
        Self {
            points: 512,
            radius: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constants {
    pub l: f64,
    pub mu: f64,
    pub div_eps: f64,
    pub init_gap: f64,
    pub optimum_loss: f64,
    pub optimum: DVector<f64>,
}

impl QuadraticProblem {
    pub fn new(hessians: Vec<DMatrix<f64>>, centers: Vec<DVector<f64>>, init: DVector<f64>) -> Result<Self> {
        let p = Self { hessians, centers, init };
        p.validate()?;
        Ok(p)
    }

    pub fn num_clients(&self) -> usize {
        self.hessians.len()
    }

    pub fn dim(&self) -> usize {
        self.init.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.hessians.is_empty() || self.hessians.len() != self.centers.len() {
            return Err(Error::param("need one Hessian and one center per client"));
        }
        for (c, (h, b)) in self.hessians.iter().zip(&self.centers).enumerate() {
            if h.nrows() != d || h.ncols() != d || b.len() != d {
                return Err(Error::Dimension { expected: d, found: if b.len() != d { b.len() } else { h.nrows() } });
            }
            if (h - h.transpose()).amax() > 1e-12 * h.amax().max(1.0) {
                return Err(Error::param(format!("client {c} Hessian is not symmetric")));
            }
            let min = SymmetricEigen::new(h.clone()).eigenvalues.min();
            if min.is_nan() || min <= 0.0 {
                return Err(Error::param(format!("client {c} Hessian is not positive definite (min eigenvalue {min})")));
            }
        }
        Ok(())
    }

    fn mean_hessian(&self) -> DMatrix<f64> {
        let c = self.num_clients() as f64;
        self.hessians.iter().fold(DMatrix::zeros(self.dim(), self.dim()), |acc, h| acc + h) / c
    }

    /// `(1/C) sum_c H_c b_c`.
    fn mean_linear(&self) -> DVector<f64> {
        let c = self.num_clients() as f64;
        self.hessians
            .iter()
            .zip(&self.centers)
            .fold(DVector::zeros(self.dim()), |acc, (h, b)| acc + h * b)
            / c
    }

    pub fn client_loss(&self, c: usize, m: &DVector<f64>) -> f64 {
        let e = m - &self.centers[c];
        0.5 * e.dot(&(&self.hessians[c] * &e))
    }

    pub fn loss(&self, m: &DVector<f64>) -> f64 {
        (0..self.num_clients()).map(|c| self.client_loss(c, m)).sum::<f64>() / self.num_clients() as f64
    }

    pub fn client_grad(&self, c: usize, m: &DVector<f64>) -> DVector<f64> {
        &self.hessians[c] * (m - &self.centers[c])
    }

    pub fn grad(&self, m: &DVector<f64>) -> DVector<f64> {
        (0..self.num_clients()).fold(DVector::zeros(self.dim()), |acc, c| acc + self.client_grad(c, m))
            / self.num_clients() as f64
    }

    /// Minimizer of the averaged loss, `H_bar^{-1} (1/C) sum_c H_c b_c`.
    pub fn optimum(&self) -> Result<DVector<f64>> {
        self.mean_hessian()
            .cholesky()
            .map(|ch| ch.solve(&self.mean_linear()))
            .ok_or_else(|| Error::param("mean Hessian is not positive definite"))
    }
}

/// Smoothness, PL constant, gradient divergence and the initial gap.
///
/// `L` is the largest eigenvalue over all client Hessians, `mu` the
/// smallest eigenvalue of the mean Hessian, and `div_eps` the largest
/// `|grad f_c - grad f|` seen on the grid, the initial point and the optimum.
pub fn estimate_constants(problem: &QuadraticProblem, grid: &DivergenceGrid) -> Result<Constants> {
    problem.validate()?;
    let l = problem
        .hessians
        .iter()
        .map(|h| SymmetricEigen::new(h.clone()).eigenvalues.max())
        .fold(f64::NEG_INFINITY, f64::max);
    let mu = SymmetricEigen::new(problem.mean_hessian()).eigenvalues.min();
    let optimum = problem.optimum()?;
    let optimum_loss = problem.loss(&optimum);

    let reach = (&problem.init - &optimum).amax();
    let half_width = grid.radius.max(reach);
    let mut r = rng::seeded(grid.seed);
    let mut points = vec![problem.init.clone(), optimum.clone()];
    for _ in 0..grid.points {
        points.push(DVector::from_fn(problem.dim(), |i, _| {
            optimum[i] + half_width * (2.0 * r.random::<f64>() - 1.0)
        }));
    }
    let div_eps = points
        .iter()
        .map(|m| {
            let g = problem.grad(m);
            (0..problem.num_clients())
                .map(|c| (problem.client_grad(c, m) - &g).norm())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);

    Ok(Constants {
        l,
        mu,
        div_eps,
        init_gap: problem.loss(&problem.init) - optimum_loss,
        optimum_loss,
        optimum,
    })
}

/// Noisy federated gradient descent settings for the Monte-Carlo check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub eta: f64,
    pub rounds: u64,
    pub eps_max: f64,
    pub delta: f64,
    pub clip_s: f64,
    pub trials: usize,
    pub seed: u64,
    /// Clip client gradients to `clip_s` before noising.
    pub clip: bool,
    /// Replaces the noise multiplier derived from `eps_max`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_override: Option<f64>,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            rounds: 50,
            eps_max: 3.0,
            delta: 1e-5,
            clip_s: 1.0,
            trials: 200,
            seed: 0,
            clip: true,
            sigma_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub inputs: BoundInputs,
    pub bound: BoundResult,
    pub sigma: f64,
    pub trials: usize,
    pub empirical_gap: f64,
    pub holds: bool,
}

impl MonteCarloReport {
    pub fn margin(&self) -> f64 {
        self.bound.value - self.empirical_gap
    }
}

impl fmt::Display for MonteCarloReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = &self.inputs;
        writeln!(f, "inputs: L={} mu={} eta={} T={} S={} delta={} eps_max={} div_eps={} C={} init_gap={}",
            i.l, i.mu, i.eta, i.t, i.clip_s, i.delta, i.eps_max, i.div_eps, i.num_clients, i.init_gap)?;
        writeln!(f, "contraction A: {}{}", self.bound.contraction, if self.bound.contractive { "" } else { " (warning: outside (0, 1))" })?;
        writeln!(f, "sigma: {}", self.sigma)?;
        writeln!(f, "bound: {}", self.bound.value)?;
        writeln!(f, "empirical gap: {} (mean of {} trials)", self.empirical_gap, self.trials)?;
        writeln!(f, "margin: {}", self.margin())?;
        write!(f, "verdict: {}", if self.holds { "holds" } else { "violated" })
    }
}

fn clip(g: DVector<f64>, s: f64) -> DVector<f64> {
    let n = g.norm();
    if n <= s { g } else { g * (s / n) }
}

/// One trajectory of `M <- M - eta/C * sum_c (clip(grad f_c) + N(0, sigma^2 S^2 I))`.
fn trajectory(problem: &QuadraticProblem, cfg: &MonteCarloConfig, sigma: f64, trial: u64) -> DVector<f64> {
    let c = problem.num_clients();
    let mut m = problem.init.clone();
    let mut streams: Vec<_> = (0..c).map(|client| rng::stream(cfg.seed, Phase::Theory, trial, client as u64)).collect();
    for _ in 0..cfg.rounds {
        let mut sum = DVector::zeros(problem.dim());
        for (client, r) in streams.iter_mut().enumerate() {
            let g = problem.client_grad(client, &m);
            let mut g = if cfg.clip { clip(g, cfg.clip_s) } else { g };
            if sigma > 0.0 {
                g.iter_mut().for_each(|x| {
                    let z: f64 = StandardNormal.sample(r);
                    *x += sigma * cfg.clip_s * z;
                });
            }
            sum += g;
        }
        m -= sum * (cfg.eta / c as f64);
    }
    m
}

/// Averages `L(M_T) - L(M*)` over independent noisy trajectories and compares it to the bound.
pub fn verify_bound_montecarlo(
    problem: &QuadraticProblem,
    constants: &Constants,
    cfg: &MonteCarloConfig,
) -> Result<MonteCarloReport> {
    if cfg.trials == 0 {
        return Err(Error::param("trials must be >= 1"));
    }
    let inputs = BoundInputs {
        l: constants.l,
        mu: constants.mu,
        eta: cfg.eta,
        t: cfg.rounds,
        clip_s: cfg.clip_s,
        delta: cfg.delta,
        eps_max: cfg.eps_max,
        div_eps: constants.div_eps,
        num_clients: problem.num_clients(),
        init_gap: constants.init_gap,
    };
    let bound = convergence_bound(&inputs)?;
    let sigma = match cfg.sigma_override {
        Some(s) if s.is_finite() && s >= 0.0 => s,
        Some(s) => return Err(Error::param(format!("sigma override {s} must be >= 0"))),
        None => noise_sigma(cfg.eps_max, cfg.delta, cfg.clip_s)?,
    };

    let gaps: Vec<f64> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial| problem.loss(&trajectory(problem, cfg, sigma, trial)) - constants.optimum_loss)
        .collect();
    let empirical_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    if !empirical_gap.is_finite() {
        return Err(Error::Numeric("Monte-Carlo gap is not finite".into()));
    }
    Ok(MonteCarloReport {
        inputs,
        bound,
        sigma,
        trials: cfg.trials,
        empirical_gap,
        holds: empirical_gap <= bound.value,
    })
}

/// Seeded instance: client Hessians `Q diag(lambda) Q^T` with eigenvalues in
/// `[lambda_min, lambda_max]` and centers drawn from `N(0, spread^2 I)`.
pub fn random_quadratic(
    num_clients: usize,
    dim: usize,
    lambda_min: f64,
    lambda_max: f64,
    spread: f64,
    init_scale: f64,
    seed: u64,
) -> Result<QuadraticProblem> {
    if num_clients == 0 || dim == 0 {
        return Err(Error::param("need at least one client and one dimension"));
    }
    if !(lambda_min > 0.0 && lambda_min <= lambda_max && lambda_max.is_finite()) {
        return Err(Error::param(format!("eigenvalue range [{lambda_min}, {lambda_max}] is invalid")));
    }
    let mut r = rng::seeded(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut r) };
    let mut hessians = Vec::with_capacity(num_clients);
    let mut centers = Vec::with_capacity(num_clients);
    for _ in 0..num_clients {
        let q = DMatrix::from_fn(dim, dim, |_, _| normal()).qr().q();
        let eig = DVector::from_fn(dim, |i, _| {
            if dim == 1 {
                lambda_max
            } else {
                lambda_min + (lambda_max - lambda_min) * i as f64 / (dim - 1) as f64
            }
        });
        let h = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        hessians.push((&h + h.transpose()) * 0.5);
        centers.push(DVector::from_fn(dim, |_, _| spread * normal()));
    }
    let init = DVector::from_fn(dim, |_, _| init_scale * normal());
    QuadraticProblem::new(hessians, centers, init)
}
