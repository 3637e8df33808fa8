//! Gaussian posterior for the linear model `d = A x + e`, `e ~ N(0, I/lambda)`.
//!
//! With a structural prior the posterior is Gaussian with precision
//! `R_post^T R_post`, where
//!
//! ```text
//! R_post = [sqrt(lambda) A; R_0; R_1; ...; R_p]      (q x n)
//! b      = [sqrt(lambda) d; R_0 mu_0; ...; R_p mu_p]
//! ```
//!
//! and the mean solves `min ||R_post x - b||`. Samples come from the
//! perturbation trick: the least-squares solution of `R_post x = b + xi` with
//! `xi ~ N(0, I_q)` is an exact posterior draw. The chain sampler truncates
//! each solve to a fixed number of CGLS iterations and warm starts from the
//! previous draw.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;
use crate::priors::{FactorKind, StructuralPrior};
use crate::projector::Image;
use crate::rng::{self, streams};
use crate::solver::{cgls, norm, LinearOperator};

/// Stacked posterior system. Immutable once assembled.
#[derive(Clone)]
pub struct PosteriorModel {
    forward: Arc<dyn LinearOperator + Send + Sync>,
    data: Vec<f64>,
    lambda: f64,
    sqrt_lambda: f64,
    prior: StructuralPrior,
    rhs: Vec<f64>,
}

impl std::fmt::Debug for PosteriorModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PosteriorModel")
            .field("m", &self.data.len())
            .field("n", &self.n())
            .field("q", &self.q())
            .field("lambda", &self.lambda)
            .field("prior", &self.prior.kind())
            .finish()
    }
}

/// Builds `R_post` and `b`. Dimension mismatches name the offending block.
pub fn assemble_posterior(
    forward: Arc<dyn LinearOperator + Send + Sync>,
    data: Vec<f64>,
    lambda: f64,
    prior: StructuralPrior,
) -> Result<PosteriorModel> {
    let n = prior.grid().n();
    if forward.n_cols() != n {
        return Err(Error::dimension("forward operator columns", n, forward.n_cols()));
    }
    if data.len() != forward.n_rows() {
        return Err(Error::dimension("data", forward.n_rows(), data.len()));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise precision must be positive and finite, got {lambda}"
        )));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("data entry {i} is not finite")));
    }
    let sqrt_lambda = lambda.sqrt();
    let mut rhs: Vec<f64> = data.iter().map(|d| sqrt_lambda * d).collect();
    rhs.extend(prior.rhs());
    Ok(PosteriorModel {
        forward,
        data,
        lambda,
        sqrt_lambda,
        prior,
        rhs,
    })
}

impl PosteriorModel {
    pub fn m(&self) -> usize {
        self.data.len()
    }

    pub fn n(&self) -> usize {
        self.prior.grid().n()
    }

    /// Rows of `R_post`: `m + 2N(N+1) + sum_i |mask_i|`.
    pub fn q(&self) -> usize {
        self.m() + self.prior.total_rows()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn grid(&self) -> &ImageGrid {
        self.prior.grid()
    }

    pub fn prior(&self) -> &StructuralPrior {
        &self.prior
    }

    pub fn forward(&self) -> &dyn LinearOperator {
        self.forward.as_ref()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The stacked right-hand side `b`.
    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// Row blocks of `R_post` in stacking order, as `(name, rows)`.
    pub fn blocks(&self) -> Vec<(String, usize)> {
        let mut out = vec![("data".to_string(), self.m())];
        for f in self.prior.factors() {
            let name = match f.kind() {
                FactorKind::Gmrf => "gmrf".to_string(),
                FactorKind::Iid { region } => format!("iid[{region}]"),
            };
            out.push((name, f.n_rows()));
        }
        out
    }
}

impl LinearOperator for PosteriorModel {
    fn n_rows(&self) -> usize {
        self.q()
    }

    fn n_cols(&self) -> usize {
        self.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let (yd, yp) = y.split_at_mut(self.m());
        self.forward.apply(x, yd);
        for v in yd.iter_mut() {
            *v *= self.sqrt_lambda;
        }
        self.prior.apply(x, yp);
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let (yd, yp) = y.split_at(self.m());
        let mut tmp = vec![0.0; x.len()];
        self.forward.apply_transpose(yd, &mut tmp);
        self.prior.apply_transpose(yp, x);
        for (xi, ti) in x.iter_mut().zip(&tmp) {
            *xi += self.sqrt_lambda * ti;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapInfo {
    pub iterations: usize,
    /// Final normal-equations residual relative to its initial value.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Posterior mean (= MAP) by CGLS from zero. Non-convergence is reported in
/// the returned info and logged, not raised.
pub fn map_estimate(model: &PosteriorModel, tol: f64, max_iter: usize) -> Result<(Image, MapInfo)> {
    let (x, report) = cgls(model, model.rhs(), None, tol, max_iter)?;
    if !report.converged {
        log::warn!(
            "MAP solve stopped after {} iterations at relative residual {:.3e}",
            report.iterations,
            report.relative_residual()
        );
    }
    let info = MapInfo {
        iterations: report.iterations,
        relative_residual: report.relative_residual(),
        converged: report.converged,
    };
    Ok((Image::from_values(*model.grid(), x)?, info))
}

fn perturbed_rhs<R: Rng + ?Sized>(model: &PosteriorModel, rng: &mut R) -> Vec<f64> {
    model
        .rhs()
        .iter()
        .map(|b| b + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Least-squares solve of `R_post x = rhs` from `start` with exactly
/// `iters` CGLS iterations (fewer only on exact convergence). Returns the
/// iterate and `||R^T (R x - rhs)|| / ||R^T rhs||`.
fn truncated_solve(
    model: &PosteriorModel,
    rhs: &[f64],
    start: &[f64],
    iters: usize,
    tol: f64,
) -> Result<(Vec<f64>, f64)> {
    let (x, report) = cgls(model, rhs, Some(start), tol, iters)?;
    let mut rt_rhs = vec![0.0; model.n()];
    model.apply_transpose(rhs, &mut rt_rhs);
    let denom = norm(&rt_rhs);
    let last = report
        .residual_history
        .last()
        .copied()
        .unwrap_or(report.initial_residual);
    Ok((x, if denom > 0.0 { last / denom } else { 0.0 }))
}

/// One perturbed least-squares draw started at `start`, running
/// `inner_iters` solver iterations.
pub fn draw_sample<R: Rng + ?Sized>(
    model: &PosteriorModel,
    start: &Image,
    inner_iters: usize,
    rng: &mut R,
) -> Result<(Image, f64)> {
    if inner_iters == 0 {
        return Err(Error::InvalidConfig("inner_iters must be at least 1".into()));
    }
    if start.grid() != model.grid() {
        return Err(Error::dimension("chain start", model.n(), start.grid().n()));
    }
    let rhs = perturbed_rhs(model, rng);
    let (x, res) = truncated_solve(model, &rhs, start.values(), inner_iters, 0.0)?;
    Ok((Image::from_values(*model.grid(), x)?, res))
}

/// Retained chain output.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub samples: Vec<Image>,
    pub burn_in: usize,
    pub iters_per_sample: usize,
    pub seed: u64,
    /// One residual per retained sample.
    pub solver_residuals: Vec<f64>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Values of pixel `j` across the chain.
    pub fn pixel_chain(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.values()[j]).collect()
    }

    pub fn mean(&self) -> Option<Image> {
        let first = self.samples.first()?;
        let mut acc = vec![0.0; first.values().len()];
        for s in &self.samples {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v;
            }
        }
        let k = self.samples.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Image::from_values(*first.grid(), acc).ok()
    }
}

fn check_chain(n_samples: usize, burn_in: usize) -> Result<()> {
    if n_samples <= burn_in {
        return Err(Error::InvalidConfig(format!(
            "n_samples ({n_samples}) must exceed burn_in ({burn_in})"
        )));
    }
    Ok(())
}

/// Runs a warm-started chain and hands each retained sample (index from 0)
/// and its residual to `visit` without storing the chain.
pub fn run_chain_with(
    model: &PosteriorModel,
    n_samples: usize,
    burn_in: usize,
    inner_iters: usize,
    seed: u64,
    init: &Image,
    visit: &mut dyn FnMut(usize, &Image, f64) -> Result<()>,
) -> Result<()> {
    check_chain(n_samples, burn_in)?;
    let mut rng = rng::stream(seed, streams::CHAIN);
    let mut current = init.clone();
    for k in 0..n_samples {
        let (next, res) = draw_sample(model, &current, inner_iters, &mut rng)?;
        if k >= burn_in {
            visit(k - burn_in, &next, res)?;
        }
        current = next;
        if (k + 1) % 500 == 0 {
            log::info!("chain: {} / {n_samples} samples", k + 1);
        }
    }
    Ok(())
}

/// Sequential warm-started chain; retains `n_samples - burn_in` samples.
pub fn run_chain(
    model: &PosteriorModel,
    n_samples: usize,
    burn_in: usize,
    inner_iters: usize,
    seed: u64,
    init: &Image,
) -> Result<SampleSet> {
    let mut samples = Vec::with_capacity(n_samples.saturating_sub(burn_in));
    let mut residuals = Vec::with_capacity(samples.capacity());
    run_chain_with(model, n_samples, burn_in, inner_iters, seed, init, &mut |_, s, r| {
        samples.push(s.clone());
        residuals.push(r);
        Ok(())
    })?;
    Ok(SampleSet {
        samples,
        burn_in,
        iters_per_sample: inner_iters,
        seed,
        solver_residuals: residuals,
    })
}

/// Independent draws, each solved from zero to relative normal-equations
/// residual `tol`. Draw `k` uses its own random stream, so the result does
/// not depend on how many draws are requested.
pub fn independent_draws(
    model: &PosteriorModel,
    count: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
    visit: &mut dyn FnMut(usize, &[f64]) -> Result<()>,
) -> Result<()> {
    let zero = vec![0.0; model.n()];
    for k in 0..count {
        let mut rng = rng::stream(seed, streams::INDEPENDENT_DRAWS + k as u64);
        let rhs = perturbed_rhs(model, &mut rng);
        let (x, report) = cgls(model, &rhs, Some(&zero), tol, max_iter)?;
        if !report.converged {
            return Err(Error::IterationLimit {
                iterations: report.iterations,
                residual: report.relative_residual(),
            });
        }
        visit(k, &x)?;
    }
    Ok(())
}
