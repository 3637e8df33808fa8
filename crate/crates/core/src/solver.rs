//! Matrix-free least squares by conjugate gradients on the normal equations
//! (CGLS).
//!
//! All solves in the crate go through [`cgls_monitored`]: MAP estimates,
//! posterior samples (fixed iteration budget, warm started), prior means and
//! the deterministic baseline with early stopping.

use crate::error::{Error, Result};

/// A linear map `R^n_cols -> R^n_rows` with its transpose.
pub trait LinearOperator {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    /// Overwrites `y` with `A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// Overwrites `x` with `A^T y`.
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]);
}

impl<T: LinearOperator + ?Sized> LinearOperator for &T {
    fn n_rows(&self) -> usize {
        (**self).n_rows()
    }
    fn n_cols(&self) -> usize {
        (**self).n_cols()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (**self).apply(x, y)
    }
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        (**self).apply_transpose(y, x)
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for Box<T> {
    fn n_rows(&self) -> usize {
        (**self).n_rows()
    }
    fn n_cols(&self) -> usize {
        (**self).n_cols()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (**self).apply(x, y)
    }
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        (**self).apply_transpose(y, x)
    }
}

impl<T: LinearOperator + ?Sized> LinearOperator for std::sync::Arc<T> {
    fn n_rows(&self) -> usize {
        (**self).n_rows()
    }
    fn n_cols(&self) -> usize {
        (**self).n_cols()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (**self).apply(x, y)
    }
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        (**self).apply_transpose(y, x)
    }
}

/// Identity on `R^n`.
#[derive(Debug, Clone, Copy)]
pub struct IdentityOperator(pub usize);

impl LinearOperator for IdentityOperator {
    fn n_rows(&self) -> usize {
        self.0
    }
    fn n_cols(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        x.copy_from_slice(y);
    }
}

/// Row-major dense matrix. Meant for small problems and test doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension("dense matrix", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

impl LinearOperator for DenseMatrix {
    fn n_rows(&self) -> usize {
        self.rows
    }
    fn n_cols(&self) -> usize {
        self.cols
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (yi, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *yi = dot(row, x);
        }
    }
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        for (yi, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            axpy(*yi, row, x);
        }
    }
}

/// Materializes `op` column by column. Only sensible for small operators.
pub fn to_dense(op: &dyn LinearOperator) -> DenseMatrix {
    let (m, n) = (op.n_rows(), op.n_cols());
    let mut data = vec![0.0; m * n];
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; m];
    for j in 0..n {
        e[j] = 1.0;
        op.apply(&e, &mut col);
        e[j] = 0.0;
        for i in 0..m {
            data[i * n + j] = col[i];
        }
    }
    DenseMatrix {
        rows: m,
        cols: n,
        data,
    }
}

/// `|<Ax, y> - <x, A^T y>| / (||Ax|| ||y||)` for the given probe pair.
pub fn adjoint_mismatch(op: &dyn LinearOperator, x: &[f64], y: &[f64]) -> f64 {
    let mut ax = vec![0.0; op.n_rows()];
    let mut aty = vec![0.0; op.n_cols()];
    op.apply(x, &mut ax);
    op.apply_transpose(y, &mut aty);
    let lhs = dot(&ax, y);
    let rhs = dot(x, &aty);
    let scale = norm(&ax) * norm(y);
    if scale == 0.0 {
        (lhs - rhs).abs()
    } else {
        (lhs - rhs).abs() / scale
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Relative normal-equations residual reached the tolerance.
    Converged,
    /// Iteration budget exhausted.
    MaxIterations,
    /// Search direction vanished in the range of the operator.
    Breakdown,
    /// A monitor asked to stop (discrepancy principle).
    Monitor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// `||A^T (b - A x_0)||`.
    pub initial_residual: f64,
    /// `||A^T (b - A x_k)||` after each iteration `k = 1..`.
    pub residual_history: Vec<f64>,
    /// `||b - A x_k||` for `k = 0..=iterations`.
    pub ls_residual_history: Vec<f64>,
    pub converged: bool,
    pub stop: StopReason,
}

impl SolveReport {
    /// Final normal-equations residual relative to its initial value.
    pub fn relative_residual(&self) -> f64 {
        let last = self
            .residual_history
            .last()
            .copied()
            .unwrap_or(self.initial_residual);
        if self.initial_residual == 0.0 {
            0.0
        } else {
            last / self.initial_residual
        }
    }
}

/// State handed to a monitor after every iteration (and once for `x_0`).
pub struct IterState<'a> {
    pub iteration: usize,
    pub x: &'a [f64],
    pub ls_residual: f64,
    pub normal_residual: f64,
}

pub enum Flow {
    Continue,
    Stop,
}

/// Runs CGLS for `argmin ||op x - b||` from `x0` (zero when `None`).
///
/// Stops when `||A^T (b - A x_k)|| <= tol * ||A^T (b - A x_0)||` or after
/// `max_iter` iterations. A `tol` of zero runs the full budget.
pub fn cgls(
    op: &dyn LinearOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport)> {
    cgls_monitored(op, b, x0, tol, max_iter, &mut |_| Flow::Continue)
}

/// [`cgls`] with a per-iteration callback that may stop the run early.
pub fn cgls_monitored(
    op: &dyn LinearOperator,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
    monitor: &mut dyn FnMut(&IterState) -> Flow,
) -> Result<(Vec<f64>, SolveReport)> {
    let (m, n) = (op.n_rows(), op.n_cols());
    if b.len() != m {
        return Err(Error::dimension("cgls right-hand side", m, b.len()));
    }
    let mut x = match x0 {
        Some(x0) if x0.len() != n => return Err(Error::dimension("cgls start", n, x0.len())),
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };

    let mut r = b.to_vec();
    let mut q = vec![0.0; m];
    if x.iter().any(|&v| v != 0.0) {
        op.apply(&x, &mut q);
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= qi;
        }
    }
    let mut s = vec![0.0; n];
    op.apply_transpose(&r, &mut s);
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let initial = gamma.sqrt();

    let mut report = SolveReport {
        iterations: 0,
        initial_residual: initial,
        residual_history: Vec::new(),
        ls_residual_history: vec![norm(&r)],
        converged: false,
        stop: StopReason::MaxIterations,
    };
    let state = IterState {
        iteration: 0,
        x: &x,
        ls_residual: report.ls_residual_history[0],
        normal_residual: initial,
    };
    if let Flow::Stop = monitor(&state) {
        report.stop = StopReason::Monitor;
        return Ok((x, report));
    }
    if gamma == 0.0 {
        report.converged = true;
        report.stop = StopReason::Converged;
        return Ok((x, report));
    }

    for k in 1..=max_iter {
        op.apply(&p, &mut q);
        let qq = dot(&q, &q);
        if qq == 0.0 || !qq.is_finite() {
            report.stop = StopReason::Breakdown;
            log::warn!("cgls breakdown at iteration {k}");
            return Ok((x, report));
        }
        let alpha = gamma / qq;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &q, &mut r);
        op.apply_transpose(&r, &mut s);
        let gamma_new = dot(&s, &s);
        let normal = gamma_new.sqrt();
        let ls = norm(&r);
        report.iterations = k;
        report.residual_history.push(normal);
        report.ls_residual_history.push(ls);

        let state = IterState {
            iteration: k,
            x: &x,
            ls_residual: ls,
            normal_residual: normal,
        };
        if let Flow::Stop = monitor(&state) {
            report.stop = StopReason::Monitor;
            return Ok((x, report));
        }
        if normal <= tol * initial {
            report.converged = true;
            report.stop = StopReason::Converged;
            return Ok((x, report));
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        for (pi, si) in p.iter_mut().zip(&s) {
            *pi = si + beta * *pi;
        }
    }
    Ok((x, report))
}

/// Early-stopping rule for the unregularized (deterministic) reconstruction.
#[derive(Debug, Clone, Copy)]
pub enum StoppingRule<'a> {
    /// Stop at the first iterate with `||A x - b|| <= tau * sqrt(m / lambda)`.
    Discrepancy { lambda: f64, tau: f64 },
    /// Keep the iterate with the smallest RMSE against a known truth.
    Oracle { truth: &'a [f64] },
}

impl StoppingRule<'_> {
    pub const DEFAULT_TAU: f64 = 1.02;

    pub fn discrepancy(lambda: f64) -> Self {
        StoppingRule::Discrepancy {
            lambda,
            tau: Self::DEFAULT_TAU,
        }
    }
}

/// Outcome of [`cgls_semiconvergent`].
#[derive(Debug, Clone)]
pub struct SemiconvergentReport {
    pub solve: SolveReport,
    /// Iteration whose iterate was returned.
    pub selected_iteration: usize,
    /// RMSE against truth per iterate (oracle rule only), starting at `x_0 = 0`.
    pub rmse_history: Vec<f64>,
    /// Whether the rule fired; `false` means the best available iterate is returned.
    pub triggered: bool,
}

/// CGLS from zero, stopped at semi-convergence by `rule`.
pub fn cgls_semiconvergent(
    op: &dyn LinearOperator,
    b: &[f64],
    rule: StoppingRule,
    max_iter: usize,
) -> Result<(Vec<f64>, SemiconvergentReport)> {
    match rule {
        StoppingRule::Discrepancy { lambda, tau } => {
            if !(lambda > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "discrepancy rule needs a positive noise precision, got {lambda}"
                )));
            }
            let threshold = tau * (op.n_rows() as f64 / lambda).sqrt();
            let mut hit = None;
            let (x, solve) = cgls_monitored(op, b, None, 0.0, max_iter, &mut |st| {
                if st.ls_residual <= threshold {
                    hit = Some(st.iteration);
                    Flow::Stop
                } else {
                    Flow::Continue
                }
            })?;
            if hit.is_none() {
                log::warn!(
                    "discrepancy principle not reached within {max_iter} iterations; returning last iterate"
                );
            }
            let selected_iteration = hit.unwrap_or(solve.iterations);
            Ok((
                x,
                SemiconvergentReport {
                    solve,
                    selected_iteration,
                    rmse_history: Vec::new(),
                    triggered: hit.is_some(),
                },
            ))
        }
        StoppingRule::Oracle { truth } => {
            if truth.len() != op.n_cols() {
                return Err(Error::dimension("oracle truth", op.n_cols(), truth.len()));
            }
            let mut best: Option<(f64, usize, Vec<f64>)> = None;
            let mut history = Vec::new();
            let (_, solve) = cgls_monitored(op, b, None, 0.0, max_iter, &mut |st| {
                let err = rmse_slice(st.x, truth);
                history.push(err);
                if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
                    best = Some((err, st.iteration, st.x.to_vec()));
                }
                Flow::Continue
            })?;
            let (_, it, x) = best.expect("monitor sees the starting iterate");
            Ok((
                x,
                SemiconvergentReport {
                    selected_iteration: it,
                    triggered: it < solve.iterations || solve.converged,
                    solve,
                    rmse_history: history,
                },
            ))
        }
    }
}

pub(crate) fn rmse_slice(x: &[f64], t: &[f64]) -> f64 {
    let ss: f64 = x.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
    (ss / x.len().max(1) as f64).sqrt()
}
