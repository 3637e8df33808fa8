//! Structural Gaussian priors.
//!
//! A prior is a stack of Gaussian factors, each given by a mean `mu_i` and a
//! square-root precision `R_i`; the stacked density is
//! `exp(-1/2 sum_i ||R_i (x - mu_i)||^2)`. Two factor types are used:
//!
//! * GMRF over the whole image, `R_0 = sqrt(delta_0) [D_1; D_2]` with
//!   `D_1 = I (x) D` (differences down each column, given column-major
//!   vectorization) and `D_2 = D (x) I` (differences across columns). `D` is
//!   the `(N+1) x N` backward difference with zero Dirichlet boundaries, so
//!   `R_0` has full column rank.
//! * IID on one region, `R_i = sqrt(delta_i) M_i`, `mu_i = alpha_i 1`, where
//!   `M_i` picks the masked pixels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;
use crate::materials::AttenuationTable;
use crate::phantom::{Mask, MaskSet};
use crate::projector::Image;
use crate::solver::{cgls, LinearOperator};

/// `(N+1) x N` backward difference with zero Dirichlet boundaries:
/// `(Dx)_0 = x_0`, `(Dx)_k = x_k - x_{k-1}`, `(Dx)_N = -x_{N-1}`.
#[derive(Debug, Clone, Copy)]
pub struct DifferenceOperator {
    pub n: usize,
}

pub fn difference_operator(n: usize) -> DifferenceOperator {
    DifferenceOperator { n }
}

#[inline]
fn diff_into(x: impl Fn(usize) -> f64, n: usize, mut out: impl FnMut(usize, f64)) {
    let mut prev = 0.0;
    for k in 0..n {
        let v = x(k);
        out(k, v - prev);
        prev = v;
    }
    out(n, -prev);
}

impl LinearOperator for DifferenceOperator {
    fn n_rows(&self) -> usize {
        self.n + 1
    }
    fn n_cols(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        diff_into(|k| x[k], self.n, |k, v| y[k] = v);
    }
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        for k in 0..self.n {
            x[k] = y[k] - y[k + 1];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Gmrf,
    Iid { region: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorMean {
    /// `c * 1`
    Constant(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone)]
enum FactorOp {
    Gmrf { n_side: usize },
    Restriction { indices: Vec<usize> },
}

/// One prior term: mean and square-root precision `R`.
#[derive(Debug, Clone)]
pub struct GaussianFactor {
    kind: FactorKind,
    n: usize,
    delta: f64,
    sqrt_delta: f64,
    mean: FactorMean,
    op: FactorOp,
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "precision parameters must be positive, got {delta}"
        )))
    }
}

/// Zero-mean GMRF factor on an `N x N` image; `2N(N+1)` rows.
pub fn gmrf_factor(n_side: usize, delta0: f64) -> Result<GaussianFactor> {
    check_delta(delta0)?;
    if n_side == 0 {
        return Err(Error::InvalidConfig("grid must have at least one pixel".into()));
    }
    Ok(GaussianFactor {
        kind: FactorKind::Gmrf,
        n: n_side * n_side,
        delta: delta0,
        sqrt_delta: delta0.sqrt(),
        mean: FactorMean::Constant(0.0),
        op: FactorOp::Gmrf { n_side },
    })
}

/// IID factor pulling the masked pixels towards `alpha`.
pub fn iid_factor(mask: &Mask, n: usize, alpha: f64, delta: f64) -> Result<GaussianFactor> {
    check_delta(delta)?;
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "prior mean for region {} must be non-negative, got {alpha}",
            mask.region
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask { region: mask.region });
    }
    if let Some(&j) = mask.indices.iter().find(|&&j| j >= n) {
        return Err(Error::Bounds { what: "mask pixel", index: j, limit: n });
    }
    Ok(GaussianFactor {
        kind: FactorKind::Iid { region: mask.region },
        n,
        delta,
        sqrt_delta: delta.sqrt(),
        mean: FactorMean::Constant(alpha),
        op: FactorOp::Restriction {
            indices: mask.indices.clone(),
        },
    })
}

impl GaussianFactor {
    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn mean(&self) -> &FactorMean {
        &self.mean
    }

    /// Replaces the mean with an explicit vector.
    pub fn with_mean(mut self, mean: Vec<f64>) -> Result<Self> {
        if mean.len() != self.n {
            return Err(Error::dimension("factor mean", self.n, mean.len()));
        }
        self.mean = FactorMean::Vector(mean);
        Ok(self)
    }

    pub fn mean_vector(&self) -> Vec<f64> {
        match &self.mean {
            FactorMean::Constant(c) => vec![*c; self.n],
            FactorMean::Vector(v) => v.clone(),
        }
    }

    /// Writes `R_i mu_i` into `out`.
    pub fn apply_to_mean(&self, out: &mut [f64]) {
        match (&self.mean, &self.op) {
            (FactorMean::Constant(c), FactorOp::Restriction { .. }) => {
                out.fill(self.sqrt_delta * c);
            }
            (FactorMean::Constant(c), FactorOp::Gmrf { .. }) if *c == 0.0 => out.fill(0.0),
            _ => self.apply(&self.mean_vector(), out),
        }
    }

    /// `||R_i (x - mu_i)||^2`.
    pub fn misfit(&self, x: &[f64]) -> f64 {
        let shifted: Vec<f64> = match &self.mean {
            FactorMean::Constant(c) => x.iter().map(|v| v - c).collect(),
            FactorMean::Vector(m) => x.iter().zip(m).map(|(v, u)| v - u).collect(),
        };
        let mut r = vec![0.0; self.n_rows()];
        self.apply(&shifted, &mut r);
        r.iter().map(|v| v * v).sum()
    }

    /// Masked pixel indices of an IID factor.
    pub fn indices(&self) -> Option<&[usize]> {
        match &self.op {
            FactorOp::Restriction { indices } => Some(indices),
            FactorOp::Gmrf { .. } => None,
        }
    }
}

impl LinearOperator for GaussianFactor {
    fn n_rows(&self) -> usize {
        match &self.op {
            FactorOp::Gmrf { n_side } => 2 * n_side * (n_side + 1),
            FactorOp::Restriction { indices } => indices.len(),
        }
    }

    fn n_cols(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let s = self.sqrt_delta;
        match &self.op {
            FactorOp::Gmrf { n_side } => {
                let n = *n_side;
                let (d1, d2) = y.split_at_mut(n * (n + 1));
                // D1 = I (x) D: down each column
                for c in 0..n {
                    let col = &x[c * n..(c + 1) * n];
                    let out = &mut d1[c * (n + 1)..(c + 1) * (n + 1)];
                    diff_into(|k| col[k], n, |k, v| out[k] = s * v);
                }
                // D2 = D (x) I: across columns, row by row
                for r in 0..n {
                    diff_into(|k| x[k * n + r], n, |k, v| d2[k * n + r] = s * v);
                }
            }
            FactorOp::Restriction { indices } => {
                for (yi, &j) in y.iter_mut().zip(indices) {
                    *yi = s * x[j];
                }
            }
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let s = self.sqrt_delta;
        match &self.op {
            FactorOp::Gmrf { n_side } => {
                let n = *n_side;
                let (d1, d2) = y.split_at(n * (n + 1));
                for c in 0..n {
                    let yc = &d1[c * (n + 1)..(c + 1) * (n + 1)];
                    for k in 0..n {
                        x[c * n + k] = s * (yc[k] - yc[k + 1]);
                    }
                }
                for k in 0..n {
                    for r in 0..n {
                        x[k * n + r] += s * (d2[k * n + r] - d2[(k + 1) * n + r]);
                    }
                }
            }
            FactorOp::Restriction { indices } => {
                x.fill(0.0);
                for (&yi, &j) in y.iter().zip(indices) {
                    x[j] = s * yi;
                }
            }
        }
    }
}

/// Named prior configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorKind {
    /// GMRF only.
    #[serde(rename = "gmrf")]
    Gmrf,
    /// GMRF plus an IID factor on the background.
    #[serde(rename = "sgp-bg")]
    SgpBg,
    /// GMRF plus IID factors on every region.
    #[serde(rename = "sgp-f")]
    SgpF,
    #[serde(rename = "custom")]
    Custom,
}

impl PriorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PriorKind::Gmrf => "gmrf",
            PriorKind::SgpBg => "sgp-bg",
            PriorKind::SgpF => "sgp-f",
            PriorKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for PriorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmrf" => Ok(PriorKind::Gmrf),
            "sgp-bg" => Ok(PriorKind::SgpBg),
            "sgp-f" => Ok(PriorKind::SgpF),
            other => Err(Error::InvalidConfig(format!("unknown prior {other:?}"))),
        }
    }
}

/// GMRF precision per fraction of view angles kept: 4000 for full data,
/// 3000 at one half, 1000 at one fifth and below.
pub fn default_delta0(angle_fraction: f64) -> f64 {
    const TABLE: [(f64, f64); 4] = [(1.0, 4000.0), (0.5, 3000.0), (0.2, 1000.0), (0.1, 1000.0)];
    TABLE
        .iter()
        .min_by(|a, b| {
            (a.0 - angle_fraction)
                .abs()
                .total_cmp(&(b.0 - angle_fraction).abs())
        })
        .map(|e| e.1)
        .unwrap()
}

/// Precision parameters: `delta0` for the GMRF, one per IID region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDeltas {
    pub delta0: f64,
    pub regions: BTreeMap<usize, f64>,
}

impl PriorDeltas {
    /// 1000 on regions 1-4 and 500 on the concrete (region 5), which hosts
    /// unmodelled inclusions.
    pub fn with_delta0(delta0: f64) -> Self {
        Self {
            delta0,
            regions: [(1, 1000.0), (2, 1000.0), (3, 1000.0), (4, 1000.0), (5, 500.0)]
                .into_iter()
                .collect(),
        }
    }
}

/// Stack of Gaussian factors with exactly one GMRF.
#[derive(Debug, Clone)]
pub struct StructuralPrior {
    grid: ImageGrid,
    kind: PriorKind,
    factors: Vec<GaussianFactor>,
}

impl StructuralPrior {
    pub fn new(grid: ImageGrid, kind: PriorKind, factors: Vec<GaussianFactor>) -> Result<Self> {
        let n = grid.n();
        let gmrf = factors.iter().filter(|f| f.kind == FactorKind::Gmrf).count();
        if gmrf != 1 {
            return Err(Error::InvalidConfig(format!(
                "a structural prior needs exactly one GMRF factor, got {gmrf}"
            )));
        }
        let mut owner = vec![0usize; n];
        for f in &factors {
            if f.n != n {
                return Err(Error::dimension("prior factor", n, f.n));
            }
            if let (FactorKind::Iid { region }, Some(idx)) = (f.kind, f.indices()) {
                for &j in idx {
                    if owner[j] != 0 {
                        return Err(Error::InvalidConfig(format!(
                            "IID factors for regions {} and {region} overlap",
                            owner[j]
                        )));
                    }
                    owner[j] = region;
                }
            }
        }
        Ok(Self { grid, kind, factors })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    pub fn factors(&self) -> &[GaussianFactor] {
        &self.factors
    }

    /// Rows of the stacked `R_pr`.
    pub fn total_rows(&self) -> usize {
        self.factors.iter().map(|f| f.n_rows()).sum()
    }

    /// Stacked `[R_0 mu_0; ...; R_p mu_p]`.
    pub fn rhs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.total_rows()];
        let mut off = 0;
        for f in &self.factors {
            let r = f.n_rows();
            f.apply_to_mean(&mut out[off..off + r]);
            off += r;
        }
        out
    }
}

impl LinearOperator for StructuralPrior {
    fn n_rows(&self) -> usize {
        self.total_rows()
    }

    fn n_cols(&self) -> usize {
        self.grid.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut off = 0;
        for f in &self.factors {
            let r = f.n_rows();
            f.apply(x, &mut y[off..off + r]);
            off += r;
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        let mut tmp = vec![0.0; x.len()];
        let mut off = 0;
        for f in &self.factors {
            let r = f.n_rows();
            f.apply_transpose(&y[off..off + r], &mut tmp);
            for (xi, ti) in x.iter_mut().zip(&tmp) {
                *xi += ti;
            }
            off += r;
        }
    }
}

/// Regions that carry IID factors under `kind`.
pub fn iid_regions(kind: PriorKind, masks: &MaskSet) -> Vec<usize> {
    match kind {
        PriorKind::Gmrf | PriorKind::Custom => Vec::new(),
        PriorKind::SgpBg => vec![crate::phantom::BACKGROUND_REGION],
        PriorKind::SgpF => masks.masks().iter().map(|m| m.region).collect(),
    }
}

/// Builds the GMRF-only, SGP-BG or SGP-F prior.
pub fn assemble_sgp(
    kind: PriorKind,
    masks: &MaskSet,
    table: &AttenuationTable,
    deltas: &PriorDeltas,
) -> Result<StructuralPrior> {
    if kind == PriorKind::Custom {
        return Err(Error::InvalidConfig(
            "custom priors are built with StructuralPrior::new".into(),
        ));
    }
    let grid = masks.grid;
    let mut factors = vec![gmrf_factor(grid.n_side(), deltas.delta0)?];
    for region in iid_regions(kind, masks) {
        let mask = masks
            .get(region)
            .ok_or_else(|| Error::InvalidConfig(format!("no mask for region {region}")))?;
        let alpha = table
            .alpha(region)
            .ok_or_else(|| Error::InvalidConfig(format!("no attenuation for region {region}")))?;
        let delta = *deltas
            .regions
            .get(&region)
            .ok_or_else(|| Error::InvalidConfig(format!("no precision for region {region}")))?;
        factors.push(iid_factor(mask, grid.n(), alpha, delta)?);
    }
    StructuralPrior::new(grid, kind, factors)
}

/// `mu_pr = (R_pr^T R_pr)^{-1} sum_i R_i^T R_i mu_i`, solved as the least
/// squares problem `min ||R_pr x - [R_i mu_i]||`.
pub fn prior_mean(prior: &StructuralPrior, tol: f64, max_iter: usize) -> Result<Image> {
    let rhs = prior.rhs();
    let (x, report) = cgls(prior, &rhs, None, tol, max_iter)?;
    if !report.converged {
        return Err(Error::IterationLimit {
            iterations: report.iterations,
            residual: report.relative_residual(),
        });
    }
    Image::from_values(prior.grid, x)
}

/// `-1/2 sum_i ||R_i (x - mu_i)||^2`; the normalization constant is omitted.
pub fn unnormalized_log_density(prior: &StructuralPrior, x: &Image) -> Result<f64> {
    if x.grid() != prior.grid() {
        return Err(Error::dimension("prior density image", prior.grid.n(), x.grid().n()));
    }
    Ok(-0.5 * prior.factors.iter().map(|f| f.misfit(x.values())).sum::<f64>())
}
