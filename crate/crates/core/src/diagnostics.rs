//! Reconstruction and chain diagnostics: RMSE, pixelwise quantiles,
//! integrated autocorrelation time, 1D slices and the `delta_0` sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::materials::AttenuationTable;
use crate::phantom::MaskSet;
use crate::posterior::{assemble_posterior, map_estimate, SampleSet};
use crate::priors::{assemble_sgp, PriorDeltas, PriorKind};
use crate::projector::Image;
use crate::rng::{self, streams};
use crate::solver::LinearOperator;

pub fn rmse(x: &Image, truth: &Image) -> Result<f64> {
    if x.grid() != truth.grid() {
        return Err(Error::dimension("rmse image", truth.values().len(), x.values().len()));
    }
    Ok(crate::solver::rmse_slice(x.values(), truth.values()))
}

/// Type-7 quantile of sorted data: linear interpolation between order
/// statistics at position `(n - 1) p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_probs(probs: &[f64]) -> Result<()> {
    match probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        Some(p) => Err(Error::InvalidConfig(format!("quantile level {p} outside (0, 1)"))),
        None => Ok(()),
    }
}

/// One image per level in `probs`.
pub fn pixel_quantiles(samples: &SampleSet, probs: &[f64]) -> Result<Vec<Image>> {
    check_probs(probs)?;
    if samples.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "quantiles need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let grid = *samples.samples[0].grid();
    let mut out = vec![vec![0.0; grid.n()]; probs.len()];
    let mut buf = vec![0.0; samples.len()];
    for j in 0..grid.n() {
        for (b, s) in buf.iter_mut().zip(&samples.samples) {
            *b = s.values()[j];
        }
        buf.sort_by(f64::total_cmp);
        for (o, &p) in out.iter_mut().zip(probs) {
            o[j] = quantile_sorted(&buf, p);
        }
    }
    out.into_iter().map(|v| Image::from_values(grid, v)).collect()
}

/// Pixelwise 97.5% minus 2.5% quantile.
pub fn interquantile_range(samples: &SampleSet) -> Result<Image> {
    let q = pixel_quantiles(samples, &[0.025, 0.975])?;
    let v = q[1].values().iter().zip(q[0].values()).map(|(a, b)| a - b).collect();
    Image::from_values(*q[0].grid(), v)
}

pub const MIN_IACT_LENGTH: usize = 50;

/// Integrated autocorrelation time `1 + 2 sum_k rho(k)`, truncated by
/// Geyer's initial positive sequence: pair sums `rho(2m) + rho(2m+1)` are
/// added while they stay positive.
///
/// Strongly anticorrelated chains can drive the estimate to zero or below;
/// it is floored at `1 / n`.
pub fn iact(chain: &[f64]) -> Result<f64> {
    let n = chain.len();
    if n < MIN_IACT_LENGTH {
        return Err(Error::InvalidConfig(format!(
            "IACT needs a chain of at least {MIN_IACT_LENGTH} values, got {n}"
        )));
    }
    let mean = chain.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = chain.iter().map(|v| v - mean).collect();
    let autocov = |k: usize| -> f64 {
        centered[..n - k]
            .iter()
            .zip(&centered[k..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    };
    let g0 = autocov(0);
    if !(g0 > 1e-300 * mean.abs().max(1.0)) {
        return Err(Error::ConstantChain);
    }
    let mut sum = 0.0;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = autocov(2 * m) + autocov(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        m += 1;
    }
    let tau = -1.0 + 2.0 * sum / g0;
    Ok(tau.max(1.0 / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDiagnostics {
    pub iact_values: BTreeMap<usize, f64>,
    pub pixel_sample: Vec<usize>,
    pub rmse: Option<f64>,
}

impl ChainDiagnostics {
    /// Fraction of probed pixels with IACT at most `limit`.
    pub fn fraction_at_most(&self, limit: f64) -> f64 {
        let hits = self.iact_values.values().filter(|&&v| v <= limit).count();
        hits as f64 / self.iact_values.len().max(1) as f64
    }
}

/// `count` distinct pixel indices drawn uniformly from `0..n`.
pub fn random_pixels(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, streams::IACT_PIXELS);
    let mut v = index::sample(&mut rng, n, count.min(n)).into_vec();
    v.sort_unstable();
    v
}

/// IACT at `n_pixels` seeded random pixels and, when `truth` is given,
/// the RMSE of the chain mean.
pub fn chain_diagnostics(
    samples: &SampleSet,
    n_pixels: usize,
    seed: u64,
    truth: Option<&Image>,
) -> Result<ChainDiagnostics> {
    let mean = samples
        .mean()
        .ok_or_else(|| Error::InvalidConfig("empty sample set".into()))?;
    let pixel_sample = random_pixels(mean.grid().n(), n_pixels, seed);
    let mut iact_values = BTreeMap::new();
    for &j in &pixel_sample {
        iact_values.insert(j, iact(&samples.pixel_chain(j))?);
    }
    let rmse = truth.map(|t| rmse(&mean, t)).transpose()?;
    Ok(ChainDiagnostics {
        iact_values,
        pixel_sample,
        rmse,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    /// `None` where the solve failed.
    pub rmse_per_delta: Vec<Option<f64>>,
    pub failures: Vec<(f64, String)>,
    pub best_delta: f64,
}

/// Evaluates `solve` at every grid value and keeps the RMSE minimizer; the
/// first index wins ties. Failed solves are recorded and skipped; if all
/// fail, the last error is returned.
pub fn sweep_with(
    grid: &[f64],
    truth: &Image,
    solve: &mut dyn FnMut(f64) -> Result<Image>,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty sweep grid".into()));
    }
    let mut rmse_per_delta = Vec::with_capacity(grid.len());
    let mut failures = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    let mut last_err = None;
    for &d in grid {
        let r = solve(d).and_then(|x| rmse(&x, truth));
        match r {
            Ok(v) => {
                log::info!("sweep: delta0 = {d}, rmse = {v:.6e}");
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((d, v));
                }
                rmse_per_delta.push(Some(v));
            }
            Err(e) => {
                log::warn!("sweep: delta0 = {d} failed: {e}");
                failures.push((d, e.to_string()));
                rmse_per_delta.push(None);
                last_err = Some(e);
            }
        }
    }
    let Some((best_delta, _)) = best else {
        // every point failed; surface the last solver error
        return Err(last_err.expect("non-empty grid"));
    };
    Ok(SweepResult {
        grid: grid.to_vec(),
        rmse_per_delta,
        failures,
        best_delta,
    })
}

/// Inputs needed to recompute the MAP estimate for varying `delta_0`.
#[derive(Clone)]
pub struct SweepProblem {
    pub forward: Arc<dyn LinearOperator + Send + Sync>,
    pub data: Vec<f64>,
    pub lambda: f64,
    pub kind: PriorKind,
    pub masks: MaskSet,
    pub table: AttenuationTable,
    /// IID precisions; `delta0` is overwritten per sweep point.
    pub deltas: PriorDeltas,
    pub tol: f64,
    pub max_iter: usize,
}

/// MAP RMSE over a `delta_0` grid.
pub fn sweep_delta0(problem: &SweepProblem, grid: &[f64], truth: &Image) -> Result<SweepResult> {
    sweep_with(grid, truth, &mut |d| {
        let deltas = PriorDeltas {
            delta0: d,
            ..problem.deltas.clone()
        };
        let prior = assemble_sgp(problem.kind, &problem.masks, &problem.table, &deltas)?;
        let model = assemble_posterior(
            problem.forward.clone(),
            problem.data.clone(),
            problem.lambda,
            prior,
        )?;
        let (x, info) = map_estimate(&model, problem.tol, problem.max_iter)?;
        if !info.converged {
            return Err(Error::IterationLimit {
                iterations: info.iterations,
                residual: info.relative_residual,
            });
        }
        Ok(x)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceSpec {
    Row(usize),
    Column(usize),
}

/// A 1D profile with optional 2.5% / 97.5% band.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    /// Pixel-center coordinate along the slice, cm (x for rows, y for columns).
    pub positions: Vec<f64>,
    pub values: Vec<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

fn slice_indices(image: &Image, spec: SliceSpec) -> Result<(Vec<usize>, Vec<f64>)> {
    let g = image.grid();
    let n = g.n_side();
    let k = match spec {
        SliceSpec::Row(k) | SliceSpec::Column(k) => k,
    };
    if k >= n {
        return Err(Error::Bounds { what: "slice index", index: k, limit: n });
    }
    Ok((0..n)
        .map(|i| match spec {
            SliceSpec::Row(r) => (g.index(r, i), g.pixel_center(r, i)[0]),
            SliceSpec::Column(c) => (g.index(i, c), g.pixel_center(i, c)[1]),
        })
        .unzip())
}

pub fn slice_image(image: &Image, spec: SliceSpec) -> Result<Profile> {
    let (idx, positions) = slice_indices(image, spec)?;
    Ok(Profile {
        positions,
        values: idx.iter().map(|&j| image.values()[j]).collect(),
        lower: None,
        upper: None,
    })
}

/// Slice through the chain mean with the pixelwise 95% band.
pub fn slice_samples(samples: &SampleSet, spec: SliceSpec) -> Result<Profile> {
    let mean = samples
        .mean()
        .ok_or_else(|| Error::InvalidConfig("empty sample set".into()))?;
    let (idx, positions) = slice_indices(&mean, spec)?;
    if samples.len() < 2 {
        return Err(Error::InvalidConfig("a credible band needs at least 2 samples".into()));
    }
    let (mut lower, mut upper) = (Vec::new(), Vec::new());
    for &j in &idx {
        let mut c = samples.pixel_chain(j);
        c.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&c, 0.025));
        upper.push(quantile_sorted(&c, 0.975));
    }
    Ok(Profile {
        positions,
        values: idx.iter().map(|&j| mean.values()[j]).collect(),
        lower: Some(lower),
        upper: Some(upper),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageGrid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn set_from(grid: ImageGrid, columns: Vec<Vec<f64>>) -> SampleSet {
        SampleSet {
            samples: columns
                .into_iter()
                .map(|v| Image::from_values(grid, v).unwrap())
                .collect(),
            burn_in: 0,
            iters_per_sample: 1,
            seed: 0,
            solver_residuals: vec![],
        }
    }

    #[test]
    fn rmse_cases() {
        let g = ImageGrid::new(1, 1.0).unwrap();
        let g2 = ImageGrid::new(2, 1.0).unwrap();
        let t = Image::from_values(g2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let z = Image::zeros(g2);
        assert_relative_eq!(rmse(&z, &t).unwrap(), (25.0f64 / 4.0).sqrt());
        let shifted = Image::from_values(g2, t.values().iter().map(|v| v - 0.3).collect()).unwrap();
        assert_relative_eq!(rmse(&shifted, &t).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert!(rmse(&Image::zeros(g), &t).is_err());
    }

    #[test]
    fn type7_quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_relative_eq!(quantile_sorted(&s, 0.25), 1.75);
        assert_eq!(quantile_sorted(&[7.0], 0.3), 7.0);
        let mut z = normals(10_000, 3);
        z.sort_by(f64::total_cmp);
        assert!((quantile_sorted(&z, 0.975) - 1.96).abs() < 0.05);
    }

    #[test]
    fn constant_samples_quantiles() {
        let g = ImageGrid::new(2, 1.0).unwrap();
        let set = set_from(g, vec![vec![0.5; 4]; 5]);
        for q in pixel_quantiles(&set, &[0.025, 0.5, 0.975]).unwrap() {
            assert!(q.values().iter().all(|&v| v == 0.5));
        }
        assert!(interquantile_range(&set).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(pixel_quantiles(&set, &[0.0]).is_err());
        assert!(pixel_quantiles(&set_from(g, vec![vec![0.0; 4]]), &[0.5]).is_err());
    }

    #[test]
    fn iact_iid_and_ar1() {
        let z = normals(10_000, 11);
        let t = iact(&z).unwrap();
        assert!((t - 1.0).abs() < 0.1, "{t}");

        let phi = 0.5;
        let e = normals(100_000, 12);
        let mut x = vec![0.0; e.len()];
        for i in 1..e.len() {
            x[i] = phi * x[i - 1] + e[i];
        }
        let t = iact(&x).unwrap();
        assert!((t - 3.0).abs() < 0.45, "{t}");
    }

    #[test]
    fn iact_iid_mean_over_trials() {
        let mean: f64 = (0..50).map(|s| iact(&normals(2000, 100 + s)).unwrap()).sum::<f64>() / 50.0;
        assert!((0.9..=1.1).contains(&mean), "{mean}");
    }

    #[test]
    fn iact_errors() {
        assert!(matches!(iact(&[1.0; 100]), Err(Error::ConstantChain)));
        assert!(iact(&[1.0; 10]).is_err());
        let alt: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(iact(&alt).unwrap() > 0.0);
    }

    #[test]
    fn pixel_draws_are_seeded_and_distinct() {
        let a = random_pixels(16_384, 100, 4);
        assert_eq!(a, random_pixels(16_384, 100, 4));
        assert_eq!(a.len(), 100);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, random_pixels(16_384, 100, 5));
    }

    #[test]
    fn sweep_rules() {
        let g = ImageGrid::new(2, 1.0).unwrap();
        let truth = Image::zeros(g);
        let mut f = |d: f64| {
            if d < 0.0 {
                Err(Error::InvalidConfig("bad".into()))
            } else {
                Ok(Image::constant(g, (d - 3.0).abs()))
            }
        };
        let r = sweep_with(&[5.0], &truth, &mut f).unwrap();
        assert_eq!(r.best_delta, 5.0);
        let r = sweep_with(&[1.0, 2.0, 4.0, 2.0, -1.0], &truth, &mut f).unwrap();
        assert_eq!(r.best_delta, 2.0);
        assert_eq!(r.rmse_per_delta[1], r.rmse_per_delta[3]);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.rmse_per_delta[4], None);
        // exact tie between distinct values: first index wins
        let r = sweep_with(&[4.0, 2.0], &truth, &mut f).unwrap();
        assert_eq!(r.best_delta, 4.0);
        assert!(sweep_with(&[-1.0], &truth, &mut f).is_err());
    }

    #[test]
    fn slices() {
        let g = ImageGrid::new(4, 4.0).unwrap();
        let flat = slice_image(&Image::constant(g, 2.0), SliceSpec::Row(1)).unwrap();
        assert_eq!(flat.values, vec![2.0; 4]);
        assert_eq!(flat.positions, vec![-1.5, -0.5, 0.5, 1.5]);
        let col = slice_image(&Image::constant(g, 2.0), SliceSpec::Column(0)).unwrap();
        assert_eq!(col.positions, vec![1.5, 0.5, -0.5, -1.5]);
        assert!(slice_image(&Image::zeros(g), SliceSpec::Column(4)).is_err());

        let cols: Vec<Vec<f64>> = (0..60).map(|s| normals(16, s)).collect();
        let set = set_from(g, cols);
        let p = slice_samples(&set, SliceSpec::Row(2)).unwrap();
        let mean_slice = slice_image(&set.mean().unwrap(), SliceSpec::Row(2)).unwrap();
        let slice_mean: Vec<f64> = (0..4)
            .map(|i| {
                set.samples
                    .iter()
                    .map(|s| slice_image(s, SliceSpec::Row(2)).unwrap().values[i])
                    .sum::<f64>()
                    / 60.0
            })
            .collect();
        for i in 0..4 {
            assert_relative_eq!(mean_slice.values[i], slice_mean[i], epsilon = 1e-14);
            assert!(p.lower.as_ref().unwrap()[i] <= p.upper.as_ref().unwrap()[i]);
        }
    }

    proptest! {
        #[test]
        fn quantiles_monotone(seed in 0u64..1000, p1 in 0.01f64..0.98, dp in 0.0f64..0.01) {
            let g = ImageGrid::new(2, 1.0).unwrap();
            let cols: Vec<Vec<f64>> = (0..20).map(|s| normals(4, seed * 100 + s)).collect();
            let set = set_from(g, cols);
            let q = pixel_quantiles(&set, &[p1, p1 + dp]).unwrap();
            for j in 0..4 {
                prop_assert!(q[0].values()[j] <= q[1].values()[j]);
            }
        }

        #[test]
        fn rmse_symmetric(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let g = ImageGrid::new(2, 1.0).unwrap();
            let x = Image::from_values(g, a).unwrap();
            let y = Image::from_values(g, b).unwrap();
            let r = rmse(&x, &y).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert_eq!(r, rmse(&y, &x).unwrap());
        }
    }
}
