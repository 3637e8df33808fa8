//! CT system matrix `A` with entries `a_ij` equal to the length of ray `i`
//! inside pixel `j`, applied without forming the matrix.
//!
//! [`trace_ray`] computes one row of `A` by a Siddon traversal: the parametric
//! crossings of the ray with the vertical and horizontal grid lines are merged
//! in order, and each segment between consecutive crossings is assigned to the
//! pixel containing its midpoint. [`Projector`] re-traces rays on every
//! application; [`SystemMatrix`] caches the traced rows for problems that are
//! small enough and applied many times (sampling chains).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageGrid, Ray, ScanGeometry};
use crate::solver::LinearOperator;

/// Intersections shorter than this (cm) are dropped.
pub const MIN_INTERSECTION: f64 = 1e-14;

/// Attenuation image on an [`ImageGrid`], vectorized column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    grid: ImageGrid,
    values: Vec<f64>,
}

impl Image {
    pub fn zeros(grid: ImageGrid) -> Self {
        Self {
            values: vec![0.0; grid.n()],
            grid,
        }
    }

    pub fn constant(grid: ImageGrid, value: f64) -> Self {
        Self {
            values: vec![value; grid.n()],
            grid,
        }
    }

    pub fn from_values(grid: ImageGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n() {
            return Err(Error::dimension("image", grid.n(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("image contains non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.grid.index(row, col)]
    }

    /// Area-averaged downsampling by an integer factor (`N` must divide).
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        let n = self.grid.n_side();
        if factor == 0 || n % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "cannot downsample a {n}-pixel grid by {factor}"
            )));
        }
        let coarse = ImageGrid::new(n / factor, self.grid.physical_size())?;
        let nc = coarse.n_side();
        let mut out = vec![0.0; coarse.n()];
        let w = 1.0 / (factor * factor) as f64;
        for col in 0..n {
            for row in 0..n {
                out[coarse.index(row / factor, col / factor)] +=
                    w * self.values[self.grid.index(row, col)];
            }
        }
        debug_assert_eq!(out.len(), nc * nc);
        Ok(Image {
            grid: coarse,
            values: out,
        })
    }
}

/// Line-integral data, ordered angle-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    geometry: ScanGeometry,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(geometry: ScanGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.m() {
            return Err(Error::dimension("sinogram", geometry.m(), values.len()));
        }
        Ok(Self { geometry, values })
    }

    pub fn zeros(geometry: ScanGeometry) -> Self {
        Self {
            values: vec![0.0; geometry.m()],
            geometry,
        }
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Readings of view `angle_index`.
    pub fn view(&self, angle_index: usize) -> &[f64] {
        let nd = self.geometry.n_detectors();
        &self.values[angle_index * nd..(angle_index + 1) * nd]
    }
}

/// Calls `visit(pixel_index, length_cm)` for every pixel the ray crosses,
/// in order along the ray.
pub fn for_each_intersection(
    grid: &ImageGrid,
    ray: &Ray,
    mut visit: impl FnMut(usize, f64),
) -> Result<()> {
    let n = grid.n_side();
    let nf = n as f64;
    let h = grid.pixel_size();
    let half = 0.5 * grid.physical_size();
    // grid units: u runs with columns, v with rows (downwards)
    let u0 = (ray.source[0] + half) / h;
    let v0 = (half - ray.source[1]) / h;
    let du = (ray.detector[0] + half) / h - u0;
    let dv = (half - ray.detector[1]) / h - v0;
    let len = h * du.hypot(dv);
    if !(len > 0.0) {
        return Err(Error::InvalidRay);
    }

    let (mut tmin, mut tmax) = (0.0f64, 1.0f64);
    for (p, d) in [(u0, du), (v0, dv)] {
        if d == 0.0 {
            if p < 0.0 || p > nf {
                return Ok(());
            }
        } else {
            let (a, b) = ((0.0 - p) / d, (nf - p) / d);
            tmin = tmin.max(a.min(b));
            tmax = tmax.min(a.max(b));
        }
    }
    if tmax <= tmin {
        return Ok(());
    }

    let mut us = Crossings::new(u0, du, tmin, tmax);
    let mut vs = Crossings::new(v0, dv, tmin, tmax);
    let mut t_prev = tmin;
    loop {
        let t_next = match (us.peek(), vs.peek()) {
            (Some(a), Some(b)) if a <= b => {
                us.advance();
                a
            }
            (Some(_), Some(b)) => {
                vs.advance();
                b
            }
            (Some(a), None) => {
                us.advance();
                a
            }
            (None, Some(b)) => {
                vs.advance();
                b
            }
            (None, None) => tmax,
        };
        let t_next = t_next.min(tmax);
        let seg = (t_next - t_prev) * len;
        if seg > MIN_INTERSECTION {
            let mid = 0.5 * (t_prev + t_next);
            let col = cell(u0 + mid * du, n);
            let row = cell(v0 + mid * dv, n);
            visit(grid.index(row, col), seg);
        }
        if t_next >= tmax {
            break;
        }
        t_prev = t_next.max(t_prev);
    }
    Ok(())
}

#[inline]
fn cell(coord: f64, n: usize) -> usize {
    (coord.floor().max(0.0) as usize).min(n - 1)
}

/// Parameters `t` where the ray crosses integer grid lines of one axis,
/// restricted to the open interval `(tmin, tmax)`, in increasing order.
struct Crossings {
    p: f64,
    d: f64,
    k: i64,
    last: i64,
    step: i64,
}

impl Crossings {
    fn new(p: f64, d: f64, tmin: f64, tmax: f64) -> Self {
        if d == 0.0 {
            return Self { p, d, k: 1, last: 0, step: 1 };
        }
        let a = p + tmin * d;
        let b = p + tmax * d;
        if d > 0.0 {
            Self { p, d, k: a.ceil() as i64, last: b.floor() as i64, step: 1 }
        } else {
            Self { p, d, k: a.floor() as i64, last: b.ceil() as i64, step: -1 }
        }
    }

    #[inline]
    fn peek(&self) -> Option<f64> {
        if (self.step > 0 && self.k > self.last) || (self.step < 0 && self.k < self.last) {
            None
        } else {
            Some((self.k as f64 - self.p) / self.d)
        }
    }

    #[inline]
    fn advance(&mut self) {
        self.k += self.step;
    }
}

/// One row of `A`: `(pixel_index, intersection_length_cm)` pairs.
pub fn trace_ray(grid: &ImageGrid, ray: &Ray) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for_each_intersection(grid, ray, |j, l| out.push((j, l)))?;
    Ok(out)
}

/// Matrix-free `A` for a grid and scan geometry; rays are traced on demand.
#[derive(Debug, Clone)]
pub struct Projector {
    grid: ImageGrid,
    geometry: ScanGeometry,
}

impl Projector {
    pub fn new(grid: ImageGrid, geometry: ScanGeometry) -> Self {
        Self { grid, geometry }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    fn for_each_ray(&self, mut f: impl FnMut(usize, &Ray)) {
        let nd = self.geometry.n_detectors();
        for a in 0..self.geometry.n_angles() {
            for d in 0..nd {
                f(a * nd + d, &self.geometry.ray(a, d));
            }
        }
    }
}

impl LinearOperator for Projector {
    fn n_rows(&self) -> usize {
        self.geometry.m()
    }

    fn n_cols(&self) -> usize {
        self.grid.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let grid = self.grid;
        self.for_each_ray(|i, ray| {
            let mut acc = 0.0;
            for_each_intersection(&grid, ray, |j, l| acc += l * x[j])
                .expect("geometry guarantees non-degenerate rays");
            y[i] = acc;
        });
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        let grid = self.grid;
        self.for_each_ray(|i, ray| {
            let yi = y[i];
            if yi != 0.0 {
                for_each_intersection(&grid, ray, |j, l| x[j] += l * yi)
                    .expect("geometry guarantees non-degenerate rays");
            }
        });
    }
}

/// `A` with every traced row cached in compressed sparse row form.
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    grid: ImageGrid,
    geometry: ScanGeometry,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SystemMatrix {
    pub fn build(grid: ImageGrid, geometry: ScanGeometry) -> Result<Self> {
        if grid.n() > u32::MAX as usize {
            return Err(Error::InvalidConfig("grid too large for a cached system matrix".into()));
        }
        let m = geometry.m();
        let mut row_ptr = Vec::with_capacity(m + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let nd = geometry.n_detectors();
        for a in 0..geometry.n_angles() {
            for d in 0..nd {
                for_each_intersection(&grid, &geometry.ray(a, d), |j, l| {
                    cols.push(j as u32);
                    vals.push(l);
                })?;
                row_ptr.push(cols.len());
            }
        }
        Ok(Self {
            grid,
            geometry,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Nonzeros of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[a..b]
            .iter()
            .zip(&self.vals[a..b])
            .map(|(&j, &v)| (j as usize, v))
    }
}

impl LinearOperator for SystemMatrix {
    fn n_rows(&self) -> usize {
        self.geometry.m()
    }

    fn n_cols(&self) -> usize {
        self.grid.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut acc = 0.0;
            for (&j, &v) in self.cols[a..b].iter().zip(&self.vals[a..b]) {
                acc += v * x[j as usize];
            }
            *yi = acc;
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
            for (&j, &v) in self.cols[a..b].iter().zip(&self.vals[a..b]) {
                x[j as usize] += v * yi;
            }
        }
    }
}

/// `A x` for `image` on `grid`.
pub fn forward(grid: &ImageGrid, geometry: &ScanGeometry, image: &Image) -> Result<Sinogram> {
    if image.grid() != grid {
        return Err(Error::dimension("forward image grid", grid.n(), image.grid().n()));
    }
    let proj = Projector::new(*grid, geometry.clone());
    let mut values = vec![0.0; geometry.m()];
    proj.apply(image.values(), &mut values);
    Sinogram::new(geometry.clone(), values)
}

/// `A^T d` for `sino` acquired with `geometry`.
pub fn adjoint(grid: &ImageGrid, geometry: &ScanGeometry, sino: &Sinogram) -> Result<Image> {
    if sino.geometry() != geometry {
        return Err(Error::dimension("adjoint sinogram geometry", geometry.m(), sino.values().len()));
    }
    let proj = Projector::new(*grid, geometry.clone());
    let mut values = vec![0.0; grid.n()];
    proj.apply_transpose(sino.values(), &mut values);
    Ok(Image {
        grid: *grid,
        values,
    })
}
