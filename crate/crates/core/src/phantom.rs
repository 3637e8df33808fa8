//! Layered pipe phantom, region masks, and simulated sinograms.
//!
//! The pipe is a set of concentric annuli around `center_offset`; everything
//! outside the annuli (including the bore) is background, region 1. Steel
//! inclusions live inside a host layer and are drawn into the phantom only:
//! the masks describe the nominal layer layout.

use serde::{Deserialize, Serialize};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{ImageGrid, ScanGeometry};
use crate::materials::{find_material, AttenuationTable, Material};
use crate::projector::{Image, Projector, Sinogram};
use crate::rng::{self, streams};
use crate::solver::{norm, LinearOperator};

/// Region index of the background.
pub const BACKGROUND_REGION: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub region_index: usize,
    pub inner_radius_cm: f64,
    pub outer_radius_cm: f64,
    pub material: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InclusionShape {
    /// Straight bar crossing the host layer along a radius.
    Radial,
    /// Curved bar following a circle inside the host layer.
    Tangential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inclusion {
    pub shape: InclusionShape,
    pub width_mm: f64,
    pub angle_deg: f64,
    pub material: String,
    /// Layer the inclusion sits in.
    pub host_region: usize,
    /// Arc length of a tangential bar.
    #[serde(default = "default_tangential_length")]
    pub length_cm: f64,
    /// Radius of a tangential bar's centre line; the host layer's mid-radius when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_cm: Option<f64>,
}

fn default_tangential_length() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipeSpec {
    pub background_material: String,
    #[serde(default)]
    pub center_offset_cm: [f64; 2],
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub inclusions: Vec<Inclusion>,
}

impl Default for PipeSpec {
    /// Steel, PU foam, PE rubber and concrete around an air bore, with six
    /// radial and six tangential steel bars of 2-7 mm in the concrete.
    fn default() -> Self {
        let layer = |region_index, inner, outer, material: &str| Layer {
            region_index,
            inner_radius_cm: inner,
            outer_radius_cm: outer,
            material: material.to_string(),
        };
        let widths = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let mut inclusions = Vec::new();
        for (k, &w) in widths.iter().enumerate() {
            inclusions.push(Inclusion {
                shape: InclusionShape::Radial,
                width_mm: w,
                angle_deg: 20.0 + 30.0 * k as f64,
                material: "Steel".into(),
                host_region: 5,
                length_cm: default_tangential_length(),
                radius_cm: None,
            });
            inclusions.push(Inclusion {
                shape: InclusionShape::Tangential,
                width_mm: w,
                angle_deg: 200.0 + 30.0 * k as f64,
                material: "Steel".into(),
                host_region: 5,
                length_cm: default_tangential_length(),
                radius_cm: None,
            });
        }
        Self {
            background_material: "Air".into(),
            center_offset_cm: [0.0, 0.0],
            layers: vec![
                layer(2, 8.0, 10.0, "Steel"),
                layer(3, 10.0, 14.0, "PU foam"),
                layer(4, 14.0, 16.0, "PE rubber"),
                layer(5, 16.0, 24.0, "Concrete"),
            ],
            inclusions,
        }
    }
}

impl PipeSpec {
    /// Checks nesting, index uniqueness and that everything fits in `grid`.
    pub fn validate(&self, grid: &ImageGrid) -> Result<()> {
        let bad = |s: String| Err(Error::InvalidSpec(s));
        let mut seen = vec![BACKGROUND_REGION];
        let mut prev_outer = 0.0;
        for (k, l) in self.layers.iter().enumerate() {
            if seen.contains(&l.region_index) || l.region_index == 0 {
                return bad(format!("duplicate or invalid region index {}", l.region_index));
            }
            seen.push(l.region_index);
            if !(l.inner_radius_cm >= 0.0) || !(l.outer_radius_cm > l.inner_radius_cm) {
                return bad(format!("layer {k} has invalid radii"));
            }
            if l.inner_radius_cm < prev_outer {
                return bad(format!("layer {k} overlaps the previous layer"));
            }
            prev_outer = l.outer_radius_cm;
        }
        let half = 0.5 * grid.physical_size();
        let reach = prev_outer
            + self.center_offset_cm[0].abs().max(self.center_offset_cm[1].abs());
        if reach > half {
            return bad(format!(
                "pipe reaches {reach} cm from the axis but the domain half-width is {half} cm"
            ));
        }
        for inc in &self.inclusions {
            if !(inc.width_mm > 0.0) {
                return bad("inclusion width must be positive".into());
            }
            if self.layer(inc.host_region).is_none() {
                return bad(format!("inclusion host region {} is not a layer", inc.host_region));
            }
        }
        Ok(())
    }

    fn layer(&self, region: usize) -> Option<&Layer> {
        self.layers.iter().find(|l| l.region_index == region)
    }

    /// Region indices in ascending order, background first.
    pub fn regions(&self) -> Vec<usize> {
        let mut r: Vec<usize> = std::iter::once(BACKGROUND_REGION)
            .chain(self.layers.iter().map(|l| l.region_index))
            .collect();
        r.sort_unstable();
        r
    }

    /// Expected attenuation per region from a material list.
    pub fn attenuation_table(&self, materials: &[Material]) -> Result<AttenuationTable> {
        let mut table = AttenuationTable::new();
        table.insert(
            BACKGROUND_REGION,
            find_material(materials, &self.background_material)?.clone(),
        )?;
        for l in &self.layers {
            table.insert(l.region_index, find_material(materials, &l.material)?.clone())?;
        }
        Ok(table)
    }

    /// Nominal region of a point (inclusions ignored).
    pub fn region_at(&self, p: [f64; 2]) -> usize {
        let r = (p[0] - self.center_offset_cm[0]).hypot(p[1] - self.center_offset_cm[1]);
        self.layers
            .iter()
            .find(|l| r >= l.inner_radius_cm && r < l.outer_radius_cm)
            .map_or(BACKGROUND_REGION, |l| l.region_index)
    }

    /// Index of the inclusion covering a point, if any.
    fn inclusion_at(&self, p: [f64; 2]) -> Option<usize> {
        let x = p[0] - self.center_offset_cm[0];
        let y = p[1] - self.center_offset_cm[1];
        let r = x.hypot(y);
        self.inclusions.iter().position(|inc| {
            let host = match self.layer(inc.host_region) {
                Some(h) => h,
                None => return false,
            };
            let half_w = 0.05 * inc.width_mm;
            let (s, c) = inc.angle_deg.to_radians().sin_cos();
            match inc.shape {
                InclusionShape::Radial => {
                    let along = x * c + y * s;
                    let across = -x * s + y * c;
                    along > 0.0
                        && r >= host.inner_radius_cm
                        && r < host.outer_radius_cm
                        && across.abs() <= half_w
                }
                InclusionShape::Tangential => {
                    let rc = inc
                        .radius_cm
                        .unwrap_or(0.5 * (host.inner_radius_cm + host.outer_radius_cm));
                    if (r - rc).abs() > half_w {
                        return false;
                    }
                    let theta = y.atan2(x);
                    let mut d = (theta - inc.angle_deg.to_radians()).rem_euclid(std::f64::consts::TAU);
                    if d > std::f64::consts::PI {
                        d -= std::f64::consts::TAU;
                    }
                    (d * rc).abs() <= 0.5 * inc.length_cm
                }
            }
        })
    }
}

/// Phantom image: each pixel takes the attenuation of the region (or
/// inclusion) containing its centre.
pub fn build_phantom(spec: &PipeSpec, grid: &ImageGrid, table: &AttenuationTable) -> Result<Image> {
    spec.validate(grid)?;
    let alpha_of = |region: usize| {
        table
            .alpha(region)
            .ok_or_else(|| Error::InvalidConfig(format!("no attenuation for region {region}")))
    };
    let mut inclusion_alpha = Vec::with_capacity(spec.inclusions.len());
    for inc in &spec.inclusions {
        let alpha = table
            .regions()
            .find(|&r| table.material(r).is_some_and(|m| m.name == inc.material))
            .and_then(|r| table.alpha(r))
            .ok_or_else(|| {
                Error::InvalidSpec(format!("inclusion material {:?} not in the table", inc.material))
            })?;
        inclusion_alpha.push(alpha);
    }
    let mut region_alpha = Vec::new();
    for r in spec.regions() {
        region_alpha.push((r, alpha_of(r)?));
    }

    let n = grid.n_side();
    let mut values = vec![0.0; grid.n()];
    for col in 0..n {
        for row in 0..n {
            let p = grid.pixel_center(row, col);
            let v = match spec.inclusion_at(p) {
                Some(k) => inclusion_alpha[k],
                None => {
                    let region = spec.region_at(p);
                    region_alpha.iter().find(|e| e.0 == region).map(|e| e.1).unwrap()
                }
            };
            values[grid.index(row, col)] = v;
        }
    }
    Image::from_values(*grid, values)
}

/// Pixel indices (sorted) of one region.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub region: usize,
    pub indices: Vec<usize>,
}

impl Mask {
    /// Number of masked pixels, `l_i`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn to_dense(&self, n: usize) -> Vec<bool> {
        let mut v = vec![false; n];
        for &j in &self.indices {
            v[j] = true;
        }
        v
    }

    pub fn from_dense(region: usize, dense: &[bool]) -> Self {
        Self {
            region,
            indices: dense.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect(),
        }
    }
}

/// Disjoint per-region masks on a reconstruction grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub grid: ImageGrid,
    masks: Vec<Mask>,
}

impl MaskSet {
    pub fn new(grid: ImageGrid, mut masks: Vec<Mask>) -> Result<Self> {
        masks.sort_by_key(|m| m.region);
        let mut owner = vec![0usize; grid.n()];
        for m in &masks {
            if m.is_empty() {
                return Err(Error::EmptyMask { region: m.region });
            }
            for &j in &m.indices {
                if j >= grid.n() {
                    return Err(Error::Bounds { what: "mask pixel", index: j, limit: grid.n() });
                }
                if owner[j] != 0 {
                    return Err(Error::InvalidConfig(format!(
                        "masks for regions {} and {} overlap at pixel {j}",
                        owner[j], m.region
                    )));
                }
                owner[j] = m.region;
            }
        }
        Ok(Self { grid, masks })
    }

    /// Number of regions `p`.
    pub fn p(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn get(&self, region: usize) -> Option<&Mask> {
        self.masks.iter().find(|m| m.region == region)
    }

    /// `l_i` per region in region order.
    pub fn sizes(&self) -> Vec<usize> {
        self.masks.iter().map(Mask::len).collect()
    }
}

/// Default erosion: 2 pixels at N = 512, proportional in N.
pub fn default_erosion(n_side: usize) -> usize {
    (2.0 * n_side as f64 / 512.0).round() as usize
}

/// Region masks shrunk by `erosion_px` pixels (square structuring element),
/// leaving unmasked bands along every region boundary.
pub fn build_masks(spec: &PipeSpec, grid: &ImageGrid, erosion_px: usize) -> Result<MaskSet> {
    spec.validate(grid)?;
    let n = grid.n_side();
    let mut labels = vec![0usize; grid.n()];
    for col in 0..n {
        for row in 0..n {
            labels[grid.index(row, col)] = spec.region_at(grid.pixel_center(row, col));
        }
    }
    let mut masks = Vec::new();
    for region in spec.regions() {
        let inside: Vec<bool> = labels.iter().map(|&l| l == region).collect();
        let eroded = erode(&inside, n, erosion_px);
        let mask = Mask::from_dense(region, &eroded);
        if mask.is_empty() {
            return Err(Error::EmptyMask { region });
        }
        masks.push(mask);
    }
    MaskSet::new(*grid, masks)
}

/// Binary erosion with a `(2r+1)^2` square; pixels beyond the border count as set.
fn erode(img: &[bool], n: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return img.to_vec();
    }
    // separable: erode along columns (rows index), then along rows
    let pass = |src: &[bool], along_rows: bool| -> Vec<bool> {
        let mut out = vec![false; n * n];
        for a in 0..n {
            for b in 0..n {
                let lo = b.saturating_sub(r);
                let hi = (b + r).min(n - 1);
                let all = (lo..=hi).all(|k| {
                    let j = if along_rows { a * n + k } else { k * n + a };
                    src[j]
                });
                let j = if along_rows { a * n + b } else { b * n + a };
                out[j] = all;
            }
        }
        out
    };
    let first = pass(img, true);
    pass(&first, false)
}

/// Simulated measurement and its noise model.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub sinogram: Sinogram,
    /// Noise precision `1 / sigma^2`; infinite for noiseless data.
    pub lambda: f64,
    pub sigma: f64,
    /// Realized `||e|| / ||A x||`.
    pub realized_noise: f64,
}

/// `d = A_fine x_fine + e` with `e ~ N(0, sigma^2 I)` and
/// `sigma = noise_rel * ||A_fine x_fine|| / sqrt(m)`.
///
/// The phantom is projected on `fine_grid`, which should be finer than the
/// reconstruction grid so the data do not come from the reconstruction model.
pub fn simulate_sinogram(
    spec: &PipeSpec,
    table: &AttenuationTable,
    fine_grid: &ImageGrid,
    geometry: &ScanGeometry,
    noise_rel: f64,
    seed: u64,
) -> Result<SimulatedData> {
    if !(noise_rel >= 0.0) || !noise_rel.is_finite() {
        return Err(Error::InvalidConfig(format!("noise_rel must be >= 0, got {noise_rel}")));
    }
    let phantom = build_phantom(spec, fine_grid, table)?;
    let proj = Projector::new(*fine_grid, geometry.clone());
    let mut clean = vec![0.0; geometry.m()];
    proj.apply(phantom.values(), &mut clean);
    add_noise(geometry, clean, noise_rel, seed)
}

/// Adds calibrated Gaussian noise to clean line integrals.
pub fn add_noise(
    geometry: &ScanGeometry,
    clean: Vec<f64>,
    noise_rel: f64,
    seed: u64,
) -> Result<SimulatedData> {
    let m = clean.len();
    let clean_norm = norm(&clean);
    if noise_rel == 0.0 {
        return Ok(SimulatedData {
            sinogram: Sinogram::new(geometry.clone(), clean)?,
            lambda: f64::INFINITY,
            sigma: 0.0,
            realized_noise: 0.0,
        });
    }
    let sigma = noise_rel * clean_norm / (m as f64).sqrt();
    let mut rng = rng::stream(seed, streams::SIMULATE_NOISE);
    let mut noisy = clean;
    let mut e2 = 0.0;
    for d in noisy.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        let e = sigma * z;
        e2 += e * e;
        *d += e;
    }
    Ok(SimulatedData {
        sinogram: Sinogram::new(geometry.clone(), noisy)?,
        lambda: 1.0 / (sigma * sigma),
        sigma,
        realized_noise: if clean_norm > 0.0 { e2.sqrt() / clean_norm } else { 0.0 },
    })
}

/// Keeps every `round(1/fraction)`-th view, starting with view 0.
pub fn subsample_angles(sino: &Sinogram, fraction: f64) -> Result<Sinogram> {
    let keep = subsample_indices(sino.geometry().n_angles(), fraction)?;
    let geometry = sino.geometry().select_angles(&keep)?;
    let mut values = Vec::with_capacity(geometry.m());
    for &k in &keep {
        values.extend_from_slice(sino.view(k));
    }
    Sinogram::new(geometry, values)
}

/// View indices kept by [`subsample_angles`].
pub fn subsample_indices(n_angles: usize, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) || fraction * (n_angles as f64) < 1.0 {
        return Err(Error::InvalidConfig(format!(
            "angle fraction must be in (0, 1] and keep at least one view, got {fraction}"
        )));
    }
    let step = (1.0 / fraction).round() as usize;
    Ok((0..n_angles).step_by(step.max(1)).collect())
}
