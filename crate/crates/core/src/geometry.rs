//! Reconstruction grid and offset fan-beam acquisition geometry.
//!
//! Coordinates are in cm with the rotation axis at the origin. At view angle
//! `theta` the central beam points along `e = (cos theta, sin theta)`, i.e.
//! angle 0 sends the beam along `+x` and angles increase counterclockwise.
//! The source/detector midline is displaced by `source_offset` along
//! `e_perp = (-sin theta, cos theta)`. The source sits on the circle of radius
//! `source_to_axis`; the flat detector panel is perpendicular to `e` at
//! distance `axis_to_detector` beyond the axis.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Square pixel grid centred on the rotation axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    n_side: usize,
    physical_size: f64,
}

impl ImageGrid {
    pub fn new(n_side: usize, physical_size: f64) -> Result<Self> {
        if n_side == 0 {
            return Err(Error::InvalidConfig("grid_n must be at least 1".into()));
        }
        if !(physical_size > 0.0) || !physical_size.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "grid_size_cm must be positive, got {physical_size}"
            )));
        }
        Ok(Self {
            n_side,
            physical_size,
        })
    }

    pub fn n_side(&self) -> usize {
        self.n_side
    }

    /// Number of pixels, `N^2`.
    pub fn n(&self) -> usize {
        self.n_side * self.n_side
    }

    pub fn physical_size(&self) -> f64 {
        self.physical_size
    }

    pub fn pixel_size(&self) -> f64 {
        self.physical_size / self.n_side as f64
    }

    pub fn pixel_area(&self) -> f64 {
        let h = self.pixel_size();
        h * h
    }

    /// Column-major linear index of `(row, col)`.
    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        col * self.n_side + row
    }

    /// Inverse of [`ImageGrid::index`].
    #[inline]
    pub fn row_col(&self, j: usize) -> (usize, usize) {
        (j % self.n_side, j / self.n_side)
    }

    /// Physical coordinates of the centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let h = self.pixel_size();
        let half = 0.5 * self.physical_size;
        [
            -half + (col as f64 + 0.5) * h,
            half - (row as f64 + 0.5) * h,
        ]
    }

    /// Same physical domain at `factor` times the resolution.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        ImageGrid::new(self.n_side * factor, self.physical_size)
    }
}

/// A single measurement line from the source to one detector pixel centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub source: [f64; 2],
    pub detector: [f64; 2],
}

impl Ray {
    pub fn length(&self) -> f64 {
        let dx = self.detector[0] - self.source[0];
        let dy = self.detector[1] - self.source[1];
        dx.hypot(dy)
    }
}

/// User-facing geometry description (JSON). Missing keys take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub n_angles: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angles_deg: Option<Vec<f64>>,
    pub source_to_axis_cm: f64,
    pub axis_to_detector_cm: f64,
    pub source_offset_cm: f64,
    pub n_detectors: usize,
    pub detector_pixel_size_cm: f64,
    pub grid_n: usize,
    pub grid_size_cm: f64,
}

impl Default for GeometryConfig {
    /// Approximation of the laboratory offset scanner: 360 views over a full
    /// rotation, 510 detector pixels of 0.8 mm, and a 55 cm domain on a
    /// 512 x 512 grid. Source/detector distances and the offset are estimates.
    fn default() -> Self {
        Self {
            n_angles: 360,
            angles_deg: None,
            source_to_axis_cm: 60.0,
            axis_to_detector_cm: 40.0,
            source_offset_cm: 15.0,
            n_detectors: 510,
            detector_pixel_size_cm: 0.08,
            grid_n: 512,
            grid_size_cm: 55.0,
        }
    }
}

impl GeometryConfig {
    /// Default geometry at a coarser grid. The detector count scales with the
    /// grid while the panel width stays fixed.
    pub fn desk(grid_n: usize) -> Self {
        let base = Self::default();
        let n_detectors = ((base.n_detectors * grid_n) as f64 / base.grid_n as f64)
            .round()
            .max(1.0) as usize;
        let panel = base.n_detectors as f64 * base.detector_pixel_size_cm;
        Self {
            n_detectors,
            detector_pixel_size_cm: panel / n_detectors as f64,
            grid_n,
            ..base
        }
    }

    pub fn grid(&self) -> Result<ImageGrid> {
        ImageGrid::new(self.grid_n, self.grid_size_cm)
    }
}

/// Offset fan-beam acquisition geometry. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    angles: Vec<f64>,
    source_to_axis: f64,
    axis_to_detector: f64,
    source_offset: f64,
    n_detectors: usize,
    detector_pixel_size: f64,
}

/// Validates `config` and derives the view angles.
pub fn build_scan_geometry(config: &GeometryConfig) -> Result<ScanGeometry> {
    let angles = match &config.angles_deg {
        Some(deg) => {
            if deg.len() != config.n_angles {
                return Err(Error::InvalidConfig(format!(
                    "angles_deg has {} entries but n_angles = {}",
                    deg.len(),
                    config.n_angles
                )));
            }
            deg.iter().map(|d| d.to_radians()).collect()
        }
        None => equispaced_angles(config.n_angles),
    };
    ScanGeometry::new(
        angles,
        config.source_to_axis_cm,
        config.axis_to_detector_cm,
        config.source_offset_cm,
        config.n_detectors,
        config.detector_pixel_size_cm,
    )
}

/// `2 pi k / n` for `k = 0..n`.
pub fn equispaced_angles(n: usize) -> Vec<f64> {
    (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect()
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
    }
}

impl ScanGeometry {
    pub fn new(
        angles: Vec<f64>,
        source_to_axis: f64,
        axis_to_detector: f64,
        source_offset: f64,
        n_detectors: usize,
        detector_pixel_size: f64,
    ) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::InvalidConfig("n_angles must be at least 1".into()));
        }
        if n_detectors == 0 {
            return Err(Error::InvalidConfig("n_detectors must be at least 1".into()));
        }
        positive("source_to_axis_cm", source_to_axis)?;
        positive("axis_to_detector_cm", axis_to_detector)?;
        positive("detector_pixel_size_cm", detector_pixel_size)?;
        if !source_offset.is_finite() || source_offset.abs() >= source_to_axis {
            return Err(Error::InvalidConfig(format!(
                "|source_offset_cm| must be below source_to_axis_cm, got {source_offset}"
            )));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidConfig("angles must be finite".into()));
        }
        Ok(Self {
            angles,
            source_to_axis,
            axis_to_detector,
            source_offset,
            n_detectors,
            detector_pixel_size,
        })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn source_to_axis(&self) -> f64 {
        self.source_to_axis
    }

    pub fn axis_to_detector(&self) -> f64 {
        self.axis_to_detector
    }

    pub fn source_offset(&self) -> f64 {
        self.source_offset
    }

    pub fn detector_pixel_size(&self) -> f64 {
        self.detector_pixel_size
    }

    /// Sinogram length `m = n_angles * n_detectors`.
    pub fn m(&self) -> usize {
        self.angles.len() * self.n_detectors
    }

    pub fn panel_width(&self) -> f64 {
        self.n_detectors as f64 * self.detector_pixel_size
    }

    /// Ray from the source to the centre of detector pixel `detector_index`
    /// at view `angle_index`.
    pub fn ray_for(&self, angle_index: usize, detector_index: usize) -> Result<Ray> {
        if angle_index >= self.angles.len() {
            return Err(Error::Bounds {
                what: "angle_index",
                index: angle_index,
                limit: self.angles.len(),
            });
        }
        if detector_index >= self.n_detectors {
            return Err(Error::Bounds {
                what: "detector_index",
                index: detector_index,
                limit: self.n_detectors,
            });
        }
        Ok(self.ray(angle_index, detector_index))
    }

    /// Unchecked variant of [`ScanGeometry::ray_for`] for hot loops.
    #[inline]
    pub(crate) fn ray(&self, angle_index: usize, detector_index: usize) -> Ray {
        let (sin, cos) = self.angles[angle_index].sin_cos();
        let e = [cos, sin];
        let e_perp = [-sin, cos];
        let along = (self.source_to_axis * self.source_to_axis
            - self.source_offset * self.source_offset)
            .sqrt();
        let u = (detector_index as f64 - 0.5 * (self.n_detectors as f64 - 1.0))
            * self.detector_pixel_size;
        let o = self.source_offset;
        let d = self.axis_to_detector;
        Ray {
            source: [-along * e[0] + o * e_perp[0], -along * e[1] + o * e_perp[1]],
            detector: [
                d * e[0] + (o + u) * e_perp[0],
                d * e[1] + (o + u) * e_perp[1],
            ],
        }
    }

    /// Geometry restricted to the given view indices (in the given order).
    pub fn select_angles(&self, indices: &[usize]) -> Result<Self> {
        let mut angles = Vec::with_capacity(indices.len());
        for &k in indices {
            if k >= self.angles.len() {
                return Err(Error::Bounds {
                    what: "angle_index",
                    index: k,
                    limit: self.angles.len(),
                });
            }
            angles.push(self.angles[k]);
        }
        Self::new(
            angles,
            self.source_to_axis,
            self.axis_to_detector,
            self.source_offset,
            self.n_detectors,
            self.detector_pixel_size,
        )
    }

    /// Hex SHA-256 of the canonical JSON encoding; stamped into array files
    /// so sinograms can be matched to the geometry that produced them.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("geometry serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
