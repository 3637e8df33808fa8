//! Run configuration: JSON file keys over shipped defaults, with command-line
//! flags applied on top by the CLI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeometryConfig;
use crate::materials::{default_materials, load_materials, Material};
use crate::phantom::PipeSpec;
use crate::priors::{default_delta0, PriorDeltas, PriorKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    #[serde(rename = "type")]
    pub kind: PriorKind,
    /// GMRF precision; chosen from the angle fraction when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta0: Option<f64>,
    /// IID precision per region index.
    pub deltas: BTreeMap<usize, f64>,
    /// Mask erosion in pixels; scales with the grid when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub erosion_px: Option<usize>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::SgpF,
            delta0: None,
            deltas: PriorDeltas::with_delta0(0.0).regions,
            erosion_px: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_samples: usize,
    /// A third of `n_samples` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    pub inner_iters: usize,
    /// Pixels probed for the IACT.
    pub iact_pixels: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 3000,
            burn_in: None,
            inner_iters: 10,
            iact_pixels: 100,
        }
    }
}

impl SamplerConfig {
    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.n_samples / 3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Relative normal-equations tolerance of MAP solves.
    pub map_tol: f64,
    pub map_max_iter: usize,
    /// Iteration cap of the unregularized reconstruction.
    pub deterministic_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            map_tol: 1e-6,
            map_max_iter: 2000,
            deterministic_max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub pipe: PipeSpec,
    /// Materials JSON; the shipped table when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub materials: Option<PathBuf>,
    pub prior: PriorConfig,
    /// `||e|| / ||A x||` of simulated data.
    pub noise_rel: f64,
    /// Fraction of view angles kept, in (0, 1].
    pub angle_fraction: f64,
    /// Phantom grid refinement relative to the reconstruction grid.
    pub phantom_refinement: usize,
    pub sampler: SamplerConfig,
    pub solver: SolverConfig,
    pub sweep_grid: Vec<f64>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            pipe: PipeSpec::default(),
            materials: None,
            prior: PriorConfig::default(),
            noise_rel: 0.02,
            angle_fraction: 1.0,
            phantom_refinement: 2,
            sampler: SamplerConfig::default(),
            solver: SolverConfig::default(),
            sweep_grid: vec![100.0, 300.0, 1000.0, 3000.0, 10000.0],
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a config file; relative materials paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(m), Some(dir)) = (&cfg.materials, path.parent()) {
            if m.is_relative() {
                cfg.materials = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(Error::InvalidConfig(s));
        if !(self.angle_fraction > 0.0 && self.angle_fraction <= 1.0) {
            return bad(format!("angle_fraction must be in (0, 1], got {}", self.angle_fraction));
        }
        if !(self.noise_rel >= 0.0) || !self.noise_rel.is_finite() {
            return bad(format!("noise_rel must be >= 0, got {}", self.noise_rel));
        }
        if self.phantom_refinement == 0 {
            return bad("phantom_refinement must be at least 1".into());
        }
        if let Some(m) = &self.materials {
            if !m.is_file() {
                return bad(format!("materials file {} does not exist", m.display()));
            }
        }
        if self.sampler.inner_iters == 0 {
            return bad("sampler.inner_iters must be at least 1".into());
        }
        if self.sampler.n_samples <= self.sampler.burn_in() {
            return bad(format!(
                "sampler.n_samples ({}) must exceed burn_in ({})",
                self.sampler.n_samples,
                self.sampler.burn_in()
            ));
        }
        if let Some(d) = self.prior.delta0 {
            if !(d > 0.0) {
                return bad(format!("delta0 must be positive, got {d}"));
            }
        }
        Ok(())
    }

    pub fn materials(&self) -> Result<Vec<Material>> {
        match &self.materials {
            Some(p) => load_materials(p),
            None => Ok(default_materials()),
        }
    }

    pub fn delta0(&self) -> f64 {
        self.prior
            .delta0
            .unwrap_or_else(|| default_delta0(self.angle_fraction))
    }

    pub fn deltas(&self) -> PriorDeltas {
        PriorDeltas {
            delta0: self.delta0(),
            regions: self.prior.deltas.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
