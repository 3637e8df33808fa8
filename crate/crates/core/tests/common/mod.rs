#![allow(dead_code)]

use std::sync::Arc;

use pipect::cli::{build_scene, measurement, DataArgs, Scene};
use pipect::config::RunConfig;
use pipect::posterior::{assemble_posterior, PosteriorModel};
use pipect::priors::{assemble_sgp, PriorKind};
use pipect::{GeometryConfig, SystemMatrix};

/// Default run configuration on an `n x n` desk-scale grid.
pub fn desk_config(n: usize, angle_fraction: f64, kind: PriorKind) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.geometry = GeometryConfig::desk(n);
    cfg.angle_fraction = angle_fraction;
    cfg.prior.kind = kind;
    cfg
}

pub struct Problem {
    pub cfg: RunConfig,
    pub scene: Scene,
    pub forward: Arc<SystemMatrix>,
    pub data: Vec<f64>,
    pub lambda: f64,
}

/// Simulated synthetic problem for `cfg`.
pub fn problem(cfg: RunConfig) -> Problem {
    let scene = build_scene(&cfg).unwrap();
    let meas = measurement(&cfg, &scene, &DataArgs::default()).unwrap();
    let forward = Arc::new(SystemMatrix::build(scene.grid, meas.sinogram.geometry().clone()).unwrap());
    Problem {
        cfg,
        scene,
        forward,
        data: meas.sinogram.into_values(),
        lambda: meas.lambda,
    }
}

impl Problem {
    pub fn model(&self, kind: PriorKind) -> PosteriorModel {
        let prior = assemble_sgp(kind, &self.scene.masks, &self.scene.table, &self.cfg.deltas()).unwrap();
        assemble_posterior(self.forward.clone(), self.data.clone(), self.lambda, prior).unwrap()
    }
}
