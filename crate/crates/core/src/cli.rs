//! Command-line front end. Every command resolves a [`RunConfig`] (flags over
//! config file over defaults), writes it to the output directory as
//! `config.resolved.json`, and then produces its files there.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::diagnostics::{chain_diagnostics, interquantile_range, rmse, sweep_delta0, SweepProblem};
use crate::error::{Error, Result};
use crate::geometry::{build_scan_geometry, ImageGrid, ScanGeometry};
use crate::io::{write_png, ArrayFile, ArrayMeta};
use crate::materials::AttenuationTable;
use crate::phantom::{
    add_noise, build_masks, build_phantom, default_erosion, subsample_angles, MaskSet,
};
use crate::posterior::{assemble_posterior, map_estimate, run_chain, PosteriorModel};
use crate::priors::{assemble_sgp, PriorKind};
use crate::projector::{Image, Projector, Sinogram, SystemMatrix};
use crate::solver::{cgls_semiconvergent, LinearOperator, StoppingRule};

#[derive(Debug, Parser)]
#[command(name = "pipect", version, about = "Bayesian CT reconstruction of layered pipes")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub angle_fraction: Option<f64>,
    /// gmrf, sgp-bg or sgp-f.
    #[arg(long, global = true, value_parser = parse_prior)]
    pub prior: Option<PriorKind>,
    /// GMRF precision.
    #[arg(long, global = true)]
    pub delta0: Option<f64>,
    /// Reconstruction grid size N.
    #[arg(long, global = true)]
    pub grid_n: Option<usize>,
    #[arg(long, global = true)]
    pub noise_rel: Option<f64>,
}

fn parse_prior(s: &str) -> std::result::Result<PriorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Early-stopped CGLS on the data alone.
    Deterministic,
    /// Posterior mean under the configured prior.
    Map,
}

/// Measured data in place of a simulated sinogram.
#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Sinogram `.arr` matching the configured geometry and angle fraction.
    #[arg(long)]
    pub sinogram: Option<PathBuf>,
    /// Noise precision of the sinogram; read from `lambda.json` beside it when absent.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the fine-grid phantom, the downsampled truth and the region masks.
    Phantom,
    /// Simulate a noisy sinogram.
    Simulate,
    /// Deterministic or MAP reconstruction.
    Reconstruct {
        #[arg(long, value_enum, default_value_t = Method::Map)]
        method: Method,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Sample the posterior: mean, 95% interquantile range and IACT.
    Sample {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        inner_iters: Option<usize>,
    },
    /// RMSE of the MAP estimate over a grid of GMRF precisions.
    Sweep {
        /// Comma-separated delta0 values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Render a 2D `.arr` file as an 8-bit grayscale PNG.
    ExportPng {
        input: PathBuf,
        /// Defaults to the input path with a `.png` extension.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = -0.05, allow_hyphen_values = true)]
        min: f64,
        #[arg(long, default_value_t = 0.20, allow_hyphen_values = true)]
        max: f64,
    },
}

/// Config file (if any) with flags applied.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(f) = common.angle_fraction {
        cfg.angle_fraction = f;
    }
    if let Some(p) = common.prior {
        cfg.prior.kind = p;
    }
    if let Some(d) = common.delta0 {
        cfg.prior.delta0 = Some(d);
    }
    if let Some(n) = common.grid_n {
        cfg.geometry.grid_n = n;
    }
    if let Some(r) = common.noise_rel {
        cfg.noise_rel = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.resolved.json"), cfg.to_json() + "\n")?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Synthetic pipe set-up shared by all commands.
pub struct Scene {
    pub grid: ImageGrid,
    pub fine_grid: ImageGrid,
    pub table: AttenuationTable,
    /// Phantom on the fine grid.
    pub phantom: Image,
    /// Phantom area-averaged onto the reconstruction grid.
    pub truth: Image,
    pub masks: MaskSet,
}

pub fn build_scene(cfg: &RunConfig) -> Result<Scene> {
    let grid = cfg.geometry.grid()?;
    let fine_grid = grid.refined(cfg.phantom_refinement)?;
    let materials = cfg.materials()?;
    let table = cfg.pipe.attenuation_table(&materials)?;
    let phantom = build_phantom(&cfg.pipe, &fine_grid, &table)?;
    let truth = phantom.downsample(cfg.phantom_refinement)?;
    let erosion = cfg.prior.erosion_px.unwrap_or_else(|| default_erosion(grid.n_side()));
    let masks = build_masks(&cfg.pipe, &grid, erosion)?;
    Ok(Scene {
        grid,
        fine_grid,
        table,
        phantom,
        truth,
        masks,
    })
}

/// Full-rotation simulation followed by angle subsampling.
pub struct Simulation {
    pub sinogram: Sinogram,
    pub lambda: f64,
    pub sigma: f64,
    pub realized_noise: f64,
}

pub fn simulate(cfg: &RunConfig, scene: &Scene) -> Result<Simulation> {
    let full = build_scan_geometry(&cfg.geometry)?;
    let proj = Projector::new(scene.fine_grid, full.clone());
    let mut clean = vec![0.0; full.m()];
    proj.apply(scene.phantom.values(), &mut clean);
    let sim = add_noise(&full, clean, cfg.noise_rel, cfg.seed)?;
    Ok(Simulation {
        sinogram: subsample_angles(&sim.sinogram, cfg.angle_fraction)?,
        lambda: sim.lambda,
        sigma: sim.sigma,
        realized_noise: sim.realized_noise,
    })
}

/// Geometry of the kept views.
pub fn reconstruction_geometry(cfg: &RunConfig) -> Result<ScanGeometry> {
    let full = build_scan_geometry(&cfg.geometry)?;
    let keep = crate::phantom::subsample_indices(full.n_angles(), cfg.angle_fraction)?;
    full.select_angles(&keep)
}

/// Data, noise precision and whether the synthetic truth applies.
pub struct Measurement {
    pub sinogram: Sinogram,
    pub lambda: f64,
    pub synthetic: bool,
}

pub fn measurement(cfg: &RunConfig, scene: &Scene, data: &DataArgs) -> Result<Measurement> {
    let Some(path) = &data.sinogram else {
        let sim = simulate(cfg, scene)?;
        return Ok(Measurement {
            sinogram: sim.sinogram,
            lambda: data.lambda.unwrap_or(sim.lambda),
            synthetic: true,
        });
    };
    let geometry = reconstruction_geometry(cfg)?;
    let sinogram = ArrayFile::read(path)?.to_sinogram(&geometry)?;
    let lambda = match data.lambda {
        Some(l) => l,
        None => {
            let side = path.with_file_name("lambda.json");
            let text = std::fs::read_to_string(&side).map_err(|_| {
                Error::InvalidConfig(format!(
                    "no --lambda given and {} is missing",
                    side.display()
                ))
            })?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            v["lambda"]
                .as_f64()
                .ok_or_else(|| Error::InvalidConfig(format!("{} has no lambda", side.display())))?
        }
    };
    Ok(Measurement {
        sinogram,
        lambda,
        synthetic: false,
    })
}

fn system_matrix(scene: &Scene, sinogram: &Sinogram) -> Result<Arc<SystemMatrix>> {
    Ok(Arc::new(SystemMatrix::build(scene.grid, sinogram.geometry().clone())?))
}

fn posterior(
    cfg: &RunConfig,
    scene: &Scene,
    forward: Arc<SystemMatrix>,
    meas: &Measurement,
) -> Result<PosteriorModel> {
    let prior = assemble_sgp(cfg.prior.kind, &scene.masks, &scene.table, &cfg.deltas())?;
    assemble_posterior(forward, meas.sinogram.values().to_vec(), meas.lambda, prior)
}

fn image_file(image: &Image, geometry_hash: Option<String>) -> ArrayFile {
    let mut f = ArrayFile::from_image(image, "1/cm");
    f.header.meta.geometry_hash = geometry_hash;
    f
}

pub fn cmd_phantom(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let scene = build_scene(cfg)?;
    ArrayFile::from_image(&scene.phantom, "1/cm").write(&cfg.out.join("phantom.arr"))?;
    ArrayFile::from_image(&scene.truth, "1/cm").write(&cfg.out.join("truth_downsampled.arr"))?;
    let n = scene.grid.n();
    let mut stack = Vec::with_capacity(scene.masks.p() * n);
    for m in scene.masks.masks() {
        stack.extend(m.to_dense(n).into_iter().map(|b| if b { 1.0 } else { 0.0 }));
    }
    let meta = ArrayMeta {
        units: "1".into(),
        grid_size_cm: Some(scene.grid.physical_size()),
        regions: Some(scene.masks.masks().iter().map(|m| m.region).collect()),
        ..Default::default()
    };
    let side = scene.grid.n_side();
    ArrayFile::new(vec![scene.masks.p(), side, side], stack, meta)?
        .write(&cfg.out.join("masks.arr"))?;
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    prepare_out(cfg)?;
    let scene = build_scene(cfg)?;
    let sim = simulate(cfg, &scene)?;
    ArrayFile::from_sinogram(&sim.sinogram).write(&cfg.out.join("sinogram.arr"))?;
    write_json(
        &cfg.out.join("lambda.json"),
        &json!({
            "lambda": if sim.lambda.is_finite() { json!(sim.lambda) } else { json!(null) },
            "sigma": sim.sigma,
            "noise_rel": cfg.noise_rel,
            "realized_noise": sim.realized_noise,
            "seed": cfg.seed,
            "shape": [sim.sinogram.geometry().n_angles(), sim.sinogram.geometry().n_detectors()],
            "geometry_hash": sim.sinogram.geometry().hash(),
        }),
    )
}

pub fn cmd_reconstruct(cfg: &RunConfig, method: Method, data: &DataArgs) -> Result<()> {
    prepare_out(cfg)?;
    let scene = build_scene(cfg)?;
    let meas = measurement(cfg, &scene, data)?;
    let forward = system_matrix(&scene, &meas.sinogram)?;
    let hash = meas.sinogram.geometry().hash();
    let truth = meas.synthetic.then_some(&scene.truth);
    let (image, mut report) = match method {
        Method::Deterministic => {
            let rule = match truth {
                Some(t) => StoppingRule::Oracle { truth: t.values() },
                None => StoppingRule::discrepancy(meas.lambda),
            };
            let (x, rep) = cgls_semiconvergent(
                forward.as_ref(),
                meas.sinogram.values(),
                rule,
                cfg.solver.deterministic_max_iter,
            )?;
            let residual = rep.solve.ls_residual_history.get(rep.selected_iteration).copied();
            let report = json!({
                "method": method,
                "stopping_rule": if truth.is_some() { "oracle" } else { "discrepancy" },
                "m": forward.n_rows(),
                "n": forward.n_cols(),
                "q": forward.n_rows(),
                "iterations": rep.selected_iteration,
                "residual": residual,
                "rule_triggered": rep.triggered,
            });
            (Image::from_values(scene.grid, x)?, report)
        }
        Method::Map => {
            let model = posterior(cfg, &scene, forward, &meas)?;
            let (x, info) = map_estimate(&model, cfg.solver.map_tol, cfg.solver.map_max_iter)?;
            let report = json!({
                "method": method,
                "prior": cfg.prior.kind,
                "delta0": cfg.delta0(),
                "lambda": meas.lambda,
                "m": model.m(),
                "n": model.n(),
                "q": model.q(),
                "iterations": info.iterations,
                "residual": info.relative_residual,
                "converged": info.converged,
            });
            (x, report)
        }
    };
    report["geometry_hash"] = json!(hash);
    report["rmse"] = match truth {
        Some(t) => json!(rmse(&image, t)?),
        None => json!(null),
    };
    image_file(&image, Some(hash)).write(&cfg.out.join("recon.arr"))?;
    write_json(&cfg.out.join("report.json"), &report)
}

pub fn cmd_sample(cfg: &RunConfig, data: &DataArgs) -> Result<()> {
    prepare_out(cfg)?;
    let scene = build_scene(cfg)?;
    let meas = measurement(cfg, &scene, data)?;
    let forward = system_matrix(&scene, &meas.sinogram)?;
    let hash = meas.sinogram.geometry().hash();
    let model = posterior(cfg, &scene, forward, &meas)?;
    let s = &cfg.sampler;
    let samples = run_chain(
        &model,
        s.n_samples,
        s.burn_in(),
        s.inner_iters,
        cfg.seed,
        &Image::zeros(scene.grid),
    )?;
    let mean = samples
        .mean()
        .ok_or_else(|| Error::InvalidConfig("no samples retained".into()))?;
    let iqr = interquantile_range(&samples)?;
    let truth = meas.synthetic.then_some(&scene.truth);
    let diag = chain_diagnostics(&samples, s.iact_pixels, cfg.seed, truth)?;

    image_file(&mean, Some(hash.clone())).write(&cfg.out.join("mean.arr"))?;
    image_file(&iqr, Some(hash.clone())).write(&cfg.out.join("interquantile.arr"))?;
    let mut csv = String::from("pixel,row,col,iact\n");
    for (&j, &t) in &diag.iact_values {
        let (r, c) = scene.grid.row_col(j);
        csv.push_str(&format!("{j},{r},{c},{t}\n"));
    }
    std::fs::write(cfg.out.join("iact.csv"), csv)?;
    let res = &samples.solver_residuals;
    write_json(
        &cfg.out.join("samples_meta.json"),
        &json!({
            "n_samples": s.n_samples,
            "burn_in": samples.burn_in,
            "retained": samples.len(),
            "inner_iters": samples.iters_per_sample,
            "seed": samples.seed,
            "prior": cfg.prior.kind,
            "delta0": cfg.delta0(),
            "lambda": meas.lambda,
            "q": model.q(),
            "solver_residual_mean": res.iter().sum::<f64>() / res.len() as f64,
            "solver_residual_max": res.iter().copied().fold(0.0, f64::max),
            "iact_max": diag.iact_values.values().copied().fold(0.0, f64::max),
            "iact_fraction_at_most_1_2": diag.fraction_at_most(1.2),
            "rmse": diag.rmse,
            "geometry_hash": hash,
        }),
    )
}

pub fn cmd_sweep(cfg: &RunConfig, grid: Option<&[f64]>) -> Result<()> {
    prepare_out(cfg)?;
    let scene = build_scene(cfg)?;
    let meas = measurement(cfg, &scene, &DataArgs::default())?;
    let forward = system_matrix(&scene, &meas.sinogram)?;
    let problem = SweepProblem {
        forward,
        data: meas.sinogram.values().to_vec(),
        lambda: meas.lambda,
        kind: cfg.prior.kind,
        masks: scene.masks.clone(),
        table: scene.table.clone(),
        deltas: cfg.deltas(),
        tol: cfg.solver.map_tol,
        max_iter: cfg.solver.map_max_iter,
    };
    let grid = grid.unwrap_or(&cfg.sweep_grid);
    let result = sweep_delta0(&problem, grid, &scene.truth)?;
    let mut csv = String::from("delta0,rmse,best\n");
    for (d, r) in result.grid.iter().zip(&result.rmse_per_delta) {
        let r = r.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{d},{r},{}\n", u8::from(*d == result.best_delta)));
    }
    std::fs::write(cfg.out.join("sweep.csv"), csv)?;
    Ok(())
}

pub fn cmd_export_png(input: &Path, output: Option<&Path>, min: f64, max: f64) -> Result<PathBuf> {
    let out = output.map(Path::to_path_buf).unwrap_or_else(|| input.with_extension("png"));
    write_png(&ArrayFile::read(input)?, min, max, &out)?;
    Ok(out)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::ExportPng { input, output, min, max } = &cli.command {
        cmd_export_png(input, output.as_deref(), *min, *max)?;
        return Ok(());
    }
    let mut cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::Phantom => cmd_phantom(&cfg),
        Command::Simulate => cmd_simulate(&cfg),
        Command::Reconstruct { method, data } => cmd_reconstruct(&cfg, *method, data),
        Command::Sample {
            data,
            n_samples,
            burn_in,
            inner_iters,
        } => {
            if let Some(n) = n_samples {
                cfg.sampler.n_samples = *n;
            }
            if burn_in.is_some() {
                cfg.sampler.burn_in = *burn_in;
            }
            if let Some(k) = inner_iters {
                cfg.sampler.inner_iters = *k;
            }
            cfg.validate()?;
            cmd_sample(&cfg, data)
        }
        Command::Sweep { grid } => cmd_sweep(&cfg, grid.as_deref()),
        Command::ExportPng { .. } => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 3, "angle_fraction": 0.5, "geometry": {"grid_n": 64}}"#).unwrap();
        let cli = Cli::try_parse_from([
            "pipect", "simulate", "--config", path.to_str().unwrap(), "--seed", "9", "--prior", "gmrf",
        ])
        .unwrap();
        let cfg = resolve_config(&cli.common).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.angle_fraction, 0.5);
        assert_eq!(cfg.geometry.grid_n, 64);
        assert_eq!(cfg.prior.kind, PriorKind::Gmrf);
    }

    #[test]
    fn parse_errors() {
        assert!(Cli::try_parse_from(["pipect", "sample", "--prior", "tv"]).is_err());
        assert!(Cli::try_parse_from(["pipect", "reconstruct", "--method", "fbp"]).is_err());
        let cli = Cli::try_parse_from(["pipect", "export-png", "x.arr", "--min", "-1"]).unwrap();
        assert!(matches!(cli.command, Command::ExportPng { min, .. } if min == -1.0));
        let cli = Cli::try_parse_from(["pipect", "sweep", "--grid", "10,100"]).unwrap();
        assert!(matches!(cli.command, Command::Sweep { grid: Some(ref g) } if g == &[10.0, 100.0]));
    }

    #[test]
    fn bad_fraction_is_config_error() {
        let common = CommonArgs {
            angle_fraction: Some(0.0),
            ..Default::default()
        };
        assert_eq!(resolve_config(&common).unwrap_err().exit_code(), 2);
    }
}
