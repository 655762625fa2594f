//! `nbv`: command-line driver for reconstruction runs, studies and export.

use clap::{Args, Parser, Subcommand};
use nbv_core::harness::{self, RunConfig, RunReport, Variant};
use nbv_core::{Error, FieldParams, Formulation};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nbv", version, about = "Uncertainty-guided active reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML). Defaults to the built-in desk-scale config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Start from the reduced-size preset instead of the desk-scale default.
    #[arg(long, conflicts_with = "config")]
    quick: bool,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Canned scene name or scene TOML path.
    #[arg(long)]
    scene: Option<String>,
    /// nbv, fixed_trajectory or random_sample.
    #[arg(long)]
    variant: Option<Variant>,
    /// ray_set or single_ray.
    #[arg(long)]
    formulation: Option<Formulation>,
    /// Run the trainer on a worker thread.
    #[arg(long)]
    concurrent: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut c = match (&self.config, self.quick) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, true) => RunConfig::quick(),
            (None, false) => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = &self.scene {
            c.scene = s.clone();
        }
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if let Some(f) = self.formulation {
            c.train.formulation = f;
        }
        c.concurrent |= self.concurrent;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FormulationChoice {
    RaySet,
    SingleRay,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Run one capture/train/plan loop and write results.jsonl.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// PSNR vs log-uncertainty study over training checkpoints.
    Linearity {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides --formulation; `both` runs the two formulations.
        #[arg(long, value_enum)]
        study: Option<FormulationChoice>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Runs every planner variant for each seed on the configured scene.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// One run per iterations-per-step value.
    AblateIters {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "300,700,1400")]
        grid: Vec<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// One run per depth-noise scale.
    AblateNoise {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        grid: Vec<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Scores a saved checkpoint on the test-view protocol.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Writes renders, uncertainty maps, PLYs and a manifest for a run directory.
    Export {
        /// Directory written by `reconstruct`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Reconstruct { cfg, out } => {
            let report = harness::run_reconstruction(&cfg.resolve()?)?;
            let results = harness::write_run_outputs(&report, &out)?;
            eprintln!("wrote {}", results.display());
            print_json(&report.summary())
        }
        Command::Linearity { cfg, study, out } => {
            let base = cfg.resolve()?;
            let forms = match study {
                None => vec![base.train.formulation],
                Some(FormulationChoice::RaySet) => vec![Formulation::RaySet],
                Some(FormulationChoice::SingleRay) => vec![Formulation::SingleRay],
                Some(FormulationChoice::Both) => vec![Formulation::RaySet, Formulation::SingleRay],
            };
            let mut studies = Vec::new();
            for f in forms {
                let mut c = base.clone();
                c.train.formulation = f;
                let s = harness::run_linearity_study(&c)?;
                eprintln!(
                    "{f}: pcc {:.4} slope {:.4} final psnr {:.2}",
                    s.report.pcc,
                    s.report.slope,
                    s.final_psnr()
                );
                studies.push(s);
            }
            write_jsonl(&out.join("linearity.jsonl"), &studies)
        }
        Command::Compare { cfg, seeds, out } => {
            let base = cfg.resolve()?;
            let configs: Vec<RunConfig> = seeds
                .iter()
                .flat_map(|&seed| {
                    Variant::ALL.iter().map(move |&variant| (seed, variant))
                })
                .map(|(seed, variant)| RunConfig {
                    seed,
                    variant,
                    ..base.clone()
                })
                .collect();
            let rows = harness::run_variant_comparison(&configs)?;
            println!("{:<18}{:>6}{:>9}{:>9}{:>8}{:>9}{:>9}{:>7}{:>8}", "variant", "seed", "psnr", "psnr_var", "ssim", "acc_cm", "comp_cm", "c.r.", "path_m");
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
            for r in &rows {
                println!(
                    "{:<18}{:>6}{:>9.2}{:>9.2}{:>8.3}{:>9}{:>9}{:>7}{:>8.2}",
                    r.variant.to_string(),
                    r.seed,
                    r.psnr,
                    r.psnr_variance,
                    r.ssim,
                    opt(r.accuracy_cm),
                    opt(r.completion_cm),
                    opt(r.completion_ratio),
                    r.path_length
                );
            }
            write_jsonl(&out.join("comparison.jsonl"), &rows)
        }
        Command::AblateIters { cfg, grid, out } => {
            let rows = harness::run_ablation_iters(&cfg.resolve()?, &grid)?;
            for r in &rows {
                print_json(r)?;
            }
            write_jsonl(&out.join("ablate_iters.jsonl"), &rows)
        }
        Command::AblateNoise { cfg, grid, out } => {
            let rows = harness::run_ablation_noise(&cfg.resolve()?, &grid)?;
            for r in &rows {
                print_json(r)?;
            }
            write_jsonl(&out.join("ablate_noise.jsonl"), &rows)
        }
        Command::Eval { cfg, checkpoint, out } => {
            let config = cfg.resolve()?;
            let params = FieldParams::load(&checkpoint)?;
            let (views, image, geometry) = harness::evaluate_checkpoint(&config, &params)?;
            #[derive(Serialize)]
            struct EvalOut<'a> {
                image: &'a harness::ImageSummary,
                geometry: &'a Option<nbv_core::metrics::GeometryMetrics>,
                views: &'a [harness::ViewEval],
            }
            let result = EvalOut {
                image: &image,
                geometry: &geometry,
                views: &views,
            };
            if let Some(dir) = out {
                write_jsonl(&dir.join("eval.jsonl"), std::slice::from_ref(&result))?;
            }
            print_json(&serde_json::json!({ "image": image, "geometry": geometry }))
        }
        Command::Export { run, out } => {
            let report = RunReport::load_run_dir(&run)?;
            let manifest = harness::export_run_artifacts(&report, &out)?;
            eprintln!("exported {} files to {}", manifest.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
