use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crossmodal::harness::{emit_figures_data, object_seed, run_ablation, run_experiment, RunConfig, Stream};
use crossmodal::pushsim::{ground_truth_rollout_with_period, sample_push_action, TrueState};
use crossmodal::superquadric::{ems_fit, PointCloud};
use crossmodal::{Error, Result};

#[derive(Parser)]
#[command(name = "crossmodal", version, about = "Cross-modal shape-to-mass perception experiments")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed loop over the catalog with the cross-modal prior.
    Run,
    /// Paired runs with and without the cross-modal prior.
    Ablate,
    /// Plot-ready CSVs from a run directory.
    Figures {
        /// Run directory; defaults to the output directory.
        dir: Option<PathBuf>,
    },
    /// Fit a superquadric to one point cloud (.xyz or .sqpc).
    FitShape { cloud: PathBuf },
    /// Simulate one push on a catalog object and write its trajectory.
    PushDemo {
        /// Object name; the first catalog object by default.
        #[arg(long)]
        object: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Run => {
            let out = run_experiment(&cfg)?;
            let s = &out.summary;
            println!(
                "{} interactions, dataset {} ({:.1}% efficiency), catalog MSE {:.4} (gate-free {:.4})",
                s.interactions, s.dataset_size, s.efficiency, s.final_catalog_mse, s.final_shadow_catalog_mse
            );
            for f in &s.failures {
                eprintln!("failed: {f}");
            }
        }
        Command::Ablate => {
            let report = run_ablation(&cfg)?;
            let (with, without) = report.mean_sq_error_from(15);
            println!("final mass MSE from interaction 15: with prior {with:.4}, without {without:.4}");
        }
        Command::Figures { dir } => {
            let dir = dir.clone().unwrap_or(cfg.out_dir);
            for p in emit_figures_data(&dir)? {
                println!("{}", p.display());
            }
        }
        Command::FitShape { cloud } => {
            let points = PointCloud::load(cloud)?;
            let fit = ems_fit(&points, &cfg.ems, cfg.seed)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("fit.json");
            write_json(&path, &fit)?;
            println!(
                "eps=({:.3}, {:.3}) axes=({:.4}, {:.4}, {:.4}) converged={} -> {}",
                fit.shape.eps1,
                fit.shape.eps2,
                fit.shape.ax,
                fit.shape.ay,
                fit.shape.az,
                fit.converged,
                path.display()
            );
        }
        Command::PushDemo { object } => {
            let catalog = cfg.load_catalog()?;
            let index = match object {
                Some(name) => catalog.index_of(name).ok_or_else(|| Error::InvalidParameter(format!("no catalog object {name}")))?,
                None => 0,
            };
            let o = &catalog.objects[index];
            let action = sample_push_action(&o.true_shape, &o.true_pose, object_seed(cfg.seed, index, Stream::Action))?;
            let truth = TrueState {
                pose: o.true_pose,
                mass: o.true_mass,
            };
            let traj = ground_truth_rollout_with_period(
                &truth,
                &o.true_shape,
                &action,
                &cfg.friction,
                cfg.duration,
                cfg.period,
                &cfg.rollout_noise,
                object_seed(cfg.seed, index, Stream::Rollout),
            )?;
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join(format!("{}-trajectory.csv", o.name));
            traj.write_csv(fs::File::create(&path)?)?;
            println!("{} samples -> {}", traj.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
