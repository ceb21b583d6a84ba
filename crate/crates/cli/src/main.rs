use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kdia::fedavg::run_fedavg;
use kdia::generator::GeneratorParams;
use kdia::harness::{
    feature_similarity, gradcheck_suite, parse_config, sweep, train_centralized, write_metrics, write_summary, ConfigArgs,
    ExperimentConfig, SweepAxis,
};
use kdia::nn::checkpoint;
use kdia::orchestrator::{build_task, run_experiment_with};

#[derive(Parser)]
#[command(name = "kdia", version, about = "Federated learning with teacher/student aggregation and self-distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigArgs,
}

impl Common {
    fn resolve(self) -> Result<ExperimentConfig> {
        Ok(parse_config(self.config.as_deref(), self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment per configured seed.
    Run {
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the experiment once per value of one axis.
    Sweep {
        /// One of N, C, beta, mode.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-class similarity between generated and real features.
    Similarity {
        /// Generator checkpoint; trains one through a full run when absent.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Epochs for the centrally trained reference model.
        #[arg(long, default_value_t = 20)]
        central_epochs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Plain FedAvg reference run.
    FedavgRef {
        #[arg(long, default_value = "runs/fedavg")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn seed_dir(out: &Path, seed: u64, multi: bool) -> PathBuf {
    if multi {
        out.join(format!("seed={seed}"))
    } else {
        out.to_path_buf()
    }
}

fn cmd_run(cfg: ExperimentConfig, out: &Path, quiet: bool) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_args().to_toml())?;
    let multi = cfg.seeds.len() > 1;
    for &seed in &cfg.seeds {
        let dir = seed_dir(out, seed, multi);
        fs::create_dir_all(&dir)?;
        let report = run_experiment_with(&cfg, seed, |m| {
            if !quiet {
                eprintln!(
                    "seed {seed} round {:>4}  student {:.4}  teacher {:.4}  ce {:.4}  kd {:.4}  gen {:.4}",
                    m.round, m.student_acc, m.teacher_acc, m.loss_ce, m.loss_kd, m.loss_gen
                );
            }
        })?;
        write_metrics(&report.metrics, dir.join("metrics.csv"))?;
        write_summary(&report, dir.join("summary.json"))?;
        checkpoint::save(&report.final_model, dir.join("final.kdia"))?;
        if let Some(g) = &report.generator {
            checkpoint::save(g.model(), dir.join("generator.kdia"))?;
        }
        println!(
            "seed {seed}: best student {:.4} (round {}), best teacher {:.4} (round {}), final model {:?}",
            report.best_student_acc,
            report.best_student_round,
            report.best_teacher_acc,
            report.best_teacher_round,
            report.final_choice
        );
    }
    Ok(())
}

fn cmd_similarity(cfg: ExperimentConfig, generator: Option<PathBuf>, central_epochs: usize, out: Option<PathBuf>) -> Result<()> {
    let seed = cfg.seeds[0];
    let gen = match generator {
        Some(path) => GeneratorParams::from_model(checkpoint::load(&path)?, cfg.gen.noise_dim, cfg.data.n_classes)?,
        None => {
            if !cfg.use_generator() {
                bail!("the generator is disabled in this config; pass --generator or enable it");
            }
            let report = run_experiment_with(&cfg, seed, |_| {})?;
            report.generator.context("run produced no generator")?
        }
    };
    let task = build_task(&cfg, seed)?;
    let reference = train_centralized(&cfg, &task.train, central_epochs, seed)?;
    let sims = feature_similarity(&gen, &reference, &task.test, seed)?;
    let mut text = String::from("class,similarity\n");
    for (c, s) in sims.iter().enumerate() {
        text.push_str(&format!("{c},{s:.6}\n"));
        println!("class {c}: {s:.4}");
    }
    if let Some(path) = out {
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_fedavg(cfg: ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let multi = cfg.seeds.len() > 1;
    for &seed in &cfg.seeds {
        let dir = seed_dir(out, seed, multi);
        fs::create_dir_all(&dir)?;
        let report = run_fedavg(&cfg, seed)?;
        let mut text = String::from("round,acc\n");
        for (t, a) in report.accuracies.iter().enumerate() {
            text.push_str(&format!("{t},{a:.6}\n"));
        }
        fs::write(dir.join("accuracy.csv"), text)?;
        checkpoint::save(&report.model, dir.join("model.kdia"))?;
        println!("seed {seed}: best accuracy {:.4}", report.best_acc());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { out, quiet, common } => cmd_run(common.resolve()?, &out, quiet)?,
        Command::Sweep {
            axis,
            values,
            out,
            common,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let mut base = match &common.config {
                Some(p) => ConfigArgs::from_file(p)?,
                None => ConfigArgs::default(),
            }
            .overlay(common.overrides);
            if let Ok(v) = std::env::var(kdia::harness::config::SEED_ENV) {
                base.seeds = Some(vec![v.trim().parse().context("KDIA_SEED must be an unsigned integer")?]);
            }
            for p in sweep(&base, axis, &values, &out)? {
                println!(
                    "{}={} seed {}: student {:.4} teacher {:.4} -> {}",
                    axis,
                    p.value,
                    p.seed,
                    p.best_student_acc,
                    p.best_teacher_acc,
                    p.path.display()
                );
            }
        }
        Command::Similarity {
            generator,
            central_epochs,
            out,
            common,
        } => cmd_similarity(common.resolve()?, generator, central_epochs, out)?,
        Command::Gradcheck { instances, seed } => {
            let mut ok = true;
            for r in gradcheck_suite(instances, seed)? {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status} {:<10} max rel err {:.3e} (< {:.0e}, {} instances)",
                    r.name, r.max_rel_error, r.threshold, r.instances
                );
                ok &= r.passed();
            }
            return Ok(ok);
        }
        Command::FedavgRef { out, common } => cmd_fedavg(common.resolve()?, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
