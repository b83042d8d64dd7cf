use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cbln::experiment::{
    self, render_text, report_uncertainty_grid, run_experiment_full, timing_probe, write_report, ExperimentConfig,
    ExperimentKind, MergeMode, RunReport,
};
use cbln::inference::UncertaintyMeasure;
use cbln::mixture::count_parameters;
use cbln::persist::{load_model, save_model, save_snapshots};

#[derive(Parser)]
#[command(name = "cbln", version, about = "Continual learning with merged Bayesian networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, merge and evaluate; writes the report into --out.
    Run(RunArgs),
    /// Print a saved report and check its accuracy against the predictions.
    Report {
        /// Directory written by `run`.
        dir: PathBuf,
    },
    /// Run an experiment and save the merged model and task networks.
    Save {
        #[command(flatten)]
        run: RunArgs,
        /// Model file to write.
        #[arg(long)]
        model: PathBuf,
    },
    /// Load a model file and print its summary.
    Load {
        model: PathBuf,
    },
    /// Wall-clock per phase for several task counts.
    Timing {
        #[command(flatten)]
        run: RunArgs,
        /// Task counts to time.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        counts: Vec<usize>,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML file with experiment settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    experiment: Option<ExperimentKind>,
    #[arg(long)]
    tasks: Option<usize>,
    /// Hidden layer widths, e.g. 10,10.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mode: Option<MergeMode>,
    #[arg(long)]
    uncertainty: Option<UncertaintyMeasure>,
    #[arg(long)]
    probe_size: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of training rows kept per task.
    #[arg(long)]
    subsample: Option<f64>,
    /// Use only classes 0..N before splitting.
    #[arg(long)]
    class_limit: Option<usize>,
    /// Dataset root; defaults to $CBLN_DATA_DIR or ./data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the uncertainty grid (grid.csv) into --out.
    #[arg(long)]
    grid: bool,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.experiment {
            c.experiment = v;
        }
        if let Some(v) = self.tasks {
            c.n_tasks = v;
        }
        if let Some(v) = &self.hidden {
            c.hidden = Some(v.clone());
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            c.train.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.mode {
            c.mode = v;
        }
        if let Some(v) = self.uncertainty {
            c.uncertainty = v;
        }
        if let Some(v) = self.probe_size {
            c.probe_size = v;
        }
        if let Some(v) = self.mc_samples {
            c.mc_samples = v;
        }
        if let Some(v) = self.trials {
            c.trials = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.subsample {
            c.subsample = Some(v);
        }
        if let Some(v) = self.class_limit {
            c.class_limit = Some(v);
        }
        if let Some(v) = &self.data_dir {
            c.data_dir = Some(v.clone());
        }
        if let Some(v) = &self.out {
            c.out_dir = Some(v.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(args: &RunArgs) -> Result<experiment::RunArtifacts> {
    let config = args.config()?;
    let artifacts = run_experiment_full(&config)?;
    print!("{}", render_text(&artifacts.report));
    if args.grid {
        let Some(dir) = &config.out_dir else {
            bail!("--grid needs --out");
        };
        let grid = report_uncertainty_grid(
            &artifacts.model,
            &artifacts.stream,
            config.probe_size,
            config.mc_samples,
            config.uncertainty,
            config.seed,
        )?;
        let path = dir.join("grid.csv");
        std::fs::write(&path, grid.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(artifacts)
}

fn show_report(dir: &Path) -> Result<()> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: RunReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    print!("{}", render_text(&report));
    if dir.join("predictions.csv").exists() {
        let recomputed = experiment::recompute_average_accuracy(dir)?;
        println!("recomputed average_accuracy from predictions.csv: {recomputed:.4}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(&args).map(|_| ()),
        Command::Report { dir } => show_report(&dir),
        Command::Save { run: args, model } => run(&args).and_then(|a| {
            save_model(&a.model, &model)?;
            let snaps = model.with_extension("tasks.json");
            save_snapshots(&a.snapshots, &snaps)?;
            if let Some(dir) = &a.report.config.out_dir {
                write_report(&a.report, dir)?;
            }
            println!("saved {} and {}", model.display(), snaps.display());
            Ok(())
        }),
        Command::Load { model } => load_model(&model).map_err(Into::into).map(|m| {
            let p = count_parameters(&m);
            println!("architecture: {}", m.arch);
            println!("tasks: {:?}", m.task_ids());
            for (id, info) in &m.tasks {
                println!("  task {id}: labels {:?}", info.label_map);
            }
            println!("parameters: before {} after {} merged {}", p.before_merge, p.after_merge, p.merged);
        }),
        Command::Timing { run: args, counts } => args.config().and_then(|c| {
            let rows = timing_probe(&c, &counts)?;
            println!("tasks  hidden      train_s   merge_s   test_s");
            for r in rows {
                println!(
                    "{:<6} {:<11} {:>8.3} {:>9.3} {:>8.3}",
                    r.tasks,
                    format!("{:?}", r.hidden),
                    r.train_s,
                    r.merge_s,
                    r.test_s
                );
            }
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
