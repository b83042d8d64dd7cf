//! End-to-end experiment runs: load a task stream, train one network per
//! task, merge, then evaluate selection and accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{train_task, Architecture, InitConfig, TaskSnapshot, TrainConfig, TrainSummary, VariationalNet};
use crate::datasets::{
    self, load_mnist_dir, make_permuted_tasks, make_split_tasks, subsample, two_patterns, Dataset, Grouping,
    TaskStream,
};
use crate::inference::{accuracy, draw_probe, predict_with, select_task, UncertaintyMeasure};
use crate::mixture::{count_parameters, extract_solution, merge_models, MergeConfig, MergeStats, MergedModel, ParameterCounts, TaskSolution};
use crate::numerics::{derive_seed, RngStream};
use crate::{Error, Result, TaskId};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    SplitMnist,
    PermutedMnist,
    SplitUcr,
}

impl ExperimentKind {
    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            Self::SplitMnist => vec![10, 10],
            Self::PermutedMnist => vec![50, 50],
            Self::SplitUcr => vec![200, 200],
        }
    }

    pub fn default_subsample(self) -> f64 {
        match self {
            Self::SplitMnist | Self::PermutedMnist => 0.2,
            Self::SplitUcr => 1.0,
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "split_mnist" => Ok(Self::SplitMnist),
            "permuted_mnist" => Ok(Self::PermutedMnist),
            "split_ucr" => Ok(Self::SplitUcr),
            other => Err(Error::Config(format!("unknown experiment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Train every task, then merge once.
    #[default]
    Parallel,
    /// Merge each new task into the model as soon as it is trained.
    Sequential,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Self::Parallel),
            "sequential" => Ok(Self::Sequential),
            other => Err(Error::Config(format!("unknown merge mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub n_tasks: usize,
    /// Hidden layer widths; the experiment's default when absent.
    pub hidden: Option<Vec<usize>>,
    pub train: TrainConfig,
    pub init: InitConfig,
    pub merge: MergeConfig,
    /// Probe points per selection.
    pub probe_size: usize,
    /// Monte-Carlo samples per candidate during selection.
    pub mc_samples: usize,
    /// Monte-Carlo samples when predicting whole test sets.
    pub predict_samples: usize,
    pub uncertainty: UncertaintyMeasure,
    pub mode: MergeMode,
    pub seed: u64,
    /// Fraction of each task's training rows kept; the experiment's default
    /// when absent.
    pub subsample: Option<f64>,
    /// Selection trials, each with fresh probe sets.
    pub trials: usize,
    pub grouping: Grouping,
    /// Use only classes `0..class_limit`, e.g. 9 digits for three tasks.
    pub class_limit: Option<usize>,
    /// Start every task's network from the same initial weights.
    pub shared_init: bool,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::SplitMnist,
            n_tasks: 5,
            hidden: None,
            train: TrainConfig::default(),
            init: InitConfig::default(),
            merge: MergeConfig::default(),
            probe_size: 200,
            mc_samples: 200,
            predict_samples: 20,
            uncertainty: UncertaintyMeasure::Variance,
            mode: MergeMode::Parallel,
            seed: 0,
            subsample: None,
            trials: 10,
            grouping: Grouping::Contiguous,
            class_limit: None,
            shared_init: true,
            data_dir: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, n_tasks: usize) -> Self {
        Self {
            experiment,
            n_tasks,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| self.experiment.default_hidden())
    }

    pub fn subsample_fraction(&self) -> f64 {
        self.subsample.unwrap_or_else(|| self.experiment.default_subsample())
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(datasets::data_root)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_tasks == 0 {
            return Err(Error::Config("n_tasks must be at least 1".into()));
        }
        if self.probe_size == 0 || self.mc_samples < 2 || self.predict_samples < 2 {
            return Err(Error::Config(
                "probe_size must be positive and sample counts at least 2".into(),
            ));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        let f = self.subsample_fraction();
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("subsample must be in (0, 1], got {f}")));
        }
        Ok(())
    }
}

// Independent random streams for each stage of a run.
const STREAM_DATA: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_MERGE: u64 = 4;
const STREAM_PREDICT: u64 = 5;
const STREAM_PROBE: u64 = 6;

fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    derive_seed(derive_seed(seed, stream), index)
}

/// Where the data came from, recorded in reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSource {
    pub name: String,
    pub path: Option<PathBuf>,
    pub generated: bool,
}

/// Loads the experiment's base dataset. Two Patterns falls back to the
/// built-in generator when the archive files are absent.
pub fn load_dataset(config: &ExperimentConfig) -> Result<(Dataset, DataSource)> {
    let root = config.data_root();
    match config.experiment {
        ExperimentKind::SplitMnist | ExperimentKind::PermutedMnist => {
            let dir = datasets::mnist_dir(&root);
            let data = load_mnist_dir(&dir)?;
            Ok((
                data,
                DataSource {
                    name: "mnist".into(),
                    path: Some(dir),
                    generated: false,
                },
            ))
        }
        ExperimentKind::SplitUcr => {
            let (train, test) = datasets::two_patterns_paths(&root);
            if train.exists() && test.exists() {
                let data = datasets::load_ucr_pair(&train, &test)?;
                let dir = train.parent().map(Path::to_path_buf);
                Ok((
                    data,
                    DataSource {
                        name: "two_patterns".into(),
                        path: dir,
                        generated: false,
                    },
                ))
            } else {
                Ok((
                    two_patterns::dataset(stream_seed(config.seed, STREAM_DATA, 0))?,
                    DataSource {
                        name: "two_patterns".into(),
                        path: None,
                        generated: true,
                    },
                ))
            }
        }
    }
}

/// Builds the task stream for `config` from an already loaded dataset.
pub fn build_stream(config: &ExperimentConfig, data: &Dataset) -> Result<TaskStream> {
    let restricted;
    let data = match config.class_limit {
        Some(n) => {
            restricted = data.restrict_classes(n)?;
            &restricted
        }
        None => data,
    };
    let mut stream = match config.experiment {
        ExperimentKind::SplitMnist | ExperimentKind::SplitUcr => make_split_tasks(data, config.n_tasks, config.grouping)?,
        ExperimentKind::PermutedMnist => {
            make_permuted_tasks(data, config.n_tasks, stream_seed(config.seed, STREAM_DATA, 1))?
        }
    };
    let fraction = config.subsample_fraction();
    for task in &mut stream.tasks {
        *task = subsample(task, fraction, stream_seed(config.seed, STREAM_DATA, 100 + task.task_id as u64))?;
    }
    Ok(stream)
}

pub fn load_stream(config: &ExperimentConfig) -> Result<(TaskStream, DataSource)> {
    let (data, source) = load_dataset(config)?;
    Ok((build_stream(config, &data)?, source))
}

/// Architecture shared by every task of the stream.
pub fn stream_architecture(config: &ExperimentConfig, stream: &TaskStream) -> Result<Architecture> {
    let first = stream
        .tasks
        .first()
        .ok_or_else(|| Error::Config("empty task stream".into()))?;
    let output = stream.tasks.iter().map(|t| t.output_width()).max().unwrap_or(2);
    Architecture::mlp(first.input_dim(), &config.hidden_sizes(), output)
}

#[derive(Debug, Clone)]
pub struct TrainedStream {
    pub arch: Architecture,
    pub snapshots: Vec<TaskSnapshot>,
    pub summaries: Vec<TrainSummary>,
    pub seconds: Vec<f64>,
}

/// Trains one network per task. Each task has its own seeds, so the result
/// does not depend on scheduling.
pub fn train_stream(config: &ExperimentConfig, stream: &TaskStream) -> Result<TrainedStream> {
    let arch = stream_architecture(config, stream)?;
    let results: Vec<Result<(TaskSnapshot, TrainSummary, f64)>> = stream
        .tasks
        .par_iter()
        .map(|task| {
            let start = Instant::now();
            let init_index = if config.shared_init { 0 } else { task.task_id as u64 };
            let mut init_rng = RngStream::new(stream_seed(config.seed, STREAM_INIT, init_index));
            let net = VariationalNet::new(arch.clone(), &config.init, &mut init_rng)?;
            let train = TrainConfig {
                seed: stream_seed(config.seed ^ config.train.seed, STREAM_TRAIN, task.task_id as u64),
                ..config.train.clone()
            };
            let trained = train_task(net, task, &train)?;
            Ok((trained.snapshot, trained.summary, start.elapsed().as_secs_f64()))
        })
        .collect();
    let mut out = TrainedStream {
        arch,
        snapshots: Vec::new(),
        summaries: Vec::new(),
        seconds: Vec::new(),
    };
    for r in results {
        let (s, summary, secs) = r?;
        out.snapshots.push(s);
        out.summaries.push(summary);
        out.seconds.push(secs);
    }
    Ok(out)
}

/// Merges trained snapshots in the given mode.
pub fn merge_snapshots(
    snapshots: &[TaskSnapshot],
    mode: MergeMode,
    merge: &MergeConfig,
    seed: u64,
) -> Result<(MergedModel, MergeStats)> {
    match mode {
        MergeMode::Parallel => merge_models(None, snapshots, merge, stream_seed(seed, STREAM_MERGE, 0)),
        MergeMode::Sequential => {
            let mut model: Option<MergedModel> = None;
            let mut stats = MergeStats::default();
            for (i, s) in snapshots.iter().enumerate() {
                let (next, st) = merge_models(model.as_ref(), std::slice::from_ref(s), merge, stream_seed(seed, STREAM_MERGE, i as u64))?;
                stats.pruned_components += st.pruned_components;
                stats.degenerate_fits += st.degenerate_fits;
                model = Some(next);
            }
            model
                .map(|m| (m, stats))
                .ok_or_else(|| Error::Merge("nothing to merge".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: TaskId,
    pub label_map: Vec<usize>,
    pub train_rows: usize,
    pub test_rows: usize,
    /// The task's own network, before merging.
    pub pre_merge_accuracy: f64,
    /// The task's extracted solution, with the task given.
    pub post_merge_accuracy: f64,
    /// The solution chosen by uncertainty in the first trial.
    pub final_accuracy: f64,
    pub chosen_first_trial: TaskId,
    pub correct_selections: usize,
    /// Mean uncertainty of every solution on this task's probes, per trial 0.
    pub uncertainties: Vec<(TaskId, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub load_s: f64,
    pub train_s: f64,
    pub merge_s: f64,
    pub test_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub data: DataSource,
    pub architecture: String,
    pub tasks: Vec<TaskReport>,
    pub average_accuracy: f64,
    pub average_pre_merge_accuracy: f64,
    pub average_post_merge_accuracy: f64,
    /// `selection[i][j]`: trials in which task `i`'s probes chose solution `j`.
    pub selection: Vec<Vec<usize>>,
    pub selection_rate: f64,
    pub parameters: ParameterCounts,
    /// `components[c]`: number of weights with `c` mixture components.
    pub components: Vec<usize>,
    pub pruned_components: usize,
    pub degenerate_fits: usize,
    pub train_summaries: Vec<TrainSummary>,
    pub timings: PhaseTimings,
    /// Final predictions per task (global labels), for recomputing accuracy.
    #[serde(skip)]
    pub predictions: Vec<TaskPredictions>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskPredictions {
    pub task_id: TaskId,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl RunReport {
    /// The report with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> RunReport {
        RunReport {
            timings: PhaseTimings::default(),
            ..self.clone()
        }
    }

    pub fn recomputed_average_accuracy(&self) -> f64 {
        mean(self.predictions.iter().map(|p| accuracy(&p.predicted, &p.truth)))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Test-phase work: selection trials and accuracies.
pub struct Evaluation {
    pub tasks: Vec<TaskReport>,
    pub selection: Vec<Vec<usize>>,
    pub predictions: Vec<TaskPredictions>,
}

/// Runs the selection trials and accuracy measurements for `model`.
/// `snapshots` are the pre-merge networks (same order as the stream).
pub fn evaluate(
    config: &ExperimentConfig,
    stream: &TaskStream,
    model: &MergedModel,
    snapshots: &[TaskSnapshot],
) -> Result<Evaluation> {
    let ids = model.task_ids();
    let column: BTreeMap<TaskId, usize> = ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let mut selection = vec![vec![0usize; ids.len()]; stream.len()];
    let mut first_choice = Vec::with_capacity(stream.len());
    let mut first_scores = Vec::with_capacity(stream.len());
    for (row, task) in stream.tasks.iter().enumerate() {
        for trial in 0..config.trials {
            let mut rng = RngStream::new(stream_seed(
                config.seed,
                STREAM_PROBE,
                (trial as u64) << 32 | task.task_id as u64,
            ));
            let probe = draw_probe(&task.test_x, config.probe_size, &mut rng);
            let report = select_task(model, &probe, config.mc_samples, config.uncertainty, &mut rng)?;
            selection[row][column[&report.chosen]] += 1;
            if trial == 0 {
                first_choice.push(report.chosen);
                first_scores.push(report.uncertainties());
            }
        }
    }

    // Every prediction of task t's test set reuses one noise stream, so
    // pre- and post-merge accuracies differ only through the weights.
    let predict = |solution: &TaskSolution, task_id: TaskId, x| {
        let mut rng = RngStream::new(stream_seed(config.seed, STREAM_PREDICT, task_id as u64));
        predict_with(solution, x, config.predict_samples, &mut rng)
    };
    let by_id: BTreeMap<TaskId, &TaskSnapshot> = snapshots.iter().map(|s| (s.task_id, s)).collect();
    let mut tasks = Vec::with_capacity(stream.len());
    let mut predictions = Vec::with_capacity(stream.len());
    for (row, task) in stream.tasks.iter().enumerate() {
        let truth = task.global_test_labels();
        let pre_merge_accuracy = match by_id.get(&task.task_id) {
            Some(s) => accuracy(&predict(&TaskSolution::from_snapshot(s), task.task_id, &task.test_x)?, &truth),
            None => f64::NAN,
        };
        let own = predict(&extract_solution(model, task.task_id)?, task.task_id, &task.test_x)?;
        let post_merge_accuracy = accuracy(&own, &truth);
        let chosen = first_choice[row];
        let predicted = if chosen == task.task_id {
            own
        } else {
            predict(&extract_solution(model, chosen)?, task.task_id, &task.test_x)?
        };
        tasks.push(TaskReport {
            task_id: task.task_id,
            label_map: task.label_map.clone(),
            train_rows: task.train_x.rows(),
            test_rows: task.test_x.rows(),
            pre_merge_accuracy,
            post_merge_accuracy,
            final_accuracy: accuracy(&predicted, &truth),
            chosen_first_trial: chosen,
            correct_selections: column.get(&task.task_id).map_or(0, |&c| selection[row][c]),
            uncertainties: first_scores[row].clone(),
        });
        predictions.push(TaskPredictions {
            task_id: task.task_id,
            truth,
            predicted,
        });
    }
    Ok(Evaluation {
        tasks,
        selection,
        predictions,
    })
}

/// Assembles a report from the stages of a run.
pub fn build_report(
    config: &ExperimentConfig,
    data: DataSource,
    model: &MergedModel,
    trained: &TrainedStream,
    stats: &MergeStats,
    eval: Evaluation,
    timings: PhaseTimings,
) -> RunReport {
    let total_correct: usize = eval.tasks.iter().map(|t| t.correct_selections).sum();
    let total_trials = eval.tasks.len() * config.trials;
    RunReport {
        format_version: REPORT_VERSION,
        config: config.clone(),
        data,
        architecture: model.arch.to_string(),
        average_accuracy: mean(eval.tasks.iter().map(|t| t.final_accuracy)),
        average_pre_merge_accuracy: mean(eval.tasks.iter().map(|t| t.pre_merge_accuracy)),
        average_post_merge_accuracy: mean(eval.tasks.iter().map(|t| t.post_merge_accuracy)),
        selection_rate: if total_trials == 0 {
            0.0
        } else {
            total_correct as f64 / total_trials as f64
        },
        tasks: eval.tasks,
        selection: eval.selection,
        parameters: count_parameters(model),
        components: model.component_histogram(),
        pruned_components: stats.pruned_components,
        degenerate_fits: stats.degenerate_fits,
        train_summaries: trained.summaries.clone(),
        timings,
        predictions: eval.predictions,
    }
}

/// Everything a run produces, for callers that want more than the report.
pub struct RunArtifacts {
    pub report: RunReport,
    pub model: MergedModel,
    pub snapshots: Vec<TaskSnapshot>,
    pub stream: TaskStream,
}

pub fn run_experiment_full(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate().map_err(|e| e.in_phase("config"))?;
    let t = Instant::now();
    let (stream, source) = load_stream(config).map_err(|e| e.in_phase("load"))?;
    let load_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let trained = train_stream(config, &stream).map_err(|e| e.in_phase("train"))?;
    let train_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (model, stats) =
        merge_snapshots(&trained.snapshots, config.mode, &config.merge, config.seed).map_err(|e| e.in_phase("merge"))?;
    let merge_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let eval = evaluate(config, &stream, &model, &trained.snapshots).map_err(|e| e.in_phase("test"))?;
    let test_s = t.elapsed().as_secs_f64();

    let timings = PhaseTimings {
        load_s,
        train_s,
        merge_s,
        test_s,
    };
    let report = build_report(config, source, &model, &trained, &stats, eval, timings);
    if let Some(dir) = &config.out_dir {
        write_report(&report, dir).map_err(|e| e.in_phase("report"))?;
    }
    Ok(RunArtifacts {
        report,
        model,
        snapshots: trained.snapshots,
        stream,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    Ok(run_experiment_full(config)?.report)
}

/// Plain-text rendering: key/value header, then tables.
pub fn render_text(report: &RunReport) -> String {
    let c = &report.config;
    let mut s = String::new();
    let _ = writeln!(s, "format_version: {}", report.format_version);
    let _ = writeln!(s, "experiment: {:?}", c.experiment);
    let _ = writeln!(s, "data: {}{}", report.data.name, if report.data.generated { " (generated)" } else { "" });
    let _ = writeln!(s, "architecture: {}", report.architecture);
    let _ = writeln!(s, "tasks: {}", c.n_tasks);
    let _ = writeln!(s, "mode: {:?}", c.mode);
    let _ = writeln!(s, "uncertainty: {}", c.uncertainty);
    let _ = writeln!(s, "seed: {}", c.seed);
    let _ = writeln!(s, "subsample: {}", c.subsample_fraction());
    let _ = writeln!(s, "epochs: {}", c.train.epochs);
    let _ = writeln!(s, "probe_size: {}  mc_samples: {}  trials: {}", c.probe_size, c.mc_samples, c.trials);
    let _ = writeln!(s, "average_accuracy: {:.4}", report.average_accuracy);
    let _ = writeln!(s, "average_pre_merge_accuracy: {:.4}", report.average_pre_merge_accuracy);
    let _ = writeln!(s, "average_post_merge_accuracy: {:.4}", report.average_post_merge_accuracy);
    let _ = writeln!(s, "selection_rate: {:.3}", report.selection_rate);
    let p = &report.parameters;
    let _ = writeln!(s, "parameters: before {} after {} merged {}", p.before_merge, p.after_merge, p.merged);
    let _ = writeln!(s, "pruned_components: {}  degenerate_fits: {}", report.pruned_components, report.degenerate_fits);
    let t = &report.timings;
    let _ = writeln!(
        s,
        "timings_s: load {:.2} train {:.2} merge {:.2} test {:.2}",
        t.load_s, t.train_s, t.merge_s, t.test_s
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "task  labels            pre     post    final   chosen  correct");
    for r in &report.tasks {
        let _ = writeln!(
            s,
            "{:<5} {:<17} {:.4}  {:.4}  {:.4}  {:<7} {}/{}",
            r.task_id,
            format!("{:?}", r.label_map),
            r.pre_merge_accuracy,
            r.post_merge_accuracy,
            r.final_accuracy,
            r.chosen_first_trial,
            r.correct_selections,
            c.trials
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "selection (rows: probe task, columns: chosen solution)");
    for (i, row) in report.selection.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>3}")).collect();
        let _ = writeln!(s, "{i:<5}{}", cells.join(""));
    }
    let _ = writeln!(s);
    let hist: Vec<String> = report
        .components
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(k, n)| format!("{k}:{n}"))
        .collect();
    let _ = writeln!(s, "components per weight: {}", hist.join(" "));
    s
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `report.txt` and the CSV companions into `dir`.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("report.json"), &serde_json::to_vec_pretty(report)?)?;
    write_file(&dir.join("report.txt"), render_text(report).as_bytes())?;

    let mut acc = String::from("task,pre_merge,post_merge,final,chosen_first_trial,correct_selections\n");
    for t in &report.tasks {
        let _ = writeln!(
            acc,
            "{},{},{},{},{},{}",
            t.task_id, t.pre_merge_accuracy, t.post_merge_accuracy, t.final_accuracy, t.chosen_first_trial, t.correct_selections
        );
    }
    write_file(&dir.join("accuracy.csv"), acc.as_bytes())?;

    let mut sel = String::from("probe_task,chosen,count\n");
    for (i, row) in report.selection.iter().enumerate() {
        for (j, n) in row.iter().enumerate() {
            let _ = writeln!(sel, "{i},{j},{n}");
        }
    }
    write_file(&dir.join("selection.csv"), sel.as_bytes())?;

    let mut pred = String::from("task,index,truth,predicted\n");
    for p in &report.predictions {
        for (i, (t, y)) in p.truth.iter().zip(&p.predicted).enumerate() {
            let _ = writeln!(pred, "{},{i},{t},{y}", p.task_id);
        }
    }
    write_file(&dir.join("predictions.csv"), pred.as_bytes())
}

/// Reads back `predictions.csv` and recomputes the average accuracy.
pub fn recompute_average_accuracy(dir: &Path) -> Result<f64> {
    let path = dir.join("predictions.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut per_task: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: format!("not an integer: {s:?}"),
            })
        };
        if f.len() != 4 {
            return Err(Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: "expected 4 fields".into(),
            });
        }
        let e = per_task.entry(parse(f[0])?).or_default();
        e.0 += usize::from(parse(f[2])? == parse(f[3])?);
        e.1 += 1;
    }
    Ok(mean(per_task.values().map(|(c, n)| *c as f64 / *n as f64)))
}

/// One cell of the uncertainty grid: probes from `test_task` scored by
/// `solution`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub test_task: TaskId,
    pub solution: TaskId,
    pub uncertainty: f64,
    /// Per probe point: the largest mean class probability.
    pub mean_score: Vec<f64>,
    /// Per probe point: the variance of that class's probability.
    pub variance: Vec<f64>,
}

impl GridCell {
    pub fn mean_variance(&self) -> f64 {
        mean(self.variance.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyGrid {
    pub cells: Vec<GridCell>,
}

impl UncertaintyGrid {
    pub fn cell(&self, test_task: TaskId, solution: TaskId) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.test_task == test_task && c.solution == solution)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("test_task,solution,point,mean_score,variance\n");
        for c in &self.cells {
            for (i, (m, v)) in c.mean_score.iter().zip(&c.variance).enumerate() {
                let _ = writeln!(s, "{},{},{i},{m},{v}", c.test_task, c.solution);
            }
        }
        s
    }
}

/// The data behind an uncertainty heat map: every solution scored on probes
/// from every task.
pub fn report_uncertainty_grid(
    model: &MergedModel,
    stream: &TaskStream,
    p: usize,
    s: usize,
    kind: UncertaintyMeasure,
    seed: u64,
) -> Result<UncertaintyGrid> {
    let mut cells = Vec::new();
    for task in &stream.tasks {
        let mut rng = RngStream::new(stream_seed(seed, STREAM_PROBE, task.task_id as u64));
        let probe = draw_probe(&task.test_x, p, &mut rng);
        let report = select_task(model, &probe, s, kind, &mut rng)?;
        for score in report.scores {
            let (mean_score, variance) = (0..score.mean.rows())
                .map(|r| {
                    let row = score.mean.row(r);
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    (row[best], score.variance.get(r, best))
                })
                .unzip();
            cells.push(GridCell {
                test_task: task.task_id,
                solution: score.task_id,
                uncertainty: score.uncertainty,
                mean_score,
                variance,
            });
        }
    }
    Ok(UncertaintyGrid { cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub tasks: usize,
    pub hidden: Vec<usize>,
    pub train_s: f64,
    pub merge_s: f64,
    pub test_s: f64,
}

/// Wall-clock cost of each phase for each task count, everything else fixed.
/// The test phase is one selection over all solutions plus one prediction,
/// for each task's probe set.
pub fn timing_probe(config: &ExperimentConfig, task_counts: &[usize]) -> Result<Vec<TimingRow>> {
    let (data, _) = load_dataset(config).map_err(|e| e.in_phase("load"))?;
    let mut rows = Vec::with_capacity(task_counts.len());
    for &n in task_counts {
        if n == 0 {
            rows.push(TimingRow {
                tasks: 0,
                hidden: config.hidden_sizes(),
                train_s: 0.0,
                merge_s: 0.0,
                test_s: 0.0,
            });
            continue;
        }
        let cfg = ExperimentConfig {
            n_tasks: n,
            ..config.clone()
        };
        let stream = build_stream(&cfg, &data).map_err(|e| e.in_phase("load"))?;
        let t = Instant::now();
        let trained = train_stream(&cfg, &stream).map_err(|e| e.in_phase("train"))?;
        let train_s = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let (model, _) = merge_snapshots(&trained.snapshots, cfg.mode, &cfg.merge, cfg.seed).map_err(|e| e.in_phase("merge"))?;
        let merge_s = t.elapsed().as_secs_f64();
        let t = Instant::now();
        for task in &stream.tasks {
            let mut rng = RngStream::new(stream_seed(cfg.seed, STREAM_PROBE, task.task_id as u64));
            let probe = draw_probe(&task.test_x, cfg.probe_size, &mut rng);
            let report = select_task(&model, &probe, cfg.mc_samples, cfg.uncertainty, &mut rng).map_err(|e| e.in_phase("test"))?;
            predict_with(&extract_solution(&model, report.chosen)?, &probe, cfg.predict_samples, &mut rng)
                .map_err(|e| e.in_phase("test"))?;
        }
        let test_s = t.elapsed().as_secs_f64();
        rows.push(TimingRow {
            tasks: n,
            hidden: cfg.hidden_sizes(),
            train_s,
            merge_s,
            test_s,
        });
    }
    Ok(rows)
}
