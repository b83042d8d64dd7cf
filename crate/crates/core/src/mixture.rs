//! Per-weight Gaussian mixtures and the merge that keeps them small.
//!
//! Each scalar weight of the merged model carries a mixture whose components
//! are task solutions, or clusters of task solutions that were found to be
//! redundant. Merging a set of input components for one weight:
//!
//! 1. draw the same number of points from every input Gaussian;
//! 2. fit a `K`-component GMM with EM, initialised at the inputs;
//! 3. drop fitted components whose weight is below `1 / (2K)`;
//! 4. assign each input's mean to its most responsible surviving component;
//! 5. inputs sharing a component collapse to the fitted Gaussian, inputs
//!    alone in theirs keep their original Gaussian.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{Architecture, TaskSnapshot};
use crate::numerics::{derive_seed, RngStream};
use crate::{Error, Result, TaskId};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// A fitted variance below this counts as a collapsed component.
pub const COLLAPSE_VAR: f64 = 1e-10;
const MAX_RESETS_PER_COMPONENT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: f64,
    pub var: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Log-likelihood of the samples before each M-step.
    pub log_likelihood: Vec<f64>,
    /// Number of collapsed-variance resets performed.
    pub resets: usize,
}

impl GmmFit {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    /// `ln(alpha_j) + ln N(x | mu_j, var_j)` for every component.
    fn weighted_log_densities(&self, x: f64, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let d = x - self.means[j];
            *o = self.alphas[j].ln() - 0.5 * (LN_2PI + self.vars[j].ln() + d * d / self.vars[j]);
        }
    }

    /// Index of the component with the largest responsibility for `x`.
    pub fn most_responsible(&self, x: f64) -> usize {
        let mut lp = vec![0.0; self.k()];
        self.weighted_log_densities(x, &mut lp);
        argmax(&lp)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EmInit {
    /// Start from the given `(mean, var)` pairs with uniform weights.
    Components(Vec<(f64, f64)>),
    /// Means at distinct random samples, variances at the sample variance;
    /// the best of `restarts` runs by final log-likelihood is kept.
    Random { restarts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the log-likelihood gain falls below `tol * |ll|`.
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

fn moments(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn run_em(samples: &[f64], mut fit: GmmFit, config: &EmConfig) -> Result<GmmFit> {
    let k = fit.k();
    let n = samples.len();
    let (_, sample_var) = moments(samples);
    let mut resp = vec![0.0; n * k];
    let mut resets = vec![0usize; k];

    for iter in 0..=config.max_iters {
        // E-step.
        let offset: Vec<f64> = (0..k)
            .map(|j| fit.alphas[j].ln() - 0.5 * (LN_2PI + fit.vars[j].ln()))
            .collect();
        let half_precision: Vec<f64> = fit.vars.iter().map(|v| 0.5 / v).collect();
        let mut ll = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let r = &mut resp[i * k..(i + 1) * k];
            let mut max = f64::NEG_INFINITY;
            for j in 0..k {
                let d = x - fit.means[j];
                r[j] = offset[j] - d * d * half_precision[j];
                max = max.max(r[j]);
            }
            let mut total = 0.0;
            for v in r.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            ll += max + total.ln();
            for v in r.iter_mut() {
                *v /= total;
            }
        }
        let converged = fit
            .log_likelihood
            .last()
            .is_some_and(|&prev| ll - prev < config.tol * prev.abs());
        fit.log_likelihood.push(ll);
        if converged || iter == config.max_iters {
            break;
        }

        // M-step.
        for j in 0..k {
            let mass: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            let alpha = mass / n as f64;
            if mass <= f64::MIN_POSITIVE {
                fit.alphas[j] = f64::MIN_POSITIVE;
                continue;
            }
            let mean = (0..n).map(|i| resp[i * k + j] * samples[i]).sum::<f64>() / mass;
            let var = (0..n)
                .map(|i| resp[i * k + j] * (samples[i] - mean).powi(2))
                .sum::<f64>()
                / mass;
            fit.alphas[j] = alpha;
            fit.means[j] = mean;
            fit.vars[j] = var;
            if var < COLLAPSE_VAR {
                resets[j] += 1;
                fit.resets += 1;
                if resets[j] > MAX_RESETS_PER_COMPONENT || sample_var < COLLAPSE_VAR {
                    return Err(Error::DegenerateFit(format!(
                        "component {j} keeps collapsing (variance {var:e})"
                    )));
                }
                fit.vars[j] = sample_var;
            }
        }
    }
    Ok(fit)
}

/// Fits a `k`-component univariate GMM to `samples` by EM.
pub fn em_fit(samples: &[f64], k: usize, init: &EmInit, config: &EmConfig, rng: &mut RngStream) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::Config("a mixture needs at least one component".into()));
    }
    if samples.len() < 10 * k {
        return Err(Error::Config(format!(
            "{} samples are too few for {k} components (need {})",
            samples.len(),
            10 * k
        )));
    }
    if let Some(x) = samples.iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("non-finite sample {x}")));
    }
    match init {
        EmInit::Components(start) => {
            if start.len() != k {
                return Err(Error::Config(format!(
                    "{} initial components for k = {k}",
                    start.len()
                )));
            }
            let (_, sample_var) = moments(samples);
            let fit = GmmFit {
                means: start.iter().map(|c| c.0).collect(),
                vars: start
                    .iter()
                    .map(|c| if c.1 >= COLLAPSE_VAR { c.1 } else { sample_var.max(COLLAPSE_VAR) })
                    .collect(),
                alphas: vec![1.0 / k as f64; k],
                log_likelihood: Vec::new(),
                resets: 0,
            };
            run_em(samples, fit, config)
        }
        EmInit::Random { restarts } => {
            let (_, sample_var) = moments(samples);
            let mut best: Option<GmmFit> = None;
            for _ in 0..(*restarts).max(1) {
                let picks = rng.sample_without_replacement(samples.len(), k);
                let fit = GmmFit {
                    means: picks.iter().map(|&i| samples[i]).collect(),
                    vars: vec![sample_var.max(COLLAPSE_VAR); k],
                    alphas: vec![1.0 / k as f64; k],
                    log_likelihood: Vec::new(),
                    resets: 0,
                };
                let fit = run_em(samples, fit, config)?;
                let better = best.as_ref().is_none_or(|b| {
                    fit.log_likelihood.last() > b.log_likelihood.last()
                });
                if better {
                    best = Some(fit);
                }
            }
            Ok(best.expect("at least one restart"))
        }
    }
}

/// Components of one weight's posterior plus which component each task uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMixture {
    pub components: Vec<GaussianComponent>,
    pub assignment: BTreeMap<TaskId, usize>,
}

impl PosteriorMixture {
    pub fn single(mean: f64, var: f64, tasks: impl IntoIterator<Item = TaskId>) -> Self {
        Self {
            components: vec![GaussianComponent {
                mean,
                var,
                weight: 1.0,
            }],
            assignment: tasks.into_iter().map(|t| (t, 0)).collect(),
        }
    }

    pub fn component_for(&self, task: TaskId) -> Option<&GaussianComponent> {
        self.assignment.get(&task).map(|&c| &self.components[c])
    }

    /// Input components for the next merge: one per stored component,
    /// carrying the tasks assigned to it.
    pub fn as_inputs(&self) -> Vec<MergeInput> {
        let mut inputs: Vec<MergeInput> = self
            .components
            .iter()
            .map(|c| MergeInput {
                mean: c.mean,
                var: c.var,
                tasks: Vec::new(),
            })
            .collect();
        for (&task, &c) in &self.assignment {
            inputs[c].tasks.push(task);
        }
        inputs
    }

    pub fn check_invariants(&self) -> Result<()> {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Merge(format!("mixture weights sum to {total}")));
        }
        let mut used = vec![false; self.components.len()];
        for &c in self.assignment.values() {
            *used.get_mut(c).ok_or_else(|| Error::Merge(format!("assignment to missing component {c}")))? = true;
        }
        if used.contains(&false) {
            return Err(Error::Merge("component without any task".into()));
        }
        if self.components.iter().any(|c| !(c.var > 0.0)) {
            return Err(Error::Merge("non-positive component variance".into()));
        }
        Ok(())
    }
}

/// One Gaussian entering a merge, with the tasks that currently use it.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeInput {
    pub mean: f64,
    pub var: f64,
    pub tasks: Vec<TaskId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmInitMode {
    /// EM starts at the input components.
    #[default]
    FromInputs,
    /// EM starts at random samples, best of three restarts.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    /// Points drawn from each input component; `N = K * samples_per_component`.
    pub samples_per_component: usize,
    pub em: EmConfig,
    pub init: EmInitMode,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            samples_per_component: 200,
            em: EmConfig::default(),
            init: EmInitMode::FromInputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMerge {
    pub mixture: PosteriorMixture,
    /// Fitted components removed by the `1 / (2K)` threshold.
    pub pruned: usize,
    /// The EM fit degenerated and the inputs were kept as they were.
    pub fell_back: bool,
}

fn keep_inputs(inputs: &[MergeInput]) -> PosteriorMixture {
    let n = inputs.len() as f64;
    PosteriorMixture {
        components: inputs
            .iter()
            .map(|i| GaussianComponent {
                mean: i.mean,
                var: i.var,
                weight: 1.0 / n,
            })
            .collect(),
        assignment: inputs
            .iter()
            .enumerate()
            .flat_map(|(c, i)| i.tasks.iter().map(move |&t| (t, c)))
            .collect(),
    }
}

/// Reduces the input components of one weight to a mixture of at most
/// `inputs.len()` components.
pub fn merge_weight(inputs: &[MergeInput], config: &MergeConfig, rng: &mut RngStream) -> Result<WeightMerge> {
    let k = inputs.len();
    if k == 0 {
        return Err(Error::Merge("no components to merge".into()));
    }
    if let Some(bad) = inputs.iter().find(|i| !(i.var > 0.0) || !i.mean.is_finite()) {
        return Err(Error::Domain(format!(
            "input component N({}, {}) is invalid",
            bad.mean, bad.var
        )));
    }
    if k == 1 {
        return Ok(WeightMerge {
            mixture: keep_inputs(inputs),
            pruned: 0,
            fell_back: false,
        });
    }

    let per = config.samples_per_component.max(10);
    let mut samples = Vec::with_capacity(per * k);
    for input in inputs {
        samples.extend(rng.sample_gaussian(input.mean, input.var.sqrt(), per)?);
    }
    let init = match config.init {
        EmInitMode::FromInputs => EmInit::Components(inputs.iter().map(|i| (i.mean, i.var)).collect()),
        EmInitMode::Random => EmInit::Random { restarts: 3 },
    };
    let fit = match em_fit(&samples, k, &init, &config.em, rng) {
        Ok(fit) => fit,
        Err(Error::DegenerateFit(_)) => {
            return Ok(WeightMerge {
                mixture: keep_inputs(inputs),
                pruned: 0,
                fell_back: true,
            })
        }
        Err(e) => return Err(e),
    };

    // Prune, then renormalize the survivors.
    let threshold = 1.0 / (2.0 * k as f64);
    let survivors: Vec<usize> = (0..k).filter(|&j| fit.alphas[j] >= threshold).collect();
    if survivors.is_empty() {
        return Err(Error::Merge("every fitted component was pruned".into()));
    }
    let kept_mass: f64 = survivors.iter().map(|&j| fit.alphas[j]).sum();
    let reduced = GmmFit {
        means: survivors.iter().map(|&j| fit.means[j]).collect(),
        vars: survivors.iter().map(|&j| fit.vars[j]).collect(),
        alphas: survivors.iter().map(|&j| fit.alphas[j] / kept_mass).collect(),
        log_likelihood: Vec::new(),
        resets: 0,
    };

    // Cluster the input means; clusters are ordered by their first input.
    let cluster_of: Vec<usize> = inputs.iter().map(|i| reduced.most_responsible(i.mean)).collect();
    let mut clusters: Vec<(usize, Vec<usize>)> = Vec::new();
    for (input, &c) in cluster_of.iter().enumerate() {
        match clusters.iter_mut().find(|(fitted, _)| *fitted == c) {
            Some((_, members)) => members.push(input),
            None => clusters.push((c, vec![input])),
        }
    }

    let n_out = clusters.len() as f64;
    let mut components = Vec::with_capacity(clusters.len());
    let mut assignment = BTreeMap::new();
    for (out, (fitted, members)) in clusters.iter().enumerate() {
        let (mean, var) = if let [only] = members.as_slice() {
            (inputs[*only].mean, inputs[*only].var)
        } else {
            (reduced.means[*fitted], reduced.vars[*fitted])
        };
        components.push(GaussianComponent {
            mean,
            var,
            weight: 1.0 / n_out,
        });
        for &m in members {
            for &t in &inputs[m].tasks {
                assignment.insert(t, out);
            }
        }
    }
    Ok(WeightMerge {
        mixture: PosteriorMixture {
            components,
            assignment,
        },
        pruned: k - survivors.len(),
        fell_back: false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    /// Local class index to global label.
    pub label_map: Vec<usize>,
}

impl TaskInfo {
    pub fn classes(&self) -> usize {
        self.label_map.len()
    }
}

/// All tasks learned so far, stored as one mixture per scalar weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedModel {
    pub arch: Architecture,
    pub weights: Vec<PosteriorMixture>,
    pub tasks: BTreeMap<TaskId, TaskInfo>,
}

impl MergedModel {
    pub fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.keys().copied().collect()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// `hist[c]` is the number of weights with `c` components.
    pub fn component_histogram(&self) -> Vec<usize> {
        let max = self.weights.iter().map(|w| w.components.len()).max().unwrap_or(0);
        let mut hist = vec![0; max + 1];
        for w in &self.weights {
            hist[w.components.len()] += 1;
        }
        hist
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.weights.len() != self.arch.num_weights() {
            return Err(Error::Merge(format!(
                "{} mixtures for {} weights",
                self.weights.len(),
                self.arch.num_weights()
            )));
        }
        for w in &self.weights {
            w.check_invariants()?;
            if w.assignment.len() != self.tasks.len() || !w.assignment.keys().all(|t| self.tasks.contains_key(t)) {
                return Err(Error::Merge("mixture task set differs from the registry".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct MergeStats {
    pub pruned_components: usize,
    pub degenerate_fits: usize,
}

/// Merges new task snapshots into `existing` (or into an empty model).
/// Every weight is merged independently with its own RNG stream derived from
/// `seed` and the weight index.
pub fn merge_models(
    existing: Option<&MergedModel>,
    snapshots: &[TaskSnapshot],
    config: &MergeConfig,
    seed: u64,
) -> Result<(MergedModel, MergeStats)> {
    let arch = match (existing, snapshots.first()) {
        (Some(m), _) => m.arch.clone(),
        (None, Some(s)) => s.arch.clone(),
        (None, None) => return Err(Error::Merge("nothing to merge".into())),
    };
    let mut tasks = existing.map(|m| m.tasks.clone()).unwrap_or_default();
    for s in snapshots {
        if s.arch != arch {
            return Err(Error::Shape(format!(
                "task {} has architecture {}, model has {arch}",
                s.task_id, s.arch
            )));
        }
        if s.mean.len() != arch.num_weights() || s.sigma.len() != arch.num_weights() {
            return Err(Error::Shape(format!("task {} snapshot has the wrong length", s.task_id)));
        }
        if tasks
            .insert(s.task_id, TaskInfo { label_map: s.label_map.clone() })
            .is_some()
        {
            return Err(Error::Config(format!("task {} is already in the model", s.task_id)));
        }
    }

    let results: Vec<Result<WeightMerge>> = (0..arch.num_weights())
        .into_par_iter()
        .map(|w| {
            let mut inputs = existing.map(|m| m.weights[w].as_inputs()).unwrap_or_default();
            inputs.extend(snapshots.iter().map(|s| MergeInput {
                mean: s.mean[w],
                var: s.sigma[w] * s.sigma[w],
                tasks: vec![s.task_id],
            }));
            let mut rng = RngStream::new(derive_seed(seed, w as u64));
            merge_weight(&inputs, config, &mut rng)
        })
        .collect();

    let mut stats = MergeStats::default();
    let mut weights = Vec::with_capacity(results.len());
    for r in results {
        let m = r?;
        stats.pruned_components += m.pruned;
        stats.degenerate_fits += usize::from(m.fell_back);
        weights.push(m.mixture);
    }
    Ok((MergedModel { arch, weights, tasks }, stats))
}

/// Per-weight Gaussians of one task, as used for prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSolution {
    pub task_id: TaskId,
    pub arch: Architecture,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub label_map: Vec<usize>,
}

impl TaskSolution {
    pub fn from_snapshot(s: &TaskSnapshot) -> Self {
        Self {
            task_id: s.task_id,
            arch: s.arch.clone(),
            mean: s.mean.clone(),
            var: s.sigma.iter().map(|x| x * x).collect(),
            label_map: s.label_map.clone(),
        }
    }
}

pub fn extract_solution(model: &MergedModel, task: TaskId) -> Result<TaskSolution> {
    let info = model.tasks.get(&task).ok_or(Error::UnknownTask(task))?;
    let mut mean = Vec::with_capacity(model.weights.len());
    let mut var = Vec::with_capacity(model.weights.len());
    for w in &model.weights {
        let c = w
            .component_for(task)
            .ok_or_else(|| Error::Merge(format!("weight without a component for task {task}")))?;
        mean.push(c.mean);
        var.push(c.var);
    }
    Ok(TaskSolution {
        task_id: task,
        arch: model.arch.clone(),
        mean,
        var,
        label_map: info.label_map.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    /// Two parameters per weight per task, as if nothing were merged.
    pub before_merge: usize,
    /// Two parameters per stored component.
    pub after_merge: usize,
    pub merged: usize,
}

pub fn count_parameters(model: &MergedModel) -> ParameterCounts {
    let before_merge = 2 * model.arch.num_weights() * model.num_tasks();
    let after_merge = 2 * model.weights.iter().map(|w| w.components.len()).sum::<usize>();
    ParameterCounts {
        before_merge,
        after_merge,
        merged: before_merge.saturating_sub(after_merge),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(mean: f64, std: f64, task: TaskId) -> MergeInput {
        MergeInput {
            mean,
            var: std * std,
            tasks: vec![task],
        }
    }

    #[test]
    fn single_component_closed_form() {
        let mut rng = RngStream::new(2);
        let xs = rng.sample_gaussian(1.5, 0.7, 300).unwrap();
        let fit = em_fit(&xs, 1, &EmInit::Components(vec![(0.0, 1.0)]), &EmConfig::default(), &mut rng).unwrap();
        let (m, v) = moments(&xs);
        assert!((fit.means[0] - m).abs() < 1e-9);
        assert!((fit.vars[0] - v).abs() < 1e-9);
        assert!((fit.alphas[0] - 1.0).abs() < 1e-12);
    }

    fn two_clusters(seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed);
        let mut xs = rng.sample_gaussian(-2.0, 0.1, 500).unwrap();
        xs.extend(rng.sample_gaussian(2.0, 0.1, 500).unwrap());
        xs
    }

    #[test]
    fn recovers_two_clusters_from_random_start() {
        let xs = two_clusters(5);
        let fit = em_fit(&xs, 2, &EmInit::Random { restarts: 3 }, &EmConfig::default(), &mut RngStream::new(6)).unwrap();
        let mut pairs: Vec<(f64, f64)> = fit.means.iter().copied().zip(fit.alphas.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((pairs[0].0 + 2.0).abs() < 0.05 && (pairs[1].0 - 2.0).abs() < 0.05, "{pairs:?}");
        assert!(pairs.iter().all(|p| (p.1 - 0.5).abs() < 0.05));
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let xs = two_clusters(8);
        let fit = em_fit(&xs, 3, &EmInit::Random { restarts: 1 }, &EmConfig::default(), &mut RngStream::new(1)).unwrap();
        assert!(fit.log_likelihood.len() > 1);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn em_rejects_too_few_samples() {
        let xs = vec![0.0; 15];
        assert!(em_fit(&xs, 2, &EmInit::Random { restarts: 1 }, &EmConfig::default(), &mut RngStream::new(1)).is_err());
    }

    #[test]
    fn constant_samples_are_degenerate() {
        let xs = vec![0.25; 40];
        let err = em_fit(&xs, 2, &EmInit::Components(vec![(0.2, 0.01), (0.3, 0.01)]), &EmConfig::default(), &mut RngStream::new(1));
        assert!(matches!(err, Err(Error::DegenerateFit(_))), "{err:?}");
    }

    #[test]
    fn merge_of_one_input_is_identity() {
        let m = merge_weight(&[input(0.3, 0.2, 4)], &MergeConfig::default(), &mut RngStream::new(1)).unwrap();
        assert_eq!(m.mixture.components, vec![GaussianComponent { mean: 0.3, var: 0.2 * 0.2, weight: 1.0 }]);
        assert_eq!(m.mixture.assignment, BTreeMap::from([(4, 0)]));
    }

    #[test]
    fn separated_inputs_stay_apart() {
        let inputs = [input(-1.0, 0.05, 0), input(1.0, 0.05, 1)];
        let m = merge_weight(&inputs, &MergeConfig::default(), &mut RngStream::new(3)).unwrap().mixture;
        assert_eq!(m.components.len(), 2);
        assert_ne!(m.assignment[&0], m.assignment[&1]);
        assert!((m.component_for(0).unwrap().mean + 1.0).abs() < 0.05);
        assert!((m.component_for(1).unwrap().mean - 1.0).abs() < 0.05);
        m.check_invariants().unwrap();
    }

    #[test]
    fn identical_inputs_merge() {
        let inputs = [input(0.2, 0.1, 0), input(0.2, 0.1, 1)];
        let m = merge_weight(&inputs, &MergeConfig::default(), &mut RngStream::new(3)).unwrap().mixture;
        assert_eq!(m.components.len(), 1);
        assert_eq!(m.components[0].weight, 1.0);
    }

    #[test]
    fn pseudo_tasks_keep_their_assignments() {
        let inputs = [
            MergeInput { mean: -1.0, var: 0.0025, tasks: vec![0, 2] },
            input(1.0, 0.05, 1),
            input(1.01, 0.05, 3),
        ];
        let m = merge_weight(&inputs, &MergeConfig::default(), &mut RngStream::new(9)).unwrap().mixture;
        m.check_invariants().unwrap();
        assert_eq!(m.assignment[&0], m.assignment[&2]);
        assert_ne!(m.assignment[&0], m.assignment[&1]);
        assert!(m.components.len() <= 3);
    }

    fn snapshot(task: TaskId, mean: Vec<f64>, sigma: Vec<f64>) -> TaskSnapshot {
        TaskSnapshot {
            task_id: task,
            arch: Architecture::new(vec![2, 2]).unwrap(),
            mean,
            sigma,
            label_map: vec![2 * task, 2 * task + 1],
        }
    }

    #[test]
    fn first_snapshot_passes_through() {
        let s = snapshot(0, vec![0.1, -0.2, 0.3, 0.0, 1.0, -1.0], vec![0.1; 6]);
        let (m, _) = merge_models(None, std::slice::from_ref(&s), &MergeConfig::default(), 1).unwrap();
        m.check_invariants().unwrap();
        let sol = extract_solution(&m, 0).unwrap();
        assert_eq!(sol.mean, s.mean);
        assert!(sol.var.iter().zip(&s.sigma).all(|(v, s)| *v == s * s));
        assert_eq!(count_parameters(&m), ParameterCounts { before_merge: 12, after_merge: 12, merged: 0 });
    }

    #[test]
    fn self_merge_collapses_and_is_symmetric() {
        let a = snapshot(0, vec![0.1, -0.2, 0.3, 0.0, 1.0, -1.0], vec![0.1, 0.2, 0.05, 0.3, 0.1, 0.1]);
        let mut b = a.clone();
        b.task_id = 1;
        let (m, _) = merge_models(None, &[a, b], &MergeConfig::default(), 1).unwrap();
        m.check_invariants().unwrap();
        let single = m.weights.iter().filter(|w| w.components.len() == 1).count();
        assert!(single as f64 >= 0.95 * m.weights.len() as f64);
        assert_eq!(extract_solution(&m, 0).unwrap().mean, extract_solution(&m, 1).unwrap().mean);
        let c = count_parameters(&m);
        assert!(c.after_merge < c.before_merge);
    }

    #[test]
    fn recursive_merge_extends_registry() {
        let a = snapshot(0, vec![0.5; 6], vec![0.05; 6]);
        let b = snapshot(1, vec![-0.5; 6], vec![0.05; 6]);
        let (m1, _) = merge_models(None, &[a], &MergeConfig::default(), 1).unwrap();
        let (m2, _) = merge_models(Some(&m1), &[b], &MergeConfig::default(), 2).unwrap();
        m2.check_invariants().unwrap();
        assert_eq!(m2.task_ids(), vec![0, 1]);
        assert!(m2.weights.iter().all(|w| w.components.len() == 2));
        assert!((extract_solution(&m2, 0).unwrap().mean[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn merge_rejects_mismatched_architecture() {
        let a = snapshot(0, vec![0.5; 6], vec![0.05; 6]);
        let mut b = snapshot(1, vec![0.5; 3], vec![0.05; 3]);
        b.arch = Architecture::new(vec![1, 1, 1]).unwrap();
        assert!(matches!(merge_models(None, &[a, b], &MergeConfig::default(), 1), Err(Error::Shape(_))));
    }

    #[test]
    fn unknown_task() {
        let a = snapshot(0, vec![0.5; 6], vec![0.05; 6]);
        let (m, _) = merge_models(None, &[a], &MergeConfig::default(), 1).unwrap();
        assert!(matches!(extract_solution(&m, 7), Err(Error::UnknownTask(7))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn em_is_monotone(seed in any::<u64>(), k in 1usize..5) {
                let mut rng = RngStream::new(seed);
                let mut xs = Vec::new();
                for _ in 0..k {
                    let m = rng.standard_normal() * 2.0;
                    let s = 0.05 + rng.uniform();
                    xs.extend(rng.sample_gaussian(m, s, 60).unwrap());
                }
                let fit = em_fit(&xs, k, &EmInit::Random { restarts: 1 }, &EmConfig::default(), &mut rng).unwrap();
                if fit.resets == 0 {
                    for w in fit.log_likelihood.windows(2) {
                        prop_assert!(w[1] >= w[0] - 1e-9);
                    }
                }
                let total: f64 = fit.alphas.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }

            #[test]
            fn merge_bounds(seed in any::<u64>(), k in 1usize..6) {
                let mut rng = RngStream::new(seed);
                let inputs: Vec<MergeInput> = (0..k)
                    .map(|t| input(rng.standard_normal() * 0.3, 0.01 + 0.2 * rng.uniform(), t))
                    .collect();
                let m = merge_weight(&inputs, &MergeConfig::default(), &mut rng).unwrap();
                prop_assert!(!m.mixture.components.is_empty());
                prop_assert!(m.mixture.components.len() <= k);
                prop_assert_eq!(m.mixture.assignment.len(), k);
                m.mixture.check_invariants().unwrap();
            }
        }
    }
}
