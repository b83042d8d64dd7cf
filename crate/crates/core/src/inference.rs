//! Monte-Carlo prediction, uncertainty scores and test-time task selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::forward_weights;
use crate::mixture::{extract_solution, MergedModel, TaskSolution};
use crate::numerics::{Matrix, RngStream};
use crate::{Error, Result, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMeasure {
    /// Per-class variance of the predicted probabilities across samples.
    #[default]
    Variance,
    /// Entropy of the sample-averaged prediction.
    Entropy,
    /// Mutual information between prediction and weights:
    /// `H[mean] - mean(H[sample])`.
    Mummi,
    /// `H[mean] + mean(H[sample])`, the sum form some texts print.
    MummiPrinted,
}

impl std::str::FromStr for UncertaintyMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "variance" => Ok(Self::Variance),
            "entropy" => Ok(Self::Entropy),
            "mummi" => Ok(Self::Mummi),
            "mummi-printed" | "mummi_printed" => Ok(Self::MummiPrinted),
            other => Err(Error::Config(format!("unknown uncertainty measure {other:?}"))),
        }
    }
}

impl std::fmt::Display for UncertaintyMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Variance => "variance",
            Self::Entropy => "entropy",
            Self::Mummi => "mummi",
            Self::MummiPrinted => "mummi_printed",
        })
    }
}

/// `samples x rows x classes` probabilities, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSamples {
    samples: usize,
    rows: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl PredictiveSamples {
    pub fn new(samples: usize, rows: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != samples * rows * classes {
            return Err(Error::Shape(format!(
                "{} probabilities for {samples}x{rows}x{classes}",
                probs.len()
            )));
        }
        if samples == 0 || classes == 0 {
            return Err(Error::Shape("empty predictive tensor".into()));
        }
        Ok(Self {
            samples,
            rows,
            classes,
            probs,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, sample: usize, row: usize) -> &[f64] {
        let start = (sample * self.rows + row) * self.classes;
        &self.probs[start..start + self.classes]
    }

    /// Sample-averaged prediction, `rows x classes`.
    pub fn mean(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.classes);
        for s in 0..self.samples {
            for r in 0..self.rows {
                for (o, p) in out.row_mut(r).iter_mut().zip(self.get(s, r)) {
                    *o += p;
                }
            }
        }
        let n = self.samples as f64;
        out.as_mut_slice().iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Population variance across samples per row and class, `rows x classes`.
    pub fn variance(&self) -> Matrix {
        let mean = self.mean();
        let mut out = Matrix::zeros(self.rows, self.classes);
        for s in 0..self.samples {
            for r in 0..self.rows {
                let m = mean.row(r).to_vec();
                for ((o, p), m) in out.row_mut(r).iter_mut().zip(self.get(s, r)).zip(&m) {
                    *o += (p - m) * (p - m);
                }
            }
        }
        let n = self.samples as f64;
        out.as_mut_slice().iter_mut().for_each(|v| *v /= n);
        out
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Scalar uncertainty of a predictive tensor, averaged over rows.
pub fn uncertainty(samples: &PredictiveSamples, kind: UncertaintyMeasure) -> f64 {
    let rows = samples.rows() as f64;
    if samples.rows() == 0 {
        return 0.0;
    }
    match kind {
        UncertaintyMeasure::Variance => {
            let v = samples.variance();
            v.as_slice().iter().sum::<f64>() / (rows * samples.classes() as f64)
        }
        UncertaintyMeasure::Entropy => {
            let m = samples.mean();
            (0..samples.rows()).map(|r| entropy(m.row(r))).sum::<f64>() / rows
        }
        UncertaintyMeasure::Mummi | UncertaintyMeasure::MummiPrinted => {
            let m = samples.mean();
            let sign = if kind == UncertaintyMeasure::Mummi { -1.0 } else { 1.0 };
            let n = samples.samples() as f64;
            (0..samples.rows())
                .map(|r| {
                    let expected = (0..samples.samples()).map(|s| entropy(samples.get(s, r))).sum::<f64>() / n;
                    entropy(m.row(r)) + sign * expected
                })
                .sum::<f64>()
                / rows
        }
    }
}

/// Forward passes of `x` through `s` weight draws from `solution`.
pub fn mc_predict(solution: &TaskSolution, x: &Matrix, s: usize, rng: &mut RngStream) -> Result<PredictiveSamples> {
    if s < 2 {
        return Err(Error::Config(format!("at least 2 Monte-Carlo samples are needed, got {s}")));
    }
    let n = solution.arch.num_weights();
    if solution.mean.len() != n || solution.var.len() != n {
        return Err(Error::Shape(format!(
            "solution has {} means for {n} weights",
            solution.mean.len()
        )));
    }
    let std: Vec<f64> = solution.var.iter().map(|v| v.max(0.0).sqrt()).collect();
    let classes = solution.arch.output_dim();
    let mut probs = Vec::with_capacity(s * x.rows() * classes);
    let mut flat = vec![0.0; n];
    for _ in 0..s {
        rng.fill_standard_normal(&mut flat);
        for ((w, m), sd) in flat.iter_mut().zip(&solution.mean).zip(&std) {
            *w = m + sd * *w;
        }
        let weights = solution.arch.unflatten(&flat)?;
        let log_probs = forward_weights(&weights, x)?;
        probs.extend(log_probs.as_slice().iter().map(|v| v.exp()));
    }
    PredictiveSamples::new(s, x.rows(), classes, probs)
}

/// `p` rows of `x` drawn uniformly without replacement (all rows if fewer).
pub fn draw_probe(x: &Matrix, p: usize, rng: &mut RngStream) -> Matrix {
    let mut idx = rng.sample_without_replacement(x.rows(), p.min(x.rows()));
    idx.sort_unstable();
    x.select_rows(&idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionScore {
    pub task_id: TaskId,
    pub uncertainty: f64,
    /// Sample-averaged prediction per probe row.
    pub mean: Matrix,
    /// Per-class variance per probe row.
    pub variance: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub measure: UncertaintyMeasure,
    /// One entry per registered task, in task-id order.
    pub scores: Vec<SolutionScore>,
    pub chosen: TaskId,
}

impl UncertaintyReport {
    pub fn uncertainties(&self) -> Vec<(TaskId, f64)> {
        self.scores.iter().map(|s| (s.task_id, s.uncertainty)).collect()
    }
}

/// Scores every task solution in `model` on `probe` and picks the least
/// uncertain one; ties go to the lowest task id. All candidates see the same
/// noise draws, so identical solutions score identically.
pub fn select_task(
    model: &MergedModel,
    probe: &Matrix,
    s: usize,
    kind: UncertaintyMeasure,
    rng: &mut RngStream,
) -> Result<UncertaintyReport> {
    if probe.rows() == 0 {
        return Err(Error::Config("empty probe set".into()));
    }
    if model.tasks.is_empty() {
        return Err(Error::Config("model has no tasks".into()));
    }
    let shared_seed = rng.next_u64();
    let scores: Vec<SolutionScore> = model
        .task_ids()
        .into_par_iter()
        .map(|task| {
            let solution = extract_solution(model, task)?;
            let samples = mc_predict(&solution, probe, s, &mut RngStream::new(shared_seed))?;
            Ok(SolutionScore {
                task_id: task,
                uncertainty: uncertainty(&samples, kind),
                mean: samples.mean(),
                variance: samples.variance(),
            })
        })
        .collect::<Result<_>>()?;
    let mut chosen = &scores[0];
    for score in &scores[1..] {
        if score.uncertainty < chosen.uncertainty {
            chosen = score;
        }
    }
    let chosen = chosen.task_id;
    Ok(UncertaintyReport {
        measure: kind,
        scores,
        chosen,
    })
}

/// Global labels predicted by one solution.
pub fn predict_with(solution: &TaskSolution, x: &Matrix, s: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let mean = mc_predict(solution, x, s, rng)?.mean();
    let k = solution.label_map.len().min(mean.cols());
    Ok((0..mean.rows())
        .map(|r| {
            let row = &mean.row(r)[..k];
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            solution.label_map[best]
        })
        .collect())
}

/// Global labels predicted by task `chosen` of `model`.
pub fn predict(model: &MergedModel, x: &Matrix, chosen: TaskId, s: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    predict_with(&extract_solution(model, chosen)?, x, s, rng)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::{Architecture, TaskSnapshot};
    use crate::mixture::{merge_models, MergeConfig};

    fn tensor(samples: usize, rows: usize, classes: usize, probs: Vec<f64>) -> PredictiveSamples {
        PredictiveSamples::new(samples, rows, classes, probs).unwrap()
    }

    #[test]
    fn identical_samples_have_no_epistemic_spread() {
        let t = tensor(3, 1, 3, [0.2, 0.5, 0.3].repeat(3));
        assert!(uncertainty(&t, UncertaintyMeasure::Variance).abs() < 1e-15);
        assert!(uncertainty(&t, UncertaintyMeasure::Mummi).abs() < 1e-12);
    }

    #[test]
    fn uniform_predictions() {
        let t = tensor(4, 2, 5, vec![0.2; 40]);
        assert!((uncertainty(&t, UncertaintyMeasure::Entropy) - 5f64.ln()).abs() < 1e-12);
        assert!(uncertainty(&t, UncertaintyMeasure::Mummi).abs() < 1e-12);
        assert!((uncertainty(&t, UncertaintyMeasure::MummiPrinted) - 2.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_point_case() {
        let t = tensor(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!((uncertainty(&t, UncertaintyMeasure::Variance) - 0.25).abs() < 1e-15);
        assert!((uncertainty(&t, UncertaintyMeasure::Entropy) - 2f64.ln()).abs() < 1e-15);
        assert!((uncertainty(&t, UncertaintyMeasure::Mummi) - 2f64.ln()).abs() < 1e-15);
    }

    fn solution(mean: Vec<f64>, var: Vec<f64>, label_map: Vec<usize>) -> TaskSolution {
        TaskSolution {
            task_id: 0,
            arch: Architecture::new(vec![1, 2]).unwrap(),
            mean,
            var,
            label_map,
        }
    }

    #[test]
    fn zero_variance_is_deterministic() {
        let sol = solution(vec![0.4, -0.3, 0.1, 0.2], vec![0.0; 4], vec![0, 1]);
        let x = Matrix::from_vec(3, 1, vec![-1.0, 0.5, 2.0]).unwrap();
        let t = mc_predict(&sol, &x, 5, &mut RngStream::new(1)).unwrap();
        for s in 1..5 {
            for r in 0..3 {
                assert_eq!(t.get(s, r), t.get(0, r));
            }
        }
        for r in 0..3 {
            assert!((t.get(0, r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn needs_two_samples() {
        let sol = solution(vec![0.0; 4], vec![0.0; 4], vec![0, 1]);
        let x = Matrix::zeros(1, 1);
        assert!(mc_predict(&sol, &x, 1, &mut RngStream::new(1)).is_err());
    }

    /// Only the first weight is random, so the predictive mean is a 1-D
    /// integral, evaluated here by the trapezoid rule.
    #[test]
    fn mean_prediction_matches_quadrature() {
        // Layer (in + 1) x out: rows are [input weights; bias].
        let mean = vec![1.5, -0.5, 0.2, 0.1];
        let std0 = 1.2;
        let mut var = vec![0.0; 4];
        var[0] = std0 * std0;
        let sol = solution(mean.clone(), var, vec![0, 1]);
        let x = Matrix::from_vec(1, 1, vec![0.8]).unwrap();
        let t = mc_predict(&sol, &x, 10_000, &mut RngStream::new(4)).unwrap();
        let mc = t.mean().get(0, 0);

        let p0 = |w: f64| {
            let a = w * 0.8 + mean[2];
            let b = mean[1] * 0.8 + mean[3];
            1.0 / (1.0 + (b - a).exp())
        };
        let (lo, hi, n) = (mean[0] - 10.0 * std0, mean[0] + 10.0 * std0, 20_000);
        let h = (hi - lo) / n as f64;
        let mut oracle = 0.0;
        for i in 0..=n {
            let w = lo + i as f64 * h;
            let density = (-(w - mean[0]).powi(2) / (2.0 * std0 * std0)).exp() / (std0 * (2.0 * std::f64::consts::PI).sqrt());
            let weight = if i == 0 || i == n { 0.5 } else { 1.0 };
            oracle += weight * h * density * p0(w);
        }
        assert!((mc - oracle).abs() < 0.01, "mc {mc} vs oracle {oracle}");
    }

    #[test]
    fn predict_maps_to_global_labels() {
        // Bias favours local class 1.
        let sol = solution(vec![0.0, 0.0, 0.0, 3.0], vec![0.0; 4], vec![5, 6]);
        let x = Matrix::zeros(2, 1);
        assert_eq!(predict_with(&sol, &x, 2, &mut RngStream::new(1)).unwrap(), vec![6, 6]);
    }

    #[test]
    fn padded_output_is_never_predicted() {
        let sol = solution(vec![0.0, 0.0, 0.0, 3.0], vec![0.0; 4], vec![7]);
        let x = Matrix::zeros(2, 1);
        assert_eq!(predict_with(&sol, &x, 2, &mut RngStream::new(1)).unwrap(), vec![7, 7]);
    }

    fn snapshot(task: TaskId, mean: Vec<f64>, sigma: f64) -> TaskSnapshot {
        TaskSnapshot {
            task_id: task,
            arch: Architecture::new(vec![1, 2]).unwrap(),
            sigma: vec![sigma; mean.len()],
            mean,
            label_map: vec![0, 1],
        }
    }

    #[test]
    fn identical_solutions_tie_to_lowest_id() {
        let snaps: Vec<_> = (0..3).map(|t| snapshot(t, vec![0.3, -0.2, 0.1, 0.0], 0.5)).collect();
        // Identical inputs may merge; either way every task is scored.
        let (model, _) = merge_models(None, &snaps, &MergeConfig::default(), 1).unwrap();
        let x = Matrix::from_vec(4, 1, vec![0.1, 0.5, -1.0, 2.0]).unwrap();
        let report = select_task(&model, &x, 20, UncertaintyMeasure::Variance, &mut RngStream::new(2)).unwrap();
        assert_eq!(report.chosen, 0);
        let u = report.uncertainties();
        assert!(u.windows(2).all(|w| w[0].1 == w[1].1));
    }

    #[test]
    fn confident_solution_is_chosen() {
        let vague = snapshot(0, vec![0.0, 0.0, 0.0, 0.0], 2.0);
        let sharp = snapshot(1, vec![5.0, -5.0, 0.0, 0.0], 0.01);
        let (model, _) = merge_models(None, &[vague, sharp], &MergeConfig::default(), 1).unwrap();
        let x = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        for kind in [UncertaintyMeasure::Variance, UncertaintyMeasure::Entropy, UncertaintyMeasure::Mummi] {
            let r = select_task(&model, &x, 50, kind, &mut RngStream::new(3)).unwrap();
            assert_eq!(r.chosen, 1, "{kind}");
        }
    }

    #[test]
    fn single_task_model() {
        let (model, _) = merge_models(None, &[snapshot(4, vec![0.1; 4], 0.3)], &MergeConfig::default(), 1).unwrap();
        let x = Matrix::zeros(2, 1);
        let r = select_task(&model, &x, 10, UncertaintyMeasure::Entropy, &mut RngStream::new(3)).unwrap();
        assert_eq!(r.chosen, 4);
        assert_eq!(r.scores.len(), 1);
    }

    #[test]
    fn probe_rows_are_distinct() {
        let x = Matrix::from_vec(10, 1, (0..10).map(f64::from).collect()).unwrap();
        let p = draw_probe(&x, 4, &mut RngStream::new(1));
        let mut v = p.as_slice().to_vec();
        v.dedup();
        assert_eq!(v.len(), 4);
        assert_eq!(draw_probe(&x, 50, &mut RngStream::new(1)).rows(), 10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_tensor(seed: u64, s: usize, r: usize, c: usize) -> PredictiveSamples {
            let mut rng = RngStream::new(seed);
            let mut probs = Vec::new();
            for _ in 0..s * r {
                let logits: Vec<f64> = (0..c).map(|_| 3.0 * rng.standard_normal()).collect();
                probs.extend(crate::numerics::log_softmax(&logits).into_iter().map(f64::exp));
            }
            tensor(s, r, c, probs)
        }

        proptest! {
            #[test]
            fn measures_are_nonnegative(seed in any::<u64>(), s in 2usize..20, r in 1usize..5, c in 2usize..6) {
                let t = random_tensor(seed, s, r, c);
                prop_assert!(uncertainty(&t, UncertaintyMeasure::Variance) >= 0.0);
                prop_assert!(uncertainty(&t, UncertaintyMeasure::Mummi) >= -1e-12);
                prop_assert!(uncertainty(&t, UncertaintyMeasure::Entropy) <= (c as f64).ln() + 1e-12);
            }
        }
    }
}
