use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSplit, StreamKind, TaskStream};
use crate::numerics::{derive_seed, Matrix, RngStream};
use crate::{Error, Result};

/// How global classes are grouped into split tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Classes `0..k`, `k..2k`, ...
    #[default]
    Contiguous,
    /// Classes shuffled with the given seed before chunking.
    Shuffled(u64),
}

fn rows_with_labels(x: &Matrix, y: &[usize], classes: &[usize]) -> (Matrix, Vec<usize>) {
    let local: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let idx: Vec<usize> = (0..y.len()).filter(|&i| local.contains_key(&y[i])).collect();
    let labels = idx.iter().map(|&i| local[&y[i]]).collect();
    (x.select_rows(&idx), labels)
}

/// Splits a dataset into `n_tasks` tasks over disjoint, equal-size groups of
/// classes. Each task relabels its classes to `0..k`.
pub fn make_split_tasks(data: &Dataset, n_tasks: usize, grouping: Grouping) -> Result<TaskStream> {
    if n_tasks == 0 || !data.classes.is_multiple_of(n_tasks) {
        return Err(Error::Config(format!(
            "{} classes cannot be split evenly into {n_tasks} tasks",
            data.classes
        )));
    }
    let mut order: Vec<usize> = (0..data.classes).collect();
    if let Grouping::Shuffled(seed) = grouping {
        RngStream::new(seed).shuffle(&mut order);
    }
    let per_task = data.classes / n_tasks;
    let tasks = order
        .chunks(per_task)
        .enumerate()
        .map(|(task_id, group)| {
            let mut label_map = group.to_vec();
            label_map.sort_unstable();
            let (train_x, train_y) = rows_with_labels(&data.train_x, &data.train_y, &label_map);
            let (test_x, test_y) = rows_with_labels(&data.test_x, &data.test_y, &label_map);
            DatasetSplit {
                task_id,
                train_x,
                train_y,
                test_x,
                test_y,
                label_map,
            }
        })
        .collect();
    Ok(TaskStream {
        kind: StreamKind::Split,
        tasks,
    })
}

/// Column permutation used by permuted task `k` (`k >= 1`).
pub fn task_permutation(seed: u64, task: usize, width: usize) -> Vec<usize> {
    RngStream::new(derive_seed(seed, task as u64)).permutation(width)
}

/// Task 0 is the original data; task `k` shuffles every input column with a
/// permutation derived from `seed` and `k`. Labels are unchanged.
pub fn make_permuted_tasks(data: &Dataset, n_tasks: usize, seed: u64) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(Error::Config("at least one permuted task is required".into()));
    }
    let label_map: Vec<usize> = (0..data.classes).collect();
    let width = data.train_x.cols();
    let tasks = (0..n_tasks)
        .map(|task_id| {
            let (train_x, test_x) = if task_id == 0 {
                (data.train_x.clone(), data.test_x.clone())
            } else {
                let perm = task_permutation(seed, task_id, width);
                (
                    data.train_x.permute_columns(&perm)?,
                    data.test_x.permute_columns(&perm)?,
                )
            };
            Ok(DatasetSplit {
                task_id,
                train_x,
                train_y: data.train_y.clone(),
                test_x,
                test_y: data.test_y.clone(),
                label_map: label_map.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TaskStream {
        kind: StreamKind::Permuted,
        tasks,
    })
}

/// Class-stratified random subsample of the training rows; the test rows are
/// left untouched. Kept rows stay in their original order.
pub fn subsample(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(split.clone());
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in split.train_y.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = RngStream::new(seed);
    let mut keep = Vec::new();
    for (class, rows) in &by_class {
        let k = (fraction * rows.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::Config(format!(
                "fraction {fraction} keeps no example of class {class} ({} rows)",
                rows.len()
            )));
        }
        keep.extend(rng.sample_without_replacement(rows.len(), k).into_iter().map(|j| rows[j]));
    }
    keep.sort_unstable();
    Ok(DatasetSplit {
        task_id: split.task_id,
        train_x: split.train_x.select_rows(&keep),
        train_y: keep.iter().map(|&i| split.train_y[i]).collect(),
        test_x: split.test_x.clone(),
        test_y: split.test_y.clone(),
        label_map: split.label_map.clone(),
    })
}
