//! Dataset loaders and task-stream generators.
//!
//! Files are looked up under a data root, `$CBLN_DATA_DIR` or `./data`:
//!
//! ```text
//! <root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte
//! <root>/ucr/TwoPatterns/TwoPatterns_{TRAIN,TEST}.tsv
//! ```

mod idx;
mod tasks;
pub mod two_patterns;
mod ucr;

use std::path::{Path, PathBuf};

pub use idx::{load_mnist, load_mnist_dir};
pub use tasks::{make_permuted_tasks, make_split_tasks, subsample, task_permutation, Grouping};
pub use ucr::{dataset_from_rows, load_ucr, load_ucr_pair};

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::TaskId;

pub const DATA_DIR_ENV: &str = "CBLN_DATA_DIR";

/// Data root from `$CBLN_DATA_DIR`, falling back to `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn mnist_dir(root: &Path) -> PathBuf {
    root.join("mnist")
}

pub fn two_patterns_paths(root: &Path) -> (PathBuf, PathBuf) {
    let dir = root.join("ucr").join("TwoPatterns");
    (
        dir.join("TwoPatterns_TRAIN.tsv"),
        dir.join("TwoPatterns_TEST.tsv"),
    )
}

/// A labelled train/test pair with dense labels `0..classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    /// Keeps only the rows of classes `0..classes`.
    pub fn restrict_classes(&self, classes: usize) -> crate::Result<Dataset> {
        if classes == 0 || classes > self.classes {
            return Err(crate::Error::Config(format!(
                "cannot keep {classes} of {} classes",
                self.classes
            )));
        }
        let keep = |y: &[usize]| -> Vec<usize> { (0..y.len()).filter(|&i| y[i] < classes).collect() };
        let (tr, te) = (keep(&self.train_y), keep(&self.test_y));
        Ok(Dataset {
            train_x: self.train_x.select_rows(&tr),
            train_y: tr.iter().map(|&i| self.train_y[i]).collect(),
            test_x: self.test_x.select_rows(&te),
            test_y: te.iter().map(|&i| self.test_y[i]).collect(),
            classes,
        })
    }
}

/// One task: features in `[0, 1]`, local labels `0..label_map.len()`.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub task_id: TaskId,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
    /// Local class index to global label.
    pub label_map: Vec<usize>,
}

impl DatasetSplit {
    pub fn classes(&self) -> usize {
        self.label_map.len()
    }

    /// Output width of a network for this task. A softmax over a single
    /// class is constant, so one-class tasks get one extra, never-targeted
    /// output.
    pub fn output_width(&self) -> usize {
        self.label_map.len().max(2)
    }

    pub fn input_dim(&self) -> usize {
        self.train_x.cols()
    }

    /// Test labels mapped back to the global label space.
    pub fn global_test_labels(&self) -> Vec<usize> {
        self.test_y.iter().map(|&y| self.label_map[y]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Split,
    Permuted,
}

/// Ordered tasks sharing input width and class count.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub tasks: Vec<DatasetSplit>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}
