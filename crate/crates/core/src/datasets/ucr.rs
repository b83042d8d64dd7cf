//! UCR archive text files: one series per line, class label first.

use std::path::Path;

use super::Dataset;
use crate::numerics::Matrix;
use crate::{Error, Result};

fn parse_error(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

/// Raw rows and labels exactly as written in the file.
fn read_rows(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<i64>)> {
    if !path.exists() {
        return Err(Error::MissingDataset(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line
            .split(['\t', ',', ' '])
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| parse_error(path, line_no, format!("not a number: {f:?}")))
            });
        let label = fields
            .next()
            .ok_or_else(|| parse_error(path, line_no, "empty row".into()))??;
        let values: Vec<f64> = fields.collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(parse_error(path, line_no, "row has a label but no values".into()));
        }
        if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
            return Err(parse_error(path, line_no, format!("non-finite value {v}")));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_error(
                    path,
                    line_no,
                    format!("ragged row: {} values, expected {w}", values.len()),
                ))
            }
            _ => {}
        }
        if label.fract() != 0.0 {
            return Err(parse_error(path, line_no, format!("non-integer label {label}")));
        }
        labels.push(label as i64);
        rows.push(values);
    }
    Ok((rows, labels))
}

/// Z-normalizes each series, then rescales the whole file to `[0, 1]`.
fn normalize(rows: &mut [Vec<f64>]) {
    for row in rows.iter_mut() {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        for v in row.iter_mut() {
            *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
        }
    }
    let (lo, hi) = rows
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in rows.iter_mut().flatten() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<Matrix> {
    Matrix::from_rows(rows)
}

fn dense_labels(labels: &[i64], classes: &[i64]) -> Vec<usize> {
    labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label collected from the same set"))
        .collect()
}

fn sorted_classes<'a>(labels: impl Iterator<Item = &'a i64>) -> Vec<i64> {
    let mut classes: Vec<i64> = labels.copied().collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Loads one UCR file. Labels become dense `0..C` in sorted order of the
/// original label values.
pub fn load_ucr(path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let (mut rows, labels) = read_rows(path)?;
    normalize(&mut rows);
    let classes = sorted_classes(labels.iter());
    Ok((to_matrix(&rows)?, dense_labels(&labels, &classes)))
}

/// Loads a TRAIN/TEST pair with one label mapping shared by both files.
pub fn load_ucr_pair(train: &Path, test: &Path) -> Result<Dataset> {
    let train = read_rows(train)?;
    let test = read_rows(test)?;
    dataset_from_rows(train, test)
}

/// Builds a dataset from raw `(series, label)` rows, normalizing exactly as
/// the file loaders do.
pub fn dataset_from_rows(train: (Vec<Vec<f64>>, Vec<i64>), test: (Vec<Vec<f64>>, Vec<i64>)) -> Result<Dataset> {
    let (mut train_rows, train_labels) = train;
    let (mut test_rows, test_labels) = test;
    if let (Some(a), Some(b)) = (train_rows.first(), test_rows.first()) {
        if a.len() != b.len() {
            return Err(Error::Shape(format!(
                "train series have length {}, test series {}",
                a.len(),
                b.len()
            )));
        }
    }
    normalize(&mut train_rows);
    normalize(&mut test_rows);
    let classes = sorted_classes(train_labels.iter().chain(&test_labels));
    Ok(Dataset {
        train_x: to_matrix(&train_rows)?,
        train_y: dense_labels(&train_labels, &classes),
        test_x: to_matrix(&test_rows)?,
        test_y: dense_labels(&test_labels, &classes),
        classes: classes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn single_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "one.tsv", "3\t1.0\t2.0\t4.0\n");
        let (x, y) = load_ucr(&p).unwrap();
        assert_eq!(x.shape(), (1, 3));
        assert_eq!(y, vec![0]);
        assert_eq!(x.row(0)[0], 0.0);
        assert_eq!(x.row(0)[2], 1.0);
    }

    #[test]
    fn labels_become_dense_and_values_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "4,0,1,2\n1,5,-3,2\n4,1,1,0\n2,9,9,8\n");
        let (x, y) = load_ucr(&p).unwrap();
        assert_eq!(y, vec![2, 0, 2, 1]);
        assert!(x.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ragged_rows_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "bad.tsv", "1\t0\t1\n\n2\t0\n");
        match load_ucr(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pair_shares_label_map() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(&dir, "tr.tsv", "2\t0\t1\n5\t1\t0\n");
        let b = write(&dir, "te.tsv", "5\t0\t1\n");
        let d = load_ucr_pair(&a, &b).unwrap();
        assert_eq!(d.classes, 2);
        assert_eq!(d.test_y, vec![1]);
    }
}
