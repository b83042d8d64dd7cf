//! Generator for the Two Patterns time-series problem.
//!
//! Each series is standard-normal background noise with two step patterns
//! written into it, one after the other. An up-step is `-5` for its first
//! half and `+5` for its second half; a down-step is the reverse. The class
//! is the ordered pair of step directions:
//!
//! | label | first | second |
//! |-------|-------|--------|
//! | 1     | up    | up     |
//! | 2     | up    | down   |
//! | 3     | down  | up     |
//! | 4     | down  | down   |
//!
//! Pattern lengths are uniform in `[len/8, len/4]`. The first pattern starts
//! anywhere that leaves room for the second; the second starts after the
//! first ends. Series are z-normalized, as in the UCR archive.
//!
//! This exists so the UCR experiment can run where the archive files are not
//! available; [`write_ucr_tsv`] emits the archive's text layout.

use std::io::Write;
use std::path::Path;

use super::ucr::dataset_from_rows;
use super::Dataset;
use crate::numerics::RngStream;
use crate::{Error, Result};

pub const SERIES_LENGTH: usize = 128;
pub const TRAIN_SIZE: usize = 1000;
pub const TEST_SIZE: usize = 4000;

const STEP: f64 = 5.0;

fn write_step(series: &mut [f64], start: usize, len: usize, up: bool) {
    let half = len / 2;
    for (i, v) in series[start..start + len].iter_mut().enumerate() {
        let first_half = i < half;
        *v = if first_half == up { -STEP } else { STEP };
    }
}

/// One series of the given class (1 to 4).
pub fn generate_series(label: u8, length: usize, rng: &mut RngStream) -> Vec<f64> {
    assert!((1..=4).contains(&label), "class label must be 1..=4");
    let first_up = label <= 2;
    let second_up = label % 2 == 1;
    let min_len = (length / 8).max(2);
    let max_len = (length / 4).max(min_len);
    let l1 = min_len + rng.below(max_len - min_len + 1);
    let l2 = min_len + rng.below(max_len - min_len + 1);
    let t1 = rng.below(length - l1 - l2 + 1);
    let t2 = t1 + l1 + rng.below(length - l2 - (t1 + l1) + 1);

    let mut series: Vec<f64> = (0..length).map(|_| rng.standard_normal()).collect();
    write_step(&mut series, t1, l1, first_up);
    write_step(&mut series, t2, l2, second_up);

    let n = length as f64;
    let mean = series.iter().sum::<f64>() / n;
    let std = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    series.iter_mut().for_each(|v| *v = (*v - mean) / std);
    series
}

/// `count` series with balanced classes in random order.
pub fn generate(count: usize, length: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut rng = RngStream::new(seed);
    let mut labels: Vec<u8> = (0..count).map(|i| (i % 4) as u8 + 1).collect();
    rng.shuffle(&mut labels);
    let series = labels.iter().map(|&l| generate_series(l, length, &mut rng)).collect();
    (series, labels)
}

pub fn write_ucr_tsv(path: &Path, series: &[Vec<f64>], labels: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for (s, l) in series.iter().zip(labels) {
        let mut line = l.to_string();
        for v in s {
            line.push('\t');
            line.push_str(&format!("{v:.7e}"));
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes `TwoPatterns_TRAIN.tsv` and `TwoPatterns_TEST.tsv` of the archive's
/// sizes into `dir`.
pub fn write_dataset(dir: &Path, seed: u64) -> Result<()> {
    let (train, train_labels) = generate(TRAIN_SIZE, SERIES_LENGTH, seed);
    let (test, test_labels) = generate(TEST_SIZE, SERIES_LENGTH, seed.wrapping_add(1));
    write_ucr_tsv(&dir.join("TwoPatterns_TRAIN.tsv"), &train, &train_labels)?;
    write_ucr_tsv(&dir.join("TwoPatterns_TEST.tsv"), &test, &test_labels)
}

/// The generated train/test pair as a normalized dataset, without touching disk.
pub fn dataset(seed: u64) -> Result<Dataset> {
    let to_raw = |(series, labels): (Vec<Vec<f64>>, Vec<u8>)| (series, labels.into_iter().map(i64::from).collect());
    dataset_from_rows(
        to_raw(generate(TRAIN_SIZE, SERIES_LENGTH, seed)),
        to_raw(generate(TEST_SIZE, SERIES_LENGTH, seed.wrapping_add(1))),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_have_the_right_step_order() {
        let mut rng = RngStream::new(3);
        for label in 1..=4u8 {
            let s = generate_series(label, SERIES_LENGTH, &mut rng);
            assert_eq!(s.len(), SERIES_LENGTH);
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn balanced_and_deterministic() {
        let (a, la) = generate(40, 64, 9);
        let (b, lb) = generate(40, 64, 9);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        for c in 1..=4u8 {
            assert_eq!(la.iter().filter(|&&l| l == c).count(), 10);
        }
    }

    #[test]
    fn round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let (s, l) = generate(12, 32, 1);
        let p = dir.path().join("x.tsv");
        write_ucr_tsv(&p, &s, &l).unwrap();
        let (x, y) = crate::datasets::load_ucr(&p).unwrap();
        assert_eq!(x.shape(), (12, 32));
        assert_eq!(y.len(), 12);
        assert!(y.iter().zip(&l).all(|(&d, &o)| d + 1 == o as usize));
    }
}
