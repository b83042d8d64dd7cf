//! Big-endian IDX files as distributed with MNIST.

use std::path::Path;

use super::Dataset;
use crate::numerics::Matrix;
use crate::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn format_error(&self, offset: usize, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.format_error(
                self.bytes.len(),
                format!(
                    "truncated {what}: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("magic number")?;
        if found != expected {
            return Err(self.format_error(
                0,
                format!("bad magic number: expected {expected:#010x}, found {found:#010x}"),
            ));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingDataset(path.to_path_buf()));
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_images(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(IMAGE_MAGIC)?;
    let n = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let pixels = r.take(n * rows * cols, "pixel data")?;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Matrix::from_vec(n, rows * cols, data)
}

fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.magic(LABEL_MAGIC)?;
    let n = r.u32("label count")? as usize;
    Ok(r.take(n, "label data")?.iter().map(|&l| usize::from(l)).collect())
}

/// Reads an image/label IDX pair. Pixels are scaled to `[0, 1]`.
pub fn load_mnist(image_path: &Path, label_path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let x = parse_images(image_path, &read(image_path)?)?;
    let y = parse_labels(label_path, &read(label_path)?)?;
    if x.rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} images but {} labels",
            x.rows(),
            y.len()
        )));
    }
    Ok((x, y))
}

/// Loads the four standard MNIST files from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<Dataset> {
    let (train_x, train_y) = load_mnist(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let (test_x, test_y) = load_mnist(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    let classes = train_y.iter().chain(&test_y).max().map_or(0, |m| m + 1);
    Ok(Dataset {
        train_x,
        train_y,
        test_x,
        test_y,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&rows.to_be_bytes());
        b.extend_from_slice(&cols.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn parses_small_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        std::fs::write(&img, image_file(2, 2, 2, &[0, 255, 51, 102, 255, 0, 0, 0])).unwrap();
        std::fs::write(&lbl, label_file(&[7, 3])).unwrap();
        let (x, y) = load_mnist(&img, &lbl).unwrap();
        assert_eq!(x.shape(), (2, 4));
        assert_eq!(x.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(y, vec![7, 3]);
    }

    #[test]
    fn bad_magic_names_both_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        let mut bytes = image_file(1, 1, 1, &[0]);
        bytes[3] = 0x01;
        std::fs::write(&img, bytes).unwrap();
        std::fs::write(&lbl, label_file(&[0])).unwrap();
        let err = load_mnist(&img, &lbl).unwrap_err().to_string();
        assert!(err.contains("0x00000803") && err.contains("0x00000801"), "{err}");
        assert!(err.contains("byte 0"), "{err}");
    }

    #[test]
    fn truncated_pixels_report_offset() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        std::fs::write(&img, image_file(2, 2, 2, &[1, 2, 3])).unwrap();
        std::fs::write(&lbl, label_file(&[0, 1])).unwrap();
        match load_mnist(&img, &lbl) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file() {
        let err = load_mnist(Path::new("/nonexistent/a"), Path::new("/nonexistent/b"));
        assert!(matches!(err, Err(Error::MissingDataset(_))));
    }
}
