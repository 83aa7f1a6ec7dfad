//! IDX binary loader (the MNIST file format).
//!
//! Big-endian throughout: images carry magic 0x00000803 (u8 pixels, 3-D),
//! labels carry 0x00000801 (u8, 1-D). Pixels are scaled to [0, 1] and each
//! image is flattened to a `rows·cols` feature row. Malformed files are
//! rejected with the byte offset that failed.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Array;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: truncated; need {n} bytes for {what} at offset {}, file has {}",
                self.path.display(),
                self.offset,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: {} trailing bytes after offset {}",
                self.path.display(),
                self.bytes.len() - self.offset,
                self.offset
            )));
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader, expected: u32) -> Result<()> {
    let got = r.u32_be("magic")?;
    if got != expected {
        return Err(Error::Data(format!(
            "{}: wrong magic 0x{got:08x} at offset 0 (expected 0x{expected:08x})",
            r.path.display()
        )));
    }
    Ok(())
}

/// Load an IDX image/label file pair into a dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let mut ir = Reader {
        bytes: &image_bytes,
        offset: 0,
        path: images_path,
    };
    check_magic(&mut ir, IMAGES_MAGIC)?;
    let count = ir.u32_be("image count")? as usize;
    let rows = ir.u32_be("row count")? as usize;
    let cols = ir.u32_be("column count")? as usize;
    let d = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Data(format!("{}: image size overflow", images_path.display())))?;
    let pixels = ir.take(
        count.checked_mul(d).ok_or_else(|| {
            Error::Data(format!("{}: pixel count overflow", images_path.display()))
        })?,
        "pixel data",
    )?;
    ir.finish()?;

    let mut lr = Reader {
        bytes: &label_bytes,
        offset: 0,
        path: labels_path,
    };
    check_magic(&mut lr, LABELS_MAGIC)?;
    let label_count = lr.u32_be("label count")? as usize;
    if label_count != count {
        return Err(Error::Data(format!(
            "{count} images but {label_count} labels ({} / {})",
            images_path.display(),
            labels_path.display()
        )));
    }
    let raw_labels = lr.take(label_count, "label data")?;
    lr.finish()?;

    let values: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(Array::new(vec![count, d], values)?, labels, num_classes)
}
