//! CSV dataset loader.
//!
//! Expected layout: a header `label,f0,f1,...,f{d-1}` followed by one row per
//! example, label first. Errors carry 1-based line numbers.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Array;

/// Load a `label,f0,f1,...` CSV file into a dataset.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.first() != Some(&"label") || fields.len() < 2 {
        return Err(Error::Data(format!(
            "{}: line 1: header must be label,f0,f1,..., got {header:?}",
            path.display()
        )));
    }
    for (i, f) in fields[1..].iter().enumerate() {
        if *f != format!("f{i}") {
            return Err(Error::Data(format!(
                "{}: line 1: expected column f{i}, got {f:?}",
                path.display()
            )));
        }
    }
    let d = fields.len() - 1;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != d + 1 {
            return Err(Error::Data(format!(
                "{}: line {}: expected {} fields, got {}",
                path.display(),
                lineno + 1,
                d + 1,
                cells.len()
            )));
        }
        let label: usize = cells[0].parse().map_err(|_| {
            Error::Data(format!(
                "{}: line {}: bad label {:?}",
                path.display(),
                lineno + 1,
                cells[0]
            ))
        })?;
        labels.push(label);
        for cell in &cells[1..] {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: line {}: bad feature value {cell:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let num_classes = labels.iter().copied().max().unwrap() + 1;
    let rows = labels.len();
    Dataset::new(Array::new(vec![rows, d], values)?, labels, num_classes)
}
