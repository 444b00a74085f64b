//! Labelled datasets with inputs normalised to `[-1, 1]`.

mod cifar;
mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub use cifar::{
    downscale_block_average, fixture_records, load_cifar10, parse_cifar10, record_to_tensor, records_to_dataset,
    serialize_cifar10, CifarRecord, CifarScale, CifarSplit, CIFAR_CLASSES, CIFAR_PIXELS, CIFAR_RECORD_LEN, CIFAR_SIDE,
};
pub use synth::{make_synth2d, Synth2DFamily, Synth2DOracle, Synth2DSpec};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DATA_RANGE: (f64, f64) = (-1.0, 1.0);

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub source: String,
    pub dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    meta: DatasetMeta,
}

impl Dataset {
    /// Validates every invariant: matching lengths, a common dimension,
    /// labels below `num_classes` and finite inputs inside `[-1, 1]`.
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, num_classes: usize, source: &str) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if num_classes < 2 {
            return Err(Error::Data(format!("need at least 2 classes, got {num_classes}")));
        }
        let dim = inputs[0].len();
        for (i, (x, &y)) in inputs.iter().zip(&labels).enumerate() {
            if x.len() != dim {
                return Err(Error::Data(format!(
                    "row {i} has dimension {}, expected {dim}",
                    x.len()
                )));
            }
            if y >= num_classes {
                return Err(Error::Data(format!("row {i} has label {y} >= {num_classes}")));
            }
            if x.data().iter().any(|v| !(DATA_RANGE.0..=DATA_RANGE.1).contains(v)) {
                return Err(Error::Data(format!("row {i} leaves the [-1, 1] range")));
            }
        }
        let inputs = inputs
            .into_iter()
            .map(|x| if x.shape() == [dim] { Ok(x) } else { x.reshape(&[dim]) })
            .collect::<Result<_>>()?;
        Ok(Self {
            inputs,
            labels,
            meta: DatasetMeta {
                source: source.to_string(),
                dim,
                num_classes,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> (&Tensor, usize) {
        (&self.inputs[i], self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, usize)> {
        self.inputs.iter().zip(self.labels.iter().copied())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let inputs = indices.iter().map(|&i| self.inputs[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(inputs, labels, self.meta.num_classes, &self.meta.source)
    }

    /// Classes with no examples.
    pub fn absent_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.meta.num_classes];
        for &y in &self.labels {
            seen[y] = true;
        }
        (0..self.meta.num_classes).filter(|&c| !seen[c]).collect()
    }

    /// CSV with header `x1,...,xD,label`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let header: Vec<String> = (1..=self.dim()).map(|i| format!("x{i}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for (x, y) in self.iter() {
            for v in x.data() {
                write!(w, "{v},")?;
            }
            writeln!(w, "{y}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    /// Reads the CSV layout produced by [`Dataset::write_csv`]. When
    /// `num_classes` is `None` it is one more than the largest label.
    pub fn read_csv(r: impl BufRead, num_classes: Option<usize>, source: &str) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty csv".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 2 || cols.last() != Some(&"label") {
            return Err(Error::Data(format!("unexpected csv header `{header}`")));
        }
        let dim = cols.len() - 1;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Data(format!("line {}: expected {} fields", lineno + 2, dim + 1)));
            }
            let vals = fields[..dim]
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 2)))?;
            let y = fields[dim]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Data(format!("line {}: {e}", lineno + 2)))?;
            inputs.push(Tensor::vector(vals));
            labels.push(y);
        }
        let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Self::new(inputs, labels, k, source)
    }

    pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Self> {
        let f = fs::File::open(path)?;
        Self::read_csv(BufReader::new(f), num_classes, &path.display().to_string())
    }
}
