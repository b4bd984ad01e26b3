//! Joint (θ, x) sample sets and their on-disk CSV + JSON metadata format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SbiError};
use crate::numcore::Array;

/// A set of joint draws from p(θ, x).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub simulator: String,
    pub seed: u64,
    /// [N × theta_dim]
    pub thetas: Array,
    /// [N × x_dim]
    pub xs: Array,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub simulator: String,
    pub budget: usize,
    pub seed: u64,
    pub theta_dim: usize,
    pub x_dim: usize,
}

/// 17-significant-digit float formatting used in every CSV we emit.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.thetas.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta_dim(&self) -> usize {
        self.thetas.cols()
    }

    pub fn x_dim(&self) -> usize {
        self.xs.cols()
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            simulator: self.simulator.clone(),
            budget: self.len(),
            seed: self.seed,
            theta_dim: self.theta_dim(),
            x_dim: self.x_dim(),
        }
    }

    /// Write `<path>` as CSV and `<path>.meta.json` alongside.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.theta_dim())
            .map(|i| format!("theta_{i}"))
            .chain((0..self.x_dim()).map(|i| format!("x_{i}")))
            .collect();
        f.write_all(header.join(",").as_bytes())?;
        f.write_all(b"\n")?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .thetas
                .row(i)
                .iter()
                .chain(self.xs.row(i))
                .map(|&v| format_float(v))
                .collect();
            f.write_all(row.join(",").as_bytes())?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        std::fs::write(meta_path(path), meta + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let meta: DatasetMeta =
            serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .ok_or_else(|| SbiError::InvalidArgument("empty dataset CSV".into()))??;
        let ncols = header.split(',').count();
        if ncols != meta.theta_dim + meta.x_dim {
            return Err(SbiError::ArtifactMismatch(format!(
                "dataset CSV has {ncols} columns, metadata says {}",
                meta.theta_dim + meta.x_dim
            )));
        }
        let mut thetas = Vec::new();
        let mut xs = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| SbiError::InvalidArgument(format!("bad float `{s}`: {e}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != ncols {
                return Err(SbiError::InvalidArgument("ragged dataset CSV".into()));
            }
            thetas.extend_from_slice(&vals[..meta.theta_dim]);
            xs.extend_from_slice(&vals[meta.theta_dim..]);
        }
        let n = thetas.len() / meta.theta_dim;
        Ok(Dataset {
            simulator: meta.simulator,
            seed: meta.seed,
            thetas: Array::matrix(n, meta.theta_dim, thetas),
            xs: Array::matrix(n, meta.x_dim, xs),
        })
    }

    /// Copy with only the given θ columns kept (marginal training target).
    pub fn with_theta_columns(&self, cols: &[usize]) -> Dataset {
        let n = self.len();
        let mut data = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            let row = self.thetas.row(i);
            for &c in cols {
                data.push(row[c]);
            }
        }
        Dataset {
            simulator: self.simulator.clone(),
            seed: self.seed,
            thetas: Array::matrix(n, cols.len(), data),
            xs: self.xs.clone(),
        }
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    s.into()
}
