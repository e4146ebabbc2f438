//! Accuracy matrix bookkeeping and the summary metrics A1, A2, F and S.

use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::error::{Error, Result};

/// Percent accuracy of `task_id`'s head on `inputs` against local `labels`.
pub fn accuracy(model: &BackboneModel, task_id: usize, inputs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict(inputs, task_id)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// `a[k][j]`: accuracy (percent) on task `k` after training task `j`, `j ≥ k`,
/// both 1-based. Each cell may be written once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    n: usize,
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            cells: vec![vec![None; n]; n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn check(&self, k: usize, j: usize) -> Result<()> {
        if k == 0 || j == 0 || k > self.n || j > self.n {
            return Err(Error::Matrix(format!("cell ({k}, {j}) outside a {0}x{0} matrix", self.n)));
        }
        if j < k {
            return Err(Error::Matrix(format!("cell ({k}, {j}) is above the diagonal")));
        }
        Ok(())
    }

    pub fn record(&mut self, k: usize, j: usize, value: f64) -> Result<()> {
        self.check(k, j)?;
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::Matrix(format!("accuracy {value} outside [0, 100]")));
        }
        let cell = &mut self.cells[k - 1][j - 1];
        if cell.is_some() {
            return Err(Error::Matrix(format!("cell ({k}, {j}) already written")));
        }
        *cell = Some(value);
        Ok(())
    }

    pub fn get(&self, k: usize, j: usize) -> Option<f64> {
        self.check(k, j).ok()?;
        self.cells[k - 1][j - 1]
    }

    fn at(&self, k: usize, j: usize) -> Result<f64> {
        self.get(k, j)
            .ok_or_else(|| Error::Matrix(format!("cell ({k}, {j}) is not populated")))
    }

    /// True when every cell on or below the final column is populated for rows `1..=j`.
    pub fn column_complete(&self, j: usize) -> bool {
        (1..=j).all(|k| self.get(k, j).is_some())
    }

    pub fn is_complete(&self) -> bool {
        (1..=self.n).all(|j| self.column_complete(j))
    }

    /// `f_k = (1/(n−k)) Σ_{i=k..n} (a_{k,i} − a_{k,n})`, with `f_n = 0`.
    pub fn per_task_forgetting(&self, k: usize) -> Result<f64> {
        let n = self.n;
        if k == n {
            return Ok(0.0);
        }
        let last = self.at(k, n)?;
        let mut sum = 0.0;
        for i in k..=n {
            sum += self.at(k, i)? - last;
        }
        Ok(sum / (n - k) as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["task".to_string()];
        header.extend((1..=self.n).map(|j| format!("after_{j}")));
        w.write_record(&header)?;
        for k in 1..=self.n {
            let mut row = vec![k.to_string()];
            row.extend((1..=self.n).map(|j| self.get(k, j).map(|v| format!("{v}")).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
        let mut m = Self::new(rows.len());
        for (k, row) in rows.iter().enumerate() {
            for (j, field) in row.iter().skip(1).enumerate() {
                if !field.is_empty() {
                    let v: f64 = field
                        .parse()
                        .map_err(|_| Error::Matrix(format!("bad accuracy value `{field}`")))?;
                    m.record(k + 1, j + 1, v)?;
                }
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n: usize,
    pub a1: f64,
    pub a2: f64,
    pub f: f64,
    pub s: f64,
    pub forgetting: Vec<f64>,
}

/// `S = A1·A2·n / (A1 + A2·n + F)`.
pub fn composite_score(a1: f64, a2: f64, f: f64, n: usize) -> f64 {
    let n = n as f64;
    a1 * a2 * n / (a1 + a2 * n + f)
}

pub fn compute_summary(m: &AccuracyMatrix) -> Result<MetricsSummary> {
    if !m.is_complete() {
        return Err(Error::Matrix("matrix is incomplete".into()));
    }
    let n = m.n();
    if n == 0 {
        return Err(Error::Matrix("empty matrix".into()));
    }
    let a1 = (1..=n).map(|k| m.at(k, k)).sum::<Result<f64>>()? / n as f64;
    let a2 = (1..=n).map(|k| m.at(k, n)).sum::<Result<f64>>()? / n as f64;
    let forgetting = (1..=n).map(|k| m.per_task_forgetting(k)).collect::<Result<Vec<_>>>()?;
    let f = forgetting.iter().sum::<f64>() / n as f64;
    Ok(MetricsSummary {
        n,
        a1,
        a2,
        f,
        s: composite_score(a1, a2, f, n),
        forgetting,
    })
}
