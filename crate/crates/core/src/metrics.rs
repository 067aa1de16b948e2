//! Accuracy matrix and the incremental-learning metrics computed from it.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Lower-triangular `a[i][j]`: accuracy on task `j`'s test set after training
/// task `i` (both 1-based in the API, 0-based in storage).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends row `T + 1`, which must hold exactly `T + 1` entries in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return contract(format!(
                "accuracy row {expected} must have {expected} entries, got {}",
                row.len()
            ));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return contract(format!("accuracy {v} outside [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// `a_{i,j}`, 1-based.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if j == 0 || j > i {
            return None;
        }
        self.rows.get(i.checked_sub(1)?)?.get(j - 1).copied()
    }

    fn check_row(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.rows.len() {
            return contract(format!("task index {i} outside 1..={}", self.rows.len()));
        }
        Ok(())
    }

    /// Average accuracy `A_i` over tasks `1..=i` after training task `i`.
    pub fn avg_accuracy(&self, i: usize) -> Result<f64> {
        self.check_row(i)?;
        let row = &self.rows[i - 1];
        Ok(row.iter().sum::<f64>() / i as f64)
    }

    /// Average forgetting `F_i`; absent for `i = 1`.
    pub fn avg_forgetting(&self, i: usize) -> Result<Option<f64>> {
        self.check_row(i)?;
        if i < 2 {
            return Ok(None);
        }
        let total: f64 = (1..i)
            .map(|j| {
                let best = (j..i)
                    .map(|k| self.rows[k - 1][j - 1])
                    .fold(f64::NEG_INFINITY, f64::max);
                best - self.rows[i - 1][j - 1]
            })
            .sum();
        Ok(Some(total / (i - 1) as f64))
    }

    /// Average learning accuracy `A_cur`: mean of the diagonal.
    pub fn avg_learning_accuracy(&self) -> Result<f64> {
        if self.rows.is_empty() {
            return contract("empty accuracy matrix");
        }
        let t = self.rows.len();
        Ok((1..=t).map(|i| self.rows[i - 1][i - 1]).sum::<f64>() / t as f64)
    }

    /// The `A_i` curve for `i = 1..=T`.
    pub fn accuracy_curve(&self) -> Vec<f64> {
        (1..=self.tasks())
            .map(|i| self.avg_accuracy(i).expect("row in range"))
            .collect()
    }

    pub fn summary(&self) -> Result<MetricSummary> {
        let t = self.tasks();
        Ok(MetricSummary {
            a_t: self.avg_accuracy(t)?,
            f_t: self.avg_forgetting(t)?,
            a_cur: self.avg_learning_accuracy()?,
            per_task_a_i: self.accuracy_curve(),
        })
    }

    /// Row `i` holds `a_{i,1..i}`, comma separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut m = Self::new();
        for (idx, record) in reader.records().enumerate() {
            let fmt = |msg: String| Error::Format {
                file: "accuracy matrix".into(),
                row: idx + 1,
                msg,
            };
            let record = record.map_err(|e| fmt(e.to_string()))?;
            let row = record
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| fmt(format!("bad accuracy {f:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            m.push_row(row).map_err(|e| fmt(e.to_string()))?;
        }
        Ok(m)
    }
}

/// Final-task metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(rename = "A_T")]
    pub a_t: f64,
    /// Absent for a single task.
    #[serde(rename = "F_T", default, skip_serializing_if = "Option::is_none")]
    pub f_t: Option<f64>,
    #[serde(rename = "A_cur")]
    pub a_cur: f64,
    #[serde(rename = "per_task_A_i")]
    pub per_task_a_i: Vec<f64>,
}
