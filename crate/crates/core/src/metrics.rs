//! Continual-learning average accuracy, corruption errors (mCE, rmCE) and
//! relative mean adversarial error (rmAE).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular `acc[q][j]`: accuracy on task `j` after training tasks
/// `0..=q`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f32>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            rows: (0..tasks).map(|q| vec![None; q + 1]).collect(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, q: usize, j: usize, acc: f32) -> Result<()> {
        match self.rows.get_mut(q).and_then(|r| r.get_mut(j)) {
            Some(cell) => {
                *cell = Some(acc);
                Ok(())
            }
            None => Err(Error::contract(format!("acc[{q}][{j}] is outside the lower triangle"))),
        }
    }

    pub fn get(&self, q: usize, j: usize) -> Option<f32> {
        self.rows.get(q).and_then(|r| r.get(j)).copied().flatten()
    }

    /// Empty cells above the diagonal.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let q = self.tasks();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["q".to_string()];
        header.extend((0..q).map(|j| format!("task{j}")));
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            for j in 0..q {
                rec.push(row.get(j).copied().flatten().map(|a| a.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for (q, rec) in r.records().enumerate() {
            let rec = rec?;
            let mut row = Vec::with_capacity(q + 1);
            for j in 0..=q {
                let cell = rec.get(j + 1).unwrap_or("");
                row.push(if cell.is_empty() {
                    None
                } else {
                    Some(
                        cell.parse()
                            .map_err(|_| Error::Data(format!("bad accuracy `{cell}`")))?,
                    )
                });
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }
}

/// Mean of `acc[q][j]` over `j <= q`.
pub fn avg_accuracy(m: &AccuracyMatrix, q: usize) -> Result<f32> {
    if q >= m.tasks() {
        return Err(Error::contract(format!("row {q} of a {}-task matrix", m.tasks())));
    }
    let mut sum = 0.0f64;
    for j in 0..=q {
        let a = m
            .get(q, j)
            .ok_or_else(|| Error::contract(format!("acc[{q}][{j}] is missing")))?;
        sum += f64::from(a);
    }
    Ok((sum / (q + 1) as f64) as f32)
}

/// Accuracies under corruption: `acc[type][severity]`, plus the clean
/// accuracy of the same model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RobustnessTable {
    pub clean_acc: f32,
    pub acc: BTreeMap<String, BTreeMap<String, f32>>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    corruption: String,
    severity: String,
    accuracy: f32,
}

/// The `corruption` value of the row holding the clean accuracy.
pub const CLEAN: &str = "clean";

impl RobustnessTable {
    pub fn new(clean_acc: f32) -> Self {
        Self {
            clean_acc,
            acc: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, corruption: &str, severity: &str, acc: f32) {
        self.acc
            .entry(corruption.to_string())
            .or_default()
            .insert(severity.to_string(), acc);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.serialize(Row {
            corruption: CLEAN.into(),
            severity: String::new(),
            accuracy: self.clean_acc,
        })?;
        for (c, sev) in &self.acc {
            for (s, &a) in sev {
                w.serialize(Row {
                    corruption: c.clone(),
                    severity: s.clone(),
                    accuracy: a,
                })?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut t = Self::default();
        for row in r.deserialize::<Row>() {
            let row = row?;
            if row.corruption == CLEAN {
                t.clean_acc = row.accuracy;
            } else {
                t.insert(&row.corruption, &row.severity, row.accuracy);
            }
        }
        Ok(t)
    }

    fn same_grid(&self, other: &Self) -> Result<()> {
        let keys = |t: &Self| -> Vec<(String, Vec<String>)> {
            t.acc
                .iter()
                .map(|(c, s)| (c.clone(), s.keys().cloned().collect()))
                .collect()
        };
        if keys(self) != keys(other) {
            return Err(Error::contract("robustness tables have different corruption grids"));
        }
        Ok(())
    }
}

/// `mean_c [ sum_s num(f) / sum_s num(ref) ]` over corruption types.
fn mean_of_ratios(
    f: &RobustnessTable,
    reference: &RobustnessTable,
    num: impl Fn(&RobustnessTable, f32) -> f64,
) -> Result<f32> {
    f.same_grid(reference)?;
    if f.acc.is_empty() {
        return Err(Error::contract("no corruption types"));
    }
    let mut total = 0.0f64;
    for (c, sev) in &f.acc {
        let rsev = &reference.acc[c];
        let top: f64 = sev.values().map(|&a| num(f, a)).sum();
        let bottom: f64 = rsev.values().map(|&a| num(reference, a)).sum();
        if bottom == 0.0 {
            return Err(Error::UndefinedRatio(format!(
                "reference error for corruption `{c}` is zero"
            )));
        }
        total += top / bottom;
    }
    Ok((total / f.acc.len() as f64) as f32)
}

/// Mean corruption error relative to a reference model.
pub fn mce(f: &RobustnessTable, reference: &RobustnessTable) -> Result<f32> {
    mean_of_ratios(f, reference, |_, a| 1.0 - f64::from(a))
}

/// Relative mean corruption error: accuracy drops from each model's own
/// clean accuracy.
pub fn rmce(f: &RobustnessTable, reference: &RobustnessTable) -> Result<f32> {
    mean_of_ratios(f, reference, |t, a| f64::from(t.clean_acc) - f64::from(a))
}

/// Relative mean adversarial error over an `(eps, accuracy)` grid. Entries
/// with `eps == 0` are skipped; both drops are zero there.
pub fn rmae(clean_f: f32, adv_f: &[(f32, f32)], clean_ref: f32, adv_ref: &[(f32, f32)]) -> Result<f32> {
    if adv_f.len() != adv_ref.len() || adv_f.iter().zip(adv_ref).any(|(a, b)| a.0 != b.0) {
        return Err(Error::contract("adversarial grids differ"));
    }
    let mut total = 0.0f64;
    let mut count = 0;
    for (&(eps, af), &(_, ar)) in adv_f.iter().zip(adv_ref) {
        if eps == 0.0 {
            continue;
        }
        let bottom = f64::from(clean_ref) - f64::from(ar);
        if bottom == 0.0 {
            return Err(Error::UndefinedRatio(format!(
                "reference accuracy does not drop at eps = {eps}"
            )));
        }
        total += (f64::from(clean_f) - f64::from(af)) / bottom;
        count += 1;
    }
    if count == 0 {
        return Err(Error::contract("no non-zero eps in the grid"));
    }
    Ok((total / count as f64) as f32)
}
