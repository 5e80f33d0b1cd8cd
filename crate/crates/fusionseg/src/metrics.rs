//! Confusion matrix and every derived score used by the evaluation CLI:
//! overall accuracy, per-class precision/recall/F1, and the micro-averaged
//! snow+clouds metrics.
//!
//! Convention: `counts[i][j]` counts pixels predicted as class i (row) with
//! reference class j (column).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Labels, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(class_names: &[&str]) -> ConfusionMatrix {
        let n = class_names.len();
        ConfusionMatrix {
            counts: vec![vec![0; n]; n],
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|row| row[j]).sum()
    }

    /// Add co-located (predicted, reference) pairs; `ignore_label` reference
    /// pixels are skipped. Additive across tiles, so a test set accumulates
    /// into one cumulative matrix.
    pub fn accumulate(&mut self, predicted: &Labels, reference: &Labels) -> Result<()> {
        if predicted.n != reference.n || predicted.h != reference.h || predicted.w != reference.w {
            return Err(Error::ShapeMismatch(format!(
                "predicted {}x{}x{} vs reference {}x{}x{}",
                predicted.n, predicted.h, predicted.w, reference.n, reference.h, reference.w
            )));
        }
        let n = self.classes();
        for (&p, &r) in predicted.data.iter().zip(&reference.data) {
            if r == IGNORE_LABEL {
                continue;
            }
            if (p as usize) >= n || (r as usize) >= n {
                return Err(Error::LabelOutOfRange { label: p.max(r), classes: n });
            }
            self.counts[p as usize][r as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise addition (per-tile matrices reduce deterministically).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.class_names != other.class_names {
            return Err(Error::ShapeMismatch("merging matrices with different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Correct pixels over all pixels.
    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyMatrix);
        }
        let correct: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        Ok(correct as f64 / total as f64)
    }

    /// Precision = C_aa / row-sum, recall = C_aa / column-sum. A zero
    /// denominator yields `None` (absent), never a silent zero.
    pub fn precision_recall(&self, a: usize) -> (Option<f64>, Option<f64>) {
        let diag = self.counts[a][a] as f64;
        let row = self.row_sum(a);
        let col = self.col_sum(a);
        let p = (row > 0).then(|| diag / row as f64);
        let r = (col > 0).then(|| diag / col as f64);
        (p, r)
    }

    /// Harmonic mean of precision and recall; absent when undefined.
    pub fn f1(&self, a: usize) -> Option<f64> {
        let (p, r) = self.precision_recall(a);
        harmonic(p, r)
    }

    /// Micro-averaged precision/recall over a class subset (snow and clouds
    /// in the published tables) plus their harmonic mean ("Avg F1").
    pub fn micro_f1(&self, classes: &[usize]) -> (Option<f64>, Option<f64>, Option<f64>) {
        let diag: u64 = classes.iter().map(|&a| self.counts[a][a]).sum();
        let rows: u64 = classes.iter().map(|&a| self.row_sum(a)).sum();
        let cols: u64 = classes.iter().map(|&a| self.col_sum(a)).sum();
        let p = (rows > 0).then(|| diag as f64 / rows as f64);
        let r = (cols > 0).then(|| diag as f64 / cols as f64);
        let f = harmonic(p, r);
        (p, r, f)
    }

    /// Column percentages (the published table layout): entry (i, j) is
    /// 100·C_ij / column-total j, or `None` for an empty column.
    pub fn column_percentages(&self) -> Vec<Vec<Option<f64>>> {
        let n = self.classes();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let col = self.col_sum(j);
                        (col > 0).then(|| 100.0 * self.counts[i][j] as f64 / col as f64)
                    })
                    .collect()
            })
            .collect()
    }

    /// Rebuild an (approximate) count matrix from a published
    /// column-percentage table: counts = round(% × column total / 100).
    pub fn from_column_percent(
        class_names: &[&str],
        percent: &[[f64; 4]; 4],
        column_totals: &[u64; 4],
    ) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(class_names);
        for i in 0..4 {
            for j in 0..4 {
                cm.counts[i][j] = (percent[i][j] * column_totals[j] as f64 / 100.0).round() as u64;
            }
        }
        cm
    }

    pub fn report(&self) -> Report {
        let n = self.classes();
        let per_class = (0..n)
            .map(|a| {
                let (p, r) = self.precision_recall(a);
                ClassScores {
                    class: self.class_names[a].clone(),
                    precision: p,
                    recall: r,
                    f1: self.f1(a),
                }
            })
            .collect();
        // snow and clouds by name, falling back to the first two classes
        let micro_classes: Vec<usize> = ["snow", "clouds"]
            .iter()
            .filter_map(|want| self.class_names.iter().position(|n| n == want))
            .collect();
        let micro_classes = if micro_classes.len() == 2 { micro_classes } else { vec![0, 1] };
        let (mp, mr, mf) = self.micro_f1(&micro_classes);
        Report {
            class_names: self.class_names.clone(),
            per_class,
            micro_precision: mp,
            micro_recall: mr,
            avg_f1: mf,
            overall_accuracy: self.overall_accuracy().ok(),
            column_percent: self.column_percentages(),
            column_totals: (0..n).map(|j| self.col_sum(j)).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("matrix serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ConfusionMatrix> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn harmonic(p: Option<f64>, r: Option<f64>) -> Option<f64> {
    match (p, r) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Full evaluation report: serializes to JSON, renders to fixed-width text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassScores>,
    pub micro_precision: Option<f64>,
    pub micro_recall: Option<f64>,
    pub avg_f1: Option<f64>,
    pub overall_accuracy: Option<f64>,
    pub column_percent: Vec<Vec<Option<f64>>>,
    pub column_totals: Vec<u64>,
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:>8.2}", 100.0 * v),
        None => format!("{:>8}", "-"),
    }
}

impl Report {
    /// Aligned text rendering; column widths are fixed so golden tests can
    /// diff the output.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8}", "class", "prec%", "rec%", "f1%");
        for c in &self.per_class {
            let _ = writeln!(s, "{:<10} {} {} {}", c.class, cell(c.precision), cell(c.recall), cell(c.f1));
        }
        let _ = writeln!(
            s,
            "{:<10} {} {} {}",
            "micro(s,c)",
            cell(self.micro_precision),
            cell(self.micro_recall),
            cell(self.avg_f1)
        );
        let _ = writeln!(s, "{:<10} {}", "OA", cell(self.overall_accuracy));
        let _ = writeln!(s);
        let _ = writeln!(s, "column % (rows predicted, columns reference)");
        let _ = write!(s, "{:<10}", "");
        for name in &self.class_names {
            let _ = write!(s, " {:>8}", name);
        }
        let _ = writeln!(s);
        for (i, row) in self.column_percent.iter().enumerate() {
            let _ = write!(s, "{:<10}", self.class_names[i]);
            for &v in row {
                let _ = write!(s, " {}", cell(v.map(|x| x / 100.0)));
            }
            let _ = writeln!(s);
        }
        let _ = write!(s, "{:<10}", "total");
        for &t in &self.column_totals {
            let _ = write!(s, " {t:>8}");
        }
        let _ = writeln!(s);
        s
    }
}
