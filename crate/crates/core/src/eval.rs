//! Accuracy on the whole test set and on its short (≤3 s) and long
//! (>3 s) halves, confusion matrices, and system comparison tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SHORT_MAX_SECS;
use crate::frontend::FeatureMatrix;
use crate::models::argmax;
use crate::pipeline::{Dataset, System};
use crate::{Error, Real, Result};

pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const COUNTS_CSV: &str = "confusion_counts.csv";
pub const PERCENT_CSV: &str = "confusion_percent.csv";
pub const HEATMAP_FILE: &str = "confusion.pgm";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";

/// Pixels per confusion cell in the heatmap.
const CELL: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub utt_id: String,
    pub duration: f64,
    pub truth: usize,
    pub predicted: usize,
}

/// Accuracy counts for one evaluated system. Percentages are derived from
/// the counts so the sub-task identities hold exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub system: String,
    pub class_names: Vec<String>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub short_total: usize,
    pub short_correct: usize,
    pub long_total: usize,
    pub long_correct: usize,
}

fn percent(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * correct as f64 / total as f64)
}

impl Metrics {
    pub fn from_predictions(system: &str, class_names: &[String], predictions: &[Prediction]) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        let n = class_names.len();
        let mut confusion = vec![vec![0; n]; n];
        let (mut short_total, mut short_correct, mut long_total, mut long_correct) = (0, 0, 0, 0);
        for p in predictions {
            if p.truth >= n || p.predicted >= n {
                return Err(Error::DataFault(format!("{}: class outside 0..{n}", p.utt_id)));
            }
            confusion[p.truth][p.predicted] += 1;
            let hit = usize::from(p.truth == p.predicted);
            if p.duration <= SHORT_MAX_SECS {
                short_total += 1;
                short_correct += hit;
            } else {
                long_total += 1;
                long_correct += hit;
            }
        }
        Ok(Metrics {
            system: system.to_string(),
            class_names: class_names.to_vec(),
            confusion,
            short_total,
            short_correct,
            long_total,
            long_correct,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    pub fn acc_all(&self) -> f64 {
        percent(self.correct(), self.total()).unwrap_or(0.0)
    }

    pub fn acc_short(&self) -> Option<f64> {
        percent(self.short_correct, self.short_total)
    }

    pub fn acc_long(&self) -> Option<f64> {
        percent(self.long_correct, self.long_total)
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.confusion[class].iter().sum()
    }

    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.confusion.len())
            .map(|c| percent(self.confusion[c][c], self.class_count(c)))
            .collect()
    }

    /// `Σ row` per class, for checking against the test manifest.
    pub fn row_sums(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    /// Row-normalized confusion in percent; rows without utterances are 0.
    pub fn confusion_percent(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter().map(|&c| percent(c, n).unwrap_or(0.0)).collect()
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(METRICS_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads `metrics.json` from a report directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Plain-text summary with the three accuracies and per-class accuracy
    /// to one decimal.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(s, "system: {}", self.system);
        let _ = writeln!(s, "utterances: {} ({} ≤3s, {} >3s)", self.total(), self.short_total, self.long_total);
        let _ = writeln!(s, "acc_all: {:.2}", self.acc_all());
        let _ = writeln!(s, "acc_short: {}", fmt(self.acc_short()));
        let _ = writeln!(s, "acc_long: {}", fmt(self.acc_long()));
        for (name, acc) in self.class_names.iter().zip(self.per_class_accuracy()) {
            let acc = acc.map_or_else(|| "-".to_string(), |v| format!("{v:.1}%"));
            let _ = writeln!(s, "  {name}: {acc}");
        }
        s
    }
}

/// Runs `predict` (dialect log-probabilities) on every utterance in
/// parallel; the prediction is the arg-max.
pub fn predict_all<F>(data: &Dataset, predict: F) -> Result<Vec<Prediction>>
where
    F: Fn(&FeatureMatrix) -> Result<Vec<Real>> + Sync,
{
    data.utterances
        .par_iter()
        .map(|u| {
            let lp = predict(&u.features)?;
            Ok(Prediction {
                utt_id: u.utt_id.clone(),
                duration: u.duration,
                truth: u.dialect,
                predicted: argmax(&lp),
            })
        })
        .collect()
}

/// Full eval-mode inference of `system` over the test set.
pub fn evaluate(system: &System, name: &str, class_names: &[String], test: &Dataset) -> Result<(Metrics, Vec<Prediction>)> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let predictions = predict_all(test, |f| system.dialect_log_probs(f))?;
    let metrics = Metrics::from_predictions(name, class_names, &predictions)?;
    Ok((metrics, predictions))
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut s = String::from("utt_id\tduration\ttruth\tpredicted\n");
    for p in predictions {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", p.utt_id, p.duration, p.truth, p.predicted);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes the confusion matrices as CSV (counts and row percentages) and a
/// grayscale PGM heatmap where darker means more of the row's utterances.
/// Per-class accuracies are written as comments in the PGM header.
pub fn render_confusion(metrics: &Metrics, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = format!("truth\\pred,{}\n", metrics.class_names.join(","));

    let mut counts = header.clone();
    for (name, row) in metrics.class_names.iter().zip(&metrics.confusion) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(counts, "{name},{}", cells.join(","));
    }
    let pct = metrics.confusion_percent();
    let mut percent_csv = header;
    for (name, row) in metrics.class_names.iter().zip(&pct) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
        let _ = writeln!(percent_csv, "{name},{}", cells.join(","));
    }

    let n = metrics.class_names.len();
    let side = n * CELL;
    let mut pgm = format!("P5\n# confusion matrix: rows truth, columns prediction, darker = more\n");
    for (name, acc) in metrics.class_names.iter().zip(metrics.per_class_accuracy()) {
        let acc = acc.map_or_else(|| "-".to_string(), |v| format!("{v:.1}%"));
        let _ = writeln!(pgm, "# {name} accuracy {acc}");
    }
    let _ = write!(pgm, "{side} {side}\n255\n");
    let mut bytes = pgm.into_bytes();
    for y in 0..side {
        for x in 0..side {
            let v = pct[y / CELL][x / CELL];
            bytes.push((255.0 - (v / 100.0 * 255.0)).round().clamp(0.0, 255.0) as u8);
        }
    }

    let files = [
        (COUNTS_CSV, counts.into_bytes()),
        (PERCENT_CSV, percent_csv.into_bytes()),
        (HEATMAP_FILE, bytes),
    ];
    let mut written = Vec::new();
    for (name, content) in files {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Everything `evaluate` produces for a report directory.
pub fn write_report(metrics: &Metrics, predictions: &[Prediction], dir: &Path) -> Result<()> {
    let mut files = render_confusion(metrics, dir)?;
    files.push(metrics.save(dir)?);
    write_predictions(&dir.join(PREDICTIONS_FILE), predictions)?;
    let summary = dir.join(SUMMARY_FILE);
    std::fs::write(&summary, metrics.summary()).map_err(|e| Error::io(&summary, e))
}

/// System comparison with columns All, ≤3s, >3s; the best value of each
/// column is marked `*` on every row that reaches it.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub system: String,
    /// All, ≤3s, >3s.
    pub values: [Option<f64>; 3],
    pub best: [bool; 3],
}

pub const COLUMNS: [&str; 3] = ["All", "≤3s", ">3s"];

/// Values closer than this count as a tie.
const TIE: f64 = 1e-9;

pub fn compare_systems(metrics: &[Metrics]) -> Comparison {
    let values: Vec<[Option<f64>; 3]> = metrics
        .iter()
        .map(|m| [Some(m.acc_all()), m.acc_short(), m.acc_long()])
        .collect();
    let best: Vec<Option<f64>> = (0..3)
        .map(|c| values.iter().filter_map(|v| v[c]).fold(None, |b: Option<f64>, v| Some(b.map_or(v, |b| b.max(v)))))
        .collect();
    let rows = metrics
        .iter()
        .zip(values)
        .map(|(m, values)| ComparisonRow {
            system: m.system.clone(),
            values,
            best: std::array::from_fn(|c| matches!((values[c], best[c]), (Some(v), Some(b)) if b - v <= TIE)),
        })
        .collect();
    Comparison { rows }
}

impl Comparison {
    fn cell(row: &ComparisonRow, c: usize) -> String {
        match row.values[c] {
            Some(v) => format!("{v:.2}{}", if row.best[c] { "*" } else { "" }),
            None => "-".to_string(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("system,{}\n", COLUMNS.join(","));
        for r in &self.rows {
            let cells: Vec<String> = (0..3).map(|c| Self::cell(r, c)).collect();
            let _ = writeln!(s, "{},{}", r.system, cells.join(","));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.system.chars().count()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<width$}", "System");
        for c in COLUMNS {
            let _ = write!(s, " {c:>8}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<width$}", r.system);
            for c in 0..3 {
                let _ = write!(s, " {:>8}", Self::cell(r, c));
            }
            s.push('\n');
        }
        s.push_str("* best in column\n");
        s
    }
}
