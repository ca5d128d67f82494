//! Hop-distance metrics, evaluation conditions and report tables.

pub mod checks;
pub mod experiment;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;

use crate::dataset::{modify_dataset, snr_sigma, Dataset, ModificationSpec};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::seed;

pub use experiment::{
    export_hidden_features, run_augmentation_study, run_condition_matrix, run_high_impedance_study,
    run_replicates, run_size_sweep, Experiment, PreparedData, Study,
};

/// Highest hop level reported.
pub const MAX_HOP: usize = 3;

fn check_inputs(predictions: &[usize], labels: &[usize], hops: &Array2<usize>) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let c = hops.nrows();
    if hops.ncols() != c {
        return Err(Error::Shape(format!("hop matrix is {}x{}", c, hops.ncols())));
    }
    for &l in predictions.iter().chain(labels) {
        if l >= c {
            return Err(Error::Label { label: l, classes: c });
        }
    }
    Ok(())
}

/// Share of predictions within `k` hops of the true class.
pub fn khop_accuracy(predictions: &[usize], labels: &[usize], hops: &Array2<usize>, k: usize) -> Result<f64> {
    check_inputs(predictions, labels, hops)?;
    if labels.is_empty() {
        return Err(Error::Dataset("no samples to score".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| hops[[**l, **p]] <= k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Misclassification {
    pub true_class: usize,
    pub predicted: usize,
    pub hops: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    /// `within[k]` counts predictions at most `k` hops from the truth.
    pub within: [usize; MAX_HOP + 1],
    pub misclassified: Vec<Misclassification>,
    /// Misclassifications by exact hop distance; index 0 is always 0.
    pub hop_histogram: Vec<usize>,
}

impl MetricsReport {
    pub fn compute(predictions: &[usize], labels: &[usize], hops: &Array2<usize>) -> Result<Self> {
        check_inputs(predictions, labels, hops)?;
        let mut within = [0; MAX_HOP + 1];
        let mut misclassified = Vec::new();
        let mut hop_histogram = vec![0];
        for (&p, &l) in predictions.iter().zip(labels) {
            let h = hops[[l, p]];
            for (k, w) in within.iter_mut().enumerate() {
                if h <= k {
                    *w += 1;
                }
            }
            if p != l {
                misclassified.push(Misclassification {
                    true_class: l,
                    predicted: p,
                    hops: h,
                });
                if h >= hop_histogram.len() {
                    hop_histogram.resize(h + 1, 0);
                }
                hop_histogram[h] += 1;
            }
        }
        Ok(MetricsReport {
            samples: labels.len(),
            within,
            misclassified,
            hop_histogram,
        })
    }

    pub fn accuracy(&self, k: usize) -> f64 {
        if self.samples == 0 {
            return 0.0;
        }
        self.within[k.min(MAX_HOP)] as f64 / self.samples as f64
    }

    pub fn zero_hop(&self) -> f64 {
        self.accuracy(0)
    }

    pub fn one_hop(&self) -> f64 {
        self.accuracy(1)
    }

    /// Misclassified pairs more than two hops apart.
    pub fn far_misses(&self) -> impl Iterator<Item = &Misclassification> {
        self.misclassified.iter().filter(|m| m.hops > 2)
    }
}

/// A named measurement modification.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub name: String,
    pub spec: ModificationSpec,
}

impl Condition {
    pub fn new(name: impl Into<String>, spec: ModificationSpec) -> Self {
        Condition { name: name.into(), spec }
    }

    /// Substream seed for this condition; independent of the other conditions.
    pub fn seed(&self, master: u64) -> u64 {
        seed::derive(master, &[seed::hash_str(&self.name)])
    }
}

/// Clean data plus every combination of 45 dB noise (I), one dropped
/// measured bus (II) and 1% entry loss (III).
pub fn table_conditions() -> Vec<Condition> {
    let noise = snr_sigma(45.0);
    let mut out = vec![Condition::new("clean", ModificationSpec::NONE)];
    for (name, i, ii, iii) in [
        ("I", true, false, false),
        ("II", false, true, false),
        ("III", false, false, true),
        ("I+II", true, true, false),
        ("I+III", true, false, true),
        ("II+III", false, true, true),
        ("I+II+III", true, true, true),
    ] {
        let spec = ModificationSpec {
            sigma_noise: if i { noise } else { 0.0 },
            n_drop: usize::from(ii),
            p_loss: if iii { 0.01 } else { 0.0 },
        };
        out.push(Condition::new(name, spec));
    }
    out
}

/// The five escalating cases `(10^(-snr/20), k, k/100)` for
/// `(snr, k) = (45, 1) .. (25, 5)`.
pub fn augmentation_cases() -> Vec<Condition> {
    (1..=5)
        .map(|k| {
            let snr = 50.0 - 5.0 * k as f64;
            let spec = ModificationSpec {
                sigma_noise: snr_sigma(snr),
                n_drop: k,
                p_loss: k as f64 / 100.0,
            };
            Condition::new(format!("case {k}"), spec)
        })
        .collect()
}

/// Fault-resistance test buckets in ohms.
pub const IMPEDANCE_BUCKETS: [(f64, f64); 5] = [
    (100.0, 1000.0),
    (1000.0, 2000.0),
    (2000.0, 3000.0),
    (3000.0, 4000.0),
    (4000.0, 5000.0),
];

pub const SIZE_FRACTIONS: [f64; 5] = [1.0, 0.5, 0.25, 0.1, 0.05];

/// Applies each condition to a fresh copy of `test` and scores every model
/// on it. Cells are indexed `[model][condition]`.
pub fn evaluate_conditions(
    models: &[(&str, &Model)],
    test: &Dataset,
    conditions: &[Condition],
    hops: &Array2<usize>,
    master_seed: u64,
) -> Result<ReportTable> {
    if conditions.is_empty() {
        return Err(Error::Config("condition list is empty".into()));
    }
    let mut table = ReportTable::new(
        models.iter().map(|(n, _)| n.to_string()).collect(),
        conditions.iter().map(|c| c.name.clone()).collect(),
    );
    let labels = test.labels();
    for (ci, cond) in conditions.iter().enumerate() {
        let mut data = test.clone();
        modify_dataset(&mut data, &cond.spec, cond.seed(master_seed))?;
        for (mi, (_, model)) in models.iter().enumerate() {
            let pred = model.predict(&data.samples)?;
            table.cells[mi][ci] = Some(MetricsReport::compute(&pred, &labels, hops)?);
        }
    }
    Ok(table)
}

/// Metrics keyed by (model, row). Rows are conditions, resistance buckets or
/// dataset fractions depending on the study.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub models: Vec<String>,
    pub rows: Vec<String>,
    pub cells: Vec<Vec<Option<MetricsReport>>>,
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

impl ReportTable {
    pub fn new(models: Vec<String>, rows: Vec<String>) -> Self {
        let cells = vec![vec![None; rows.len()]; models.len()];
        ReportTable { models, rows, cells }
    }

    pub fn cell(&self, model: &str, row: &str) -> Option<&MetricsReport> {
        let m = self.models.iter().position(|x| x == model)?;
        let r = self.rows.iter().position(|x| x == row)?;
        self.cells[m][r].as_ref()
    }

    /// Aligned table of `acc / one-hop` cells in percent; with `all_hops`,
    /// zero- to three-hop accuracies. Far misclassifications follow, named
    /// through `class_names`.
    pub fn to_text(&self, class_names: &[String], all_hops: bool) -> String {
        let mut grid = vec![std::iter::once(String::new()).chain(self.models.iter().cloned()).collect::<Vec<_>>()];
        for (r, row) in self.rows.iter().enumerate() {
            let mut line = vec![row.clone()];
            for m in 0..self.models.len() {
                line.push(match &self.cells[m][r] {
                    None => "-".into(),
                    Some(c) if all_hops => (0..=MAX_HOP).map(|k| pct(c.accuracy(k))).collect::<Vec<_>>().join(" / "),
                    Some(c) => format!("{} / {}", pct(c.zero_hop()), pct(c.one_hop())),
                });
            }
            grid.push(line);
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &grid {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut header = false;
        for (m, model) in self.models.iter().enumerate() {
            for (r, row) in self.rows.iter().enumerate() {
                let Some(cell) = &self.cells[m][r] else { continue };
                let mut pairs: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
                for x in cell.far_misses() {
                    *pairs.entry((x.true_class, x.predicted, x.hops)).or_default() += 1;
                }
                if pairs.is_empty() {
                    continue;
                }
                if !header {
                    out.push_str("\nmisclassified more than two hops away (true -> predicted, hops, count)\n");
                    header = true;
                }
                let _ = writeln!(out, "{model} / {row}:");
                for ((t, p, h), n) in pairs {
                    let _ = writeln!(out, "  {} -> {}  {h}  {n}", name(t), name(p));
                }
            }
        }
        out
    }

    /// One line per filled cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,row,samples,zero_hop,one_hop,two_hop,three_hop,far_misses\n");
        for (m, model) in self.models.iter().enumerate() {
            for (r, row) in self.rows.iter().enumerate() {
                if let Some(c) = &self.cells[m][r] {
                    let _ = writeln!(
                        out,
                        "{model},{row},{},{:.6},{:.6},{:.6},{:.6},{}",
                        c.samples,
                        c.accuracy(0),
                        c.accuracy(1),
                        c.accuracy(2),
                        c.accuracy(3),
                        c.far_misses().count()
                    );
                }
            }
        }
        out
    }
}

/// Mean accuracies over replicate tables with identical layout, as
/// `[model][row][hop]`.
pub fn mean_accuracies(tables: &[ReportTable]) -> Result<Vec<Vec<[f64; MAX_HOP + 1]>>> {
    let first = tables.first().ok_or_else(|| Error::Config("no replicate tables".into()))?;
    let mut out = vec![vec![[0.0; MAX_HOP + 1]; first.rows.len()]; first.models.len()];
    for t in tables {
        if t.models != first.models || t.rows != first.rows {
            return Err(Error::Shape("replicate tables differ in layout".into()));
        }
        for (m, row) in out.iter_mut().enumerate() {
            for (r, acc) in row.iter_mut().enumerate() {
                let cell = t.cells[m][r].as_ref().ok_or_else(|| Error::Shape("missing replicate cell".into()))?;
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += cell.accuracy(k) / tables.len() as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Replicate rows followed by `mean` rows.
pub fn replicates_csv(tables: &[ReportTable]) -> Result<String> {
    let means = mean_accuracies(tables)?;
    let mut out = String::from("replicate,model,row,zero_hop,one_hop,two_hop,three_hop\n");
    for (i, t) in tables.iter().enumerate() {
        for (m, model) in t.models.iter().enumerate() {
            for (r, row) in t.rows.iter().enumerate() {
                let c = t.cells[m][r].as_ref().expect("checked by mean_accuracies");
                let _ = writeln!(
                    out,
                    "{i},{model},{row},{:.6},{:.6},{:.6},{:.6}",
                    c.accuracy(0),
                    c.accuracy(1),
                    c.accuracy(2),
                    c.accuracy(3)
                );
            }
        }
    }
    let first = &tables[0];
    for (m, model) in first.models.iter().enumerate() {
        for (r, row) in first.rows.iter().enumerate() {
            let a = means[m][r];
            let _ = writeln!(out, "mean,{model},{row},{:.6},{:.6},{:.6},{:.6}", a[0], a[1], a[2], a[3]);
        }
    }
    Ok(out)
}

/// Number of adjacent pairs where `values` increases.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}
