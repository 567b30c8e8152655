//! Span-level micro-F1, multi-seed aggregation, SC-score density export and
//! comparison tables.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSample, EntityPair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub per_type: BTreeMap<String, Counts>,
}

impl ScoreReport {
    fn from_counts(total: Counts, per_type: BTreeMap<String, Counts>) -> Self {
        ScoreReport {
            precision: total.precision(),
            recall: total.recall(),
            f1: total.f1(),
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            per_type,
        }
    }
}

/// Exact-match micro P/R/F1 over `(span, type)` sets aligned by sample id.
pub fn micro_f1(predictions: &[(String, Vec<EntityPair>)], golds: &[(String, Vec<EntityPair>)]) -> Result<ScoreReport> {
    let pred_map: HashMap<&str, &Vec<EntityPair>> = predictions.iter().map(|(id, p)| (id.as_str(), p)).collect();
    let gold_map: HashMap<&str, &Vec<EntityPair>> = golds.iter().map(|(id, g)| (id.as_str(), g)).collect();
    let mut missing: Vec<String> = pred_map
        .keys()
        .filter(|id| !gold_map.contains_key(*id))
        .map(|id| format!("{id} (no gold)"))
        .chain(
            gold_map
                .keys()
                .filter(|id| !pred_map.contains_key(*id))
                .map(|id| format!("{id} (no prediction)")),
        )
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::Data(format!("sample ids do not align: {}", missing.join(", "))));
    }

    let mut total = Counts::default();
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    for (id, gold) in golds {
        let pred: HashSet<&EntityPair> = pred_map[id.as_str()].iter().collect();
        let gold: HashSet<&EntityPair> = gold.iter().collect();
        for p in &pred {
            let c = per_type.entry(p.1.clone()).or_default();
            if gold.contains(p) {
                total.tp += 1;
                c.tp += 1;
            } else {
                total.fp += 1;
                c.fp += 1;
            }
        }
        for g in gold.difference(&pred) {
            total.fn_ += 1;
            per_type.entry(g.1.clone()).or_default().fn_ += 1;
        }
    }
    Ok(ScoreReport::from_counts(total, per_type))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Arithmetic mean and population (N-divisor) standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        if values.iter().all(|v| *v == values[0]) {
            return MeanStd { mean: values[0], std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }

    /// `68.97_{0.22}`: mean with the standard deviation as a subscript, both
    /// to two decimals. Inputs are fractions and are printed as percentages.
    pub fn format_percent(&self) -> String {
        format!("{:.2}_{{{:.2}}}", self.mean * 100.0, self.std * 100.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

pub fn multi_seed_report(reports: &[ScoreReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Data("no run reports to aggregate".into()));
    }
    let col = |f: fn(&ScoreReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        runs: reports.len(),
        precision: col(|r| r.precision),
        recall: col(|r| r.recall),
        f1: col(|r| r.f1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityTable {
    pub n_samples: u32,
    /// `bins + 1` edges over `[0.5, n_samples + 0.5]`.
    pub edges: Vec<f64>,
    pub true_counts: Vec<u64>,
    pub false_counts: Vec<u64>,
    pub true_density: Vec<f64>,
    pub false_density: Vec<f64>,
    pub mean_true: Option<f64>,
    pub mean_false: Option<f64>,
}

impl DensityTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,true_count,false_count,true_density,false_density\n");
        for i in 0..self.true_counts.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.true_counts[i],
                self.false_counts[i],
                self.true_density[i],
                self.false_density[i]
            ));
        }
        out
    }
}

/// Histogram entity-level votes separately for true and false predictions.
pub fn sc_density(pool: &[AnnotatedSample], gold: &HashMap<String, Vec<EntityPair>>, bins: usize) -> Result<DensityTable> {
    if bins == 0 {
        return Err(Error::Config("density needs at least one bin".into()));
    }
    let n_samples = pool.iter().map(|s| s.n_samples).max().unwrap_or(0).max(1);
    let lo = 0.5;
    let width = n_samples as f64 / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut true_counts = vec![0u64; bins];
    let mut false_counts = vec![0u64; bins];
    let (mut sum_t, mut sum_f) = (0.0, 0.0);
    for s in pool {
        let g: HashSet<&EntityPair> = gold
            .get(&s.id)
            .ok_or_else(|| Error::Data(format!("no gold for pool sample {:?}", s.id)))?
            .iter()
            .collect();
        for p in &s.predictions {
            let bin = (((p.votes as f64 - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            if g.contains(&p.pair()) {
                true_counts[bin] += 1;
                sum_t += p.votes as f64;
            } else {
                false_counts[bin] += 1;
                sum_f += p.votes as f64;
            }
        }
    }
    let density = |counts: &[u64]| {
        let total: u64 = counts.iter().sum();
        counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / (total as f64 * width) })
            .collect::<Vec<_>>()
    };
    let nt: u64 = true_counts.iter().sum();
    let nf: u64 = false_counts.iter().sum();
    Ok(DensityTable {
        n_samples,
        true_density: density(&true_counts),
        false_density: density(&false_counts),
        mean_true: (nt > 0).then(|| sum_t / nt as f64),
        mean_false: (nf > 0).then(|| sum_f / nf as f64),
        edges,
        true_counts,
        false_counts,
    })
}

/// A named row of a comparison table; cells are keyed by column name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub cells: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

/// Columns appear in first-seen order across rows; missing cells are blank.
pub fn comparison_table(rows: &[TableRow]) -> ComparisonTable {
    let mut columns: Vec<String> = Vec::new();
    for r in rows {
        for (c, _) in &r.cells {
            if !columns.contains(c) {
                columns.push(c.clone());
            }
        }
    }
    let rows = rows
        .iter()
        .map(|r| {
            let cells = columns
                .iter()
                .map(|c| {
                    r.cells
                        .iter()
                        .find(|(k, _)| k == c)
                        .map(|(_, v)| v.clone())
                        .unwrap_or_default()
                })
                .collect();
            (r.name.clone(), cells)
        })
        .collect();
    ComparisonTable { columns, rows }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Method");
        for c in &self.columns {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        out.push('\n');
        for (name, cells) in &self.rows {
            out.push_str(&csv_field(name));
            for c in cells {
                out.push(',');
                out.push_str(&csv_field(c));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut widths = vec!["Method".chars().count()];
        widths.extend(self.columns.iter().map(|c| c.chars().count()));
        for (name, cells) in &self.rows {
            widths[0] = widths[0].max(name.chars().count());
            for (i, c) in cells.iter().enumerate() {
                widths[i + 1] = widths[i + 1].max(c.chars().count());
            }
        }
        let line = |first: &str, rest: &[String]| {
            let mut s = format!("{first:<w$}", w = widths[0]);
            for (i, c) in rest.iter().enumerate() {
                s.push_str(&format!("  {c:>w$}", w = widths[i + 1]));
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line("Method", &self.columns);
        let rule: usize = widths.iter().sum::<usize>() + 2 * self.columns.len();
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for (name, cells) in &self.rows {
            out.push_str(&line(name, cells));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str, t: &str) -> EntityPair {
        (s.into(), t.into())
    }

    #[test]
    fn identical_sets_score_one() {
        let g = vec![("a".to_string(), vec![p("A", "PER"), p("B", "LOC")])];
        let r = micro_f1(&g, &g).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!((r.tp, r.fp, r.fn_), (2, 0, 0));
    }

    #[test]
    fn half_right() {
        let gold = vec![("a".to_string(), vec![p("A", "PER"), p("B", "LOC")])];
        let pred = vec![("a".to_string(), vec![p("A", "PER"), p("C", "ORG")])];
        let r = micro_f1(&pred, &gold).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 1));
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        assert_eq!(r.per_type["ORG"], Counts { tp: 0, fp: 1, fn_: 0 });
        assert_eq!(r.per_type["LOC"], Counts { tp: 0, fp: 0, fn_: 1 });
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gold = vec![("a".to_string(), vec![p("A", "PER")])];
        let pred = vec![("a".to_string(), vec![])];
        let r = micro_f1(&pred, &gold).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn misaligned_ids_are_listed() {
        let gold = vec![("a".to_string(), vec![]), ("b".to_string(), vec![])];
        let pred = vec![("a".to_string(), vec![]), ("c".to_string(), vec![])];
        let msg = micro_f1(&pred, &gold).unwrap_err().to_string();
        assert!(msg.contains("b (no prediction)") && msg.contains("c (no gold)"), "{msg}");
    }

    #[test]
    fn two_run_aggregate_matches_table_style() {
        let m = MeanStd::of(&[0.6875, 0.6919]);
        assert!((m.mean - 0.6897).abs() < 1e-12);
        assert!((m.std - 0.0022).abs() < 1e-12);
        assert_eq!(m.format_percent(), "68.97_{0.22}");
    }

    #[test]
    fn single_and_identical_reports_have_zero_std() {
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
        assert_eq!(MeanStd::of(&[0.7, 0.7, 0.7]).std, 0.0);
    }

    #[test]
    fn table_is_deterministic_and_header_only_when_empty() {
        let rows = vec![
            TableRow { name: "No-demos".into(), cells: vec![("F1".into(), "68.97".into())] },
            TableRow { name: "TSMV".into(), cells: vec![("F1".into(), "74.51".into())] },
            TableRow { name: "Upper bound".into(), cells: vec![("F1".into(), "81.65".into())] },
            TableRow { name: "Gold label".into(), cells: vec![("F1".into(), "84.30".into())] },
        ];
        let t = comparison_table(&rows);
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.to_csv(), comparison_table(&rows).to_csv());
        assert_eq!(t.to_text(), comparison_table(&rows).to_text());
        assert!(t.to_csv().starts_with("Method,F1\nNo-demos,68.97\n"));
        let empty = comparison_table(&[]);
        assert_eq!(empty.to_csv(), "Method\n");
        assert_eq!(empty.to_text().lines().count(), 2);
    }
}
