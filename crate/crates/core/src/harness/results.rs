use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::TaskKind;
use crate::error::{Error, Result};
use crate::evaluation::{mean_std, ALPHA};
use crate::unet::BackboneVariant;

/// Outcome of one (task, variant, k, seed) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: TaskKind,
    pub variant: BackboneVariant,
    pub k: usize,
    pub seed: u64,
    /// Mean over the eval images whose balanced accuracy is defined.
    pub mean_balanced_accuracy: f64,
    pub n_defined: usize,
    pub p_uniform_noise: f64,
    pub p_random_init: f64,
}

impl ResultRow {
    pub fn significant_vs_both(&self) -> bool {
        self.p_uniform_noise < ALPHA && self.p_random_init < ALPHA
    }

    fn key(&self) -> (TaskKind, BackboneVariant, usize, u64) {
        (self.task, self.variant, self.k, self.seed)
    }
}

/// Seed-level summary of one (task, variant, k).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: TaskKind,
    pub variant: BackboneVariant,
    pub k: usize,
    pub n_seeds: usize,
    /// Mean of the per-seed means.
    pub mean: f64,
    /// Population standard deviation of the per-seed means.
    pub std: f64,
    /// One-tailed test on the per-image pairs of all seeds pooled; `None`
    /// when the per-image records are not available.
    pub p_uniform_noise: Option<f64>,
    pub p_random_init: Option<f64>,
}

impl AggregateRow {
    pub fn significant_vs_both(&self) -> bool {
        matches!((self.p_uniform_noise, self.p_random_init), (Some(a), Some(b)) if a < ALPHA && b < ALPHA)
    }
}

/// Whether the mean at the largest k reaches the zero-shot mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub task: TaskKind,
    pub variant: BackboneVariant,
    pub mean_k0: f64,
    pub k_max: usize,
    pub mean_k_max: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
}

const RESULTS_HEADER: &str =
    "task,variant,k,seed,mean_balanced_accuracy,n_defined,p_uniform_noise,p_random_init_unet";
const AGGREGATE_HEADER: &str =
    "task,variant,k,n_seeds,mean,std,p_uniform_noise,p_random_init_unet,significant";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fields(line: &str, n: usize, lineno: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != n {
        return Err(Error::contract(
            "results_csv",
            format!("line {lineno}: expected {n} fields, got {}", f.len()),
        ));
    }
    Ok(f)
}

fn parse<T: std::str::FromStr>(s: &str, what: &str, lineno: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::contract("results_csv", format!("line {lineno}: bad {what} {s:?}")))
}

fn parse_opt(s: &str, what: &str, lineno: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse(s, what, lineno).map(Some)
    }
}

fn body<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, &'a str)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => Ok(lines
            .enumerate()
            .map(|(i, l)| (i + 2, l))
            .filter(|(_, l)| !l.is_empty())),
        other => Err(Error::contract(
            "results_csv",
            format!("unexpected header {other:?}"),
        )),
    }
}

impl ResultsTable {
    /// Sorts rows and recomputes seed-level means and deviations. Pooled
    /// p-values are left to the caller.
    pub fn from_rows(mut rows: Vec<ResultRow>) -> Self {
        rows.sort_by_key(ResultRow::key);
        let mut groups: BTreeMap<(TaskKind, BackboneVariant, usize), Vec<f64>> = BTreeMap::new();
        for r in &rows {
            groups
                .entry((r.task, r.variant, r.k))
                .or_default()
                .push(r.mean_balanced_accuracy);
        }
        let aggregates = groups
            .into_iter()
            .map(|((task, variant, k), means)| {
                let (mean, std) = mean_std(&means);
                AggregateRow {
                    task,
                    variant,
                    k,
                    n_seeds: means.len(),
                    mean,
                    std,
                    p_uniform_noise: None,
                    p_random_init: None,
                }
            })
            .collect();
        Self { rows, aggregates }
    }

    pub fn tasks(&self) -> Vec<TaskKind> {
        let mut t: Vec<TaskKind> = self.aggregates.iter().map(|a| a.task).collect();
        t.sort();
        t.dedup();
        t
    }

    pub fn aggregate(
        &self,
        task: TaskKind,
        variant: BackboneVariant,
        k: usize,
    ) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.task == task && a.variant == variant && a.k == k)
    }

    /// Full-precision rows in (task, variant, k, seed) order.
    pub fn results_csv(&self) -> String {
        let mut out = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.task,
                r.variant,
                r.k,
                r.seed,
                r.mean_balanced_accuracy,
                r.n_defined,
                r.p_uniform_noise,
                r.p_random_init
            ));
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = format!("{AGGREGATE_HEADER}\n");
        for a in &self.aggregates {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                a.task,
                a.variant,
                a.k,
                a.n_seeds,
                a.mean,
                a.std,
                opt(a.p_uniform_noise),
                opt(a.p_random_init),
                a.significant_vs_both()
            ));
        }
        out
    }

    pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
        body(text, RESULTS_HEADER)?
            .map(|(n, line)| {
                let f = fields(line, 8, n)?;
                Ok(ResultRow {
                    task: parse(f[0], "task", n)?,
                    variant: parse(f[1], "variant", n)?,
                    k: parse(f[2], "k", n)?,
                    seed: parse(f[3], "seed", n)?,
                    mean_balanced_accuracy: parse(f[4], "mean", n)?,
                    n_defined: parse(f[5], "count", n)?,
                    p_uniform_noise: parse(f[6], "p-value", n)?,
                    p_random_init: parse(f[7], "p-value", n)?,
                })
            })
            .collect()
    }

    pub fn parse_aggregate_csv(text: &str) -> Result<Vec<AggregateRow>> {
        body(text, AGGREGATE_HEADER)?
            .map(|(n, line)| {
                let f = fields(line, 9, n)?;
                Ok(AggregateRow {
                    task: parse(f[0], "task", n)?,
                    variant: parse(f[1], "variant", n)?,
                    k: parse(f[2], "k", n)?,
                    n_seeds: parse(f[3], "count", n)?,
                    mean: parse(f[4], "mean", n)?,
                    std: parse(f[5], "std", n)?,
                    p_uniform_noise: parse_opt(f[6], "p-value", n)?,
                    p_random_init: parse_opt(f[7], "p-value", n)?,
                })
            })
            .collect()
    }

    /// Largest-k against zero-shot mean for every (task, variant) that has
    /// both.
    pub fn trend(&self) -> Vec<TrendRow> {
        let mut by_cell: BTreeMap<(TaskKind, BackboneVariant), Vec<&AggregateRow>> =
            BTreeMap::new();
        for a in &self.aggregates {
            by_cell.entry((a.task, a.variant)).or_default().push(a);
        }
        by_cell
            .into_iter()
            .filter_map(|((task, variant), rows)| {
                let k0 = rows.iter().find(|a| a.k == 0)?;
                let last = rows.iter().max_by_key(|a| a.k)?;
                (last.k > 0).then_some(TrendRow {
                    task,
                    variant,
                    mean_k0: k0.mean,
                    k_max: last.k,
                    mean_k_max: last.mean,
                    improved: last.mean >= k0.mean,
                })
            })
            .collect()
    }

    pub fn trend_csv(&self) -> String {
        let mut out = String::from("task,variant,mean_k0,k_max,mean_k_max,improved\n");
        for t in self.trend() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.task, t.variant, t.mean_k0, t.k_max, t.mean_k_max, t.improved
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(task: TaskKind, k: usize, seed: u64, mean: f64) -> ResultRow {
        ResultRow {
            task,
            variant: BackboneVariant::Residual,
            k,
            seed,
            mean_balanced_accuracy: mean,
            n_defined: 64,
            p_uniform_noise: 0.001,
            p_random_init: 0.02,
        }
    }

    #[test]
    fn aggregates_are_sorted_seed_moments() {
        let t = ResultsTable::from_rows(vec![
            row(TaskKind::Landslide, 0, 1, 0.7),
            row(TaskKind::Flood, 5, 0, 0.6),
            row(TaskKind::Flood, 0, 1, 0.5),
            row(TaskKind::Flood, 0, 0, 0.6),
        ]);
        let keys: Vec<_> = t.rows.iter().map(|r| (r.task, r.k, r.seed)).collect();
        assert_eq!(
            keys,
            vec![
                (TaskKind::Flood, 0, 0),
                (TaskKind::Flood, 0, 1),
                (TaskKind::Flood, 5, 0),
                (TaskKind::Landslide, 0, 1)
            ]
        );
        let a = t
            .aggregate(TaskKind::Flood, BackboneVariant::Residual, 0)
            .unwrap();
        assert_eq!(a.n_seeds, 2);
        assert!((a.mean - 0.55).abs() < 1e-15);
        assert!((a.std - 0.05).abs() < 1e-15);
        assert!(!a.significant_vs_both());
        let trend = t.trend();
        assert_eq!(trend.len(), 1);
        assert!(trend[0].improved);
    }

    #[test]
    fn csv_round_trip() {
        let mut t = ResultsTable::from_rows(vec![
            row(TaskKind::Flood, 0, 3, 0.1 + 0.2),
            row(TaskKind::Flood, 1, 3, 0.5),
        ]);
        t.aggregates[0].p_uniform_noise = Some(1e-9);
        let rows = ResultsTable::parse_results_csv(&t.results_csv()).unwrap();
        assert_eq!(rows, t.rows);
        let aggs = ResultsTable::parse_aggregate_csv(&t.aggregate_csv()).unwrap();
        assert_eq!(aggs, t.aggregates);
        assert!(ResultsTable::parse_results_csv("task\n").is_err());
        assert!(
            ResultsTable::parse_results_csv(&format!("{RESULTS_HEADER}\nflood,residual,0\n"))
                .is_err()
        );
    }
}
