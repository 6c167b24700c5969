use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use meanteach::metrics::MetricReport;
use meanteach::rng::stream;
use meanteach::synth::{DatasetManifest, Scene};
use meanteach::trainer::{Ablation, Mode, TrainConfig, TrainData, Trainer};
use meanteach::{ErrorKind, Image};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::CliError;

const SUBSET_STREAM: u64 = 0x5B5E7;

pub const CSV_HEADER: &str =
    "fraction,method,ablation,seed,n_labeled,aji_cyto,aji_nuc,aji_avg,map_cyto,map_nuc,map_avg,status";

/// Number of labeled scenes a fraction selects: `⌈fraction·n⌉`, at least 1.
pub fn subset_size(fraction: f64, n: usize) -> usize {
    // the tolerance keeps products like 0.1·30 from rounding up past 3
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// First `⌈fraction·n⌉` ids of a seed-shuffled copy of `ids`, so larger
/// fractions contain the smaller ones.
pub fn labeled_subset(ids: &[String], fraction: f64, seed: u64) -> Vec<String> {
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut stream(seed, &[SUBSET_STREAM]));
    shuffled.truncate(subset_size(fraction, ids.len()));
    shuffled
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub fraction: f64,
    pub mode: Mode,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Cell {
    fn dir_name(&self) -> String {
        format!(
            "{}-{}-f{}-s{}",
            self.mode.name(),
            self.ablation.name(),
            self.fraction,
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub fraction: f64,
    pub method: String,
    pub ablation: String,
    pub seed: u64,
    pub n_labeled: usize,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl CellResult {
    pub fn csv_row(&self) -> String {
        let metrics = match &self.report {
            Some(r) => r.to_csv_row(),
            None => ",,,,,".to_string(),
        };
        let status = if self.error.is_some() { "failed" } else { "ok" };
        format!(
            "{},{},{},{},{},{},{}",
            self.fraction, self.method, self.ablation, self.seed, self.n_labeled, metrics, status
        )
    }
}

/// Mean and sample standard deviation of one metric over the successful
/// replicates of a cell group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: None, std: None };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Summary { mean: Some(mean), std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub fraction: f64,
    pub method: String,
    pub ablation: String,
    pub runs: usize,
    pub failed: usize,
    pub aji_cyto: Summary,
    pub aji_nuc: Summary,
    pub aji_avg: Summary,
    pub map_cyto: Summary,
    pub map_nuc: Summary,
    pub map_avg: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

impl SweepReport {
    pub fn from_cells(cells: Vec<CellResult>) -> Self {
        let mut aggregates: Vec<Aggregate> = Vec::new();
        let mut groups: Vec<(f64, &str, &str)> = Vec::new();
        for c in &cells {
            let key = (c.fraction, c.method.as_str(), c.ablation.as_str());
            if !groups.contains(&key) {
                groups.push(key);
            }
        }
        for (fraction, method, ablation) in groups {
            let members: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.fraction == fraction && c.method == method && c.ablation == ablation)
                .collect();
            let reports: Vec<&MetricReport> = members.iter().filter_map(|c| c.report.as_ref()).collect();
            let col = |i: usize| summarize(&reports.iter().filter_map(|r| r.values()[i]).collect::<Vec<_>>());
            aggregates.push(Aggregate {
                fraction,
                method: method.to_string(),
                ablation: ablation.to_string(),
                runs: members.len(),
                failed: members.len() - reports.len(),
                aji_cyto: col(0),
                aji_nuc: col(1),
                aji_avg: col(2),
                map_cyto: col(3),
                map_nuc: col(4),
                map_avg: col(5),
            });
        }
        SweepReport { cells, aggregates }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CSV_HEADER}").unwrap();
        for c in &self.cells {
            writeln!(out, "{}", c.csv_row()).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep report serializes")
    }

    /// One line per aggregate, for the terminal.
    pub fn summary_table(&self) -> String {
        let mut out = String::from("fraction  method           ablation  runs  aji_avg          map_avg\n");
        for a in &self.aggregates {
            let show = |s: &Summary| format!("{} ± {}", fmt_opt(s.mean), fmt_opt(s.std.or(Some(0.0))));
            writeln!(
                out,
                "{:<9} {:<16} {:<9} {:<5} {:<16} {}",
                a.fraction,
                a.method,
                a.ablation,
                a.runs - a.failed,
                show(&a.aji_avg),
                show(&a.map_avg)
            )
            .unwrap();
        }
        out
    }
}

/// Scenes read once and shared by every cell of a sweep.
pub struct SweepData {
    labeled_ids: Vec<String>,
    labeled: Vec<Scene>,
    unlabeled: Vec<(String, Image)>,
    validation: Vec<Scene>,
}

impl SweepData {
    pub fn load(root: &Path, manifest: &DatasetManifest, with_unlabeled: bool) -> Result<Self, CliError> {
        let all = TrainData::load(root, manifest, &manifest.labeled_ids, with_unlabeled)?;
        Ok(SweepData {
            labeled_ids: manifest.labeled_ids.clone(),
            labeled: all.labeled,
            unlabeled: all.unlabeled,
            validation: all.validation,
        })
    }

    fn train_data(&self, ids: &[String], mode: Mode) -> TrainData {
        let labeled = ids
            .iter()
            .map(|id| {
                let i = self
                    .labeled_ids
                    .iter()
                    .position(|x| x == id)
                    .expect("subset comes from the manifest");
                self.labeled[i].clone()
            })
            .collect();
        TrainData {
            labeled,
            unlabeled: if mode == Mode::MmtPsm {
                self.unlabeled.clone()
            } else {
                Vec::new()
            },
            validation: self.validation.clone(),
        }
    }
}

/// Runs every cell in order. A failed cell is recorded and the sweep moves
/// on; the first failure's class is returned alongside the report.
pub fn run_cells(
    base: &TrainConfig,
    data: &SweepData,
    cells: &[Cell],
    out_dir: Option<&Path>,
) -> (SweepReport, Option<ErrorKind>) {
    let mut results = Vec::with_capacity(cells.len());
    let mut first_failure = None;
    for (k, cell) in cells.iter().enumerate() {
        let ids = labeled_subset(&data.labeled_ids, cell.fraction, cell.seed);
        let config = TrainConfig {
            seed: cell.seed,
            ..base.clone()
        };
        let started = Instant::now();
        let run_dir = out_dir.map(|d| d.join("runs").join(cell.dir_name()));
        let outcome = Trainer::new(config, cell.mode, cell.ablation, data.train_data(&ids, cell.mode))
            .and_then(|tr| tr.run(run_dir.as_deref()));
        let (report, error) = match outcome {
            Ok(r) => (Some(r.report), None),
            Err(e) => {
                first_failure.get_or_insert(e.kind());
                (None, Some(e.to_string()))
            }
        };
        eprintln!(
            "[{}/{}] {} fraction={} seed={} labeled={}: {} ({:.1}s)",
            k + 1,
            cells.len(),
            cell.mode.name(),
            cell.fraction,
            cell.seed,
            ids.len(),
            match (&report, &error) {
                (Some(r), _) => format!("aji_avg={:.4}", r.aji_avg),
                (_, Some(e)) => format!("failed: {e}"),
                _ => unreachable!(),
            },
            started.elapsed().as_secs_f64()
        );
        results.push(CellResult {
            fraction: cell.fraction,
            method: cell.mode.name().to_string(),
            ablation: cell.ablation.name().to_string(),
            seed: cell.seed,
            n_labeled: ids.len(),
            report,
            error,
        });
    }
    (SweepReport::from_cells(results), first_failure)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i:05}")).collect()
    }

    #[test]
    fn subset_sizes_round_up() {
        assert_eq!(subset_size(0.1, 20), 2);
        assert_eq!(subset_size(0.1, 30), 3);
        assert_eq!(subset_size(0.15, 20), 3);
        assert_eq!(subset_size(0.01, 20), 1);
        assert_eq!(subset_size(1.0, 20), 20);
    }

    #[test]
    fn subsets_are_nested_and_seeded() {
        let all = ids(20);
        let small = labeled_subset(&all, 0.1, 3);
        let big = labeled_subset(&all, 0.4, 3);
        assert_eq!(small.len(), 2);
        assert_eq!(big[..2], small[..]);
        assert_eq!(labeled_subset(&all, 0.1, 3), small);
        let mut full = labeled_subset(&all, 1.0, 3);
        full.sort();
        assert_eq!(full, all);
        assert!((0..10).any(|s| labeled_subset(&all, 0.1, s) != small));
    }

    fn report(v: f64) -> MetricReport {
        MetricReport {
            aji_cyto: v,
            aji_nuc: v,
            aji_avg: v,
            map_cyto: Some(v),
            map_nuc: None,
            map_avg: Some(v),
        }
    }

    fn cell(seed: u64, r: Option<MetricReport>) -> CellResult {
        CellResult {
            fraction: 0.5,
            method: "mmt_psm".into(),
            ablation: "full".into(),
            seed,
            n_labeled: 3,
            error: r.is_none().then(|| "boom".to_string()),
            report: r,
        }
    }

    #[test]
    fn aggregate_of_one_replicate_is_that_replicate() {
        let rep = SweepReport::from_cells(vec![cell(0, Some(report(0.25)))]);
        let a = &rep.aggregates[0];
        assert_eq!(a.aji_avg.mean, Some(0.25));
        assert_eq!(a.aji_avg.std, None);
        assert_eq!(a.map_nuc.mean, None);
    }

    #[test]
    fn aggregates_skip_failed_cells() {
        let rep = SweepReport::from_cells(vec![
            cell(0, Some(report(0.2))),
            cell(1, None),
            cell(2, Some(report(0.4))),
        ]);
        let a = &rep.aggregates[0];
        assert_eq!((a.runs, a.failed), (3, 1));
        assert!((a.aji_avg.mean.unwrap() - 0.3).abs() < 1e-15);
        assert!((a.aji_avg.std.unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[2], "0.5,mmt_psm,full,1,3,,,,,,,failed");
        assert_eq!(
            lines[1],
            "0.5,mmt_psm,full,0,3,0.200000,0.200000,0.200000,0.200000,,0.200000,ok"
        );
        assert!(lines.iter().all(|l| l.split(',').count() == 12));
    }
}
