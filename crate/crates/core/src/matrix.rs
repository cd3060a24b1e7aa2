//! Experiment matrices: every (method, held-out domain, seed) cell of a config.
//!
//! Output layout under the output directory:
//!
//! ```text
//! config.toml                    resolved config of the matrix
//! dataset.txt                    generated dataset
//! cells/<method>__d<domain>__s<seed>__<key>/record.jsonl
//! cells/<method>__d<domain>__s<seed>__<key>/trace.csv
//! summary.csv
//! ```
//!
//! A cell whose record holds a final row is complete and is never rerun.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, ExperimentConfig, QuantConfig};
use crate::data::{DomainDataset, Partition, SplitPlan};
use crate::error::{Error, Result};
use crate::harness::{run_quantized, train_full_precision, Method, TrainHyper};
use crate::model::MlpSpec;
use crate::record::{dump_trace, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub method: Method,
    pub test_domain: usize,
    pub seed: u64,
}

#[derive(Serialize)]
struct KeyInput<'a> {
    method: String,
    test_domain: usize,
    seed: u64,
    dataset: &'a DatasetConfig,
    model: &'a MlpSpec,
    quant: &'a QuantConfig,
    hyper: &'a TrainHyper,
    val_fraction: f64,
}

/// SHA-256 of the canonical JSON of everything that determines the cell's result.
pub fn cell_key(cfg: &ExperimentConfig, cell: &Cell) -> Result<String> {
    let input = KeyInput {
        method: cell.method.to_string(),
        test_domain: cell.test_domain,
        seed: cell.seed,
        dataset: &cfg.dataset,
        model: &cfg.model_spec(),
        quant: &cfg.quant,
        hyper: &cfg.hyper(),
        val_fraction: cfg.train.val_fraction,
    };
    let json = serde_json::to_string(&input)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for method in cfg.methods() {
        for test_domain in cfg.test_domains() {
            for &seed in &cfg.train.seeds {
                out.push(Cell {
                    method,
                    test_domain,
                    seed,
                });
            }
        }
    }
    out
}

pub fn cell_dir(out_dir: &Path, cell: &Cell, key: &str) -> PathBuf {
    let method = cell.method.to_string().replace(':', "_");
    out_dir.join("cells").join(format!(
        "{method}__d{}__s{}__{}",
        cell.test_domain,
        cell.seed,
        &key[..16]
    ))
}

/// Mean and population standard deviation.
pub fn mean_std_pop(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub domain: usize,
    pub bits: Option<u32>,
    pub n_runs: usize,
    pub val_mean: f64,
    pub val_std_pop: f64,
    pub test_mean: f64,
    pub test_std_pop: f64,
}

pub const SUMMARY_HEADER: &str = "method,domain,bits,n_runs,val_mean,val_std_pop,test_mean,test_std_pop";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:?},{:?},{:?},{:?}",
            r.method,
            r.domain,
            r.bits.map(|b| b.to_string()).unwrap_or_else(|| "fp".into()),
            r.n_runs,
            r.val_mean,
            r.val_std_pop,
            r.test_mean,
            r.test_std_pop
        )
        .unwrap();
    }
    out
}

/// `(method, domain, bits)` to `(val_acc, test_acc)` per run.
type Groups = BTreeMap<(String, usize, Option<u32>), Vec<(f64, f64)>>;

/// Aggregates completed records by (method, domain, bits).
pub fn summarize_records(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: Groups = BTreeMap::new();
    for r in records {
        if let Some(f) = &r.final_row {
            groups
                .entry((r.meta.method.clone(), r.meta.test_domain, r.meta.bits))
                .or_default()
                .push((f.val_acc, f.test_acc));
        }
    }
    groups
        .into_iter()
        .map(|((method, domain, bits), accs)| {
            let val: Vec<f64> = accs.iter().map(|a| a.0).collect();
            let test: Vec<f64> = accs.iter().map(|a| a.1).collect();
            let (val_mean, val_std_pop) = mean_std_pop(&val);
            let (test_mean, test_std_pop) = mean_std_pop(&test);
            SummaryRow {
                method,
                domain,
                bits,
                n_runs: accs.len(),
                val_mean,
                val_std_pop,
                test_mean,
                test_std_pop,
            }
        })
        .collect()
}

/// Every complete record under `out_dir/cells`, in directory-name order.
pub fn load_records(out_dir: &Path) -> Result<Vec<RunRecord>> {
    let cells_dir = out_dir.join("cells");
    if !cells_dir.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&cells_dir)
        .map_err(|e| Error::io(&cells_dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&cells_dir, err)))
        .collect::<Result<_>>()?;
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        let path = d.join("record.jsonl");
        if path.exists() {
            let r = RunRecord::read(&path)?;
            if r.is_complete() {
                out.push(r);
            }
        }
    }
    Ok(out)
}

/// Recomputes the summary from persisted records and rewrites `summary.csv`.
pub fn summarize(out_dir: &Path) -> Result<Vec<SummaryRow>> {
    let rows = summarize_records(&load_records(out_dir)?);
    let path = out_dir.join("summary.csv");
    std::fs::write(&path, summary_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

fn line_diff(old: &str, new: &str) -> String {
    let mut out = String::new();
    for l in old.lines().filter(|l| !new.lines().any(|n| n == *l)) {
        writeln!(out, "- {l}").unwrap();
    }
    for l in new.lines().filter(|l| !old.lines().any(|o| o == *l)) {
        writeln!(out, "+ {l}").unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixReport {
    pub executed: usize,
    pub skipped: usize,
    pub summary: Vec<SummaryRow>,
}

fn write_cell(dir: &Path, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dump_trace(record, &dir.join("trace.csv"))?;
    record.write(&dir.join("record.jsonl"))
}

fn is_complete(dir: &Path) -> bool {
    RunRecord::read(&dir.join("record.jsonl")).is_ok_and(|r| r.is_complete())
}

/// Runs every pending cell, then rewrites the summary.
///
/// Cells sharing a (domain, seed) pair share one full-precision stage.
/// Groups run in parallel; each writes only its own cell directories.
pub fn run_matrix(cfg: &ExperimentConfig, out_dir: &Path) -> Result<MatrixReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let resolved = cfg.to_toml()?;
    let config_path = out_dir.join("config.toml");
    if config_path.exists() {
        let prior = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        if prior != resolved {
            return Err(Error::ConfigConflict {
                dir: out_dir.to_path_buf(),
                diff: line_diff(&prior, &resolved),
            });
        }
    } else {
        std::fs::write(&config_path, &resolved).map_err(|e| Error::io(&config_path, e))?;
    }

    let dataset = cfg.dataset.generate()?;
    let data_path = out_dir.join("dataset.txt");
    if !data_path.exists() {
        dataset.save(&data_path)?;
    }

    let all = cells(cfg);
    let mut pending: HashMap<(usize, u64), Vec<(Cell, String)>> = HashMap::new();
    let mut skipped = 0;
    for cell in &all {
        let key = cell_key(cfg, cell)?;
        if is_complete(&cell_dir(out_dir, cell, &key)) {
            skipped += 1;
        } else {
            pending
                .entry((cell.test_domain, cell.seed))
                .or_default()
                .push((*cell, key));
        }
    }
    let mut groups: Vec<_> = pending.into_iter().collect();
    groups.sort_by_key(|(k, _)| *k);
    let executed: usize = groups.iter().map(|(_, v)| v.len()).sum();

    groups
        .par_iter()
        .map(|((domain, seed), group)| run_group(cfg, &dataset, out_dir, *domain, *seed, group))
        .collect::<Result<Vec<()>>>()?;

    Ok(MatrixReport {
        executed,
        skipped,
        summary: summarize(out_dir)?,
    })
}

fn run_group(
    cfg: &ExperimentConfig,
    dataset: &DomainDataset,
    out_dir: &Path,
    domain: usize,
    seed: u64,
    group: &[(Cell, String)],
) -> Result<()> {
    let split = SplitPlan::leave_one_out(dataset, domain, cfg.train.val_fraction)?;
    let partition = Partition::new(dataset, split, seed)?;
    let hyper = cfg.hyper();
    let spec = cfg.model_spec();
    let fp = train_full_precision(dataset, &partition, &spec, &hyper, seed)?;
    for (cell, key) in group {
        let mut record = if cell.method.is_quantized() {
            run_quantized(
                dataset,
                &partition,
                Some(&fp.selected),
                &spec,
                cfg.quant.bits,
                cell.method,
                &hyper,
                seed,
            )?
            .record
        } else {
            fp.record.clone()
        };
        record.meta.cell_key = Some(key.clone());
        write_cell(&cell_dir(out_dir, cell, key), &record)?;
        log::info!("cell {} d{} s{} done", cell.method, domain, seed);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let (m, s) = mean_std_pop(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-15);
        assert_eq!(mean_std_pop(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn diff_lists_changed_lines() {
        let d = line_diff("a = 1\nb = 2\n", "a = 1\nb = 3\n");
        assert_eq!(d, "- b = 2\n+ b = 3\n");
    }

    #[test]
    fn keys_separate_cells_and_hyperparameters() {
        let cfg = crate::config::parse_config("method = \"QAT\"\n[train]\ntotal_steps = 10\n").unwrap();
        let c = Cell {
            method: Method::Qat,
            test_domain: 0,
            seed: 1,
        };
        let k = cell_key(&cfg, &c).unwrap();
        assert_eq!(k, cell_key(&cfg, &c).unwrap());
        assert_eq!(k.len(), 64);
        assert_ne!(k, cell_key(&cfg, &Cell { seed: 2, ..c }).unwrap());
        let mut other = cfg.clone();
        other.sagm.rho = 0.1;
        assert_ne!(k, cell_key(&other, &c).unwrap());
    }
}
