//! Per-run records, persisted as line-delimited JSON, and the trace CSV dump.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub method: String,
    pub test_domain: usize,
    pub seed: u64,
    pub bits: Option<u32>,
    /// Key of the matrix cell this run belongs to, when run through the matrix.
    pub cell_key: Option<String>,
}

/// State of one scale factor after one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTrace {
    pub id: String,
    pub g_va: f64,
    pub g_flat: Option<f64>,
    /// Disorder of the trailing `K` values of `g_va`, once `K` steps exist.
    pub delta: Option<f64>,
    /// Flag in effect while this step's update was applied.
    pub frozen: bool,
    /// Scale value after the update.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub loss_va: f64,
    pub loss_flat: Option<f64>,
    pub batch_checksum: u64,
    pub zero_gradient: bool,
    pub surrogate_gap: Option<f64>,
    pub refreshed: bool,
    pub scales: Vec<ScaleTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub best_val_step: u64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Batches and samples that passed the provenance check before a gradient.
    pub batches_checked: u64,
    pub samples_checked: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "row", rename_all = "lowercase")]
pub enum Row {
    Meta(RunMeta),
    Step(StepRow),
    Eval(EvalRow),
    Final(FinalRow),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
    pub final_row: Option<FinalRow>,
}

/// Earliest eval row with the highest validation accuracy.
pub fn select_best(evals: &[EvalRow]) -> Option<&EvalRow> {
    let mut best: Option<&EvalRow> = None;
    for e in evals {
        if best.is_none_or(|b| e.val_acc > b.val_acc) {
            best = Some(e);
        }
    }
    best
}

impl RunRecord {
    pub fn new(meta: RunMeta) -> Self {
        Self {
            meta,
            steps: Vec::new(),
            evals: Vec::new(),
            final_row: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.final_row.is_some()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Row::Meta(self.meta.clone()))?;
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&Row::Step(s.clone()))?);
            out.push('\n');
        }
        for e in &self.evals {
            out.push_str(&serde_json::to_string(&Row::Eval(e.clone()))?);
            out.push('\n');
        }
        if let Some(f) = &self.final_row {
            out.push_str(&serde_json::to_string(&Row::Final(f.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut record: Option<RunRecord> = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let parse = |message: &str| Error::Parse {
                line: i + 1,
                message: message.into(),
            };
            match (row, record.as_mut()) {
                (Row::Meta(m), None) => record = Some(RunRecord::new(m)),
                (Row::Meta(_), Some(_)) => return Err(parse("duplicate meta row")),
                (_, None) => return Err(parse("first row must be meta")),
                (Row::Step(s), Some(r)) => r.steps.push(s),
                (Row::Eval(e), Some(r)) => r.evals.push(e),
                (Row::Final(f), Some(r)) => r.final_row = Some(f),
            }
        }
        record.ok_or_else(|| Error::Parse {
            line: 0,
            message: "empty record".into(),
        })
    }

    /// Writes through a temporary file so a crash never leaves a half-written record.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, self.to_jsonl()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

pub const TRACE_HEADER: &str = "step,scale_id,g_va,g_flat,delta,frozen,loss_va,loss_flat";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// One CSV row per (step, scale). Missing values are empty fields; floats
/// use the shortest representation that parses back to the same bits.
pub fn trace_csv(record: &RunRecord) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for s in &record.steps {
        for sc in &s.scales {
            writeln!(
                out,
                "{},{},{:?},{},{},{},{:?},{}",
                s.step,
                sc.id,
                sc.g_va,
                opt(sc.g_flat),
                opt(sc.delta),
                u8::from(sc.frozen),
                s.loss_va,
                opt(s.loss_flat)
            )
            .unwrap();
        }
    }
    out
}

pub fn dump_trace(record: &RunRecord, path: &Path) -> Result<()> {
    std::fs::write(path, trace_csv(record)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> RunMeta {
        RunMeta {
            method: "QAT".into(),
            test_domain: 1,
            seed: 3,
            bits: Some(3),
            cell_key: None,
        }
    }

    fn sample() -> RunRecord {
        let mut r = RunRecord::new(meta());
        r.steps.push(StepRow {
            step: 1,
            loss_va: 0.1 + 0.2,
            loss_flat: None,
            batch_checksum: u64::MAX,
            zero_gradient: false,
            surrogate_gap: Some(-1e-300),
            refreshed: false,
            scales: vec![ScaleTrace {
                id: "fc0.a".into(),
                g_va: -0.0,
                g_flat: Some(1.0 / 3.0),
                delta: None,
                frozen: true,
                value: 5e-324,
            }],
        });
        r.evals.push(EvalRow {
            step: 1,
            val_acc: 0.5,
            test_acc: 0.25,
        });
        r.final_row = Some(FinalRow {
            best_val_step: 1,
            val_acc: 0.5,
            test_acc: 0.25,
            batches_checked: 1,
            samples_checked: 8,
        });
        r
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let r = sample();
        let back = RunRecord::from_jsonl(&r.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.steps[0].scales[0].g_va.to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn jsonl_rejects_rows_before_meta() {
        let text = sample().to_jsonl().unwrap();
        let without_meta: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            RunRecord::from_jsonl(&without_meta),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_record_dumps_header_only() {
        let r = RunRecord::new(meta());
        assert_eq!(trace_csv(&r), format!("{TRACE_HEADER}\n"));
    }

    #[test]
    fn trace_row_layout() {
        let csv = trace_csv(&sample());
        let row = csv.lines().nth(1).unwrap();
        assert_eq!(row, "1,fc0.a,-0.0,0.3333333333333333,,1,0.30000000000000004,");
    }

    #[test]
    fn best_is_earliest_maximum() {
        let evals: Vec<EvalRow> = [(10, 0.5, 0.9), (20, 0.7, 0.1), (30, 0.7, 0.8)]
            .into_iter()
            .map(|(step, val_acc, test_acc)| EvalRow {
                step,
                val_acc,
                test_acc,
            })
            .collect();
        let best = select_best(&evals).unwrap();
        assert_eq!(best.step, 20);
        assert_eq!(best.test_acc, 0.1);
        assert!(select_best(&[]).is_none());
    }

    #[test]
    fn dump_trace_reports_path() {
        let err = dump_trace(&sample(), Path::new("/nonexistent/dir/trace.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/trace.csv"));
    }
}
