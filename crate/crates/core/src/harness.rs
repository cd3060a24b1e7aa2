//! End-to-end runs: full-precision ERM, then quantized training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::data::{stream_rng, DomainDataset, Partition, SplitPlan};
use crate::error::{Error, Result};
use crate::freeze::{FreezeController, FreezePolicy};
use crate::graph::Target;
use crate::model::{accuracy, MlpSpec, Model};
use crate::record::{select_best, EvalRow, FinalRow, RunMeta, RunRecord, ScaleTrace, StepRow};
use crate::sagm::{self, SagmConfig};

/// RNG streams of one run.
const STREAM_INIT: u64 = 10;
const STREAM_FP_BATCHES: u64 = 11;
const STREAM_Q_BATCHES: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    FpErm,
    Qat,
    QatSagm,
    Fqat(FreezePolicy),
}

impl Method {
    pub fn is_quantized(self) -> bool {
        self != Method::FpErm
    }

    pub fn uses_dual_gradients(self) -> bool {
        matches!(self, Method::QatSagm | Method::Fqat(_))
    }

    pub fn policy(self) -> FreezePolicy {
        match self {
            Method::Fqat(p) => p,
            _ => FreezePolicy::Off,
        }
    }

    /// The five freezing variants compared by the ablation matrix.
    pub fn ablations() -> [Method; 5] {
        [
            Method::Fqat(FreezePolicy::Adaptive),
            Method::Fqat(FreezePolicy::AlternateUpdate),
            Method::Fqat(FreezePolicy::FreezeBoth),
            Method::Fqat(FreezePolicy::NoUnfreeze),
            Method::Fqat(FreezePolicy::ReverseFreeze),
        ]
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::FpErm => f.write_str("FP-ERM"),
            Method::Qat => f.write_str("QAT"),
            Method::QatSagm => f.write_str("QAT+SAGM"),
            Method::Fqat(FreezePolicy::Adaptive) => f.write_str("FQAT"),
            Method::Fqat(p) => write!(f, "FQAT:{p}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FP-ERM" => Ok(Method::FpErm),
            "QAT" => Ok(Method::Qat),
            "QAT+SAGM" => Ok(Method::QatSagm),
            "FQAT" => Ok(Method::Fqat(FreezePolicy::Adaptive)),
            other => match other.strip_prefix("FQAT:") {
                Some(p) => Ok(Method::Fqat(p.parse()?)),
                None => Err(Error::config("method", format!("unknown method `{other}`"))),
            },
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Training hyperparameters shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub fp_steps: u64,
    pub fp_lr: f64,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub batch_per_domain: usize,
    pub calibration_per_domain: usize,
    pub sagm: SagmConfig,
    pub k: u64,
    pub r: f64,
    pub lsq_normalize: bool,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        self.sagm.validate()?;
        if self.total_steps == 0 {
            return Err(Error::config("train.total_steps", "must be > 0"));
        }
        if self.fp_steps == 0 {
            return Err(Error::config("train.fp_steps", "must be > 0"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("train.eval_interval", "must be > 0"));
        }
        if self.batch_per_domain == 0 {
            return Err(Error::config("train.batch_per_domain", "must be > 0"));
        }
        if self.calibration_per_domain == 0 {
            return Err(Error::config("train.calibration_per_domain", "must be > 0"));
        }
        if !(self.fp_lr.is_finite() && self.fp_lr >= 0.0) {
            return Err(Error::config("train.fp_lr", format!("{} must be >= 0", self.fp_lr)));
        }
        if self.k < 2 || self.k > self.total_steps {
            return Err(Error::config(
                "freeze.k",
                format!("{} outside [2, total_steps = {}]", self.k, self.total_steps),
            ));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::config("freeze.r", format!("{} outside [0, 1]", self.r)));
        }
        Ok(())
    }
}

/// Freeze interval used when none is configured: 2% of the step budget, at least 2.
pub fn default_k(total_steps: u64) -> u64 {
    ((total_steps as f64 * 0.02).round() as u64).max(2)
}

/// Rejects any batch holding a sample of the held-out domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceGuard {
    test_domain: usize,
    batches: u64,
    samples: u64,
}

impl ProvenanceGuard {
    pub fn new(test_domain: usize) -> Self {
        Self {
            test_domain,
            batches: 0,
            samples: 0,
        }
    }

    pub fn check(&mut self, batch: &Batch) -> Result<()> {
        if batch.domains.contains(&self.test_domain) {
            return Err(Error::Leakage {
                domain: self.test_domain,
            });
        }
        self.batches += 1;
        self.samples += batch.len() as u64;
        Ok(())
    }

    pub fn batches_checked(&self) -> u64 {
        self.batches
    }

    pub fn samples_checked(&self) -> u64 {
        self.samples
    }
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(model: &Model, samples: &Batch) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let Target::Labels(labels) = &samples.target else {
        return Err(Error::InvalidArgument("evaluation needs class labels".into()));
    };
    Ok(accuracy(&model.predict(&samples.inputs)?, labels))
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    /// Parameters at the best validation step.
    pub selected: Model,
    /// Parameters after the last step.
    pub last: Model,
}

struct Evaluator<'a> {
    val: Batch,
    test: Batch,
    interval: u64,
    record: &'a mut RunRecord,
    best: Option<(f64, Model)>,
}

impl Evaluator<'_> {
    fn maybe_eval(&mut self, step: u64, model: &Model) -> Result<bool> {
        if !step.is_multiple_of(self.interval) {
            return Ok(false);
        }
        let val_acc = evaluate(model, &self.val)?;
        let test_acc = evaluate(model, &self.test)?;
        self.record.evals.push(EvalRow {
            step,
            val_acc,
            test_acc,
        });
        if self.best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            self.best = Some((val_acc, model.clone()));
        }
        Ok(true)
    }

    fn finish(self, guard: &ProvenanceGuard, last: &Model) -> Result<Model> {
        let best = select_best(&self.record.evals).cloned();
        let (row, selected) = match (best, self.best) {
            (Some(b), Some((_, m))) => (b, m),
            // Fewer steps than one eval interval: select the final parameters.
            _ => {
                let step = self.record.steps.last().map_or(0, |s| s.step);
                let row = EvalRow {
                    step,
                    val_acc: evaluate(last, &self.val)?,
                    test_acc: evaluate(last, &self.test)?,
                };
                (row, last.clone())
            }
        };
        self.record.final_row = Some(FinalRow {
            best_val_step: row.step,
            val_acc: row.val_acc,
            test_acc: row.test_acc,
            batches_checked: guard.batches_checked(),
            samples_checked: guard.samples_checked(),
        });
        Ok(selected)
    }
}

/// Step 1: plain ERM from a seeded random initialization.
pub fn train_full_precision(
    dataset: &DomainDataset,
    partition: &Partition,
    model_spec: &MlpSpec,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<RunOutput> {
    hyper.validate()?;
    let mut rng = stream_rng(seed, STREAM_INIT);
    let mut model = Model::mlp(model_spec, &mut rng)?;
    let mut record = RunRecord::new(RunMeta {
        method: Method::FpErm.to_string(),
        test_domain: partition.plan.test_domain,
        seed,
        bits: None,
        cell_key: None,
    });
    let mut guard = ProvenanceGuard::new(partition.plan.test_domain);
    let mut batches = stream_rng(seed, STREAM_FP_BATCHES);
    let sgd = SagmConfig {
        lr_theta: hyper.fp_lr,
        ..hyper.sagm.clone()
    };
    let mut eval = Evaluator {
        val: partition.val_batch(dataset)?,
        test: partition.test_batch(dataset)?,
        interval: hyper.eval_interval,
        record: &mut record,
        best: None,
    };
    for step in 1..=hyper.fp_steps {
        let batch = partition.sample_train_batch(dataset, hyper.batch_per_domain, &mut batches)?;
        guard.check(&batch)?;
        let g = sagm::compute_qat_gradients(&mut model, &batch)?;
        sagm::apply_qat_update(&mut model, &g, &sgd)?;
        eval.record.steps.push(StepRow {
            step,
            loss_va: g.loss,
            loss_flat: None,
            batch_checksum: g.batch_checksum,
            zero_gradient: false,
            surrogate_gap: None,
            refreshed: false,
            scales: Vec::new(),
        });
        eval.maybe_eval(step, &model)?;
    }
    let selected = eval.finish(&guard, &model)?;
    Ok(RunOutput {
        record,
        selected,
        last: model,
    })
}

/// Step 2: quantized training from a full-precision checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_quantized(
    dataset: &DomainDataset,
    partition: &Partition,
    checkpoint: Option<&Model>,
    model_spec: &MlpSpec,
    bits: u32,
    method: Method,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<RunOutput> {
    let checkpoint = checkpoint.ok_or(Error::MissingCheckpoint)?;
    if !method.is_quantized() {
        return Err(Error::InvalidArgument(format!("{method} is not a quantized method")));
    }
    hyper.validate()?;
    let mut guard = ProvenanceGuard::new(partition.plan.test_domain);
    let calibration = partition.calibration_batch(dataset, hyper.calibration_per_domain)?;
    guard.check(&calibration)?;
    let (mut model, _) = Model::quantize_mlp(checkpoint, model_spec, bits, hyper.lsq_normalize, &calibration.inputs)?;

    let ids: Vec<String> = model.store.scales().iter().map(|s| s.id.clone()).collect();
    let mut controller = FreezeController::new(ids, method.policy(), hyper.r, hyper.k, hyper.sagm.scale_combine)?;
    let mut record = RunRecord::new(RunMeta {
        method: method.to_string(),
        test_domain: partition.plan.test_domain,
        seed,
        bits: Some(bits),
        cell_key: None,
    });
    let mut batches = stream_rng(seed, STREAM_Q_BATCHES);
    let mut eval = Evaluator {
        val: partition.val_batch(dataset)?,
        test: partition.test_batch(dataset)?,
        interval: hyper.eval_interval,
        record: &mut record,
        best: None,
    };
    for step in 1..=hyper.total_steps {
        let batch = partition.sample_train_batch(dataset, hyper.batch_per_domain, &mut batches)?;
        guard.check(&batch)?;
        let surrogate_gap = if step % hyper.eval_interval == 0 {
            Some(sagm::compute_surrogate_gap(&mut model, &batch, &hyper.sagm)?)
        } else {
            None
        };
        let (loss_va, loss_flat, checksum, zero_gradient, g_va, g_flat) = if method.uses_dual_gradients() {
            let d = sagm::compute_dual_gradients(&mut model, &batch, &hyper.sagm)?;
            debug_assert_eq!(d.batch_checksums.0, d.batch_checksums.1);
            sagm::apply_theta_update(&mut model, &d, &hyper.sagm)?;
            (
                d.loss_va,
                Some(d.loss_flat),
                d.batch_checksums.0,
                d.zero_gradient,
                d.g_va,
                Some(d.g_flat),
            )
        } else {
            let g = sagm::compute_qat_gradients(&mut model, &batch)?;
            sagm::apply_qat_update(&mut model, &g, &hyper.sagm)?;
            (g.loss, None, g.batch_checksum, false, g.g_va, None)
        };
        let cs = controller.step(model.store.scales_mut(), &g_va, g_flat.as_deref(), hyper.sagm.lr_scale)?;
        let scales = cs
            .scales
            .iter()
            .zip(model.store.scales())
            .map(|(s, f)| ScaleTrace {
                id: f.id.clone(),
                g_va: s.g_va,
                g_flat: s.g_flat,
                delta: s.delta,
                frozen: s.frozen,
                value: f.value(),
            })
            .collect();
        eval.record.steps.push(StepRow {
            step,
            loss_va,
            loss_flat,
            batch_checksum: checksum,
            zero_gradient,
            surrogate_gap,
            refreshed: cs.refreshed,
            scales,
        });
        eval.maybe_eval(step, &model)?;
    }
    let selected = eval.finish(&guard, &model)?;
    Ok(RunOutput {
        record,
        selected,
        last: model,
    })
}

/// Step 1, then (for quantized methods) step 2 from its selected checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    dataset: &DomainDataset,
    split: &SplitPlan,
    model_spec: &MlpSpec,
    quant_bits: u32,
    method: Method,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<RunOutput> {
    let partition = Partition::new(dataset, split.clone(), seed)?;
    let fp = train_full_precision(dataset, &partition, model_spec, hyper, seed)?;
    if !method.is_quantized() {
        return Ok(fp);
    }
    run_quantized(
        dataset,
        &partition,
        Some(&fp.selected),
        model_spec,
        quant_bits,
        method,
        hyper,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domains, GeneratorParams};

    fn setup() -> (DomainDataset, SplitPlan, MlpSpec, TrainHyper) {
        let ds = generate_domains(1, 3, 60, 3, 4, &GeneratorParams::default()).unwrap();
        let split = SplitPlan::leave_one_out(&ds, 0, 0.25).unwrap();
        let spec = MlpSpec {
            input_dim: 4,
            hidden: vec![8, 8],
            n_classes: 3,
        };
        let hyper = TrainHyper {
            fp_steps: 20,
            fp_lr: 0.05,
            total_steps: 20,
            eval_interval: 7,
            batch_per_domain: 4,
            calibration_per_domain: 8,
            sagm: SagmConfig::default(),
            k: 4,
            r: 0.28,
            lsq_normalize: false,
        };
        (ds, split, spec, hyper)
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::FpErm, Method::Qat, Method::QatSagm]
            .into_iter()
            .chain(FreezePolicy::ALL.map(Method::Fqat))
        {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!(matches!("SAM".parse::<Method>(), Err(Error::Config { .. })));
    }

    #[test]
    fn eval_rows_at_interval_multiples() {
        let (ds, split, spec, hyper) = setup();
        let out = run_experiment(&ds, &split, &spec, 3, Method::Fqat(FreezePolicy::Adaptive), &hyper, 0).unwrap();
        let steps: Vec<u64> = out.record.evals.iter().map(|e| e.step).collect();
        assert_eq!(steps, [7, 14]);
        let f = out.record.final_row.unwrap();
        let best = select_best(&out.record.evals).unwrap();
        assert_eq!((f.best_val_step, f.test_acc), (best.step, best.test_acc));
        // Calibration plus one batch per step.
        assert_eq!(f.batches_checked, 21);
        assert_eq!(out.record.steps.len(), 20);
        assert!(out.record.steps[6].surrogate_gap.is_some());
        assert!(out.record.steps[5].surrogate_gap.is_none());
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let (ds, split, spec, hyper) = setup();
        let part = Partition::new(&ds, split, 0).unwrap();
        let err = run_quantized(&ds, &part, None, &spec, 3, Method::Qat, &hyper, 0).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint));
    }

    #[test]
    fn guard_rejects_test_domain_rows() {
        let (ds, split, _, _) = setup();
        let part = Partition::new(&ds, split, 0).unwrap();
        let mut guard = ProvenanceGuard::new(0);
        let test = part.test_batch(&ds).unwrap();
        assert!(matches!(guard.check(&test), Err(Error::Leakage { domain: 0 })));
        assert_eq!(guard.batches_checked(), 0);
    }

    #[test]
    fn constant_predictor_scores_chance() {
        let (ds, split, spec, _) = setup();
        let part = Partition::new(&ds, split, 0).unwrap();
        let mut rng = stream_rng(0, 0);
        let mut m = Model::mlp(&spec, &mut rng).unwrap();
        let zeros: Vec<crate::tensor::Tensor> = m
            .store
            .values()
            .iter()
            .map(|t| crate::tensor::Tensor::zeros(t.shape()))
            .collect();
        m.store.set_values(&zeros).unwrap();
        let acc = evaluate(&m, &part.test_batch(&ds).unwrap()).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn validation_errors_name_keys() {
        let (_, _, _, mut hyper) = setup();
        hyper.k = 50;
        match hyper.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "freeze.k"),
            other => panic!("{other:?}"),
        }
        assert_eq!(default_k(20_000), 400);
        assert_eq!(default_k(10), 2);
    }
}
