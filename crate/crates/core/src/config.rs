//! Experiment configuration in TOML.
//!
//! Only `method` and `train.total_steps` are required. Everything else has
//! a default, and [`parse_config`] returns the resolved form: serializing
//! it with [`ExperimentConfig::to_toml`] and parsing again is the identity.
//!
//! ```toml
//! method = "FQAT"
//!
//! [train]
//! total_steps = 1000
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_domains, DomainDataset, GeneratorParams};
use crate::error::{Error, Result};
use crate::freeze::FreezePolicy;
use crate::harness::{default_k, Method, TrainHyper};
use crate::model::MlpSpec;
use crate::probe::ProbeConfig;
use crate::quantizer::{bounds, QuantKind};
use crate::sagm::SagmConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_domains: usize,
    pub n_per_domain: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub cluster_radius: f64,
    pub mean_spread: f64,
    pub noise: f64,
    pub rotation_span: f64,
    pub shift_std: f64,
    pub scale_span: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let g = GeneratorParams::default();
        Self {
            seed: 0,
            n_domains: 4,
            n_per_domain: 300,
            n_classes: 4,
            dim: 8,
            cluster_radius: g.cluster_radius,
            mean_spread: g.mean_spread,
            noise: g.noise,
            rotation_span: g.rotation_span,
            shift_std: g.shift_std,
            scale_span: g.scale_span,
        }
    }
}

impl DatasetConfig {
    pub fn generator(&self) -> GeneratorParams {
        GeneratorParams {
            cluster_radius: self.cluster_radius,
            mean_spread: self.mean_spread,
            noise: self.noise,
            rotation_span: self.rotation_span,
            shift_std: self.shift_std,
            scale_span: self.scale_span,
        }
    }

    pub fn generate(&self) -> Result<DomainDataset> {
        generate_domains(
            self.seed,
            self.n_domains,
            self.n_per_domain,
            self.n_classes,
            self.dim,
            &self.generator(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![16, 16] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: u32,
    /// Scale the scale-factor gradient by `1 / sqrt(N · u)`.
    pub normalize_grad: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 3,
            normalize_grad: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<FreezePolicy>,
    /// Refresh interval; 2% of `train.total_steps` when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<u64>,
    pub r: f64,
}

impl Default for FreezeConfig {
    fn default() -> Self {
        Self {
            policy: None,
            k: None,
            r: 0.28,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    #[serde(default = "defaults::eval_interval")]
    pub eval_interval: u64,
    #[serde(default = "defaults::batch_per_domain")]
    pub batch_per_domain: usize,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "defaults::fp_steps")]
    pub fp_steps: u64,
    #[serde(default = "defaults::fp_lr")]
    pub fp_lr: f64,
    #[serde(default = "defaults::calibration_per_domain")]
    pub calibration_per_domain: usize,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    /// Held-out domains; every domain when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_domains: Option<Vec<usize>>,
}

mod defaults {
    pub fn eval_interval() -> u64 {
        50
    }
    pub fn batch_per_domain() -> usize {
        32
    }
    pub fn val_fraction() -> f64 {
        0.2
    }
    pub fn fp_steps() -> u64 {
        2000
    }
    pub fn fp_lr() -> f64 {
        0.05
    }
    pub fn calibration_per_domain() -> usize {
        64
    }
    pub fn seeds() -> Vec<u64> {
        vec![0, 1, 2, 3, 4]
    }
    pub fn output_dir() -> std::path::PathBuf {
        "runs".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Further methods run side by side with `method` in the matrix.
    #[serde(default)]
    pub extra_methods: Vec<Method>,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub sagm: SagmConfig,
    #[serde(default)]
    pub freeze: FreezeConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

fn range(path: &str, ok: bool, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(path, message()))
    }
}

impl ExperimentConfig {
    /// Every method of the matrix, primary first, duplicates dropped.
    pub fn methods(&self) -> Vec<Method> {
        let mut out = vec![self.method];
        for m in &self.extra_methods {
            if !out.contains(m) {
                out.push(*m);
            }
        }
        out
    }

    pub fn test_domains(&self) -> Vec<usize> {
        self.train
            .test_domains
            .clone()
            .unwrap_or_else(|| (0..self.dataset.n_domains).collect())
    }

    pub fn model_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.dataset.dim,
            hidden: self.model.hidden.clone(),
            n_classes: self.dataset.n_classes,
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            fp_steps: self.train.fp_steps,
            fp_lr: self.train.fp_lr,
            total_steps: self.train.total_steps,
            eval_interval: self.train.eval_interval,
            batch_per_domain: self.train.batch_per_domain,
            calibration_per_domain: self.train.calibration_per_domain,
            sagm: self.sagm.clone(),
            k: self.freeze.k.unwrap_or_else(|| default_k(self.train.total_steps)),
            r: self.freeze.r,
            lsq_normalize: self.quant.normalize_grad,
        }
    }

    /// Fills derived defaults and checks every range.
    pub fn resolve(mut self) -> Result<Self> {
        match (self.method, self.freeze.policy) {
            (Method::Fqat(FreezePolicy::Adaptive), Some(p)) => self.method = Method::Fqat(p),
            (Method::Fqat(m), Some(p)) if m != p => {
                return Err(Error::config(
                    "freeze.policy",
                    format!("`{p}` contradicts method `{}`", self.method),
                ))
            }
            (Method::Fqat(m), _) => self.freeze.policy = Some(m),
            (other, Some(_)) => {
                return Err(Error::config(
                    "freeze.policy",
                    format!("only applies to FQAT, method is `{other}`"),
                ))
            }
            (_, None) => {}
        }
        if self.freeze.k.is_none() {
            self.freeze.k = Some(default_k(self.train.total_steps));
        }
        if self.train.test_domains.is_none() {
            self.train.test_domains = Some((0..self.dataset.n_domains).collect());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.train.total_steps;
        range("train.total_steps", t > 0, || "must be > 0".into())?;
        let k = self.freeze.k.unwrap_or_else(|| default_k(t));
        range("freeze.k", (2..=t).contains(&k), || format!("{k} outside [2, {t}]"))?;
        let r = self.freeze.r;
        range("freeze.r", (0.0..=1.0).contains(&r), || format!("{r} outside [0, 1]"))?;
        bounds(self.quant.bits, QuantKind::Weight).map_err(|e| Error::config("quant.bits", e.to_string()))?;
        let d = &self.dataset;
        range("dataset.n_domains", d.n_domains >= 3, || format!("{} < 3", d.n_domains))?;
        range("dataset.n_classes", d.n_classes >= 2, || format!("{} < 2", d.n_classes))?;
        range("dataset.dim", d.dim >= 2, || format!("{} < 2", d.dim))?;
        range("dataset.n_per_domain", d.n_per_domain >= d.n_classes, || {
            format!("{} < n_classes", d.n_per_domain)
        })?;
        range("dataset.noise", d.noise.is_finite() && d.noise > 0.0, || {
            format!("{} must be > 0", d.noise)
        })?;
        range(
            "dataset.cluster_radius",
            d.cluster_radius.is_finite() && d.cluster_radius > 0.0,
            || format!("{} must be > 0", d.cluster_radius),
        )?;
        range(
            "dataset.shift_std",
            d.shift_std.is_finite() && d.shift_std >= 0.0,
            || format!("{} must be >= 0", d.shift_std),
        )?;
        range(
            "dataset.mean_spread",
            d.mean_spread.is_finite() && d.mean_spread >= 0.0,
            || format!("{} must be >= 0", d.mean_spread),
        )?;
        range("dataset.rotation_span", d.rotation_span.is_finite(), || {
            "must be finite".into()
        })?;
        range("dataset.scale_span", d.scale_span.is_finite(), || {
            "must be finite".into()
        })?;
        range("model.hidden", !self.model.hidden.is_empty(), || {
            "need at least one hidden layer".into()
        })?;
        range("model.hidden", self.model.hidden.iter().all(|&w| w > 0), || {
            "widths must be positive".into()
        })?;
        let vf = self.train.val_fraction;
        range("train.val_fraction", vf > 0.0 && vf < 1.0, || {
            format!("{vf} outside (0, 1)")
        })?;
        range("train.seeds", !self.train.seeds.is_empty(), || {
            "need at least one seed".into()
        })?;
        for &dom in self.train.test_domains.iter().flatten() {
            range("train.test_domains", dom < d.n_domains, || {
                format!("domain {dom} out of range for {} domains", d.n_domains)
            })?;
        }
        self.probe.validate()?;
        let mut hyper = self.hyper();
        hyper.k = k;
        hyper.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_config(&text)
    }
}

fn table_error_path(path: String, message: &str) -> String {
    let field = ["missing field `", "unknown field `"]
        .iter()
        .find_map(|p| message.strip_prefix(p))
        .and_then(|rest| rest.split('`').next());
    match field {
        Some(f) if path == "." || path.is_empty() => f.to_string(),
        Some(f) if path == f || path.ends_with(&format!(".{f}")) => path,
        Some(f) => format!("{path}.{f}"),
        None => path,
    }
}

fn from_table<T: serde::de::DeserializeOwned>(table: toml::Table, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let path = table_error_path(path, &message);
        Error::config(format!("{prefix}{path}"), message)
    })
}

/// Parses a TOML table into a config. Errors name the offending key path.
pub fn config_from_table(table: toml::Table) -> Result<ExperimentConfig> {
    from_table::<ExperimentConfig>(table, "")?.resolve()
}

/// Parses the `[dataset]` table alone; other keys are ignored.
pub fn dataset_from_table(table: &toml::Table) -> Result<DatasetConfig> {
    let inner = match table.get("dataset") {
        None => toml::Table::new(),
        Some(toml::Value::Table(t)) => t.clone(),
        Some(_) => return Err(Error::config("dataset", "must be a table")),
    };
    from_table(inner, "dataset.")
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        Error::Parse {
            line,
            message: e.message().to_string(),
        }
    })?;
    config_from_table(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "method = \"FQAT\"\n[train]\ntotal_steps = 500\n";

    fn err_path(text: &str) -> String {
        match parse_config(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_resolves_and_round_trips() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.method, Method::Fqat(FreezePolicy::Adaptive));
        assert_eq!(cfg.freeze.policy, Some(FreezePolicy::Adaptive));
        assert_eq!(cfg.freeze.k, Some(10));
        assert_eq!(cfg.train.test_domains, Some(vec![0, 1, 2, 3]));
        let text = cfg.to_toml().unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn floats_survive_round_trip_bit_exactly() {
        let text = format!("{MINIMAL}[sagm]\nrho = 0.1\nalpha = 3.0000000000000004e-7\n");
        let cfg = parse_config(&text).unwrap();
        let back = parse_config(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back.sagm.alpha.to_bits(), 3.0000000000000004e-7f64.to_bits());
        assert_eq!(back.sagm.rho.to_bits(), 0.1f64.to_bits());
    }

    #[test]
    fn range_and_key_errors_carry_paths() {
        assert_eq!(err_path(&format!("{MINIMAL}[freeze]\nr = 1.5\n")), "freeze.r");
        assert_eq!(err_path(&format!("{MINIMAL}[freeze]\nk = 501\n")), "freeze.k");
        assert_eq!(err_path("method = \"QAT\"\n[train]\n"), "train.total_steps");
        assert_eq!(err_path("[train]\ntotal_steps = 5\n"), "method");
        assert_eq!(err_path("method = \"SAM\"\n[train]\ntotal_steps = 5\n"), "method");
        assert_eq!(err_path(&format!("{MINIMAL}[quant]\nbitz = 3\n")), "quant.bitz");
        assert_eq!(
            err_path("method = \"QAT\"\n[train]\ntotal_steps = 5\ncolour = 1\n"),
            "train.colour"
        );
        assert_eq!(err_path(&format!("{MINIMAL}[quant]\nbits = 1\n")), "quant.bits");
        assert_eq!(err_path(&format!("{MINIMAL}[sagm]\nrho = -1.0\n")), "sagm.rho");
    }

    #[test]
    fn policy_rules() {
        let cfg = parse_config(&format!("{MINIMAL}[freeze]\npolicy = \"NoUnfreeze\"\n")).unwrap();
        assert_eq!(cfg.method, Method::Fqat(FreezePolicy::NoUnfreeze));
        assert_eq!(
            err_path("method = \"QAT\"\n[train]\ntotal_steps = 9\n[freeze]\npolicy = \"Off\"\n"),
            "freeze.policy"
        );
        let qat = parse_config("method = \"QAT\"\n[train]\ntotal_steps = 9\n").unwrap();
        assert_eq!(qat.freeze.policy, None);
        assert_eq!(parse_config(&qat.to_toml().unwrap()).unwrap(), qat);
    }

    #[test]
    fn syntax_errors_report_lines() {
        match parse_config("method = \"QAT\"\n[train\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_table_alone() {
        let t: toml::Table = "method = \"nonsense\"\n[dataset]\nn_domains = 5\n".parse().unwrap();
        assert_eq!(dataset_from_table(&t).unwrap().n_domains, 5);
        let bad: toml::Table = "[dataset]\nnoize = 1.0\n".parse().unwrap();
        match dataset_from_table(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "dataset.noize"),
            other => panic!("{other:?}"),
        }
    }
}
