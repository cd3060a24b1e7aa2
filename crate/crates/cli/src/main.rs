//! `fqat`: command-line driver for the experiment matrix.
//!
//! Every config key is also a flag named by its key path, applied on top of
//! `--config`. Relative output directories are resolved against
//! `FQAT_OUTPUT_ROOT` when it is set. Success prints one JSON object on
//! stdout; failure prints `{"error": <kind>, "message": ...}` on stderr and
//! exits nonzero (2 for usage errors, 1 otherwise).

mod keys;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{value_parser, Arg, ArgMatches, Command};
use fqat_core::config::{config_from_table, dataset_from_table, ExperimentConfig};
use fqat_core::data::{Partition, SplitPlan};
use fqat_core::harness::{run_quantized, train_full_precision, Method};
use fqat_core::matrix::{run_matrix, summarize};
use fqat_core::probe::{loss_slice, sharpness_proxy};
use serde_json::{json, Value};
use toml::Table;

use keys::{remove_path, set_path, to_value, KEYS};

pub const OUTPUT_ROOT_ENV: &str = "FQAT_OUTPUT_ROOT";

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn config(path: impl AsRef<str>, message: impl AsRef<str>) -> Self {
        Self {
            kind: "config",
            message: format!("config error at `{}`: {}", path.as_ref(), message.as_ref()),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            kind: "io",
            message: format!("i/o error on {}: {e}", path.display()),
        }
    }
}

impl From<fqat_core::Error> for CliError {
    fn from(e: fqat_core::Error) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn with_config_args(mut cmd: Command) -> Command {
    cmd = cmd.args_override_self(true).arg(
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("PATH")
            .help("TOML config file; key flags override it"),
    );
    for (key, kind) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name(kind.hint())
                .help_heading("Config keys"),
        );
    }
    cmd
}

fn cli() -> Command {
    Command::new("fqat")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Flatness-oriented quantization-aware training experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            with_config_args(Command::new("generate-data").about("Write the synthetic multi-domain dataset")).arg(
                Arg::new("out")
                    .long("out")
                    .value_name("PATH")
                    .help("Defaults to <output_dir>/dataset.txt"),
            ),
        )
        .subcommand(with_config_args(
            Command::new("run").about("Run or resume the (method x held-out domain x seed) matrix"),
        ))
        .subcommand(with_config_args(
            Command::new("ablate").about("Run the five freezing-policy variants into <output_dir>/ablate"),
        ))
        .subcommand(
            with_config_args(
                Command::new("probe-landscape").about("Train one cell and probe the loss surface around it"),
            )
            .arg(
                Arg::new("test-domain")
                    .long("test-domain")
                    .value_parser(value_parser!(usize))
                    .help("Defaults to the first of train.test_domains"),
            )
            .arg(
                Arg::new("seed")
                    .long("seed")
                    .value_parser(value_parser!(u64))
                    .help("Defaults to the first of train.seeds"),
            )
            .arg(
                Arg::new("dims")
                    .long("dims")
                    .value_parser(["1", "2"])
                    .default_value("2"),
            ),
        )
        .subcommand(
            Command::new("summarize")
                .about("Recompute summary.csv from the records of a matrix directory")
                .arg(Arg::new("dir").value_name("DIR").required(true)),
        )
}

fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn parse_table(text: &str) -> Result<Table> {
    text.parse().map_err(|e: toml::de::Error| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        fqat_core::Error::Parse {
            line,
            message: e.message().to_string(),
        }
        .into()
    })
}

fn load_table(m: &ArgMatches) -> Result<Table> {
    let mut table = match m.get_one::<String>("config") {
        Some(path) => {
            let path = Path::new(path);
            parse_table(&std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)?
        }
        None => Table::new(),
    };
    for (key, kind) in KEYS {
        if let Some(raw) = m.get_one::<String>(key) {
            set_path(&mut table, key, to_value(key, *kind, raw)?)?;
        }
    }
    Ok(table)
}

fn table_output_dir(table: &Table) -> PathBuf {
    PathBuf::from(table.get("output_dir").and_then(|v| v.as_str()).unwrap_or("runs"))
}

fn generate_data(m: &ArgMatches) -> Result<Value> {
    let table = load_table(m)?;
    let ds = dataset_from_table(&table)?.generate()?;
    let path = match m.get_one::<String>("out") {
        Some(p) => PathBuf::from(p),
        None => output_path(&table_output_dir(&table)).join("dataset.txt"),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    ds.save(&path)?;
    Ok(json!({
        "command": "generate-data",
        "path": path,
        "domains": ds.domains.iter().map(|d| d.name.clone()).collect::<Vec<_>>(),
        "samples_per_domain": ds.domains[0].len(),
        "dim": ds.dim,
        "classes": ds.n_classes,
    }))
}

fn matrix(command: &str, cfg: &ExperimentConfig) -> Result<Value> {
    let out = output_path(&cfg.output_dir);
    let report = run_matrix(cfg, &out)?;
    Ok(json!({
        "command": command,
        "output_dir": out,
        "executed": report.executed,
        "skipped": report.skipped,
        "summary": out.join("summary.csv"),
        "summary_rows": report.summary.len(),
    }))
}

fn ablation_table(mut table: Table) -> Result<Table> {
    let base = table_output_dir(&table);
    let variants: Vec<toml::Value> = Method::ablations()
        .iter()
        .skip(1)
        .map(|m| toml::Value::String(m.to_string()))
        .collect();
    if table.get("freeze").and_then(|f| f.get("policy")).is_some() {
        log::warn!("freeze.policy is ignored by ablate");
        remove_path(&mut table, "freeze.policy");
    }
    table.insert("method".into(), toml::Value::String(Method::ablations()[0].to_string()));
    table.insert("extra_methods".into(), toml::Value::Array(variants));
    let dir = base.join("ablate");
    table.insert(
        "output_dir".into(),
        toml::Value::String(dir.to_string_lossy().into_owned()),
    );
    Ok(table)
}

fn probe_landscape(m: &ArgMatches) -> Result<Value> {
    let cfg = config_from_table(load_table(m)?)?;
    let domain = match m.get_one::<usize>("test-domain") {
        Some(d) => *d,
        None => cfg.test_domains()[0],
    };
    let seed = m.get_one::<u64>("seed").copied().unwrap_or(cfg.train.seeds[0]);
    let dims: usize = m
        .get_one::<String>("dims")
        .expect("has default")
        .parse()
        .expect("1 or 2");

    let ds = cfg.dataset.generate()?;
    let partition = Partition::new(
        &ds,
        SplitPlan::leave_one_out(&ds, domain, cfg.train.val_fraction)?,
        seed,
    )?;
    let spec = cfg.model_spec();
    let hyper = cfg.hyper();
    let fp = train_full_precision(&ds, &partition, &spec, &hyper, seed)?;
    let run = if cfg.method.is_quantized() {
        run_quantized(
            &ds,
            &partition,
            Some(&fp.selected),
            &spec,
            cfg.quant.bits,
            cfg.method,
            &hyper,
            seed,
        )?
    } else {
        fp
    };
    let mut model = run.last;
    let batch = partition.calibration_batch(&ds, cfg.train.calibration_per_domain)?;
    let grid = loss_slice(&mut model, &batch, &cfg.probe, dims, seed)?;
    let sharpness = sharpness_proxy(&mut model, &batch, &cfg.probe, seed)?;

    let method = cfg.method.to_string().replace(':', "_");
    let dir = output_path(&cfg.output_dir)
        .join("landscape")
        .join(format!("{method}__d{domain}__s{seed}"));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let csv = dir.join("slice.csv");
    grid.write_csv(&csv)?;
    let report = json!({
        "command": "probe-landscape",
        "method": cfg.method.to_string(),
        "test_domain": domain,
        "seed": seed,
        "bits": cfg.method.is_quantized().then_some(cfg.quant.bits),
        "checkpoint": "last",
        "dims": dims,
        "base_loss": grid.base_loss,
        "sharpness_proxy": sharpness,
        "rho_probe": cfg.probe.rho_probe,
        "flagged": grid.flagged,
        "test_acc": run.record.final_row.as_ref().map(|f| f.test_acc),
        "slice": csv,
    });
    let json_path = dir.join("probe.json");
    std::fs::write(&json_path, format!("{report:#}\n")).map_err(|e| CliError::io(&json_path, e))?;
    Ok(report)
}

fn summarize_dir(m: &ArgMatches) -> Result<Value> {
    let dir = output_path(Path::new(m.get_one::<String>("dir").expect("required")));
    if !dir.is_dir() {
        return Err(CliError::io(&dir, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let rows = summarize(&dir)?;
    Ok(json!({
        "command": "summarize",
        "summary": dir.join("summary.csv"),
        "rows": rows.iter().map(|r| json!({
            "method": r.method,
            "domain": r.domain,
            "bits": r.bits,
            "n_runs": r.n_runs,
            "val_mean": r.val_mean,
            "val_std_pop": r.val_std_pop,
            "test_mean": r.test_mean,
            "test_std_pop": r.test_std_pop,
        })).collect::<Vec<_>>(),
    }))
}

fn dispatch(m: &ArgMatches) -> Result<Value> {
    match m.subcommand() {
        Some(("generate-data", sub)) => generate_data(sub),
        Some(("run", sub)) => matrix("run", &config_from_table(load_table(sub)?)?),
        Some(("ablate", sub)) => matrix("ablate", &config_from_table(ablation_table(load_table(sub)?)?)?),
        Some(("probe-landscape", sub)) => probe_landscape(sub),
        Some(("summarize", sub)) => summarize_dir(sub),
        _ => unreachable!("subcommand required"),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    match dispatch(&matches) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind, &e.message, 1),
    }
}
