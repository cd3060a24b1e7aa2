//! Command-line flags named after config key paths (`--train.total_steps 500`).

use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    IntList,
    StrList,
}

pub const KEYS: &[(&str, Kind)] = &[
    ("method", Kind::Str),
    ("extra_methods", Kind::StrList),
    ("output_dir", Kind::Str),
    ("dataset.seed", Kind::Int),
    ("dataset.n_domains", Kind::Int),
    ("dataset.n_per_domain", Kind::Int),
    ("dataset.n_classes", Kind::Int),
    ("dataset.dim", Kind::Int),
    ("dataset.cluster_radius", Kind::Float),
    ("dataset.mean_spread", Kind::Float),
    ("dataset.noise", Kind::Float),
    ("dataset.rotation_span", Kind::Float),
    ("dataset.shift_std", Kind::Float),
    ("dataset.scale_span", Kind::Float),
    ("model.hidden", Kind::IntList),
    ("quant.bits", Kind::Int),
    ("quant.normalize_grad", Kind::Bool),
    ("sagm.rho", Kind::Float),
    ("sagm.alpha", Kind::Float),
    ("sagm.lr_theta", Kind::Float),
    ("sagm.lr_scale", Kind::Float),
    ("sagm.weight_decay", Kind::Float),
    ("sagm.scale_combine", Kind::Str),
    ("freeze.policy", Kind::Str),
    ("freeze.k", Kind::Int),
    ("freeze.r", Kind::Float),
    ("train.total_steps", Kind::Int),
    ("train.eval_interval", Kind::Int),
    ("train.batch_per_domain", Kind::Int),
    ("train.val_fraction", Kind::Float),
    ("train.fp_steps", Kind::Int),
    ("train.fp_lr", Kind::Float),
    ("train.calibration_per_domain", Kind::Int),
    ("train.seeds", Kind::IntList),
    ("train.test_domains", Kind::IntList),
    ("probe.n_points", Kind::Int),
    ("probe.radius", Kind::Float),
    ("probe.n_directions", Kind::Int),
    ("probe.rho_probe", Kind::Float),
];

impl Kind {
    pub fn hint(self) -> &'static str {
        match self {
            Kind::Int => "INT",
            Kind::Float => "FLOAT",
            Kind::Bool => "true|false",
            Kind::Str => "STR",
            Kind::IntList => "INT,INT,..",
            Kind::StrList => "STR,STR,..",
        }
    }
}

fn items(raw: &str) -> Vec<&str> {
    let inner = raw.trim();
    let inner = inner
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .unwrap_or(inner);
    inner
        .split(',')
        .map(|s| s.trim().trim_matches('"'))
        .filter(|s| !s.is_empty())
        .collect()
}

/// Converts a flag value to the TOML value stored under `key`.
pub fn to_value(key: &str, kind: Kind, raw: &str) -> Result<Value, CliError> {
    let bad = |what: &str| CliError::config(key, format!("`{raw}` is not {what}"));
    let int = |s: &str| {
        s.trim()
            .parse::<i64>()
            .map(Value::Integer)
            .map_err(|_| bad("an integer"))
    };
    Ok(match kind {
        Kind::Int => int(raw)?,
        Kind::Float => Value::Float(raw.trim().parse().map_err(|_| bad("a number"))?),
        Kind::Bool => Value::Boolean(raw.trim().parse().map_err(|_| bad("true or false"))?),
        Kind::Str => Value::String(raw.to_string()),
        Kind::IntList => Value::Array(items(raw).into_iter().map(int).collect::<Result<_, _>>()?),
        Kind::StrList => Value::Array(items(raw).into_iter().map(|s| Value::String(s.into())).collect()),
    })
}

/// Stores `value` at a dotted key path, creating intermediate tables.
pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for (i, p) in parts.iter().enumerate() {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::config(parts[..=i].join("."), "must be a table")),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn remove_path(table: &mut Table, key: &str) {
    match key.split_once('.') {
        None => {
            table.remove(key);
        }
        Some((head, rest)) => {
            if let Some(Value::Table(t)) = table.get_mut(head) {
                remove_path(t, rest);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_forms() {
        let a = to_value("train.seeds", Kind::IntList, "0,1, 2").unwrap();
        let b = to_value("train.seeds", Kind::IntList, "[0, 1, 2]").unwrap();
        assert_eq!(a, b);
        let m = to_value("extra_methods", Kind::StrList, "QAT,FQAT:NoUnfreeze").unwrap();
        assert_eq!(m.as_array().unwrap()[1].as_str(), Some("FQAT:NoUnfreeze"));
    }

    #[test]
    fn bad_values_name_the_key() {
        let e = to_value("freeze.r", Kind::Float, "lots").unwrap_err();
        assert!(e.message.contains("freeze.r"), "{}", e.message);
    }

    #[test]
    fn nested_set_and_remove() {
        let mut t = Table::new();
        set_path(&mut t, "freeze.policy", Value::String("Off".into())).unwrap();
        assert_eq!(t["freeze"]["policy"].as_str(), Some("Off"));
        remove_path(&mut t, "freeze.policy");
        assert!(t["freeze"].as_table().unwrap().is_empty());
        set_path(&mut t, "method", Value::String("QAT".into())).unwrap();
        assert!(set_path(&mut t, "method.x", Value::Integer(1)).is_err());
    }
}
