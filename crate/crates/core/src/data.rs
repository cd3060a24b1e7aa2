//! Synthetic multi-domain classification data.
//!
//! Every domain draws from the same class-conditional Gaussian clusters and
//! then applies its own rotation and shift, so domains share labels and
//! feature space but differ in geometry. Evaluation follows a
//! leave-one-domain-out protocol: one domain is held out for testing and a
//! validation fraction is carved out of every remaining domain.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::graph::Target;
use crate::tensor::Tensor;

/// Deterministic RNG for one `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shape of the generated clusters and of the domain shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    /// Radius of the circle the class means sit on (first two features).
    pub cluster_radius: f64,
    /// Spread of class means along the remaining features.
    pub mean_spread: f64,
    /// Per-feature standard deviation of samples around their class mean.
    pub noise: f64,
    /// Total rotation range across domains, in radians.
    pub rotation_span: f64,
    /// Standard deviation of the per-domain shift.
    pub shift_std: f64,
    /// Log-range of the per-domain gain applied before rotation.
    pub scale_span: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            cluster_radius: 3.0,
            mean_spread: 1.0,
            noise: 0.8,
            rotation_span: 0.5,
            shift_std: 0.3,
            scale_span: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTransform {
    pub gain: f64,
    /// Rotation applied in every consecutive feature plane `(0,1), (2,3), ...`.
    pub angle: f64,
    pub shift: Vec<f64>,
}

impl DomainTransform {
    fn apply(&self, x: &mut [f64]) {
        let (s, c) = self.angle.sin_cos();
        for pair in x.chunks_exact_mut(2) {
            let (a, b) = (self.gain * pair[0], self.gain * pair[1]);
            pair[0] = c * a - s * b;
            pair[1] = s * a + c * b;
        }
        if x.len() % 2 == 1 {
            let last = x.len() - 1;
            x[last] *= self.gain;
        }
        for (v, b) in x.iter_mut().zip(&self.shift) {
            *v += b;
        }
    }

    fn distance(&self, other: &DomainTransform) -> f64 {
        let ds: f64 = self.shift.iter().zip(&other.shift).map(|(a, b)| (a - b).powi(2)).sum();
        ((self.gain.ln() - other.gain.ln()).powi(2) + (self.angle - other.angle).powi(2) + ds).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub transform: DomainTransform,
    /// `[n, dim]`
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub dim: usize,
    pub n_classes: usize,
    pub generator_seed: u64,
    pub domains: Vec<Domain>,
}

/// Generates `n_domains` rotated and shifted copies of one cluster layout.
pub fn generate_domains(
    seed: u64,
    n_domains: usize,
    n_per_domain: usize,
    n_classes: usize,
    dim: usize,
    params: &GeneratorParams,
) -> Result<DomainDataset> {
    if n_domains < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 domains, got {n_domains}"
        )));
    }
    if n_classes < 2 || dim < 2 || n_per_domain < n_classes {
        return Err(Error::InvalidArgument(format!(
            "invalid sizes: {n_per_domain} samples/domain, {n_classes} classes, dim {dim}"
        )));
    }
    let finite = [
        params.noise,
        params.cluster_radius,
        params.shift_std,
        params.mean_spread,
        params.rotation_span,
        params.scale_span,
    ]
    .iter()
    .all(|v| v.is_finite());
    if !(finite
        && params.noise > 0.0
        && params.cluster_radius > 0.0
        && params.shift_std >= 0.0
        && params.mean_spread >= 0.0)
    {
        return Err(Error::InvalidArgument(format!("invalid generator params {params:?}")));
    }
    let mut rng = stream_rng(seed, 0);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            let phi = std::f64::consts::TAU * c as f64 / n_classes as f64;
            let mut m = vec![params.cluster_radius * phi.cos(), params.cluster_radius * phi.sin()];
            m.extend((2..dim).map(|_| params.mean_spread * unit.sample(&mut rng)));
            m
        })
        .collect();

    let mut domains = Vec::with_capacity(n_domains);
    for d in 0..n_domains {
        let pos = d as f64 / (n_domains - 1) as f64 - 0.5;
        let jitter = 0.05 * params.rotation_span * (rng.random::<f64>() - 0.5);
        let transform = DomainTransform {
            gain: (params.scale_span * pos).exp(),
            angle: params.rotation_span * pos + jitter,
            shift: (0..dim).map(|_| params.shift_std * unit.sample(&mut rng)).collect(),
        };
        let mut features = Vec::with_capacity(n_per_domain * dim);
        let mut labels = Vec::with_capacity(n_per_domain);
        for i in 0..n_per_domain {
            let c = i % n_classes;
            let mut x: Vec<f64> = means[c]
                .iter()
                .map(|m| m + params.noise * unit.sample(&mut rng))
                .collect();
            transform.apply(&mut x);
            features.extend(x);
            labels.push(c);
        }
        domains.push(Domain {
            name: format!("d{d}"),
            transform,
            features: Tensor::matrix(n_per_domain, dim, features)?,
            labels,
        });
    }
    Ok(DomainDataset {
        dim,
        n_classes,
        generator_seed: seed,
        domains,
    })
}

impl DomainDataset {
    /// Largest distance between two domains' transform parameters.
    pub fn max_transform_distance(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.domains.iter().enumerate() {
            for b in &self.domains[i + 1..] {
                best = best.max(a.transform.distance(&b.transform));
            }
        }
        best
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    /// Line-oriented text export; [`DomainDataset::from_text`] reads it back bit-exactly.
    ///
    /// ```text
    /// fqat-dataset 1
    /// dim 2
    /// classes 3
    /// domains d0 d1 d2
    /// seed 7
    /// transform d0 <gain> <angle> <shift_0> ... <shift_{dim-1}>
    /// ...
    /// samples
    /// <domain index> <label> <feature_0> ... <feature_{dim-1}>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        writeln!(out, "fqat-dataset 1").unwrap();
        writeln!(out, "dim {}", self.dim).unwrap();
        writeln!(out, "classes {}", self.n_classes).unwrap();
        writeln!(out, "domains {}", names.join(" ")).unwrap();
        writeln!(out, "seed {}", self.generator_seed).unwrap();
        for d in &self.domains {
            write!(
                out,
                "transform {} {:?} {:?}",
                d.name, d.transform.gain, d.transform.angle
            )
            .unwrap();
            for s in &d.transform.shift {
                write!(out, " {s:?}").unwrap();
            }
            out.push('\n');
        }
        out.push_str("samples\n");
        for (di, d) in self.domains.iter().enumerate() {
            for (i, &label) in d.labels.iter().enumerate() {
                write!(out, "{di} {label}").unwrap();
                for v in d.features.row(i) {
                    write!(out, " {v:?}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut header = |key: &str| -> Result<(usize, String)> {
            let (n, line) = lines.next().ok_or_else(|| err(0, format!("missing `{key}` line")))?;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| err(n, format!("expected `{key}`, found `{line}`")))?;
            Ok((n, rest.trim().to_string()))
        };
        let (n, version) = header("fqat-dataset")?;
        if version != "1" {
            return Err(err(n, format!("unsupported version `{version}`")));
        }
        let parse_usize = |n: usize, s: &str| s.parse::<usize>().map_err(|e| err(n, format!("`{s}`: {e}")));
        let (n, dim) = header("dim")?;
        let dim = parse_usize(n, &dim)?;
        let (n, classes) = header("classes")?;
        let n_classes = parse_usize(n, &classes)?;
        let (_, names) = header("domains")?;
        let names: Vec<String> = names.split_whitespace().map(str::to_string).collect();
        let (n, seed) = header("seed")?;
        let generator_seed = seed.parse::<u64>().map_err(|e| err(n, format!("`{seed}`: {e}")))?;

        let parse_f64 = |n: usize, s: &str| s.parse::<f64>().map_err(|e| err(n, format!("`{s}`: {e}")));
        let mut transforms = Vec::with_capacity(names.len());
        for name in &names {
            let (n, rest) = header("transform")?;
            let mut parts = rest.split_whitespace();
            let got = parts.next().unwrap_or_default();
            if got != name {
                return Err(err(n, format!("transform for `{got}`, expected `{name}`")));
            }
            let nums = parts.map(|p| parse_f64(n, p)).collect::<Result<Vec<_>>>()?;
            if nums.len() != dim + 2 {
                return Err(err(
                    n,
                    format!("transform needs {} numbers, got {}", dim + 2, nums.len()),
                ));
            }
            transforms.push(DomainTransform {
                gain: nums[0],
                angle: nums[1],
                shift: nums[2..].to_vec(),
            });
        }
        header("samples")?;

        let mut feats: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        let mut labels: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let d = parse_usize(n, parts.next().unwrap_or_default())?;
            let c = parse_usize(n, parts.next().ok_or_else(|| err(n, "missing label".into()))?)?;
            if d >= names.len() {
                return Err(err(n, format!("domain index {d} out of range")));
            }
            if c >= n_classes {
                return Err(err(n, format!("label {c} out of range")));
            }
            let x = parts.map(|p| parse_f64(n, p)).collect::<Result<Vec<_>>>()?;
            if x.len() != dim {
                return Err(err(n, format!("expected {dim} features, got {}", x.len())));
            }
            feats[d].extend(x);
            labels[d].push(c);
        }
        let domains = names
            .into_iter()
            .zip(transforms)
            .zip(feats.into_iter().zip(labels))
            .map(|((name, transform), (f, l))| {
                if l.is_empty() {
                    return Err(err(0, format!("domain `{name}` has no samples")));
                }
                Ok(Domain {
                    name,
                    transform,
                    features: Tensor::matrix(l.len(), dim, f)?,
                    labels: l,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            n_classes,
            generator_seed,
            domains,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Which domain is held out, and how much of each training domain validates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_domain: usize,
    pub train_domains: Vec<usize>,
    pub val_fraction: f64,
}

impl SplitPlan {
    pub fn leave_one_out(dataset: &DomainDataset, test_domain: usize, val_fraction: f64) -> Result<Self> {
        if test_domain >= dataset.domains.len() {
            return Err(Error::InvalidArgument(format!("no domain {test_domain}")));
        }
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::config(
                "train.val_fraction",
                format!("{val_fraction} outside (0, 1)"),
            ));
        }
        Ok(Self {
            test_domain,
            train_domains: (0..dataset.domains.len()).filter(|&d| d != test_domain).collect(),
            val_fraction,
        })
    }
}

/// Row indices of every partition, materialized from a [`SplitPlan`].
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub plan: SplitPlan,
    /// `(domain, training rows)` per training domain.
    pub train: Vec<(usize, Vec<usize>)>,
    /// `(domain, validation rows)` per training domain.
    pub val: Vec<(usize, Vec<usize>)>,
}

impl Partition {
    pub fn new(dataset: &DomainDataset, plan: SplitPlan, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, 1);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for &d in &plan.train_domains {
            let mut rows: Vec<usize> = (0..dataset.domains[d].len()).collect();
            rows.shuffle(&mut rng);
            let n_val = ((rows.len() as f64) * plan.val_fraction).round() as usize;
            if n_val == 0 || n_val >= rows.len() {
                return Err(Error::InvalidArgument(format!(
                    "domain {d}: validation fraction leaves an empty partition"
                )));
            }
            let tr = rows.split_off(n_val);
            val.push((d, rows));
            train.push((d, tr));
        }
        Ok(Self { plan, train, val })
    }

    /// Equal-sized random draws from every training domain, concatenated.
    pub fn sample_train_batch<R: Rng>(&self, dataset: &DomainDataset, per_domain: usize, rng: &mut R) -> Result<Batch> {
        let picks: Vec<(usize, Vec<usize>)> = self
            .train
            .iter()
            .map(|(d, rows)| {
                (
                    *d,
                    (0..per_domain).map(|_| rows[rng.random_range(0..rows.len())]).collect(),
                )
            })
            .collect();
        gather(dataset, &picks)
    }

    /// Up to `per_domain` leading training rows of every training domain.
    pub fn calibration_batch(&self, dataset: &DomainDataset, per_domain: usize) -> Result<Batch> {
        let picks: Vec<(usize, Vec<usize>)> = self
            .train
            .iter()
            .map(|(d, rows)| (*d, rows.iter().take(per_domain).copied().collect()))
            .collect();
        gather(dataset, &picks)
    }

    pub fn val_batch(&self, dataset: &DomainDataset) -> Result<Batch> {
        gather(dataset, &self.val)
    }

    pub fn test_batch(&self, dataset: &DomainDataset) -> Result<Batch> {
        let d = self.plan.test_domain;
        gather(dataset, &[(d, (0..dataset.domains[d].len()).collect())])
    }
}

fn gather(dataset: &DomainDataset, picks: &[(usize, Vec<usize>)]) -> Result<Batch> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    for (d, rows) in picks {
        let dom = &dataset.domains[*d];
        for &r in rows {
            features.extend_from_slice(dom.features.row(r));
            labels.push(dom.labels[r]);
            domains.push(*d);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inputs = Tensor::matrix(labels.len(), dataset.dim, features)?;
    Batch::new(inputs, Target::Labels(labels), domains)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DomainDataset {
        generate_domains(7, 4, 60, 3, 2, &GeneratorParams::default()).unwrap()
    }

    #[test]
    fn deterministic_and_distinct() {
        let a = small();
        let b = small();
        assert_eq!(a, b);
        assert!(a.max_transform_distance() > 0.0);
        let c = generate_domains(8, 4, 60, 3, 2, &GeneratorParams::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_sizes() {
        let p = GeneratorParams::default();
        assert!(generate_domains(0, 2, 60, 3, 2, &p).is_err());
        assert!(generate_domains(0, 3, 60, 1, 2, &p).is_err());
        assert!(generate_domains(0, 3, 2, 3, 2, &p).is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let a = small();
        let b = DomainDataset::from_text(&a.to_text()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn text_parse_errors_carry_line_numbers() {
        let text = small().to_text().replace("classes 3", "classes x");
        match DomainDataset::from_text(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partition_excludes_test_domain() {
        let ds = small();
        let plan = SplitPlan::leave_one_out(&ds, 2, 0.2).unwrap();
        let part = Partition::new(&ds, plan, 3).unwrap();
        assert!(part.train.iter().all(|(d, _)| *d != 2));
        assert!(part.val.iter().all(|(d, _)| *d != 2));
        let mut rng = stream_rng(1, 2);
        let b = part.sample_train_batch(&ds, 8, &mut rng).unwrap();
        assert_eq!(b.len(), 24);
        assert!(b.domains.iter().all(|&d| d != 2));
        assert!(part.test_batch(&ds).unwrap().domains.iter().all(|&d| d == 2));
        for ((_, tr), (_, va)) in part.train.iter().zip(&part.val) {
            assert_eq!(tr.len() + va.len(), 60);
            assert!(tr.iter().all(|r| !va.contains(r)));
        }
    }
}
