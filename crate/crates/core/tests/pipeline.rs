use fqat_core::batch::Batch;
use fqat_core::config::parse_config;
use fqat_core::data::{generate_domains, stream_rng, GeneratorParams, Partition, SplitPlan};
use fqat_core::graph::Target;
use fqat_core::harness::evaluate;
use fqat_core::matrix::{load_records, run_matrix, summarize};
use fqat_core::model::{MlpSpec, Model};
use fqat_core::sagm::{self, SagmConfig};
use fqat_core::tensor::Tensor;
use fqat_core::Error;

/// Per-domain softmax regression trained by plain gradient descent.
#[allow(clippy::needless_range_loop)]
fn linear_probe_accuracy(x: &Tensor, labels: &[usize], n_classes: usize) -> f64 {
    let (n, d) = x.dims2();
    let mut w = vec![0.0; (d + 1) * n_classes];
    for _ in 0..2000 {
        let mut grad = vec![0.0; w.len()];
        for i in 0..n {
            let row = x.row(i);
            let logits: Vec<f64> = (0..n_classes)
                .map(|c| w[d * n_classes + c] + (0..d).map(|j| row[j] * w[j * n_classes + c]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..n_classes {
                let p = (logits[c] - m).exp() / z - f64::from(u8::from(c == labels[i]));
                for j in 0..d {
                    grad[j * n_classes + c] += p * row[j];
                }
                grad[d * n_classes + c] += p;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= 0.5 * gi / n as f64;
        }
    }
    let correct = (0..n)
        .filter(|&i| {
            let row = x.row(i);
            let score = |c: usize| w[d * n_classes + c] + (0..d).map(|j| row[j] * w[j * n_classes + c]).sum::<f64>();
            (0..n_classes).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap() == labels[i]
        })
        .count();
    correct as f64 / n as f64
}

#[test]
fn every_domain_is_linearly_separable() {
    let ds = generate_domains(0, 4, 300, 3, 2, &GeneratorParams::default()).unwrap();
    for dom in &ds.domains {
        let acc = linear_probe_accuracy(&dom.features, &dom.labels, 3);
        assert!(acc >= 0.95, "{}: linear probe accuracy {acc}", dom.name);
    }
}

#[test]
fn random_init_scores_near_chance() {
    let ds = generate_domains(3, 4, 600, 4, 8, &GeneratorParams::default()).unwrap();
    let part = Partition::new(&ds, SplitPlan::leave_one_out(&ds, 0, 0.2).unwrap(), 0).unwrap();
    let test = part.test_batch(&ds).unwrap();
    let spec = MlpSpec {
        input_dim: 8,
        hidden: vec![16, 16],
        n_classes: 4,
    };
    let accs: Vec<f64> = (0..5)
        .map(|seed| evaluate(&Model::mlp(&spec, &mut stream_rng(seed, 10)).unwrap(), &test).unwrap())
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.25).abs() <= 0.1, "mean accuracy {mean} over {accs:?}");
}

#[test]
fn memorizer_scores_one() {
    let labels = vec![0, 2, 1, 1, 0, 2];
    let onehot: Vec<f64> = labels
        .iter()
        .flat_map(|&l| (0..3).map(move |c| f64::from(u8::from(c == l))))
        .collect();
    let batch = Batch::untagged(Tensor::matrix(6, 3, onehot).unwrap(), Target::Labels(labels));
    let spec = MlpSpec {
        input_dim: 3,
        hidden: vec![],
        n_classes: 3,
    };
    let mut m = Model::mlp(&spec, &mut stream_rng(0, 0)).unwrap();
    let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    m.store.set_values(&[eye, Tensor::zeros(&[3])]).unwrap();
    assert_eq!(evaluate(&m, &batch).unwrap(), 1.0);
}

#[test]
fn stale_dual_gradients_are_rejected() {
    let ds = generate_domains(1, 3, 60, 3, 4, &GeneratorParams::default()).unwrap();
    let part = Partition::new(&ds, SplitPlan::leave_one_out(&ds, 2, 0.2).unwrap(), 0).unwrap();
    let spec = MlpSpec {
        input_dim: 4,
        hidden: vec![8, 8],
        n_classes: 3,
    };
    let fp = Model::mlp(&spec, &mut stream_rng(0, 10)).unwrap();
    let calib = part.calibration_batch(&ds, 8).unwrap();
    let (mut m, _) = Model::quantize_mlp(&fp, &spec, 3, false, &calib.inputs).unwrap();
    let cfg = SagmConfig::default();
    let batch = part.sample_train_batch(&ds, 4, &mut stream_rng(0, 12)).unwrap();
    let d = sagm::compute_dual_gradients(&mut m, &batch, &cfg).unwrap();
    sagm::apply_theta_update(&mut m, &d, &cfg).unwrap();
    assert!(matches!(
        sagm::apply_theta_update(&mut m, &d, &cfg),
        Err(Error::StaleGradients { .. })
    ));
}

const SMALL: &str = r#"
method = "QAT"
extra_methods = ["FP-ERM"]

[dataset]
n_per_domain = 60

[train]
total_steps = 20
fp_steps = 20
eval_interval = 10
batch_per_domain = 4
calibration_per_domain = 8
seeds = [0, 1]
test_domains = [2]
"#;

#[test]
fn matrix_resumes_only_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = parse_config(SMALL).unwrap();
    let first = run_matrix(&cfg, out).unwrap();
    assert_eq!((first.executed, first.skipped), (4, 0));
    assert_eq!(first.summary.len(), 2);

    let mut cells: Vec<_> = std::fs::read_dir(out.join("cells"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    cells.sort();
    let kept = std::fs::read_to_string(cells[1].join("record.jsonl")).unwrap();
    // An interrupted cell: record without its final row.
    let victim = cells[0].join("record.jsonl");
    let text = std::fs::read_to_string(&victim).unwrap();
    let truncated: Vec<&str> = text.lines().filter(|l| !l.contains("\"row\":\"final\"")).collect();
    std::fs::write(&victim, truncated.join("\n") + "\n").unwrap();
    assert_eq!(load_records(out).unwrap().len(), 3);

    let second = run_matrix(&cfg, out).unwrap();
    assert_eq!((second.executed, second.skipped), (1, 3));
    assert_eq!(std::fs::read_to_string(&victim).unwrap(), text);
    assert_eq!(std::fs::read_to_string(cells[1].join("record.jsonl")).unwrap(), kept);
    assert_eq!(summarize(out).unwrap(), first.summary);
}

#[test]
fn changed_config_in_same_directory_is_a_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(SMALL).unwrap();
    run_matrix(&cfg, dir.path()).unwrap();
    let mut other = cfg.clone();
    other.sagm.rho = 0.2;
    match run_matrix(&other, dir.path()) {
        Err(Error::ConfigConflict { diff, .. }) => {
            assert!(diff.contains("- rho = 0.05"), "{diff}");
            assert!(diff.contains("+ rho = 0.2"), "{diff}");
        }
        other => panic!("expected a conflict, got {other:?}"),
    }
}
