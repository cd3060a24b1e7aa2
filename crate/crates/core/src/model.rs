//! Dense rectified-linear classifiers, full-precision or fake-quantized.
//!
//! Quantizer placement for an MLP with layers `fc0 .. fc{L-1}`:
//! - `fc0` keeps full-precision weights; its rectified output is quantized (`fc0.a`).
//! - hidden layers `fc1 .. fc{L-2}` quantize weights (`fc{i}.w`) and outputs (`fc{i}.a`).
//! - the output layer `fc{L-1}` is left unquantized.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamKind, ParamStore, Parameter};
use crate::quantizer::{self, QuantKind, QuantSpec, ScaleInit};
use crate::tensor::Tensor;

/// Layer widths of a dense classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
}

impl MlpSpec {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.n_classes);
        w
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive: {self:?}"
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Where a quantizer sits: the graph node feeding it, and its spec.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSite {
    pub scale_index: usize,
    pub input_node: NodeId,
    pub spec: QuantSpec,
}

/// A graph together with the parameters and scales it reads.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    graph: Graph,
    sites: Vec<QuantSite>,
}

impl Model {
    /// Wraps a hand-built graph. `sites` lists its fake-quantize nodes.
    pub fn from_parts(store: ParamStore, graph: Graph, sites: Vec<QuantSite>) -> Self {
        Self { store, graph, sites }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn sites(&self) -> &[QuantSite] {
        &self.sites
    }

    pub fn is_quantized(&self) -> bool {
        !self.store.scales().is_empty()
    }

    /// Forward pass only; the cache is kept so a `backward` may follow.
    pub fn loss(&mut self, batch: &Batch) -> Result<f64> {
        self.graph.forward(&self.store, &batch.inputs, &batch.target)
    }

    /// Forward and backward; gradients land in `self.store`.
    pub fn loss_and_grad(&mut self, batch: &Batch) -> Result<f64> {
        let l = self.graph.forward(&self.store, &batch.inputs, &batch.target)?;
        self.graph.backward(&mut self.store)?;
        Ok(l)
    }

    /// Loss of the current parameters without caching anything.
    pub fn eval_loss(&self, batch: &Batch) -> Result<f64> {
        let loss = self.graph.loss_node().ok_or(Error::NoLossNode)?;
        let values = self
            .graph
            .evaluate(&self.store, &batch.inputs, Some(&batch.target), loss)?;
        Ok(values[loss].data()[0])
    }

    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        self.graph.predict(&self.store, inputs)
    }

    /// Full-precision MLP with He-normal weights and zero biases.
    pub fn mlp<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut store = ParamStore::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            store.add_param(Parameter::new(
                format!("fc{i}.weight"),
                ParamKind::Weight,
                Tensor::matrix(fan_in, fan_out, w)?,
            ));
            store.add_param(Parameter::new(
                format!("fc{i}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[fan_out]),
            ));
        }
        let (graph, _) = build_mlp_graph(spec, None);
        Ok(Self {
            store,
            graph,
            sites: Vec::new(),
        })
    }

    /// Builds the fake-quantized counterpart of a full-precision MLP.
    ///
    /// Weights are copied from `fp`. Weight scales are initialized by MSE
    /// search over the weight values, activation scales over the rectified
    /// activations the full-precision network produces on `calibration`.
    pub fn quantize_mlp(
        fp: &Model,
        spec: &MlpSpec,
        bits: u32,
        normalize_grad: bool,
        calibration: &Tensor,
    ) -> Result<(Self, Vec<ScaleInit>)> {
        spec.validate()?;
        if fp.is_quantized() {
            return Err(Error::InvalidArgument("source model is already quantized".into()));
        }
        let (fp_graph, fp_relus) = build_mlp_graph(spec, None);
        let out = fp_graph.output_node().ok_or(Error::NoLossNode)?;
        let acts = fp_graph.evaluate(&fp.store, calibration, None, out)?;

        let mut store = fp.store.clone();
        let mut inits = Vec::new();
        let mut plan = Vec::new();
        for layer in quantized_layers(spec) {
            let mut w_idx = None;
            if layer.quantize_weight {
                let qspec = QuantSpec::new(bits, QuantKind::Weight)?;
                let values = store.param(2 * layer.index)?.tensor.data().to_vec();
                let init = quantizer::mse_init_scale(&values, qspec, format!("fc{}.w", layer.index))?;
                w_idx = Some(store.add_scale(init.scale.clone()));
                inits.push(init);
            }
            let qspec = QuantSpec::new(bits, QuantKind::Activation)?;
            let values = acts[fp_relus[layer.index]].data().to_vec();
            let init = quantizer::mse_init_scale(&values, qspec, format!("fc{}.a", layer.index))?;
            let a_idx = store.add_scale(init.scale.clone());
            inits.push(init);
            plan.push(LayerQuant {
                weight_scale: w_idx,
                act_scale: a_idx,
            });
        }
        let (graph, _) = build_mlp_graph(spec, Some((&plan, normalize_grad)));
        let sites = collect_sites(&graph, &store);
        Ok((Self { store, graph, sites }, inits))
    }
}

struct LayerPlan {
    index: usize,
    quantize_weight: bool,
}

/// Layers carrying an output quantizer, in order.
fn quantized_layers(spec: &MlpSpec) -> Vec<LayerPlan> {
    (0..spec.n_layers().saturating_sub(1))
        .map(|index| LayerPlan {
            index,
            quantize_weight: index > 0,
        })
        .collect()
}

struct LayerQuant {
    weight_scale: Option<usize>,
    act_scale: usize,
}

/// Returns the graph and the rectified-output node of each hidden layer.
fn build_mlp_graph(spec: &MlpSpec, quant: Option<(&[LayerQuant], bool)>) -> (Graph, Vec<NodeId>) {
    let mut g = Graph::new();
    let mut h = g.input();
    let mut relus = Vec::new();
    let n_layers = spec.n_layers();
    for i in 0..n_layers {
        let lq = quant.and_then(|(plan, norm)| plan.get(i).map(|p| (p, norm)));
        let mut w = g.param(format!("fc{i}.weight"), 2 * i);
        if let Some((
            LayerQuant {
                weight_scale: Some(ws), ..
            },
            norm,
        )) = lq
        {
            w = g.fake_quant(format!("fc{i}.w"), w, *ws, norm);
        }
        let b = g.param(format!("fc{i}.bias"), 2 * i + 1);
        let z = g.matmul(format!("fc{i}"), h, w);
        h = g.bias_add(format!("fc{i}.bias_add"), z, b);
        if i + 1 < n_layers {
            h = g.relu(format!("fc{i}.relu"), h);
            relus.push(h);
            if let Some((p, norm)) = lq {
                h = g.fake_quant(format!("fc{i}.a"), h, p.act_scale, norm);
            }
        }
    }
    g.softmax_cross_entropy(h);
    (g, relus)
}

fn collect_sites(graph: &Graph, store: &ParamStore) -> Vec<QuantSite> {
    graph
        .nodes()
        .iter()
        .filter_map(|n| match n.op {
            crate::graph::Op::FakeQuant { input, scale, .. } => Some(QuantSite {
                scale_index: scale,
                input_node: input,
                spec: store.scales()[scale].spec,
            }),
            _ => None,
        })
        .collect()
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (n, _) = logits.dims2();
    let correct = (0..n)
        .filter(|&i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == labels[i]
        })
        .count();
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Target;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> MlpSpec {
        MlpSpec {
            input_dim: 3,
            hidden: vec![5, 4],
            n_classes: 3,
        }
    }

    #[test]
    fn quantizer_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fp = Model::mlp(&spec(), &mut rng).unwrap();
        assert!(!fp.is_quantized());
        let calib = Tensor::matrix(4, 3, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let (q, inits) = Model::quantize_mlp(&fp, &spec(), 3, false, &calib).unwrap();
        let ids: Vec<&str> = q.store.scales().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["fc0.a", "fc1.w", "fc1.a"]);
        assert_eq!(inits.len(), 3);
        assert_eq!(q.sites().len(), 3);
        // Parameters are shared verbatim with the source model.
        assert_eq!(q.store.params(), fp.store.params());
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Model::mlp(&spec(), &mut rng).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.9, 0.0, -1.0]).unwrap();
        let batch = Batch::untagged(x, Target::Labels(vec![0, 2]));
        let a = m.loss(&batch).unwrap();
        let b = m.loss(&batch).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(m.eval_loss(&batch).unwrap().to_bits(), a.to_bits());
    }

    #[test]
    fn accuracy_of_constant_predictor() {
        let logits = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((accuracy(&logits, &[0, 1, 2]) - 1.0 / 3.0).abs() < 1e-15);
    }
}
