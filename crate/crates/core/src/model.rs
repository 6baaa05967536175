//! A model is a `LayerGraph` plus its parameter tensors. Every forward pass
//! records a fresh tape, so training and inference share one wiring path.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cbam_spatial_attention_tape, l2_sab_attention_tape, L2SabConfig};
use crate::error::{Error, Result};
use crate::graph::{Layer, LayerGraph};
use crate::ops;
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub graph: LayerGraph,
    pub params: BTreeMap<String, Tensor<T>>,
}

/// One recorded forward pass.
pub struct ForwardPass<T: Scalar> {
    pub tape: Tape<T>,
    pub logits: NodeId,
}

impl<T: Scalar> Model<T> {
    /// Initialize parameters with fan-balanced uniform draws (weights) and
    /// zeros (biases) from a seeded generator. The same seed always yields
    /// the same parameters; draws happen in network order.
    pub fn init(graph: LayerGraph, seed: u64) -> Result<Self> {
        graph.infer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in graph.parameter_shapes() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let (fan_in, fan_out) = fans(&shape);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n: usize = shape.iter().product();
                let data: Vec<T> = (0..n)
                    .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
                    .collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, tensor);
        }
        Ok(Model { graph, params })
    }

    /// Wrap existing parameters (e.g. loaded from a checkpoint), verifying
    /// they exactly match the graph's parameter table.
    pub fn from_parts(graph: LayerGraph, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        graph.infer_shapes()?;
        let expected = graph.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::invalid(
                "model",
                format!("expected {} parameter tensors, got {}", expected.len(), params.len()),
            ));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::invalid("model", format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::shape(
                        "model",
                        "parameter tensor",
                        format!("{name} as {shape:?}"),
                        format!("{:?}", t.shape()),
                    ));
                }
                _ => {}
            }
        }
        Ok(Model { graph, params })
    }

    pub fn param_count(&self) -> usize {
        self.graph.count_parameters()
    }

    /// Record the graph on `tape` starting from the node `input`, returning
    /// the logits node. Parameters are registered under their layer names.
    pub fn record(&self, tape: &mut Tape<T>, input: NodeId) -> Result<NodeId> {
        let mut param_ids: BTreeMap<&str, NodeId> = BTreeMap::new();
        for (name, value) in &self.params {
            param_ids.insert(name.as_str(), tape.param(name, value.clone())?);
        }
        let weight = |ids: &BTreeMap<&str, NodeId>, name: &str| -> (NodeId, NodeId) {
            (
                ids[format!("{name}.weight").as_str()],
                ids[format!("{name}.bias").as_str()],
            )
        };

        // raw attention maps by site, with their spatial extent, for skips
        let mut site_maps: Vec<(NodeId, usize)> = Vec::new();
        let mut cur = input;
        for layer in &self.graph.layers {
            cur = match layer {
                Layer::Conv { name, spec } => {
                    let (w, b) = weight(&param_ids, name);
                    tape.conv2d(cur, w, b, spec)?
                }
                Layer::Relu => tape.relu(cur),
                Layer::MaxPool { window, stride } => {
                    tape.maxpool2d(cur, (*window, *window), (*stride, *stride))?
                }
                Layer::L2Sab { name, kernel, epsilon, site } => {
                    let (w, b) = weight(&param_ids, name);
                    let cfg = L2SabConfig { kernel: *kernel, epsilon: *epsilon };
                    let map = l2_sab_attention_tape(tape, cur, w, b, &cfg)?;
                    self.gate_with_skips(tape, cur, map, *site, &mut site_maps)?
                }
                Layer::Cbam { name, kernel, site } => {
                    let (w, b) = weight(&param_ids, name);
                    let map = cbam_spatial_attention_tape(tape, cur, w, b, *kernel)?;
                    self.gate_with_skips(tape, cur, map, *site, &mut site_maps)?
                }
                Layer::Flatten => tape.flatten(cur)?,
                Layer::Dense { name, .. } => {
                    let (w, b) = weight(&param_ids, name);
                    tape.dense(cur, w, b)?
                }
            };
        }
        Ok(cur)
    }

    /// Combine the site's raw attention map with any incoming skip maps
    /// (downsampled, elementwise product), then gate the features.
    fn gate_with_skips(
        &self,
        tape: &mut Tape<T>,
        features: NodeId,
        raw_map: NodeId,
        site: usize,
        site_maps: &mut Vec<(NodeId, usize)>,
    ) -> Result<NodeId> {
        let here = tape.value(raw_map).shape()[2];
        let mut combined = raw_map;
        for skip in self.graph.skips.iter().filter(|s| s.to_site == site) {
            let &(src_map, src_h) = site_maps.get(skip.from_site).ok_or_else(|| {
                Error::invalid(
                    "forward",
                    format!("skip source site {} not yet computed", skip.from_site),
                )
            })?;
            let factor = src_h / here;
            let routed = if factor > 1 { tape.avgpool2d(src_map, factor)? } else { src_map };
            combined = tape.mul(combined, routed)?;
        }
        site_maps.push((raw_map, here));
        tape.gate_channels(combined, features)
    }

    /// Forward pass on a fresh tape.
    pub fn forward(&self, input: &Tensor<T>) -> Result<ForwardPass<T>> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let logits = self.record(&mut tape, x)?;
        Ok(ForwardPass { tape, logits })
    }

    /// Logits for a batch.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let pass = self.forward(input)?;
        Ok(pass.tape.value(pass.logits).clone())
    }

    /// Class probabilities for a batch.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        ops::softmax(&self.logits(input)?)
    }

    /// One full training step's forward and backward: mean cross-entropy
    /// loss, softmax probabilities, and parameter gradients.
    pub fn loss_and_grads(
        &self,
        input: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(T, Tensor<T>, Gradients<T>)> {
        let mut pass = self.forward(input)?;
        let (loss, probs) = pass.tape.cross_entropy(pass.logits, labels)?;
        let grads = pass.tape.backward(loss)?;
        Ok((pass.tape.value(loss).item(), probs, grads))
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = input.dims4().map_err(|_| {
            Error::shape("forward", "input rank", "4 (NCHW)", input.rank())
        })?;
        if (c, h, w) != self.graph.input {
            return Err(Error::shape(
                "forward",
                "input dims",
                format!("{:?}", self.graph.input),
                format!("({c}, {h}, {w})"),
            ));
        }
        Ok(())
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        // conv weight (out, in, k, k)
        [out, inp, kh, kw] => (inp * kh * kw, out * kh * kw),
        // dense weight (in, out)
        [inp, out] => (*inp, *out),
        other => {
            let n: usize = other.iter().product();
            (n, n)
        }
    }
}
