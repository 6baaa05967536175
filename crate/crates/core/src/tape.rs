//! Define-by-run reverse-mode autodiff.
//!
//! A `Tape` records one forward pass as a flat list of nodes; node ids are
//! indices, so parents always precede children and a single reverse sweep
//! propagates gradients. Tapes are rebuilt for every forward pass, which
//! keeps training and inference on the same code path.
//!
//! Ops with kinks (ReLU, max pooling, channel max/min, the l2 guard) record
//! a differentiability margin: the smallest distance to a point where the
//! derivative would jump. Finite-difference certification uses it to skip
//! instances sampled too close to a tie.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, ReduceMode};
use crate::tensor::{ConvSpec, Scalar, Tensor};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    backward: Option<BackFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
    min_margin: f64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: BTreeMap::new(), min_margin: f64::INFINITY }
    }

    /// Smallest differentiability margin seen by any kinked op so far.
    /// Infinite if every recorded op was smooth.
    pub fn margin(&self) -> f64 {
        self.min_margin
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<NodeId>, backward: Option<BackFn<T>>) -> NodeId {
        self.nodes.push(Node { value, parents, backward });
        NodeId(self.nodes.len() - 1)
    }

    fn note_margin(&mut self, m: f64) {
        if m < self.min_margin {
            self.min_margin = m;
        }
    }

    /// Record a value that does not require gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, vec![], None)
    }

    /// Record a named trainable parameter. Names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::invalid("tape", format!("duplicate parameter name {name:?}")));
        }
        let id = self.push(value, vec![], None);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    // -- recorded ops -------------------------------------------------------

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), spec)?;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let spec = spec.clone();
        Ok(self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |g| {
                let (gx, gw, gb) = ops::conv2d_backward(&xv, &wv, &spec, g);
                vec![gx, gw, gb]
            })),
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).clone();
        let out = ops::relu(&xv);
        let margin = xv.data().iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()));
        self.note_margin(margin);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![ops::relu_backward(&xv, g)])),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = ops::sigmoid(self.value(x));
        let yv = out.clone();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![ops::sigmoid_backward(&yv, g)])),
        )
    }

    pub fn maxpool2d(&mut self, x: NodeId, window: (usize, usize), stride: (usize, usize)) -> Result<NodeId> {
        let xv = self.value(x).clone();
        let (out, argmax) = ops::maxpool2d_with_argmax(&xv, window, stride)?;
        self.note_margin(maxpool_margin(&xv, window, stride));
        let shape = xv.shape().to_vec();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![ops::maxpool2d_backward(&shape, &argmax, g)])),
        ))
    }

    pub fn avgpool2d(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let out = ops::avgpool2d(self.value(x), factor)?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![ops::avgpool2d_backward(&shape, factor, g)])),
        ))
    }

    pub fn channel_reduce(&mut self, x: NodeId, mode: ReduceMode) -> Result<NodeId> {
        let xv = self.value(x).clone();
        let out = ops::channel_reduce(&xv, mode)?;
        if matches!(mode, ReduceMode::Max | ReduceMode::Min) {
            self.note_margin(channel_reduce_margin(&xv));
        }
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![ops::channel_reduce_backward(&xv, mode, g)])),
        ))
    }

    pub fn l2_normalize(&mut self, x: NodeId, epsilon: f64) -> Result<NodeId> {
        let xv = self.value(x).clone();
        let out = ops::l2_normalize_per_sample(&xv, epsilon)?;
        // kink where a sample's norm crosses the epsilon guard
        let b = xv.shape()[0];
        let n = xv.len() / b;
        for bi in 0..b {
            let norm: f64 = xv.data()[bi * n..(bi + 1) * n]
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            self.note_margin((norm - epsilon).abs());
        }
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![ops::l2_normalize_backward(&xv, epsilon, g)])),
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.map(|v| -v)])),
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![ops::mul(g, &bv).expect("shape"), ops::mul(g, &av).expect("shape")]
            })),
        ))
    }

    pub fn gate_channels(&mut self, map: NodeId, feat: NodeId) -> Result<NodeId> {
        let out = ops::gate_channels(self.value(map), self.value(feat))?;
        let mv = self.value(map).clone();
        let fv = self.value(feat).clone();
        Ok(self.push(
            out,
            vec![map, feat],
            Some(Box::new(move |g| {
                let (gm, gf) = ops::gate_channels_backward(&mv, &fv, g);
                vec![gm, gf]
            })),
        ))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let ca = self.value(a).shape()[1];
        let cb = self.value(b).shape()[1];
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let (ga, gb) = ops::concat_channels_backward(ca, cb, g);
                vec![ga, gb]
            })),
        ))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::flatten(self.value(x))?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![g.reshaped(shape.clone()).expect("shape")])),
        ))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::dense(self.value(x), self.value(w), self.value(b))?;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        Ok(self.push(
            out,
            vec![x, w, b],
            Some(Box::new(move |g| {
                let (gx, gw, gb) = ops::dense_backward(&xv, &wv, g);
                vec![gx, gw, gb]
            })),
        ))
    }

    /// Mean sparse categorical cross-entropy over the batch. Returns the
    /// scalar loss node and the softmax probabilities.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<(NodeId, Tensor<T>)> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let labels = labels.to_vec();
        let probs_c = probs.clone();
        let id = self.push(
            Tensor::scalar(loss),
            vec![logits],
            Some(Box::new(move |g| {
                vec![ops::softmax_cross_entropy_backward(&probs_c, &labels, g.item())]
            })),
        );
        Ok((id, probs))
    }

    /// Sum of all elements, reduced to a scalar. Useful as a probe objective
    /// when certifying gradients of intermediate maps.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).clone();
        let out = Tensor::scalar(xv.sum());
        let shape = xv.shape().to_vec();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let gv = g.item();
                vec![Tensor::full(&shape, gv)]
            })),
        )
    }

    // -- reverse sweep ------------------------------------------------------

    /// Propagate gradients from a scalar loss back to every reachable node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            let Some(back) = &node.backward else { continue };
            let parent_grads = back(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[pid.0] {
                    Some(acc) => *acc = ops::add(acc, &pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut params = BTreeMap::new();
        for (name, id) in &self.params {
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()));
            params.insert(name.clone(), g);
        }
        Ok(Gradients { params, nodes: grads })
    }
}

fn maxpool_margin<T: Scalar>(x: &Tensor<T>, window: (usize, usize), stride: (usize, usize)) -> f64 {
    let (b, c, h, w) = x.dims4().expect("rank 4");
    if window.0 * window.1 == 1 {
        return f64::INFINITY;
    }
    let oh = (h - window.0) / stride.0 + 1;
    let ow = (w - window.1) / stride.1 + 1;
    let xd = x.data();
    let mut margin = f64::INFINITY;
    for bc in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for ky in 0..window.0 {
                    for kx in 0..window.1 {
                        let v = xd[bc * h * w + (oy * stride.0 + ky) * w + ox * stride.1 + kx].as_f64();
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                margin = margin.min(best - second);
            }
        }
    }
    margin
}

fn channel_reduce_margin<T: Scalar>(x: &Tensor<T>) -> f64 {
    let (b, c, h, w) = x.dims4().expect("rank 4");
    if c == 1 {
        return f64::INFINITY;
    }
    let hw = h * w;
    let xd = x.data();
    let mut margin = f64::INFINITY;
    for bi in 0..b {
        for p in 0..hw {
            let mut lo = f64::INFINITY;
            let mut lo2 = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut hi2 = f64::NEG_INFINITY;
            for ic in 0..c {
                let v = xd[(bi * c + ic) * hw + p].as_f64();
                if v > hi {
                    hi2 = hi;
                    hi = v;
                } else if v > hi2 {
                    hi2 = v;
                }
                if v < lo {
                    lo2 = lo;
                    lo = v;
                } else if v < lo2 {
                    lo2 = v;
                }
            }
            margin = margin.min(hi - hi2).min(lo2 - lo);
        }
    }
    margin
}

/// Gradients produced by one reverse sweep.
pub struct Gradients<T: Scalar> {
    params: BTreeMap<String, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a registered parameter. Parameters the loss never
    /// touched come back as zeros, so every name resolves.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Gradient with respect to an arbitrary tape node, if reached.
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    /// Global l2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .map(|t| {
                let n = t.norm_l2().as_f64();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }
}
