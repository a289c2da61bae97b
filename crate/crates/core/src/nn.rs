//! Parameter storage and the per-forward-pass session that binds parameters
//! into an autodiff graph.

use std::collections::HashMap;

use crate::encoder::AttentionTrace;
use crate::error::{Error, Result};
use crate::tensorcore::{Gradients, Graph, Rng, Tensor, Var};

/// Truncated-normal standard deviation for dense weights.
pub const INIT_STD: f64 = 0.02;

/// How a parameter is treated by regularisation and the optimiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Dense, attention or tokenizer weights of the shared core: L1 (core
    /// coefficient) and weight decay.
    CoreWeight,
    /// Per-neuron readout feature weights: L1 (readout coefficient) and
    /// weight decay.
    ReadoutWeight,
    /// Other dense weights: weight decay only.
    Weight,
    /// Biases, normalisation parameters, embeddings, σ: neither.
    Bias,
    /// Fixed tensors stored with the model but never trained.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamKind::CoreWeight | ParamKind::ReadoutWeight | ParamKind::Weight
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::CoreWeight => "core_weight",
            ParamKind::ReadoutWeight => "readout_weight",
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "core_weight" => ParamKind::CoreWeight,
            "readout_weight" => ParamKind::ReadoutWeight,
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "buffer" => ParamKind::Buffer,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    /// Number of scalar values in entries matching `pred`.
    pub fn count(&self, pred: impl Fn(&ParamEntry) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(e)).map(|e| e.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count(|e| e.kind.trainable())
    }

    pub fn quantize_f32(&mut self) {
        for e in &mut self.entries {
            e.value.quantize_f32();
        }
    }

    /// Concatenate the selected entries into one flat vector.
    pub fn flatten(&self, select: &[ParamId]) -> Tensor {
        let data: Vec<f64> = select
            .iter()
            .flat_map(|&id| self.get(id).data().iter().copied())
            .collect();
        Tensor::from_vec(vec![data.len().max(1)], data)
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn unflatten(&mut self, select: &[ParamId], flat: &Tensor) {
        let mut off = 0;
        for &id in select {
            let t = self.get_mut(id);
            let n = t.len();
            t.data_mut().copy_from_slice(&flat.data()[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat vector length mismatch");
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grads(&self) -> GradBuffer {
        GradBuffer {
            grads: self
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.shape().to_vec()))
                .collect(),
        }
    }

    /// Bitwise equality of names, kinds and values.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.value.bit_eq(&b.value)
            })
    }
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn add(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn flatten(&self, select: &[ParamId]) -> Tensor {
        let data: Vec<f64> = select
            .iter()
            .flat_map(|&id| self.grads[id.0].data().iter().copied())
            .collect();
        Tensor::from_vec(vec![data.len().max(1)], data)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.all_finite())
    }
}

/// One forward (and optionally backward) pass over a [`ParamSet`].
///
/// Parameters are copied into the graph the first time they are used, so
/// a pass over one mouse never touches other mice's readouts.
pub struct Session<'a> {
    pub graph: Graph,
    params: &'a ParamSet,
    bound: Vec<Option<Var>>,
    rng: &'a mut Rng,
    train: bool,
    pub(crate) trace: Option<AttentionTrace>,
    pub(crate) bmlp_outputs: Option<Vec<Tensor>>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamSet, rng: &'a mut Rng, train: bool) -> Self {
        Session {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            rng,
            train,
            trace: None,
            bmlp_outputs: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(AttentionTrace::default());
        self
    }

    pub fn with_bmlp_recording(mut self) -> Self {
        self.bmlp_outputs = Some(Vec::new());
        self
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    /// Graph node for a parameter; buffers are bound as constants.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.params.entry(id);
        let v = if e.kind.trainable() {
            self.graph.param(e.value.clone())
        } else {
            self.graph.constant(e.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Inverted dropout: active only in training mode with `rate > 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.graph.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        self.graph.mul_const(x, Tensor::new(shape, mask)?)
    }

    /// Add parameter gradients from `grads` into `into`.
    pub fn accumulate_grads(&self, grads: &Gradients, into: &mut GradBuffer) {
        for (i, slot) in self.bound.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = grads.get(*v) {
                    into.grads[i].add_assign(g);
                }
            }
        }
    }

    pub fn take_trace(&mut self) -> Option<AttentionTrace> {
        self.trace.take()
    }

    pub fn take_bmlp_outputs(&mut self) -> Option<Vec<Tensor>> {
        self.bmlp_outputs.take()
    }
}

/// Weight initialiser: truncated normal for weights, zeros otherwise.
pub fn init_weight(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.truncated_normal(INIT_STD)).collect();
    Tensor::from_vec(shape, data)
}

/// Fully connected layer, `y = x·W + b` with `W` stored `[in × out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        kind: ParamKind,
        rng: &mut Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            kind,
            init_weight(rng, vec![inputs, outputs]),
        );
        let bias = params.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(vec![outputs]));
        Dense {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        let y = s.graph.matmul(x, w)?;
        s.graph.add_broadcast(y, b)
    }
}

/// Learnable affine layer normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: params.add(format!("{name}.gamma"), ParamKind::Bias, Tensor::ones(vec![dim])),
            beta: params.add(format!("{name}.beta"), ParamKind::Bias, Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        s.graph.layer_norm(x, g, b, crate::tensorcore::LAYER_NORM_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_binds_lazily_and_accumulates() {
        let mut params = ParamSet::new();
        let mut rng = Rng::new(3);
        let d = Dense::new(&mut params, "fc", 3, 2, ParamKind::Weight, &mut rng);
        let unused = params.add("unused", ParamKind::Weight, Tensor::ones(vec![4]));
        let mut grads = params.zero_grads();
        let mut s = Session::new(&params, &mut rng, false);
        let x = s.constant(Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let y = d.forward(&mut s, x).unwrap();
        let l = s.graph.sum(y).unwrap();
        let g = s.graph.backward(l).unwrap();
        s.accumulate_grads(&g, &mut grads);
        assert_eq!(grads.get(d.bias).data(), &[1.0, 1.0]);
        assert_eq!(grads.get(d.weight).data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert!(grads.get(unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let params = ParamSet::new();
        let mut rng = Rng::new(0);
        let mut s = Session::new(&params, &mut rng, false);
        let x = s.constant(Tensor::ones(vec![10]));
        assert_eq!(s.dropout(x, 0.5).unwrap(), x);
    }

    #[test]
    fn dropout_is_inverted() {
        let params = ParamSet::new();
        let mut rng = Rng::new(0);
        let mut s = Session::new(&params, &mut rng, true);
        let x = s.constant(Tensor::ones(vec![20_000]));
        let y = s.dropout(x, 0.25).unwrap();
        let v = s.graph.value(y);
        assert!(v.data().iter().all(|&e| e == 0.0 || (e - 4.0 / 3.0).abs() < 1e-12));
        assert!((v.mean() - 1.0).abs() < 0.03);
    }
}
