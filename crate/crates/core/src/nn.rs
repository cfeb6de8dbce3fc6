//! Relational graph convolutional classifier with hand-written gradients.
//!
//! Token embedding, `rgcn_layers` relational convolutions with per-relation
//! weights and mean-normalized neighbor sums, mean pooling over nodes, then a
//! small fully connected head. Everything is `f64`.
//!
//! Matrices are row-major. Node features are `n x d` and weights are stored
//! `in x out`, so a layer is `H W`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{CounterStats, MachineProfile, Task};
use crate::graph::{build_vocabulary, ProgramGraph, Vocabulary};
use crate::par::{self, Execution};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("expected {expected} extra features, got {got}")]
    ExtrasLength { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint vocabulary differs from the current vocabulary")]
    VocabMismatch,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub const FLOW_KINDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub rgcn_layers: usize,
    pub dense_layers: usize,
    pub relations: usize,
    pub extras_dim: usize,
    pub n_classes: usize,
    pub leaky_slope: f64,
}

impl ModelSpec {
    pub fn new(n_classes: usize, extras_dim: usize) -> Self {
        ModelSpec {
            vocab_size: build_vocabulary().len(),
            embed_dim: 32,
            hidden_dim: 64,
            rgcn_layers: 4,
            dense_layers: 3,
            relations: 2 * FLOW_KINDS,
            extras_dim,
            n_classes,
            leaky_slope: 0.01,
        }
    }

    /// Small instance for finite-difference checks.
    pub fn reduced(n_classes: usize, extras_dim: usize) -> Self {
        ModelSpec { embed_dim: 4, hidden_dim: 4, ..ModelSpec::new(n_classes, extras_dim) }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("rgcn_layers", self.rgcn_layers),
            ("dense_layers", self.dense_layers),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(NnError::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if self.relations != 2 * FLOW_KINDS {
            return Err(NnError::InvalidSpec(format!("relations must be {}", 2 * FLOW_KINDS)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(NnError::InvalidSpec("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    fn rgcn_base(&self, layer: usize) -> usize {
        1 + layer * (self.relations + 2)
    }

    fn dense_base(&self, layer: usize) -> usize {
        1 + self.rgcn_layers * (self.relations + 2) + 2 * layer
    }

    fn dense_dims(&self, layer: usize) -> (usize, usize) {
        let input = if layer == 0 { self.hidden_dim + self.extras_dim } else { self.hidden_dim };
        let output = if layer + 1 == self.dense_layers { self.n_classes } else { self.hidden_dim };
        (input, output)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub kind: ParamKind,
    /// Part of the embedding + convolution stack rather than the dense head.
    pub gnn: bool,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: String, kind: ParamKind, gnn: bool, rows: usize, cols: usize) -> Self {
        Tensor { name, kind, gnn, rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Canonical tensor order: embedding; per layer self weight, relation weights,
/// bias; per dense layer weight, bias.
fn layout(spec: &ModelSpec) -> Vec<Tensor> {
    let mut t = vec![Tensor::zeros("embedding".into(), ParamKind::Embedding, true, spec.vocab_size, spec.embed_dim)];
    for l in 0..spec.rgcn_layers {
        let d_in = if l == 0 { spec.embed_dim } else { spec.hidden_dim };
        t.push(Tensor::zeros(format!("rgcn{l}.self"), ParamKind::Weight, true, d_in, spec.hidden_dim));
        for r in 0..spec.relations {
            t.push(Tensor::zeros(format!("rgcn{l}.rel{r}"), ParamKind::Weight, true, d_in, spec.hidden_dim));
        }
        t.push(Tensor::zeros(format!("rgcn{l}.bias"), ParamKind::Bias, true, 1, spec.hidden_dim));
    }
    for k in 0..spec.dense_layers {
        let (i, o) = spec.dense_dims(k);
        t.push(Tensor::zeros(format!("dense{k}.weight"), ParamKind::Weight, false, i, o));
        t.push(Tensor::zeros(format!("dense{k}.bias"), ParamKind::Bias, false, 1, o));
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub tensors: Vec<Tensor>,
    /// z-score statistics applied to counter features before they reach the model.
    pub counter_stats: CounterStats,
}

impl ModelParams {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn data(&self, idx: usize) -> &[f64] {
        &self.tensors[idx].data
    }

    /// Re-initializes the last dense layer for a new class count.
    pub fn reset_output_layer(&mut self, n_classes: usize, seed: u64) {
        self.spec.n_classes = n_classes;
        let fresh = init_model(self.spec, seed);
        let last = self.spec.dense_base(self.spec.dense_layers - 1);
        self.tensors.truncate(last);
        self.tensors.extend(fresh.tensors[last..].iter().cloned());
    }
}

/// Xavier-uniform weights and embeddings, zero biases.
pub fn init_model(spec: ModelSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = layout(&spec);
    for t in &mut tensors {
        if t.kind != ParamKind::Bias {
            let bound = (6.0 / (t.rows + t.cols) as f64).sqrt();
            for v in &mut t.data {
                *v = rng.random_range(-bound..=bound);
            }
        }
    }
    ModelParams { spec, tensors, counter_stats: CounterStats::identity() }
}

// ---------------------------------------------------------------------------

/// `c = a' b' (+ c)` where `a'` is `m x k` and `b'` is `k x n`. With `a_t`
/// the slice `a` holds `a'` transposed (`k x m`), likewise for `b_t`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above bounds every strided access to the slices.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Neighbor lists of one relation in compressed form, only for nodes that
/// have at least one neighbor.
#[derive(Debug, Clone, PartialEq)]
struct Relation {
    targets: Vec<usize>,
    offsets: Vec<usize>,
    sources: Vec<usize>,
}

impl Relation {
    fn neighbors(&self, t: usize) -> &[usize] {
        &self.sources[self.offsets[t]..self.offsets[t + 1]]
    }

    /// Row `t` is the mean of `h` over target `t`'s neighbors.
    fn aggregate(&self, h: &[f64], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.targets.len() * d];
        for t in 0..self.targets.len() {
            let row = &mut out[t * d..(t + 1) * d];
            let nb = self.neighbors(t);
            for &j in nb {
                for (o, x) in row.iter_mut().zip(&h[j * d..(j + 1) * d]) {
                    *o += x;
                }
            }
            let inv = 1.0 / nb.len() as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        out
    }
}

/// A graph indexed for message passing: token ids plus per-relation neighbor
/// lists. Edge `(src, dst, flow)` feeds relation `2 flow` at `dst` and
/// relation `2 flow + 1` at `src`; parallel edges count with multiplicity.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGraph {
    tokens: Vec<usize>,
    relations: Vec<Relation>,
}

impl PreparedGraph {
    pub fn new(graph: &ProgramGraph, spec: &ModelSpec) -> Result<Self, NnError> {
        let n = graph.nodes.len();
        if n == 0 {
            return Err(NnError::EmptyGraph);
        }
        let tokens: Vec<usize> = graph.nodes.iter().map(|v| v.token_id).collect();
        if let Some(&token) = tokens.iter().find(|&&t| t >= spec.vocab_size) {
            return Err(NnError::TokenOutOfRange { token, vocab: spec.vocab_size });
        }
        let mut lists = vec![vec![Vec::new(); n]; spec.relations];
        for e in &graph.edges {
            let f = e.flow as usize;
            lists[2 * f][e.dst].push(e.src);
            lists[2 * f + 1][e.src].push(e.dst);
        }
        let relations = lists
            .into_iter()
            .map(|per_node| {
                let mut rel = Relation { targets: Vec::new(), offsets: vec![0], sources: Vec::new() };
                for (i, nb) in per_node.into_iter().enumerate() {
                    if !nb.is_empty() {
                        rel.targets.push(i);
                        rel.sources.extend(nb);
                        rel.offsets.push(rel.sources.len());
                    }
                }
                rel
            })
            .collect();
        Ok(PreparedGraph { tokens, relations })
    }

    pub fn node_count(&self) -> usize {
        self.tokens.len()
    }
}

struct LayerTrace {
    input: Vec<f64>,
    aggregates: Vec<Vec<f64>>,
    pre: Vec<f64>,
}

struct GnnTrace {
    layers: Vec<LayerTrace>,
    pooled: Vec<f64>,
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn gnn_forward(params: &ModelParams, g: &PreparedGraph) -> GnnTrace {
    let spec = &params.spec;
    let n = g.node_count();
    let e = spec.embed_dim;
    let emb = params.data(0);
    let mut h = vec![0.0; n * e];
    for (i, &tok) in g.tokens.iter().enumerate() {
        h[i * e..(i + 1) * e].copy_from_slice(&emb[tok * e..(tok + 1) * e]);
    }
    let d_out = spec.hidden_dim;
    let mut layers = Vec::with_capacity(spec.rgcn_layers);
    for l in 0..spec.rgcn_layers {
        let d_in = if l == 0 { e } else { d_out };
        let base = spec.rgcn_base(l);
        let mut pre = vec![0.0; n * d_out];
        gemm(n, d_in, d_out, &h, false, params.data(base), false, &mut pre, false);
        let mut aggregates = Vec::with_capacity(spec.relations);
        let mut msg = Vec::new();
        for (r, rel) in g.relations.iter().enumerate() {
            let agg = rel.aggregate(&h, d_in);
            let k = rel.targets.len();
            if k > 0 {
                msg.resize(k * d_out, 0.0);
                gemm(k, d_in, d_out, &agg, false, params.data(base + 1 + r), false, &mut msg, false);
                for (t, &i) in rel.targets.iter().enumerate() {
                    for (p, m) in pre[i * d_out..(i + 1) * d_out].iter_mut().zip(&msg[t * d_out..(t + 1) * d_out]) {
                        *p += m;
                    }
                }
            }
            aggregates.push(agg);
        }
        let bias = params.data(base + 1 + spec.relations);
        for row in pre.chunks_mut(d_out) {
            row.iter_mut().zip(bias).for_each(|(p, b)| *p += b);
        }
        let next = pre.iter().map(|&x| leaky(x, spec.leaky_slope)).collect();
        layers.push(LayerTrace { input: std::mem::replace(&mut h, next), aggregates, pre });
    }
    let mut pooled = vec![0.0; d_out];
    for row in h.chunks(d_out) {
        pooled.iter_mut().zip(row).for_each(|(p, x)| *p += x);
    }
    pooled.iter_mut().for_each(|p| *p /= n as f64);
    GnnTrace { layers, pooled }
}

/// Inputs and pre-activations of each dense layer.
struct HeadTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn head_forward(params: &ModelParams, pooled: &[f64], extras: &[f64]) -> Result<HeadTrace, NnError> {
    let spec = &params.spec;
    if extras.len() != spec.extras_dim {
        return Err(NnError::ExtrasLength { expected: spec.extras_dim, got: extras.len() });
    }
    let mut x: Vec<f64> = pooled.iter().chain(extras).copied().collect();
    let mut inputs = Vec::with_capacity(spec.dense_layers);
    let mut pre = Vec::with_capacity(spec.dense_layers);
    for k in 0..spec.dense_layers {
        let (d_in, d_out) = spec.dense_dims(k);
        let w = params.data(spec.dense_base(k));
        let mut z = params.data(spec.dense_base(k) + 1).to_vec();
        for i in 0..d_in {
            let xi = x[i];
            if xi != 0.0 {
                z.iter_mut().zip(&w[i * d_out..(i + 1) * d_out]).for_each(|(z, w)| *z += xi * w);
            }
        }
        let next = if k + 1 < spec.dense_layers { z.iter().map(|&v| v.max(0.0)).collect() } else { Vec::new() };
        inputs.push(std::mem::replace(&mut x, next));
        pre.push(z);
    }
    Ok(HeadTrace { inputs, pre })
}

/// Mean-pooled output of the convolution stack.
pub fn pooled(params: &ModelParams, graph: &PreparedGraph) -> Vec<f64> {
    gnn_forward(params, graph).pooled
}

pub fn logits_from_pooled(params: &ModelParams, pooled: &[f64], extras: &[f64]) -> Result<Vec<f64>, NnError> {
    Ok(head_forward(params, pooled, extras)?.pre.pop().expect("at least one dense layer"))
}

pub fn forward(params: &ModelParams, graph: &PreparedGraph, extras: &[f64]) -> Result<Vec<f64>, NnError> {
    logits_from_pooled(params, &pooled(params, graph), extras)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------

/// Model input: a graph, or a pooled vector cached from a frozen stack.
#[derive(Debug, Clone, Copy)]
pub enum Readout<'a> {
    Graph(&'a PreparedGraph),
    Pooled(&'a [f64]),
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub readout: Readout<'a>,
    pub extras: &'a [f64],
    pub label: usize,
}

/// Gradients aligned with `ModelParams::tensors`. An empty entry is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    fn zeros(params: &ModelParams, with_gnn: bool) -> Self {
        let tensors = params
            .tensors
            .iter()
            .map(|t| if t.gnn && !with_gnn { Vec::new() } else { vec![0.0; t.len()] })
            .collect();
        Grads { tensors }
    }

    fn add(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if b.is_empty() {
                continue;
            }
            if a.is_empty() {
                a.resize(b.len(), 0.0);
            }
            a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
        }
    }

    fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn value(&self, tensor: usize, i: usize) -> f64 {
        self.tensors[tensor].get(i).copied().unwrap_or(0.0)
    }

    pub fn max_abs_diff(&self, other: &Grads) -> f64 {
        let mut m: f64 = 0.0;
        for (t, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            for i in 0..a.len().max(b.len()) {
                m = m.max((self.value(t, i) - other.value(t, i)).abs());
            }
        }
        m
    }
}

fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let mut d: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    d[label] -= 1.0;
    (lse - logits[label], d)
}

fn check_label(params: &ModelParams, label: usize) -> Result<(), NnError> {
    if label >= params.spec.n_classes {
        return Err(NnError::LabelOutOfRange { label, classes: params.spec.n_classes });
    }
    Ok(())
}

pub fn example_loss(params: &ModelParams, ex: &Example) -> Result<f64, NnError> {
    check_label(params, ex.label)?;
    let logits = match ex.readout {
        Readout::Graph(g) => forward(params, g, ex.extras)?,
        Readout::Pooled(p) => logits_from_pooled(params, p, ex.extras)?,
    };
    Ok(cross_entropy(&logits, ex.label).0)
}

/// Loss and exact gradient for one example. With a cached pooled readout only
/// the dense head receives gradient.
pub fn example_loss_and_grad(params: &ModelParams, ex: &Example) -> Result<(f64, Grads), NnError> {
    example_pass(params, ex).map(|(loss, grads, _)| (loss, grads))
}

/// Loss, gradient and predicted class.
fn example_pass(params: &ModelParams, ex: &Example) -> Result<(f64, Grads, usize), NnError> {
    check_label(params, ex.label)?;
    let spec = &params.spec;
    let gnn = match ex.readout {
        Readout::Graph(g) => Some(gnn_forward(params, g)),
        Readout::Pooled(_) => None,
    };
    let pooled_vec = match (&gnn, ex.readout) {
        (Some(t), _) => t.pooled.as_slice(),
        (None, Readout::Pooled(p)) => p,
        (None, Readout::Graph(_)) => unreachable!(),
    };
    let head = head_forward(params, pooled_vec, ex.extras)?;
    let logits = head.pre.last().expect("dense layer");
    let predicted = argmax(logits);
    let (loss, mut dz) = cross_entropy(logits, ex.label);
    let mut grads = Grads::zeros(params, gnn.is_some());

    for k in (0..spec.dense_layers).rev() {
        let (d_in, d_out) = spec.dense_dims(k);
        let base = spec.dense_base(k);
        let x = &head.inputs[k];
        {
            let gw = &mut grads.tensors[base];
            for i in 0..d_in {
                let xi = x[i];
                if xi != 0.0 {
                    gw[i * d_out..(i + 1) * d_out].iter_mut().zip(&dz).for_each(|(g, d)| *g += xi * d);
                }
            }
        }
        grads.tensors[base + 1].iter_mut().zip(&dz).for_each(|(g, d)| *g += d);
        if k == 0 && gnn.is_none() {
            break;
        }
        let w = params.data(base);
        let mut dx: Vec<f64> = (0..d_in)
            .map(|i| w[i * d_out..(i + 1) * d_out].iter().zip(&dz).map(|(w, d)| w * d).sum())
            .collect();
        if k > 0 {
            for (d, &z) in dx.iter_mut().zip(&head.pre[k - 1]) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        dz = dx;
    }

    if let (Some(trace), Readout::Graph(g)) = (gnn, ex.readout) {
        let n = g.node_count();
        let d_h = spec.hidden_dim;
        let dpool: Vec<f64> = dz[..d_h].iter().map(|d| d / n as f64).collect();
        let mut dh: Vec<f64> = dpool.iter().copied().cycle().take(n * d_h).collect();
        for l in (0..spec.rgcn_layers).rev() {
            let lt = &trace.layers[l];
            let d_in = if l == 0 { spec.embed_dim } else { d_h };
            let base = spec.rgcn_base(l);
            let slope = spec.leaky_slope;
            let dpre: Vec<f64> = dh.iter().zip(&lt.pre).map(|(&d, &z)| if z > 0.0 { d } else { slope * d }).collect();
            gemm(d_in, n, d_h, &lt.input, true, &dpre, false, &mut grads.tensors[base], true);
            {
                let gb = &mut grads.tensors[base + 1 + spec.relations];
                for row in dpre.chunks(d_h) {
                    gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
            let mut dinput = vec![0.0; n * d_in];
            gemm(n, d_h, d_in, &dpre, false, params.data(base), true, &mut dinput, false);
            let mut dmsg = Vec::new();
            let mut dagg = Vec::new();
            for (r, rel) in g.relations.iter().enumerate() {
                let k = rel.targets.len();
                if k == 0 {
                    continue;
                }
                dmsg.clear();
                for &i in &rel.targets {
                    dmsg.extend_from_slice(&dpre[i * d_h..(i + 1) * d_h]);
                }
                gemm(d_in, k, d_h, &lt.aggregates[r], true, &dmsg, false, &mut grads.tensors[base + 1 + r], true);
                dagg.resize(k * d_in, 0.0);
                gemm(k, d_h, d_in, &dmsg, false, params.data(base + 1 + r), true, &mut dagg, false);
                for t in 0..k {
                    let nb = rel.neighbors(t);
                    let inv = 1.0 / nb.len() as f64;
                    for &j in nb {
                        for (d, a) in dinput[j * d_in..(j + 1) * d_in].iter_mut().zip(&dagg[t * d_in..(t + 1) * d_in]) {
                            *d += a * inv;
                        }
                    }
                }
            }
            dh = dinput;
        }
        let e = spec.embed_dim;
        let gemb = &mut grads.tensors[0];
        for (i, &tok) in g.tokens.iter().enumerate() {
            gemb[tok * e..(tok + 1) * e].iter_mut().zip(&dh[i * e..(i + 1) * e]).for_each(|(g, d)| *g += d);
        }
    }
    Ok((loss, grads, predicted))
}

/// Mean cross-entropy over `batch` and its gradient. Per-example gradients
/// are summed in batch order, so the result does not depend on `exec`.
pub fn loss_and_grad(params: &ModelParams, batch: &[Example], exec: Execution) -> Result<(f64, Grads), NnError> {
    batch_pass(params, batch, exec).map(|b| (b.loss, b.grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPass {
    pub loss: f64,
    pub grads: Grads,
    /// Examples whose pre-update prediction matched the label.
    pub correct: usize,
}

pub fn batch_pass(params: &ModelParams, batch: &[Example], exec: Execution) -> Result<BatchPass, NnError> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let parts = par::try_map(exec, batch, |ex| example_pass(params, ex))?;
    let mut correct = 0;
    let mut loss = 0.0;
    let mut grads: Option<Grads> = None;
    for ((l, g, predicted), ex) in parts.into_iter().zip(batch) {
        loss += l;
        correct += (predicted == ex.label) as usize;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => acc.add(&g),
        }
    }
    let mut grads = grads.expect("non-empty");
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok(BatchPass { loss: loss * inv, grads, correct })
}

/// Largest relative disagreement `|a - n| / max(GRAD_CHECK_FLOOR, |a| + |n|)`
/// between the analytic gradient and central differences over every parameter.
/// Entries smaller than the floor are compared against it, since central
/// differences carry about `1e-16 * |loss| / epsilon` of roundoff.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn grad_check(params: &ModelParams, example: &Example, epsilon: f64) -> Result<f64, NnError> {
    let (_, analytic) = example_loss_and_grad(params, example)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for t in 0..params.tensors.len() {
        for i in 0..params.tensors[t].len() {
            let orig = params.tensors[t].data[i];
            probe.tensors[t].data[i] = orig + epsilon;
            let up = example_loss(&probe, example)?;
            probe.tensors[t].data[i] = orig - epsilon;
            let down = example_loss(&probe, example)?;
            probe.tensors[t].data[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.value(t, i);
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR));
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptVariant {
    Adam,
    AdamWAmsgrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub variant: OptVariant,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub v_max: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(variant: OptVariant, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        OptState {
            variant,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: if variant == OptVariant::AdamWAmsgrad { 0.01 } else { 0.0 },
            step: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            v_max: zeros,
        }
    }

    fn matches(&self, params: &ModelParams) -> bool {
        let same = |acc: &Vec<Vec<f64>>| {
            acc.len() == params.tensors.len() && acc.iter().zip(&params.tensors).all(|(a, t)| a.len() == t.len())
        };
        same(&self.m) && same(&self.v) && same(&self.v_max)
    }
}

/// Per-tensor trainability.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainMask(pub Vec<bool>);

impl TrainMask {
    pub fn all(params: &ModelParams) -> Self {
        TrainMask(vec![true; params.tensors.len()])
    }

    pub fn trainable_count(&self, params: &ModelParams) -> usize {
        params.tensors.iter().zip(&self.0).filter(|(_, &on)| on).map(|(t, _)| t.len()).sum()
    }
}

/// Freezes the embedding and every convolution layer; only the dense head trains.
pub fn freeze_gnn(params: &ModelParams) -> TrainMask {
    TrainMask(params.tensors.iter().map(|t| !t.gnn).collect())
}

/// One Adam or AdamW-amsgrad update. Frozen tensors are skipped entirely,
/// moments included. Weight decay touches weight matrices only.
pub fn optimizer_step(params: &mut ModelParams, grads: &Grads, opt: &mut OptState, mask: Option<&TrainMask>) -> Result<(), NnError> {
    if !opt.matches(params) || grads.tensors.len() != params.tensors.len() {
        return Err(NnError::ShapeMismatch("optimizer state or gradients do not match parameters".into()));
    }
    if let Some(m) = mask {
        if m.0.len() != params.tensors.len() {
            return Err(NnError::ShapeMismatch("mask length".into()));
        }
    }
    for (t, g) in params.tensors.iter().zip(&grads.tensors) {
        if !g.is_empty() && g.len() != t.len() {
            return Err(NnError::ShapeMismatch(format!("gradient for {}", t.name)));
        }
    }
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    let amsgrad = opt.variant == OptVariant::AdamWAmsgrad;
    for (idx, tensor) in params.tensors.iter_mut().enumerate() {
        if mask.is_some_and(|m| !m.0[idx]) {
            continue;
        }
        let decay = if amsgrad && tensor.kind == ParamKind::Weight { opt.lr * opt.weight_decay } else { 0.0 };
        let g = &grads.tensors[idx];
        for i in 0..tensor.data.len() {
            let gi = g.get(i).copied().unwrap_or(0.0);
            let theta = &mut tensor.data[i];
            *theta -= decay * *theta;
            let m = &mut opt.m[idx][i];
            let v = &mut opt.v[idx][i];
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * gi;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * gi * gi;
            let second = if amsgrad {
                let vm = &mut opt.v_max[idx][i];
                *vm = vm.max(*v);
                *vm
            } else {
                *v
            };
            *theta -= opt.lr * (*m / bc1) / (second.sqrt() / bc2.sqrt() + opt.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model plus the context needed to use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: Option<OptState>,
    pub task: Task,
    pub machine: MachineProfile,
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Corrupt("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8], NnError> {
        let n = self.u32()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String, NnError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| NnError::Corrupt("invalid utf-8".into()))
    }
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Embedding => 0,
        ParamKind::Weight => 1,
        ParamKind::Bias => 2,
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    save_checkpoint_with_vocab(ckpt, &build_vocabulary())
}

/// Binary checkpoint: magic, version, spec, vocabulary hash, counter stats,
/// task, machine profile, tensors, optional optimizer state, then a SHA-256
/// of everything before it. Little-endian throughout.
pub fn save_checkpoint_with_vocab(ckpt: &Checkpoint, vocab: &Vocabulary) -> Vec<u8> {
    let mut e = Enc(Vec::new());
    e.0.extend_from_slice(CHECKPOINT_MAGIC);
    e.u32(CHECKPOINT_VERSION as usize);
    let s = &ckpt.params.spec;
    for v in [s.vocab_size, s.embed_dim, s.hidden_dim, s.rgcn_layers, s.dense_layers, s.relations, s.extras_dim, s.n_classes] {
        e.u32(v);
    }
    e.f64(s.leaky_slope);
    e.0.extend_from_slice(&vocab.hash());
    e.f64s(&ckpt.params.counter_stats.mean);
    e.f64s(&ckpt.params.counter_stats.std);
    e.bytes(ckpt.task.to_string().as_bytes());
    e.bytes(serde_json::to_string(&ckpt.machine).expect("profile serializes").as_bytes());
    e.u32(ckpt.params.tensors.len());
    for t in &ckpt.params.tensors {
        e.bytes(t.name.as_bytes());
        e.u8(kind_code(t.kind));
        e.u8(t.gnn as u8);
        e.u32(t.rows);
        e.u32(t.cols);
        e.f64s(&t.data);
    }
    match &ckpt.opt {
        None => e.u8(0),
        Some(o) => {
            e.u8(1);
            e.u8(match o.variant {
                OptVariant::Adam => 0,
                OptVariant::AdamWAmsgrad => 1,
            });
            for v in [o.lr, o.beta1, o.beta2, o.eps, o.weight_decay] {
                e.f64(v);
            }
            e.u64(o.step);
            for acc in [&o.m, &o.v, &o.v_max] {
                acc.iter().for_each(|a| e.f64s(a));
            }
        }
    }
    let digest: [u8; 32] = Sha256::digest(&e.0).into();
    e.0.extend_from_slice(&digest);
    e.0
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NnError> {
    load_checkpoint_with_vocab(bytes, &build_vocabulary())
}

pub fn load_checkpoint_with_vocab(bytes: &[u8], vocab: &Vocabulary) -> Result<Checkpoint, NnError> {
    if bytes.len() < 8 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(NnError::Corrupt("missing magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(NnError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(NnError::Corrupt("checksum mismatch".into()));
    }
    let mut d = Dec { buf: body, pos: 8 };
    let mut dims = [0usize; 8];
    for v in &mut dims {
        *v = d.u32()?;
    }
    let spec = ModelSpec {
        vocab_size: dims[0],
        embed_dim: dims[1],
        hidden_dim: dims[2],
        rgcn_layers: dims[3],
        dense_layers: dims[4],
        relations: dims[5],
        extras_dim: dims[6],
        n_classes: dims[7],
        leaky_slope: d.f64()?,
    };
    spec.validate().map_err(|e| NnError::Corrupt(e.to_string()))?;
    if d.take(32)? != vocab.hash() {
        return Err(NnError::VocabMismatch);
    }
    let mut counter_stats = CounterStats::identity();
    for v in &mut counter_stats.mean {
        *v = d.f64()?;
    }
    for v in &mut counter_stats.std {
        *v = d.f64()?;
    }
    let task: Task = d.string()?.parse().map_err(|_| NnError::Corrupt("task".into()))?;
    let machine = MachineProfile::from_json(&d.string()?).map_err(|e| NnError::Corrupt(e.to_string()))?;
    let mut tensors = layout(&spec);
    if d.u32()? != tensors.len() {
        return Err(NnError::Corrupt("tensor count does not match spec".into()));
    }
    for t in &mut tensors {
        let name = d.string()?;
        let (kind, gnn, rows, cols) = (d.u8()?, d.u8()?, d.u32()?, d.u32()?);
        if name != t.name || kind != kind_code(t.kind) || gnn != t.gnn as u8 || rows != t.rows || cols != t.cols {
            return Err(NnError::Corrupt(format!("unexpected tensor {name}")));
        }
        t.data = d.f64s(rows * cols)?;
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Corrupt(format!("non-finite value in {name}")));
        }
    }
    let params = ModelParams { spec, tensors, counter_stats };
    let opt = match d.u8()? {
        0 => None,
        1 => {
            let variant = match d.u8()? {
                0 => OptVariant::Adam,
                1 => OptVariant::AdamWAmsgrad,
                v => return Err(NnError::Corrupt(format!("optimizer variant {v}"))),
            };
            let mut o = OptState::new(variant, &params);
            o.lr = d.f64()?;
            o.beta1 = d.f64()?;
            o.beta2 = d.f64()?;
            o.eps = d.f64()?;
            o.weight_decay = d.f64()?;
            o.step = d.u64()?;
            for acc in [&mut o.m, &mut o.v, &mut o.v_max] {
                for a in acc.iter_mut() {
                    *a = d.f64s(a.len())?;
                }
            }
            Some(o)
        }
        v => return Err(NnError::Corrupt(format!("optimizer flag {v}"))),
    };
    if d.pos != body.len() {
        return Err(NnError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint { params, opt, task, machine })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Human-readable metadata mirroring a saved checkpoint.
pub fn checkpoint_sidecar(ckpt: &Checkpoint, bytes: &[u8]) -> serde_json::Value {
    let p = &ckpt.params;
    serde_json::json!({
        "format_version": CHECKPOINT_VERSION,
        "spec": p.spec,
        "vocabulary_sha256": hex(&build_vocabulary().hash()),
        "counter_stats": p.counter_stats,
        "task": ckpt.task.to_string(),
        "machine": ckpt.machine.name,
        "parameter_count": p.parameter_count(),
        "trainable_after_freeze": freeze_gnn(p).trainable_count(p),
        "tensors": p.tensors.iter().map(|t| serde_json::json!({"name": t.name, "rows": t.rows, "cols": t.cols})).collect::<Vec<_>>(),
        "optimizer": ckpt.opt.as_ref().map(|o| serde_json::json!({"variant": o.variant, "step": o.step})),
        "sha256": hex(&Sha256::digest(bytes)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, Edge, Flow, Node, NodeKind};
    use crate::mir::{generate_region, parse_mir, Family, RegionFamily};

    fn fixture_graph() -> ProgramGraph {
        build_graph(&parse_mir(include_str!("../fixtures/doall.mir")).unwrap()).unwrap()
    }

    /// Xavier weights with small random biases, so no pre-activation sits
    /// exactly on a ReLU kink.
    pub(crate) fn random_instance(spec: ModelSpec, seed: u64) -> ModelParams {
        let mut p = init_model(spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
        for t in p.tensors.iter_mut().filter(|t| t.kind == ParamKind::Bias) {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        p
    }

    fn region_graph(family: Family, size: u32, seed: u64) -> ProgramGraph {
        build_graph(&generate_region(&RegionFamily::new(family, size, seed)).unwrap()).unwrap()
    }

    #[test]
    fn parameter_count_closed_form() {
        let s = ModelSpec::new(127, 0);
        let (v, e, h, r) = (18, 32, 64, 6);
        let embedding = v * e;
        let first = (r + 1) * e * h + h;
        let rest = 3 * ((r + 1) * h * h + h);
        let dense = (h * h + h) + (h * h + h) + (h * 127 + 127);
        let total = embedding + first + rest + dense;
        assert_eq!(total, 117_759);
        assert_eq!(init_model(s, 0).parameter_count(), total);
    }

    #[test]
    fn init_rules() {
        let a = init_model(ModelSpec::new(10, 6), 3);
        assert_eq!(a, init_model(ModelSpec::new(10, 6), 3));
        assert_ne!(a, init_model(ModelSpec::new(10, 6), 4));
        assert_eq!(a.tensor("dense0.weight").unwrap().rows, 64 + 6);
        for t in &a.tensors {
            if t.kind == ParamKind::Bias {
                assert!(t.data.iter().all(|&v| v == 0.0));
            } else {
                let bound = (6.0 / (t.rows + t.cols) as f64).sqrt();
                assert!(t.data.iter().all(|v| v.abs() <= bound));
            }
        }
        assert!(ModelSpec { relations: 4, ..ModelSpec::new(3, 0) }.validate().is_err());
        assert!(ModelSpec::new(0, 0).validate().is_err());
    }

    #[test]
    fn zero_network_outputs_final_bias() {
        let mut p = init_model(ModelSpec::new(3, 0), 1);
        for t in &mut p.tensors {
            t.data.fill(0.0);
        }
        let last = p.tensors.len() - 1;
        p.tensors[last].data = vec![0.5, -1.0, 2.0];
        let g = ProgramGraph { nodes: vec![Node { kind: NodeKind::Constant, token: "const".into(), token_id: 16 }], edges: vec![] };
        let pg = PreparedGraph::new(&g, &p.spec).unwrap();
        assert_eq!(forward(&p, &pg, &[]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn one_dimensional_hand_evaluation() {
        let spec = ModelSpec {
            embed_dim: 1,
            hidden_dim: 1,
            rgcn_layers: 1,
            dense_layers: 1,
            n_classes: 1,
            ..ModelSpec::new(1, 0)
        };
        let mut p = init_model(spec, 0);
        for t in &mut p.tensors {
            t.data.fill(0.0);
        }
        let set = |p: &mut ModelParams, name: &str, idx: usize, v: f64| {
            p.tensors.iter_mut().find(|t| t.name == name).unwrap().data[idx] = v;
        };
        // token 0 embeds to 1, token 3 to 2
        set(&mut p, "embedding", 0, 1.0);
        set(&mut p, "embedding", 3, 2.0);
        set(&mut p, "rgcn0.self", 0, 0.5);
        set(&mut p, "rgcn0.rel0", 0, 3.0);
        set(&mut p, "rgcn0.rel1", 0, -4.0);
        set(&mut p, "rgcn0.bias", 0, 0.25);
        set(&mut p, "dense0.weight", 0, 2.0);
        set(&mut p, "dense0.bias", 0, -1.0);
        let g = ProgramGraph {
            nodes: vec![
                Node { kind: NodeKind::Instruction, token: "load".into(), token_id: 0 },
                Node { kind: NodeKind::Instruction, token: "add".into(), token_id: 3 },
            ],
            edges: vec![Edge { src: 0, dst: 1, flow: Flow::Control, position: 0 }],
        };
        // node 0: 0.5*1 + (-4)*2 + 0.25 = -7.25 -> leaky -0.0725
        // node 1: 0.5*2 + 3*1 + 0.25 = 4.25
        // pooled (4.25 - 0.0725) / 2 = 2.08875; logit 2*2.08875 - 1 = 3.1775
        let pg = PreparedGraph::new(&g, &p.spec).unwrap();
        let logits = forward(&p, &pg, &[]).unwrap();
        assert!((logits[0] - 3.1775).abs() < 1e-12, "{logits:?}");
    }

    #[test]
    fn input_errors() {
        let p = init_model(ModelSpec::new(3, 2), 0);
        let g = fixture_graph();
        let pg = PreparedGraph::new(&g, &p.spec).unwrap();
        assert_eq!(forward(&p, &pg, &[1.0]), Err(NnError::ExtrasLength { expected: 2, got: 1 }));
        let small = ModelSpec { vocab_size: 3, ..p.spec };
        assert!(matches!(PreparedGraph::new(&g, &small), Err(NnError::TokenOutOfRange { .. })));
        let ex = Example { readout: Readout::Graph(&pg), extras: &[0.0, 0.0], label: 3 };
        assert!(matches!(example_loss_and_grad(&p, &ex), Err(NnError::LabelOutOfRange { .. })));
        assert_eq!(loss_and_grad(&p, &[], Execution::Sequential).unwrap_err(), NnError::EmptyBatch);
    }

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let mut p = init_model(ModelSpec::new(7, 0), 2);
        let last = p.spec.dense_base(2);
        p.tensors[last].data.fill(0.0);
        let pg = PreparedGraph::new(&fixture_graph(), &p.spec).unwrap();
        let ex = Example { readout: Readout::Graph(&pg), extras: &[], label: 4 };
        assert!((example_loss(&p, &ex).unwrap() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_matches_single() {
        let p = init_model(ModelSpec::new(5, 0), 9);
        let pg = PreparedGraph::new(&region_graph(Family::Branchy, 2, 1), &p.spec).unwrap();
        let ex = Example { readout: Readout::Graph(&pg), extras: &[], label: 2 };
        let (l1, g1) = example_loss_and_grad(&p, &ex).unwrap();
        let (l16, g16) = loss_and_grad(&p, &[ex; 16], Execution::Sequential).unwrap();
        assert!((l1 - l16).abs() < 1e-12);
        assert!(g1.max_abs_diff(&g16) < 1e-12);
    }

    #[test]
    fn parallel_batch_is_bit_identical() {
        let p = init_model(ModelSpec::new(5, 0), 9);
        let graphs: Vec<PreparedGraph> = Family::ALL.iter().map(|&f| PreparedGraph::new(&region_graph(f, 1, 5), &p.spec).unwrap()).collect();
        let batch: Vec<Example> = graphs.iter().enumerate().map(|(i, g)| Example { readout: Readout::Graph(g), extras: &[], label: i % 5 }).collect();
        assert_eq!(loss_and_grad(&p, &batch, Execution::Sequential).unwrap(), loss_and_grad(&p, &batch, Execution::Parallel).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let p = random_instance(ModelSpec::reduced(4, 2), seed);
            let pg = PreparedGraph::new(&region_graph(Family::Calls, 1, seed), &p.spec).unwrap();
            let ex = Example { readout: Readout::Graph(&pg), extras: &[0.3, -1.2], label: (seed % 4) as usize };
            let err = grad_check(&p, &ex, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn pooled_readout_gives_head_gradient() {
        let p = init_model(ModelSpec::new(5, 0), 4);
        let pg = PreparedGraph::new(&fixture_graph(), &p.spec).unwrap();
        let pool = pooled(&p, &pg);
        let full = example_loss_and_grad(&p, &Example { readout: Readout::Graph(&pg), extras: &[], label: 1 }).unwrap();
        let head = example_loss_and_grad(&p, &Example { readout: Readout::Pooled(&pool), extras: &[], label: 1 }).unwrap();
        assert_eq!(full.0, head.0);
        for (t, tensor) in p.tensors.iter().enumerate() {
            if tensor.gnn {
                assert!(head.1.tensors[t].is_empty());
            } else {
                assert_eq!(full.1.tensors[t], head.1.tensors[t]);
            }
        }
    }

    #[test]
    fn dead_layer_puts_zero_init_on_a_kink() {
        let mut p = init_model(ModelSpec::reduced(4, 2), 0);
        let w = p.spec.dense_base(0);
        p.tensors[w].data.iter_mut().for_each(|v| *v = -v.abs());
        let pg = PreparedGraph::new(&region_graph(Family::Calls, 1, 0), &p.spec).unwrap();
        let ex = Example { readout: Readout::Graph(&pg), extras: &[0.3, 1.2], label: 0 };
        assert!(grad_check(&p, &ex, 1e-5).unwrap() > 0.1);
    }

    fn scalar_model() -> ModelParams {
        let spec = ModelSpec { embed_dim: 1, hidden_dim: 1, rgcn_layers: 1, dense_layers: 1, n_classes: 1, ..ModelSpec::new(1, 0) };
        let mut p = init_model(spec, 0);
        for t in &mut p.tensors {
            t.data.fill(0.5);
        }
        p
    }

    fn constant_grads(p: &ModelParams, g: f64) -> Grads {
        Grads { tensors: p.tensors.iter().map(|t| vec![g; t.len()]).collect() }
    }

    #[test]
    fn adam_first_step() {
        let mut p = scalar_model();
        let mut opt = OptState::new(OptVariant::Adam, &p);
        let before = p.tensors[1].data[0];
        let g = constant_grads(&p, 1.0);
        optimizer_step(&mut p, &g, &mut opt, None).unwrap();
        assert!((before - p.tensors[1].data[0] - 1e-3).abs() < 1e-10);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = scalar_model();
        let snapshot = p.clone();
        let mut opt = OptState::new(OptVariant::AdamWAmsgrad, &p);
        opt.weight_decay = 0.0;
        let g = constant_grads(&p, 0.0);
        optimizer_step(&mut p, &g, &mut opt, None).unwrap();
        assert_eq!(p, snapshot);
    }

    #[test]
    fn adamw_decays_weights_only() {
        let mut p = scalar_model();
        let mut opt = OptState::new(OptVariant::AdamWAmsgrad, &p);
        let g = constant_grads(&p, 0.0);
        optimizer_step(&mut p, &g, &mut opt, None).unwrap();
        for t in &p.tensors {
            let expected = if t.kind == ParamKind::Weight { 0.5 * (1.0 - 1e-5) } else { 0.5 };
            assert_eq!(t.data[0], expected, "{}", t.name);
        }
    }

    #[test]
    fn amsgrad_keeps_max_second_moment() {
        let mut p = scalar_model();
        let mut opt = OptState::new(OptVariant::AdamWAmsgrad, &p);
        let g = constant_grads(&p, 10.0);
        optimizer_step(&mut p, &g, &mut opt, None).unwrap();
        let peak = opt.v_max[1][0];
        let g = constant_grads(&p, 0.01);
        optimizer_step(&mut p, &g, &mut opt, None).unwrap();
        assert!(opt.v[1][0] < peak);
        assert_eq!(opt.v_max[1][0], peak);
    }

    #[test]
    fn step_shape_mismatch() {
        let mut p = scalar_model();
        let mut opt = OptState::new(OptVariant::Adam, &p);
        let mut g = constant_grads(&p, 1.0);
        g.tensors[0].push(1.0);
        assert!(optimizer_step(&mut p, &g, &mut opt, None).is_err());
        let other = init_model(ModelSpec::new(2, 0), 0);
        let mut wrong = OptState::new(OptVariant::Adam, &other);
        let g = constant_grads(&p, 1.0);
        assert!(optimizer_step(&mut p, &g, &mut wrong, None).is_err());
    }

    #[test]
    fn frozen_stack_is_untouched() {
        let mut p = init_model(ModelSpec::new(5, 0), 1);
        let start = p.clone();
        let mask = freeze_gnn(&p);
        assert!(mask.trainable_count(&p) < p.parameter_count());
        let pg = PreparedGraph::new(&fixture_graph(), &p.spec).unwrap();
        let mut opt = OptState::new(OptVariant::AdamWAmsgrad, &p);
        for step in 0..100 {
            let ex = Example { readout: Readout::Graph(&pg), extras: &[], label: step % 5 };
            let (_, g) = loss_and_grad(&p, &[ex], Execution::Sequential).unwrap();
            optimizer_step(&mut p, &g, &mut opt, Some(&mask)).unwrap();
            if step == 0 {
                assert_ne!(p.tensor("dense2.weight"), start.tensor("dense2.weight"));
            }
        }
        for (a, b) in p.tensors.iter().zip(&start.tensors) {
            if a.gnn {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = init_model(ModelSpec::new(6, 5), 8);
        p.counter_stats.mean = [1.0, 2.0, 3.0, 4.0, 5.0];
        let mut opt = OptState::new(OptVariant::Adam, &p);
        let pg = PreparedGraph::new(&fixture_graph(), &p.spec).unwrap();
        let (_, g) = loss_and_grad(&p, &[Example { readout: Readout::Graph(&pg), extras: &[0.0; 5], label: 1 }], Execution::Sequential).unwrap();
        optimizer_step(&mut p, &g, &mut opt, None).unwrap();
        let ckpt = Checkpoint { params: p, opt: Some(opt), task: Task::MinEdp, machine: MachineProfile::haswell() };
        let bytes = save_checkpoint(&ckpt);
        assert_eq!(&bytes[..4], b"PNPT");
        assert_eq!(load_checkpoint(&bytes).unwrap(), ckpt);
        assert_eq!(save_checkpoint(&ckpt), bytes);
        let sidecar = checkpoint_sidecar(&ckpt, &bytes);
        assert_eq!(sidecar["task"], "minedp");
        assert_eq!(sidecar["machine"], "haswell");
    }

    #[test]
    fn checkpoint_rejections() {
        let ckpt = Checkpoint {
            params: init_model(ModelSpec::new(3, 0), 0),
            opt: None,
            task: Task::FastestAtCap(150),
            machine: MachineProfile::skylake(),
        };
        let bytes = save_checkpoint(&ckpt);
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(load_checkpoint(&flipped), Err(NnError::Corrupt(_))));
        let mut versioned = bytes.clone();
        versioned[4] = 9;
        assert_eq!(load_checkpoint(&versioned).unwrap_err(), NnError::VersionMismatch { found: 9, expected: 1 });
        assert!(load_checkpoint(&bytes[..20]).is_err());
        let mut tokens = build_vocabulary().tokens().to_vec();
        tokens.swap(0, 1);
        let other = Vocabulary::from_tokens(tokens).unwrap();
        let foreign = save_checkpoint_with_vocab(&ckpt, &other);
        assert_eq!(load_checkpoint(&foreign).unwrap_err(), NnError::VocabMismatch);
    }

    #[test]
    fn output_layer_reset() {
        let mut p = init_model(ModelSpec::new(127, 0), 0);
        let before = p.clone();
        p.reset_output_layer(508, 1);
        assert_eq!(p.spec.n_classes, 508);
        assert_eq!(p.tensor("dense2.weight").unwrap().cols, 508);
        assert_eq!(p.tensor("dense1.weight"), before.tensor("dense1.weight"));
        assert_eq!(p.tensors[0], before.tensors[0]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 3.0, 1.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
