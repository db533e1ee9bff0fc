//! Recurrent model zoo: the LSTM cell and stacks, the channel-wise variant
//! with per-variable bidirectional preprocessing, task output heads, and the
//! joint multi-head model, all recorded on an [`ndiff::Tape`] so gradients
//! come from the same reverse sweep for every architecture.
//!
//! The cell follows the recurrence
//!
//! ```text
//! i_t = σ(x_t·W_xi + h_{t-1}·W_hi)
//! f_t = σ(x_t·W_xf + h_{t-1}·W_hf)
//! c_t = f_t ⊙ c_{t-1} + i_t ⊙ tanh(x_t·W_xc + h_{t-1}·W_hc + b_c)
//! o_t = σ(x_t·W_xo + h_{t-1}·W_ho + b_o)
//! h_t = o_t ⊙ tanh(c_t)
//! ```
//!
//! with no peephole connections and, by default, no bias in the input and
//! forget gates; [`ModelSpec::gate_biases`] restores conventional all-gate
//! biases. Dropout acts on non-recurrent connections only: between stacked
//! layers and on the inputs of the output heads, never inside a recurrence.

use crate::config::VariableSet;
use crate::types::{Task, N_LOS_BUCKETS, N_PHENOTYPES, N_VARIABLES};
use crate::{Error, Result};
use ndiff::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Hour at which the joint model emits its mortality prediction ("the first
/// 48 timesteps").
pub const IHM_TIMESTEP: usize = 48;

// ---------------------------------------------------------------------------
// Parameter store

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef(usize);

/// Ordered, named parameter tensors. Declaration order is the checkpoint
/// payload order and the layout of the flattened vector the optimizer sees.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    init_bounds: Vec<f64>,
}

impl ParamStore {
    fn declare(&mut self, name: &str, shape: &[usize], init_bound: f64) -> ParamRef {
        self.names.push(name.to_string());
        self.tensors.push(Tensor::zeros(shape));
        self.init_bounds.push(init_bound);
        ParamRef(self.names.len() - 1)
    }

    /// Fill every weight tensor with uniform(−bound, bound) draws; tensors
    /// declared with bound zero (biases) stay zero. Each tensor uses its own
    /// stream, so values do not depend on the sizes of other tensors.
    fn randomize(&mut self, seed: u64) {
        for (k, (tensor, bound)) in self.tensors.iter_mut().zip(&self.init_bounds).enumerate() {
            if *bound == 0.0 {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            for v in tensor.data_mut() {
                *v = rng.gen_range(-bound..*bound);
            }
        }
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.names[r.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, r: ParamRef) -> &Tensor {
        &self.tensors[r.0]
    }

    pub fn tensor_by_index(&self, k: usize) -> &Tensor {
        &self.tensors[k]
    }

    pub fn tensor_mut(&mut self, k: usize) -> &mut Tensor {
        &mut self.tensors[k]
    }

    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Name of the tensor owning position `i` of the flattened vector, plus
    /// the offset inside it.
    pub fn flat_index_owner(&self, i: usize) -> (&str, usize) {
        let mut offset = i;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if offset < t.len() {
                return (name, offset);
            }
            offset -= t.len();
        }
        panic!("flat index {i} out of range");
    }

    /// All parameters concatenated in declaration order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn load_flat(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.flat_len() {
            return Err(Error::Shape {
                message: format!(
                    "parameter payload holds {} values, model needs {}",
                    data.len(),
                    self.flat_len()
                ),
            });
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&data[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Insert every tensor as a tape leaf; the result is index-aligned with
    /// the store so `ParamRef(k)` maps to `leaves[k]`.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Gradients for every stored tensor, flattened in declaration order;
/// parameters the loss never touched contribute zeros.
pub fn flat_grads(tape: &Tape, param_nodes: &[NodeId]) -> Vec<f64> {
    let mut out = Vec::new();
    for &n in param_nodes {
        out.extend_from_slice(tape.grad_or_zeros(n).data());
    }
    out
}

// ---------------------------------------------------------------------------
// Model specification

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Standard,
    Channelwise,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Standard => "standard",
            Arch::Channelwise => "channelwise",
        }
    }
}

/// Which output heads the model carries: one task, or all four jointly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskHeads {
    Single(Task),
    Multitask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Depth of the (top) LSTM stack: 1 or 2.
    pub layers: usize,
    pub hidden_units: usize,
    /// Units of each per-variable LSTM; ignored for [`Arch::Standard`].
    pub channel_units: usize,
    /// Dropout probability on non-recurrent connections.
    pub dropout: f64,
    /// Per-step supervision: target replication (mortality, phenotypes) or
    /// grouped per-step targets (decompensation, length of stay).
    pub deep_supervision: bool,
    /// Standard: the whole stack runs in both directions. Channel-wise: the
    /// per-variable layers do (the top stack stays left-to-right, as the
    /// recurrence `h_t = LSTM(u_t, h_{t-1})` is written).
    pub bidirectional: bool,
    /// Add biases to the input and forget gates (off reproduces the printed
    /// recurrence exactly).
    pub gate_biases: bool,
    /// Length-of-stay head emits a nonnegative scalar (relu regression)
    /// instead of a 10-way bucket distribution.
    pub raw_los: bool,
    pub heads: TaskHeads,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(arch: Arch, heads: TaskHeads, hidden_units: usize, seed: u64) -> Self {
        ModelSpec {
            arch,
            layers: 1,
            hidden_units,
            channel_units: if arch == Arch::Channelwise { 4 } else { 0 },
            dropout: 0.0,
            deep_supervision: false,
            bidirectional: false,
            gate_biases: false,
            raw_los: false,
            heads,
            seed,
        }
    }

    /// Instances of one stay are predicted in a single left-to-right pass
    /// when targets exist at every step.
    pub fn grouped(&self) -> bool {
        match self.heads {
            TaskHeads::Multitask => true,
            TaskHeads::Single(task) => {
                self.deep_supervision && matches!(task, Task::Decomp | Task::Los)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.layers) {
            return Err(Error::invalid(format!(
                "stack depth must be 1 or 2, got {}",
                self.layers
            )));
        }
        if self.hidden_units == 0 {
            return Err(Error::invalid("hidden_units must be positive"));
        }
        if self.arch == Arch::Channelwise && self.channel_units == 0 {
            return Err(Error::invalid("channel_units must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        if self.bidirectional && self.grouped() {
            return Err(Error::invalid(
                "bidirectional models cannot be used when instances of one stay \
                 are grouped: future steps would leak into past predictions",
            ));
        }
        Ok(())
    }
}

/// Shape of the model input: one dense vector per step, or one stream per
/// variable (`[mask; value-block]`, so width 1 + value dims).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputLayout {
    Dense { dims: usize },
    Streams { dims: Vec<usize> },
}

impl InputLayout {
    /// Dense layout of the discretized sequence: value blocks then masks.
    pub fn dense(vars: &VariableSet) -> Self {
        InputLayout::Dense {
            dims: vars.input_dims(),
        }
    }

    /// Per-variable streams, each `[mask; value block]`.
    pub fn streams(vars: &VariableSet) -> Self {
        InputLayout::Streams {
            dims: vars.specs().iter().map(|s| 1 + s.value_dims()).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// LSTM layer

/// One direction of one LSTM layer: parameter handles in checkpoint order.
#[derive(Debug, Clone)]
pub struct LstmLayerParams {
    pub input_dim: usize,
    pub hidden: usize,
    w_xi: ParamRef,
    w_hi: ParamRef,
    b_i: Option<ParamRef>,
    w_xf: ParamRef,
    w_hf: ParamRef,
    b_f: Option<ParamRef>,
    w_xc: ParamRef,
    w_hc: ParamRef,
    b_c: ParamRef,
    w_xo: ParamRef,
    w_ho: ParamRef,
    b_o: ParamRef,
}

impl LstmLayerParams {
    fn declare(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        gate_biases: bool,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut w = |name: &str, rows: usize| {
            store.declare(&format!("{prefix}.{name}"), &[rows, hidden], bound)
        };
        let w_xi = w("w_xi", input_dim);
        let w_hi = w("w_hi", hidden);
        let b_i = gate_biases.then(|| store.declare(&format!("{prefix}.b_i"), &[hidden], 0.0));
        let mut w = |name: &str, rows: usize| {
            store.declare(&format!("{prefix}.{name}"), &[rows, hidden], bound)
        };
        let w_xf = w("w_xf", input_dim);
        let w_hf = w("w_hf", hidden);
        let b_f = gate_biases.then(|| store.declare(&format!("{prefix}.b_f"), &[hidden], 0.0));
        let mut w = |name: &str, rows: usize| {
            store.declare(&format!("{prefix}.{name}"), &[rows, hidden], bound)
        };
        let w_xc = w("w_xc", input_dim);
        let w_hc = w("w_hc", hidden);
        let b_c = store.declare(&format!("{prefix}.b_c"), &[hidden], 0.0);
        let mut w = |name: &str, rows: usize| {
            store.declare(&format!("{prefix}.{name}"), &[rows, hidden], bound)
        };
        let w_xo = w("w_xo", input_dim);
        let w_ho = w("w_ho", hidden);
        let b_o = store.declare(&format!("{prefix}.b_o"), &[hidden], 0.0);
        LstmLayerParams {
            input_dim,
            hidden,
            w_xi,
            w_hi,
            b_i,
            w_xf,
            w_hf,
            b_f,
            w_xc,
            w_hc,
            b_c,
            w_xo,
            w_ho,
            b_o,
        }
    }

    fn gate(
        &self,
        tape: &mut Tape,
        p: &[NodeId],
        x: NodeId,
        h: NodeId,
        (wx, wh, b): (ParamRef, ParamRef, Option<ParamRef>),
    ) -> Result<NodeId> {
        let from_x = tape.matmul(x, p[wx.0])?;
        let from_h = tape.matmul(h, p[wh.0])?;
        let mut s = tape.add(from_x, from_h)?;
        if let Some(b) = b {
            s = tape.add(s, p[b.0])?;
        }
        Ok(s)
    }

    /// Run the recurrence over per-step inputs (each `(B, input_dim)`).
    /// With `reverse` the steps are consumed from the end, and `out[t]` is
    /// the state after consuming `xs[t]` — i.e. the t-th element of the
    /// reverse of the backward pass's output sequence, already re-aligned.
    pub fn forward_steps(
        &self,
        tape: &mut Tape,
        p: &[NodeId],
        xs: &[NodeId],
        reverse: bool,
    ) -> Result<Vec<NodeId>> {
        let batch = tape.value(xs[0]).shape()[0];
        let mut h = tape.leaf(Tensor::zeros(&[batch, self.hidden]));
        let mut c = tape.leaf(Tensor::zeros(&[batch, self.hidden]));
        let mut out = vec![h; xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            let x = xs[t];
            let i = self.gate(tape, p, x, h, (self.w_xi, self.w_hi, self.b_i))?;
            let i = tape.sigmoid(i);
            let f = self.gate(tape, p, x, h, (self.w_xf, self.w_hf, self.b_f))?;
            let f = tape.sigmoid(f);
            let g = self.gate(tape, p, x, h, (self.w_xc, self.w_hc, Some(self.b_c)))?;
            let g = tape.tanh(g);
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let o = self.gate(tape, p, x, h, (self.w_xo, self.w_ho, Some(self.b_o)))?;
            let o = tape.sigmoid(o);
            let c_act = tape.tanh(c);
            h = tape.mul(o, c_act)?;
            out[t] = h;
        }
        Ok(out)
    }
}

/// Forward layer plus optional time-reversed twin; outputs are concatenated
/// per step when both directions are present.
#[derive(Debug, Clone)]
struct DirectionalLayer {
    fwd: LstmLayerParams,
    bwd: Option<LstmLayerParams>,
}

impl DirectionalLayer {
    fn declare(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        gate_biases: bool,
        bidirectional: bool,
    ) -> Self {
        DirectionalLayer {
            fwd: LstmLayerParams::declare(
                store,
                &format!("{prefix}.fwd"),
                input_dim,
                hidden,
                gate_biases,
            ),
            bwd: bidirectional.then(|| {
                LstmLayerParams::declare(
                    store,
                    &format!("{prefix}.bwd"),
                    input_dim,
                    hidden,
                    gate_biases,
                )
            }),
        }
    }

    fn out_width(&self) -> usize {
        self.fwd.hidden * if self.bwd.is_some() { 2 } else { 1 }
    }

    fn forward(&self, tape: &mut Tape, p: &[NodeId], xs: &[NodeId]) -> Result<Vec<NodeId>> {
        let fwd = self.fwd.forward_steps(tape, p, xs, false)?;
        match &self.bwd {
            None => Ok(fwd),
            Some(bwd) => {
                let bwd = bwd.forward_steps(tape, p, xs, true)?;
                fwd.into_iter()
                    .zip(bwd)
                    .map(|(f, b)| tape.concat(&[f, b]).map_err(Error::from))
                    .collect()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Output heads

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HeadKind {
    /// Sigmoid scalar: decompensation, mortality.
    Binary,
    /// Relu scalar: remaining length of stay in hours.
    LosRaw,
    /// 10-way softmax over stay-length buckets.
    LosBucket,
    /// 25 independent sigmoids.
    Pheno,
}

impl HeadKind {
    fn width(self) -> usize {
        match self {
            HeadKind::Binary | HeadKind::LosRaw => 1,
            HeadKind::LosBucket => N_LOS_BUCKETS,
            HeadKind::Pheno => N_PHENOTYPES,
        }
    }
}

#[derive(Debug, Clone)]
struct Head {
    kind: HeadKind,
    w: ParamRef,
    b: ParamRef,
}

impl Head {
    fn declare(store: &mut ParamStore, name: &str, input_dim: usize, kind: HeadKind) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        Head {
            kind,
            w: store.declare(&format!("head.{name}.w"), &[input_dim, kind.width()], bound),
            b: store.declare(&format!("head.{name}.b"), &[kind.width()], 0.0),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &[NodeId], h: NodeId) -> Result<NodeId> {
        let z = tape.matmul(h, p[self.w.0])?;
        let z = tape.add(z, p[self.b.0])?;
        Ok(match self.kind {
            HeadKind::Binary | HeadKind::Pheno => tape.sigmoid(z),
            HeadKind::LosRaw => tape.relu(z),
            HeadKind::LosBucket => tape.softmax(z)?,
        })
    }
}

#[derive(Debug, Clone)]
enum ModelHeads {
    Single(Head),
    Multitask {
        decomp: Head,
        mortality: Head,
        los: Head,
        pheno: Head,
    },
}

// ---------------------------------------------------------------------------
// Model

pub struct RnnModel {
    pub spec: ModelSpec,
    pub layout: InputLayout,
    pub store: ParamStore,
    channels: Vec<DirectionalLayer>,
    stack: Vec<DirectionalLayer>,
    heads: ModelHeads,
}

/// Model input for one forward pass, already batched time-major.
pub enum ModelInput<'a> {
    /// `(T, B, dims)`.
    Dense(&'a Tensor),
    /// One `(T, B, 1 + value dims)` tensor per variable, in variable order.
    Streams(&'a [Tensor]),
}

/// Step-level predictions produced by one forward pass. Node ids live on the
/// tape the pass was recorded on.
pub enum HeadOut {
    Single {
        /// Per-step predictions, present under deep supervision.
        steps: Option<Vec<NodeId>>,
        /// Prediction after the final step.
        last: NodeId,
    },
    Multitask {
        /// `(B,1)` sigmoid per step.
        decomp: Vec<NodeId>,
        /// `(B,1)` sigmoid per step over the first 48 steps; the last entry
        /// is the hour-48 prediction. Empty on shorter input.
        mortality: Vec<NodeId>,
        /// `(B,1)` relu or `(B,10)` softmax per step.
        los: Vec<NodeId>,
        /// `(B,25)` sigmoids per step; the loss reads each stay's own final
        /// step, which under padding differs across the batch.
        pheno: Vec<NodeId>,
    },
}

pub struct Forward {
    /// Tape leaves index-aligned with the parameter store.
    pub param_nodes: Vec<NodeId>,
    pub heads: HeadOut,
    /// Width of the concatenated channel output (channel-wise models only).
    pub u_width: Option<usize>,
}

impl RnnModel {
    pub fn new(spec: ModelSpec, layout: InputLayout) -> Result<RnnModel> {
        spec.validate()?;
        let mut store = ParamStore::default();
        let mut channels = Vec::new();
        let stack_input = match (&spec.arch, &layout) {
            (Arch::Standard, InputLayout::Dense { dims }) => *dims,
            (Arch::Channelwise, InputLayout::Streams { dims }) => {
                if dims.len() != N_VARIABLES {
                    return Err(Error::Shape {
                        message: format!(
                            "channel-wise input needs {N_VARIABLES} streams, got {}",
                            dims.len()
                        ),
                    });
                }
                for (i, &d) in dims.iter().enumerate() {
                    channels.push(DirectionalLayer::declare(
                        &mut store,
                        &format!("channel{i}"),
                        d,
                        spec.channel_units,
                        spec.gate_biases,
                        spec.bidirectional,
                    ));
                }
                channels.iter().map(DirectionalLayer::out_width).sum()
            }
            _ => {
                return Err(Error::invalid(
                    "input layout does not match the architecture: standard \
                     takes dense vectors, channel-wise takes per-variable streams",
                ));
            }
        };

        // The top stack of a channel-wise model is left-to-right by
        // construction; only the standard stack honours `bidirectional`.
        let stack_bidir = spec.arch == Arch::Standard && spec.bidirectional;
        let mut stack = Vec::new();
        let mut width = stack_input;
        for l in 0..spec.layers {
            let layer = DirectionalLayer::declare(
                &mut store,
                &format!("layer{l}"),
                width,
                spec.hidden_units,
                spec.gate_biases,
                stack_bidir,
            );
            width = layer.out_width();
            stack.push(layer);
        }

        let heads = match spec.heads {
            TaskHeads::Single(task) => ModelHeads::Single(match task {
                Task::Ihm => Head::declare(&mut store, "mortality", width, HeadKind::Binary),
                Task::Decomp => Head::declare(&mut store, "decomp", width, HeadKind::Binary),
                Task::Los => {
                    let kind = if spec.raw_los {
                        HeadKind::LosRaw
                    } else {
                        HeadKind::LosBucket
                    };
                    Head::declare(&mut store, "los", width, kind)
                }
                Task::Pheno => Head::declare(&mut store, "pheno", width, HeadKind::Pheno),
            }),
            TaskHeads::Multitask => {
                let los_kind = if spec.raw_los {
                    HeadKind::LosRaw
                } else {
                    HeadKind::LosBucket
                };
                ModelHeads::Multitask {
                    decomp: Head::declare(&mut store, "decomp", width, HeadKind::Binary),
                    mortality: Head::declare(&mut store, "mortality", width, HeadKind::Binary),
                    los: Head::declare(&mut store, "los", width, los_kind),
                    pheno: Head::declare(&mut store, "pheno", width, HeadKind::Pheno),
                }
            }
        };

        store.randomize(spec.seed);
        Ok(RnnModel {
            spec,
            layout,
            store,
            channels,
            stack,
            heads,
        })
    }

    /// Record one forward pass on `tape`. `dropout_salt` varies the dropout
    /// masks between passes; it is ignored when `train` is false.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        train: bool,
        dropout_salt: u64,
    ) -> Result<Forward> {
        let p = self.store.leaves(tape);
        let mut drop_calls = 0u64;
        let mut dropout = |tape: &mut Tape, node: NodeId| {
            let seed = (self.spec.seed ^ dropout_salt)
                .wrapping_add(drop_calls.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            drop_calls += 1;
            tape.dropout(node, self.spec.dropout, seed, train)
        };

        let (mut steps, u_width) = match (input, &self.layout) {
            (ModelInput::Dense(x), InputLayout::Dense { dims }) => {
                let shape = x.shape().to_vec();
                if shape.len() != 3 || shape[2] != *dims {
                    return Err(Error::Shape {
                        message: format!(
                            "dense input must be (T, B, {dims}), got {shape:?}"
                        ),
                    });
                }
                let node = tape.leaf((*x).clone());
                let steps: Vec<NodeId> = (0..shape[0])
                    .map(|t| tape.slice_time(node, t))
                    .collect::<ndiff::Result<_>>()?;
                (steps, None)
            }
            (ModelInput::Streams(streams), InputLayout::Streams { dims }) => {
                if streams.len() != dims.len() {
                    return Err(Error::Shape {
                        message: format!(
                            "expected {} input streams, got {}",
                            dims.len(),
                            streams.len()
                        ),
                    });
                }
                let t_len = streams[0].shape()[0];
                let mut per_var: Vec<Vec<NodeId>> = Vec::with_capacity(streams.len());
                for ((i, s), &d) in streams.iter().enumerate().zip(dims) {
                    let shape = s.shape().to_vec();
                    if shape.len() != 3 || shape[2] != d || shape[0] != t_len {
                        return Err(Error::Shape {
                            message: format!(
                                "stream {i} must be (T, B, {d}) with shared T, got {shape:?}"
                            ),
                        });
                    }
                    let node = tape.leaf(s.clone());
                    let xs: Vec<NodeId> = (0..t_len)
                        .map(|t| tape.slice_time(node, t))
                        .collect::<ndiff::Result<_>>()?;
                    per_var.push(self.channels[i].forward(tape, &p, &xs)?);
                }
                // u_t = per-variable outputs concatenated in variable order.
                let mut u = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let parts: Vec<NodeId> = per_var.iter().map(|v| v[t]).collect();
                    u.push(tape.concat(&parts)?);
                }
                let width = tape.value(u[0]).shape()[1];
                (u, Some(width))
            }
            _ => {
                return Err(Error::invalid(
                    "forward input kind does not match the model's input layout",
                ));
            }
        };

        for (l, layer) in self.stack.iter().enumerate() {
            if l > 0 || u_width.is_some() {
                steps = steps.into_iter().map(|s| dropout(tape, s)).collect();
            }
            steps = layer.forward(tape, &p, &steps)?;
        }
        let head_in: Vec<NodeId> = steps.into_iter().map(|s| dropout(tape, s)).collect();

        let heads = match &self.heads {
            ModelHeads::Single(head) => {
                let last = head.apply(tape, &p, *head_in.last().expect("nonempty sequence"))?;
                let steps = if self.spec.deep_supervision {
                    Some(
                        head_in
                            .iter()
                            .map(|&h| head.apply(tape, &p, h))
                            .collect::<Result<_>>()?,
                    )
                } else {
                    None
                };
                HeadOut::Single { steps, last }
            }
            ModelHeads::Multitask {
                decomp,
                mortality,
                los,
                pheno,
            } => {
                let decomp = head_in
                    .iter()
                    .map(|&h| decomp.apply(tape, &p, h))
                    .collect::<Result<_>>()?;
                let los = head_in
                    .iter()
                    .map(|&h| los.apply(tape, &p, h))
                    .collect::<Result<_>>()?;
                let mortality = if head_in.len() >= IHM_TIMESTEP {
                    head_in[..IHM_TIMESTEP]
                        .iter()
                        .map(|&h| mortality.apply(tape, &p, h))
                        .collect::<Result<_>>()?
                } else {
                    Vec::new()
                };
                let pheno = head_in
                    .iter()
                    .map(|&h| pheno.apply(tape, &p, h))
                    .collect::<Result<_>>()?;
                HeadOut::Multitask {
                    decomp,
                    mortality,
                    los,
                    pheno,
                }
            }
        };
        Ok(Forward {
            param_nodes: p,
            heads,
            u_width,
        })
    }

    // -----------------------------------------------------------------------
    // Checkpoints

    /// Text header (spec, layout, tensor table) followed by the parameters
    /// as little-endian f64 in declaration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = String::from("rnnmodel v1\n");
        let s = &self.spec;
        header.push_str(&format!("arch {}\n", s.arch.name()));
        header.push_str(&format!("layers {}\n", s.layers));
        header.push_str(&format!("hidden {}\n", s.hidden_units));
        header.push_str(&format!("channel {}\n", s.channel_units));
        header.push_str(&format!("dropout {}\n", s.dropout));
        header.push_str(&format!("deep_supervision {}\n", u8::from(s.deep_supervision)));
        header.push_str(&format!("bidirectional {}\n", u8::from(s.bidirectional)));
        header.push_str(&format!("gate_biases {}\n", u8::from(s.gate_biases)));
        header.push_str(&format!("raw_los {}\n", u8::from(s.raw_los)));
        let task = match s.heads {
            TaskHeads::Single(t) => t.name(),
            TaskHeads::Multitask => "multitask",
        };
        header.push_str(&format!("task {task}\n"));
        header.push_str(&format!("seed {}\n", s.seed));
        match &self.layout {
            InputLayout::Dense { dims } => header.push_str(&format!("input dense {dims}\n")),
            InputLayout::Streams { dims } => {
                let list: Vec<String> = dims.iter().map(usize::to_string).collect();
                header.push_str(&format!("input streams {}\n", list.join(",")));
            }
        }
        header.push_str(&format!("tensors {}\n", self.store.n_tensors()));
        for (name, tensor) in self.store.names.iter().zip(&self.store.tensors) {
            let dims: Vec<String> = tensor.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {}\n", dims.join("x")));
        }
        header.push('\n');

        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
        let mut payload = Vec::with_capacity(self.store.flat_len() * 8);
        for v in self.store.flat() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&payload).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RnnModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Schema {
                message: format!("{}: missing checkpoint header terminator", path.display()),
            })?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Schema {
            message: format!("{}: header is not UTF-8", path.display()),
        })?;
        let payload = &bytes[split + 2..];

        let mut lines = header.lines();
        if lines.next() != Some("rnnmodel v1") {
            return Err(Error::Schema {
                message: format!("{} is not a model checkpoint", path.display()),
            });
        }
        let mut fields = std::collections::BTreeMap::new();
        for line in lines.by_ref() {
            let Some((key, value)) = line.split_once(' ') else {
                return Err(Error::Schema {
                    message: format!("bad checkpoint line {line:?}"),
                });
            };
            if key == "tensor" {
                continue; // informational; shapes are rederived from the spec
            }
            fields.insert(key.to_string(), value.to_string());
            if key == "tensors" {
                break;
            }
        }
        let get = |key: &str| -> Result<&str> {
            fields.get(key).map(String::as_str).ok_or_else(|| Error::Schema {
                message: format!("checkpoint header missing {key}"),
            })
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Schema {
                message: format!("bad checkpoint field {key}"),
            })
        };
        let parse_flag = |key: &str| -> Result<bool> { Ok(get(key)? == "1") };

        let arch = match get("arch")? {
            "standard" => Arch::Standard,
            "channelwise" => Arch::Channelwise,
            other => {
                return Err(Error::Schema {
                    message: format!("unknown architecture {other:?}"),
                });
            }
        };
        let heads = match get("task")? {
            "multitask" => TaskHeads::Multitask,
            name => TaskHeads::Single(name.parse().map_err(|_| Error::Schema {
                message: format!("unknown task {name:?}"),
            })?),
        };
        let spec = ModelSpec {
            arch,
            layers: parse_usize("layers")?,
            hidden_units: parse_usize("hidden")?,
            channel_units: parse_usize("channel")?,
            dropout: get("dropout")?.parse().map_err(|_| Error::Schema {
                message: "bad checkpoint field dropout".to_string(),
            })?,
            deep_supervision: parse_flag("deep_supervision")?,
            bidirectional: parse_flag("bidirectional")?,
            gate_biases: parse_flag("gate_biases")?,
            raw_los: parse_flag("raw_los")?,
            heads,
            seed: get("seed")?.parse().map_err(|_| Error::Schema {
                message: "bad checkpoint field seed".to_string(),
            })?,
        };
        let layout = match get("input")?.split_once(' ') {
            Some(("dense", d)) => InputLayout::Dense {
                dims: d.parse().map_err(|_| Error::Schema {
                    message: "bad dense input width".to_string(),
                })?,
            },
            Some(("streams", list)) => InputLayout::Streams {
                dims: list
                    .split(',')
                    .map(|d| {
                        d.parse().map_err(|_| Error::Schema {
                            message: "bad stream width list".to_string(),
                        })
                    })
                    .collect::<Result<_>>()?,
            },
            _ => {
                return Err(Error::Schema {
                    message: "bad checkpoint input layout".to_string(),
                });
            }
        };

        let mut model = RnnModel::new(spec, layout)?;
        if parse_usize("tensors")? != model.store.n_tensors() {
            return Err(Error::Schema {
                message: "checkpoint tensor count does not match the spec".to_string(),
            });
        }
        if payload.len() != model.store.flat_len() * 8 {
            return Err(Error::Schema {
                message: format!(
                    "checkpoint payload is {} bytes, model needs {}",
                    payload.len(),
                    model.store.flat_len() * 8
                ),
            });
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.store.load_flat(&values)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndiff::{central_diff, max_rel_err};

    fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// Deterministic non-trivial parameter fill for gradient probes.
    fn probe_params(model: &mut RnnModel, scale: f64) {
        let n = model.store.flat_len();
        let values: Vec<f64> = (0..n)
            .map(|k| scale * (0.9 * k as f64 + 0.7).sin())
            .collect();
        model.store.load_flat(&values).unwrap();
    }

    fn dense_input(t: usize, b: usize, d: usize) -> Tensor {
        let data: Vec<f64> = (0..t * b * d)
            .map(|k| (0.37 * k as f64 + 0.11).cos())
            .collect();
        Tensor::from_vec(&[t, b, d], data).unwrap()
    }

    fn single_spec(task: Task, hidden: usize) -> ModelSpec {
        ModelSpec::new(Arch::Standard, TaskHeads::Single(task), hidden, 5)
    }

    #[test]
    fn zero_params_give_zero_hidden_states() {
        let mut store = ParamStore::default();
        let layer = LstmLayerParams::declare(&mut store, "l", 3, 4, false);
        let mut tape = Tape::new();
        let p = store.leaves(&mut tape);
        let xs: Vec<NodeId> = (0..5)
            .map(|t| tape.leaf(Tensor::full(&[2, 3], 0.3 * (t + 1) as f64)))
            .collect();
        let hs = layer.forward_steps(&mut tape, &p, &xs, false).unwrap();
        for h in hs {
            assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_step_matches_hand_evaluated_cell() {
        // D = 2, H = 2, T = 1, h0 = c0 = 0: only the x-weights and biases
        // matter. The expected values are recomputed here from scalars.
        let mut store = ParamStore::default();
        let layer = LstmLayerParams::declare(&mut store, "l", 2, 2, false);
        let w_xi = [[0.1, 0.2], [0.3, 0.4]];
        let w_xf = [[-0.2, 0.5], [0.1, -0.3]];
        let w_xc = [[0.7, -0.1], [0.2, 0.6]];
        let w_xo = [[-0.4, 0.3], [0.5, 0.1]];
        let b_c = [0.05, -0.02];
        let b_o = [0.1, -0.2];
        let assign = |store: &mut ParamStore, r: ParamRef, vals: &[f64]| {
            store.tensors[r.0].data_mut().copy_from_slice(vals);
        };
        assign(&mut store, layer.w_xi, &[0.1, 0.2, 0.3, 0.4]);
        assign(&mut store, layer.w_xf, &[-0.2, 0.5, 0.1, -0.3]);
        assign(&mut store, layer.w_xc, &[0.7, -0.1, 0.2, 0.6]);
        assign(&mut store, layer.w_xo, &[-0.4, 0.3, 0.5, 0.1]);
        assign(&mut store, layer.b_c, &b_c);
        assign(&mut store, layer.b_o, &b_o);

        let x = [1.0, -1.0];
        let mut tape = Tape::new();
        let p = store.leaves(&mut tape);
        let xs = vec![tape.leaf(Tensor::from_vec(&[1, 2], x.to_vec()).unwrap())];
        let h = layer.forward_steps(&mut tape, &p, &xs, false).unwrap()[0];

        for j in 0..2 {
            let i = sigmoid(x[0] * w_xi[0][j] + x[1] * w_xi[1][j]);
            let f = sigmoid(x[0] * w_xf[0][j] + x[1] * w_xf[1][j]);
            let g = (x[0] * w_xc[0][j] + x[1] * w_xc[1][j] + b_c[j]).tanh();
            let c = f * 0.0 + i * g;
            let o = sigmoid(x[0] * w_xo[0][j] + x[1] * w_xo[1][j] + b_o[j]);
            let expect = o * c.tanh();
            assert!(
                (tape.value(h).at2(0, j) - expect).abs() < 1e-15,
                "unit {j}"
            );
        }
    }

    /// Plain-loop reference implementing the identical arithmetic, used to
    /// pin the recurrence independent of the tape machinery.
    fn reference_lstm(
        w: &[Vec<f64>; 8], // xi, hi, xf, hf, xc, hc, xo, ho (row-major)
        b_c: &[f64],
        b_o: &[f64],
        xs: &[Vec<f64>],
        d: usize,
        hid: usize,
    ) -> Vec<f64> {
        let matvec = |m: &[f64], v: &[f64], rows: usize| -> Vec<f64> {
            let mut out = vec![0.0; hid];
            for p in 0..rows {
                if v[p] == 0.0 {
                    continue;
                }
                for j in 0..hid {
                    out[j] += v[p] * m[p * hid + j];
                }
            }
            out
        };
        let mut h = vec![0.0; hid];
        let mut c = vec![0.0; hid];
        for x in xs {
            let gate = |wx: &[f64], wh: &[f64], bias: Option<&[f64]>| -> Vec<f64> {
                let a = matvec(wx, x, d);
                let bmm = matvec(wh, &h, hid);
                (0..hid)
                    .map(|j| a[j] + bmm[j] + bias.map_or(0.0, |b| b[j]))
                    .collect()
            };
            let i: Vec<f64> = gate(&w[0], &w[1], None).iter().map(|&z| sigmoid(z)).collect();
            let f: Vec<f64> = gate(&w[2], &w[3], None).iter().map(|&z| sigmoid(z)).collect();
            let g: Vec<f64> = gate(&w[4], &w[5], Some(b_c)).iter().map(|z| z.tanh()).collect();
            c = (0..hid).map(|j| f[j] * c[j] + i[j] * g[j]).collect();
            let o: Vec<f64> = gate(&w[6], &w[7], Some(b_o)).iter().map(|&z| sigmoid(z)).collect();
            h = (0..hid).map(|j| o[j] * c[j].tanh()).collect();
        }
        h
    }

    #[test]
    fn recurrence_matches_scalar_reference_bitwise() {
        let (d, hid, t) = (2, 3, 4);
        let mut store = ParamStore::default();
        let layer = LstmLayerParams::declare(&mut store, "l", d, hid, false);
        store.randomize(42);
        let grab = |r: ParamRef| store.tensors[r.0].data().to_vec();
        let w = [
            grab(layer.w_xi),
            grab(layer.w_hi),
            grab(layer.w_xf),
            grab(layer.w_hf),
            grab(layer.w_xc),
            grab(layer.w_hc),
            grab(layer.w_xo),
            grab(layer.w_ho),
        ];
        let xs_data: Vec<Vec<f64>> = (0..t)
            .map(|k| (0..d).map(|j| ((k * d + j) as f64 * 0.61).sin()).collect())
            .collect();

        let mut tape = Tape::new();
        let p = store.leaves(&mut tape);
        let xs: Vec<NodeId> = xs_data
            .iter()
            .map(|row| tape.leaf(Tensor::from_vec(&[1, d], row.clone()).unwrap()))
            .collect();
        let hs = layer.forward_steps(&mut tape, &p, &xs, false).unwrap();
        let last = tape.value(*hs.last().unwrap()).data().to_vec();

        let expect = reference_lstm(
            &w,
            store.tensors[layer.b_c.0].data(),
            store.tensors[layer.b_o.0].data(),
            &xs_data,
            d,
            hid,
        );
        assert_eq!(last, expect);
    }

    fn loss_of_model(model: &RnnModel, x: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let fwd = model
            .forward(&mut tape, &ModelInput::Dense(x), false, 0)
            .unwrap();
        let node = match fwd.heads {
            HeadOut::Single { last, .. } => last,
            _ => unreachable!(),
        };
        // An asymmetric weighting makes every output coordinate matter.
        let weights: Vec<f64> = (0..tape.value(node).len())
            .map(|k| 1.0 + 0.3 * k as f64)
            .collect();
        let n = tape.value(node).shape().to_vec();
        let wnode = tape.leaf(Tensor::from_vec(&n, weights).unwrap());
        let prod = tape.mul(node, wnode).unwrap();
        let loss = tape.sum(prod);
        tape.value(loss).item()
    }

    fn grad_of_model(model: &RnnModel, x: &Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let fwd = model
            .forward(&mut tape, &ModelInput::Dense(x), false, 0)
            .unwrap();
        let node = match fwd.heads {
            HeadOut::Single { last, .. } => last,
            _ => unreachable!(),
        };
        let weights: Vec<f64> = (0..tape.value(node).len())
            .map(|k| 1.0 + 0.3 * k as f64)
            .collect();
        let n = tape.value(node).shape().to_vec();
        let wnode = tape.leaf(Tensor::from_vec(&n, weights).unwrap());
        let prod = tape.mul(node, wnode).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        flat_grads(&tape, &fwd.param_nodes)
    }

    fn check_model_gradients(mut spec: ModelSpec, layout: InputLayout, x: &Tensor) {
        for gate_biases in [false, true] {
            spec.gate_biases = gate_biases;
            let mut model = RnnModel::new(spec.clone(), layout.clone()).unwrap();
            probe_params(&mut model, 0.4);
            let analytic = grad_of_model(&model, x);
            let base = model.store.flat();
            let numeric = central_diff(
                |params| {
                    let mut m = RnnModel::new(spec.clone(), layout.clone()).unwrap();
                    m.store.load_flat(params).unwrap();
                    loss_of_model(&m, x)
                },
                &base,
                1e-5,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-5, "gate_biases={gate_biases}: rel err {err}");
        }
    }

    #[test]
    fn lstm_gradients_match_central_differences() {
        let spec = single_spec(Task::Ihm, 4);
        check_model_gradients(spec, InputLayout::Dense { dims: 3 }, &dense_input(3, 2, 3));
    }

    #[test]
    fn bidirectional_gradients_match_central_differences() {
        let mut spec = single_spec(Task::Pheno, 3);
        spec.bidirectional = true;
        spec.layers = 2;
        check_model_gradients(spec, InputLayout::Dense { dims: 2 }, &dense_input(3, 2, 2));
    }

    #[test]
    fn bilstm_single_step_is_a_pair_of_cells() {
        let mut store = ParamStore::default();
        let layer = DirectionalLayer::declare(&mut store, "l", 2, 3, false, true);
        store.randomize(9);
        let x = Tensor::from_vec(&[1, 2], vec![0.4, -0.7]).unwrap();

        let mut tape = Tape::new();
        let p = store.leaves(&mut tape);
        let xs = vec![tape.leaf(x.clone())];
        let out = layer.forward(&mut tape, &p, &xs).unwrap()[0];
        let combined = tape.value(out).data().to_vec();

        let mut tape2 = Tape::new();
        let p2 = store.leaves(&mut tape2);
        let xs2 = vec![tape2.leaf(x)];
        let f = layer.fwd.forward_steps(&mut tape2, &p2, &xs2, false).unwrap()[0];
        let b = layer
            .bwd
            .as_ref()
            .unwrap()
            .forward_steps(&mut tape2, &p2, &xs2, true)
            .unwrap()[0];
        let mut expect = tape2.value(f).data().to_vec();
        expect.extend_from_slice(tape2.value(b).data());
        assert_eq!(combined, expect);
    }

    #[test]
    fn tied_bilstm_on_palindrome_is_symmetric() {
        // With identical forward/backward parameters and x_t = x_{T-1-t},
        // the re-aligned backward outputs equal the forward outputs.
        let mut store = ParamStore::default();
        let layer = LstmLayerParams::declare(&mut store, "l", 2, 3, false);
        store.randomize(13);
        let rows = [vec![0.3, -0.5], vec![1.1, 0.2], vec![0.3, -0.5]];
        let mut tape = Tape::new();
        let p = store.leaves(&mut tape);
        let xs: Vec<NodeId> = rows
            .iter()
            .map(|r| tape.leaf(Tensor::from_vec(&[1, 2], r.clone()).unwrap()))
            .collect();
        let fwd = layer.forward_steps(&mut tape, &p, &xs, false).unwrap();
        let bwd = layer.forward_steps(&mut tape, &p, &xs, true).unwrap();
        for t in 0..rows.len() {
            assert_eq!(
                tape.value(fwd[t]).data(),
                tape.value(bwd[rows.len() - 1 - t]).data(),
                "step {t}"
            );
        }
    }

    fn tiny_streams(dims: &[usize], t: usize, fill: impl Fn(usize, usize) -> f64) -> Vec<Tensor> {
        dims.iter()
            .enumerate()
            .map(|(i, &d)| {
                let data: Vec<f64> = (0..t * d).map(|k| fill(i, k)).collect();
                Tensor::from_vec(&[t, 1, d], data).unwrap()
            })
            .collect()
    }

    fn channelwise_spec(units: usize, channel_units: usize) -> (ModelSpec, InputLayout) {
        let mut spec = ModelSpec::new(
            Arch::Channelwise,
            TaskHeads::Single(Task::Ihm),
            units,
            3,
        );
        spec.channel_units = channel_units;
        spec.bidirectional = true;
        let vars = VariableSet::builtin();
        (spec, InputLayout::streams(vars))
    }

    #[test]
    fn channel_output_width_is_twice_channels_times_variables() {
        let (spec, layout) = channelwise_spec(3, 2);
        let model = RnnModel::new(spec, layout.clone()).unwrap();
        let InputLayout::Streams { dims } = &layout else {
            unreachable!()
        };
        let streams = tiny_streams(dims, 2, |i, k| ((i + k) as f64 * 0.3).sin());
        let mut tape = Tape::new();
        let fwd = model
            .forward(&mut tape, &ModelInput::Streams(&streams), false, 0)
            .unwrap();
        assert_eq!(fwd.u_width, Some(2 * 2 * N_VARIABLES));
    }

    #[test]
    fn zero_channel_parameters_make_the_output_input_independent() {
        let (spec, layout) = channelwise_spec(3, 2);
        let mut model = RnnModel::new(spec, layout.clone()).unwrap();
        for k in 0..model.store.n_tensors() {
            if model.store.names()[k].starts_with("channel") {
                for v in model.store.tensor_mut(k).data_mut() {
                    *v = 0.0;
                }
            }
        }
        let InputLayout::Streams { dims } = &layout else {
            unreachable!()
        };
        let run = |streams: &[Tensor]| -> Vec<f64> {
            let mut tape = Tape::new();
            let fwd = model
                .forward(&mut tape, &ModelInput::Streams(streams), false, 0)
                .unwrap();
            let HeadOut::Single { last, .. } = fwd.heads else {
                unreachable!()
            };
            tape.value(last).data().to_vec()
        };
        let a = run(&tiny_streams(dims, 3, |i, k| ((i * 7 + k) as f64).sin()));
        let b = run(&tiny_streams(dims, 3, |i, k| ((i + k) as f64 * 2.3).cos()));
        assert_eq!(a, b);
    }

    #[test]
    fn channelwise_gradients_match_central_differences() {
        // Three tiny fake variables keep the parameter count manageable
        // while exercising channels, concat, top stack, and head together.
        let mut spec = ModelSpec::new(Arch::Channelwise, TaskHeads::Single(Task::Ihm), 3, 2);
        spec.channel_units = 2;
        spec.bidirectional = true;
        let dims = vec![2usize; N_VARIABLES];
        let layout = InputLayout::Streams { dims: dims.clone() };
        let streams = tiny_streams(&dims, 2, |i, k| ((i * 3 + 2 * k) as f64 * 0.41).sin());

        let run = |params: Option<&[f64]>, want_grad: bool| -> (f64, Vec<f64>, Vec<f64>) {
            let mut model = RnnModel::new(spec.clone(), layout.clone()).unwrap();
            match params {
                Some(p) => model.store.load_flat(p).unwrap(),
                None => probe_params(&mut model, 0.35),
            }
            let mut tape = Tape::new();
            let fwd = model
                .forward(&mut tape, &ModelInput::Streams(&streams), false, 0)
                .unwrap();
            let HeadOut::Single { last, .. } = fwd.heads else {
                unreachable!()
            };
            let loss = tape.sum(last);
            let value = tape.value(loss).item();
            let grads = if want_grad {
                tape.backward(loss).unwrap();
                flat_grads(&tape, &fwd.param_nodes)
            } else {
                Vec::new()
            };
            (value, grads, model.store.flat())
        };
        let (_, analytic, base) = run(None, true);
        let numeric = central_diff(|p| run(Some(p), false).0, &base, 1e-5);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn zero_head_weights_give_indifferent_predictions() {
        let mut spec = ModelSpec::new(Arch::Standard, TaskHeads::Multitask, 3, 1);
        spec.deep_supervision = true;
        let mut model = RnnModel::new(spec, InputLayout::Dense { dims: 4 }).unwrap();
        let n = model.store.flat_len();
        model.store.load_flat(&vec![0.0; n]).unwrap();
        let x = dense_input(IHM_TIMESTEP + 2, 1, 4);
        let mut tape = Tape::new();
        let fwd = model
            .forward(&mut tape, &ModelInput::Dense(&x), false, 0)
            .unwrap();
        let HeadOut::Multitask {
            decomp,
            mortality,
            los,
            pheno,
        } = fwd.heads
        else {
            unreachable!()
        };
        for d in &decomp {
            assert_eq!(tape.value(*d).data(), &[0.5]);
        }
        assert_eq!(mortality.len(), IHM_TIMESTEP);
        assert_eq!(tape.value(*mortality.last().unwrap()).data(), &[0.5]);
        for l in &los {
            for v in tape.value(*l).data() {
                assert!((v - 0.1).abs() < 1e-15);
            }
        }
        assert_eq!(pheno.len(), IHM_TIMESTEP + 2);
        for p in &pheno {
            assert!(tape.value(*p).data().iter().all(|&v| v == 0.5));
            assert_eq!(tape.value(*p).shape(), &[1, N_PHENOTYPES]);
        }
    }

    #[test]
    fn zero_raw_los_head_predicts_zero_hours() {
        let mut spec = ModelSpec::new(Arch::Standard, TaskHeads::Single(Task::Los), 3, 1);
        spec.raw_los = true;
        let mut model = RnnModel::new(spec, InputLayout::Dense { dims: 4 }).unwrap();
        let n = model.store.flat_len();
        model.store.load_flat(&vec![0.0; n]).unwrap();
        let mut tape = Tape::new();
        let fwd = model
            .forward(&mut tape, &ModelInput::Dense(&dense_input(5, 2, 4)), false, 0)
            .unwrap();
        let HeadOut::Single { last, .. } = fwd.heads else {
            unreachable!()
        };
        assert_eq!(tape.value(last).data(), &[0.0, 0.0]);
    }

    #[test]
    fn short_sequences_omit_the_mortality_head() {
        let spec = ModelSpec::new(Arch::Standard, TaskHeads::Multitask, 3, 2);
        let model = RnnModel::new(spec, InputLayout::Dense { dims: 4 }).unwrap();
        let run = |t: usize| -> usize {
            let mut tape = Tape::new();
            let fwd = model
                .forward(&mut tape, &ModelInput::Dense(&dense_input(t, 1, 4)), false, 0)
                .unwrap();
            let HeadOut::Multitask { mortality, .. } = fwd.heads else {
                unreachable!()
            };
            mortality.len()
        };
        assert_eq!(run(30), 0);
        assert_eq!(run(IHM_TIMESTEP), IHM_TIMESTEP);
        assert_eq!(run(IHM_TIMESTEP + 10), IHM_TIMESTEP);
    }

    #[test]
    fn untouched_heads_receive_zero_gradient() {
        let spec = ModelSpec::new(Arch::Standard, TaskHeads::Multitask, 3, 4);
        let mut model = RnnModel::new(spec, InputLayout::Dense { dims: 4 }).unwrap();
        probe_params(&mut model, 0.3);
        let x = dense_input(6, 1, 4);
        let mut tape = Tape::new();
        let fwd = model
            .forward(&mut tape, &ModelInput::Dense(&x), false, 0)
            .unwrap();
        let HeadOut::Multitask { decomp, .. } = &fwd.heads else {
            unreachable!()
        };
        let all = tape.concat(decomp).unwrap();
        let loss = tape.sum(all);
        tape.backward(loss).unwrap();
        for (k, name) in model.store.names().iter().enumerate() {
            let grad = tape.grad_or_zeros(fwd.param_nodes[k]);
            let zero = grad.data().iter().all(|&v| v == 0.0);
            if name.starts_with("head.decomp") || name.starts_with("layer") {
                assert!(!zero, "{name} should receive gradient");
            } else if name.starts_with("head.") {
                assert!(zero, "{name} should not receive gradient");
            }
        }
    }

    #[test]
    fn full_dropout_between_layers_hides_the_first_layer() {
        let mut spec = ModelSpec::new(Arch::Standard, TaskHeads::Single(Task::Ihm), 3, 6);
        spec.layers = 2;
        spec.dropout = 1.0 - 1e-12; // validate() forbids exactly 1.0
        let layout = InputLayout::Dense { dims: 4 };
        let x = dense_input(4, 2, 4);

        let run = |layer0_fill: f64, train: bool| -> Vec<f64> {
            let mut model = RnnModel::new(spec.clone(), layout.clone()).unwrap();
            probe_params(&mut model, 0.4);
            for k in 0..model.store.n_tensors() {
                if model.store.names()[k].starts_with("layer0") {
                    for v in model.store.tensor_mut(k).data_mut() {
                        *v *= layer0_fill;
                    }
                }
            }
            let mut tape = Tape::new();
            let fwd = model
                .forward(&mut tape, &ModelInput::Dense(&x), train, 7)
                .unwrap();
            let HeadOut::Single { last, .. } = fwd.heads else {
                unreachable!()
            };
            tape.value(last).data().to_vec()
        };
        // Under (near-)certain dropout the second layer sees zeros whatever
        // the first layer computed.
        assert_eq!(run(1.0, true), run(-2.5, true));
        // Without training the dropout is the identity, so the first layer
        // matters again.
        assert_ne!(run(1.0, false), run(-2.5, false));
    }

    #[test]
    fn eval_mode_equals_no_dropout_bitwise() {
        let mut spec = single_spec(Task::Ihm, 4);
        spec.dropout = 0.4;
        spec.layers = 2;
        let layout = InputLayout::Dense { dims: 3 };
        let x = dense_input(5, 2, 3);
        let mut with_dropout = RnnModel::new(spec.clone(), layout.clone()).unwrap();
        probe_params(&mut with_dropout, 0.4);
        spec.dropout = 0.0;
        let mut without = RnnModel::new(spec, layout).unwrap();
        probe_params(&mut without, 0.4);

        let run = |m: &RnnModel| -> Vec<f64> {
            let mut tape = Tape::new();
            let fwd = m
                .forward(&mut tape, &ModelInput::Dense(&x), false, 99)
                .unwrap();
            let HeadOut::Single { last, .. } = fwd.heads else {
                unreachable!()
            };
            tape.value(last).data().to_vec()
        };
        assert_eq!(run(&with_dropout), run(&without));
    }

    #[test]
    fn permuting_variables_with_their_parameters_is_invariant() {
        let (spec, layout) = channelwise_spec(3, 2);
        let mut model = RnnModel::new(spec.clone(), layout.clone()).unwrap();
        probe_params(&mut model, 0.4);
        let InputLayout::Streams { dims } = &layout else {
            unreachable!()
        };
        let streams = tiny_streams(dims, 3, |i, k| ((i * 5 + k) as f64 * 0.29).sin());

        let run = |model: &RnnModel, streams: &[Tensor]| -> Vec<f64> {
            let mut tape = Tape::new();
            let fwd = model
                .forward(&mut tape, &ModelInput::Streams(streams), false, 0)
                .unwrap();
            let HeadOut::Single { last, .. } = fwd.heads else {
                unreachable!()
            };
            tape.value(last).data().to_vec()
        };
        let before = run(&model, &streams);

        // Swap variables A and B (first same-width pair): their streams,
        // their channel parameters, and the matching row blocks of the top
        // layer's input weights.
        let (a, b) = (0..dims.len())
            .flat_map(|i| ((i + 1)..dims.len()).map(move |j| (i, j)))
            .find(|&(i, j)| dims[i] == dims[j])
            .expect("some pair of variables shares a width");
        let mut swapped_streams = streams.clone();
        swapped_streams.swap(a, b);
        let mut swapped = RnnModel::new(spec, layout.clone()).unwrap();
        swapped.store.load_flat(&model.store.flat()).unwrap();
        let names = swapped.store.names().to_vec();
        for (k, name) in names.iter().enumerate() {
            if let Some(rest) = name.strip_prefix(&format!("channel{a}.")) {
                let peer = names
                    .iter()
                    .position(|n| n == &format!("channel{b}.{rest}"))
                    .unwrap();
                let tmp = swapped.store.tensor_by_index(k).clone();
                *swapped.store.tensor_mut(k) = swapped.store.tensor_by_index(peer).clone();
                *swapped.store.tensor_mut(peer) = tmp;
            }
        }
        // Row blocks of the top input weights: variable v owns rows
        // [v*w, (v+1)*w) where w = 2 * channel_units.
        let w = 2 * swapped.spec.channel_units;
        for (k, name) in names.iter().enumerate() {
            if name.starts_with("layer0.fwd.w_x") {
                let tensor = swapped.store.tensor_mut(k);
                let cols = tensor.shape()[1];
                let data = tensor.data_mut();
                for r in 0..w {
                    for c in 0..cols {
                        data.swap((a * w + r) * cols + c, (b * w + r) * cols + c);
                    }
                }
            }
        }
        let after = run(&swapped, &swapped_streams);
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn grouped_specs_reject_bidirectional() {
        let mut spec = ModelSpec::new(Arch::Standard, TaskHeads::Multitask, 3, 1);
        spec.bidirectional = true;
        assert!(RnnModel::new(spec, InputLayout::Dense { dims: 4 }).is_err());

        let mut spec = ModelSpec::new(Arch::Standard, TaskHeads::Single(Task::Decomp), 3, 1);
        spec.bidirectional = true;
        spec.deep_supervision = true;
        assert!(ModelSpec::validate(&spec).is_err());

        // Target replication on a fixed window is not grouping.
        let mut spec = ModelSpec::new(Arch::Standard, TaskHeads::Single(Task::Ihm), 3, 1);
        spec.bidirectional = true;
        spec.deep_supervision = true;
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ModelSpec::new(Arch::Channelwise, TaskHeads::Multitask, 5, 21);
        spec.channel_units = 3;
        spec.layers = 2;
        spec.dropout = 0.3;
        spec.deep_supervision = true;
        spec.raw_los = true;
        let vars = VariableSet::builtin();
        let model = RnnModel::new(spec, InputLayout::streams(vars)).unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = RnnModel::load(&path).unwrap();
        assert_eq!(loaded.spec, model.spec);
        assert_eq!(loaded.layout, model.layout);
        assert_eq!(loaded.store.flat(), model.store.flat());
        assert_eq!(loaded.store.names(), model.store.names());
    }

    #[test]
    fn mismatched_input_is_rejected() {
        let model = RnnModel::new(
            single_spec(Task::Ihm, 3),
            InputLayout::Dense { dims: 4 },
        )
        .unwrap();
        let mut tape = Tape::new();
        let bad = dense_input(3, 2, 5);
        assert!(model
            .forward(&mut tape, &ModelInput::Dense(&bad), false, 0)
            .is_err());
        let streams = vec![Tensor::zeros(&[3, 1, 2]); 4];
        assert!(model
            .forward(&mut tape, &ModelInput::Streams(&streams), false, 0)
            .is_err());
    }
}
