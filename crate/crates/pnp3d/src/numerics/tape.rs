//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`GradTape`] records every primitive applied during a forward pass
//! together with whatever the primitive needs for its backward rule.
//! [`GradTape::backward`] then replays the record in exact reverse order,
//! accumulating gradients into every node; leaves that never influence the
//! seeded output simply keep a zero gradient.
//!
//! The tape is deliberately minimal: it carries exactly the primitives the
//! feature-refinement block and the toy classifier need, nothing more.
//! Every op also charges its cost to a running multiply-add counter (see
//! [`cost`]), which is what the complexity report instruments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::batch_norm::{BatchNormState, BatchStats, BnMode};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a tape. Only meaningful for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Reduction flavor used by [`GradTape::pool`] and by the global
/// descriptor pooling choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Avg,
}

/// Elementwise rule combining a per-point response with a per-channel
/// response into one bilinear map entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineRule {
    Sum,
    Product,
    GrandMean,
    QuadraticMean,
    HarmonicMean,
    GeometricMean,
}

impl CombineRule {
    pub const ALL: [CombineRule; 6] = [
        CombineRule::Sum,
        CombineRule::Product,
        CombineRule::GrandMean,
        CombineRule::QuadraticMean,
        CombineRule::HarmonicMean,
        CombineRule::GeometricMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CombineRule::Sum => "sum",
            CombineRule::Product => "product",
            CombineRule::GrandMean => "grand_mean",
            CombineRule::QuadraticMean => "quadratic_mean",
            CombineRule::HarmonicMean => "harmonic_mean",
            CombineRule::GeometricMean => "geometric_mean",
        }
    }

    /// Square-root based rules reject negative inputs instead of producing
    /// NaN; a negative value here means an upstream rectifier was bypassed.
    fn requires_non_negative(self) -> bool {
        matches!(self, CombineRule::GeometricMean | CombineRule::HarmonicMean)
    }
}

/// Denominator guard for the harmonic rule and the geometric rule's
/// backward; forward values move by well under this amount.
pub const COMBINE_EPS: f64 = 1e-12;

/// Multiply-add cost model shared by the instrumented tape and the
/// closed-form complexity accounting. Matrix products charge M*K*P;
/// everything else charges a fixed cost per element touched.
pub mod cost {
    /// relu and mish.
    pub const ACTIVATION_PER_ELEM: u64 = 1;
    /// normalize + affine, per element.
    pub const BATCH_NORM_PER_ELEM: u64 = 2;
    /// per input element of the reduced tensor.
    pub const POOL_PER_INPUT_ELEM: u64 = 1;
    /// add / sub / mul / broadcast-add, per output element.
    pub const ELEMWISE_PER_ELEM: u64 = 1;
    /// one subtraction per copied edge component when gathering graphs.
    pub const EDGE_DIFF_PER_COMPONENT: u64 = 1;
    /// one combine evaluation per bilinear map entry.
    pub const BILINEAR_PER_ELEM: u64 = 1;
    /// stabilized softmax + log, per logit.
    pub const CROSS_ENTROPY_PER_LOGIT: u64 = 3;
}

/// What batch norm saved during forward for its backward rule.
#[derive(Debug)]
struct BnSaved {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    training: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        lhs: TensorId,
        rhs: TensorId,
    },
    Relu {
        input: TensorId,
    },
    Mish {
        input: TensorId,
    },
    BatchNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        saved: BnSaved,
    },
    Pool {
        input: TensorId,
        axis: usize,
        mode: PoolMode,
        /// For max: winning index along the axis, per output element.
        argmax: Vec<usize>,
    },
    ConcatLast {
        lhs: TensorId,
        rhs: TensorId,
    },
    Add {
        lhs: TensorId,
        rhs: TensorId,
    },
    Sub {
        lhs: TensorId,
        rhs: TensorId,
    },
    Mul {
        lhs: TensorId,
        rhs: TensorId,
    },
    AddRows {
        input: TensorId,
        bias: TensorId,
    },
    Reshape {
        input: TensorId,
    },
    EdgeConcat {
        input: TensorId,
        indices: Vec<usize>,
        k: usize,
    },
    Bilinear {
        points: TensorId,
        channels: TensorId,
        rule: CombineRule,
    },
    CrossEntropy {
        logits: TensorId,
        target: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward pass and replays it backward.
///
/// One tape serves one forward pass; independent tapes are safe to run on
/// separate threads.
pub struct GradTape {
    nodes: Vec<Node>,
    flops: u64,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> GradTape {
        GradTape {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    /// Registers an input or parameter as a differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Multiply-adds charged by every primitive recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    fn val(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// `a[M x K] * b[K x P] -> [M x P]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k, p) = {
            let ta = self.val(a);
            let tb = self.val(b);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::Shape(format!(
                    "matmul needs [M x K] * [K x P], got {:?} * {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            (ta.shape()[0], ta.shape()[1], tb.shape()[1])
        };
        let out = matmul_raw(
            self.val(a).data(),
            self.val(b).data(),
            m,
            k,
            p,
        );
        self.flops += (m * k * p) as u64;
        Ok(self.push(
            Tensor::new(vec![m, p], out).expect("matmul output shape"),
            Op::MatMul { lhs: a, rhs: b },
        ))
    }

    /// Elementwise max(x, 0).
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out = {
            let t = self.val(x);
            Tensor::from_fn(t.shape(), |i| t.data()[i].max(0.0))
        };
        self.flops += self.val(x).numel() as u64 * cost::ACTIVATION_PER_ELEM;
        self.push(out, Op::Relu { input: x })
    }

    /// Elementwise x * tanh(softplus(x)).
    pub fn mish(&mut self, x: TensorId) -> TensorId {
        let out = {
            let t = self.val(x);
            Tensor::from_fn(t.shape(), |i| mish_value(t.data()[i]))
        };
        self.flops += self.val(x).numel() as u64 * cost::ACTIVATION_PER_ELEM;
        self.push(out, Op::Mish { input: x })
    }

    /// Normalizes a `[rows x channels]` tensor per channel.
    ///
    /// Training mode standardizes with the batch statistics of `x` and
    /// returns them so the caller can fold them into `state` (the tape never
    /// mutates the state itself); eval mode applies the frozen running
    /// statistics and returns `None`.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        state: &BatchNormState,
    ) -> Result<(TensorId, Option<BatchStats>)> {
        let (rows, channels) = {
            let t = self.val(x);
            if t.rank() != 2 {
                return Err(Error::Shape(format!(
                    "batch_norm expects [rows x channels], got {:?}",
                    t.shape()
                )));
            }
            (t.shape()[0], t.shape()[1])
        };
        if rows == 0 {
            return Err(Error::Shape("batch_norm over an empty batch".into()));
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.val(id).shape() != [channels] {
                return Err(Error::Shape(format!(
                    "batch_norm {name} must have shape [{channels}], got {:?}",
                    self.val(id).shape()
                )));
            }
        }

        let data = self.val(x).data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match state.mode {
            BnMode::Training => {
                let mut mean = vec![0.0; channels];
                for r in 0..rows {
                    for c in 0..channels {
                        mean[c] += data[r * channels + c];
                    }
                }
                for m in &mut mean {
                    *m /= rows as f64;
                }
                let mut var = vec![0.0; channels];
                for r in 0..rows {
                    for c in 0..channels {
                        let d = data[r * channels + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                for v in &mut var {
                    *v /= rows as f64;
                }
                (mean, var)
            }
            BnMode::Eval => (
                state.running_mean.data().to_vec(),
                state.running_var.data().to_vec(),
            ),
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();
        let mut normalized = vec![0.0; rows * channels];
        let mut out = vec![0.0; rows * channels];
        let g = self.val(gamma).data();
        let b = self.val(beta).data();
        for r in 0..rows {
            for c in 0..channels {
                let idx = r * channels + c;
                let xh = (data[idx] - mean[c]) * inv_std[c];
                normalized[idx] = xh;
                out[idx] = g[c] * xh + b[c];
            }
        }

        self.flops += (rows * channels) as u64 * cost::BATCH_NORM_PER_ELEM;
        let stats = match state.mode {
            BnMode::Training => Some(BatchStats { mean, var }),
            BnMode::Eval => None,
        };
        let id = self.push(
            Tensor::new(vec![rows, channels], out).expect("batch_norm output shape"),
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                saved: BnSaved {
                    normalized,
                    inv_std,
                    training: state.mode == BnMode::Training,
                },
            },
        );
        Ok((id, stats))
    }

    /// Reduces `axis` away. Max routes gradient to the first (lowest index
    /// along the axis) maximal element; avg spreads it uniformly.
    pub fn pool(&mut self, x: TensorId, axis: usize, mode: PoolMode) -> Result<TensorId> {
        let shape = self.val(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "pool axis {axis} out of range for shape {shape:?}"
            )));
        }
        let axis_len = shape[axis];
        if axis_len == 0 {
            return Err(Error::Shape(format!(
                "cannot pool over empty axis {axis} of shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);

        let data = self.val(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Max => {
                argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = data[o * axis_len * inner + i];
                        let mut best_j = 0;
                        for j in 1..axis_len {
                            let v = data[(o * axis_len + j) * inner + i];
                            if v > best {
                                best = v;
                                best_j = j;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = best_j;
                    }
                }
            }
            PoolMode::Avg => {
                for o in 0..outer {
                    for i in 0..inner {
                        let mut acc = 0.0;
                        for j in 0..axis_len {
                            acc += data[(o * axis_len + j) * inner + i];
                        }
                        out[o * inner + i] = acc / axis_len as f64;
                    }
                }
            }
        }

        self.flops += (outer * axis_len * inner) as u64 * cost::POOL_PER_INPUT_ELEM;
        Ok(self.push(
            Tensor::new(out_shape, out).expect("pool output shape"),
            Op::Pool {
                input: x,
                axis,
                mode,
                argmax,
            },
        ))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        if sa.len() != sb.len()
            || sa.is_empty()
            || sa[..sa.len() - 1] != sb[..sb.len() - 1]
        {
            return Err(Error::Shape(format!(
                "concat_last needs matching leading axes, got {sa:?} and {sb:?}"
            )));
        }
        let last_a = sa[sa.len() - 1];
        let last_b = sb[sb.len() - 1];
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let da = self.val(a).data();
        let db = self.val(b).data();
        let mut out = Vec::with_capacity(rows * (last_a + last_b));
        for r in 0..rows {
            out.extend_from_slice(&da[r * last_a..(r + 1) * last_a]);
            out.extend_from_slice(&db[r * last_b..(r + 1) * last_b]);
        }
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = last_a + last_b;
        Ok(self.push(
            Tensor::new(out_shape, out).expect("concat output shape"),
            Op::ConcatLast { lhs: a, rhs: b },
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, |a, b| Op::Add { lhs: a, rhs: b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { lhs: a, rhs: b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { lhs: a, rhs: b })
    }

    fn zip_elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::Shape(format!(
                "{what} needs identical shapes, got {:?} and {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        let out = {
            let (ta, tb) = (self.val(a), self.val(b));
            Tensor::from_fn(ta.shape(), |i| f(ta.data()[i], tb.data()[i]))
        };
        self.flops += out.numel() as u64 * cost::ELEMWISE_PER_ELEM;
        Ok(self.push(out, op(a, b)))
    }

    /// `x[rows x d] + bias[d]`, broadcasting the bias over rows.
    pub fn add_rows(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, d) = {
            let t = self.val(x);
            if t.rank() != 2 {
                return Err(Error::Shape(format!(
                    "add_rows expects a rank-2 input, got {:?}",
                    t.shape()
                )));
            }
            (t.shape()[0], t.shape()[1])
        };
        if self.val(bias).shape() != [d] {
            return Err(Error::Shape(format!(
                "add_rows bias must have shape [{d}], got {:?}",
                self.val(bias).shape()
            )));
        }
        let out = {
            let t = self.val(x);
            let b = self.val(bias);
            Tensor::from_fn(t.shape(), |i| t.data()[i] + b.data()[i % d])
        };
        self.flops += (rows * d) as u64 * cost::ELEMWISE_PER_ELEM;
        Ok(self.push(out, Op::AddRows { input: x, bias }))
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, x: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let t = self.val(x);
        if new_shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} values) into {:?}",
                t.shape(),
                t.numel(),
                new_shape
            )));
        }
        let out = Tensor::new(new_shape, t.data().to_vec()).expect("reshape");
        Ok(self.push(out, Op::Reshape { input: x }))
    }

    /// Gathers `[x_i ; x_{n(i,j)} - x_i]` for every query row i and each of
    /// its k neighbors, producing `[n x k x 2c]` from `[n x c]`.
    ///
    /// `indices` holds n*k neighbor row numbers; a slot pointing back at its
    /// own query row yields a zero edge half. Backward scatters edge
    /// gradients to both endpoints.
    pub fn edge_concat(&mut self, x: TensorId, indices: &[usize], k: usize) -> Result<TensorId> {
        let (n, c) = {
            let t = self.val(x);
            if t.rank() != 2 {
                return Err(Error::Shape(format!(
                    "edge_concat expects [n x c] features, got {:?}",
                    t.shape()
                )));
            }
            (t.shape()[0], t.shape()[1])
        };
        if indices.len() != n * k {
            return Err(Error::Integrity(format!(
                "neighbor table has {} entries, expected {} ({} rows x k={})",
                indices.len(),
                n * k,
                n,
                k
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::Integrity(format!(
                "neighbor index {bad} out of range for {n} points"
            )));
        }
        let data = self.val(x).data();
        let mut out = vec![0.0; n * k * 2 * c];
        for i in 0..n {
            let center = &data[i * c..(i + 1) * c];
            for j in 0..k {
                let nbr = indices[i * k + j];
                let neighbor = &data[nbr * c..(nbr + 1) * c];
                let slot = &mut out[(i * k + j) * 2 * c..(i * k + j + 1) * 2 * c];
                slot[..c].copy_from_slice(center);
                for t in 0..c {
                    slot[c + t] = neighbor[t] - center[t];
                }
            }
        }
        self.flops += (n * k * c) as u64 * cost::EDGE_DIFF_PER_COMPONENT;
        Ok(self.push(
            Tensor::new(vec![n, k, 2 * c], out).expect("edge_concat output shape"),
            Op::EdgeConcat {
                input: x,
                indices: indices.to_vec(),
                k,
            },
        ))
    }

    /// Outer combination of a per-point vector `[n]` with a per-channel
    /// vector `[m]` into `[n x m]`, entry (i, j) = rule(points_i, channels_j).
    pub fn bilinear(
        &mut self,
        points: TensorId,
        channels: TensorId,
        rule: CombineRule,
    ) -> Result<TensorId> {
        let (n, m) = {
            let (tp, tc) = (self.val(points), self.val(channels));
            if tp.rank() != 1 || tc.rank() != 1 {
                return Err(Error::Shape(format!(
                    "bilinear expects two vectors, got {:?} and {:?}",
                    tp.shape(),
                    tc.shape()
                )));
            }
            (tp.numel(), tc.numel())
        };
        if rule.requires_non_negative() {
            for (name, id) in [("point", points), ("channel", channels)] {
                if let Some(v) = self.val(id).data().iter().find(|v| **v < 0.0) {
                    return Err(Error::Domain(format!(
                        "{} rule needs non-negative inputs, {name} descriptor holds {v}",
                        rule.name()
                    )));
                }
            }
        }
        let out = {
            let lam = self.val(points).data();
            let mu = self.val(channels).data();
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    out[i * m + j] = combine_value(rule, lam[i], mu[j]);
                }
            }
            out
        };
        self.flops += (n * m) as u64 * cost::BILINEAR_PER_ELEM;
        Ok(self.push(
            Tensor::new(vec![n, m], out).expect("bilinear output shape"),
            Op::Bilinear {
                points,
                channels,
                rule,
            },
        ))
    }

    /// Stabilized softmax cross-entropy of a logit vector against one
    /// target class; output is a scalar.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let z: Vec<f64> = {
            let t = self.val(logits);
            let flat_ok = t.rank() == 1 || (t.rank() == 2 && t.shape()[0] == 1);
            if !flat_ok {
                return Err(Error::Shape(format!(
                    "cross_entropy expects a logit vector, got {:?}",
                    t.shape()
                )));
            }
            t.data().to_vec()
        };
        if target >= z.len() {
            return Err(Error::Param(format!(
                "target class {target} out of range for {} logits",
                z.len()
            )));
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        let loss = max + sum.ln() - z[target];
        let probs: Vec<f64> = z.iter().map(|&v| (v - max).exp() / sum).collect();
        self.flops += z.len() as u64 * cost::CROSS_ENTROPY_PER_LOGIT;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Propagates `seed` (shaped like the `output` value) backward through
    /// the tape, returning a gradient for every node.
    pub fn backward(&self, output: TensorId, seed: Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "backward from id {} but the tape holds {} nodes",
                output.0,
                self.nodes.len()
            )));
        }
        if seed.shape() != self.nodes[output.0].value.shape() {
            return Err(Error::Shape(format!(
                "backward seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.nodes[output.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_step(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }

    fn backward_step(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut accum = |id: TensorId, grad: Tensor| {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&grad),
                slot @ None => *slot = Some(grad),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { lhs, rhs } => {
                let a = self.val(*lhs);
                let b = self.val(*rhs);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let p = b.shape()[1];
                // dA = dY * B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..p {
                        let g = dy.data()[i * p + j];
                        if g != 0.0 {
                            for t in 0..k {
                                da[i * k + t] += g * b.data()[t * p + j];
                            }
                        }
                    }
                }
                // dB = A^T * dY
                let mut db = vec![0.0; k * p];
                for i in 0..m {
                    for t in 0..k {
                        let av = a.data()[i * k + t];
                        if av != 0.0 {
                            for j in 0..p {
                                db[t * p + j] += av * dy.data()[i * p + j];
                            }
                        }
                    }
                }
                accum(*lhs, Tensor::new(vec![m, k], da).unwrap());
                accum(*rhs, Tensor::new(vec![k, p], db).unwrap());
            }
            Op::Relu { input } => {
                let x = self.val(*input);
                let g = Tensor::from_fn(x.shape(), |i| {
                    if x.data()[i] > 0.0 {
                        dy.data()[i]
                    } else {
                        0.0
                    }
                });
                accum(*input, g);
            }
            Op::Mish { input } => {
                let x = self.val(*input);
                let g = Tensor::from_fn(x.shape(), |i| dy.data()[i] * mish_derivative(x.data()[i]));
                accum(*input, g);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let x = self.val(*input);
                let rows = x.shape()[0];
                let channels = x.shape()[1];
                let g = self.val(*gamma).data();

                let mut d_beta = vec![0.0; channels];
                let mut d_gamma = vec![0.0; channels];
                for r in 0..rows {
                    for c in 0..channels {
                        let i = r * channels + c;
                        d_beta[c] += dy.data()[i];
                        d_gamma[c] += dy.data()[i] * saved.normalized[i];
                    }
                }

                let mut dx = vec![0.0; rows * channels];
                if saved.training {
                    // Full gradient including the batch-statistics terms.
                    let rows_f = rows as f64;
                    for r in 0..rows {
                        for c in 0..channels {
                            let i = r * channels + c;
                            dx[i] = g[c] * saved.inv_std[c] / rows_f
                                * (rows_f * dy.data()[i]
                                    - d_beta[c]
                                    - saved.normalized[i] * d_gamma[c]);
                        }
                    }
                } else {
                    // Frozen statistics: a plain per-channel affine map.
                    for r in 0..rows {
                        for c in 0..channels {
                            let i = r * channels + c;
                            dx[i] = dy.data()[i] * g[c] * saved.inv_std[c];
                        }
                    }
                }
                accum(*input, Tensor::new(vec![rows, channels], dx).unwrap());
                accum(*gamma, Tensor::new(vec![channels], d_gamma).unwrap());
                accum(*beta, Tensor::new(vec![channels], d_beta).unwrap());
            }
            Op::Pool {
                input,
                axis,
                mode,
                argmax,
            } => {
                let shape = self.val(*input).shape();
                let axis_len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut dx = vec![0.0; outer * axis_len * inner];
                match mode {
                    PoolMode::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let j = argmax[o * inner + i];
                                dx[(o * axis_len + j) * inner + i] = dy.data()[o * inner + i];
                            }
                        }
                    }
                    PoolMode::Avg => {
                        let w = 1.0 / axis_len as f64;
                        for o in 0..outer {
                            for i in 0..inner {
                                let g = dy.data()[o * inner + i] * w;
                                for j in 0..axis_len {
                                    dx[(o * axis_len + j) * inner + i] = g;
                                }
                            }
                        }
                    }
                }
                accum(*input, Tensor::new(shape.to_vec(), dx).unwrap());
            }
            Op::ConcatLast { lhs, rhs } => {
                let sa = self.val(*lhs).shape().to_vec();
                let sb = self.val(*rhs).shape().to_vec();
                let la = sa[sa.len() - 1];
                let lb = sb[sb.len() - 1];
                let rows: usize = sa[..sa.len() - 1].iter().product();
                let mut da = vec![0.0; rows * la];
                let mut db = vec![0.0; rows * lb];
                for r in 0..rows {
                    let row = &dy.data()[r * (la + lb)..(r + 1) * (la + lb)];
                    da[r * la..(r + 1) * la].copy_from_slice(&row[..la]);
                    db[r * lb..(r + 1) * lb].copy_from_slice(&row[la..]);
                }
                accum(*lhs, Tensor::new(sa, da).unwrap());
                accum(*rhs, Tensor::new(sb, db).unwrap());
            }
            Op::Add { lhs, rhs } => {
                accum(*lhs, dy.clone());
                accum(*rhs, dy.clone());
            }
            Op::Sub { lhs, rhs } => {
                accum(*lhs, dy.clone());
                let mut neg = dy.clone();
                neg.scale(-1.0);
                accum(*rhs, neg);
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (self.val(*lhs), self.val(*rhs));
                accum(
                    *lhs,
                    Tensor::from_fn(a.shape(), |i| dy.data()[i] * b.data()[i]),
                );
                accum(
                    *rhs,
                    Tensor::from_fn(b.shape(), |i| dy.data()[i] * a.data()[i]),
                );
            }
            Op::AddRows { input, bias } => {
                let d = self.val(*bias).numel();
                let rows = self.val(*input).shape()[0];
                let mut db = vec![0.0; d];
                for r in 0..rows {
                    for c in 0..d {
                        db[c] += dy.data()[r * d + c];
                    }
                }
                accum(*input, dy.clone());
                accum(*bias, Tensor::new(vec![d], db).unwrap());
            }
            Op::Reshape { input } => {
                let shape = self.val(*input).shape().to_vec();
                accum(
                    *input,
                    Tensor::new(shape, dy.data().to_vec()).unwrap(),
                );
            }
            Op::EdgeConcat { input, indices, k } => {
                let x = self.val(*input);
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..*k {
                        let nbr = indices[i * k + j];
                        let slot = &dy.data()[(i * k + j) * 2 * c..(i * k + j + 1) * 2 * c];
                        for t in 0..c {
                            // center copy half, then edge half: +nbr, -center
                            dx[i * c + t] += slot[t] - slot[c + t];
                            dx[nbr * c + t] += slot[c + t];
                        }
                    }
                }
                accum(*input, Tensor::new(vec![n, c], dx).unwrap());
            }
            Op::Bilinear {
                points,
                channels,
                rule,
            } => {
                let lam = self.val(*points).data();
                let mu = self.val(*channels).data();
                let (n, m) = (lam.len(), mu.len());
                let mut dl = vec![0.0; n];
                let mut dm = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let g = dy.data()[i * m + j];
                        if g == 0.0 {
                            continue;
                        }
                        let (gl, gm) = combine_partials(*rule, lam[i], mu[j]);
                        dl[i] += g * gl;
                        dm[j] += g * gm;
                    }
                }
                accum(*points, Tensor::new(vec![n], dl).unwrap());
                accum(*channels, Tensor::new(vec![m], dm).unwrap());
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let shape = self.val(*logits).shape().to_vec();
                let g = dy.data()[0];
                let dz: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| g * (p - if i == *target { 1.0 } else { 0.0 }))
                    .collect();
                accum(*logits, Tensor::new(shape, dz).unwrap());
            }
        }
    }
}

/// Gradients per tape node, queried by the ids minted during forward.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`; zero tensor if the node never influenced the
    /// seeded output.
    pub fn get(&self, id: TensorId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn get_opt(&self, id: TensorId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av != 0.0 {
                let brow = &b[t * p..(t + 1) * p];
                let orow = &mut out[i * p..(i + 1) * p];
                for j in 0..p {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    out
}

/// Softplus with overflow-free branches: x for large x, e^x for very
/// negative x, ln(1 + e^x) otherwise.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn mish_value(x: f64) -> f64 {
    x * softplus(x).tanh()
}

pub fn mish_derivative(x: f64) -> f64 {
    let t = softplus(x).tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}

fn combine_value(rule: CombineRule, lam: f64, mu: f64) -> f64 {
    match rule {
        CombineRule::Sum => lam + mu,
        CombineRule::Product => lam * mu,
        CombineRule::GrandMean => (lam + mu) / 2.0,
        CombineRule::QuadraticMean => (lam * lam + mu * mu).sqrt(),
        CombineRule::HarmonicMean => 2.0 * lam * mu / (lam + mu + COMBINE_EPS),
        CombineRule::GeometricMean => (lam * mu).sqrt(),
    }
}

/// (d/d lam, d/d mu) of the combine rule. Square roots take subgradient 0
/// at zero; the geometric rule stabilizes its denominator with
/// [`COMBINE_EPS`].
fn combine_partials(rule: CombineRule, lam: f64, mu: f64) -> (f64, f64) {
    match rule {
        CombineRule::Sum => (1.0, 1.0),
        CombineRule::Product => (mu, lam),
        CombineRule::GrandMean => (0.5, 0.5),
        CombineRule::QuadraticMean => {
            let q = (lam * lam + mu * mu).sqrt();
            if q == 0.0 {
                (0.0, 0.0)
            } else {
                (lam / q, mu / q)
            }
        }
        CombineRule::HarmonicMean => {
            let d = lam + mu + COMBINE_EPS;
            (
                2.0 * mu / d - 2.0 * lam * mu / (d * d),
                2.0 * lam / d - 2.0 * lam * mu / (d * d),
            )
        }
        CombineRule::GeometricMean => {
            // subgradient 0 wherever the response itself is 0
            if lam * mu == 0.0 {
                return (0.0, 0.0);
            }
            let denom = 2.0 * (lam * mu + COMBINE_EPS).sqrt();
            (mu / denom, lam / denom)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_scalar_fn, finite_difference, relative_error, FD_STEP};
    use crate::rng::Rng;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = GradTape::new();
        let a = tape.var(tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.var(tensor(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = GradTape::new();
        let a = tape.var(tensor(&[1, 2], &[1.0, 2.0]));
        let b = tape.var(tensor(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = GradTape::new();
        let a = tape.var(Tensor::zeros(&[2, 3]));
        let b = tape.var(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = Rng::new(101);
        let a0 = Tensor::random_uniform(&[5, 4], -2.0, 2.0, &mut rng);
        let b0 = Tensor::random_uniform(&[4, 3], -2.0, 2.0, &mut rng);
        let w = Tensor::random_uniform(&[5, 3], -1.0, 1.0, &mut rng);

        let loss_for = |a: &Tensor, b: &Tensor| {
            let mut tape = GradTape::new();
            let ia = tape.var(a.clone());
            let ib = tape.var(b.clone());
            let out = tape.matmul(ia, ib).unwrap();
            tape.value(out)
                .data()
                .iter()
                .zip(w.data())
                .map(|(o, wi)| o * wi)
                .sum::<f64>()
        };

        let mut tape = GradTape::new();
        let ia = tape.var(a0.clone());
        let ib = tape.var(b0.clone());
        let out = tape.matmul(ia, ib).unwrap();
        let grads = tape.backward(out, w.clone()).unwrap();

        let fd_a = finite_difference(|a| loss_for(a, &b0), &a0, FD_STEP);
        let fd_b = finite_difference(|b| loss_for(&a0, b), &b0, FD_STEP);
        assert!(relative_error(&grads.get(ia), &fd_a) < 1e-6);
        assert!(relative_error(&grads.get(ib), &fd_b) < 1e-6);
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = GradTape::new();
        let x = tape.var(tensor(&[4], &[-2.0, 3.0, -1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0, 0.0, 2.0]);
        let grads = tape
            .backward(y, Tensor::filled(&[4], 1.0))
            .unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn mish_reference_values() {
        assert_eq!(mish_value(0.0), 0.0);
        // 1 * tanh(ln(1 + e)) evaluated in f64.
        let expected = 1.0_f64 * (1.0_f64 + 1.0_f64.exp()).ln().tanh();
        assert!((mish_value(1.0) - expected).abs() < 1e-15);
        assert!((mish_value(1.0) - 0.865098).abs() < 1e-6);
        // Stable branches stay finite and smooth.
        assert!(mish_value(50.0).is_finite());
        assert!((mish_value(50.0) - 50.0).abs() < 1e-9);
        assert!(mish_value(-50.0).abs() < 1e-9);
    }

    #[test]
    fn mish_gradient_matches_finite_difference() {
        for &x in &[0.5, -1.0, 2.3, -3.7, 0.0, 19.9, -19.9, 25.0] {
            let h = 1e-6;
            let fd = (mish_value(x + h) - mish_value(x - h)) / (2.0 * h);
            assert!(
                (mish_derivative(x) - fd).abs() < 1e-8,
                "x={x}: analytic {} vs fd {fd}",
                mish_derivative(x)
            );
        }
    }

    #[test]
    fn batch_norm_eval_identity() {
        let mut bn = BatchNormState::new(2);
        bn.mode = BnMode::Eval;
        bn.eps = 0.0;
        let mut tape = GradTape::new();
        let x = tape.var(tensor(&[3, 2], &[1.0, -2.0, 0.5, 4.0, -1.0, 0.0]));
        let g = tape.var(bn.gamma.clone());
        let b = tape.var(bn.beta.clone());
        let (y, stats) = tape.batch_norm(x, g, b, &bn).unwrap();
        assert!(stats.is_none());
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn batch_norm_training_standardizes_two_points() {
        let mut bn = BatchNormState::new(1);
        bn.eps = 0.0;
        let mut tape = GradTape::new();
        let x = tape.var(tensor(&[2, 1], &[2.0, 4.0]));
        let g = tape.var(bn.gamma.clone());
        let b = tape.var(bn.beta.clone());
        let (y, stats) = tape.batch_norm(x, g, b, &bn).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![3.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn batch_norm_zero_variance_is_finite() {
        let bn = BatchNormState::new(1);
        let mut tape = GradTape::new();
        let x = tape.var(tensor(&[3, 1], &[5.0, 5.0, 5.0]));
        let g = tape.var(bn.gamma.clone());
        let b = tape.var(bn.beta.clone());
        let (y, _) = tape.batch_norm(x, g, b, &bn).unwrap();
        assert!(tape.value(y).all_finite());
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences_both_modes() {
        let mut rng = Rng::new(7);
        for mode in [BnMode::Training, BnMode::Eval] {
            let mut bn = BatchNormState::new(4);
            bn.mode = mode;
            bn.gamma = Tensor::random_uniform(&[4], 0.5, 1.5, &mut rng);
            bn.beta = Tensor::random_uniform(&[4], -0.5, 0.5, &mut rng);
            bn.running_mean = Tensor::random_uniform(&[4], -0.5, 0.5, &mut rng);
            bn.running_var = Tensor::random_uniform(&[4], 0.5, 1.5, &mut rng);
            let x0 = Tensor::random_uniform(&[8, 4], -2.0, 2.0, &mut rng);
            let w = Tensor::random_uniform(&[8, 4], -1.0, 1.0, &mut rng);

            let loss_for = |x: &Tensor, gamma: &Tensor, beta: &Tensor| {
                let mut tape = GradTape::new();
                let ix = tape.var(x.clone());
                let ig = tape.var(gamma.clone());
                let ib = tape.var(beta.clone());
                let (y, _) = tape.batch_norm(ix, ig, ib, &bn).unwrap();
                tape.value(y)
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };

            let mut tape = GradTape::new();
            let ix = tape.var(x0.clone());
            let ig = tape.var(bn.gamma.clone());
            let ib = tape.var(bn.beta.clone());
            let (y, _) = tape.batch_norm(ix, ig, ib, &bn).unwrap();
            let grads = tape.backward(y, w.clone()).unwrap();

            let fd_x = finite_difference(|x| loss_for(x, &bn.gamma, &bn.beta), &x0, FD_STEP);
            let fd_g = finite_difference(|g| loss_for(&x0, g, &bn.beta), &bn.gamma, FD_STEP);
            let fd_b = finite_difference(|b| loss_for(&x0, &bn.gamma, b), &bn.beta, FD_STEP);
            assert!(
                relative_error(&grads.get(ix), &fd_x) < 1e-5,
                "{mode:?} input gradient"
            );
            assert!(relative_error(&grads.get(ig), &fd_g) < 1e-5);
            assert!(relative_error(&grads.get(ib), &fd_b) < 1e-5);
        }
    }

    #[test]
    fn pool_max_and_avg_values() {
        let mut tape = GradTape::new();
        let x = tape.var(tensor(&[3], &[1.0, 5.0, 3.0]));
        let mx = tape.pool(x, 0, PoolMode::Max).unwrap();
        let av = tape.pool(x, 0, PoolMode::Avg).unwrap();
        assert_eq!(tape.value(mx).data(), &[5.0]);
        assert_eq!(tape.value(av).data(), &[3.0]);
        assert_eq!(tape.value(mx).shape(), &[] as &[usize]);
    }

    #[test]
    fn pool_max_tie_routes_to_lowest_index() {
        let mut tape = GradTape::new();
        let x = tape.var(tensor(&[2], &[2.0, 2.0]));
        let y = tape.pool(x, 0, PoolMode::Max).unwrap();
        let grads = tape.backward(y, Tensor::new(vec![], vec![1.0]).unwrap()).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 0.0]);
    }

    #[test]
    fn pool_empty_axis_is_an_error() {
        let mut tape = GradTape::new();
        let x = tape.var(Tensor::zeros(&[4, 0, 2]));
        let err = tape.pool(x, 1, PoolMode::Max).unwrap_err();
        assert!(err.to_string().contains("empty axis"), "{err}");
    }

    #[test]
    fn pool_middle_axis_backward_matches_fd() {
        let mut rng = Rng::new(33);
        let x0 = Tensor::random_uniform(&[3, 5, 2], -2.0, 2.0, &mut rng);
        let w = Tensor::random_uniform(&[3, 2], -1.0, 1.0, &mut rng);
        for mode in [PoolMode::Max, PoolMode::Avg] {
            let loss_for = |x: &Tensor| {
                let mut tape = GradTape::new();
                let ix = tape.var(x.clone());
                let y = tape.pool(ix, 1, mode).unwrap();
                tape.value(y)
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let mut tape = GradTape::new();
            let ix = tape.var(x0.clone());
            let y = tape.pool(ix, 1, mode).unwrap();
            let grads = tape.backward(y, w.clone()).unwrap();
            let fd = finite_difference(loss_for, &x0, FD_STEP);
            assert!(relative_error(&grads.get(ix), &fd) < 1e-6, "{mode:?}");
        }
    }

    #[test]
    fn avg_pool_then_center_is_zero_mean() {
        let mut rng = Rng::new(5);
        let x = Tensor::random_uniform(&[6, 4], -3.0, 3.0, &mut rng);
        let mut tape = GradTape::new();
        let ix = tape.var(x.clone());
        let mean = tape.pool(ix, 0, PoolMode::Avg).unwrap();
        let mean = tape.value(mean).data().to_vec();
        for c in 0..4 {
            let column_mean: f64 =
                (0..6).map(|r| x.data()[r * 4 + c] - mean[c]).sum::<f64>() / 6.0;
            assert!(column_mean.abs() < 1e-12);
        }
    }

    #[test]
    fn edge_concat_values_and_self_padding() {
        let mut tape = GradTape::new();
        let f = tape.var(tensor(&[2, 1], &[1.0, 4.0]));
        // point 0 -> neighbor 1; point 1 -> itself (padded)
        let g = tape.edge_concat(f, &[1, 1], 1).unwrap();
        assert_eq!(tape.value(g).shape(), &[2, 1, 2]);
        assert_eq!(tape.value(g).data(), &[1.0, 3.0, 4.0, 0.0]);
    }

    #[test]
    fn edge_concat_rejects_out_of_range_index() {
        let mut tape = GradTape::new();
        let f = tape.var(Tensor::zeros(&[3, 2]));
        let err = tape.edge_concat(f, &[0, 3, 1], 1).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn edge_concat_backward_matches_fd() {
        let mut rng = Rng::new(91);
        let f0 = Tensor::random_uniform(&[8, 4], -2.0, 2.0, &mut rng);
        let indices: Vec<usize> = (0..8 * 3).map(|_| rng.below(8)).collect();
        let w = Tensor::random_uniform(&[8, 3, 8], -1.0, 1.0, &mut rng);

        let loss_for = |f: &Tensor| {
            let mut tape = GradTape::new();
            let fid = tape.var(f.clone());
            let g = tape.edge_concat(fid, &indices, 3).unwrap();
            tape.value(g)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };

        let mut tape = GradTape::new();
        let fid = tape.var(f0.clone());
        let g = tape.edge_concat(fid, &indices, 3).unwrap();
        let grads = tape.backward(g, w.clone()).unwrap();
        let fd = finite_difference(loss_for, &f0, FD_STEP);
        assert!(relative_error(&grads.get(fid), &fd) < 1e-5);
    }

    #[test]
    fn bilinear_trivial_values() {
        let mut tape = GradTape::new();
        let lam = tape.var(tensor(&[1], &[4.0]));
        let mu = tape.var(tensor(&[1], &[9.0]));
        let g = tape.bilinear(lam, mu, CombineRule::GeometricMean).unwrap();
        assert_eq!(tape.value(g).data(), &[6.0]);

        let lam = tape.var(tensor(&[1], &[2.0]));
        let mu = tape.var(tensor(&[1], &[2.0]));
        let h = tape.bilinear(lam, mu, CombineRule::HarmonicMean).unwrap();
        assert!((tape.value(h).data()[0] - 2.0).abs() < 1e-9);

        let zero = tape.var(tensor(&[1], &[0.0]));
        let mu = tape.var(tensor(&[3], &[1.0, 2.0, 3.0]));
        let g = tape.bilinear(zero, mu, CombineRule::GeometricMean).unwrap();
        assert_eq!(tape.value(g).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_rejects_negative_input_for_sqrt_rules() {
        let mut tape = GradTape::new();
        let lam = tape.var(tensor(&[1], &[-0.5]));
        let mu = tape.var(tensor(&[1], &[1.0]));
        for rule in [CombineRule::GeometricMean, CombineRule::HarmonicMean] {
            let err = tape.bilinear(lam, mu, rule).unwrap_err();
            assert!(matches!(err, Error::Domain(_)), "{rule:?}: {err}");
        }
        // Other rules accept signed inputs.
        assert!(tape.bilinear(lam, mu, CombineRule::Sum).is_ok());
    }

    #[test]
    fn bilinear_all_rules_match_scripted_oracle() {
        let mut rng = Rng::new(55);
        let lam: Vec<f64> = (0..5).map(|_| rng.uniform(0.0, 3.0)).collect();
        let mu: Vec<f64> = (0..3).map(|_| rng.uniform(0.0, 3.0)).collect();
        for rule in CombineRule::ALL {
            let mut tape = GradTape::new();
            let il = tape.var(tensor(&[5], &lam));
            let im = tape.var(tensor(&[3], &mu));
            let g = tape.bilinear(il, im, rule).unwrap();
            for i in 0..5 {
                for j in 0..3 {
                    // Independent elementwise evaluation of each rule.
                    let (l, m) = (lam[i], mu[j]);
                    let expect = match rule {
                        CombineRule::Sum => l + m,
                        CombineRule::Product => l * m,
                        CombineRule::GrandMean => (l + m) / 2.0,
                        CombineRule::QuadraticMean => (l * l + m * m).sqrt(),
                        CombineRule::HarmonicMean => 2.0 * l * m / (l + m + 1e-12),
                        CombineRule::GeometricMean => (l * m).sqrt(),
                    };
                    let got = tape.value(g).data()[i * 3 + j];
                    assert!((got - expect).abs() < 1e-12, "{rule:?} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn bilinear_backward_matches_fd_for_all_rules() {
        let mut rng = Rng::new(77);
        let lam0 = Tensor::from_fn(&[4], |_| rng.uniform(0.1, 2.0));
        let mu0 = Tensor::from_fn(&[3], |_| rng.uniform(0.1, 2.0));
        let w = Tensor::random_uniform(&[4, 3], -1.0, 1.0, &mut rng);
        for rule in CombineRule::ALL {
            let loss_for = |l: &Tensor, m: &Tensor| {
                let mut tape = GradTape::new();
                let il = tape.var(l.clone());
                let im = tape.var(m.clone());
                let g = tape.bilinear(il, im, rule).unwrap();
                tape.value(g)
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let mut tape = GradTape::new();
            let il = tape.var(lam0.clone());
            let im = tape.var(mu0.clone());
            let g = tape.bilinear(il, im, rule).unwrap();
            let grads = tape.backward(g, w.clone()).unwrap();
            let fd_l = finite_difference(|l| loss_for(l, &mu0), &lam0, FD_STEP);
            let fd_m = finite_difference(|m| loss_for(&lam0, m), &mu0, FD_STEP);
            assert!(relative_error(&grads.get(il), &fd_l) < 1e-6, "{rule:?}");
            assert!(relative_error(&grads.get(im), &fd_m) < 1e-6, "{rule:?}");
        }
    }

    #[test]
    fn geometric_rule_takes_zero_subgradient_at_zero_response() {
        let mut tape = GradTape::new();
        let lam = tape.var(tensor(&[2], &[0.0, 2.0]));
        let mu = tape.var(tensor(&[1], &[3.0]));
        let g = tape.bilinear(lam, mu, CombineRule::GeometricMean).unwrap();
        let grads = tape.backward(g, Tensor::filled(&[2, 1], 1.0)).unwrap();
        let dl = grads.get(lam);
        // the zero-response row contributes nothing, not an epsilon blowup
        assert_eq!(dl.data()[0], 0.0);
        let expected = 3.0 / (2.0 * (6.0_f64 + COMBINE_EPS).sqrt());
        assert!((dl.data()[1] - expected).abs() < 1e-12);
        let dm = grads.get(mu);
        let expected_mu = 2.0 / (2.0 * (6.0_f64 + COMBINE_EPS).sqrt());
        assert!((dm.data()[0] - expected_mu).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_gradient() {
        let mut tape = GradTape::new();
        let z = tape.var(tensor(&[4], &[0.0, 0.0, 0.0, 0.0]));
        let loss = tape.cross_entropy(z, 2).unwrap();
        assert!((tape.value(loss).data()[0] - 4.0_f64.ln()).abs() < 1e-12);
        let grads = tape.backward(loss, Tensor::scalar(1.0)).unwrap();
        let g = grads.get(z);
        for (i, &v) in g.data().iter().enumerate() {
            let expect = 0.25 - if i == 2 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = GradTape::new();
        let a = tape.var(tensor(&[2], &[1.0, 2.0]));
        let b = tape.var(tensor(&[2], &[3.0, 4.0]));
        let y = tape.relu(a);
        let grads = tape.backward(y, Tensor::filled(&[2], 1.0)).unwrap();
        assert_eq!(grads.get(b).data(), &[0.0, 0.0]);
        assert!(grads.get_opt(b).is_none());
    }

    #[test]
    fn backward_rejects_foreign_id() {
        let mut tape = GradTape::new();
        let _ = tape.var(Tensor::scalar(1.0));
        let err = tape.backward(TensorId(5), Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, Error::Tape(_)), "{err}");
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut tape = GradTape::new();
        let a = tape.var(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.var(tensor(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(a, b).unwrap();
        let grads = tape.backward(y, Tensor::zeros(&[2, 2])).unwrap();
        assert!(grads.get(a).data().iter().all(|&v| v == 0.0));
        assert!(grads.get(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composite_gradient_via_helper() {
        // relu(a * b) summed, checked through the one-call helper.
        let mut rng = Rng::new(13);
        let a0 = Tensor::random_uniform(&[3, 3], -2.0, 2.0, &mut rng);
        let b0 = Tensor::random_uniform(&[3, 3], -2.0, 2.0, &mut rng);
        let err = check_scalar_fn(
            &[a0, b0],
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                let y = tape.relu(y);
                let flat = tape.reshape(y, vec![1, 9])?;
                let ones = tape.var(Tensor::filled(&[9, 1], 1.0));
                let s = tape.matmul(flat, ones)?;
                tape.reshape(s, vec![1])
            },
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
