//! Reverse-mode differentiation over a linear operation tape.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Each
//! recorded value is addressed by a [`VarId`] that also carries the identity
//! of its tape, so variables cannot leak between passes. [`Tape::backward`]
//! consumes the tape, replays the operations in reverse, and returns the
//! accumulated [`Gradients`]; a fresh tape is built for the next pass.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::{RngStream, Tensor};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId {
    tape: u64,
    index: u32,
}

/// Train/eval switch for stochastic primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Provenance of a recorded value: the producing primitive, its inputs, and
/// whatever the backward rule needs beyond the stored values.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a[n×k] · b[k×m]`
    Matmul { a: u32, b: u32 },
    /// `a[n×k] · b[m×k]ᵀ`
    MatmulNt { a: u32, b: u32 },
    Transpose { a: u32 },
    Add { a: u32, b: u32 },
    /// `a[n×d] + row[1×d]` broadcast over rows
    AddRow { a: u32, row: u32 },
    /// `a[r×c] + s[1×1]` broadcast everywhere
    AddScalar { a: u32, s: u32 },
    Mul { a: u32, b: u32 },
    /// `a[n×d] ⊙ row[1×d]` broadcast over rows
    MulRow { a: u32, row: u32 },
    /// `a[r×c] · s[1×1]` broadcast everywhere
    MulScalarVar { a: u32, s: u32 },
    Scale { a: u32, c: f64 },
    SliceCols { a: u32, start: usize },
    SliceRows { a: u32, start: usize },
    ConcatCols { parts: Vec<u32> },
    RowSums { a: u32 },
    SumAll { a: u32 },
    MeanAll { a: u32 },
    LeakyRelu { a: u32, slope: f64 },
    Elu { a: u32 },
    Relu { a: u32 },
    /// Row-wise masked softmax; the stored value is the softmax output.
    MaskedSoftmax { a: u32, mask: Vec<bool> },
    LayerNorm {
        x: u32,
        gamma: u32,
        beta: u32,
        /// `(x - μ) / (σ + ε)`, needed by all three backward rules.
        xhat: Tensor,
        /// Per-row population standard deviation σ.
        sigma: Vec<f64>,
        eps: f64,
    },
    /// Multiplicative keep mask: entries are `0` or the survivor scale.
    Dropout { a: u32, keep: Vec<f64> },
    CrossEntropy {
        logits: u32,
        label: usize,
        softmax: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one scalar with respect to every variable of a consumed tape.
pub struct Gradients {
    tape: u64,
    grads: Vec<Tensor>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`.
    pub fn wrt(&self, var: VarId) -> &Tensor {
        assert_eq!(var.tape, self.tape, "variable from a different tape");
        &self.grads[var.index as usize]
    }
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        debug_assert!(value.all_finite(), "non-finite forward value");
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, op });
        VarId {
            tape: self.id,
            index,
        }
    }

    fn own(&self, var: VarId) -> u32 {
        assert_eq!(var.tape, self.id, "variable from a different tape");
        var.index
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    /// Record a value that participates in the forward pass but whose
    /// gradient nobody reads. Identical to [`Tape::leaf`]; the name states
    /// intent at call sites.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value)
    }

    pub fn value(&self, var: VarId) -> &Tensor {
        let i = self.own(var);
        &self.nodes[i as usize].value
    }

    fn shape(&self, i: u32) -> (usize, usize) {
        self.nodes[i as usize].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: u32, b: u32) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// Matrix product `a[n×k] · b[k×m]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (a, b) = (self.own(a), self.own(b));
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{n}x{k} · {k2}x{m}: inner dimensions differ"),
            });
        }
        let mut out = Tensor::zeros(n, m);
        mm_nn(
            self.nodes[a as usize].value.values(),
            self.nodes[b as usize].value.values(),
            out.values_mut(),
            n,
            k,
            m,
        );
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// Matrix product against a transpose: `a[n×k] · b[m×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (a, b) = (self.own(a), self.own(b));
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{n}x{k} · ({m}x{k2})ᵀ: inner dimensions differ"),
            });
        }
        let mut out = Tensor::zeros(n, m);
        mm_nt(
            self.nodes[a as usize].value.values(),
            self.nodes[b as usize].value.values(),
            out.values_mut(),
            n,
            k,
            m,
        );
        Ok(self.push(out, Op::MatmulNt { a, b }))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let a = self.own(a);
        let out = self.nodes[a as usize].value.transpose();
        self.push(out, Op::Transpose { a })
    }

    // ── elementwise and broadcast arithmetic ────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (a, b) = (self.own(a), self.own(b));
        self.same_shape("add", a, b)?;
        let mut out = self.nodes[a as usize].value.clone();
        out.add_scaled(&self.nodes[b as usize].value, 1.0);
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// `a[n×d] + row[1×d]`, the row added to every row of `a`.
    pub fn add_row(&mut self, a: VarId, row: VarId) -> Result<VarId> {
        let (a, row) = (self.own(a), self.own(row));
        let (n, d) = self.shape(a);
        if self.shape(row) != (1, d) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                detail: format!(
                    "{n}x{d} + {:?}: expected a 1x{d} row",
                    self.shape(row)
                ),
            });
        }
        let mut out = self.nodes[a as usize].value.clone();
        let rv = self.nodes[row as usize].value.values().to_vec();
        for r in 0..n {
            for c in 0..d {
                out.values_mut()[r * d + c] += rv[c];
            }
        }
        Ok(self.push(out, Op::AddRow { a, row }))
    }

    /// `a + s` with scalar `s[1×1]` broadcast to every entry.
    pub fn add_scalar(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        let (a, s) = (self.own(a), self.own(s));
        if self.shape(s) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "add_scalar",
                detail: format!("scalar operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.nodes[s as usize].value.item();
        let out = self.nodes[a as usize].value.map(|v| v + sv);
        Ok(self.push(out, Op::AddScalar { a, s }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (a, b) = (self.own(a), self.own(b));
        self.same_shape("mul", a, b)?;
        let bv = &self.nodes[b as usize].value;
        let mut out = self.nodes[a as usize].value.clone();
        for (o, &x) in out.values_mut().iter_mut().zip(bv.values()) {
            *o *= x;
        }
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// `a[n×d] ⊙ row[1×d]`, the row multiplied into every row of `a`.
    pub fn mul_row(&mut self, a: VarId, row: VarId) -> Result<VarId> {
        let (a, row) = (self.own(a), self.own(row));
        let (n, d) = self.shape(a);
        if self.shape(row) != (1, d) {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                detail: format!("{n}x{d} ⊙ {:?}: expected a 1x{d} row", self.shape(row)),
            });
        }
        let mut out = self.nodes[a as usize].value.clone();
        let rv = self.nodes[row as usize].value.values().to_vec();
        for r in 0..n {
            for c in 0..d {
                out.values_mut()[r * d + c] *= rv[c];
            }
        }
        Ok(self.push(out, Op::MulRow { a, row }))
    }

    /// `a · s` with scalar `s[1×1]` broadcast to every entry.
    pub fn mul_scalar_var(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        let (a, s) = (self.own(a), self.own(s));
        if self.shape(s) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_var",
                detail: format!("scalar operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.nodes[s as usize].value.item();
        let out = self.nodes[a as usize].value.map(|v| v * sv);
        Ok(self.push(out, Op::MulScalarVar { a, s }))
    }

    /// Scale by a compile-time constant.
    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let a = self.own(a);
        let out = self.nodes[a as usize].value.map(|v| v * c);
        self.push(out, Op::Scale { a, c })
    }

    // ── shape manipulation ──────────────────────────────────────────

    /// Columns `[start, start+len)` of `a`.
    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let a = self.own(a);
        let (n, d) = self.shape(a);
        assert!(start + len <= d, "slice_cols out of range");
        let src = &self.nodes[a as usize].value;
        let mut out = Tensor::zeros(n, len);
        for r in 0..n {
            out.values_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { a, start })
    }

    /// Rows `[start, start+len)` of `a`.
    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let a = self.own(a);
        let (n, d) = self.shape(a);
        assert!(start + len <= n, "slice_rows out of range");
        let src = &self.nodes[a as usize].value;
        let out = Tensor::new(len, d, src.values()[start * d..(start + len) * d].to_vec());
        self.push(out, Op::SliceRows { a, start })
    }

    /// Horizontal concatenation; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols of zero parts".into()));
        }
        let idx: Vec<u32> = parts.iter().map(|&p| self.own(p)).collect();
        let n = self.shape(idx[0]).0;
        for &p in &idx {
            if self.shape(p).0 != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", n, self.shape(p).0),
                });
            }
        }
        let total: usize = idx.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(n, total);
        let mut at = 0;
        for &p in &idx {
            let d = self.shape(p).1;
            let src = &self.nodes[p as usize].value;
            for r in 0..n {
                out.values_mut()[r * total + at..r * total + at + d].copy_from_slice(src.row(r));
            }
            at += d;
        }
        Ok(self.push(out, Op::ConcatCols { parts: idx }))
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Per-row totals: `[n×d] -> [n×1]`.
    pub fn row_sums(&mut self, a: VarId) -> VarId {
        let a = self.own(a);
        let (n, _) = self.shape(a);
        let src = &self.nodes[a as usize].value;
        let values = (0..n).map(|r| src.row(r).iter().sum()).collect();
        self.push(Tensor::new(n, 1, values), Op::RowSums { a })
    }

    /// Sum of every entry: `-> [1×1]`.
    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let a = self.own(a);
        let total: f64 = self.nodes[a as usize].value.values().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll { a })
    }

    /// Mean of every entry: `-> [1×1]`.
    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let a = self.own(a);
        let v = &self.nodes[a as usize].value;
        let mean = v.values().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(mean), Op::MeanAll { a })
    }

    // ── nonlinearities ──────────────────────────────────────────────

    /// Elementwise `x if x ≥ 0 else slope·x`; the subgradient at 0 is 1.
    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        let a = self.own(a);
        let out = self.nodes[a as usize]
            .value
            .map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { a, slope })
    }

    /// Elementwise ELU with α = 1: `x if x > 0 else exp(x) - 1`.
    pub fn elu(&mut self, a: VarId) -> VarId {
        let a = self.own(a);
        let out = self.nodes[a as usize]
            .value
            .map(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        self.push(out, Op::Elu { a })
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let a = self.own(a);
        let out = self.nodes[a as usize].value.map(|v| v.max(0.0));
        self.push(out, Op::Relu { a })
    }

    // ── structured primitives ───────────────────────────────────────

    /// Row-wise softmax restricted to masked-in entries.
    ///
    /// Masked-out entries are exactly zero in the output; each row's
    /// masked-in entries sum to one. Scores are stabilized by subtracting
    /// the masked row maximum before exponentiation. Every row must have at
    /// least one masked-in entry; `mask` is row-major and must match the
    /// shape of `scores`.
    pub fn masked_softmax(&mut self, scores: VarId, mask: &[bool]) -> Result<VarId> {
        let a = self.own(scores);
        let (n, d) = self.shape(a);
        if mask.len() != n * d {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("mask length {} for a {n}x{d} score matrix", mask.len()),
            });
        }
        let src = &self.nodes[a as usize].value;
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = src.row(r);
            let mrow = &mask[r * d..(r + 1) * d];
            let mut max = f64::NEG_INFINITY;
            for c in 0..d {
                if mrow[c] && row[c] > max {
                    max = row[c];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidInput(format!(
                    "masked_softmax: row {r} has an empty mask"
                )));
            }
            let mut z = 0.0;
            let orow = &mut out.values_mut()[r * d..(r + 1) * d];
            for c in 0..d {
                if mrow[c] {
                    let e = (row[c] - max).exp();
                    orow[c] = e;
                    z += e;
                }
            }
            for c in 0..d {
                if mrow[c] {
                    orow[c] /= z;
                }
            }
        }
        Ok(self.push(
            out,
            Op::MaskedSoftmax {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Row-wise layer normalization: `(x - μ) / (σ + ε) · γ + β`.
    ///
    /// μ and σ are the per-row mean and population standard deviation; ε is
    /// added to σ itself, so a constant row maps to β exactly.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let (x, gamma, beta) = (self.own(x), self.own(gamma), self.own(beta));
        let (n, d) = self.shape(x);
        assert!(d >= 1, "layer_norm on zero-width input");
        assert!(eps >= 0.0, "layer_norm with negative epsilon");
        assert_eq!(self.shape(gamma), (1, d), "layer_norm gamma shape");
        assert_eq!(self.shape(beta), (1, d), "layer_norm beta shape");
        let src = &self.nodes[x as usize].value;
        let g = self.nodes[gamma as usize].value.values().to_vec();
        let b = self.nodes[beta as usize].value.values().to_vec();
        let mut xhat = Tensor::zeros(n, d);
        let mut sigma = vec![0.0; n];
        let mut out = Tensor::zeros(n, d);
        for r in 0..n {
            let row = src.row(r);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let sd = var.sqrt();
            sigma[r] = sd;
            let denom = sd + eps;
            for c in 0..d {
                let xh = (row[c] - mu) / denom;
                xhat.values_mut()[r * d + c] = xh;
                out.values_mut()[r * d + c] = xh * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                sigma,
                eps,
            },
        )
    }

    /// Inverted dropout: in train mode each entry survives with probability
    /// `1 - p` and survivors are scaled by `1/(1-p)`, keeping expectations
    /// unchanged; in eval mode this is the identity (the input variable is
    /// returned unchanged and no randomness is consumed).
    pub fn dropout(&mut self, a: VarId, p: f64, mode: Mode, rng: &mut RngStream) -> Result<VarId> {
        self.dropout_impl(a, p, mode, rng, 0.0)
    }

    /// Dropout without the survivor rescale: survivors pass through at their
    /// original magnitude. Train-mode activations then shrink relative to
    /// eval mode; kept for fidelity experiments.
    pub fn dropout_unscaled(
        &mut self,
        a: VarId,
        p: f64,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<VarId> {
        self.dropout_impl(a, p, mode, rng, 1.0)
    }

    fn dropout_impl(
        &mut self,
        a: VarId,
        p: f64,
        mode: Mode,
        rng: &mut RngStream,
        fixed_scale: f64,
    ) -> Result<VarId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidInput(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let ai = self.own(a);
        let scale = if fixed_scale > 0.0 {
            fixed_scale
        } else {
            1.0 / (1.0 - p)
        };
        let src = &self.nodes[ai as usize].value;
        let keep: Vec<f64> = (0..src.len())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { scale })
            .collect();
        let mut out = src.clone();
        for (o, &k) in out.values_mut().iter_mut().zip(keep.iter()) {
            *o *= k;
        }
        Ok(self.push(out, Op::Dropout { a: ai, keep }))
    }

    /// Negative log-softmax of the true class: `-log softmax(logits)[label]`,
    /// computed with log-sum-exp stabilization. `logits` must be `1×C`.
    pub fn cross_entropy(&mut self, logits: VarId, label: usize) -> Result<VarId> {
        let li = self.own(logits);
        let (n, c) = self.shape(li);
        if n != 1 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits must be 1xC, got {n}x{c}"),
            });
        }
        if label >= c {
            return Err(Error::InvalidInput(format!(
                "class label {label} out of range for {c} classes"
            )));
        }
        let row = self.nodes[li as usize].value.row(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let softmax: Vec<f64> = row.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - row[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: li,
                label,
                softmax,
            },
        ))
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Run the reverse pass from a scalar loss, consuming the tape.
    ///
    /// Every variable's gradient is the analytic derivative of the loss with
    /// respect to that variable; the loss's own gradient is 1.
    pub fn backward(self, loss: VarId) -> Result<Gradients> {
        let li = self.own(loss) as usize;
        if self.nodes[li].value.shape() != (1, 1) {
            return Err(Error::InvalidInput(format!(
                "backward requires a scalar loss, got {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[li].values_mut()[0] = 1.0;

        for i in (0..=li).rev() {
            // Detach this node's gradient so input gradients can be mutated.
            let g = std::mem::replace(&mut grads[i], Tensor::zeros(0, 0));
            self.backprop_node(i, &g, &mut grads);
            grads[i] = g;
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Tensor]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                // out = a·b: da += g·bᵀ, db += aᵀ·g
                let (av, bv) = (&self.nodes[*a as usize].value, &self.nodes[*b as usize].value);
                let (n, k) = av.shape();
                let m = bv.cols();
                mm_nt(g.values(), bv.values(), grads[*a as usize].values_mut(), n, m, k);
                mm_tn(av.values(), g.values(), grads[*b as usize].values_mut(), n, k, m);
            }
            Op::MatmulNt { a, b } => {
                // out = a·bᵀ: da += g·b, db += gᵀ·a
                let (av, bv) = (&self.nodes[*a as usize].value, &self.nodes[*b as usize].value);
                let (n, k) = av.shape();
                let m = bv.rows();
                mm_nn(g.values(), bv.values(), grads[*a as usize].values_mut(), n, m, k);
                mm_tn(g.values(), av.values(), grads[*b as usize].values_mut(), n, m, k);
            }
            Op::Transpose { a } => {
                let ga = &mut grads[*a as usize];
                let (n, d) = ga.shape();
                for r in 0..n {
                    for c in 0..d {
                        ga.values_mut()[r * d + c] += g[(c, r)];
                    }
                }
            }
            Op::Add { a, b } => {
                grads[*a as usize].add_scaled(g, 1.0);
                grads[*b as usize].add_scaled(g, 1.0);
            }
            Op::AddRow { a, row } => {
                grads[*a as usize].add_scaled(g, 1.0);
                let gr = &mut grads[*row as usize];
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        gr.values_mut()[c] += g[(r, c)];
                    }
                }
            }
            Op::AddScalar { a, s } => {
                grads[*a as usize].add_scaled(g, 1.0);
                grads[*s as usize].values_mut()[0] += g.values().iter().sum::<f64>();
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a as usize].value, &self.nodes[*b as usize].value);
                for (idx, &gv) in g.values().iter().enumerate() {
                    grads[*a as usize].values_mut()[idx] += gv * bv.values()[idx];
                }
                for (idx, &gv) in g.values().iter().enumerate() {
                    grads[*b as usize].values_mut()[idx] += gv * av.values()[idx];
                }
            }
            Op::MulRow { a, row } => {
                let (av, rv) = (&self.nodes[*a as usize].value, &self.nodes[*row as usize].value);
                let (n, d) = g.shape();
                for r in 0..n {
                    for c in 0..d {
                        let gv = g[(r, c)];
                        grads[*a as usize].values_mut()[r * d + c] += gv * rv.values()[c];
                        grads[*row as usize].values_mut()[c] += gv * av[(r, c)];
                    }
                }
            }
            Op::MulScalarVar { a, s } => {
                let (av, sv) = (
                    &self.nodes[*a as usize].value,
                    self.nodes[*s as usize].value.item(),
                );
                grads[*a as usize].add_scaled(g, sv);
                let dot: f64 = g
                    .values()
                    .iter()
                    .zip(av.values())
                    .map(|(&gv, &x)| gv * x)
                    .sum();
                grads[*s as usize].values_mut()[0] += dot;
            }
            Op::Scale { a, c } => {
                grads[*a as usize].add_scaled(g, *c);
            }
            Op::SliceCols { a, start } => {
                let ga = &mut grads[*a as usize];
                let stride = ga.cols();
                let (n, len) = g.shape();
                for r in 0..n {
                    for c in 0..len {
                        ga.values_mut()[r * stride + start + c] += g[(r, c)];
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let ga = &mut grads[*a as usize];
                let d = ga.cols();
                let (len, _) = g.shape();
                for r in 0..len {
                    for c in 0..d {
                        ga.values_mut()[(start + r) * d + c] += g[(r, c)];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let n = g.rows();
                let total = g.cols();
                let mut at = 0;
                for &p in parts {
                    let gp = &mut grads[p as usize];
                    let d = gp.cols();
                    for r in 0..n {
                        for c in 0..d {
                            gp.values_mut()[r * d + c] += g.values()[r * total + at + c];
                        }
                    }
                    at += d;
                }
            }
            Op::RowSums { a } => {
                let ga = &mut grads[*a as usize];
                let (n, d) = ga.shape();
                for r in 0..n {
                    let gv = g[(r, 0)];
                    for c in 0..d {
                        ga.values_mut()[r * d + c] += gv;
                    }
                }
            }
            Op::SumAll { a } => {
                let gv = g.item();
                for v in grads[*a as usize].values_mut() {
                    *v += gv;
                }
            }
            Op::MeanAll { a } => {
                let ga = &mut grads[*a as usize];
                let gv = g.item() / ga.len() as f64;
                for v in ga.values_mut() {
                    *v += gv;
                }
            }
            Op::LeakyRelu { a, slope } => {
                let av = &self.nodes[*a as usize].value;
                for (idx, &gv) in g.values().iter().enumerate() {
                    let d = if av.values()[idx] >= 0.0 { 1.0 } else { *slope };
                    grads[*a as usize].values_mut()[idx] += gv * d;
                }
            }
            Op::Elu { a } => {
                // For x ≤ 0, y = exp(x) - 1 so dy/dx = y + 1.
                let (av, yv) = (&self.nodes[*a as usize].value, &node.value);
                for (idx, &gv) in g.values().iter().enumerate() {
                    let d = if av.values()[idx] > 0.0 {
                        1.0
                    } else {
                        yv.values()[idx] + 1.0
                    };
                    grads[*a as usize].values_mut()[idx] += gv * d;
                }
            }
            Op::Relu { a } => {
                let av = &self.nodes[*a as usize].value;
                for (idx, &gv) in g.values().iter().enumerate() {
                    if av.values()[idx] > 0.0 {
                        grads[*a as usize].values_mut()[idx] += gv;
                    }
                }
            }
            Op::MaskedSoftmax { a, mask } => {
                // dx_j = y_j (g_j - Σ_k g_k y_k) over masked-in entries.
                let y = &node.value;
                let (n, d) = y.shape();
                for r in 0..n {
                    let yr = y.row(r);
                    let gr = &g.values()[r * d..(r + 1) * d];
                    let mr = &mask[r * d..(r + 1) * d];
                    let dot: f64 = (0..d).filter(|&c| mr[c]).map(|c| gr[c] * yr[c]).sum();
                    let ga = &mut grads[*a as usize];
                    for c in 0..d {
                        if mr[c] {
                            ga.values_mut()[r * d + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                sigma,
                eps,
            } => {
                let gv = &self.nodes[*gamma as usize].value;
                let (n, d) = xhat.shape();
                for r in 0..n {
                    let xh = xhat.row(r);
                    let gr = &g.values()[r * d..(r + 1) * d];
                    // Gradients through the affine part.
                    for c in 0..d {
                        grads[*gamma as usize].values_mut()[c] += gr[c] * xh[c];
                        grads[*beta as usize].values_mut()[c] += gr[c];
                    }
                    // dL/dx̂, then through the normalization.
                    let denom = sigma[r] + eps;
                    let mut mean_dxh = 0.0;
                    let mut dot = 0.0;
                    for c in 0..d {
                        let dxh = gr[c] * gv.values()[c];
                        mean_dxh += dxh;
                        dot += dxh * xh[c];
                    }
                    mean_dxh /= d as f64;
                    let gx = &mut grads[*x as usize];
                    for c in 0..d {
                        let dxh = gr[c] * gv.values()[c];
                        let mut dx = (dxh - mean_dxh) / denom;
                        // σ is constant (gradient 0) at a constant row.
                        if sigma[r] > 0.0 {
                            dx -= xh[c] * dot / (d as f64 * sigma[r]);
                        }
                        gx.values_mut()[r * d + c] += dx;
                    }
                }
            }
            Op::Dropout { a, keep } => {
                for (idx, &gv) in g.values().iter().enumerate() {
                    grads[*a as usize].values_mut()[idx] += gv * keep[idx];
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                softmax,
            } => {
                let gv = g.item();
                let gl = &mut grads[*logits as usize];
                for (c, &p) in softmax.iter().enumerate() {
                    let onehot = if c == *label { 1.0 } else { 0.0 };
                    gl.values_mut()[c] += gv * (p - onehot);
                }
            }
        }
    }
}

// Matmul kernels, accumulating into `out`. Zero entries of the left operand
// are skipped: attention and one-hot matrices are mostly zeros.

/// `out[n×m] += a[n×k] · b[k×m]`
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * m..(kk + 1) * m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

/// `out[n×m] += a[n×k] · b[m×k]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] += acc;
        }
    }
}

/// `out[k×m] += a[n×k]ᵀ · b[n×m]`
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[kk * m..(kk + 1) * m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}
