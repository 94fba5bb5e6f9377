//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Nodes are
//! appended in evaluation order, so inputs always precede their consumers and
//! a single reverse sweep accumulates gradients. Gradients are additive over
//! fan-out.

use rand::{Rng, RngExt};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any
/// log or logit.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    ConcatLast {
        parts: Vec<(Var, usize)>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SelectRows {
        a: Var,
        idx: Vec<usize>,
        row_len: usize,
    },
    SliceLast {
        a: Var,
        start: usize,
        width: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Sigmoid {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
    },
    Gelu {
        a: Var,
        t: Vec<f64>,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    Bce {
        pred: Var,
        target: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient => "stop_gradient",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ConcatLast { .. } => "concat_last",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::SliceLast { .. } => "slice_last",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Bce { .. } => "bce",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. One tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `tanh` through a single `exp`; faster than the libm routine and accurate
/// to a few ulps away from 0.
fn fast_tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy with the prediction clamped away from {0, 1}.
pub fn bce_value(pred: f64, target: f64) -> f64 {
    let p = clamp_prob(pred);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Passes the value through and blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.ndim() != 2 || ta.ndim() == 0 || ta.last_dim() != tb.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.leading(), tb.shape()[0], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul { a, b, m, k, n },
            needs,
        ))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when
    /// `trans_b`), giving `[B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bad = || {
            shape_err(
                "bmm",
                format!("{:?} x {:?} (trans_b={trans_b})", ta.shape(), tb.shape()),
            )
        };
        if ta.ndim() != 3 || tb.ndim() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            needs,
        ))
    }

    /// Elementwise sum. `b` may instead be a vector matching the last axis of
    /// `a`, in which case it is broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if tb.ndim() == 1 && ta.ndim() >= 1 && tb.len() == ta.last_dim() {
            true
        } else {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        };
        let mut out = ta.data().to_vec();
        if broadcast {
            let w = tb.len();
            for row in out.chunks_mut(w.max(1)) {
                for (o, x) in row.iter_mut().zip(tb.data()) {
                    *o += x;
                }
            }
        } else {
            for (o, x) in out.iter_mut().zip(tb.data()) {
                *o += x;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b, broadcast }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "sub",
                format!("{:?} - {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} * {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Scale { a, c }, needs)
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_last", "no inputs"))?;
        let lead_shape = {
            let s = self.value(*first).shape();
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows = self.value(*first).leading();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let s = t.shape();
            if s.is_empty() || s[..s.len() - 1] != lead_shape[..] {
                return Err(shape_err(
                    "concat_last",
                    format!("leading shape {:?} vs {:?}", lead_shape, s),
                ));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead_shape;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        let op = Op::ConcatLast {
            parts: parts.iter().copied().zip(widths).collect(),
        };
        Ok(self.push(Tensor::new(shape, out)?, op, needs))
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.ndim() == 0 || t.shape()[1..] != tail[..] {
                return Err(shape_err(
                    "concat_rows",
                    format!("trailing shape {:?} vs {:?}", tail, t.shape()),
                ));
            }
            rows += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let needs = parts.iter().any(|&p| self.needs(p));
        let op = Op::ConcatRows {
            parts: parts.to_vec(),
        };
        Ok(self.push(Tensor::new(shape, out)?, op, needs))
    }

    /// Gathers entries of the first axis: `out[i] = a[idx[i]]`.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() == 0 {
            return Err(shape_err("select_rows", "scalar input"));
        }
        let n_rows = ta.shape()[0];
        let row_len: usize = ta.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * row_len);
        for &i in idx {
            if i >= n_rows {
                return Err(shape_err(
                    "select_rows",
                    format!("row {i} out of range for {:?}", ta.shape()),
                ));
            }
            out.extend_from_slice(&ta.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&ta.shape()[1..]);
        let needs = self.needs(a);
        let op = Op::SelectRows {
            a,
            idx: idx.to_vec(),
            row_len,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, needs))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let width = ta.last_dim();
        if ta.ndim() == 0 || start + len > width {
            return Err(shape_err(
                "slice_last",
                format!("{start}..{} of {:?}", start + len, ta.shape()),
            ));
        }
        let rows = ta.leading();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * width + start..r * width + start + len]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SliceLast { a, start, width },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape { a }, needs))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let nd = ta.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd
            || perm
                .iter()
                .any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err(
                "permute",
                format!("perm {:?} for shape {:?}", perm, ta.shape()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| ta.shape()[p]).collect();
        let mut out = vec![0.0; ta.len()];
        permute_copy(ta.shape(), perm, ta.data(), &mut out, false);
        let needs = self.needs(a);
        let op = Op::Permute {
            a,
            perm: perm.to_vec(),
        };
        Ok(self.push(Tensor::new(out_shape, out)?, op, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t: Vec<f64> = ta
            .data()
            .iter()
            .map(|&x| fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
            .collect();
        let out = ta
            .data()
            .iter()
            .zip(&t)
            .map(|(&x, &th)| 0.5 * x * (1.0 + th))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let needs = self.needs(a);
        self.push(value, Op::Gelu { a, t }, needs)
    }

    /// Softmax over the last axis after adding `mask`. The mask's shape must
    /// equal the trailing axes of `a`; it is broadcast over the rest. Entries
    /// of `-inf` in the mask receive exactly zero probability.
    pub fn softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let ta = self.value(a);
        let width = ta.last_dim();
        if ta.ndim() == 0 || width == 0 {
            return Err(shape_err("softmax", format!("shape {:?}", ta.shape())));
        }
        if let Some(m) = mask {
            let nd = m.ndim();
            if nd > ta.ndim() || ta.shape()[ta.ndim() - nd..] != *m.shape() {
                return Err(shape_err(
                    "softmax",
                    format!("mask {:?} for input {:?}", m.shape(), ta.shape()),
                ));
            }
        }
        let mut out = ta.data().to_vec();
        let mask_len = mask.map_or(0, |m| m.len());
        for (r, row) in out.chunks_mut(width).enumerate() {
            if let Some(m) = mask {
                let off = (r * width) % mask_len;
                for (x, mv) in row.iter_mut().zip(&m.data()[off..off + width]) {
                    *x += mv;
                }
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = if *x == f64::NEG_INFINITY {
                    0.0
                } else {
                    (*x - max).exp()
                };
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let needs = self.needs(a);
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { a }, needs))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ta, tg, tb) = (self.value(a), self.value(gamma), self.value(beta));
        let h = ta.last_dim();
        if ta.ndim() == 0 || tg.shape() != [h] || tb.shape() != [h] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    ta.shape(),
                    tg.shape(),
                    tb.shape()
                ),
            ));
        }
        let rows = ta.leading();
        let mut xhat = vec![0.0; rows * h];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * h];
        for r in 0..rows {
            let x = &ta.data()[r * h..(r + 1) * h];
            let mean = x.iter().sum::<f64>() / h as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (x[j] - mean) * rs;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            a,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(value, op, needs))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let ta = self.value(a);
        let mask: Vec<f64> = (0..ta.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Dropout { a, mask }, needs))
    }

    /// Elementwise binary cross-entropy. Predictions are clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(shape_err(
                "bce",
                format!("{:?} vs {:?}", tp.shape(), tt.shape()),
            ));
        }
        let mut clamped = 0usize;
        let out = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &y)| {
                if p <= 0.0 || p >= 1.0 {
                    clamped += 1;
                }
                bce_value(p, y)
            })
            .collect();
        if clamped > 0 {
            log::debug!("bce: clamped {clamped} predictions at the probability boundary");
        }
        let value = Tensor::new(tp.shape().to_vec(), out)?;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(value, Op::Bce { pred, target }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, needs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let is_leaf = matches!(node.op, Op::Leaf);
            let Some(g) = (if is_leaf {
                upper[0].as_ref().cloned()
            } else {
                upper[0].take()
            }) else {
                continue;
            };
            if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient at node {i} ({}), element {pos}",
                    node.op.name()
                )));
            }
            self.propagate(node, &g, lower);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, lower: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(lower[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = self.slot(lower, a) {
                    gemm(m, n, k, g, false, self.value(b).data(), true, da, true);
                }
                if let Some(db) = self.slot(lower, b) {
                    gemm(k, m, n, self.value(a).data(), true, g, false, db, true);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if let Some(da) = self.slot(lower, a) {
                    let bv = self.value(b).data();
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(db) = self.slot(lower, b) {
                    let av = self.value(a).data();
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, dbi, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dbi, true);
                        }
                    }
                }
            }
            &Op::Add { a, b, broadcast } => {
                if let Some(da) = self.slot(lower, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = self.slot(lower, b) {
                    if broadcast {
                        let w = db.len();
                        for row in g.chunks(w.max(1)) {
                            db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                        }
                    } else {
                        db.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(da) = self.slot(lower, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = self.slot(lower, b) {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            &Op::Mul { a, b } => {
                if let Some(da) = self.slot(lower, a) {
                    let bv = self.value(b).data();
                    for ((d, x), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if let Some(db) = self.slot(lower, b) {
                    let av = self.value(a).data();
                    for ((d, x), y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            &Op::Scale { a, c } => {
                if let Some(da) = self.slot(lower, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
                }
            }
            Op::ConcatLast { parts } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &(p, w) in parts {
                    if let Some(dp) = self.slot(lower, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.slot(lower, p) {
                        dp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, x)| *d += x);
                    }
                    offset += len;
                }
            }
            Op::SelectRows { a, idx, row_len } => {
                if let Some(da) = self.slot(lower, *a) {
                    for (o, &i) in idx.iter().enumerate() {
                        let src = &g[o * row_len..(o + 1) * row_len];
                        da[i * row_len..(i + 1) * row_len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::SliceLast { a, start, width } => {
                let len = node.value.last_dim();
                if let Some(da) = self.slot(lower, a) {
                    for (r, row) in g.chunks(len.max(1)).enumerate() {
                        da[r * width + start..r * width + start + len]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(da) = self.slot(lower, a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Permute { a, perm } => {
                let in_shape = self.value(*a).shape().to_vec();
                if let Some(da) = self.slot(lower, *a) {
                    permute_copy(&in_shape, perm, g, da, true);
                }
            }
            &Op::Sigmoid { a } => {
                if let Some(da) = self.slot(lower, a) {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(out) {
                        *d += x * y * (1.0 - y);
                    }
                }
            }
            &Op::Tanh { a } => {
                if let Some(da) = self.slot(lower, a) {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(out) {
                        *d += x * (1.0 - y * y);
                    }
                }
            }
            &Op::Exp { a } => {
                if let Some(da) = self.slot(lower, a) {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(out) {
                        *d += x * y;
                    }
                }
            }
            &Op::Log { a } => {
                let av = self.value(a).data();
                if let Some(da) = self.slot(lower, a) {
                    for ((d, x), v) in da.iter_mut().zip(g).zip(av) {
                        *d += x / v;
                    }
                }
            }
            Op::Gelu { a, t } => {
                let av = self.value(*a).data();
                if let Some(da) = self.slot(lower, *a) {
                    for (((d, x), &v), &th) in da.iter_mut().zip(g).zip(av).zip(t) {
                        let dt = GELU_C * (1.0 + 3.0 * GELU_A * v * v) * (1.0 - th * th);
                        *d += x * (0.5 * (1.0 + th) + 0.5 * v * dt);
                    }
                }
            }
            &Op::Softmax { a } => {
                let width = node.value.last_dim();
                if let Some(da) = self.slot(lower, a) {
                    for ((drow, grow), yrow) in da
                        .chunks_mut(width)
                        .zip(g.chunks(width))
                        .zip(out.chunks(width))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, x), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (x - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let h = node.value.last_dim();
                let gv = self.value(*gamma).data();
                if let Some(dg) = self.slot(lower, *gamma) {
                    for (grow, xrow) in g.chunks(h).zip(xhat.chunks(h)) {
                        for j in 0..h {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if let Some(db) = self.slot(lower, *beta) {
                    for grow in g.chunks(h) {
                        db.iter_mut().zip(grow).for_each(|(d, x)| *d += x);
                    }
                }
                if let Some(da) = self.slot(lower, *a) {
                    let mut dxhat = vec![0.0; h];
                    for (r, (grow, xrow)) in g.chunks(h).zip(xhat.chunks(h)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..h {
                            dxhat[j] = grow[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xrow[j];
                        }
                        mean_d /= h as f64;
                        mean_dx /= h as f64;
                        let rs = rstd[r];
                        for j in 0..h {
                            da[r * h + j] += rs * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(da) = self.slot(lower, *a) {
                    for ((d, x), m) in da.iter_mut().zip(g).zip(mask) {
                        *d += x * m;
                    }
                }
            }
            &Op::Bce { pred, target } => {
                let pv = self.value(pred).data();
                let tv = self.value(target).data();
                if let Some(dp) = self.slot(lower, pred) {
                    for (((d, x), &p), &y) in dp.iter_mut().zip(g).zip(pv).zip(tv) {
                        let p = clamp_prob(p);
                        *d += x * (p - y) / (p * (1.0 - p));
                    }
                }
                if let Some(dt) = self.slot(lower, target) {
                    for ((d, x), &p) in dt.iter_mut().zip(g).zip(pv) {
                        let p = clamp_prob(p);
                        *d += x * ((1.0 - p) / p).ln();
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = self.slot(lower, a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { a } => {
                if let Some(da) = self.slot(lower, a) {
                    let c = g[0] / da.len().max(1) as f64;
                    da.iter_mut().for_each(|d| *d += c);
                }
            }
        }
    }
}

/// Copies `src` (laid out with `in_shape`) into `dst` laid out with the
/// permuted shape, or scatters back when `inverse`.
fn permute_copy(in_shape: &[usize], perm: &[usize], src: &[f64], dst: &mut [f64], inverse: bool) {
    let nd = in_shape.len();
    if nd == 0 {
        if inverse {
            dst[0] += src[0];
        } else {
            dst[0] = src[0];
        }
        return;
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = in_shape.iter().product();
    if total == 0 {
        return;
    }
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut out_pos = 0;
    while out_pos < total {
        let base: usize = idx[..nd - 1]
            .iter()
            .zip(&strides[..nd - 1])
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..inner {
            let in_pos = base + j * inner_stride;
            if inverse {
                dst[in_pos] += src[out_pos + j];
            } else {
                dst[out_pos + j] = src[in_pos];
            }
        }
        out_pos += inner;
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item().unwrap(), 0.5);
        let g = t.backward(y).unwrap();
        assert!(close(g.get(x).unwrap()[0], 0.25, 1e-15));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax(x, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mask = Tensor::vector(vec![0.0, f64::NEG_INFINITY, 0.0]);
        let y = t.softmax(x, Some(&mask)).unwrap();
        let v = t.value(y).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[4], 0.0);
        assert!(close(v[0] + v[2], 1.0, 1e-15));
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::scalar(0.5));
        let y = t.constant(Tensor::scalar(1.0));
        let l = t.bce(p, y).unwrap();
        assert!(close(
            t.value(l).item().unwrap(),
            std::f64::consts::LN_2,
            1e-15
        ));
    }

    #[test]
    fn bce_clamps_boundary_predictions() {
        assert!(bce_value(0.0, 1.0).is_finite());
        assert!(close(bce_value(0.0, 1.0), -(PROB_CLAMP.ln()), 1e-12));
        assert!(bce_value(1.0, 0.0).is_finite());
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[0], 6.0);
    }

    #[test]
    fn stop_gradient_blocks() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let s = t.stop_gradient(x);
        let y = t.mul(s, s).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn nan_gradient_is_reported() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let l = t.log(x);
        let err = t.backward(l).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x + x -> dy/dx = 3
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.5));
        let a = t.add(x, x).unwrap();
        let b = t.add(a, x).unwrap();
        let g = t.backward(b).unwrap();
        assert_eq!(g.get(x).unwrap()[0], 3.0);
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn permute_round_trip() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = t.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let p = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.value(p).shape(), &[4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        assert_eq!(
            t.value(p).data()[1 * 6 + 1 * 3 + 2],
            data[1 * 12 + 2 * 4 + 1]
        );
        let q = t.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.value(q).data(), &data[..]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.param(Tensor::filled(&[1000], 1.0));
        let y = t.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
        let z = t.dropout(x, 0.5, true, &mut rng).unwrap();
        let v = t.value(z).data();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.iter().filter(|&&e| e > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
