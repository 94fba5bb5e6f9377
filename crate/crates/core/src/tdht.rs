//! Temporal-difference heterogeneous-token transformer.
//!
//! A trajectory becomes the token sequence `W, L_1, A_1, [C_1,] Y_1, ...,
//! L_tau, A_tau, [C_tau,] Y_tau`. Each token is embedded by a linear map
//! specific to its type, concatenated with a learnable type encoding and a
//! learnable positional encoding (`H_0` for `W`, `H_t` for every token of
//! step `t`), and projected to the hidden width. Pre-norm decoder blocks
//! with a causal mask follow, and a joint sigmoid head yields
//! `pi_t = P(A_t = 1 | .)` at `L_t`, `Q_t` at `A_t` (at `C_t` with
//! censoring) and the censoring hazard at `A_t`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clamp_prob, Tape, Var};
use crate::data::{apply_policy, Batch, OutcomeMode, OutcomeScaler, PolicySpec, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Checkpoint format tag.
pub const CHECKPOINT_FORMAT: &str = "tdht-ckpt-v1";

const LN_EPS: f64 = 1e-5;
/// Subjects per evaluation chunk.
const EVAL_CHUNK: usize = 256;

const TYPE_W: usize = 0;
const TYPE_L: usize = 1;
const TYPE_A: usize = 2;
const TYPE_Y: usize = 3;
const TYPE_C: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TdSchedule {
    /// All time steps of a minibatch in one summed loss.
    #[default]
    Joint,
    /// One update per time step, from `tau` down to 1.
    Backward,
}

fn default_batch_size() -> usize {
    64
}

/// Architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub lr: f64,
    /// Weight of the propensity loss.
    pub alpha: f64,
    /// Weight of the censoring loss.
    #[serde(default)]
    pub beta: f64,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub td_schedule: TdSchedule,
    /// One embedding shared by all token types (inputs zero-padded).
    #[serde(default)]
    pub shared_embedding: bool,
}

/// Named hyperparameter sets.
pub const PRESETS: &[&str] = &[
    "simple-tau10",
    "simple-tau20",
    "simple-tau30",
    "complex-tau10",
    "complex-tau20",
    "complex-tau30",
    "real-world",
    "micro",
];

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    fn table(
        emb: usize,
        dropout: f64,
        hidden: usize,
        layers: usize,
        heads: usize,
        lr: f64,
        alpha: f64,
        beta: f64,
        epochs: usize,
    ) -> Self {
        Self {
            embedding_dim: emb,
            hidden_size: hidden,
            n_layers: layers,
            n_heads: heads,
            dropout,
            lr,
            alpha,
            beta,
            epochs,
            seed: 0,
            batch_size: default_batch_size(),
            td_schedule: TdSchedule::Joint,
            shared_embedding: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "simple-tau10" => Self::table(16, 0.1, 32, 8, 4, 1e-3, 0.1, 0.0, 100),
            "simple-tau20" => Self::table(16, 0.2, 32, 4, 4, 5e-4, 0.1, 0.0, 100),
            "simple-tau30" => Self::table(32, 0.0, 16, 8, 4, 1e-4, 0.05, 0.0, 100),
            "complex-tau10" => Self::table(16, 0.0, 64, 4, 8, 1e-3, 0.01, 0.0, 100),
            "complex-tau20" => Self::table(32, 0.0, 32, 4, 8, 5e-4, 0.05, 0.0, 100),
            "complex-tau30" => Self::table(32, 0.0, 16, 4, 8, 1e-4, 0.05, 0.0, 400),
            "real-world" => Self::table(32, 0.0, 16, 8, 4, 5e-4, 0.1, 0.01, 100),
            // Small and slow-learning: the micro generator is nearly additive on the
            // logit scale and larger models chase cell-level noise.
            "micro" => Self {
                batch_size: 256,
                ..Self::table(4, 0.0, 8, 1, 2, 1e-3, 0.1, 0.0, 150)
            },
            other => return Err(Error::Config(format!("unknown preset '{other}'"))),
        };
        Ok(cfg)
    }

    /// Preset named after a generator and horizon, e.g. `simple-tau10`.
    pub fn preset_for(kind: crate::dgp::DgpKind, tau: usize) -> Result<Self> {
        use crate::dgp::DgpKind;
        let family = match kind {
            DgpKind::SimpleCont | DgpKind::SimpleSurv => "simple",
            DgpKind::Complex => "complex",
            DgpKind::Micro => return Self::preset("micro"),
        };
        let tau = if tau <= 10 {
            10
        } else if tau <= 20 {
            20
        } else {
            30
        };
        Self::preset(&format!("{family}-tau{tau}"))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embedding_dim == 0 || self.hidden_size == 0 || self.n_heads == 0 {
            return fail("embedding_dim, hidden_size and n_heads must be positive".into());
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail(format!(
                "alpha {} and beta {} must be nonnegative",
                self.alpha, self.beta
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Data dimensions a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub tau: usize,
    pub d_w: usize,
    pub d_l: usize,
    pub censoring: bool,
}

impl ModelDims {
    pub fn of(batch: &Batch) -> Self {
        Self {
            tau: batch.tau(),
            d_w: batch.header.d_w,
            d_l: batch.header.d_l,
            censoring: batch.header.censoring,
        }
    }

    /// Tokens per time step.
    pub fn tokens_per_step(&self) -> usize {
        if self.censoring {
            4
        } else {
            3
        }
    }

    pub fn seq_len(&self) -> usize {
        1 + self.tau * self.tokens_per_step()
    }

    fn n_types(&self) -> usize {
        if self.censoring {
            5
        } else {
            4
        }
    }

    fn out_width(&self) -> usize {
        if self.censoring {
            3
        } else {
            2
        }
    }

    fn shared_in(&self) -> usize {
        self.d_w.max(self.d_l).max(1)
    }

    /// Sequence position of token `slot` at step `t` (1-based).
    pub fn position(&self, t: usize, slot: Slot) -> usize {
        let k = self.tokens_per_step();
        let off = match slot {
            Slot::L => 0,
            Slot::A => 1,
            Slot::C => 2,
            Slot::Y => k - 1,
        };
        1 + (t - 1) * k + off
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    L,
    A,
    C,
    Y,
}

/// Closed-form number of scalar parameters.
pub fn param_count(cfg: &ModelConfig, dims: &ModelDims) -> usize {
    let (e, h) = (cfg.embedding_dim, cfg.hidden_size);
    let embeddings = if cfg.shared_embedding {
        (dims.shared_in() + 1) * e
    } else {
        let mut c = (dims.d_w + 1) * e + (dims.d_l + 1) * e + 2 * e + 2 * e;
        if dims.censoring {
            c += 2 * e;
        }
        c
    };
    let encodings = dims.n_types() * e + (dims.tau + 1) * e;
    let projection = 3 * e * h + h;
    let block = 12 * h * h + 13 * h;
    let out = dims.out_width();
    embeddings + encodings + projection + cfg.n_layers * block + 2 * h + h * out + out
}

/// Per-dimension affine standardization of `W` and `L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub w_mean: Vec<f64>,
    pub w_sd: Vec<f64>,
    pub l_mean: Vec<f64>,
    pub l_sd: Vec<f64>,
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s, mut ss) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        s += v;
        ss += v * v;
    }
    if n == 0.0 {
        return (0.0, 1.0);
    }
    let mean = s / n;
    let var = (ss / n - mean * mean).max(0.0);
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

impl Standardizer {
    pub fn identity(dims: &ModelDims) -> Self {
        Self {
            w_mean: vec![0.0; dims.d_w],
            w_sd: vec![1.0; dims.d_w],
            l_mean: vec![0.0; dims.d_l],
            l_sd: vec![1.0; dims.d_l],
        }
    }

    /// Statistics over subjects for `W` and over valid steps `t <= T` for `L`.
    pub fn fit(trajs: &[&Trajectory], dims: &ModelDims) -> Self {
        let mut out = Self::identity(dims);
        for j in 0..dims.d_w {
            (out.w_mean[j], out.w_sd[j]) = mean_sd(trajs.iter().map(|t| t.w[j]));
        }
        for j in 0..dims.d_l {
            (out.l_mean[j], out.l_sd[j]) = mean_sd(
                trajs
                    .iter()
                    .flat_map(|t| t.l[..t.stop].iter().map(move |l| l[j])),
            );
        }
        out
    }
}

/// Numeric token features for a group of sequences.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub b: usize,
    w: Tensor,
    l: Tensor,
    a: Tensor,
    y: Tensor,
    c: Option<Tensor>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.b
    }

    pub fn is_empty(&self) -> bool {
        self.b == 0
    }
}

/// Sigmoid head outputs as tape variables, each `[B, tau]`.
pub struct Heads {
    pub pi: Var,
    pub q: Var,
    pub lambda_c: Option<Var>,
}

/// Head outputs as plain values, indexed `[subject][t - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawOutputs {
    pub pi: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub lambda_c: Option<Vec<Vec<f64>>>,
}

/// Nuisance estimates for one batch under one policy.
///
/// Indexing is `[subject][t - 1]`. `v_hat` has `tau + 1` columns: entry
/// `t - 1` is `V_t` (the Q head on the policy-substituted sequence) for
/// `t <= T`, and entries from `T` on equal `Y_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOutputs {
    pub pi_hat: Vec<Vec<f64>>,
    pub q_hat: Vec<Vec<f64>>,
    pub v_hat: Vec<Vec<f64>>,
    pub lambda_c_hat: Option<Vec<Vec<f64>>>,
    pub stop: Vec<usize>,
    pub policy_actions: Vec<Vec<u8>>,
}

impl FitOutputs {
    pub fn n(&self) -> usize {
        self.stop.len()
    }

    pub fn tau(&self) -> usize {
        self.q_hat.first().map_or(0, Vec::len)
    }

    /// `valid[i][t - 1] = 1{t <= T_i}`.
    pub fn valid_mask(&self) -> Vec<Vec<bool>> {
        let tau = self.tau();
        self.stop
            .iter()
            .map(|&s| (1..=tau).map(|t| t <= s).collect())
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (usize, usize),
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: (usize, usize),
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    emb: Vec<Linear>,
    type_enc: usize,
    pos_enc: usize,
    proj: Linear,
    blocks: Vec<Block>,
    ln_f: (usize, usize),
    head: Linear,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn normal(&mut self, shape: &[usize], sd: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                sd * z
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Linear {
        let sd = gain / (fan_in.max(1) as f64).sqrt();
        let wt = self.normal(&[fan_in, fan_out], sd);
        let w = self.add(format!("{name}.weight"), wt);
        let b = self.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, h: usize) -> (usize, usize) {
        let g = self.add(format!("{name}.gamma"), Tensor::filled(&[h], 1.0));
        let b = self.add(format!("{name}.beta"), Tensor::zeros(&[h]));
        (g, b)
    }
}

fn build(
    cfg: &ModelConfig,
    dims: &ModelDims,
    rng: &mut ChaCha8Rng,
) -> (Layout, Vec<String>, Vec<Tensor>) {
    let (e, h) = (cfg.embedding_dim, cfg.hidden_size);
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng,
    };
    let emb = if cfg.shared_embedding {
        vec![b.linear("embed.shared", dims.shared_in(), e, 1.0)]
    } else {
        let mut v = vec![
            b.linear("embed.w", dims.d_w, e, 1.0),
            b.linear("embed.l", dims.d_l, e, 1.0),
            b.linear("embed.a", 1, e, 1.0),
            b.linear("embed.y", 1, e, 1.0),
        ];
        if dims.censoring {
            v.push(b.linear("embed.c", 1, e, 1.0));
        }
        v
    };
    let te = b.normal(&[dims.n_types(), e], 0.5);
    let type_enc = b.add("encoding.type".into(), te);
    let pe = b.normal(&[dims.tau + 1, e], 0.5);
    let pos_enc = b.add("encoding.position".into(), pe);
    let proj = b.linear("project", 3 * e, h, 1.0);
    let depth_gain = 1.0 / ((2 * cfg.n_layers.max(1)) as f64).sqrt();
    let blocks = (0..cfg.n_layers)
        .map(|i| {
            let p = format!("block{i}");
            Block {
                ln1: b.norm(&format!("{p}.ln1"), h),
                q: b.linear(&format!("{p}.attn.q"), h, h, 1.0),
                k: b.linear(&format!("{p}.attn.k"), h, h, 1.0),
                v: b.linear(&format!("{p}.attn.v"), h, h, 1.0),
                o: b.linear(&format!("{p}.attn.o"), h, h, depth_gain),
                ln2: b.norm(&format!("{p}.ln2"), h),
                ff1: b.linear(&format!("{p}.ff1"), h, 4 * h, 1.0),
                ff2: b.linear(&format!("{p}.ff2"), 4 * h, h, depth_gain),
            }
        })
        .collect();
    let ln_f = b.norm("final_ln", h);
    let head = b.linear("head", h, dims.out_width(), 0.1);
    let layout = Layout {
        emb,
        type_enc,
        pos_enc,
        proj,
        blocks,
        ln_f,
        head,
    };
    (layout, b.names, b.tensors)
}

/// A fitted or freshly initialized model. Immutable during evaluation, so
/// it can be shared across threads.
#[derive(Clone, Debug)]
pub struct Tdht {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub mode: OutcomeMode,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub standardizer: Standardizer,
    pub scaler: Option<OutcomeScaler>,
    layout: Layout,
    mask: Tensor,
}

fn causal_mask(s: usize) -> Tensor {
    let mut m = vec![0.0; s * s];
    for i in 0..s {
        for j in i + 1..s {
            m[i * s + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![s, s], m).expect("square")
}

impl Tdht {
    /// Random initialization from `cfg.seed`.
    pub fn new(cfg: &ModelConfig, dims: ModelDims, mode: OutcomeMode) -> Result<Self> {
        cfg.validate()?;
        if dims.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (layout, names, params) = build(cfg, &dims, &mut rng);
        Ok(Self {
            config: cfg.clone(),
            dims,
            mode,
            names,
            params,
            standardizer: Standardizer::identity(&dims),
            scaler: None,
            layout,
            mask: causal_mask(dims.seq_len()),
        })
    }

    pub fn for_batch(cfg: &ModelConfig, batch: &Batch) -> Result<Self> {
        Self::new(cfg, ModelDims::of(batch), batch.mode())
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_compatible(&self, batch: &Batch) -> Result<()> {
        let d = ModelDims::of(batch);
        if d.tau > self.dims.tau {
            return Err(Error::Config(format!(
                "horizon {} exceeds the positional table of length {}",
                d.tau,
                self.dims.tau + 1
            )));
        }
        if d != self.dims {
            return Err(Error::Config(format!(
                "batch dimensions {d:?} do not match the model {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    /// Token features with optional action override (`actions[i][t - 1]`)
    /// and, if `uncensored`, all `C_t` set to 0.
    pub fn encode(
        &self,
        trajs: &[&Trajectory],
        actions: Option<&[Vec<u8>]>,
        uncensored: bool,
    ) -> Result<Encoded> {
        let d = &self.dims;
        let (b, tau) = (trajs.len(), d.tau);
        let st = &self.standardizer;
        let mut w = Vec::with_capacity(b * d.d_w);
        let mut l = Vec::with_capacity(b * tau * d.d_l);
        let mut a = Vec::with_capacity(b * tau);
        let mut y = Vec::with_capacity(b * tau);
        let mut c = Vec::with_capacity(if d.censoring { b * tau } else { 0 });
        for (i, traj) in trajs.iter().enumerate() {
            if traj.tau() != tau || traj.w.len() != d.d_w {
                return Err(Error::Data(format!(
                    "trajectory {i} does not match the model dimensions"
                )));
            }
            w.extend(
                traj.w
                    .iter()
                    .enumerate()
                    .map(|(j, x)| (x - st.w_mean[j]) / st.w_sd[j]),
            );
            for t in 0..tau {
                l.extend(
                    traj.l[t]
                        .iter()
                        .enumerate()
                        .map(|(j, x)| (x - st.l_mean[j]) / st.l_sd[j]),
                );
                let at = actions.map_or(traj.a[t], |acts| acts[i][t]);
                a.push(f64::from(at));
                y.push(traj.y[t]);
                if d.censoring {
                    let ct = if uncensored {
                        0
                    } else {
                        traj.c.as_ref().map_or(0, |c| c[t])
                    };
                    c.push(f64::from(ct));
                }
            }
        }
        Ok(Encoded {
            b,
            w: Tensor::new(vec![b, d.d_w], w)?,
            l: Tensor::new(vec![b * tau, d.d_l], l)?,
            a: Tensor::new(vec![b * tau, 1], a)?,
            y: Tensor::new(vec![b * tau, 1], y)?,
            c: if d.censoring {
                Some(Tensor::new(vec![b * tau, 1], c)?)
            } else {
                None
            },
        })
    }

    /// Places parameters on `tape`; trainable when `grad` is set.
    pub fn load(&self, tape: &mut Tape, grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if grad {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn linear(tape: &mut Tape, p: &[Var], lin: &Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[lin.w])?;
        tape.add(y, p[lin.b])
    }

    /// Rows of the concatenated per-type token blocks in sequence order,
    /// with the type and position index of every row.
    fn token_order(&self, b: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let d = &self.dims;
        let (tau, s) = (d.tau, d.seq_len());
        let bt = b * tau;
        // Block offsets in the stacked rows [W | L | A | (C) | Y].
        let (off_l, off_a) = (b, b + bt);
        let off_c = b + 2 * bt;
        let off_y = if d.censoring { b + 3 * bt } else { b + 2 * bt };
        let mut order = Vec::with_capacity(b * s);
        let mut types = Vec::with_capacity(b * s);
        let mut pos = Vec::with_capacity(b * s);
        for i in 0..b {
            order.push(i);
            types.push(TYPE_W);
            pos.push(0);
            for t in 0..tau {
                let r = i * tau + t;
                order.push(off_l + r);
                types.push(TYPE_L);
                order.push(off_a + r);
                types.push(TYPE_A);
                if d.censoring {
                    order.push(off_c + r);
                    types.push(TYPE_C);
                }
                order.push(off_y + r);
                types.push(TYPE_Y);
                for _ in 0..d.tokens_per_step() {
                    pos.push(t + 1);
                }
            }
        }
        (order, types, pos)
    }

    fn embed(&self, tape: &mut Tape, p: &[Var], enc: &Encoded) -> Result<Var> {
        let d = &self.dims;
        let lay = &self.layout;
        let mut blocks = vec![enc.w.clone(), enc.l.clone(), enc.a.clone()];
        if let Some(c) = &enc.c {
            blocks.push(c.clone());
        }
        blocks.push(enc.y.clone());
        let parts: Vec<Var> = if self.config.shared_embedding {
            let width = d.shared_in();
            let mut rows = Vec::new();
            let mut count = 0;
            for t in &blocks {
                let w = t.last_dim();
                for r in 0..t.leading() {
                    rows.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                    rows.extend(std::iter::repeat_n(0.0, width - w));
                }
                count += t.leading();
            }
            let x = tape.constant(Tensor::new(vec![count, width], rows)?);
            vec![Self::linear(tape, p, &lay.emb[0], x)?]
        } else {
            let types: Vec<usize> = if d.censoring {
                vec![0, 1, 2, 4, 3]
            } else {
                vec![0, 1, 2, 3]
            };
            let mut out = Vec::new();
            for (t, ty) in blocks.iter().zip(types) {
                let x = tape.constant(t.clone());
                out.push(Self::linear(tape, p, &lay.emb[ty], x)?);
            }
            out
        };
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        let (order, types, pos) = self.token_order(enc.b);
        let h = tape.select_rows(stacked, &order)?;
        let te = tape.select_rows(p[lay.type_enc], &types)?;
        let pe = tape.select_rows(p[lay.pos_enc], &pos)?;
        let x = tape.concat_last(&[h, te, pe])?;
        Self::linear(tape, p, &lay.proj, x)
    }

    /// Full forward pass on `tape`. `p` are the parameter handles from
    /// [`Tdht::load`]; `rng` drives dropout when `train` is set.
    /// Sigmoid head outputs at every token, `[B * S, outputs]`.
    pub fn token_outputs_var(
        &self,
        tape: &mut Tape,
        p: &[Var],
        enc: &Encoded,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let d = &self.dims;
        let cfg = &self.config;
        let (b, s, h) = (enc.b, d.seq_len(), cfg.hidden_size);
        let (nh, dh) = (cfg.n_heads, h / cfg.n_heads);
        let mut x = self.embed(tape, p, enc)?;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for (li, blk) in self.layout.blocks.iter().enumerate() {
            let z = tape.layer_norm(x, p[blk.ln1.0], p[blk.ln1.1], LN_EPS)?;
            let heads = |tape: &mut Tape, lin: &Linear| -> Result<Var> {
                let y = Self::linear(tape, p, lin, z)?;
                let y = tape.reshape(y, &[b, s, nh, dh])?;
                let y = tape.permute(y, &[0, 2, 1, 3])?;
                tape.reshape(y, &[b * nh, s, dh])
            };
            let q = heads(tape, &blk.q)?;
            let k = heads(tape, &blk.k)?;
            let v = heads(tape, &blk.v)?;
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, inv_sqrt);
            let att = tape.softmax(scores, Some(&self.mask))?;
            let ctx = tape.bmm(att, v, false)?;
            let ctx = tape.reshape(ctx, &[b, nh, s, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[b * s, h])?;
            let o = Self::linear(tape, p, &blk.o, ctx)?;
            let o = tape.dropout(o, cfg.dropout, train, rng)?;
            x = tape.add(x, o)?;
            let z = tape.layer_norm(x, p[blk.ln2.0], p[blk.ln2.1], LN_EPS)?;
            let f = Self::linear(tape, p, &blk.ff1, z)?;
            let f = tape.gelu(f);
            let f = Self::linear(tape, p, &blk.ff2, f)?;
            let f = tape.dropout(f, cfg.dropout, train, rng)?;
            x = tape.add(x, f)?;
            if !tape.value(x).all_finite() {
                return Err(Error::NonFinite(format!("activations after block {li}")));
            }
        }
        let x = tape.layer_norm(x, p[self.layout.ln_f.0], p[self.layout.ln_f.1], LN_EPS)?;
        let logits = Self::linear(tape, p, &self.layout.head, x)?;
        let out = tape.sigmoid(logits);
        if !tape.value(out).all_finite() {
            return Err(Error::NonFinite("output head".into()));
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        enc: &Encoded,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Heads> {
        let d = &self.dims;
        let (b, s) = (enc.b, d.seq_len());
        let out = self.token_outputs_var(tape, p, enc, train, rng)?;
        let rows = |slot: Slot| -> Vec<usize> {
            (0..b)
                .flat_map(|i| (1..=d.tau).map(move |t| i * s + d.position(t, slot)))
                .collect()
        };
        let q_slot = if d.censoring { Slot::C } else { Slot::A };
        let at_l = tape.select_rows(out, &rows(Slot::L))?;
        let at_a = tape.select_rows(out, &rows(Slot::A))?;
        let at_q = if d.censoring {
            tape.select_rows(out, &rows(q_slot))?
        } else {
            at_a
        };
        let pi = tape.slice_last(at_l, 0, 1)?;
        let pi = tape.reshape(pi, &[b, d.tau])?;
        let q = tape.slice_last(at_q, 1, 1)?;
        let q = tape.reshape(q, &[b, d.tau])?;
        let lambda_c = if d.censoring {
            let lc = tape.slice_last(at_a, 2, 1)?;
            Some(tape.reshape(lc, &[b, d.tau])?)
        } else {
            None
        };
        Ok(Heads { pi, q, lambda_c })
    }

    /// Evaluation-mode head outputs at every token of every sequence.
    pub fn token_outputs(&self, trajs: &[&Trajectory]) -> Result<Tensor> {
        let enc = self.encode(trajs, None, false)?;
        let mut tape = Tape::new();
        let p = self.load(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.token_outputs_var(&mut tape, &p, &enc, false, &mut rng)?;
        Ok(tape.value(out).clone())
    }

    /// Evaluation-mode head values, computed in parallel chunks.
    pub fn predict(
        &self,
        trajs: &[&Trajectory],
        actions: Option<&[Vec<u8>]>,
        uncensored: bool,
    ) -> Result<RawOutputs> {
        let chunks: Vec<(usize, usize)> = (0..trajs.len())
            .step_by(EVAL_CHUNK)
            .map(|s| (s, (s + EVAL_CHUNK).min(trajs.len())))
            .collect();
        let parts: Vec<RawOutputs> = chunks
            .into_par_iter()
            .map(|(lo, hi)| {
                let acts = actions.map(|a| &a[lo..hi]);
                let enc = self.encode(&trajs[lo..hi], acts, uncensored)?;
                let mut tape = Tape::new();
                let p = self.load(&mut tape, false);
                // Dropout is off in evaluation, so the RNG is never drawn.
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let heads = self.forward(&mut tape, &p, &enc, false, &mut rng)?;
                let rows = |v: Var| -> Vec<Vec<f64>> {
                    tape.value(v)
                        .data()
                        .chunks(self.dims.tau)
                        .map(|r| r.iter().map(|&x| clamp_prob(x)).collect())
                        .collect()
                };
                Ok(RawOutputs {
                    pi: rows(heads.pi),
                    q: rows(heads.q),
                    lambda_c: heads.lambda_c.map(rows),
                })
            })
            .collect::<Result<_>>()?;
        let mut out = RawOutputs {
            pi: Vec::with_capacity(trajs.len()),
            q: Vec::with_capacity(trajs.len()),
            lambda_c: self.dims.censoring.then(Vec::new),
        };
        for part in parts {
            out.pi.extend(part.pi);
            out.q.extend(part.q);
            if let (Some(dst), Some(src)) = (out.lambda_c.as_mut(), part.lambda_c) {
                dst.extend(src);
            }
        }
        Ok(out)
    }

    /// `V_t` for `t = 1..=tau+1` per subject: the Q head on the sequence with
    /// policy actions substituted at every step (and censoring set to 0),
    /// replaced by `Y_T` from `t = T + 1` on.
    pub fn eval_v(
        &self,
        trajs: &[&Trajectory],
        policy_actions: &[Vec<u8>],
    ) -> Result<Vec<Vec<f64>>> {
        let raw = self.predict(trajs, Some(policy_actions), true)?;
        Ok(trajs
            .iter()
            .zip(raw.q)
            .map(|(traj, q)| v_row(traj, &q))
            .collect())
    }

    /// All nuisance outputs for `batch` under `g`.
    pub fn fit_outputs(&self, batch: &Batch, g: &PolicySpec) -> Result<FitOutputs> {
        self.check_compatible(batch)?;
        let trajs: Vec<&Trajectory> = batch.trajectories.iter().collect();
        let policy_actions: Vec<Vec<u8>> = trajs
            .iter()
            .map(|t| apply_policy(t, g))
            .collect::<Result<_>>()?;
        let observed = self.predict(&trajs, None, false)?;
        let v_hat = self.eval_v(&trajs, &policy_actions)?;
        Ok(FitOutputs {
            pi_hat: observed.pi,
            q_hat: observed.q,
            v_hat,
            lambda_c_hat: observed.lambda_c,
            stop: trajs.iter().map(|t| t.stop).collect(),
            policy_actions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            dims: self.dims,
            mode: self.mode,
            params: self
                .names
                .iter()
                .cloned()
                .zip(self.params.iter().cloned())
                .collect(),
            standardizer: self.standardizer.clone(),
            scaler: self.scaler,
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "checkpoint format '{}' is not '{CHECKPOINT_FORMAT}'",
                ckpt.format
            )));
        }
        let mut model = Self::new(&ckpt.config, ckpt.dims, ckpt.mode)?;
        for (name, slot) in model.names.iter().zip(model.params.iter_mut()) {
            let t = ckpt
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter '{name}'")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Config(format!(
                    "parameter '{name}' has shape {:?}",
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        model.standardizer = ckpt.standardizer;
        model.scaler = ckpt.scaler;
        Ok(model)
    }
}

/// `V_t` row from the substituted Q head: `q` for `t <= T`, then `Y_T`.
pub(crate) fn v_row(traj: &Trajectory, q: &[f64]) -> Vec<f64> {
    let tau = q.len();
    let yt = traj.final_outcome();
    (0..=tau)
        .map(|i| if i < traj.stop { q[i] } else { yt })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: ModelConfig,
    dims: ModelDims,
    mode: OutcomeMode,
    params: BTreeMap<String, Tensor>,
    standardizer: Standardizer,
    scaler: Option<OutcomeScaler>,
}
