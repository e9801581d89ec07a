//! Transformer backbone with summed dual time conditioning and four
//! prediction heads, in 64-bit precision with hand-written reverse-mode
//! gradients.
//!
//! Token embeddings sum the atom-type embedding, three modality input maps
//! (coordinates per token, lattice lengths and angles broadcast to every
//! token), and a learned positional embedding. Each pre-norm block modulates
//! its normalizations with scale/shift regressed from the conditioning vector
//! and gates each branch, all zero-initialized so blocks start as identities.
//! Attention is restricted by the padding mask and the lattice heads pool
//! hidden states over non-padded sites only.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{JointTime, K_ELEM, PAD_CODE};
use crate::rngutil::standard_normal;

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_sites: usize,
    /// Sinusoidal feature width per time axis; must be even.
    pub time_features: usize,
    /// Fixed affine normalization at the model boundary. Lattice quantities
    /// enter as (value - offset) / scale and head outputs leave as
    /// offset + scale * raw, so zero-initialized heads start at the offset
    /// and a constant learning rate can traverse the data range.
    pub length_offset: f64,
    pub length_scale: f64,
    pub angle_offset: f64,
    pub angle_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_sites: 24,
            time_features: 64,
            length_offset: 4.0,
            length_scale: 2.0,
            angle_offset: 90.0,
            angle_scale: 30.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return Err(Error::Config(format!(
                "time_features {} must be positive and even",
                self.time_features
            )));
        }
        if self.n_layers == 0 || self.max_sites == 0 {
            return Err(Error::Config("n_layers and max_sites must be positive".into()));
        }
        if self.length_scale <= 0.0 || self.angle_scale <= 0.0 {
            return Err(Error::Config("normalization scales must be positive".into()));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeMlpParams {
    pub w1: Array2<f64>, // (d, time_features)
    pub b1: Array1<f64>,
    pub w2: Array2<f64>, // (d, d)
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub mod_w: Array2<f64>, // (6d, d): scale1, shift1, gate1, scale2, shift2, gate2
    pub mod_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ff_w1: Array2<f64>, // (4d, d)
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>, // (d, 4d)
    pub ff_b2: Array1<f64>,
}

/// All learnable tensors, also reused as the gradient / moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// (K_ELEM + 2, d): real elements, mask token, padding token.
    pub atom_emb: Array2<f64>,
    pub coord_in_w: Array2<f64>, // (d, 3)
    pub coord_in_b: Array1<f64>,
    pub length_in_w: Array2<f64>, // (d, 3)
    pub length_in_b: Array1<f64>,
    pub angle_in_w: Array2<f64>, // (d, 3)
    pub angle_in_b: Array1<f64>,
    pub pos_emb: Array2<f64>, // (max_sites, d)
    pub time_t: TimeMlpParams,
    pub time_s: TimeMlpParams,
    pub layers: Vec<LayerParams>,
    pub final_mod_w: Array2<f64>, // (2d, d): scale, shift
    pub final_mod_b: Array1<f64>,
    pub head_atom_w: Array2<f64>, // (K_ELEM, d)
    pub head_atom_b: Array1<f64>,
    pub head_coord_w: Array2<f64>, // (3, d)
    pub head_coord_b: Array1<f64>,
    pub head_length_w: Array2<f64>, // (3, d)
    pub head_length_b: Array1<f64>,
    pub head_angle_w: Array2<f64>, // (3, d)
    pub head_angle_b: Array1<f64>,
}

fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    (std * standard_normal(rng)).clamp(-2.0 * std, 2.0 * std)
}

fn filled<R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| trunc_normal(rng, std))
}

impl TimeMlpParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            w1: Array2::zeros((cfg.d_model, cfg.time_features)),
            b1: Array1::zeros(cfg.d_model),
            w2: Array2::zeros((cfg.d_model, cfg.d_model)),
            b2: Array1::zeros(cfg.d_model),
        }
    }

    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            w1: filled(rng, (cfg.d_model, cfg.time_features), 0.02),
            b1: Array1::zeros(cfg.d_model),
            w2: filled(rng, (cfg.d_model, cfg.d_model), 0.02),
            b2: Array1::zeros(cfg.d_model),
        }
    }
}

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            mod_w: Array2::zeros((6 * d, d)),
            mod_b: Array1::zeros(6 * d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ff_w1: Array2::zeros((cfg.d_ff(), d)),
            ff_b1: Array1::zeros(cfg.d_ff()),
            ff_w2: Array2::zeros((d, cfg.d_ff())),
            ff_b2: Array1::zeros(d),
        }
    }

    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            // zero-initialized modulation: every block starts as the identity
            mod_w: Array2::zeros((6 * d, d)),
            mod_b: Array1::zeros(6 * d),
            wq: filled(rng, (d, d), 0.02),
            bq: Array1::zeros(d),
            wk: filled(rng, (d, d), 0.02),
            bk: Array1::zeros(d),
            wv: filled(rng, (d, d), 0.02),
            bv: Array1::zeros(d),
            wo: filled(rng, (d, d), 0.02),
            bo: Array1::zeros(d),
            ff_w1: filled(rng, (cfg.d_ff(), d), 0.02),
            ff_b1: Array1::zeros(cfg.d_ff()),
            ff_w2: filled(rng, (d, cfg.d_ff()), 0.02),
            ff_b2: Array1::zeros(d),
        }
    }
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            atom_emb: Array2::zeros((K_ELEM + 2, d)),
            coord_in_w: Array2::zeros((d, 3)),
            coord_in_b: Array1::zeros(d),
            length_in_w: Array2::zeros((d, 3)),
            length_in_b: Array1::zeros(d),
            angle_in_w: Array2::zeros((d, 3)),
            angle_in_b: Array1::zeros(d),
            pos_emb: Array2::zeros((cfg.max_sites, d)),
            time_t: TimeMlpParams::zeros(cfg),
            time_s: TimeMlpParams::zeros(cfg),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            final_mod_w: Array2::zeros((2 * d, d)),
            final_mod_b: Array1::zeros(2 * d),
            head_atom_w: Array2::zeros((K_ELEM, d)),
            head_atom_b: Array1::zeros(K_ELEM),
            head_coord_w: Array2::zeros((3, d)),
            head_coord_b: Array1::zeros(3),
            head_length_w: Array2::zeros((3, d)),
            head_length_b: Array1::zeros(3),
            head_angle_w: Array2::zeros((3, d)),
            head_angle_b: Array1::zeros(3),
        }
    }

    /// Training initialization: truncated normal embeddings and projections,
    /// zero heads and zero modulation maps.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let mut p = Self::zeros(cfg);
        p.atom_emb = filled(rng, (K_ELEM + 2, d), 0.02);
        p.coord_in_w = filled(rng, (d, 3), 0.02);
        p.length_in_w = filled(rng, (d, 3), 0.02);
        p.angle_in_w = filled(rng, (d, 3), 0.02);
        p.pos_emb = filled(rng, (cfg.max_sites, d), 0.02);
        p.time_t = TimeMlpParams::init(cfg, rng);
        p.time_s = TimeMlpParams::init(cfg, rng);
        p.layers = (0..cfg.n_layers).map(|_| LayerParams::init(cfg, rng)).collect();
        p
    }

    /// Dense random initialization used by gradient tests; unlike `init`,
    /// heads and modulation maps are nonzero so every path is exercised.
    pub fn random_init<R: Rng>(cfg: &ModelConfig, rng: &mut R, std: f64) -> Self {
        let mut p = Self::init(cfg, rng);
        for t in p.tensors_mut() {
            for v in t.data {
                *v = std * standard_normal(rng);
            }
        }
        p
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

pub struct TensorRef<'a> {
    pub name: String,
    pub data: &'a [f64],
    pub shape: Vec<usize>,
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
    pub shape: Vec<usize>,
}

macro_rules! push_ref {
    ($out:expr, $name:expr, $arr:expr) => {
        $out.push(TensorRef {
            name: $name.to_string(),
            data: $arr.as_slice().expect("standard layout"),
            shape: $arr.shape().to_vec(),
        })
    };
}

macro_rules! push_mut {
    ($out:expr, $name:expr, $arr:expr) => {{
        let shape = $arr.shape().to_vec();
        $out.push(TensorMut {
            name: $name.to_string(),
            data: $arr.as_slice_mut().expect("standard layout"),
            shape,
        })
    }};
}

impl ModelParams {
    /// Named views over every tensor, in a fixed deterministic order shared
    /// with `tensors_mut` (checkpointing, optimizer, and EMA rely on it).
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        push_ref!(out, "atom_emb", self.atom_emb);
        push_ref!(out, "coord_in.w", self.coord_in_w);
        push_ref!(out, "coord_in.b", self.coord_in_b);
        push_ref!(out, "length_in.w", self.length_in_w);
        push_ref!(out, "length_in.b", self.length_in_b);
        push_ref!(out, "angle_in.w", self.angle_in_w);
        push_ref!(out, "angle_in.b", self.angle_in_b);
        push_ref!(out, "pos_emb", self.pos_emb);
        for (tag, tm) in [("time_t", &self.time_t), ("time_s", &self.time_s)] {
            push_ref!(out, format!("{tag}.w1"), tm.w1);
            push_ref!(out, format!("{tag}.b1"), tm.b1);
            push_ref!(out, format!("{tag}.w2"), tm.w2);
            push_ref!(out, format!("{tag}.b2"), tm.b2);
        }
        for (i, l) in self.layers.iter().enumerate() {
            push_ref!(out, format!("layers.{i}.mod.w"), l.mod_w);
            push_ref!(out, format!("layers.{i}.mod.b"), l.mod_b);
            push_ref!(out, format!("layers.{i}.attn.wq"), l.wq);
            push_ref!(out, format!("layers.{i}.attn.bq"), l.bq);
            push_ref!(out, format!("layers.{i}.attn.wk"), l.wk);
            push_ref!(out, format!("layers.{i}.attn.bk"), l.bk);
            push_ref!(out, format!("layers.{i}.attn.wv"), l.wv);
            push_ref!(out, format!("layers.{i}.attn.bv"), l.bv);
            push_ref!(out, format!("layers.{i}.attn.wo"), l.wo);
            push_ref!(out, format!("layers.{i}.attn.bo"), l.bo);
            push_ref!(out, format!("layers.{i}.ff.w1"), l.ff_w1);
            push_ref!(out, format!("layers.{i}.ff.b1"), l.ff_b1);
            push_ref!(out, format!("layers.{i}.ff.w2"), l.ff_w2);
            push_ref!(out, format!("layers.{i}.ff.b2"), l.ff_b2);
        }
        push_ref!(out, "final_mod.w", self.final_mod_w);
        push_ref!(out, "final_mod.b", self.final_mod_b);
        push_ref!(out, "head.atom.w", self.head_atom_w);
        push_ref!(out, "head.atom.b", self.head_atom_b);
        push_ref!(out, "head.coord.w", self.head_coord_w);
        push_ref!(out, "head.coord.b", self.head_coord_b);
        push_ref!(out, "head.length.w", self.head_length_w);
        push_ref!(out, "head.length.b", self.head_length_b);
        push_ref!(out, "head.angle.w", self.head_angle_w);
        push_ref!(out, "head.angle.b", self.head_angle_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        push_mut!(out, "atom_emb", self.atom_emb);
        push_mut!(out, "coord_in.w", self.coord_in_w);
        push_mut!(out, "coord_in.b", self.coord_in_b);
        push_mut!(out, "length_in.w", self.length_in_w);
        push_mut!(out, "length_in.b", self.length_in_b);
        push_mut!(out, "angle_in.w", self.angle_in_w);
        push_mut!(out, "angle_in.b", self.angle_in_b);
        push_mut!(out, "pos_emb", self.pos_emb);
        for (tag, tm) in [("time_t", &mut self.time_t), ("time_s", &mut self.time_s)] {
            push_mut!(out, format!("{tag}.w1"), tm.w1);
            push_mut!(out, format!("{tag}.b1"), tm.b1);
            push_mut!(out, format!("{tag}.w2"), tm.w2);
            push_mut!(out, format!("{tag}.b2"), tm.b2);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            push_mut!(out, format!("layers.{i}.mod.w"), l.mod_w);
            push_mut!(out, format!("layers.{i}.mod.b"), l.mod_b);
            push_mut!(out, format!("layers.{i}.attn.wq"), l.wq);
            push_mut!(out, format!("layers.{i}.attn.bq"), l.bq);
            push_mut!(out, format!("layers.{i}.attn.wk"), l.wk);
            push_mut!(out, format!("layers.{i}.attn.bk"), l.bk);
            push_mut!(out, format!("layers.{i}.attn.wv"), l.wv);
            push_mut!(out, format!("layers.{i}.attn.bv"), l.bv);
            push_mut!(out, format!("layers.{i}.attn.wo"), l.wo);
            push_mut!(out, format!("layers.{i}.attn.bo"), l.bo);
            push_mut!(out, format!("layers.{i}.ff.w1"), l.ff_w1);
            push_mut!(out, format!("layers.{i}.ff.b1"), l.ff_b1);
            push_mut!(out, format!("layers.{i}.ff.w2"), l.ff_w2);
            push_mut!(out, format!("layers.{i}.ff.b2"), l.ff_b2);
        }
        push_mut!(out, "final_mod.w", self.final_mod_w);
        push_mut!(out, "final_mod.b", self.final_mod_b);
        push_mut!(out, "head.atom.w", self.head_atom_w);
        push_mut!(out, "head.atom.b", self.head_atom_b);
        push_mut!(out, "head.coord.w", self.head_coord_w);
        push_mut!(out, "head.coord.b", self.head_coord_b);
        push_mut!(out, "head.length.w", self.head_length_w);
        push_mut!(out, "head.length.b", self.head_length_b);
        push_mut!(out, "head.angle.w", self.head_angle_w);
        push_mut!(out, "head.angle.b", self.head_angle_b);
        out
    }
}

/// One padded batch of flow states at joint times.
#[derive(Debug, Clone)]
pub struct BatchInput {
    /// Embedding codes: element index, `MASK_CODE`, or `PAD_CODE`. (B, N)
    pub atom_codes: Array2<usize>,
    /// Fractional coordinates, zero at padded positions. (B, N, 3)
    pub frac: Array3<f64>,
    pub lengths: Array2<f64>, // (B, 3)
    pub angles: Array2<f64>,  // (B, 3)
    pub times: Vec<JointTime>,
    /// True exactly on real sites. (B, N)
    pub mask: Array2<bool>,
}

/// Unpadded per-crystal state used to assemble a batch.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub codes: Vec<usize>,
    pub frac: Vec<[f64; 3]>,
    pub lengths: [f64; 3],
    pub angles: [f64; 3],
    pub time: JointTime,
}

impl BatchInput {
    /// Pads items to the batch maximum with the padding token and zero
    /// coordinates.
    pub fn assemble(items: &[BatchItem]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidData("empty batch".into()));
        }
        let b = items.len();
        let n = items.iter().map(|it| it.codes.len()).max().unwrap();
        let mut atom_codes = Array2::from_elem((b, n), PAD_CODE);
        let mut frac = Array3::zeros((b, n, 3));
        let mut lengths = Array2::zeros((b, 3));
        let mut angles = Array2::zeros((b, 3));
        let mut mask = Array2::from_elem((b, n), false);
        let mut times = Vec::with_capacity(b);
        for (bi, it) in items.iter().enumerate() {
            if it.codes.len() != it.frac.len() || it.codes.is_empty() {
                return Err(Error::InvalidData("batch item shape mismatch".into()));
            }
            for (i, (&code, f)) in it.codes.iter().zip(&it.frac).enumerate() {
                atom_codes[(bi, i)] = code;
                mask[(bi, i)] = true;
                for t in 0..3 {
                    frac[(bi, i, t)] = f[t];
                }
            }
            for t in 0..3 {
                lengths[(bi, t)] = it.lengths[t];
                angles[(bi, t)] = it.angles[t];
            }
            times.push(it.time);
        }
        Ok(Self {
            atom_codes,
            frac,
            lengths,
            angles,
            times,
            mask,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.atom_codes.nrows()
    }

    pub fn n_max(&self) -> usize {
        self.atom_codes.ncols()
    }
}

/// Raw head outputs; also the shape of their loss adjoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub atom_logits: Array3<f64>, // (B, N, K_ELEM)
    pub coords: Array3<f64>,      // (B, N, 3)
    pub lengths: Array2<f64>,     // (B, 3)
    pub angles: Array2<f64>,      // (B, 3)
}

impl ModelOutput {
    pub fn zeros(b: usize, n: usize) -> Self {
        Self {
            atom_logits: Array3::zeros((b, n, K_ELEM)),
            coords: Array3::zeros((b, n, 3)),
            lengths: Array2::zeros((b, 3)),
            angles: Array2::zeros((b, 3)),
        }
    }
}

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

fn linear_fwd(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

fn linear_bwd(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &dy.t().dot(x);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(w)
}

/// Row-wise layer norm without learnable affine parameters.
fn ln_fwd(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let (n, d) = x.dim();
    let mut u = Array2::zeros((n, d));
    let mut inv = Array1::zeros(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv[r] = istd;
        for c in 0..d {
            u[(r, c)] = (x[(r, c)] - mean) * istd;
        }
    }
    (u, inv)
}

fn ln_bwd(du: &Array2<f64>, u: &Array2<f64>, inv: &Array1<f64>) -> Array2<f64> {
    let (n, d) = du.dim();
    let mut dx = Array2::zeros((n, d));
    for r in 0..n {
        let mut mean_du = 0.0;
        let mut mean_duu = 0.0;
        for c in 0..d {
            mean_du += du[(r, c)];
            mean_duu += du[(r, c)] * u[(r, c)];
        }
        mean_du /= d as f64;
        mean_duu /= d as f64;
        for c in 0..d {
            dx[(r, c)] = inv[r] * (du[(r, c)] - mean_du - u[(r, c)] * mean_duu);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let y = GELU_C * (x + GELU_A * x * x * x);
    let t = y.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

/// Sinusoidal features of one time value with geometric frequencies.
pub fn time_features(tau: f64, n_feat: usize) -> Vec<f64> {
    let half = n_feat / 2;
    let x = 1000.0 * tau;
    let mut out = Vec::with_capacity(n_feat);
    for k in 0..half {
        let freq = 10_000f64.powf(-(k as f64) / half as f64);
        out.push((x * freq).sin());
        out.push((x * freq).cos());
    }
    out
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

struct TimeMlpTrace {
    feat: Array2<f64>, // (B, time_features)
    pre: Array2<f64>,  // (B, d)
    act: Array2<f64>,  // (B, d)
}

struct LayerTrace {
    modv: Array2<f64>, // (B, 6d)
    u1: Array2<f64>,
    inv1: Array1<f64>,
    a1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attw: Array4<f64>, // (B, H, N, N)
    att_cat: Array2<f64>,
    att_proj: Array2<f64>,
    u2: Array2<f64>,
    inv2: Array1<f64>,
    a2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_out: Array2<f64>,
}

/// Every intermediate needed by the backward pass.
pub struct Trace {
    b: usize,
    n: usize,
    time_t: TimeMlpTrace,
    time_s: TimeMlpTrace,
    c: Array2<f64>, // (B, d)
    layers: Vec<LayerTrace>,
    fin_u: Array2<f64>,
    fin_inv: Array1<f64>,
    h: Array2<f64>,
    hbar: Array2<f64>,
    real_counts: Vec<f64>,
}

impl Trace {
    /// Hidden states after the final modulated norm, reshaped to (B, N, d).
    pub fn hidden(&self) -> Array3<f64> {
        let d = self.h.ncols();
        self.h
            .to_shape((self.b, self.n, d))
            .expect("standard layout")
            .to_owned()
    }

    /// Mean-pooled hidden state per crystal (non-padded sites only).
    pub fn pooled(&self) -> &Array2<f64> {
        &self.hbar
    }
}

/// Token embedding: atom embedding + coordinate map + broadcast lattice maps
/// + positional embedding.
pub fn embed(cfg: &ModelConfig, params: &ModelParams, batch: &BatchInput) -> Result<Array2<f64>> {
    let (b, n) = batch.atom_codes.dim();
    if n > cfg.max_sites {
        return Err(Error::SequenceTooLong {
            n,
            max: cfg.max_sites,
        });
    }
    let d = cfg.d_model;
    let frac2 = batch
        .frac
        .to_shape((b * n, 3))
        .expect("standard layout")
        .to_owned();
    let coord_part = linear_fwd(&frac2, &params.coord_in_w, &params.coord_in_b);
    let len_norm = batch
        .lengths
        .mapv(|v| (v - cfg.length_offset) / cfg.length_scale);
    let ang_norm = batch
        .angles
        .mapv(|v| (v - cfg.angle_offset) / cfg.angle_scale);
    let len_part = linear_fwd(&len_norm, &params.length_in_w, &params.length_in_b);
    let ang_part = linear_fwd(&ang_norm, &params.angle_in_w, &params.angle_in_b);
    let mut z = Array2::zeros((b * n, d));
    for bi in 0..b {
        for i in 0..n {
            let r = bi * n + i;
            let code = batch.atom_codes[(bi, i)];
            for c in 0..d {
                z[(r, c)] = params.atom_emb[(code, c)]
                    + coord_part[(r, c)]
                    + len_part[(bi, c)]
                    + ang_part[(bi, c)]
                    + params.pos_emb[(i, c)];
            }
        }
    }
    Ok(z)
}

fn time_mlp_fwd(tm: &TimeMlpParams, taus: &[f64], n_feat: usize) -> TimeMlpTrace {
    let b = taus.len();
    let mut feat = Array2::zeros((b, n_feat));
    for (bi, &tau) in taus.iter().enumerate() {
        for (j, v) in time_features(tau, n_feat).into_iter().enumerate() {
            feat[(bi, j)] = v;
        }
    }
    let pre = linear_fwd(&feat, &tm.w1, &tm.b1);
    let act = pre.mapv(silu);
    TimeMlpTrace { feat, pre, act }
}

/// Conditioning vector for one joint time: sum of the two axis embeddings.
pub fn condition(cfg: &ModelConfig, params: &ModelParams, time: JointTime) -> Array1<f64> {
    let tt = time_mlp_fwd(&params.time_t, &[time.t], cfg.time_features);
    let ts = time_mlp_fwd(&params.time_s, &[time.s], cfg.time_features);
    let ct = linear_fwd(&tt.act, &params.time_t.w2, &params.time_t.b2);
    let cs = linear_fwd(&ts.act, &params.time_s.w2, &params.time_s.b2);
    (&ct + &cs).row(0).to_owned()
}

/// Full forward pass; returns head outputs and the trace for `backward`.
pub fn forward(cfg: &ModelConfig, params: &ModelParams, batch: &BatchInput) -> Result<(ModelOutput, Trace)> {
    cfg.validate()?;
    let (b, n) = batch.atom_codes.dim();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let z = embed(cfg, params, batch)?;

    // conditioning
    let t_taus: Vec<f64> = batch.times.iter().map(|jt| jt.t).collect();
    let s_taus: Vec<f64> = batch.times.iter().map(|jt| jt.s).collect();
    let time_t = time_mlp_fwd(&params.time_t, &t_taus, cfg.time_features);
    let time_s = time_mlp_fwd(&params.time_s, &s_taus, cfg.time_features);
    let ct = linear_fwd(&time_t.act, &params.time_t.w2, &params.time_t.b2);
    let cs = linear_fwd(&time_s.act, &params.time_s.w2, &params.time_s.b2);
    let c = &ct + &cs;

    let real_sites: Vec<Vec<usize>> = (0..b)
        .map(|bi| (0..n).filter(|&i| batch.mask[(bi, i)]).collect())
        .collect();

    let mut x = z.clone();
    let mut layer_traces = Vec::with_capacity(cfg.n_layers);
    for (li, layer) in params.layers.iter().enumerate() {
        let x_in = x;
        let modv = linear_fwd(&c, &layer.mod_w, &layer.mod_b);
        let (u1, inv1) = ln_fwd(&x_in);
        let mut a1 = Array2::zeros((b * n, d));
        for bi in 0..b {
            for i in 0..n {
                let r = bi * n + i;
                for cc in 0..d {
                    a1[(r, cc)] = u1[(r, cc)] * (1.0 + modv[(bi, cc)]) + modv[(bi, d + cc)];
                }
            }
        }
        let q = linear_fwd(&a1, &layer.wq, &layer.bq);
        let k = linear_fwd(&a1, &layer.wk, &layer.bk);
        let v = linear_fwd(&a1, &layer.wv, &layer.bv);

        let mut attw = Array4::zeros((b, heads, n, n));
        let mut att_cat = Array2::zeros((b * n, d));
        for bi in 0..b {
            let real = &real_sites[bi];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let ri = bi * n + i;
                    let mut scores = Vec::with_capacity(real.len());
                    let mut max = f64::NEG_INFINITY;
                    for &j in real {
                        let rj = bi * n + j;
                        let mut dot = 0.0;
                        for t in 0..dh {
                            dot += q[(ri, off + t)] * k[(rj, off + t)];
                        }
                        let sc = dot * scale;
                        scores.push(sc);
                        if sc > max {
                            max = sc;
                        }
                    }
                    let mut denom = 0.0;
                    for sc in &mut scores {
                        *sc = (*sc - max).exp();
                        denom += *sc;
                    }
                    for (jj, &j) in real.iter().enumerate() {
                        let w = scores[jj] / denom;
                        attw[(bi, h, i, j)] = w;
                        let rj = bi * n + j;
                        for t in 0..dh {
                            att_cat[(ri, off + t)] += w * v[(rj, off + t)];
                        }
                    }
                }
            }
        }
        let att_proj = linear_fwd(&att_cat, &layer.wo, &layer.bo);
        let mut x_mid = x_in.clone();
        for bi in 0..b {
            for i in 0..n {
                let r = bi * n + i;
                for cc in 0..d {
                    x_mid[(r, cc)] += modv[(bi, 2 * d + cc)] * att_proj[(r, cc)];
                }
            }
        }

        let (u2, inv2) = ln_fwd(&x_mid);
        let mut a2 = Array2::zeros((b * n, d));
        for bi in 0..b {
            for i in 0..n {
                let r = bi * n + i;
                for cc in 0..d {
                    a2[(r, cc)] = u2[(r, cc)] * (1.0 + modv[(bi, 3 * d + cc)]) + modv[(bi, 4 * d + cc)];
                }
            }
        }
        let ff_pre = linear_fwd(&a2, &layer.ff_w1, &layer.ff_b1);
        let ff_act = ff_pre.mapv(gelu);
        let ff_out = linear_fwd(&ff_act, &layer.ff_w2, &layer.ff_b2);
        let mut x_out = x_mid.clone();
        for bi in 0..b {
            for i in 0..n {
                let r = bi * n + i;
                for cc in 0..d {
                    x_out[(r, cc)] += modv[(bi, 5 * d + cc)] * ff_out[(r, cc)];
                }
            }
        }
        if !x_out.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure {
                context: format!("transformer block {li}"),
                detail: "non-finite activation".into(),
            });
        }
        layer_traces.push(LayerTrace {
            modv,
            u1,
            inv1,
            a1,
            q,
            k,
            v,
            attw,
            att_cat,
            att_proj,
            u2,
            inv2,
            a2,
            ff_pre,
            ff_act,
            ff_out,
        });
        x = x_out;
    }

    // final modulated norm
    let (fin_u, fin_inv) = ln_fwd(&x);
    let fmod = linear_fwd(&c, &params.final_mod_w, &params.final_mod_b);
    let mut h = Array2::zeros((b * n, d));
    for bi in 0..b {
        for i in 0..n {
            let r = bi * n + i;
            for cc in 0..d {
                h[(r, cc)] = fin_u[(r, cc)] * (1.0 + fmod[(bi, cc)]) + fmod[(bi, d + cc)];
            }
        }
    }

    // heads
    let logits2 = linear_fwd(&h, &params.head_atom_w, &params.head_atom_b);
    let coords2 = linear_fwd(&h, &params.head_coord_w, &params.head_coord_b);
    let mut hbar = Array2::zeros((b, d));
    let mut real_counts = vec![0.0; b];
    for bi in 0..b {
        let real = &real_sites[bi];
        real_counts[bi] = real.len() as f64;
        for &i in real {
            let r = bi * n + i;
            for cc in 0..d {
                hbar[(bi, cc)] += h[(r, cc)];
            }
        }
        for cc in 0..d {
            hbar[(bi, cc)] /= real_counts[bi];
        }
    }
    let lengths = linear_fwd(&hbar, &params.head_length_w, &params.head_length_b)
        .mapv(|v| cfg.length_offset + cfg.length_scale * v);
    let angles = linear_fwd(&hbar, &params.head_angle_w, &params.head_angle_b)
        .mapv(|v| cfg.angle_offset + cfg.angle_scale * v);

    let out = ModelOutput {
        atom_logits: logits2
            .to_shape((b, n, K_ELEM))
            .expect("standard layout")
            .to_owned(),
        coords: coords2.to_shape((b, n, 3)).expect("standard layout").to_owned(),
        lengths,
        angles,
    };
    let trace = Trace {
        b,
        n,
        time_t,
        time_s,
        c,
        layers: layer_traces,
        fin_u,
        fin_inv,
        h,
        hbar,
        real_counts,
    };
    Ok((out, trace))
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

fn time_mlp_bwd(
    tm: &TimeMlpParams,
    trace: &TimeMlpTrace,
    dc: &Array2<f64>,
    grads: &mut TimeMlpParams,
) {
    // c = w2 . silu(w1 . feat + b1) + b2
    let dact = linear_bwd(dc, &trace.act, &tm.w2, &mut grads.w2, &mut grads.b2);
    let mut dpre = dact;
    for (dp, &p) in dpre.iter_mut().zip(trace.pre.iter()) {
        *dp *= silu_grad(p);
    }
    let _ = linear_bwd(&dpre, &trace.feat, &tm.w1, &mut grads.w1, &mut grads.b1);
}

/// Exact reverse-mode gradients of a scalar loss given the adjoints of every
/// head output. Adjoints at padded positions must be zero.
pub fn backward(
    cfg: &ModelConfig,
    params: &ModelParams,
    batch: &BatchInput,
    trace: &Trace,
    adj: &ModelOutput,
) -> ModelParams {
    let (b, n) = (trace.b, trace.n);
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut g = ModelParams::zeros(cfg);

    // --- heads ---
    let dlogits2 = adj
        .atom_logits
        .to_shape((b * n, K_ELEM))
        .expect("standard layout")
        .to_owned();
    let dcoords2 = adj.coords.to_shape((b * n, 3)).expect("standard layout").to_owned();
    let mut dh_ = linear_bwd(&dlogits2, &trace.h, &params.head_atom_w, &mut g.head_atom_w, &mut g.head_atom_b);
    dh_ += &linear_bwd(
        &dcoords2,
        &trace.h,
        &params.head_coord_w,
        &mut g.head_coord_w,
        &mut g.head_coord_b,
    );
    let dlen_raw = adj.lengths.mapv(|v| v * cfg.length_scale);
    let dang_raw = adj.angles.mapv(|v| v * cfg.angle_scale);
    let mut dhbar = linear_bwd(
        &dlen_raw,
        &trace.hbar,
        &params.head_length_w,
        &mut g.head_length_w,
        &mut g.head_length_b,
    );
    dhbar += &linear_bwd(
        &dang_raw,
        &trace.hbar,
        &params.head_angle_w,
        &mut g.head_angle_w,
        &mut g.head_angle_b,
    );
    for bi in 0..b {
        let m = trace.real_counts[bi];
        for i in 0..n {
            if !batch.mask[(bi, i)] {
                continue;
            }
            let r = bi * n + i;
            for cc in 0..d {
                dh_[(r, cc)] += dhbar[(bi, cc)] / m;
            }
        }
    }

    // --- final modulated norm ---
    let fmod = linear_fwd(&trace.c, &params.final_mod_w, &params.final_mod_b);
    let mut dfmod = Array2::zeros((b, 2 * d));
    let mut dfin_u = Array2::zeros((b * n, d));
    for bi in 0..b {
        for i in 0..n {
            let r = bi * n + i;
            for cc in 0..d {
                let dhv = dh_[(r, cc)];
                dfmod[(bi, cc)] += dhv * trace.fin_u[(r, cc)];
                dfmod[(bi, d + cc)] += dhv;
                dfin_u[(r, cc)] = dhv * (1.0 + fmod[(bi, cc)]);
            }
        }
    }
    let mut dc = linear_bwd(&dfmod, &trace.c, &params.final_mod_w, &mut g.final_mod_w, &mut g.final_mod_b);
    let mut dx = ln_bwd(&dfin_u, &trace.fin_u, &trace.fin_inv);

    // --- layers reversed ---
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lt = &trace.layers[li];
        let gl = &mut g.layers[li];
        let mut dmod = Array2::zeros((b, 6 * d));

        // x_out = x_mid + gate2 * ff_out
        let mut dffout = Array2::zeros((b * n, d));
        for bi in 0..b {
            for i in 0..n {
                let r = bi * n + i;
                for cc in 0..d {
                    let dxv = dx[(r, cc)];
                    dmod[(bi, 5 * d + cc)] += dxv * lt.ff_out[(r, cc)];
                    dffout[(r, cc)] = dxv * lt.modv[(bi, 5 * d + cc)];
                }
            }
        }
        // dx continues as d x_mid
        let dff_act = linear_bwd(&dffout, &lt.ff_act, &layer.ff_w2, &mut gl.ff_w2, &mut gl.ff_b2);
        let mut dff_pre = dff_act;
        for (dp, &p) in dff_pre.iter_mut().zip(lt.ff_pre.iter()) {
            *dp *= gelu_grad(p);
        }
        let da2 = linear_bwd(&dff_pre, &lt.a2, &layer.ff_w1, &mut gl.ff_w1, &mut gl.ff_b1);
        let mut du2 = Array2::zeros((b * n, d));
        for bi in 0..b {
            for i in 0..n {
                let r = bi * n + i;
                for cc in 0..d {
                    let dav = da2[(r, cc)];
                    dmod[(bi, 3 * d + cc)] += dav * lt.u2[(r, cc)];
                    dmod[(bi, 4 * d + cc)] += dav;
                    du2[(r, cc)] = dav * (1.0 + lt.modv[(bi, 3 * d + cc)]);
                }
            }
        }
        dx += &ln_bwd(&du2, &lt.u2, &lt.inv2);

        // x_mid = x_in + gate1 * att_proj
        let mut datt_proj = Array2::zeros((b * n, d));
        for bi in 0..b {
            for i in 0..n {
                let r = bi * n + i;
                for cc in 0..d {
                    let dxv = dx[(r, cc)];
                    dmod[(bi, 2 * d + cc)] += dxv * lt.att_proj[(r, cc)];
                    datt_proj[(r, cc)] = dxv * lt.modv[(bi, 2 * d + cc)];
                }
            }
        }
        // dx continues as d x_in
        let datt_cat = linear_bwd(&datt_proj, &lt.att_cat, &layer.wo, &mut gl.wo, &mut gl.bo);

        let mut dq = Array2::zeros((b * n, d));
        let mut dk = Array2::zeros((b * n, d));
        let mut dv = Array2::zeros((b * n, d));
        for bi in 0..b {
            let real: Vec<usize> = (0..n).filter(|&i| batch.mask[(bi, i)]).collect();
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let ri = bi * n + i;
                    // d alpha and the softmax Jacobian
                    let mut dalpha = vec![0.0; real.len()];
                    let mut inner = 0.0;
                    for (jj, &j) in real.iter().enumerate() {
                        let rj = bi * n + j;
                        let mut dot = 0.0;
                        for t in 0..dh {
                            dot += datt_cat[(ri, off + t)] * lt.v[(rj, off + t)];
                        }
                        dalpha[jj] = dot;
                        inner += lt.attw[(bi, h, i, j)] * dot;
                    }
                    for (jj, &j) in real.iter().enumerate() {
                        let w = lt.attw[(bi, h, i, j)];
                        let ds = w * (dalpha[jj] - inner);
                        let rj = bi * n + j;
                        for t in 0..dh {
                            dq[(ri, off + t)] += ds * lt.k[(rj, off + t)] * scale;
                            dk[(rj, off + t)] += ds * lt.q[(ri, off + t)] * scale;
                            dv[(rj, off + t)] += w * datt_cat[(ri, off + t)];
                        }
                    }
                }
            }
        }
        let mut da1 = linear_bwd(&dq, &lt.a1, &layer.wq, &mut gl.wq, &mut gl.bq);
        da1 += &linear_bwd(&dk, &lt.a1, &layer.wk, &mut gl.wk, &mut gl.bk);
        da1 += &linear_bwd(&dv, &lt.a1, &layer.wv, &mut gl.wv, &mut gl.bv);

        let mut du1 = Array2::zeros((b * n, d));
        for bi in 0..b {
            for i in 0..n {
                let r = bi * n + i;
                for cc in 0..d {
                    let dav = da1[(r, cc)];
                    dmod[(bi, cc)] += dav * lt.u1[(r, cc)];
                    dmod[(bi, d + cc)] += dav;
                    du1[(r, cc)] = dav * (1.0 + lt.modv[(bi, cc)]);
                }
            }
        }
        dx += &ln_bwd(&du1, &lt.u1, &lt.inv1);

        dc += &linear_bwd(&dmod, &trace.c, &layer.mod_w, &mut gl.mod_w, &mut gl.mod_b);
    }

    // --- embedding ---
    let dz = dx;
    for bi in 0..b {
        for i in 0..n {
            let r = bi * n + i;
            let code = batch.atom_codes[(bi, i)];
            for cc in 0..d {
                g.atom_emb[(code, cc)] += dz[(r, cc)];
                g.pos_emb[(i, cc)] += dz[(r, cc)];
            }
        }
    }
    let frac2 = batch
        .frac
        .to_shape((b * n, 3))
        .expect("standard layout")
        .to_owned();
    let _ = linear_bwd(&dz, &frac2, &params.coord_in_w, &mut g.coord_in_w, &mut g.coord_in_b);
    // lattice maps are broadcast over positions: collapse dz per crystal
    let mut dz_crystal = Array2::zeros((b, d));
    for bi in 0..b {
        for i in 0..n {
            let r = bi * n + i;
            for cc in 0..d {
                dz_crystal[(bi, cc)] += dz[(r, cc)];
            }
        }
    }
    let len_norm = batch
        .lengths
        .mapv(|v| (v - cfg.length_offset) / cfg.length_scale);
    let ang_norm = batch
        .angles
        .mapv(|v| (v - cfg.angle_offset) / cfg.angle_scale);
    let _ = linear_bwd(
        &dz_crystal,
        &len_norm,
        &params.length_in_w,
        &mut g.length_in_w,
        &mut g.length_in_b,
    );
    let _ = linear_bwd(
        &dz_crystal,
        &ang_norm,
        &params.angle_in_w,
        &mut g.angle_in_w,
        &mut g.angle_in_b,
    );

    // --- time conditioning ---
    time_mlp_bwd(&params.time_t, &trace.time_t, &dc, &mut g.time_t);
    time_mlp_bwd(&params.time_s, &trace.time_s, &dc, &mut g.time_s);

    g
}
