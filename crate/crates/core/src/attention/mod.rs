//! Softmax attention, kernelized (linearized) attention, and permute-based relative
//! position encoding.
//!
//! Linearized attention with a positive feature map `φ` computes
//!
//! ```text
//! out_i = (φ(q_i)ᵀ Σ_j φ(k_j) v_jᵀ) / (φ(q_i)ᵀ Σ_j φ(k_j))
//! ```
//!
//! which shares the two sums across queries and costs `O((Lq + Lk) d²)`. The literal
//! per-pair form is kept as [`kernel_attention_oracle`] for verification.

mod rpe;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{GradTape, Var};
use crate::error::{Error, Result};
use crate::tensor::{count_macs, gemm_acc, softmax_in_place, Tensor};

pub use rpe::{apply_rpe, Permutation, Role, RpeConfig, RpeSettings};

/// Positive feature map applied to queries and keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    EluPlusOne,
}

impl Kernel {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Kernel::EluPlusOne => x.elu_plus_one(),
        }
    }

    pub fn apply_on_tape(self, tape: &mut GradTape, x: &Var) -> Var {
        match self {
            Kernel::EluPlusOne => tape.elu_plus_one(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionVariant {
    Softmax,
    Linearized,
    #[default]
    LinearizedRpe,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [
        AttentionVariant::Softmax,
        AttentionVariant::Linearized,
        AttentionVariant::LinearizedRpe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Softmax => "softmax",
            AttentionVariant::Linearized => "linearized",
            AttentionVariant::LinearizedRpe => "linearized-rpe",
        }
    }
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown attention variant {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub kernel: Kernel,
    pub variant: AttentionVariant,
    /// One entry per head for [`AttentionVariant::LinearizedRpe`], empty otherwise.
    rpe: Vec<RpeConfig>,
}

impl AttentionConfig {
    /// Builds a config; the RPE variant gets per-head permutations from default settings.
    pub fn new(variant: AttentionVariant, num_heads: usize, head_dim: usize) -> Result<Self> {
        Self::with_rpe(variant, num_heads, head_dim, &RpeSettings::default())
    }

    pub fn with_rpe(variant: AttentionVariant, num_heads: usize, head_dim: usize, settings: &RpeSettings) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::config(format!(
                "attention needs positive heads and head_dim, got {num_heads} × {head_dim}"
            )));
        }
        let rpe = if variant == AttentionVariant::LinearizedRpe {
            (0..num_heads)
                .map(|h| {
                    let seed = if settings.shared {
                        settings.seed
                    } else {
                        settings.seed.wrapping_add(h as u64 * 0x9E37_79B9)
                    };
                    RpeConfig::random(head_dim, seed, settings.decay, settings.max_cached_position)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(AttentionConfig {
            num_heads,
            head_dim,
            kernel: Kernel::EluPlusOne,
            variant,
            rpe,
        })
    }

    /// Explicit per-head RPE configs (one per head, each of width `head_dim`).
    pub fn with_rpe_configs(num_heads: usize, head_dim: usize, rpe: Vec<RpeConfig>) -> Result<Self> {
        if rpe.len() != num_heads || rpe.iter().any(|r| r.dim() != head_dim) {
            return Err(Error::config("need one RPE config of width head_dim per head"));
        }
        let mut cfg = Self::new(AttentionVariant::Linearized, num_heads, head_dim)?;
        cfg.variant = AttentionVariant::LinearizedRpe;
        cfg.rpe = rpe;
        Ok(cfg)
    }

    pub fn hidden(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn head_rpe(&self, head: usize) -> Option<&RpeConfig> {
        self.rpe.get(head)
    }
}

/// Output projections `x · W` for queries, keys, values and the merged heads; each `[D × D]`.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub w_q: Arc<Tensor>,
    pub w_k: Arc<Tensor>,
    pub w_v: Arc<Tensor>,
    pub w_o: Arc<Tensor>,
}

fn check_qkv(op: &'static str, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (lq, d) = q.expect_matrix(op)?;
    let (lk, dk) = k.expect_matrix(op)?;
    let (lv, dv) = v.expect_matrix(op)?;
    if d != dk {
        return Err(Error::dim(op, q.shape(), k.shape()));
    }
    if lk != lv {
        return Err(Error::dim(op, k.shape(), v.shape()));
    }
    if lk == 0 {
        return Err(Error::Contract(format!("{op} needs at least one key")));
    }
    Ok((lq, lk, d, dv))
}

fn try_zeroed(len: usize) -> Result<Vec<f64>> {
    let mut buf = Vec::new();
    buf.try_reserve_exact(len)
        .map_err(|_| Error::OutOfMemory { bytes: len.saturating_mul(8) })?;
    buf.resize(len, 0.0);
    Ok(buf)
}

/// `softmax(q kᵀ · scale) v`, materializing the full `[Lq × Lk]` score matrix.
///
/// Fails with [`Error::OutOfMemory`] when the score matrix cannot be allocated.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    let (lq, lk, d, dv) = check_qkv("softmax_attention", q, k, v)?;
    let kt = k.transpose()?;
    let mut scores = try_zeroed(lq.checked_mul(lk).ok_or(Error::OutOfMemory { bytes: usize::MAX })?)?;
    gemm_acc(q.data(), kt.data(), lq, d, lk, &mut scores);
    for row in scores.chunks_exact_mut(lk) {
        for s in row.iter_mut() {
            *s *= scale;
        }
        softmax_in_place(row);
    }
    count_macs(lq * lk);
    let mut out = vec![0.0; lq * dv];
    gemm_acc(&scores, v.data(), lq, lk, dv, &mut out);
    Tensor::new(vec![lq, dv], out)
}

/// Normalized weights `sim(q_i, k_j) / Σ_j sim(q_i, k_j)` with `sim = φ(q)ᵀφ(k)`, as `[Lq × Lk]`.
pub fn kernel_attention_weights(q: &Tensor, k: &Tensor, kernel: Kernel) -> Result<Tensor> {
    let dummy = Tensor::zeros(&[k.rows(), 1]);
    let (lq, lk, d, _) = check_qkv("kernel_attention_weights", q, k, &dummy)?;
    let (fq, fk) = (kernel.apply(q), kernel.apply(k));
    let mut w = vec![0.0; lq * lk];
    for i in 0..lq {
        let row = &mut w[i * lk..(i + 1) * lk];
        for (j, s) in row.iter_mut().enumerate() {
            *s = (0..d).map(|c| fq.get(i, c) * fk.get(j, c)).sum();
        }
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Contract(format!("attention normalizer {total} for query {i}")));
        }
        for s in row.iter_mut() {
            *s /= total;
        }
    }
    Tensor::new(vec![lq, lk], w)
}

/// Literal per-pair kernel attention: an `O(Lq·Lk)` double loop over
/// `sim(q_i, k_j) = φ(q_i)ᵀφ(k_j)`. Deliberately naive; used as ground truth.
pub fn kernel_attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, kernel: Kernel) -> Result<Tensor> {
    let (lq, lk, _, dv) = check_qkv("kernel_attention_oracle", q, k, v)?;
    let (fq, fk) = (kernel.apply(q), kernel.apply(k));
    pairwise_oracle(lq, lk, dv, v, |i, j| dot(fq.row(i), fk.row(j)))
}

/// Literal per-pair attention under permute-based RPE, evaluated through the relative form
/// `sim_p(i, j) = r^(pᵢ-pⱼ) · φ(q_i)ᵀ P_B^(pⱼ-pᵢ) φ(k_j)` rather than by transforming rows.
pub fn rpe_attention_oracle(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    kernel: Kernel,
    rpe: &RpeConfig,
    q_positions: &[i64],
    k_positions: &[i64],
) -> Result<Tensor> {
    let (lq, lk, d, dv) = check_qkv("rpe_attention_oracle", q, k, v)?;
    if q_positions.len() != lq || k_positions.len() != lk || rpe.dim() != d {
        return Err(Error::dim("rpe_attention_oracle", &[lq, lk, d], &[q_positions.len(), k_positions.len(), rpe.dim()]));
    }
    let (fq, fk) = (kernel.apply(q), kernel.apply(k));
    pairwise_oracle(lq, lk, dv, v, |i, j| {
        let (pi, pj) = (q_positions[i], k_positions[j]);
        let idx = rpe.permutation().power_indices(pj - pi);
        let decay = rpe.decay().powf((pi - pj) as f64);
        decay * (0..d).map(|c| fq.get(i, c) * fk.get(j, idx[c])).sum::<f64>()
    })
}

fn pairwise_oracle(lq: usize, lk: usize, dv: usize, v: &Tensor, sim: impl Fn(usize, usize) -> f64) -> Result<Tensor> {
    let mut out = vec![0.0; lq * dv];
    for i in 0..lq {
        let mut num = vec![0.0; dv];
        let mut den = 0.0;
        for j in 0..lk {
            let s = sim(i, j);
            for (n, &vj) in num.iter_mut().zip(v.row(j)) {
                *n += s * vj;
            }
            den += s;
        }
        if !(den > 0.0) || !den.is_finite() {
            return Err(Error::Contract(format!("attention normalizer {den} for query {i}")));
        }
        for (o, n) in out[i * dv..(i + 1) * dv].iter_mut().zip(num) {
            *o = n / den;
        }
    }
    Tensor::new(vec![lq, dv], out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Factored linear attention on already kernel-mapped features `fq`, `fk`.
pub fn linearized_attention_features(fq: &Tensor, fk: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (lq, lk, d, dv) = check_qkv("linearized_attention", fq, fk, v)?;
    // S = Σ_j φ(k_j) v_jᵀ  [d × dv],  z = Σ_j φ(k_j)  [d]
    let mut s = vec![0.0; d * dv];
    let mut z = vec![0.0; d];
    for j in 0..lk {
        let (kr, vr) = (fk.row(j), v.row(j));
        for (c, &kc) in kr.iter().enumerate() {
            z[c] += kc;
            for (sv, &vv) in s[c * dv..(c + 1) * dv].iter_mut().zip(vr) {
                *sv += kc * vv;
            }
        }
    }
    count_macs(lk * d * (dv + 1));
    let mut out = vec![0.0; lq * dv];
    gemm_acc(fq.data(), &s, lq, d, dv, &mut out);
    for (i, orow) in out.chunks_exact_mut(dv.max(1)).enumerate() {
        let den = dot(fq.row(i), &z);
        if !(den > 0.0) {
            return Err(Error::Contract(format!("attention normalizer {den} for query {i}")));
        }
        for o in orow.iter_mut() {
            *o /= den;
        }
    }
    count_macs(lq * d);
    Tensor::new(vec![lq, dv], out)
}

/// Kernelized attention through the shared-sum factorization.
pub fn linearized_attention(q: &Tensor, k: &Tensor, v: &Tensor, kernel: Kernel) -> Result<Tensor> {
    check_qkv("linearized_attention", q, k, v)?;
    linearized_attention_features(&kernel.apply(q), &kernel.apply(k), v)
}

/// Linearized attention with permute-based relative positions applied after the kernel map.
pub fn linearized_rpe_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    kernel: Kernel,
    rpe: &RpeConfig,
    q_positions: &[i64],
    k_positions: &[i64],
) -> Result<Tensor> {
    check_qkv("linearized_rpe_attention", q, k, v)?;
    let fq = apply_rpe(&kernel.apply(q), q_positions, rpe, Role::Query)?;
    let fk = apply_rpe(&kernel.apply(k), k_positions, rpe, Role::Key)?;
    linearized_attention_features(&fq, &fk, v)
}

/// `0, 1, .., n-1` as positions.
pub fn default_positions(n: usize) -> Vec<i64> {
    (0..n as i64).collect()
}

/// Single-head attention dispatch for one variant.
pub fn head_attention(
    config: &AttentionConfig,
    head: usize,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    q_positions: &[i64],
    k_positions: &[i64],
) -> Result<Tensor> {
    match config.variant {
        AttentionVariant::Softmax => softmax_attention(q, k, v, 1.0 / (config.head_dim as f64).sqrt()),
        AttentionVariant::Linearized => linearized_attention(q, k, v, config.kernel),
        AttentionVariant::LinearizedRpe => {
            let rpe = config
                .head_rpe(head)
                .ok_or_else(|| Error::config(format!("no RPE config for head {head}")))?;
            linearized_rpe_attention(q, k, v, config.kernel, rpe, q_positions, k_positions)
        }
    }
}

fn check_projections(x_q: &Tensor, x_kv: &Tensor, weights: &AttentionWeights, config: &AttentionConfig) -> Result<()> {
    let d_model = config.hidden();
    for x in [x_q, x_kv] {
        if x.cols() != d_model {
            return Err(Error::dim("multi_head_attention", x.shape(), &[d_model]));
        }
    }
    for w in [&weights.w_q, &weights.w_k, &weights.w_v, &weights.w_o] {
        if w.shape() != [d_model, d_model] {
            return Err(Error::dim("multi_head_attention", w.shape(), &[d_model, d_model]));
        }
    }
    Ok(())
}

/// Multi-head attention: project, split into heads, attend per head, merge, project out.
/// Positions default to `0..L` when not given (they only matter for the RPE variant).
pub fn multi_head_attention(
    x_q: &Tensor,
    x_kv: &Tensor,
    weights: &AttentionWeights,
    config: &AttentionConfig,
    q_positions: Option<&[i64]>,
    k_positions: Option<&[i64]>,
) -> Result<Tensor> {
    check_projections(x_q, x_kv, weights, config)?;
    let qp = q_positions.map_or_else(|| default_positions(x_q.rows()), <[i64]>::to_vec);
    let kp = k_positions.map_or_else(|| default_positions(x_kv.rows()), <[i64]>::to_vec);
    let q = x_q.matmul(&weights.w_q)?;
    let k = x_kv.matmul(&weights.w_k)?;
    let v = x_kv.matmul(&weights.w_v)?;
    let hd = config.head_dim;
    let heads = (0..config.num_heads)
        .map(|h| {
            let cols = h * hd..(h + 1) * hd;
            head_attention(
                config,
                h,
                &q.slice(1, cols.clone())?,
                &k.slice(1, cols.clone())?,
                &v.slice(1, cols)?,
                &qp,
                &kp,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = heads.iter().collect();
    Tensor::concat(&refs, 1)?.matmul(&weights.w_o)
}

/// Differentiable multi-head attention built from tape primitives.
pub fn multi_head_attention_on_tape(
    tape: &mut GradTape,
    x_q: &Var,
    x_kv: &Var,
    weights: [&Var; 4],
    config: &AttentionConfig,
    q_positions: &[i64],
    k_positions: &[i64],
) -> Result<Var> {
    let [w_q, w_k, w_v, w_o] = weights;
    let q = tape.matmul(x_q, w_q)?;
    let k = tape.matmul(x_kv, w_k)?;
    let v = tape.matmul(x_kv, w_v)?;
    let hd = config.head_dim;
    let mut heads = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = tape.slice(&q, 1, cols.clone())?;
        let kh = tape.slice(&k, 1, cols.clone())?;
        let vh = tape.slice(&v, 1, cols)?;
        let out = match config.variant {
            AttentionVariant::Softmax => {
                let kt = tape.transpose(&kh)?;
                let scores = tape.matmul(&qh, &kt)?;
                let scores = tape.scale(&scores, 1.0 / (hd as f64).sqrt());
                let probs = tape.softmax_last(&scores);
                tape.matmul(&probs, &vh)?
            }
            AttentionVariant::Linearized | AttentionVariant::LinearizedRpe => {
                let mut fq = config.kernel.apply_on_tape(tape, &qh);
                let mut fk = config.kernel.apply_on_tape(tape, &kh);
                if config.variant == AttentionVariant::LinearizedRpe {
                    let rpe = config
                        .head_rpe(h)
                        .ok_or_else(|| Error::config(format!("no RPE config for head {h}")))?;
                    fq = rpe_on_tape(tape, &fq, q_positions, rpe, Role::Query)?;
                    fk = rpe_on_tape(tape, &fk, k_positions, rpe, Role::Key)?;
                }
                let fkt = tape.transpose(&fk)?;
                let s = tape.matmul(&fkt, &vh)?;
                let z = tape.sum_rows(&fk)?;
                let zt = tape.transpose(&z)?;
                let num = tape.matmul(&fq, &s)?;
                let den = tape.matmul(&fq, &zt)?;
                tape.div_rows(&num, &den)?
            }
        };
        heads.push(out);
    }
    let refs: Vec<&Var> = heads.iter().collect();
    let merged = tape.concat(&refs, 1)?;
    tape.matmul(&merged, w_o)
}

fn rpe_on_tape(tape: &mut GradTape, x: &Var, positions: &[i64], rpe: &RpeConfig, role: Role) -> Result<Var> {
    if positions.len() != x.value().rows() {
        return Err(Error::dim("apply_rpe", x.shape(), &[positions.len()]));
    }
    let mut index = Vec::with_capacity(positions.len());
    let mut scales = Vec::with_capacity(positions.len());
    for &p in positions {
        let (idx, s) = rpe.row_transform(p, role)?;
        index.push(idx.into_owned());
        scales.push(s);
    }
    tape.gather_features(x, Arc::new(index), Arc::new(scales))
}
