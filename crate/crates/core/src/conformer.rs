//! Conformer blocks and stacks with segment-level memory.
//!
//! A block runs three pre-norm residual sub-modules in order: the convolution module
//! (pointwise conv → GLU → depthwise conv → ReLU → pointwise conv), multi-head
//! self-attention, and a convolutional feed-forward network. With memory, block `n` sees
//! `[SG(cache_n) ∘ h_n]` and only the current-segment suffix of its output moves on to
//! block `n + 1`.

use std::sync::Arc;

use rand::Rng;

use crate::attention::{multi_head_attention_on_tape, AttentionConfig, AttentionVariant, AttentionWeights};
use crate::autograd::{GradTape, Var};
use crate::error::{Error, Result};
use crate::memory::SegmentMemory;
use crate::tensor::{NamedTensors, Padding, Tensor};

const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub num_blocks: usize,
    pub attention: AttentionConfig,
    pub depthwise_kernel: usize,
    pub ffn_kernel: usize,
    pub ffn_expansion: usize,
    /// Add sinusoidal absolute positions to the attention input. Only honored by the
    /// softmax variant.
    pub sinusoidal_positions: bool,
    pub layer_norm_eps: f64,
}

impl StackConfig {
    pub fn new(num_blocks: usize, attention: AttentionConfig) -> Self {
        StackConfig {
            num_blocks,
            attention,
            depthwise_kernel: 5,
            ffn_kernel: 3,
            ffn_expansion: 4,
            sinusoidal_positions: false,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn hidden(&self) -> usize {
        self.attention.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_blocks == 0 {
            problems.push("a stack needs at least one block".to_string());
        }
        if self.depthwise_kernel == 0 || self.ffn_kernel == 0 {
            problems.push("convolution kernels must be positive".to_string());
        }
        if self.ffn_expansion == 0 {
            problems.push("ffn expansion must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Layer-norm affine parameters.
#[derive(Debug, Clone)]
pub struct NormWeights {
    pub gamma: Arc<Tensor>,
    pub beta: Arc<Tensor>,
}

impl NormWeights {
    fn identity(d: usize) -> Self {
        NormWeights {
            gamma: Arc::new(Tensor::ones(&[d])),
            beta: Arc::new(Tensor::zeros(&[d])),
        }
    }

    fn zeros(d: usize) -> Self {
        NormWeights {
            gamma: Arc::new(Tensor::zeros(&[d])),
            beta: Arc::new(Tensor::zeros(&[d])),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvModuleWeights {
    pub norm: NormWeights,
    /// `[1 × D × 2D]` pointwise conv feeding the GLU.
    pub ff_in: Arc<Tensor>,
    pub ff_in_bias: Arc<Tensor>,
    /// `[K × D]` depthwise kernel.
    pub depthwise: Arc<Tensor>,
    pub depthwise_bias: Arc<Tensor>,
    /// `[1 × D × D]` pointwise conv.
    pub ff_out: Arc<Tensor>,
    pub ff_out_bias: Arc<Tensor>,
}

#[derive(Debug, Clone)]
pub struct MhsaWeights {
    pub norm: NormWeights,
    pub attention: AttentionWeights,
}

#[derive(Debug, Clone)]
pub struct ConvFfnWeights {
    pub norm: NormWeights,
    /// `[K × D × eD]`
    pub conv1: Arc<Tensor>,
    pub conv1_bias: Arc<Tensor>,
    /// `[K × eD × D]`
    pub conv2: Arc<Tensor>,
    pub conv2_bias: Arc<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ConformerBlockWeights {
    pub convm: ConvModuleWeights,
    pub mhsa: MhsaWeights,
    pub convffn: ConvFfnWeights,
}

impl ConformerBlockWeights {
    /// Uniform `[-0.05, 0.05]` weights and biases; layer norms start as identity.
    pub fn random<R: Rng + ?Sized>(config: &StackConfig, rng: &mut R) -> Self {
        Self::build(config, |shape| Tensor::rand_uniform(shape, -INIT_RANGE, INIT_RANGE, rng), false)
    }

    /// Every parameter zero, including layer-norm gains. The block is then an exact identity.
    pub fn zeros(config: &StackConfig) -> Self {
        Self::build(config, Tensor::zeros, true)
    }

    fn build(config: &StackConfig, mut init: impl FnMut(&[usize]) -> Tensor, zero_norms: bool) -> Self {
        let d = config.hidden();
        let e = d * config.ffn_expansion;
        let (kd, kf) = (config.depthwise_kernel, config.ffn_kernel);
        let mut w = |shape: &[usize]| Arc::new(init(shape));
        let norm = || if zero_norms { NormWeights::zeros(d) } else { NormWeights::identity(d) };
        ConformerBlockWeights {
            convm: ConvModuleWeights {
                norm: norm(),
                ff_in: w(&[1, d, 2 * d]),
                ff_in_bias: w(&[2 * d]),
                depthwise: w(&[kd, d]),
                depthwise_bias: w(&[d]),
                ff_out: w(&[1, d, d]),
                ff_out_bias: w(&[d]),
            },
            mhsa: MhsaWeights {
                norm: norm(),
                attention: AttentionWeights {
                    w_q: w(&[d, d]),
                    w_k: w(&[d, d]),
                    w_v: w(&[d, d]),
                    w_o: w(&[d, d]),
                },
            },
            convffn: ConvFfnWeights {
                norm: norm(),
                conv1: w(&[kf, d, e]),
                conv1_bias: w(&[e]),
                conv2: w(&[kf, e, d]),
                conv2_bias: w(&[d]),
            },
        }
    }

    /// Parameters as `{prefix}.{convm|mhsa|convffn}.{param}` entries.
    pub fn export(&self, prefix: &str, out: &mut NamedTensors) {
        let mut put = |name: &str, t: &Arc<Tensor>| {
            out.insert(format!("{prefix}.{name}"), (**t).clone());
        };
        let c = &self.convm;
        put("convm.ln_gamma", &c.norm.gamma);
        put("convm.ln_beta", &c.norm.beta);
        put("convm.ff_in", &c.ff_in);
        put("convm.ff_in_bias", &c.ff_in_bias);
        put("convm.depthwise", &c.depthwise);
        put("convm.depthwise_bias", &c.depthwise_bias);
        put("convm.ff_out", &c.ff_out);
        put("convm.ff_out_bias", &c.ff_out_bias);
        let m = &self.mhsa;
        put("mhsa.ln_gamma", &m.norm.gamma);
        put("mhsa.ln_beta", &m.norm.beta);
        put("mhsa.w_q", &m.attention.w_q);
        put("mhsa.w_k", &m.attention.w_k);
        put("mhsa.w_v", &m.attention.w_v);
        put("mhsa.w_o", &m.attention.w_o);
        let f = &self.convffn;
        put("convffn.ln_gamma", &f.norm.gamma);
        put("convffn.ln_beta", &f.norm.beta);
        put("convffn.conv1", &f.conv1);
        put("convffn.conv1_bias", &f.conv1_bias);
        put("convffn.conv2", &f.conv2);
        put("convffn.conv2_bias", &f.conv2_bias);
    }
}

fn layer_norm(tape: &mut GradTape, x: &Var, norm: &NormWeights, eps: f64) -> Result<Var> {
    let g = tape.constant(Arc::clone(&norm.gamma));
    let b = tape.constant(Arc::clone(&norm.beta));
    tape.layer_norm(x, &g, &b, eps)
}

fn conv(tape: &mut GradTape, x: &Var, w: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Var> {
    let w = tape.constant(Arc::clone(w));
    let b = tape.constant(Arc::clone(b));
    tape.conv1d(x, &w, Some(&b), Padding::Same)
}

/// Convolution module with its residual connection.
pub fn conv_module(tape: &mut GradTape, x: &Var, w: &ConvModuleWeights, config: &StackConfig) -> Result<Var> {
    check_width(x, config)?;
    let h = layer_norm(tape, x, &w.norm, config.layer_norm_eps)?;
    let h = conv(tape, &h, &w.ff_in, &w.ff_in_bias)?;
    let h = tape.glu(&h)?;
    let dw = tape.constant(Arc::clone(&w.depthwise));
    let db = tape.constant(Arc::clone(&w.depthwise_bias));
    let h = tape.depthwise_conv1d(&h, &dw, Some(&db))?;
    let h = tape.relu(&h);
    let h = conv(tape, &h, &w.ff_out, &w.ff_out_bias)?;
    tape.add(x, &h)
}

/// Self-attention sub-module with its residual connection.
pub fn mhsa_module(tape: &mut GradTape, x: &Var, w: &MhsaWeights, config: &StackConfig, positions: &[i64]) -> Result<Var> {
    check_width(x, config)?;
    let mut h = layer_norm(tape, x, &w.norm, config.layer_norm_eps)?;
    if config.sinusoidal_positions && config.attention.variant == AttentionVariant::Softmax {
        let pe = tape.constant(sinusoidal_table(positions, config.hidden()));
        h = tape.add(&h, &pe)?;
    }
    let a = &w.attention;
    let ws = [&a.w_q, &a.w_k, &a.w_v, &a.w_o].map(|t| tape.constant(Arc::clone(t)));
    let h = multi_head_attention_on_tape(tape, &h, &h, [&ws[0], &ws[1], &ws[2], &ws[3]], &config.attention, positions, positions)?;
    tape.add(x, &h)
}

/// Convolutional feed-forward network with its residual connection.
pub fn conv_ffn(tape: &mut GradTape, x: &Var, w: &ConvFfnWeights, config: &StackConfig) -> Result<Var> {
    check_width(x, config)?;
    let h = layer_norm(tape, x, &w.norm, config.layer_norm_eps)?;
    let h = conv(tape, &h, &w.conv1, &w.conv1_bias)?;
    let h = tape.relu(&h);
    let h = conv(tape, &h, &w.conv2, &w.conv2_bias)?;
    tape.add(x, &h)
}

/// One block over the (possibly memory-prefixed) sequence; `positions` index its rows.
pub fn conformer_block(tape: &mut GradTape, x: &Var, w: &ConformerBlockWeights, config: &StackConfig, positions: &[i64]) -> Result<Var> {
    let h = conv_module(tape, x, &w.convm, config)?;
    let h = mhsa_module(tape, &h, &w.mhsa, config, positions)?;
    conv_ffn(tape, &h, &w.convffn, config)
}

fn check_width(x: &Var, config: &StackConfig) -> Result<()> {
    let d = config.hidden();
    if x.value().rank() != 2 || x.value().cols() != d {
        return Err(Error::dim("conformer", x.shape(), &[x.value().rows(), d]));
    }
    if x.value().rows() == 0 {
        return Err(Error::Input("conformer input has no frames".into()));
    }
    Ok(())
}

/// Standard sine/cosine absolute position table, `[L × D]`.
pub fn sinusoidal_table(positions: &[i64], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for c in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_parts(vec![positions.len(), d], data)
}

/// A stack of blocks sharing one configuration.
#[derive(Debug, Clone)]
pub struct ConformerStack {
    pub config: StackConfig,
    pub blocks: Vec<ConformerBlockWeights>,
}

/// Result of [`ConformerStack::forward_on_tape`].
pub struct StackOutput {
    /// Current-segment output of the last block, `[L × D]`.
    pub output: Var,
    /// Current-segment input of every block, the material the next cache is cut from.
    pub layer_inputs: Vec<Tensor>,
    /// Tape variables holding the cached prefixes that were fed in, one per block with a
    /// non-empty cache.
    pub memory_vars: Vec<Var>,
    /// The memory after this segment, when memory was supplied.
    pub memory: Option<SegmentMemory>,
}

impl ConformerStack {
    pub fn random<R: Rng + ?Sized>(config: StackConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.num_blocks)
            .map(|_| ConformerBlockWeights::random(&config, rng))
            .collect();
        Ok(ConformerStack { config, blocks })
    }

    pub fn zeros(config: StackConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.num_blocks).map(|_| ConformerBlockWeights::zeros(&config)).collect();
        Ok(ConformerStack { config, blocks })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden()
    }

    pub fn export(&self, prefix: &str, out: &mut NamedTensors) {
        for (n, b) in self.blocks.iter().enumerate() {
            b.export(&format!("{prefix}.block{n}"), out);
        }
    }

    fn check_memory(&self, memory: &SegmentMemory) -> Result<()> {
        let mut problems = Vec::new();
        if memory.num_layers() != self.blocks.len() {
            problems.push(format!("memory has {} layers, stack has {} blocks", memory.num_layers(), self.blocks.len()));
        }
        if memory.config().hidden != self.hidden() {
            problems.push(format!("memory width {} differs from hidden size {}", memory.config().hidden, self.hidden()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Runs every block. Block `n` processes `[SG(cache_n) ∘ h_n]` at positions
    /// `0..M+L`; only the last `L` rows of its output continue upward.
    pub fn forward_on_tape(&self, tape: &mut GradTape, x: &Var, memory: Option<&SegmentMemory>) -> Result<StackOutput> {
        if let Some(m) = memory {
            self.check_memory(m)?;
        }
        let l = x.value().rows();
        let mut cur = x.clone();
        let mut layer_inputs = Vec::with_capacity(self.blocks.len());
        let mut memory_vars = Vec::new();
        for (n, block) in self.blocks.iter().enumerate() {
            layer_inputs.push(cur.value().detached());
            let cache = memory.and_then(|m| m.layer(n)).filter(|t| t.rows() > 0);
            let (input, m_len) = match cache {
                Some(cache) => {
                    let leaf = tape.param(cache.clone());
                    let barrier = tape.stop_gradient(&leaf);
                    memory_vars.push(leaf);
                    (tape.concat(&[&barrier, &cur], 0)?, cache.rows())
                }
                None => (cur.clone(), 0),
            };
            let positions: Vec<i64> = (0..(m_len + l) as i64).collect();
            let out = conformer_block(tape, &input, block, &self.config, &positions)?;
            cur = if m_len > 0 { tape.slice_rows(&out, m_len..m_len + l)? } else { out };
        }
        let memory = memory.map(|m| m.update(&layer_inputs)).transpose()?;
        Ok(StackOutput {
            output: cur,
            layer_inputs,
            memory_vars,
            memory,
        })
    }

    /// Inference forward pass. Returns the current-segment output and, when memory was
    /// given, the updated memory.
    pub fn forward(&self, x: &Tensor, memory: Option<&SegmentMemory>) -> Result<(Tensor, Option<SegmentMemory>)> {
        let mut tape = GradTape::no_grad();
        let input = tape.constant(x.detached());
        let out = self.forward_on_tape(&mut tape, &input, memory)?;
        Ok((out.output.value().clone(), out.memory))
    }
}
