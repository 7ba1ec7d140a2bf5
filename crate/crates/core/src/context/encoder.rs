use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::document::ParagraphDocument;
use super::features::{TokenStatFeatures, TSF_DIM};
use super::provider::{EmbeddingProvider, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, Padding, Tensor};

/// Sentences in a full context window: five before, the center, five after.
pub const DEFAULT_CONTEXT_SIZE: usize = 11;

const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextEncoderConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub conv_kernel: usize,
    /// Window size in sentences; must be odd.
    pub context_size: usize,
    pub dropout: f64,
    /// Dropout is skipped unless this is set.
    pub apply_dropout: bool,
    pub dropout_seed: u64,
    pub layer_norm_eps: f64,
}

impl Default for ContextEncoderConfig {
    fn default() -> Self {
        ContextEncoderConfig {
            embed_dim: EMBEDDING_DIM,
            hidden: 384,
            conv_kernel: 5,
            context_size: DEFAULT_CONTEXT_SIZE,
            dropout: 0.5,
            apply_dropout: false,
            dropout_seed: 0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ContextEncoderConfig {
    /// Width of a token row before the convolution: embedding plus statistical features.
    pub fn token_input_dim(&self) -> usize {
        self.embed_dim + TSF_DIM
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.embed_dim == 0 || self.hidden == 0 || self.conv_kernel == 0 {
            p.push("context encoder widths and kernel must be positive".to_string());
        }
        if self.context_size.is_multiple_of(2) {
            p.push(format!("context size must be odd, got {}", self.context_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            p.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Standard GRU cell, row-vector convention `x · W + h · U + b`.
#[derive(Debug, Clone)]
pub struct GruWeights {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruWeights {
    fn build(input: usize, hidden: usize, mut init: impl FnMut(&[usize]) -> Tensor) -> Self {
        GruWeights {
            w_z: init(&[input, hidden]),
            u_z: init(&[hidden, hidden]),
            b_z: init(&[hidden]),
            w_r: init(&[input, hidden]),
            u_r: init(&[hidden, hidden]),
            b_r: init(&[hidden]),
            w_h: init(&[input, hidden]),
            u_h: init(&[hidden, hidden]),
            b_h: init(&[hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u_z.rows()
    }

    /// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
    /// `ĥ = tanh(xW_h + (r⊙h)U_h + b_h)`, `h' = (1−z)⊙h + z⊙ĥ`. `x` and `h` are `[1 × ·]`.
    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gate = |w: &Tensor, u: &Tensor, b: &Tensor, h: &Tensor| -> Result<Tensor> {
            x.matmul(w)?.add(&h.matmul(u)?)?.broadcast_add(b)
        };
        let z = gate(&self.w_z, &self.u_z, &self.b_z, h)?.sigmoid();
        let r = gate(&self.w_r, &self.u_r, &self.b_r, h)?.sigmoid();
        let cand = gate(&self.w_h, &self.u_h, &self.b_h, &r.mul(h)?)?.tanh();
        cand.mul(&z)?.add(&z.map(|v| 1.0 - v).mul(h)?)
    }

    /// Runs left to right from a zero state and returns the final state `[1 × hidden]`.
    pub fn run(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut h = Tensor::zeros(&[1, self.hidden()]);
        for x in inputs {
            h = self.step(x, &h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct ContextEncoderWeights {
    /// `[K × (E+6) × H]`
    pub token_conv: Tensor,
    pub token_conv_bias: Tensor,
    pub token_ln_gamma: Tensor,
    pub token_ln_beta: Tensor,
    /// `[H × H]`
    pub token_proj: Tensor,
    pub token_proj_bias: Tensor,
    /// `[E × H]`, shared by window sentences and the current sentence.
    pub sent_in: Tensor,
    pub sent_in_bias: Tensor,
    pub gru: GruWeights,
    /// `[2H × H]`
    pub sent_out: Tensor,
    pub sent_out_bias: Tensor,
}

impl ContextEncoderWeights {
    /// Uniform `[-0.05, 0.05]`; the layer norm starts as identity.
    pub fn random<R: Rng + ?Sized>(config: &ContextEncoderConfig, rng: &mut R) -> Self {
        let mut w = Self::build(config, |s| Tensor::rand_uniform(s, -INIT_RANGE, INIT_RANGE, rng));
        w.token_ln_gamma = Tensor::ones(&[config.hidden]);
        w.token_ln_beta = Tensor::zeros(&[config.hidden]);
        w
    }

    /// All zeros, layer-norm gain included: both paths then output exact zeros.
    pub fn zeros(config: &ContextEncoderConfig) -> Self {
        Self::build(config, Tensor::zeros)
    }

    fn build(config: &ContextEncoderConfig, mut init: impl FnMut(&[usize]) -> Tensor) -> Self {
        let (e, h, k) = (config.embed_dim, config.hidden, config.conv_kernel);
        ContextEncoderWeights {
            token_conv: init(&[k, config.token_input_dim(), h]),
            token_conv_bias: init(&[h]),
            token_ln_gamma: init(&[h]),
            token_ln_beta: init(&[h]),
            token_proj: init(&[h, h]),
            token_proj_bias: init(&[h]),
            sent_in: init(&[e, h]),
            sent_in_bias: init(&[h]),
            gru: GruWeights::build(h, h, &mut init),
            sent_out: init(&[2 * h, h]),
            sent_out_bias: init(&[h]),
        }
    }

    pub fn export(&self, prefix: &str, out: &mut NamedTensors) {
        let g = &self.gru;
        for (name, t) in [
            ("token_conv", &self.token_conv),
            ("token_conv_bias", &self.token_conv_bias),
            ("token_ln_gamma", &self.token_ln_gamma),
            ("token_ln_beta", &self.token_ln_beta),
            ("token_proj", &self.token_proj),
            ("token_proj_bias", &self.token_proj_bias),
            ("sent_in", &self.sent_in),
            ("sent_in_bias", &self.sent_in_bias),
            ("gru.w_z", &g.w_z),
            ("gru.u_z", &g.u_z),
            ("gru.b_z", &g.b_z),
            ("gru.w_r", &g.w_r),
            ("gru.u_r", &g.u_r),
            ("gru.b_r", &g.b_r),
            ("gru.w_h", &g.w_h),
            ("gru.u_h", &g.u_h),
            ("gru.b_h", &g.b_h),
            ("sent_out", &self.sent_out),
            ("sent_out_bias", &self.sent_out_bias),
        ] {
            out.insert(format!("{prefix}.{name}"), t.clone());
        }
    }
}

/// Configuration plus weights.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub config: ContextEncoderConfig,
    pub weights: ContextEncoderWeights,
}

impl ContextEncoder {
    pub fn random<R: Rng + ?Sized>(config: ContextEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let weights = ContextEncoderWeights::random(&config, rng);
        Ok(ContextEncoder { config, weights })
    }

    pub fn zeros(config: ContextEncoderConfig) -> Result<Self> {
        config.validate()?;
        let weights = ContextEncoderWeights::zeros(&config);
        Ok(ContextEncoder { config, weights })
    }

    fn dropout(&self, x: Tensor, salt: u64) -> Result<Tensor> {
        if self.config.apply_dropout {
            x.dropout(self.config.dropout, self.config.dropout_seed ^ salt)
        } else {
            Ok(x)
        }
    }

    /// Token rows `[TBE ∘ TSF]` repeated by phoneme count: `[P × (E+6)]`.
    pub fn token_path_input(
        &self,
        doc: &ParagraphDocument,
        sentence: usize,
        features: &[TokenStatFeatures],
        provider: &dyn EmbeddingProvider,
    ) -> Result<Tensor> {
        let s = sentence_at(doc, sentence)?;
        if features.len() != s.tokens.len() {
            return Err(Error::Input(format!(
                "sentence {sentence} has {} tokens but {} feature rows",
                s.tokens.len(),
                features.len()
            )));
        }
        let width = self.config.token_input_dim();
        let mut data = Vec::with_capacity(s.tokens.len() * width);
        for (k, (token, f)) in s.tokens.iter().zip(features).enumerate() {
            let position = || format!("sentence {sentence}, token {k} (`{}`)", token.text);
            let tbe = provider.token_embedding(&token.text, &s.text).map_err(|e| Error::Provider {
                position: position(),
                message: e.to_string(),
            })?;
            self.check_embedding(&tbe, position)?;
            data.extend_from_slice(tbe.data());
            data.extend_from_slice(f.values());
        }
        Tensor::from_parts(vec![s.tokens.len(), width], data).repeat_rows(&s.phoneme_counts())
    }

    fn check_embedding(&self, v: &Tensor, position: impl Fn() -> String) -> Result<()> {
        if v.numel() != self.config.embed_dim {
            return Err(Error::Provider {
                position: position(),
                message: format!("embedding has {} values, encoder expects {}", v.numel(), self.config.embed_dim),
            });
        }
        Ok(())
    }

    fn project_sentence(&self, doc: &ParagraphDocument, s: usize, provider: &dyn EmbeddingProvider) -> Result<Tensor> {
        let text = &doc.sentences[s].text;
        let position = || format!("sentence {s}");
        let e = provider.sentence_embedding(text).map_err(|err| Error::Provider {
            position: position(),
            message: err.to_string(),
        })?;
        self.check_embedding(&e, position)?;
        e.reshape(&[1, self.config.embed_dim])?
            .matmul(&self.weights.sent_in)?
            .broadcast_add(&self.weights.sent_in_bias)
    }

    /// Paragraph-level representation: final GRU state over the projected window sentences.
    pub fn paragraph_representation(
        &self,
        doc: &ParagraphDocument,
        window: &ContextWindow,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Tensor> {
        let inputs = window
            .indices()
            .map(|s| self.project_sentence(doc, s, provider))
            .collect::<Result<Vec<_>>>()?;
        self.weights.gru.run(&inputs)
    }
}

fn sentence_at(doc: &ParagraphDocument, index: usize) -> Result<&super::document::Sentence> {
    doc.sentences
        .get(index)
        .ok_or_else(|| Error::Input(format!("sentence {index} out of range for {} sentences", doc.num_sentences())))
}

/// Token path: `[TBE ∘ TSF]` → repeat per phoneme → conv → ReLU → layer norm → dropout →
/// projection. Output `[P × H]` with `P` the sentence's phoneme total.
pub fn token_context_embedding(
    encoder: &ContextEncoder,
    doc: &ParagraphDocument,
    sentence: usize,
    features: &[TokenStatFeatures],
    provider: &dyn EmbeddingProvider,
) -> Result<Tensor> {
    let w = &encoder.weights;
    let x = encoder.token_path_input(doc, sentence, features, provider)?;
    let h = x
        .conv1d(&w.token_conv, Some(&w.token_conv_bias), Padding::Same)?
        .relu()
        .layer_norm(&w.token_ln_gamma, &w.token_ln_beta, encoder.config.layer_norm_eps)?;
    let h = encoder.dropout(h, 2 * sentence as u64)?;
    h.matmul(&w.token_proj)?.broadcast_add(&w.token_proj_bias)
}

/// Sentence path: `[PCR ∘ proj(current)]` → ReLU → dropout → linear, repeated over the
/// current sentence's phonemes. Output `[P × H]`.
pub fn sentence_context_embedding(
    encoder: &ContextEncoder,
    doc: &ParagraphDocument,
    window: &ContextWindow,
    provider: &dyn EmbeddingProvider,
) -> Result<Tensor> {
    let w = &encoder.weights;
    let center = window.center();
    let phonemes = sentence_at(doc, center)?.phoneme_total();
    if window.end() > doc.num_sentences() {
        return Err(Error::Input(format!(
            "window {:?} exceeds {} sentences",
            window.indices(),
            doc.num_sentences()
        )));
    }
    let pcr = encoder.paragraph_representation(doc, window, provider)?;
    let current = encoder.project_sentence(doc, center, provider)?;
    let h = Tensor::concat(&[&pcr, &current], 1)?.relu();
    let h = encoder.dropout(h, 2 * center as u64 + 1)?;
    h.matmul(&w.sent_out)?
        .broadcast_add(&w.sent_out_bias)?
        .repeat_rows(&[phonemes])
}

/// Elementwise sum of phoneme embeddings and both context embeddings.
pub fn fuse(phonemes: &Tensor, token_ctx: &Tensor, sentence_ctx: &Tensor) -> Result<Tensor> {
    let rows = |t: &Tensor| if t.rank() == 2 { t.rows() } else { 0 };
    let (p, t, s) = (rows(phonemes), rows(token_ctx), rows(sentence_ctx));
    if p != t || p != s {
        return Err(Error::Alignment {
            phoneme: p,
            token: t,
            sentence: s,
        });
    }
    phonemes.add(token_ctx)?.add(sentence_ctx)
}

/// Sentences `[center − c/2, center + c/2]` clipped to the paragraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextWindow {
    center: usize,
    start: usize,
    end: usize,
}

impl ContextWindow {
    pub fn new(num_sentences: usize, center: usize, context_size: usize) -> Result<Self> {
        if context_size.is_multiple_of(2) {
            return Err(Error::config(format!("context size must be odd, got {context_size}")));
        }
        if center >= num_sentences {
            return Err(Error::Input(format!("center {center} out of range for {num_sentences} sentences")));
        }
        let half = context_size / 2;
        Ok(ContextWindow {
            center,
            start: center.saturating_sub(half),
            end: (center + half + 1).min(num_sentences),
        })
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn indices(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
