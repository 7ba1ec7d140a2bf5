//! End-to-end forward path: paragraph → context encoder → phoneme fusion → encoder with
//! memory → length regulation → decoder with memory → mel frames.
//!
//! Weights are synthetic and drawn from the configured seed; nothing here is trained.

use std::ops::Range;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::attention::{AttentionConfig, AttentionVariant, RpeSettings};
use crate::conformer::{ConformerStack, StackConfig};
use crate::context::{
    fuse, sentence_context_embedding, token_context_embedding, token_stats, tokenize, ContextEncoder,
    ContextEncoderConfig, ContextWindow, CorpusStats, EmbeddingProvider, LanguageMode, ParagraphDocument,
    StubLexicon, TokenStatFeatures, DEFAULT_CONTEXT_SIZE, EMBEDDING_DIM,
};
use crate::error::{Error, Result};
use crate::memory::{MemoryConfig, SegmentMemory, DECODER_MEMORY_LEN, ENCODER_MEMORY_LEN};
use crate::tensor::{NamedTensors, Tensor};

const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub encoder_memory: usize,
    pub decoder_memory: usize,
    pub context_size: usize,
    pub mel_bins: usize,
    pub embedding_dim: usize,
    pub phoneme_vocab: usize,
    pub variant: AttentionVariant,
    pub rpe: RpeSettings,
    pub seed: u64,
    /// Seed for the hash embedding provider used when no stored embeddings are given.
    pub embedding_seed: u64,
    /// Duration stub: frames per phoneme when no durations are supplied.
    pub frames_per_phoneme: usize,
    pub use_memory: bool,
    pub use_context_encoder: bool,
    pub sinusoidal_positions: bool,
    pub language: LanguageMode,
    pub corpus_stats: CorpusStats,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_blocks: 4,
            decoder_blocks: 4,
            hidden: 384,
            heads: 4,
            head_dim: 96,
            encoder_memory: ENCODER_MEMORY_LEN,
            decoder_memory: DECODER_MEMORY_LEN,
            context_size: DEFAULT_CONTEXT_SIZE,
            mel_bins: 80,
            embedding_dim: EMBEDDING_DIM,
            phoneme_vocab: 256,
            variant: AttentionVariant::LinearizedRpe,
            rpe: RpeSettings::default(),
            seed: 42,
            embedding_seed: 42,
            frames_per_phoneme: 4,
            use_memory: true,
            use_context_encoder: true,
            sinusoidal_positions: false,
            language: LanguageMode::Chinese,
            corpus_stats: CorpusStats::default(),
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, in a stable order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.heads == 0 || self.head_dim == 0 {
            p.push(format!("heads ({}) and head_dim ({}) must be positive", self.heads, self.head_dim));
        }
        if self.hidden != self.heads * self.head_dim {
            p.push(format!(
                "hidden ({}) must equal heads ({}) × head_dim ({})",
                self.hidden, self.heads, self.head_dim
            ));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            p.push("encoder and decoder need at least one block".into());
        }
        if self.context_size.is_multiple_of(2) {
            p.push(format!("context size must be odd, got {}", self.context_size));
        }
        for (name, v) in [
            ("mel_bins", self.mel_bins),
            ("embedding_dim", self.embedding_dim),
            ("phoneme_vocab", self.phoneme_vocab),
            ("frames_per_phoneme", self.frames_per_phoneme),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if !(self.rpe.decay.is_finite() && self.rpe.decay > 0.0) {
            p.push(format!("rpe decay must be finite and positive, got {}", self.rpe.decay));
        }
        if let Err(Error::Config(c)) = self.corpus_stats.validate() {
            p.extend(c);
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

    fn stack_config(&self, blocks: usize) -> Result<StackConfig> {
        let attention = AttentionConfig::with_rpe(self.variant, self.heads, self.head_dim, &self.rpe)?;
        let mut cfg = StackConfig::new(blocks, attention);
        cfg.sinusoidal_positions = self.sinusoidal_positions;
        Ok(cfg)
    }

    fn context_config(&self) -> ContextEncoderConfig {
        ContextEncoderConfig {
            embed_dim: self.embedding_dim,
            hidden: self.hidden,
            context_size: self.context_size,
            ..ContextEncoderConfig::default()
        }
    }

    pub fn encoder_memory_config(&self) -> MemoryConfig {
        MemoryConfig {
            num_layers: self.encoder_blocks,
            capacity: self.encoder_memory,
            hidden: self.hidden,
        }
    }

    pub fn decoder_memory_config(&self) -> MemoryConfig {
        MemoryConfig {
            num_layers: self.decoder_blocks,
            capacity: self.decoder_memory,
            hidden: self.hidden,
        }
    }
}

/// Expands row `p` of `x` to `durations[p]` consecutive rows.
pub fn length_regulate(x: &Tensor, durations: &[usize]) -> Result<Tensor> {
    if x.rank() != 2 || durations.len() != x.rows() {
        return Err(Error::Input(format!(
            "{} durations for {} phoneme rows",
            durations.len(),
            if x.rank() == 2 { x.rows() } else { 0 }
        )));
    }
    if let Some(p) = durations.iter().position(|&d| d == 0) {
        return Err(Error::Input(format!("duration of phoneme {p} is zero")));
    }
    x.repeat_rows(durations)
}

/// Where per-phoneme frame counts come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Durations {
    /// Every phoneme lasts this many frames.
    Constant(usize),
    /// One list per sentence, one entry per phoneme.
    PerSentence(Vec<Vec<usize>>),
}

impl Durations {
    fn for_sentence(&self, index: usize, phonemes: usize) -> Result<Vec<usize>> {
        match self {
            Durations::Constant(n) => Ok(vec![*n; phonemes]),
            Durations::PerSentence(all) => {
                let d = all
                    .get(index)
                    .ok_or_else(|| Error::Input(format!("no durations supplied for sentence {index}")))?;
                if d.len() != phonemes {
                    return Err(Error::Input(format!("{} durations for {phonemes} phonemes", d.len())));
                }
                Ok(d.clone())
            }
        }
    }
}

/// Wall time spent in each stage, summed over sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub context: Duration,
    pub encoder: Duration,
    pub length_regulation: Duration,
    pub decoder: Duration,
    pub output: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.context + self.encoder + self.length_regulation + self.decoder + self.output
    }

    fn accumulate(&mut self, other: &StageTimings) {
        self.context += other.context;
        self.encoder += other.encoder;
        self.length_regulation += other.length_regulation;
        self.decoder += other.decoder;
        self.output += other.output;
    }
}

/// Output for one sentence.
#[derive(Debug, Clone)]
pub struct SentenceOutput {
    /// `[frames × mel_bins]`
    pub mel: Tensor,
    pub encoder_memory: Option<SegmentMemory>,
    pub decoder_memory: Option<SegmentMemory>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    /// `[Σ durations × mel_bins]`
    pub mel: Tensor,
    /// Frame range of each sentence; consecutive and covering the whole mel.
    pub boundaries: Vec<Range<usize>>,
    pub encoder_memory: Option<SegmentMemory>,
    pub decoder_memory: Option<SegmentMemory>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingSummary {
    pub context_ms: f64,
    pub encoder_ms: f64,
    pub length_regulation_ms: f64,
    pub decoder_ms: f64,
    pub output_ms: f64,
    pub total_ms: f64,
}

/// JSON-friendly description of a [`SynthesisResult`].
#[derive(Debug, Clone, Serialize)]
pub struct SynthesisSummary {
    pub mel_shape: Vec<usize>,
    pub boundaries: Vec<[usize; 2]>,
    pub encoder_memory_frames: Option<usize>,
    pub decoder_memory_frames: Option<usize>,
    pub timings: TimingSummary,
}

impl SynthesisResult {
    pub fn summary(&self) -> SynthesisSummary {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let t = &self.timings;
        SynthesisSummary {
            mel_shape: self.mel.shape().to_vec(),
            boundaries: self.boundaries.iter().map(|r| [r.start, r.end]).collect(),
            encoder_memory_frames: self.encoder_memory.as_ref().map(SegmentMemory::cached_len),
            decoder_memory_frames: self.decoder_memory.as_ref().map(SegmentMemory::cached_len),
            timings: TimingSummary {
                context_ms: ms(t.context),
                encoder_ms: ms(t.encoder),
                length_regulation_ms: ms(t.length_regulation),
                decoder_ms: ms(t.decoder),
                output_ms: ms(t.output),
                total_ms: ms(t.total()),
            },
        }
    }
}

/// An immutable, shareable model.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    phoneme_embedding: Tensor,
    context: ContextEncoder,
    encoder: ConformerStack,
    /// Added to every length-regulated frame before the decoder.
    decoder_input: Tensor,
    decoder: ConformerStack,
    mel_proj: Tensor,
    mel_bias: Tensor,
}

impl Model {
    /// Draws all weights from `config.seed`, uniform in `[-0.05, 0.05]` (layer norms start
    /// as identity). Bit-reproducible.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let uniform = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::rand_uniform(shape, -INIT_RANGE, INIT_RANGE, rng);
        let phoneme_embedding = uniform(&[config.phoneme_vocab, h], &mut rng);
        let context = ContextEncoder::random(config.context_config(), &mut rng)?;
        let encoder = ConformerStack::random(config.stack_config(config.encoder_blocks)?, &mut rng)?;
        let decoder_input = uniform(&[h], &mut rng);
        let decoder = ConformerStack::random(config.stack_config(config.decoder_blocks)?, &mut rng)?;
        let mel_proj = uniform(&[h, config.mel_bins], &mut rng);
        let mel_bias = uniform(&[config.mel_bins], &mut rng);
        Ok(Model {
            config,
            phoneme_embedding,
            context,
            encoder,
            decoder_input,
            decoder,
            mel_proj,
            mel_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// All weights by name.
    pub fn checkpoint(&self) -> NamedTensors {
        let mut out = NamedTensors::new();
        out.insert("phoneme_embedding", self.phoneme_embedding.clone());
        self.context.weights.export("context", &mut out);
        self.encoder.export("enc", &mut out);
        out.insert("dec.input", self.decoder_input.clone());
        self.decoder.export("dec", &mut out);
        out.insert("mel_proj", self.mel_proj.clone());
        out.insert("mel_bias", self.mel_bias.clone());
        out
    }

    pub fn fresh_encoder_memory(&self) -> SegmentMemory {
        SegmentMemory::new(self.config.encoder_memory_config())
    }

    pub fn fresh_decoder_memory(&self) -> SegmentMemory {
        SegmentMemory::new(self.config.decoder_memory_config())
    }

    /// Phoneme ids for a sentence: phoneme `j` of a token hashes `(text, j)` into the vocabulary.
    pub fn phoneme_ids(&self, doc: &ParagraphDocument, sentence: usize) -> Vec<usize> {
        let vocab = self.config.phoneme_vocab as u64;
        doc.sentences[sentence]
            .tokens
            .iter()
            .flat_map(|t| {
                (0..t.phoneme_count).map(move |j| {
                    let mut hasher = Sha1::new();
                    hasher.update(t.text.as_bytes());
                    hasher.update((j as u32).to_le_bytes());
                    let d = hasher.finalize();
                    (u64::from_le_bytes(d[..8].try_into().expect("sha1 has 20 bytes")) % vocab) as usize
                })
            })
            .collect()
    }

    /// Phoneme embeddings for a sentence, `[P × hidden]`, before any context is added.
    pub fn phoneme_embeddings(&self, doc: &ParagraphDocument, sentence: usize) -> Tensor {
        let h = self.config.hidden;
        let ids = self.phoneme_ids(doc, sentence);
        let mut data = Vec::with_capacity(ids.len() * h);
        for id in &ids {
            data.extend_from_slice(self.phoneme_embedding.row(*id));
        }
        Tensor::from_parts(vec![ids.len(), h], data)
    }

    /// Encoder input for one sentence: phoneme embeddings plus both context embeddings
    /// (or the bare phoneme embeddings when the context encoder is switched off).
    pub fn encoder_input(
        &self,
        doc: &ParagraphDocument,
        sentence: usize,
        features: &[TokenStatFeatures],
        provider: &dyn EmbeddingProvider,
    ) -> Result<Tensor> {
        let phonemes = self.phoneme_embeddings(doc, sentence);
        if !self.config.use_context_encoder {
            return Ok(phonemes);
        }
        let tok = token_context_embedding(&self.context, doc, sentence, features, provider)?;
        let window = ContextWindow::new(doc.num_sentences(), sentence, self.config.context_size)?;
        let sent = sentence_context_embedding(&self.context, doc, &window, provider)?;
        fuse(&phonemes, &tok, &sent)
    }

    /// Runs one sentence. Memories are used only when supplied and `use_memory` is set.
    pub fn synthesize_sentence(
        &self,
        doc: &ParagraphDocument,
        sentence: usize,
        features: &[TokenStatFeatures],
        durations: &[usize],
        provider: &dyn EmbeddingProvider,
        encoder_memory: Option<&SegmentMemory>,
        decoder_memory: Option<&SegmentMemory>,
    ) -> Result<SentenceOutput> {
        if sentence >= doc.num_sentences() {
            return Err(Error::Input(format!("sentence {sentence} out of range")));
        }
        let (enc_mem, dec_mem) = if self.config.use_memory {
            (encoder_memory, decoder_memory)
        } else {
            (None, None)
        };
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let x = self.encoder_input(doc, sentence, features, provider)?;
        timings.context = t.elapsed();

        let t = Instant::now();
        let (encoded, encoder_memory) = self.encoder.forward(&x, enc_mem)?;
        timings.encoder = t.elapsed();

        let t = Instant::now();
        let frames = length_regulate(&encoded, durations)?.broadcast_add(&self.decoder_input)?;
        timings.length_regulation = t.elapsed();

        let t = Instant::now();
        let (decoded, decoder_memory) = self.decoder.forward(&frames, dec_mem)?;
        timings.decoder = t.elapsed();

        let t = Instant::now();
        let mel = decoded.matmul(&self.mel_proj)?.broadcast_add(&self.mel_bias)?;
        timings.output = t.elapsed();

        Ok(SentenceOutput {
            mel,
            encoder_memory,
            decoder_memory,
            timings,
        })
    }

    /// Processes sentences in order, carrying both memories from one sentence to the next.
    /// Errors are tagged with the sentence index.
    pub fn synthesize_paragraph(
        &self,
        doc: &ParagraphDocument,
        durations: &Durations,
        provider: &dyn EmbeddingProvider,
    ) -> Result<SynthesisResult> {
        let t = Instant::now();
        let features = token_stats(doc, &self.config.corpus_stats)?;
        let mut timings = StageTimings {
            context: t.elapsed(),
            ..Default::default()
        };
        let mut enc_mem = self.config.use_memory.then(|| self.fresh_encoder_memory());
        let mut dec_mem = self.config.use_memory.then(|| self.fresh_decoder_memory());
        let mut mels = Vec::with_capacity(doc.num_sentences());
        let mut boundaries = Vec::with_capacity(doc.num_sentences());
        let mut start = 0;
        for (s, f) in features.iter().enumerate() {
            let out = durations
                .for_sentence(s, doc.sentences[s].phoneme_total())
                .and_then(|d| self.synthesize_sentence(doc, s, f, &d, provider, enc_mem.as_ref(), dec_mem.as_ref()))
                .map_err(|e| e.in_sentence(s))?;
            let frames = out.mel.rows();
            boundaries.push(start..start + frames);
            start += frames;
            timings.accumulate(&out.timings);
            enc_mem = out.encoder_memory;
            dec_mem = out.decoder_memory;
            mels.push(out.mel);
        }
        let refs: Vec<&Tensor> = mels.iter().collect();
        Ok(SynthesisResult {
            mel: Tensor::concat(&refs, 0)?,
            boundaries,
            encoder_memory: enc_mem,
            decoder_memory: dec_mem,
            timings,
        })
    }

    /// Tokenizes `text` with the stub lexicon and synthesizes it with constant durations.
    pub fn synthesize_text(&self, text: &str, provider: &dyn EmbeddingProvider) -> Result<SynthesisResult> {
        let doc = tokenize(text, self.config.language, &StubLexicon::new())?;
        self.synthesize_paragraph(&doc, &Durations::Constant(self.config.frames_per_phoneme), provider)
    }
}
