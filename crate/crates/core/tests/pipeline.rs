use std::sync::Arc;

use ctxspeech_core::context::{
    tokenize, EmbeddingProvider, HashEmbeddingProvider, LanguageMode, StoredEmbeddingProvider, StubLexicon,
};
use ctxspeech_core::pipeline::{Durations, Model, ModelConfig};
use ctxspeech_core::{AttentionVariant, NamedTensors};

const TEXT: &str = "你好。今天很好。再见。";

fn tiny() -> ModelConfig {
    ModelConfig {
        encoder_blocks: 2,
        decoder_blocks: 1,
        hidden: 8,
        heads: 2,
        head_dim: 4,
        encoder_memory: 5,
        decoder_memory: 7,
        mel_bins: 4,
        embedding_dim: 12,
        phoneme_vocab: 16,
        frames_per_phoneme: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn shared_model_is_deterministic_across_threads() {
    let model = Arc::new(Model::build(tiny()).unwrap());
    let reference = model.synthesize_text(TEXT, &HashEmbeddingProvider::with_dim(1, 12)).unwrap();
    let handles: Vec<_> = (0..3)
        .map(|_| {
            let model = Arc::clone(&model);
            std::thread::spawn(move || model.synthesize_text(TEXT, &HashEmbeddingProvider::with_dim(1, 12)).unwrap().mel)
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), reference.mel);
    }
    let rebuilt = Model::build(tiny()).unwrap();
    assert_eq!(rebuilt.checkpoint(), model.checkpoint());
}

#[test]
fn stored_embeddings_reproduce_hash_provider() {
    let hash = HashEmbeddingProvider::with_dim(9, 12);
    let doc = tokenize(TEXT, LanguageMode::Chinese, &StubLexicon::new()).unwrap();
    let mut table = NamedTensors::new();
    for s in &doc.sentences {
        table.insert(StoredEmbeddingProvider::sentence_key(&s.text), hash.sentence_embedding(&s.text).unwrap());
        for t in &s.tokens {
            table.insert(StoredEmbeddingProvider::token_key(&t.text), hash.token_embedding(&t.text, &s.text).unwrap());
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.ctxt");
    table.save(&path).unwrap();
    let stored = StoredEmbeddingProvider::load(&path).unwrap();
    let model = Model::build(tiny()).unwrap();
    let a = model.synthesize_text(TEXT, &hash).unwrap();
    let b = model.synthesize_text(TEXT, &stored).unwrap();
    assert_eq!(a.mel, b.mel);

    let err = model.synthesize_text("新的句子。", &stored).unwrap_err().to_string();
    assert!(err.contains("sentence 0"), "{err}");
}

#[test]
fn per_sentence_durations_set_boundaries() {
    let model = Model::build(tiny()).unwrap();
    let doc = tokenize("你好。再见。", LanguageMode::Chinese, &StubLexicon::new()).unwrap();
    let p = doc.sentences[0].phoneme_total();
    let second: Vec<usize> = (1..=p).collect();
    let f2 = p * (p + 1) / 2;
    let durations = Durations::PerSentence(vec![vec![1; p], second]);
    let out = model.synthesize_paragraph(&doc, &durations, &HashEmbeddingProvider::with_dim(1, 12)).unwrap();
    assert_eq!(out.boundaries, vec![0..p, p..p + f2]);
    assert_eq!(out.mel.shape(), &[p + f2, 4]);
    assert_eq!(out.decoder_memory.unwrap().cached_len(), f2.min(7));
    assert_eq!(out.encoder_memory.unwrap().cached_len(), 5);

    let zero = Durations::PerSentence(vec![vec![1; p], vec![0; p]]);
    assert!(model.synthesize_paragraph(&doc, &zero, &HashEmbeddingProvider::with_dim(1, 12)).is_err());
    let short = Durations::PerSentence(vec![vec![1; p]]);
    let err = model.synthesize_paragraph(&doc, &short, &HashEmbeddingProvider::with_dim(1, 12)).unwrap_err();
    assert!(err.to_string().contains("sentence 1"), "{err}");
}

#[test]
fn ablations_change_output_but_not_shape() {
    let provider = HashEmbeddingProvider::with_dim(1, 12);
    let base = Model::build(tiny()).unwrap().synthesize_text(TEXT, &provider).unwrap();
    for config in [
        ModelConfig { use_memory: false, ..tiny() },
        ModelConfig { use_context_encoder: false, ..tiny() },
        ModelConfig { variant: AttentionVariant::Softmax, ..tiny() },
    ] {
        let out = Model::build(config).unwrap().synthesize_text(TEXT, &provider).unwrap();
        assert_eq!(out.mel.shape(), base.mel.shape());
        assert_eq!(out.boundaries, base.boundaries);
        assert!(out.mel.max_abs_diff(&base.mel).unwrap() > 1e-12);
    }
    let first_only = Model::build(ModelConfig { use_memory: false, ..tiny() })
        .unwrap()
        .synthesize_text(TEXT, &provider)
        .unwrap();
    let r = base.boundaries[0].clone();
    assert_eq!(first_only.mel.slice_rows(r.clone()).unwrap(), base.mel.slice_rows(r).unwrap());
}

#[test]
fn invalid_config_reports_every_problem() {
    let err = Model::build(ModelConfig { heads: 5, context_size: 0, mel_bins: 0, ..ModelConfig::default() })
        .unwrap_err()
        .to_string();
    for needle in ["heads", "context", "mel"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
}
