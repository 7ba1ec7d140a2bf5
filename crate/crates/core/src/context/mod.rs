//! Text-side context: paragraph documents, per-token statistical features, embedding
//! providers, and the encoder that turns them into phoneme-aligned context embeddings.

mod document;
mod encoder;
mod features;
mod provider;

pub use document::{tokenize, LanguageMode, Lexicon, ParagraphDocument, Sentence, StubLexicon, Token};
pub use encoder::{
    fuse, sentence_context_embedding, token_context_embedding, ContextEncoder, ContextEncoderConfig,
    ContextEncoderWeights, ContextWindow, GruWeights, DEFAULT_CONTEXT_SIZE,
};
pub use features::{featurize, token_stats, CorpusStats, FeaturizedDocument, FeaturizedSentence, FeaturizedToken, TokenStatFeatures, TSF_DIM};
pub use provider::{EmbeddingProvider, HashEmbeddingProvider, StoredEmbeddingProvider, EMBEDDING_DIM};
