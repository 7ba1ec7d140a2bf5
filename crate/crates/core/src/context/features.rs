use serde::{Deserialize, Serialize};

use super::document::ParagraphDocument;
use crate::error::{Error, Result};

/// Number of per-token statistical features.
pub const TSF_DIM: usize = 6;

/// Position and length ratios for one token, all 1-based:
///
/// | | |
/// |---|---|
/// | f0 | token index in sentence / tokens in sentence |
/// | f1 | token index in paragraph / tokens in paragraph |
/// | f2 | sentence index in paragraph / sentences in paragraph |
/// | f3 | tokens in sentence / corpus max |
/// | f4 | tokens in paragraph / corpus max |
/// | f5 | sentences in paragraph / corpus max |
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenStatFeatures(pub [f64; TSF_DIM]);

impl TokenStatFeatures {
    pub fn values(&self) -> &[f64; TSF_DIM] {
        &self.0
    }
}

/// Corpus-wide maxima used to normalize the length features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub max_tokens_per_sentence: usize,
    pub max_tokens_per_paragraph: usize,
    pub max_sentences_per_paragraph: usize,
}

impl Default for CorpusStats {
    fn default() -> Self {
        CorpusStats {
            max_tokens_per_sentence: 64,
            max_tokens_per_paragraph: 512,
            max_sentences_per_paragraph: 32,
        }
    }
}

impl CorpusStats {
    pub fn new(max_tokens_per_sentence: usize, max_tokens_per_paragraph: usize, max_sentences_per_paragraph: usize) -> Result<Self> {
        let stats = CorpusStats {
            max_tokens_per_sentence,
            max_tokens_per_paragraph,
            max_sentences_per_paragraph,
        };
        stats.validate()?;
        Ok(stats)
    }

    /// The observed maxima of a set of documents.
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a ParagraphDocument>) -> Self {
        let mut stats = CorpusStats {
            max_tokens_per_sentence: 1,
            max_tokens_per_paragraph: 1,
            max_sentences_per_paragraph: 1,
        };
        for doc in docs {
            for s in &doc.sentences {
                stats.max_tokens_per_sentence = stats.max_tokens_per_sentence.max(s.tokens.len());
            }
            stats.max_tokens_per_paragraph = stats.max_tokens_per_paragraph.max(doc.num_tokens());
            stats.max_sentences_per_paragraph = stats.max_sentences_per_paragraph.max(doc.num_sentences());
        }
        stats
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("max_tokens_per_sentence", self.max_tokens_per_sentence),
            ("max_tokens_per_paragraph", self.max_tokens_per_paragraph),
            ("max_sentences_per_paragraph", self.max_sentences_per_paragraph),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

fn ratio(count: usize, max: usize, what: &str) -> f64 {
    if count > max {
        log::warn!("{what}: observed {count} exceeds corpus maximum {max}; clamping to 1");
        1.0
    } else {
        count as f64 / max as f64
    }
}

/// Features for every token, grouped by sentence.
pub fn token_stats(doc: &ParagraphDocument, stats: &CorpusStats) -> Result<Vec<Vec<TokenStatFeatures>>> {
    stats.validate()?;
    let n_sp = doc.num_sentences();
    let n_kp = doc.num_tokens();
    let f4 = ratio(n_kp, stats.max_tokens_per_paragraph, "tokens per paragraph");
    let f5 = ratio(n_sp, stats.max_sentences_per_paragraph, "sentences per paragraph");
    let mut i_kp = 0usize;
    let mut out = Vec::with_capacity(n_sp);
    for (s, sentence) in doc.sentences.iter().enumerate() {
        let n_ks = sentence.tokens.len();
        let f2 = (s + 1) as f64 / n_sp as f64;
        let f3 = ratio(n_ks, stats.max_tokens_per_sentence, "tokens per sentence");
        let mut row = Vec::with_capacity(n_ks);
        for k in 0..n_ks {
            i_kp += 1;
            row.push(TokenStatFeatures([
                (k + 1) as f64 / n_ks as f64,
                i_kp as f64 / n_kp as f64,
                f2,
                f3,
                f4,
                f5,
            ]));
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizedToken {
    pub text: String,
    pub phoneme_count: usize,
    pub f: TokenStatFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizedSentence {
    pub tokens: Vec<FeaturizedToken>,
}

/// The `featurize` output document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizedDocument {
    pub paragraph_id: String,
    pub sentences: Vec<FeaturizedSentence>,
    pub corpus_stats: CorpusStats,
}

pub fn featurize(doc: &ParagraphDocument, stats: &CorpusStats) -> Result<FeaturizedDocument> {
    let features = token_stats(doc, stats)?;
    let sentences = doc
        .sentences
        .iter()
        .zip(features)
        .map(|(s, f)| FeaturizedSentence {
            tokens: s
                .tokens
                .iter()
                .zip(f)
                .map(|(t, f)| FeaturizedToken {
                    text: t.text.clone(),
                    phoneme_count: t.phoneme_count,
                    f,
                })
                .collect(),
        })
        .collect();
    Ok(FeaturizedDocument {
        paragraph_id: doc.id.clone(),
        sentences,
        corpus_stats: *stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_sentence_doc() -> ParagraphDocument {
        ParagraphDocument::from_tokens("ex", &[&[("a", 1), ("b", 1), ("c", 1)], &[("d", 1), ("e", 1)]]).unwrap()
    }

    #[test]
    fn hand_computed_example() {
        let stats = CorpusStats::new(10, 20, 5).unwrap();
        let f = token_stats(&two_sentence_doc(), &stats).unwrap();
        assert_eq!(f[0][1].0, [2.0 / 3.0, 2.0 / 5.0, 1.0 / 2.0, 3.0 / 10.0, 5.0 / 20.0, 2.0 / 5.0]);
    }

    #[test]
    fn last_token_position_features_are_one() {
        let f = token_stats(&two_sentence_doc(), &CorpusStats::default()).unwrap();
        assert_eq!(&f[1][1].0[..3], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn single_token_paragraph() {
        let doc = ParagraphDocument::from_tokens("one", &[&[("x", 3)]]).unwrap();
        let f = token_stats(&doc, &CorpusStats::new(4, 8, 2).unwrap()).unwrap();
        assert_eq!(f[0][0].0, [1.0, 1.0, 1.0, 0.25, 0.125, 0.5]);
    }

    #[test]
    fn exceeding_maximum_clamps() {
        let f = token_stats(&two_sentence_doc(), &CorpusStats::new(2, 3, 1).unwrap()).unwrap();
        assert_eq!(f[0][0].0[3], 1.0);
        assert_eq!(f[1][0].0[3], 1.0);
        assert_eq!(f[0][0].0[4], 1.0);
        assert_eq!(f[0][0].0[5], 1.0);
    }

    #[test]
    fn zero_maximum_is_config_error() {
        let stats = CorpusStats {
            max_tokens_per_sentence: 0,
            max_tokens_per_paragraph: 0,
            max_sentences_per_paragraph: 3,
        };
        match token_stats(&two_sentence_doc(), &stats) {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn observed_stats() {
        let s = CorpusStats::from_documents([&two_sentence_doc()]);
        assert_eq!(s, CorpusStats::new(3, 5, 2).unwrap());
    }

    #[test]
    fn featurize_json_shape() {
        let out = featurize(&two_sentence_doc(), &CorpusStats::new(10, 20, 5).unwrap()).unwrap();
        let json = serde_json::to_value(&out).unwrap();
        assert_eq!(json["paragraph_id"], "ex");
        assert_eq!(json["sentences"][0]["tokens"][1]["f"][0], 2.0 / 3.0);
        assert_eq!(json["corpus_stats"]["max_tokens_per_paragraph"], 20);
        let back: FeaturizedDocument = serde_json::from_value(json).unwrap();
        assert_eq!(back, out);
    }
}
