use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::{Error, Result};

const TERMINALS: &[char] = &['。', '！', '？', '.', '!', '?'];
const CLOSERS: &[char] = &['"', '\'', '”', '’', '」', '』', '）', ')', '》'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub phoneme_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    /// Source text including punctuation; this is what sentence embeddings see.
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn phoneme_total(&self) -> usize {
        self.tokens.iter().map(|t| t.phoneme_count).sum()
    }

    pub fn phoneme_counts(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.phoneme_count).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParagraphDocument {
    pub id: String,
    pub sentences: Vec<Sentence>,
}

impl ParagraphDocument {
    /// Checks that there is at least one sentence, every sentence has a token and every
    /// token at least one phoneme.
    pub fn new(id: impl Into<String>, sentences: Vec<Sentence>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Input("a paragraph needs at least one sentence".into()));
        }
        for (s, sentence) in sentences.iter().enumerate() {
            if sentence.tokens.is_empty() {
                return Err(Error::Input(format!("sentence {s} has no tokens")));
            }
            if let Some(k) = sentence.tokens.iter().position(|t| t.phoneme_count == 0) {
                return Err(Error::Input(format!("token {k} of sentence {s} has zero phonemes")));
            }
        }
        Ok(ParagraphDocument { id: id.into(), sentences })
    }

    /// Builds a document from token texts with explicit phoneme counts.
    pub fn from_tokens(id: impl Into<String>, sentences: &[&[(&str, usize)]]) -> Result<Self> {
        let sentences = sentences
            .iter()
            .map(|tokens| Sentence {
                text: tokens.iter().map(|(t, _)| *t).collect::<Vec<_>>().join(" "),
                tokens: tokens
                    .iter()
                    .map(|(t, n)| Token {
                        text: t.to_string(),
                        phoneme_count: *n,
                    })
                    .collect(),
            })
            .collect();
        Self::new(id, sentences)
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn phoneme_total(&self) -> usize {
        self.sentences.iter().map(Sentence::phoneme_total).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageMode {
    /// One token per character.
    #[default]
    Chinese,
    /// Whitespace-separated words with surrounding punctuation stripped.
    English,
}

impl fmt::Display for LanguageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LanguageMode::Chinese => "chinese",
            LanguageMode::English => "english",
        })
    }
}

impl FromStr for LanguageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chinese" | "zh" => Ok(LanguageMode::Chinese),
            "english" | "en" => Ok(LanguageMode::English),
            other => Err(Error::Input(format!("unknown language mode `{other}`"))),
        }
    }
}

/// Source of per-token phoneme counts.
pub trait Lexicon {
    fn phoneme_count(&self, token: &str, mode: LanguageMode) -> usize;
}

/// Three phonemes per Chinese character (initial, final, tone); English words get one
/// phoneme per two letters. Per-token overrides win.
#[derive(Debug, Clone, Default)]
pub struct StubLexicon {
    overrides: HashMap<String, usize>,
}

impl StubLexicon {
    pub const CHINESE_PHONEMES_PER_CHAR: usize = 3;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_override(mut self, token: impl Into<String>, count: usize) -> Self {
        self.overrides.insert(token.into(), count.max(1));
        self
    }
}

impl Lexicon for StubLexicon {
    fn phoneme_count(&self, token: &str, mode: LanguageMode) -> usize {
        if let Some(&n) = self.overrides.get(token) {
            return n;
        }
        match mode {
            LanguageMode::Chinese => Self::CHINESE_PHONEMES_PER_CHAR,
            LanguageMode::English => token.chars().filter(|c| c.is_alphanumeric()).count().div_ceil(2).max(1),
        }
    }
}

/// Splits on terminal punctuation (closing quotes stay with their sentence), then
/// tokenizes each sentence according to `mode`. Punctuation never becomes a token;
/// sentences with no tokens are dropped.
pub fn tokenize(text: &str, mode: LanguageMode, lexicon: &dyn Lexicon) -> Result<ParagraphDocument> {
    if text.trim().is_empty() {
        return Err(Error::Input("paragraph text is empty".into()));
    }
    let mut sentences = Vec::new();
    for raw in split_sentences(text) {
        let texts: Vec<String> = match mode {
            LanguageMode::Chinese => raw.chars().filter(|c| c.is_alphanumeric()).map(String::from).collect(),
            LanguageMode::English => raw
                .split_whitespace()
                .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_string())
                .filter(|w| !w.is_empty())
                .collect(),
        };
        if texts.is_empty() {
            continue;
        }
        let tokens = texts
            .into_iter()
            .map(|t| Token {
                phoneme_count: lexicon.phoneme_count(&t, mode).max(1),
                text: t,
            })
            .collect();
        sentences.push(Sentence { text: raw, tokens });
    }
    if sentences.is_empty() {
        return Err(Error::Input("paragraph text contains no tokens".into()));
    }
    let digest = Sha1::digest(text.as_bytes());
    let id = format!("p{}", digest[..4].iter().map(|b| format!("{b:02x}")).collect::<String>());
    ParagraphDocument::new(id, sentences)
}

fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    let mut i = 0;
    while i < chars.len() {
        current.push(chars[i]);
        if TERMINALS.contains(&chars[i]) {
            i += 1;
            while i < chars.len() && (TERMINALS.contains(&chars[i]) || CLOSERS.contains(&chars[i])) {
                current.push(chars[i]);
                i += 1;
            }
            push_trimmed(&mut out, &mut current);
            continue;
        }
        i += 1;
    }
    push_trimmed(&mut out, &mut current);
    out
}

fn push_trimmed(out: &mut Vec<String>, current: &mut String) {
    let s = current.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    current.clear();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(doc: &ParagraphDocument) -> Vec<Vec<&str>> {
        doc.sentences
            .iter()
            .map(|s| s.tokens.iter().map(|t| t.text.as_str()).collect())
            .collect()
    }

    #[test]
    fn chinese_two_sentences() {
        let doc = tokenize("你好。世界。", LanguageMode::Chinese, &StubLexicon::new()).unwrap();
        assert_eq!(texts(&doc), vec![vec!["你", "好"], vec!["世", "界"]]);
        assert!(doc.sentences.iter().flat_map(|s| &s.tokens).all(|t| t.phoneme_count == 3));
        assert_eq!(doc.sentences[0].text, "你好。");
    }

    #[test]
    fn single_token() {
        let doc = tokenize("好", LanguageMode::Chinese, &StubLexicon::new()).unwrap();
        assert_eq!(texts(&doc), vec![vec!["好"]]);
    }

    #[test]
    fn no_terminal_punctuation_is_one_sentence() {
        let doc = tokenize("今天天气，很好", LanguageMode::Chinese, &StubLexicon::new()).unwrap();
        assert_eq!(doc.num_sentences(), 1);
        assert_eq!(doc.num_tokens(), 6);
    }

    #[test]
    fn trailing_quotes_attach_to_sentence() {
        let doc = tokenize("他说：“走吧！”然后走了。", LanguageMode::Chinese, &StubLexicon::new()).unwrap();
        assert_eq!(doc.sentences[0].text, "他说：“走吧！”");
        assert_eq!(texts(&doc)[1], vec!["然", "后", "走", "了"]);
    }

    #[test]
    fn english_words_and_repeated_punctuation() {
        let doc = tokenize("Hello, world!! \"Is it?\" Yes.", LanguageMode::English, &StubLexicon::new()).unwrap();
        assert_eq!(texts(&doc), vec![vec!["Hello", "world"], vec!["Is", "it"], vec!["Yes"]]);
        assert_eq!(doc.sentences[0].tokens[0].phoneme_count, 3);
    }

    #[test]
    fn empty_or_punctuation_only_is_input_error() {
        let lex = StubLexicon::new();
        assert!(matches!(tokenize("  \n", LanguageMode::Chinese, &lex), Err(Error::Input(_))));
        assert!(matches!(tokenize("。！", LanguageMode::Chinese, &lex), Err(Error::Input(_))));
    }

    #[test]
    fn lexicon_overrides() {
        let lex = StubLexicon::new().with_override("好", 2);
        let doc = tokenize("你好", LanguageMode::Chinese, &lex).unwrap();
        assert_eq!(doc.sentences[0].phoneme_counts(), vec![3, 2]);
    }

    #[test]
    fn document_invariants() {
        assert!(ParagraphDocument::new("x", vec![]).is_err());
        assert!(ParagraphDocument::from_tokens("x", &[&[]]).is_err());
        assert!(ParagraphDocument::from_tokens("x", &[&[("a", 0)]]).is_err());
        let doc = ParagraphDocument::from_tokens("x", &[&[("a", 2), ("b", 1)], &[("c", 4)]]).unwrap();
        assert_eq!(doc.phoneme_total(), 7);
    }

    #[test]
    fn language_mode_parse() {
        assert_eq!("zh".parse::<LanguageMode>().unwrap(), LanguageMode::Chinese);
        assert_eq!("English".parse::<LanguageMode>().unwrap(), LanguageMode::English);
        assert!("fr".parse::<LanguageMode>().is_err());
    }
}
