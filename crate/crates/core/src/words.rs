//! The pool of domain-relevant words that fill the `[domain]` slot of the
//! prompt template.

use std::collections::HashSet;
use std::io::Read;

use crate::embedding::{Embedding, EPS_NORM};
use crate::error::{Result, TdgError};

/// Words that describe an image's medium or style rather than its content.
pub const DEFAULT_WORDS: [&str; 20] = [
    "picture",
    "photo",
    "photograph",
    "portrait",
    "silhouette",
    "statue",
    "symbol",
    "painting",
    "figure",
    "depiction",
    "drawing",
    "caricature",
    "video",
    "face",
    "sculpture",
    "vision",
    "illustration",
    "cartoon",
    "imagery",
    "representation",
];

/// Ordered, case-insensitively unique list of domain words.
///
/// Word order is significant: position `j` in the pool is column `j` of every
/// text feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainWordPool {
    words: Vec<String>,
    token_embeddings: Option<Vec<Embedding>>,
}

impl DomainWordPool {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for w in words {
            let w: String = w.into();
            let w = w.trim().to_string();
            if w.is_empty() {
                return Err(TdgError::Config("empty word in pool".into()));
            }
            if !seen.insert(w.to_lowercase()) {
                return Err(TdgError::DuplicateWord(w.to_lowercase()));
            }
            out.push(w);
        }
        if out.is_empty() {
            return Err(TdgError::EmptyPool);
        }
        Ok(Self {
            words: out,
            token_embeddings: None,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn token_embeddings(&self) -> Option<&[Embedding]> {
        self.token_embeddings.as_deref()
    }

    /// Attaches one token-space embedding per word, in pool order.
    pub fn with_token_embeddings(mut self, tokens: Vec<Embedding>) -> Result<Self> {
        if tokens.len() != self.words.len() {
            return Err(TdgError::Dimension {
                expected: self.words.len(),
                got: tokens.len(),
            });
        }
        if let Some(first) = tokens.first() {
            for (j, t) in tokens.iter().enumerate() {
                if t.len() != first.len() {
                    return Err(TdgError::Dimension {
                        expected: first.len(),
                        got: t.len(),
                    });
                }
                if !t.is_finite() || t.norm() <= EPS_NORM {
                    return Err(TdgError::DegenerateInput(format!(
                        "token embedding for word {:?} is degenerate",
                        self.words[j]
                    )));
                }
            }
        }
        self.token_embeddings = Some(tokens);
        Ok(self)
    }

    /// One word per line, newline-terminated; the inverse of [`load_word_pool`].
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }
}

/// Reads a newline-delimited word list. Blank lines and `#` comments are skipped.
pub fn load_word_pool<R: Read>(mut source: R) -> Result<DomainWordPool> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let text = String::from_utf8(bytes)?;
    let words = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    DomainWordPool::new(words)
}

/// The bundled twenty-word pool.
pub fn default_pool() -> DomainWordPool {
    DomainWordPool::new(DEFAULT_WORDS).expect("bundled word list is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn loads_words_in_order() {
        let pool = load_word_pool("photo\npainting\n".as_bytes()).unwrap();
        assert_eq!(pool.words(), ["photo", "painting"]);
        assert_eq!(pool.len(), 2);
    }

    #[test]
    fn duplicate_is_case_insensitive() {
        match load_word_pool("photo\nPhoto\n".as_bytes()) {
            Err(TdgError::DuplicateWord(w)) => assert_eq!(w, "photo"),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let pool = load_word_pool("# comment\n\nsketch\n".as_bytes()).unwrap();
        assert_eq!(pool.words(), ["sketch"]);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert!(matches!(
            load_word_pool("# only a comment\n\n".as_bytes()),
            Err(TdgError::EmptyPool)
        ));
        assert!(matches!(
            load_word_pool(&[0x66, 0xff, 0x0a][..]),
            Err(TdgError::Encoding(_))
        ));
    }

    #[test]
    fn default_pool_contents() {
        let pool = default_pool();
        assert_eq!(pool.len(), 20);
        assert_eq!(pool.words()[0], "picture");
        assert!(pool.words().iter().any(|w| w == "cartoon"));
        assert!(pool.words().iter().any(|w| w == "painting"));
        assert_eq!(pool.words()[19], "representation");
    }

    #[test]
    fn token_embeddings_must_match_pool_size() {
        let pool = load_word_pool("a\nb\n".as_bytes()).unwrap();
        assert!(pool
            .clone()
            .with_token_embeddings(vec![Embedding::new(vec![1.0]).unwrap()])
            .is_err());
        let pool = pool
            .with_token_embeddings(vec![
                Embedding::new(vec![1.0]).unwrap(),
                Embedding::new(vec![2.0]).unwrap(),
            ])
            .unwrap();
        assert_eq!(pool.token_embeddings().unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn load_is_idempotent_on_serialized_output(words in prop::collection::hash_set("[a-z]{1,8}", 1..12)) {
            let pool = DomainWordPool::new(words).unwrap();
            let reloaded = load_word_pool(pool.to_file_string().as_bytes()).unwrap();
            prop_assert_eq!(&reloaded, &pool);
            prop_assert_eq!(reloaded.to_file_string(), pool.to_file_string());
        }
    }
}
