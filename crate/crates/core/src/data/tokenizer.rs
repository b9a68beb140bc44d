use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
/// Token positions per caption, including start and end.
pub const CONTEXT_LENGTH: usize = 12;

const WORDS: &[&str] = &[
    "a", "small", "large", "red", "green", "blue", "yellow", "purple", "orange", "circle", "square", "triangle",
    "on", "the", "left", "right", "at", "top", "bottom", "in", "center", "of", "above", "photo",
];

/// Fixed-length token ids: `[START, w.., END, PAD..]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CaptionTokens {
    pub ids: Vec<usize>,
}

impl CaptionTokens {
    /// The caption with no words, used for the unconditional branch.
    pub fn empty() -> Self {
        let mut ids = vec![PAD; CONTEXT_LENGTH];
        ids[0] = START;
        ids[1] = END;
        Self { ids }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.get(1) == Some(&END)
    }

    /// Index of the end token.
    pub fn end_position(&self) -> usize {
        self.ids.iter().position(|&i| i == END).unwrap_or(CONTEXT_LENGTH - 1)
    }

    pub fn num_words(&self) -> usize {
        self.end_position() - 1
    }
}

/// Word-level tokenizer over the dataset's closed vocabulary.
#[derive(Clone, Copy, Debug, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        3 + WORDS.len()
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        WORDS.iter().position(|w| *w == word).map(|i| i + 3)
    }

    pub fn encode(&self, text: &str) -> Result<CaptionTokens> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        if words.len() > CONTEXT_LENGTH - 2 {
            return Err(Error::CaptionTooLong {
                words: words.len(),
                max: CONTEXT_LENGTH - 2,
            });
        }
        let mut ids = vec![PAD; CONTEXT_LENGTH];
        ids[0] = START;
        for (i, w) in words.iter().enumerate() {
            ids[i + 1] = self.word_id(w).ok_or_else(|| Error::UnknownWord(w.to_string()))?;
        }
        ids[words.len() + 1] = END;
        Ok(CaptionTokens { ids })
    }

    pub fn decode(&self, tokens: &CaptionTokens) -> Result<String> {
        let mut words = Vec::new();
        for &id in tokens.ids.iter().skip(1) {
            match id {
                END => return Ok(words.join(" ")),
                PAD | START => break,
                _ => words.push(*WORDS.get(id - 3).ok_or_else(|| Error::invalid("decode", format!("token id {id}")))?),
            }
        }
        Err(Error::invalid("decode", format!("malformed token sequence {:?}", tokens.ids)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_caption() {
        let t = Tokenizer.encode("").unwrap();
        assert_eq!(&t.ids[..3], &[START, END, PAD]);
        assert!(t.is_empty());
        assert_eq!(t, CaptionTokens::empty());
    }

    #[test]
    fn roundtrip() {
        let t = Tokenizer.encode("a red circle").unwrap();
        assert_eq!(Tokenizer.decode(&t).unwrap(), "a red circle");
        assert_eq!(t.num_words(), 3);
        assert_eq!(Tokenizer.decode(&Tokenizer.encode("  A  Red\tcircle ").unwrap()).unwrap(), "a red circle");
    }

    #[test]
    fn unknown_word_named() {
        match Tokenizer.encode("a red cube") {
            Err(Error::UnknownWord(w)) => assert_eq!(w, "cube"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_long() {
        assert!(Tokenizer.encode("a a a a a a a a a a a").is_err());
        assert!(Tokenizer.encode("a a a a a a a a a a").is_ok());
    }
}
