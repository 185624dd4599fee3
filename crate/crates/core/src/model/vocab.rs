use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";

/// Fixed word-level vocabulary. Token ids are positions in the token list.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk: u32,
    bos: u32,
}

/// One token of a tokenized text. `span` is a half-open range of character
/// (not byte) offsets into the source string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub text: String,
    pub span: (usize, usize),
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!(
                    "vocabulary entry {i} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let unk = *index
            .get(UNK_TOKEN)
            .ok_or_else(|| Error::invalid("vocabulary lacks the <unk> token"))?;
        let bos = *index
            .get(BOS_TOKEN)
            .ok_or_else(|| Error::invalid("vocabulary lacks the <bos> token"))?;
        Ok(Self {
            tokens,
            index,
            unk,
            bos,
        })
    }

    /// Reads a vocabulary file: one token per line, line number = id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn bos_id(&self) -> u32 {
        self.bos
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn render(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(UNK_TOKEN, String::as_str)
    }

    /// Lowercased word-level segmentation: maximal runs of alphanumeric
    /// characters form one token, every other non-whitespace character is a
    /// token of its own, whitespace only separates. Truncates at `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<Token> {
        let mut out = Vec::new();
        let mut word = String::new();
        let mut start = 0;
        let flush = |word: &mut String, start: usize, end: usize, out: &mut Vec<Token>| {
            if !word.is_empty() {
                let text = std::mem::take(word);
                out.push(Token {
                    id: self.lookup(&text).unwrap_or(self.unk),
                    text,
                    span: (start, end),
                });
            }
        };
        for (pos, ch) in text.chars().enumerate() {
            if out.len() >= max_len {
                break;
            }
            if ch.is_alphanumeric() {
                if word.is_empty() {
                    start = pos;
                }
                word.extend(ch.to_lowercase());
                continue;
            }
            flush(&mut word, start, pos, &mut out);
            if !ch.is_whitespace() && out.len() < max_len {
                let t: String = ch.to_lowercase().collect();
                out.push(Token {
                    id: self.lookup(&t).unwrap_or(self.unk),
                    text: t,
                    span: (pos, pos + 1),
                });
            }
        }
        if out.len() < max_len {
            let end = text.chars().count();
            flush(&mut word, start, end, &mut out);
        }
        out
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        self.tokenize(text, max_len).into_iter().map(|t| t.id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let words = ["<unk>", "<bos>", "the", "food", "was", "badly", "damaged", "."];
        Vocabulary::new(words.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn word_spans() {
        let v = vocab();
        let toks = v.tokenize("the food was badly damaged", 128);
        let spans: Vec<_> = toks.iter().map(|t| t.span).collect();
        assert_eq!(spans, vec![(0, 3), (4, 8), (9, 12), (13, 18), (19, 26)]);
        assert_eq!(toks.iter().map(|t| t.id).collect::<Vec<_>>(), vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn empty_and_unknown() {
        let v = vocab();
        assert!(v.tokenize("", 8).is_empty());
        let toks = v.tokenize("the zebra", 8);
        assert_eq!(toks[1].id, v.unk_id());
        assert_eq!(toks[1].span, (4, 9));
        assert_eq!(toks[1].text, "zebra");
    }

    #[test]
    fn punctuation_and_case() {
        let v = vocab();
        let toks = v.tokenize("The food was BADLY.", 16);
        let texts: Vec<_> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["the", "food", "was", "badly", "."]);
        assert_eq!(toks[3].span, (13, 18));
        assert_eq!(toks[4].span, (18, 19));
    }

    #[test]
    fn truncation() {
        let v = vocab();
        assert_eq!(v.tokenize("the food was badly damaged", 2).len(), 2);
        assert_eq!(v.tokenize("the food.", 2).len(), 2);
    }

    #[test]
    fn lookup_render_round_trip() {
        let v = vocab();
        for id in 0..v.len() as u32 {
            assert_eq!(v.lookup(v.render(id)), Some(id));
        }
    }

    #[test]
    fn rejects_duplicates_and_missing_reserved() {
        assert!(Vocabulary::new(vec!["<unk>".into(), "<bos>".into(), "a".into(), "a".into()]).is_err());
        assert!(Vocabulary::new(vec!["<unk>".into(), "a".into()]).is_err());
    }
}
