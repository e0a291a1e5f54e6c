use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const PAD: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["[CLS]", "[SEP]", "[PAD]", "[MASK]", "[UNK]"];

/// Whitespace vocabulary. Ids `0..5` are the special tokens; corpus tokens
/// follow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_NAMES {
            v.push(s.to_string())?;
        }
        for t in tokens {
            v.push(t.into())?;
        }
        Ok(v)
    }

    fn push(&mut self, token: String) -> Result<()> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::contract(format!(
                "invalid vocabulary token {token:?}"
            )));
        }
        if self.index.contains_key(&token) {
            return Err(Error::contract(format!(
                "duplicate vocabulary token {token:?}"
            )));
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        Ok(())
    }

    /// Every distinct lowercased token of the corpus, most frequent first,
    /// ties broken alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIAL_NAMES.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocab::from_tokens(ranked.into_iter().map(|(w, _)| w)).expect("corpus tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One non-special token per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[NUM_SPECIAL..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path)?;
        let mut v = Vocab::from_tokens(std::iter::empty::<String>())?;
        for (i, line) in content.lines().enumerate() {
            v.push(line.to_string()).map_err(|e| Error::Load {
                file: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(v)
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// `[CLS]` followed by the lowercased whitespace tokens of `text`,
/// truncated to `max_len` and right-padded with `[PAD]`.
pub fn tokenize(vocab: &Vocab, text: &str, max_len: usize) -> Result<Vec<usize>> {
    if max_len < 2 {
        return Err(Error::contract(format!(
            "max_len must be at least 2, got {max_len}"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(words(text).take(max_len - 1).map(|w| vocab.id(&w)));
    ids.resize(max_len, PAD);
    Ok(ids)
}

/// Row-major `rows × width` token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub rows: usize,
    pub width: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, rows: usize, width: usize) -> Result<Self> {
        if ids.len() != rows * width || rows == 0 || width == 0 {
            return Err(Error::shape("token batch", &[ids.len()], &[rows, width]));
        }
        Ok(TokenBatch { ids, rows, width })
    }

    /// Stacks equally long token sequences.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::contract("token rows differ in length"));
        }
        TokenBatch::new(rows.concat(), rows.len(), width)
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.width..(i + 1) * self.width]
    }

    /// Drops trailing columns that are padding in every row.
    pub fn trimmed(&self) -> TokenBatch {
        let used = (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .rposition(|&t| t != PAD)
                    .map_or(1, |p| p + 1)
            })
            .max()
            .unwrap_or(1);
        let ids = (0..self.rows)
            .flat_map(|i| self.row(i)[..used].iter().copied())
            .collect();
        TokenBatch {
            ids,
            rows: self.rows,
            width: used,
        }
    }

    pub fn key_valid(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }
}
