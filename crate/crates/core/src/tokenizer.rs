//! Character-level tokenizer.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Result, VitpError};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<img>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn build(corpus: &str) -> Result<Self> {
        if corpus.is_empty() {
            return Err(VitpError::EmptyCorpus);
        }
        let set: BTreeSet<char> = corpus.chars().collect();
        Ok(Self::from_symbols(set.into_iter().collect()))
    }

    fn from_symbols(symbols: Vec<char>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + SPECIALS.len()))
            .collect();
        Vocabulary { symbols, index }
    }

    pub fn len(&self) -> usize {
        SPECIALS.len() + self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.index.get(&c).copied().ok_or(VitpError::UnknownSymbol(c)))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            match id {
                i if i < SPECIALS.len() => out.push_str(SPECIALS[i]),
                i if i < self.len() => out.push(self.symbols[i - SPECIALS.len()]),
                i => {
                    return Err(VitpError::UnknownToken {
                        id: i,
                        size: self.len(),
                    })
                }
            }
        }
        Ok(out)
    }

    /// One symbol per line, specials first; line index is the id.
    /// Newline and backslash symbols are escaped as `\n` and `\\`.
    pub fn to_file_text(&self) -> String {
        let mut s = String::new();
        for sp in SPECIALS {
            s.push_str(sp);
            s.push('\n');
        }
        for &c in &self.symbols {
            match c {
                '\n' => s.push_str("\\n"),
                '\\' => s.push_str("\\\\"),
                c => s.push(c),
            }
            s.push('\n');
        }
        s
    }

    pub fn from_file_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.split('\n').collect();
        let lines = match lines.split_last() {
            Some((last, rest)) if last.is_empty() => rest,
            _ => &lines[..],
        };
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(VitpError::Format("vocabulary must start with the special tokens".into()));
        }
        let mut symbols = Vec::new();
        for (n, line) in lines[SPECIALS.len()..].iter().enumerate() {
            let c = match *line {
                "\\n" => '\n',
                "\\\\" => '\\',
                l => {
                    let mut it = l.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => c,
                        _ => {
                            return Err(VitpError::Format(format!(
                                "vocabulary line {} is not a single symbol",
                                n + SPECIALS.len() + 1
                            )))
                        }
                    }
                }
            };
            symbols.push(c);
        }
        let v = Self::from_symbols(symbols);
        if v.index.len() != v.symbols.len() {
            return Err(VitpError::Format("duplicate symbol in vocabulary".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_text(&std::fs::read_to_string(path)?)
    }
}
