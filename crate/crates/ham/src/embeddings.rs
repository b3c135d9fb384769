//! Frozen pretrained word vectors.
//!
//! Two on-disk formats share the header line `"<vocab_size> <dim>"`:
//! - text: one `token v1 v2 ... vd` line per token,
//! - binary: per token, the token string, one space, then `dim`
//!   little-endian 32-bit floats.
//!
//! Vectors are stored as 32-bit on disk and widened to f64 in memory.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Text,
    Binary,
}

/// How to treat tokens absent from the vocabulary when embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    /// Drop the token before embedding (default).
    #[default]
    Drop,
    /// Keep the position as a zero vector.
    Zero,
}

/// Immutable vocabulary → d-dimensional vector table.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub dim: usize,
    vocab: HashMap<String, usize>,
    /// Row-major |vocab| × dim.
    vectors: Vec<f64>,
    tokens: Vec<String>,
    pub warnings: Vec<String>,
}

impl EmbeddingTable {
    pub fn from_rows(rows: Vec<(String, Vec<f64>)>, dim: usize) -> Result<Self> {
        let mut table = EmbeddingTable {
            dim,
            vocab: HashMap::new(),
            vectors: Vec::new(),
            tokens: Vec::new(),
            warnings: Vec::new(),
        };
        for (token, vec) in rows {
            if vec.len() != dim {
                return Err(Error::Format(format!(
                    "token {:?} has {} components, expected {}",
                    token,
                    vec.len(),
                    dim
                )));
            }
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding row for {:?}", token)));
            }
            table.insert(token, &vec);
        }
        Ok(table)
    }

    fn insert(&mut self, token: String, vec: &[f64]) {
        if self.vocab.contains_key(&token) {
            self.warnings
                .push(format!("duplicate token {:?}; first occurrence wins", token));
            return;
        }
        self.vocab.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.vectors.extend_from_slice(vec);
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

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.contains_key(token)
    }

    /// Row for an in-vocabulary token, `None` for OOV. Case-sensitive.
    pub fn lookup(&self, token: &str) -> Option<&[f64]> {
        self.vocab
            .get(token)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn load(path: &Path, format: EmbeddingFormat) -> Result<Self> {
        match format {
            EmbeddingFormat::Text => Self::load_text(path),
            EmbeddingFormat::Binary => Self::load_binary(path),
        }
    }

    /// Guess the format from the extension: `.bin` is binary, else text.
    pub fn load_auto(path: &Path) -> Result<Self> {
        let fmt = if path.extension().is_some_and(|e| e == "bin") {
            EmbeddingFormat::Binary
        } else {
            EmbeddingFormat::Text
        };
        Self::load(path, fmt)
    }

    fn parse_header(line: &str) -> Result<(usize, usize)> {
        let mut it = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("expected \"vocab_size dim\" header, got {:?}", line),
            })
        };
        let n = parse(it.next())?;
        let d = parse(it.next())?;
        if d == 0 {
            return Err(Error::Format("embedding dim must be positive".into()));
        }
        Ok((n, d))
    }

    fn load_text(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty embedding file".into(),
        })??;
        let (n, dim) = Self::parse_header(&header)?;
        let mut table = EmbeddingTable {
            dim,
            vocab: HashMap::with_capacity(n),
            vectors: Vec::with_capacity(n * dim),
            tokens: Vec::with_capacity(n),
            warnings: Vec::new(),
        };
        let mut count = 0usize;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 2;
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap().to_string();
            let vec: Vec<f64> = parts
                .map(|p| {
                    p.parse::<f32>().map(f64::from).map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("bad float {:?}", p),
                    })
                })
                .collect::<Result<_>>()?;
            if vec.len() != dim {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} components, got {}", dim, vec.len()),
                });
            }
            table.insert(token, &vec);
            count += 1;
        }
        if count != n {
            return Err(Error::Format(format!(
                "header declares {} tokens, file has {}",
                n, count
            )));
        }
        Ok(table)
    }

    fn load_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let header_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(Error::Parse {
                line: 1,
                msg: "missing header line".into(),
            })?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::Format("non-utf8 header".into()))?;
        let (n, dim) = Self::parse_header(header)?;
        let mut table = EmbeddingTable {
            dim,
            vocab: HashMap::with_capacity(n),
            vectors: Vec::with_capacity(n * dim),
            tokens: Vec::with_capacity(n),
            warnings: Vec::new(),
        };
        let mut pos = header_end + 1;
        for _ in 0..n {
            let token_end = bytes[pos..]
                .iter()
                .position(|&b| b == b' ')
                .ok_or_else(|| Error::Format(format!("truncated token at byte offset {}", pos)))?
                + pos;
            let token = std::str::from_utf8(&bytes[pos..token_end])
                .map_err(|_| Error::Format(format!("non-utf8 token at byte offset {}", pos)))?
                .to_string();
            pos = token_end + 1;
            let need = dim * 4;
            if pos + need > bytes.len() {
                return Err(Error::Format(format!(
                    "truncated vector for {:?} at byte offset {}",
                    token, pos
                )));
            }
            let vec: Vec<f64> = bytes[pos..pos + need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            pos += need;
            // Optional trailing newline after each record.
            if bytes.get(pos) == Some(&b'\n') {
                pos += 1;
            }
            table.insert(token, &vec);
        }
        Ok(table)
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{} {}", self.tokens.len(), self.dim)?;
        for (i, token) in self.tokens.iter().enumerate() {
            write!(w, "{}", token)?;
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                write!(w, " {}", *v as f32)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{} {}", self.tokens.len(), self.dim)?;
        for (i, token) in self.tokens.iter().enumerate() {
            w.write_all(token.as_bytes())?;
            w.write_all(b" ")?;
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Materialize an utterance as an M×dim matrix plus a term mask.
    /// Tokens beyond M are dropped; missing rows are zero with mask false.
    pub fn embed_utterance(
        &self,
        tokens: &[String],
        max_terms: usize,
        oov: OovPolicy,
    ) -> Result<(Tensor, Vec<bool>)> {
        if max_terms == 0 {
            return Err(Error::Param("embed_utterance: M must be positive".into()));
        }
        let mut matrix = vec![0.0; max_terms * self.dim];
        let mut mask = vec![false; max_terms];
        let mut row = 0;
        for token in tokens {
            if row == max_terms {
                break;
            }
            match self.lookup(token) {
                Some(vec) => {
                    matrix[row * self.dim..(row + 1) * self.dim].copy_from_slice(vec);
                    mask[row] = true;
                    row += 1;
                }
                None => match oov {
                    OovPolicy::Drop => {}
                    OovPolicy::Zero => {
                        mask[row] = true;
                        row += 1;
                    }
                },
            }
        }
        Ok((Tensor::new(vec![max_terms, self.dim], matrix)?, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn text_format_roundtrip_of_definition() {
        let f = write_tmp("2 3\na 1 0 0\nb 0 1 0\n");
        let table = EmbeddingTable::load(f.path(), EmbeddingFormat::Text).unwrap();
        assert_eq!(table.dim, 3);
        assert_eq!(table.lookup("a").unwrap(), &[1.0, 0.0, 0.0]);
        assert_eq!(table.lookup("b").unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn duplicate_token_first_wins_with_warning() {
        let f = write_tmp("2 2\na 1 2\na 3 4\n");
        let table = EmbeddingTable::load(f.path(), EmbeddingFormat::Text).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table.lookup("a").unwrap(), &[1.0, 2.0]);
        assert_eq!(table.warnings.len(), 1);
    }

    #[test]
    fn truncated_binary_names_byte_offset() {
        let mut bytes = b"1 3\ntok ".to_vec();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        let mut f = tempfile::NamedTempFile::new().unwrap();
        use std::io::Write as _;
        f.write_all(&bytes).unwrap();
        let err = EmbeddingTable::load(f.path(), EmbeddingFormat::Binary).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte offset"), "{}", msg);
    }

    #[test]
    fn binary_roundtrip_preserves_f32() {
        let table = EmbeddingTable::from_rows(
            vec![
                ("dog".into(), vec![0.25, -1.5]),
                ("cat".into(), vec![3.75, 0.125]),
            ],
            2,
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        table.save_binary(f.path()).unwrap();
        let back = EmbeddingTable::load(f.path(), EmbeddingFormat::Binary).unwrap();
        assert_eq!(back.lookup("dog").unwrap(), table.lookup("dog").unwrap());
        assert_eq!(back.lookup("cat").unwrap(), table.lookup("cat").unwrap());
    }

    #[test]
    fn lookup_is_case_sensitive_and_oov_absent() {
        let table = EmbeddingTable::from_rows(vec![("dog".into(), vec![1.0])], 1).unwrap();
        assert!(table.lookup("dog").is_some());
        assert!(table.lookup("Dog").is_none());
        assert!(table.lookup("fish").is_none());
    }

    #[test]
    fn embed_utterance_pads_and_truncates() {
        let table = EmbeddingTable::from_rows(
            vec![("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 1.0])],
            2,
        )
        .unwrap();
        let toks: Vec<String> = vec!["a".into(), "b".into()];
        let (m, mask) = table.embed_utterance(&toks, 4, OovPolicy::Drop).unwrap();
        assert_eq!(mask, vec![true, true, false, false]);
        assert_eq!(&m.data[0..2], &[1.0, 0.0]);
        assert_eq!(&m.data[4..8], &[0.0; 4]);

        // 50 tokens with M=40 keeps exactly the first 40.
        let many: Vec<String> = (0..50).map(|i| if i < 40 { "a" } else { "b" }.into()).collect();
        let (m40, mask40) = table.embed_utterance(&many, 40, OovPolicy::Drop).unwrap();
        assert!(mask40.iter().all(|&x| x));
        assert!(m40.data.chunks(2).all(|c| c == [1.0, 0.0]));

        // Empty list: all-zero matrix, all-false mask.
        let (mz, maskz) = table.embed_utterance(&[], 3, OovPolicy::Drop).unwrap();
        assert!(mz.data.iter().all(|&v| v == 0.0));
        assert!(maskz.iter().all(|&x| !x));
    }

    #[test]
    fn oov_policy_drop_vs_zero() {
        let table = EmbeddingTable::from_rows(vec![("a".into(), vec![1.0])], 1).unwrap();
        let toks: Vec<String> = vec!["x".into(), "a".into()];
        let (m, mask) = table.embed_utterance(&toks, 2, OovPolicy::Drop).unwrap();
        assert_eq!(mask, vec![true, false]);
        assert_eq!(m.data, vec![1.0, 0.0]);
        let (mz, maskz) = table.embed_utterance(&toks, 2, OovPolicy::Zero).unwrap();
        assert_eq!(maskz, vec![true, true]);
        assert_eq!(mz.data, vec![0.0, 1.0]);
    }

    #[test]
    fn save_text_reload_identical() {
        let table = EmbeddingTable::from_rows(
            vec![
                ("alpha".into(), vec![0.5, -0.25, 0.375]),
                ("beta".into(), vec![1.0, 2.0, -3.0]),
            ],
            3,
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        table.save_text(f.path()).unwrap();
        let back = EmbeddingTable::load(f.path(), EmbeddingFormat::Text).unwrap();
        for tok in ["alpha", "beta"] {
            assert_eq!(back.lookup(tok).unwrap(), table.lookup(tok).unwrap());
        }
    }
}
