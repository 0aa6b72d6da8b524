//! Per-token activations for every neuron, and the binary dump format.
//!
//! Dump layout: magic `NPLAB1`, u32 n_rows, u32 n_cols, u32 n_layers_plus_1,
//! u32 d, 32-byte checkpoint fingerprint, row-major f32 LE payload, then a
//! JSON trailer holding the token metadata.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ConceptCorpus;
use crate::error::{Error, Result};
use crate::model::{encode_corpus, model_fingerprint, Batch, TaggerModel};

pub const DUMP_MAGIC: &[u8; 6] = b"NPLAB1";
const HEADER_LEN: usize = 6 + 4 * 4 + 32;
const EXTRACT_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub sentence: usize,
    pub position: usize,
    pub text: String,
    pub tag: String,
    pub concepts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_layers_plus_1: usize,
    pub d: usize,
    /// Row-major `n_rows × n_cols`.
    pub values: Vec<f32>,
    pub token_meta: Vec<TokenMeta>,
    pub fingerprint: [u8; 32],
}

impl ActivationMatrix {
    pub fn new(
        n_layers_plus_1: usize,
        d: usize,
        values: Vec<f32>,
        token_meta: Vec<TokenMeta>,
        fingerprint: [u8; 32],
    ) -> Result<Self> {
        let n_cols = n_layers_plus_1 * d;
        if n_cols == 0 || values.len() != token_meta.len() * n_cols {
            return Err(Error::Dimension(format!(
                "{} values for {} rows × {} columns",
                values.len(),
                token_meta.len(),
                n_cols
            )));
        }
        Ok(Self {
            n_rows: token_meta.len(),
            n_cols,
            n_layers_plus_1,
            d,
            values,
            token_meta,
            fingerprint,
        })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f32> + '_ {
        self.values.iter().skip(j).step_by(self.n_cols).copied()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.token_meta.iter().map(|m| m.text.as_str())
    }
}

/// Runs the model in evaluation mode over `corpus` and records every
/// neuron's post-mask activation per token, in corpus order.
pub fn extract_activations(model: &TaggerModel<f32>, corpus: &ConceptCorpus) -> Result<ActivationMatrix> {
    let (ids, _) = encode_corpus(model, corpus)?;
    let d = model.config.d_model;
    let lp1 = model.config.n_layers + 1;
    let n_cols = lp1 * d;
    let mut values = Vec::with_capacity(corpus.n_tokens() * n_cols);
    for chunk in ids.chunks(EXTRACT_BATCH) {
        let nonempty: Vec<&Vec<usize>> = chunk.iter().filter(|s| !s.is_empty()).collect();
        if nonempty.is_empty() {
            continue;
        }
        let batch = Batch::new(&nonempty);
        let out = model.forward(&batch)?;
        for r in 0..batch.n_tokens() {
            for rep in &out.reps {
                values.extend_from_slice(rep.row(r));
            }
        }
    }
    let mut token_meta = Vec::with_capacity(corpus.n_tokens());
    for (s, sent) in corpus.sentences().iter().enumerate() {
        for (p, tok) in sent.iter().enumerate() {
            token_meta.push(TokenMeta {
                sentence: s,
                position: p,
                text: tok.text.clone(),
                tag: tok.tag.to_string(),
                concepts: tok.concepts.iter().map(ToString::to_string).collect(),
            });
        }
    }
    ActivationMatrix::new(lp1, d, values, token_meta, model_fingerprint(model))
}

pub fn dump_bytes(m: &ActivationMatrix) -> Result<Vec<u8>> {
    let trailer = serde_json::to_vec(&m.token_meta)?;
    let mut out = Vec::with_capacity(HEADER_LEN + m.values.len() * 4 + trailer.len());
    out.extend_from_slice(DUMP_MAGIC);
    for v in [m.n_rows, m.n_cols, m.n_layers_plus_1, m.d] {
        let v = u32::try_from(v).map_err(|_| Error::Dimension(format!("{v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&m.fingerprint);
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&trailer);
    Ok(out)
}

pub fn write_dump(m: &ActivationMatrix, path: &Path) -> Result<()> {
    let bytes = dump_bytes(m)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses a dump. When `expected` is given and differs from the stored
/// fingerprint, `strict` turns the warning into a staleness error.
pub fn parse_dump(bytes: &[u8], expected: Option<&[u8; 32]>, strict: bool) -> Result<ActivationMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..6] != DUMP_MAGIC {
        return Err(Error::Corruption("bad magic".into()));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
    let (n_rows, n_cols, lp1, d) = (u(0), u(1), u(2), u(3));
    if n_cols != lp1 * d {
        return Err(Error::Corruption(format!("{n_cols} columns != {lp1} × {d}")));
    }
    let mut fingerprint = [0u8; 32];
    fingerprint.copy_from_slice(&bytes[22..54]);
    if let Some(exp) = expected {
        if exp != &fingerprint {
            let msg = "dump was extracted from a different checkpoint".to_string();
            if strict {
                return Err(Error::Staleness(msg));
            }
            log::warn!("{msg}");
        }
    }
    let payload = n_rows
        .checked_mul(n_cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Corruption("header sizes overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::Corruption(format!(
            "payload has {} bytes, header promises {payload}",
            body.len()
        )));
    }
    let values = body[..payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let token_meta: Vec<TokenMeta> = serde_json::from_slice(&body[payload..])
        .map_err(|e| Error::Corruption(format!("token metadata: {e}")))?;
    if token_meta.len() != n_rows {
        return Err(Error::Corruption(format!(
            "{} metadata rows for {n_rows} activation rows",
            token_meta.len()
        )));
    }
    ActivationMatrix::new(lp1, d, values, token_meta, fingerprint)
}

pub fn read_dump(path: &Path, expected: Option<&[u8; 32]>, strict: bool) -> Result<ActivationMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dump(&bytes, expected, strict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::model::{config_for_corpus, ModelConfig, PruneMask};

    fn small_model(corpus: &ConceptCorpus) -> TaggerModel<f32> {
        let base = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            max_len: 32,
            ..ModelConfig::default()
        };
        let (cfg, tags) = config_for_corpus(&base, corpus);
        TaggerModel::init(cfg, corpus.vocab().tokens().to_vec(), tags).unwrap()
    }

    fn meta(n: usize) -> Vec<TokenMeta> {
        (0..n)
            .map(|i| TokenMeta {
                sentence: 0,
                position: i,
                text: format!("t{i}"),
                tag: "O".into(),
                concepts: vec![],
            })
            .collect()
    }

    #[test]
    fn shape_order_and_mask_columns() {
        let corpus = generate_corpus(&CorpusSpec::default_ner(6), 3).unwrap();
        let mut m = small_model(&corpus);
        let a = extract_activations(&m, &corpus).unwrap();
        assert_eq!((a.n_rows, a.n_cols), (corpus.n_tokens(), 48));
        assert_eq!(a.token_meta[0].text, corpus.sentences()[0][0].text);
        let b = extract_activations(&m, &corpus).unwrap();
        assert_eq!(a.values, b.values);

        m.mask = PruneMask::from_pruned(3, 16, [21]).unwrap();
        let a = extract_activations(&m, &corpus).unwrap();
        assert!(a.column(21).all(|v| v.to_bits() == 0));
        assert!(a.column(20).any(|v| v != 0.0));
    }

    #[test]
    fn dump_round_trip_and_errors() {
        let vals: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
        let m = ActivationMatrix::new(3, 2, vals, meta(4), [7; 32]).unwrap();
        let bytes = dump_bytes(&m).unwrap();
        assert_eq!(parse_dump(&bytes, Some(&[7; 32]), true).unwrap(), m);
        assert_eq!(dump_bytes(&parse_dump(&bytes, None, false).unwrap()).unwrap(), bytes);

        // header promises 4 rows, payload holds 3
        let short = &bytes[..HEADER_LEN + 3 * 6 * 4];
        assert!(matches!(parse_dump(short, None, false), Err(Error::Corruption(_))));
        assert!(matches!(parse_dump(&bytes[..20], None, false), Err(Error::Corruption(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(parse_dump(&bad_magic, None, false), Err(Error::Corruption(_))));

        assert!(matches!(parse_dump(&bytes, Some(&[8; 32]), true), Err(Error::Staleness(_))));
        assert!(parse_dump(&bytes, Some(&[8; 32]), false).is_ok());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nplab");
        let m = ActivationMatrix::new(2, 2, vec![1.0, -2.0, 0.5, f32::MIN_POSITIVE], meta(1), [1; 32]).unwrap();
        write_dump(&m, &path).unwrap();
        assert_eq!(read_dump(&path, None, true).unwrap(), m);
    }
}
