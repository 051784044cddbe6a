//! Token corpora on disk: little-endian `u32` ids plus a `.meta` sidecar
//! holding `tokenizer`, `vocab_size` and `tokens`.

use std::path::{Path, PathBuf};

use ftp_core::data::TokenCorpus;

use crate::error::{io_err, write_atomic, FormatError, Result};

pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

pub fn write_corpus(path: &Path, corpus: &TokenCorpus) -> Result<()> {
    let bytes: Vec<u8> = corpus
        .ids()
        .iter()
        .flat_map(|id| id.to_le_bytes())
        .collect();
    write_atomic(path, &bytes)?;
    let meta = format!(
        "tokenizer={}\nvocab_size={}\ntokens={}\n",
        corpus.tokenizer(),
        corpus.vocab_size(),
        corpus.len()
    );
    write_atomic(&meta_path(path), meta.as_bytes())
}

struct Meta {
    tokenizer: String,
    vocab_size: usize,
    tokens: usize,
}

fn read_meta(path: &Path) -> Result<Meta> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let (mut tokenizer, mut vocab, mut tokens) = (None, None, None);
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let bad = |msg: String| FormatError::Line {
            what: "corpus metadata",
            line: i + 1,
            msg,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        let num = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| bad(format!("bad number {v:?}")))
        };
        match k.trim() {
            "tokenizer" => tokenizer = Some(v.trim().to_string()),
            "vocab_size" => vocab = Some(num(v)?),
            "tokens" => tokens = Some(num(v)?),
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| FormatError::Line {
        what: "corpus metadata",
        line: 0,
        msg: format!("missing {k}"),
    };
    Ok(Meta {
        tokenizer: tokenizer.ok_or_else(|| missing("tokenizer"))?,
        vocab_size: vocab.ok_or_else(|| missing("vocab_size"))?,
        tokens: tokens.ok_or_else(|| missing("tokens"))?,
    })
}

pub fn read_corpus(path: &Path) -> Result<TokenCorpus> {
    let meta = read_meta(&meta_path(path))?;
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let whole = bytes.len() / 4 * 4;
    if whole != bytes.len() {
        return Err(FormatError::Bytes {
            what: "corpus",
            offset: whole as u64,
            msg: format!("{} trailing bytes do not form a token", bytes.len() - whole),
        });
    }
    if bytes.len() / 4 != meta.tokens {
        return Err(FormatError::Bytes {
            what: "corpus",
            offset: bytes.len() as u64,
            msg: format!(
                "metadata promises {} tokens, file holds {}",
                meta.tokens,
                bytes.len() / 4
            ),
        });
    }
    let mut ids = Vec::with_capacity(meta.tokens);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let id = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if id as usize >= meta.vocab_size {
            return Err(FormatError::Bytes {
                what: "corpus",
                offset: (i * 4) as u64,
                msg: format!("token {id} outside vocabulary of {}", meta.vocab_size),
            });
        }
        ids.push(id);
    }
    Ok(TokenCorpus::new(ids, meta.vocab_size, &meta.tokenizer)?)
}

/// A packed corpus, or raw text (`.txt`) run through the byte tokenizer.
pub fn load_corpus(path: &Path) -> Result<TokenCorpus> {
    if path.extension().is_some_and(|e| e == "txt") {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Ok(TokenCorpus::from_bytes(&bytes))
    } else {
        read_corpus(path)
    }
}
