//! Gridworld dataset files.
//!
//! ```text
//! # ftp-grid v1 split=train seed=0 len=6-10 p_obstruction=0.15 p_zero=0.7 count=2
//! M+L<TAB><hex of the 662-token sequence, one byte per token>
//! ...
//! ```
//!
//! The program string is redundant with the token sequence and is checked
//! against it on read, as is every start/stop pair.

use std::path::Path;

use ftp_core::gridworld::{
    decode_instance, encode_instance, parse_program, program_string, GridInstance, WorldParams,
};

use crate::error::{io_err, write_atomic, FormatError, Result};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GridHeader {
    pub split: String,
    pub seed: u64,
    pub len: (usize, usize),
    pub world: WorldParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub header: GridHeader,
    pub instances: Vec<GridInstance>,
}

pub fn format_grid(file: &GridFile) -> String {
    let h = &file.header;
    let mut out = format!(
        "# ftp-grid v{VERSION} split={} seed={} len={}-{} p_obstruction={} p_zero={} count={}\n",
        h.split,
        h.seed,
        h.len.0,
        h.len.1,
        h.world.p_obstruction,
        h.world.p_zero,
        file.instances.len()
    );
    for inst in &file.instances {
        let bytes: Vec<u8> = encode_instance(inst).iter().map(|&t| t as u8).collect();
        out.push_str(&program_string(&inst.program));
        out.push('\t');
        out.push_str(&hex::encode(bytes));
        out.push('\n');
    }
    out
}

pub fn write_grid(path: &Path, file: &GridFile) -> Result<()> {
    write_atomic(path, format_grid(file).as_bytes())
}

fn line_err(line: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Line {
        what: "grid dataset",
        line,
        msg: msg.into(),
    }
}

fn parse_header(line: &str) -> Result<(GridHeader, usize)> {
    let rest = line
        .strip_prefix("# ftp-grid ")
        .ok_or_else(|| line_err(1, "missing '# ftp-grid' header"))?;
    let mut fields = rest.split_whitespace();
    let version = fields
        .next()
        .and_then(|v| v.strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| line_err(1, "missing version"))?;
    if version != VERSION {
        return Err(FormatError::Version {
            what: "grid dataset",
            found: version,
            supported: VERSION,
        });
    }
    let (mut split, mut seed, mut len, mut p_obs, mut p_zero, mut count) =
        (None, None, None, None, None, None);
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| line_err(1, format!("expected key=value, got {f:?}")))?;
        let bad = || line_err(1, format!("bad value for {k}: {v:?}"));
        match k {
            "split" => split = Some(v.to_string()),
            "seed" => seed = Some(v.parse().map_err(|_| bad())?),
            "len" => {
                let (a, b) = v.split_once('-').ok_or_else(bad)?;
                len = Some((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?));
            }
            "p_obstruction" => p_obs = Some(v.parse().map_err(|_| bad())?),
            "p_zero" => p_zero = Some(v.parse().map_err(|_| bad())?),
            "count" => count = Some(v.parse().map_err(|_| bad())?),
            _ => return Err(line_err(1, format!("unknown header field {k:?}"))),
        }
    }
    let missing = |k: &str| line_err(1, format!("header lacks {k}"));
    let header = GridHeader {
        split: split.ok_or_else(|| missing("split"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        len: len.ok_or_else(|| missing("len"))?,
        world: WorldParams {
            p_obstruction: p_obs.ok_or_else(|| missing("p_obstruction"))?,
            p_zero: p_zero.ok_or_else(|| missing("p_zero"))?,
        },
    };
    Ok((header, count.ok_or_else(|| missing("count"))?))
}

fn parse_record(line: &str, n: usize) -> Result<GridInstance> {
    let (prog, hex_tokens) = line
        .split_once('\t')
        .ok_or_else(|| line_err(n, "expected program<TAB>tokens"))?;
    let bytes = hex::decode(hex_tokens).map_err(|e| line_err(n, format!("bad hex: {e}")))?;
    let ids: Vec<u32> = bytes.into_iter().map(u32::from).collect();
    let inst = decode_instance(&ids).map_err(|e| line_err(n, e.to_string()))?;
    let named = parse_program(prog).map_err(|e| line_err(n, e.to_string()))?;
    if named != inst.program {
        return Err(line_err(
            n,
            format!("program {prog:?} disagrees with the token sequence"),
        ));
    }
    if !inst.is_consistent() {
        return Err(line_err(
            n,
            "a stop grid is not the result of running the program",
        ));
    }
    Ok(inst)
}

pub fn parse_grid(text: &str) -> Result<GridFile> {
    let mut lines = text.lines();
    let (header, count) = parse_header(lines.next().ok_or_else(|| line_err(1, "empty file"))?)?;
    let instances = lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_record(l, i + 2))
        .collect::<Result<Vec<_>>>()?;
    if instances.len() != count {
        return Err(line_err(
            1,
            format!(
                "header promises {count} records, file holds {}",
                instances.len()
            ),
        ));
    }
    Ok(GridFile { header, instances })
}

pub fn read_grid(path: &Path) -> Result<GridFile> {
    parse_grid(&std::fs::read_to_string(path).map_err(io_err(path))?)
}
