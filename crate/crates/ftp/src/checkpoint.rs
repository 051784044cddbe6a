//! Binary checkpoints.
//!
//! Layout (little-endian): magic `FTPC`, `u32` version, `u8` dtype code,
//! model header string (`kind=..` then the model `key=value` lines), free-form
//! metadata string, `u32` tensor count, then per tensor its name, `u8`
//! dtype code, `u32` rank, `u64` dims and raw values. An optional trailer holds the optimizer: `u8`
//! flag, `u64` step, first and second moments in tensor order, and the
//! ChaCha8 data stream as seed, stream and word position. Strings are `u32`
//! length-prefixed UTF-8.

use std::path::Path;

use ftp_core::model::{Model, ModelConfig, ModelKind, ParamStore};
use ftp_core::numerics::{DType, Scalar, Tensor};
use ftp_core::training::{OptimState, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, write_atomic, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"FTPC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub state: Option<TrainState<T>>,
    /// Resolved run configuration or any other text worth keeping.
    pub meta: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend(s.as_bytes());
    }
    fn values<T: Scalar>(&mut self, vals: &[T]) {
        for &x in vals {
            x.write_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> FormatError {
        FormatError::Bytes {
            what: "checkpoint",
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| FormatError::Bytes {
            what: "checkpoint",
            offset: at as u64,
            msg: "invalid UTF-8".into(),
        })
    }
    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let size = T::DTYPE.size();
        let b = self.take(n * size)?;
        Ok(b.chunks_exact(size).map(T::read_le).collect())
    }
}

pub fn encode<T: Scalar>(ck: &Checkpoint<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u32(VERSION);
    w.u8(T::DTYPE.code());
    w.str(&format!(
        "kind={}\n{}",
        ck.model.kind().name(),
        ck.model.config().to_kv()
    ));
    w.str(&ck.meta);
    let params = ck.model.params();
    w.u32(params.len() as u32);
    for (name, t) in params.iter() {
        w.str(name);
        w.u8(T::DTYPE.code());
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.values(t.data());
    }
    match &ck.state {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.u64(s.step);
            for m in s.optim.m.iter().chain(&s.optim.v) {
                w.values(m);
            }
            w.0.extend(s.rng.get_seed());
            w.u64(s.rng.get_stream());
            w.0.extend(s.rng.get_word_pos().to_le_bytes());
        }
    }
    w.0
}

fn header(r: &mut Reader) -> Result<DType> {
    if r.take(4)? != MAGIC {
        return Err(FormatError::Bytes {
            what: "checkpoint",
            offset: 0,
            msg: "bad magic, not a checkpoint".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Version {
            what: "checkpoint",
            found: version,
            supported: VERSION,
        });
    }
    let code = r.u8()?;
    DType::from_code(code).ok_or_else(|| r.err(format!("unknown dtype code {code}")))
}

pub fn decode<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf, pos: 0 };
    let dtype = header(&mut r)?;
    if dtype != T::DTYPE {
        return Err(r.err(format!("stored dtype {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let at = r.pos;
    let cfg_text = r.str()?;
    let (first, rest) = cfg_text.split_once('\n').unwrap_or((&cfg_text, ""));
    let kind = first
        .strip_prefix("kind=")
        .ok_or_else(|| FormatError::Bytes {
            what: "checkpoint",
            offset: at as u64,
            msg: "missing model kind".into(),
        })
        .and_then(|k| Ok(ModelKind::parse(k)?))?;
    let config = ModelConfig::from_kv(rest)?;
    let meta = r.str()?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let code = r.u8()?;
        if code != T::DTYPE.code() {
            return Err(r.err(format!(
                "tensor {name} has dtype code {code}, file header says {}",
                T::DTYPE.code()
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| Ok(r.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product();
        let data = r.values::<T>(n)?;
        params.insert(&name, Tensor::new(&shape, data)?);
    }
    let model = Model::from_params(kind, config, params)?;
    let state = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let lens: Vec<usize> = model.params().tensors().iter().map(|t| t.len()).collect();
            let read_all = |r: &mut Reader| {
                lens.iter()
                    .map(|&n| r.values::<T>(n))
                    .collect::<Result<Vec<_>>>()
            };
            let m = read_all(&mut r)?;
            let v = read_all(&mut r)?;
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            Some(TrainState {
                step,
                optim: OptimState { m, v },
                rng,
            })
        }
        f => return Err(r.err(format!("bad optimizer flag {f}"))),
    };
    if r.pos != buf.len() {
        return Err(r.err(format!("{} unexpected trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint { model, state, meta })
}

pub fn save<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    write_atomic(path, &encode(ck))
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path).map_err(io_err(path))?)
}

/// Stored element type, read from the header alone.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let buf = std::fs::read(path).map_err(io_err(path))?;
    header(&mut Reader { buf: &buf, pos: 0 })
}
