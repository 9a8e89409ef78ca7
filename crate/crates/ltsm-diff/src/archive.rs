//! Named-tensor container used for checkpoints, backbone weights and window
//! sets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "LTSMARC1"
//! meta_len     u64
//! metadata     meta_len bytes of UTF-8 JSON
//! count        u64
//! count × record:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dtype      u8      0 = f64, 1 = i64
//!   rank       u8
//!   dims       rank × u64
//!   payload    product(dims) × 8 bytes, row-major
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ltsm_diff_core::data::WindowPair;
use ltsm_diff_core::Matrix;
use serde_json::Value;

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 8] = b"LTSMARC1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::I64(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let expect: u64 = dims.iter().product();
        if expect != data.len() as u64 {
            return Err(AppError::Archive(format!("tensor `{name}`: dims {dims:?} but {} values", data.len())));
        }
        if dims.len() > u8::MAX as usize {
            return Err(AppError::Archive(format!("tensor `{name}`: rank {} too large", dims.len())));
        }
        Ok(Self { name, dims, data })
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self { name: name.into(), dims: vec![m.rows() as u64, m.cols() as u64], data: TensorData::F64(m.as_slice().to_vec()) }
    }

    /// Rank-2 f64 tensors as they are; rank-1 as a single row.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let TensorData::F64(v) = &self.data else {
            return Err(AppError::Archive(format!("tensor `{}` is not f64", self.name)));
        };
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n as usize),
            [r, c] => (*r as usize, *c as usize),
            d => return Err(AppError::Archive(format!("tensor `{}` has rank {}, expected 1 or 2", self.name, d.len()))),
        };
        Ok(Matrix::from_vec(r, c, v.clone())?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub metadata: Value,
    pub tensors: Vec<Tensor>,
}

impl Default for Archive {
    fn default() -> Self {
        Self { metadata: Value::Object(Default::default()), tensors: Vec::new() }
    }
}

impl Archive {
    pub fn new(metadata: Value) -> Self {
        Self { metadata, tensors: Vec::new() }
    }

    pub fn push(&mut self, t: Tensor) -> Result<()> {
        if self.get(&t.name).is_some() {
            return Err(AppError::Archive(format!("duplicate tensor `{}`", t.name)));
        }
        self.tensors.push(t);
        Ok(())
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<()> {
        self.push(Tensor::from_matrix(name, m))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get(name).ok_or_else(|| AppError::Archive(format!("missing tensor `{name}`")))?.to_matrix()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_all(MAGIC)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[t.data.tag(), t.dims.len() as u8])?;
            for d in &t.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            match &t.data {
                TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                TensorData::I64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(AppError::Archive("bad magic; not a tensor archive".into()));
        }
        let meta_len = r.u64()? as usize;
        let metadata: Value = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| AppError::Archive(format!("metadata is not valid JSON: {e}")))?;
        let count = r.u64()?;
        let mut out = Self::new(metadata);
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| AppError::Archive("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(AppError::Archive(format!("duplicate tensor `{name}`")));
            }
            let tag = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= (bytes.len() - r.pos) as u64))
                .ok_or_else(|| AppError::Archive(format!("tensor `{name}`: dims {dims:?} exceed the file")))?
                as usize;
            let raw = r.take(n * 8)?;
            let words = raw.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("chunk of 8"));
            let data = match tag {
                0 => TensorData::F64(words.map(f64::from_le_bytes).collect()),
                1 => TensorData::I64(words.map(i64::from_le_bytes).collect()),
                t => return Err(AppError::Archive(format!("tensor `{name}`: unknown dtype tag {t}"))),
            };
            out.tensors.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(AppError::Archive(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| AppError::io(path, e))?;
        self.write_to(&mut f).map_err(|e| AppError::io(path, e))?;
        f.flush().map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            AppError::Archive(m) => AppError::Archive(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(AppError::Archive(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Window set as `starts` (i64, `n`), `context` (`n × T × d`) and `target`
/// (`n × H × d`).
pub fn windows_to_archive(windows: &[WindowPair], metadata: Value) -> Result<Archive> {
    let mut a = Archive::new(metadata);
    let n = windows.len() as u64;
    let (t, h, d) = windows
        .first()
        .map(|w| (w.lookback() as u64, w.horizon() as u64, w.context.cols() as u64))
        .unwrap_or((0, 0, 0));
    let mut ctx = Vec::new();
    let mut tgt = Vec::new();
    for w in windows {
        if (w.lookback() as u64, w.horizon() as u64, w.context.cols() as u64) != (t, h, d) {
            return Err(AppError::Archive("windows differ in shape".into()));
        }
        ctx.extend_from_slice(w.context.as_slice());
        tgt.extend_from_slice(w.target.as_slice());
    }
    a.push(Tensor::new("starts", vec![n], TensorData::I64(windows.iter().map(|w| w.start as i64).collect()))?)?;
    a.push(Tensor::new("context", vec![n, t, d], TensorData::F64(ctx))?)?;
    a.push(Tensor::new("target", vec![n, h, d], TensorData::F64(tgt))?)?;
    Ok(a)
}

pub fn windows_from_archive(a: &Archive) -> Result<Vec<WindowPair>> {
    let get = |name: &str| a.get(name).ok_or_else(|| AppError::Archive(format!("missing tensor `{name}`")));
    let (starts, ctx, tgt) = (get("starts")?, get("context")?, get("target")?);
    let TensorData::I64(s) = &starts.data else { return Err(AppError::Archive("`starts` must be i64".into())) };
    let (TensorData::F64(c), TensorData::F64(y)) = (&ctx.data, &tgt.data) else {
        return Err(AppError::Archive("`context` and `target` must be f64".into()));
    };
    let ([n, t, d], [n2, h, d2]) = (ctx.dims.as_slice(), tgt.dims.as_slice()) else {
        return Err(AppError::Archive("`context` and `target` must have rank 3".into()));
    };
    if n != n2 || d != d2 || *n as usize != s.len() {
        return Err(AppError::Archive("window tensors disagree in count or channels".into()));
    }
    let (t, h, d) = (*t as usize, *h as usize, *d as usize);
    s.iter()
        .enumerate()
        .map(|(i, &start)| {
            Ok(WindowPair {
                start: usize::try_from(start).map_err(|_| AppError::Archive(format!("negative start {start}")))?,
                context: Matrix::from_vec(t, d, c[i * t * d..(i + 1) * t * d].to_vec())?,
                target: Matrix::from_vec(h, d, y[i * h * d..(i + 1) * h * d].to_vec())?,
            })
        })
        .collect()
}
