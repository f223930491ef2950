//! Dense tensor values and their file formats.
//!
//! Binary container (little endian):
//!
//! ```text
//! "PIMT" | u32 version=1 | u32 count | count x { u32 name_len | name | u32 rank | rank x u32 extent | f64 data... }
//! ```
//!
//! Text format, one block per tensor:
//!
//! ```text
//! A [2][3]
//! 1 2 3
//! 4 5 6
//! ```

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub type TensorMap = BTreeMap<String, TensorValue>;

impl TensorValue {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        TensorValue {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        TensorValue {
            dims: dims.to_vec(),
            data,
        }
    }

    /// Uniform values in [-1, 1) from a seeded generator.
    pub fn random(dims: &[usize], rng: &mut impl Rng) -> Self {
        let n: usize = dims.iter().product();
        TensorValue {
            dims: dims.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Small integers in [-4, 4]; sums and products of these are exact.
    pub fn random_integers(dims: &[usize], rng: &mut impl Rng) -> Self {
        let n: usize = dims.iter().product();
        TensorValue {
            dims: dims.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-4i32..=4) as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major flat offset of a multi-index.
    pub fn flat(&self, index: &[usize]) -> usize {
        let mut off = 0;
        for (d, &i) in index.iter().enumerate() {
            off = off * self.dims[d] + i;
        }
        off
    }
}

/// Random inputs for every input tensor of a kernel.
pub fn random_inputs(kernel: &crate::ir::Kernel, seed: u64) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kernel
        .inputs()
        .map(|t| (t.name.clone(), TensorValue::random(&t.dims, &mut rng)))
        .collect()
}

/// Largest relative error between two tensor maps over the keys of `expected`.
///
/// Relative error is |a-b| / max(|b|, 1), so values near zero are compared
/// absolutely.
pub fn max_rel_error(actual: &TensorMap, expected: &TensorMap) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (name, want) in expected {
        let got = actual
            .get(name)
            .ok_or_else(|| Error::Precondition(format!("missing tensor `{name}`")))?;
        if got.dims != want.dims {
            return Err(Error::Precondition(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                got.dims, want.dims
            )));
        }
        for (a, b) in got.data.iter().zip(&want.data) {
            let err = (a - b).abs() / b.abs().max(1.0);
            if err.is_nan() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

const MAGIC: &[u8; 4] = b"PIMT";
const VERSION: u32 = 1;

pub fn encode_binary(tensors: &TensorMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Artifact("tensor file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_binary(buf: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Artifact("bad tensor file magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Artifact(format!(
            "unsupported tensor file version {version}"
        )));
    }
    let count = r.u32()?;
    let mut out = TensorMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Artifact("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.insert(name, TensorValue { dims, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Artifact("trailing bytes after tensor data".into()));
    }
    Ok(out)
}

pub fn encode_text(tensors: &TensorMap) -> String {
    let mut out = String::new();
    for (name, t) in tensors {
        out.push_str(name);
        out.push(' ');
        for d in &t.dims {
            out.push_str(&format!("[{d}]"));
        }
        out.push('\n');
        let row = *t.dims.last().unwrap_or(&1);
        for chunk in t.data.chunks(row.max(1)) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn decode_text(text: &str) -> Result<TensorMap> {
    let mut out = TensorMap::new();
    let mut current: Option<(String, Vec<usize>, Vec<f64>)> = None;
    let finish = |cur: Option<(String, Vec<usize>, Vec<f64>)>, out: &mut TensorMap| -> Result<()> {
        if let Some((name, dims, data)) = cur {
            let n: usize = dims.iter().product();
            if data.len() != n {
                return Err(Error::Artifact(format!(
                    "tensor `{name}` declares {n} values, found {}",
                    data.len()
                )));
            }
            out.insert(name, TensorValue { dims, data });
        }
        Ok(())
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let first = line.chars().next().unwrap();
        if first.is_ascii_alphabetic() || first == '_' {
            finish(current.take(), &mut out)?;
            let (name, rest) = line.split_once(' ').unwrap_or((line, ""));
            let dims = rest
                .trim()
                .trim_start_matches('[')
                .trim_end_matches(']')
                .split("][")
                .map(|d| d.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Artifact(format!("line {}: bad extents", lineno + 1)))?;
            current = Some((name.to_string(), dims, Vec::new()));
        } else {
            let Some((_, _, data)) = current.as_mut() else {
                return Err(Error::Artifact(format!(
                    "line {}: values before a header",
                    lineno + 1
                )));
            };
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| {
                    Error::Artifact(format!("line {}: bad number `{tok}`", lineno + 1))
                })?);
            }
        }
    }
    finish(current, &mut out)?;
    Ok(out)
}

/// Decode either format, sniffing the binary magic.
pub fn decode_any(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.starts_with(MAGIC) {
        decode_binary(bytes)
    } else {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| Error::Artifact("tensor file is neither binary nor UTF-8 text".into()))?;
        decode_text(text)
    }
}
