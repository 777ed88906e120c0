//! `SPKT` tensor files.
//!
//! Layout (little-endian): magic `SPKT`, version `u16`, ndim `u8`, each dim as
//! `u32`, dtype tag `u8` (1 = f32), then the row-major payload. Free-form
//! metadata lives in an optional `<path>.meta` sidecar of `key = value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SPKT";
pub const TENSOR_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    dims: Vec<usize>,
    data: Vec<f32>,
    pub meta: Metadata,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::InvalidInput(format!("unsupported tensor rank {}", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidInput(format!("dimension too large in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidInput(format!(
                "payload of {} values does not match dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            data,
            meta: Metadata::new(),
        })
    }

    pub fn from_array2(a: ArrayView2<f64>) -> Self {
        let (h, w) = a.dim();
        Self::new(vec![h, w], a.iter().map(|&v| v as f32).collect()).expect("dims match payload")
    }

    pub fn from_array3(a: ArrayView3<f64>) -> Self {
        let (n, h, w) = a.dim();
        Self::new(vec![n, h, w], a.iter().map(|&v| v as f32).collect()).expect("dims match payload")
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        match self.dims[..] {
            [h, w] => Ok(Array2::from_shape_vec((h, w), self.data.iter().map(|&v| v as f64).collect())
                .expect("dims validated")),
            _ => Err(Error::InvalidInput(format!("expected a 2-D tensor, got dims {:?}", self.dims))),
        }
    }

    pub fn to_array3(&self) -> Result<Array3<f64>> {
        match self.dims[..] {
            [n, h, w] => Ok(Array3::from_shape_vec((n, h, w), self.data.iter().map(|&v| v as f64).collect())
                .expect("dims validated")),
            _ => Err(Error::InvalidInput(format!("expected a 3-D tensor, got dims {:?}", self.dims))),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&[self.dims.len() as u8])?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[DTYPE_F32])?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Parses the binary body; `path` is only used in error messages.
    pub fn read_from(mut r: impl Read, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let io = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(path, "truncated tensor file")
            } else {
                Error::io(path, e)
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != TENSOR_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(io)?;
        let version = u16::from_le_bytes(b2);
        if version != TENSOR_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1).map_err(io)?;
        let ndim = b1[0] as usize;
        if ndim == 0 {
            return Err(bad("zero-rank tensor".into()));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut b4 = [0u8; 4];
        for _ in 0..ndim {
            r.read_exact(&mut b4).map_err(io)?;
            dims.push(u32::from_le_bytes(b4) as usize);
        }
        r.read_exact(&mut b1).map_err(io)?;
        if b1[0] != DTYPE_F32 {
            return Err(bad(format!("unsupported dtype tag {}", b1[0])));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad(format!("dims {dims:?} overflow")))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(io)?;
        if payload.len() != n * 4 {
            return Err(bad(format!(
                "payload is {} bytes, dims {dims:?} need {}",
                payload.len(),
                n * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            dims,
            data,
            meta: Metadata::new(),
        })
    }

    /// Writes the tensor and, when there is metadata, its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        if !self.meta.is_empty() {
            write_meta(&sidecar_path(path), &self.meta)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut t = Self::read_from(BufReader::new(f), path)?;
        let side = sidecar_path(path);
        if side.exists() {
            t.meta = read_meta(&side)?;
        }
        Ok(t)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_meta(path: &Path, meta: &Metadata) -> Result<()> {
    let mut out = String::new();
    for (k, v) in meta {
        if k.is_empty() || k.contains(['=', '\n', '\r']) || k.trim() != k || v.contains(['\n', '\r']) {
            return Err(Error::InvalidInput(format!("metadata entry {k:?} cannot be written")));
        }
        out.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Blank lines and lines starting with `#` are skipped.
pub fn read_meta(path: &Path) -> Result<Metadata> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut meta = Metadata::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected `key = value`", i + 1)))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_memory() {
        let t = TensorFile::new(vec![2, 3], vec![0.0, -1.5, f32::MIN_POSITIVE, 1e30, -0.0, 7.25]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 2 + 1 + 8 + 1 + 24);
        let back = TensorFile::read_from(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back.dims(), t.dims());
        let bits = |t: &TensorFile| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn rejects_corruption() {
        let t = TensorFile::new(vec![4], vec![1.0; 4]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let p = Path::new("x");

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(TensorFile::read_from(&bad[..], p), Err(Error::Format { .. })));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(TensorFile::read_from(&bad[..], p), Err(Error::Format { .. })));
        let bad = &buf[..buf.len() - 1];
        assert!(matches!(TensorFile::read_from(bad, p), Err(Error::Format { .. })));
        let mut bad = buf.clone();
        bad.push(0);
        assert!(matches!(TensorFile::read_from(&bad[..], p), Err(Error::Format { .. })));
        let mut bad = buf;
        bad[11] = 2;
        assert!(matches!(TensorFile::read_from(&bad[..], p), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_mismatched_payload() {
        assert!(TensorFile::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(TensorFile::new(vec![], vec![]).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.spkt");
        let t = TensorFile::from_array2(Array2::from_elem((3, 2), 1.5).view())
            .with_meta("seed", 42)
            .with_meta("rng", "chacha8 = keyed");
        t.save(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = TensorFile::load(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.meta["rng"], "chacha8 = keyed");
        assert_eq!(back.to_array2().unwrap(), Array2::from_elem((3, 2), 1.5));
        assert!(back.to_array3().is_err());
    }

    #[test]
    fn meta_rejects_multiline_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Metadata::new();
        m.insert("k".into(), "a\nb".into());
        assert!(write_meta(&dir.path().join("m"), &m).is_err());
    }
}
