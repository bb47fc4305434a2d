//! The `MPMA1` checkpoint container.
//!
//! ```text
//! MPMA1
//! key=value            (metadata, any number of lines)
//! array=NAME TAG D0,D1,...
//! end
//! <raw little-endian arrays in manifest order>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &str = "MPMA1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: KvMap,
    pub arrays: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(meta: KvMap) -> Self {
        Checkpoint {
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.arrays.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\n");
        for (k, v) in self.meta.iter() {
            head.push_str(&format!("{k}={v}\n"));
        }
        for (name, t) in &self.arrays {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("array={name} {} {}\n", T::TAG, dims.join(",")));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for (_, t) in &self.arrays {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated manifest".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(bad(format!("not an {MAGIC} checkpoint")));
        }
        let mut meta = KvMap::new();
        let mut specs = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed manifest line {line:?}")))?;
            if k != "array" {
                meta.insert(k, v);
                continue;
            }
            let parts: Vec<&str> = v.split(' ').collect();
            if parts.len() != 3 {
                return Err(bad(format!("malformed array entry {v:?}")));
            }
            if parts[1] != T::TAG {
                return Err(bad(format!("array {} stored as {}, expected {}", parts[0], parts[1], T::TAG)));
            }
            let shape = parts[2]
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad extent in {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            specs.push((parts[0].to_string(), shape));
        }
        let mut arrays = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let len = n * T::BYTES;
            if bytes.len() < pos + len {
                return Err(bad(format!("truncated data for array {name}")));
            }
            let data = bytes[pos..pos + len].chunks_exact(T::BYTES).map(T::read_le).collect();
            pos += len;
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("array {name}: {e}")))?;
            arrays.push((name, t));
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
