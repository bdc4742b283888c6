//! Named-tensor checkpoints: a text manifest followed by a little-endian f32 payload.
//!
//! ```text
//! restore-checkpoint 1
//! preset toy
//! meta phase distill
//! tensor repair.fd0.conv.w [16,2,5,1] 0
//! ...
//! end
//! <payload>
//! ```
//!
//! Offsets are byte offsets into the payload. Values are held at f32
//! precision in memory too, so a checkpoint built from a trained store equals
//! the one read back from disk.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::numcore::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "restore-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub preset: String,
    pub meta: BTreeMap<String, String>,
    tensors: ParamStore,
}

fn round_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Checkpoint(format!("{kind} '{s}' must be a non-empty token without whitespace")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(preset: &str) -> Self {
        Checkpoint {
            preset: preset.to_string(),
            meta: BTreeMap::new(),
            tensors: ParamStore::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn tensors(&self) -> &ParamStore {
        &self.tensors
    }

    /// Adds every tensor of `store` as `prefix.name`, rounded to f32.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, t) in store.iter() {
            self.tensors.add(format!("{prefix}.{name}"), round_f32(t))?;
        }
        Ok(())
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.tensors.names().any(|n| n.starts_with(&p))
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> Result<ParamStore> {
        let p = format!("{prefix}.");
        let mut out = ParamStore::new();
        for (name, t) in self.tensors.iter() {
            if let Some(rest) = name.strip_prefix(&p) {
                out.add(rest, t.clone())?;
            }
        }
        if out.is_empty() {
            return Err(Error::Checkpoint(format!("no tensors under '{prefix}'")));
        }
        Ok(out)
    }

    /// Loads `prefix.*` into `target`, which fixes the expected names and shapes.
    pub fn load_into(&self, prefix: &str, target: &mut ParamStore) -> Result<()> {
        target.load_from(&self.extract(prefix)?)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.count()
    }

    /// Parameter counts grouped by the first name segment.
    pub fn counts_by_module(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, t) in self.tensors.iter() {
            let module = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(module).or_insert(0) += t.numel();
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_token("preset", &self.preset)?;
        let mut head = format!("{MAGIC} {FORMAT_VERSION}\npreset {}\n", self.preset);
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            check_token("meta value", v)?;
            head.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in self.tensors.iter() {
            check_token("tensor name", name)?;
            if t.numel() == 0 {
                return Err(Error::Checkpoint(format!("tensor {name} is empty")));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("tensor {name} [{}] {offset}\n", dims.join(",")));
            offset += 4 * t.numel();
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, t) in self.tensors.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut pos = 0usize;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("manifest is not terminated by 'end'".into()))?;
            let line = std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not UTF-8".into()))?;
            pos += end + 1;
            Ok(line.to_string())
        };
        let first = next_line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut ckpt = Checkpoint::new("");
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        loop {
            let line = next_line()?;
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["end"] => break,
                ["preset", p] => ckpt.preset = p.to_string(),
                ["meta", k, v] => {
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, shape, offset] => {
                    let inner = shape
                        .strip_prefix('[')
                        .and_then(|s| s.strip_suffix(']'))
                        .ok_or_else(|| bad(format!("tensor {name}: malformed shape {shape}")))?;
                    let dims = if inner.is_empty() {
                        Vec::new()
                    } else {
                        inner
                            .split(',')
                            .map(|d| d.parse::<usize>().map_err(|_| bad(format!("tensor {name}: malformed shape {shape}"))))
                            .collect::<Result<Vec<_>>>()?
                    };
                    let offset = offset.parse::<usize>().map_err(|_| bad(format!("tensor {name}: malformed offset")))?;
                    entries.push((name.to_string(), dims, offset));
                }
                _ => return Err(bad(format!("unrecognised manifest line '{line}'"))),
            }
        }
        if ckpt.preset.is_empty() {
            return Err(bad("manifest has no preset line".into()));
        }
        let payload = &bytes[pos..];
        let mut expected = 0usize;
        for (name, dims, offset) in entries {
            let n: usize = dims.iter().product();
            if offset != expected || n == 0 {
                return Err(bad(format!("tensor {name}: offset {offset} breaks the gap-free layout (expected {expected})")));
            }
            let end = offset + 4 * n;
            if end > payload.len() {
                return Err(bad(format!("tensor {name}: payload truncated")));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            ckpt.tensors.add(name, Tensor::new(dims, data)?)?;
            expected = end;
        }
        if expected != payload.len() {
            return Err(bad(format!("payload is {} bytes, manifest describes {expected}", payload.len())));
        }
        Ok(ckpt)
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized file.
    pub fn file_hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::new([2, 3], vec![0.1, -2.0, 3.5, 1e-9, 7.0, -0.3]).unwrap()).unwrap();
        store.add("b", Tensor::new([1], vec![4.25]).unwrap()).unwrap();
        let mut c = Checkpoint::new("toy").with_meta("phase", "teacher");
        c.insert_store("repair", &store).unwrap();
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta("phase"), Some("teacher"));
        assert_eq!(back.extract("repair").unwrap().by_name("b").unwrap().data(), &[4.25]);
    }

    #[test]
    fn corrupt_manifests_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("[1] 24", "[1] 28").into_bytes();
        assert!(Checkpoint::from_bytes(&text).is_err());
        assert!(Checkpoint::from_bytes(b"hello\n").is_err());
        assert!(Checkpoint::from_bytes(b"restore-checkpoint 1\npreset toy\n").is_err());
    }

    #[test]
    fn empty_checkpoint() {
        let c = Checkpoint::new("paper");
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.param_count(), 0);
        assert!(back.extract("repair").is_err());
    }
}
