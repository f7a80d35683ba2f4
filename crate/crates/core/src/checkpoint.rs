//! Single-file container: a text manifest followed by a little-endian blob.
//!
//! ```text
//! arcslot-v1
//! meta <key>=<value>
//! tensor <name> f32 <d0,d1,...> <byte offset>
//! ---
//! <blob>
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &str = "arcslot-v1";
const SEPARATOR: &[u8] = b"---\n";

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        for (k, v) in &self.meta {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Checkpoint(format!("meta entry `{k}` is not single-line")));
            }
            head.push_str(&format!("meta {k}={v}\n"));
        }
        let mut blob = Vec::new();
        for (name, t) in self.params.iter() {
            if name.contains(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("tensor name `{name}` has whitespace")));
            }
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!("tensor {name} f32 {} {}\n", shape.join(","), blob.len()));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = head.into_bytes();
        out.extend_from_slice(SEPARATOR);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let sep = bytes
            .windows(SEPARATOR.len())
            .position(|w| w == SEPARATOR)
            .ok_or_else(|| Error::Checkpoint("manifest terminator not found".into()))?;
        let head = std::str::from_utf8(&bytes[..sep]).map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let blob = &bytes[sep + SEPARATOR.len()..];
        let mut lines = head.lines();
        match lines.next() {
            Some(MAGIC) => {}
            Some(other) => return Err(Error::Checkpoint(format!("unsupported version `{other}`"))),
            None => return Err(Error::Checkpoint("empty manifest".into())),
        }
        let mut ck = Checkpoint::default();
        for line in lines {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("bad meta line `{line}`")))?;
                ck.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [name, dtype, shape, offset] = parts[..] else {
                    return Err(Error::Checkpoint(format!("bad tensor line `{line}`")));
                };
                if dtype != "f32" {
                    return Err(Error::Checkpoint(format!("unsupported dtype `{dtype}`")));
                }
                let shape: Vec<usize> = shape
                    .split(',')
                    .map(|s| s.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Checkpoint(format!("bad shape in `{line}`")))?;
                let offset: usize = offset
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad offset in `{line}`")))?;
                let n: usize = shape.iter().product();
                let end = offset + 4 * n;
                if end > blob.len() {
                    return Err(Error::Checkpoint(format!("tensor `{name}` runs past the blob")));
                }
                let data = blob[offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                ck.params.insert(name, Tensor::new(shape, data)?)?;
            } else {
                return Err(Error::Checkpoint(format!("unrecognized manifest line `{line}`")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut ck = Checkpoint::default();
        ck.meta.insert("completed_stage".into(), "2".into());
        ck.params
            .insert(
                "proj.w1",
                Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, -2.25, 1e-30]).unwrap(),
            )
            .unwrap();
        ck.params
            .insert("gate.layer0.b2", Tensor::filled(&[1, 1], -1.0))
            .unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert!(bytes.starts_with(b"arcslot-v1\n"));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        for (name, t) in ck.params.iter() {
            assert!(back.params.get(name).unwrap().bit_eq(t));
        }
    }

    #[test]
    fn rejects_foreign_or_truncated_files() {
        assert!(Checkpoint::from_bytes(b"other-v9\n---\n").is_err());
        let mut ck = Checkpoint::default();
        ck.params.insert("proj.b1", Tensor::filled(&[1, 4], 2.0)).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
