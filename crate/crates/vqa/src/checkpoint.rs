//! Checkpoint container: training config, step counter, and named f32 blobs
//! (parameters plus optimizer moments) in a little-endian binary file.
//!
//! Layout: magic `SAAC`, version u16, step u64, length-prefixed config text,
//! blob count u32, then per blob a length-prefixed name, u32 rank, u32 dims,
//! and the f32 payload. Blobs are sorted by name so identical state always
//! produces identical bytes.

use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAAC";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const CHECKPOINT_EXTENSION: &str = "saac";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    blobs: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Blob names must be unique; they are stored sorted.
    pub fn new(
        config: TrainConfig,
        step: u64,
        mut blobs: Vec<(String, Tensor<f32>)>,
    ) -> Result<Self> {
        blobs.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in blobs.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Checkpoint(format!(
                    "duplicate blob name {:?}",
                    pair[0].0
                )));
            }
        }
        Ok(Self {
            config,
            step,
            blobs,
        })
    }

    pub fn blob(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blobs
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| &self.blobs[i].1)
    }

    pub fn blobs(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.blobs.iter().map(|(n, t)| (n, t))
    }

    pub fn blob_count(&self) -> usize {
        self.blobs.len()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    let config = ckpt.config.serialize();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(ckpt.blobs.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.blobs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(std::fs::write(path, out)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} while reading {what}",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?} at byte 0, want {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let step = r.u64("step")?;
    let config_text = r.string("config")?;
    let config = TrainConfig::parse(&config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let blob_count = r.u32("blob count")? as usize;
    let mut blobs = Vec::with_capacity(blob_count);
    for i in 0..blob_count {
        let name = r.string(&format!("blob {i} name"))?;
        let rank = r.u32(&format!("blob {name:?} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("blob {name:?} dims"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &format!("blob {name:?} data"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blobs.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after blob {}",
            bytes.len() - r.pos,
            blob_count.saturating_sub(1)
        )));
    }
    Checkpoint::new(config, step, blobs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig {
            seed: 7,
            total_steps: 10,
            ..TrainConfig::default()
        };
        Checkpoint::new(
            cfg,
            3,
            vec![
                (
                    "w.b".into(),
                    Tensor::from_vec(vec![2, 2], vec![1.0, -2.5, 0.0, 4.25]).unwrap(),
                ),
                (
                    "w.a".into(),
                    Tensor::from_vec(vec![3], vec![0.5, 1.5, -0.125]).unwrap(),
                ),
            ],
        )
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.saac");
        let p2 = dir.path().join("b.saac");
        let ckpt = sample();
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.step, 3);
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.blob("w.a").unwrap().data(), &[0.5, 1.5, -0.125]);
    }

    #[test]
    fn blobs_are_sorted_regardless_of_input_order() {
        let ckpt = sample();
        let names: Vec<&String> = ckpt.blobs().map(|(n, _)| n).collect();
        assert_eq!(names, ["w.a", "w.b"]);
    }

    #[test]
    fn duplicate_blob_names_rejected() {
        let blobs = vec![
            (
                "x".to_string(),
                Tensor::from_vec(vec![1], vec![1.0]).unwrap(),
            ),
            (
                "x".to_string(),
                Tensor::from_vec(vec![1], vec![2.0]).unwrap(),
            ),
        ];
        assert!(Checkpoint::new(TrainConfig::default(), 0, blobs).is_err());
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.saac");
        std::fs::write(&p, b"SAAX\x01\x00").unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(ref m) if m.contains("magic")),
            "{err}"
        );
    }

    #[test]
    fn wrong_version_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v9.saac");
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        bytes.extend_from_slice(&9u16.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.saac");
        save_checkpoint(&sample(), &p).unwrap();
        let full = std::fs::read(&p).unwrap();

        std::fs::write(&p, &full[..full.len() - 2]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));

        let mut long = full.clone();
        long.push(0);
        std::fs::write(&p, long).unwrap();
        let err = load_checkpoint(&p).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }
}
