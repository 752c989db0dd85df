//! Single-file checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "UALNCKPT"
//! format_version   u32
//! arch_hash        u64
//! metadata_len     u32, then metadata_len bytes of UTF-8 JSON
//! array_count      u32
//! per array:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8   (0 = f32, 1 = f64)
//!   ndim     u32, then ndim x u64 dims
//!   data     product(dims) x element size
//! checksum         32 bytes, SHA-256 of every preceding byte
//! ```
//!
//! Parameters are stored under `param/<name>`, optimiser state under
//! `optim/<key>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{HostArray, HostData, ParamStore};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"UALNCKPT";
const PARAM_PREFIX: &str = "param/";
const OPTIM_PREFIX: &str = "optim/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synthesis,
    Segmentation,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// u128 word position, kept as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Contract("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Contract(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Completed optimisation steps.
    pub iteration: usize,
    /// Foreground classes (0 for stage 1).
    pub num_classes: usize,
    pub config: TrainConfig,
    pub rng: RngState,
    pub optimizer_steps: BTreeMap<String, u64>,
    pub best_val_dice: Option<f64>,
    pub best_iteration: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arch_hash: u64,
    pub params: BTreeMap<String, HostArray>,
    pub optimizer: BTreeMap<String, HostArray>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: &ParamStore, optimizer: BTreeMap<String, HostArray>) -> Result<Self> {
        Ok(Self {
            meta,
            arch_hash: params.architecture_hash(),
            params: params.to_host()?,
            optimizer,
        })
    }

    /// Copy parameters into `params` after checking the architecture digest.
    pub fn restore_params(&self, params: &ParamStore, path: &Path) -> Result<()> {
        if params.architecture_hash() != self.arch_hash {
            return Err(Error::load(path, "checkpoint architecture does not match the model"));
        }
        params
            .load_host(&self.params)
            .map_err(|e| Error::load(path, e.to_string()))
    }

    pub fn require_stage(&self, stage: Stage, path: &Path) -> Result<()> {
        if self.meta.stage != stage {
            return Err(Error::load(
                path,
                format!("expected a {stage:?} checkpoint, found {:?}", self.meta.stage),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::Contract(e.to_string()))?;
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.arch_hash.to_le_bytes());
        b.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        b.extend_from_slice(meta.as_bytes());
        let arrays: Vec<(String, &HostArray)> = self
            .params
            .iter()
            .map(|(k, v)| (format!("{PARAM_PREFIX}{k}"), v))
            .chain(self.optimizer.iter().map(|(k, v)| (format!("{OPTIM_PREFIX}{k}"), v)))
            .collect();
        b.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, a) in arrays {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(match a.data {
                HostData::F32(_) => 0,
                HostData::F64(_) => 1,
            });
            b.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                HostData::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                HostData::F64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |why: &str| Error::checkpoint(path, format!("corrupt or truncated file ({why})"));
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            if bytes.len() >= MAGIC.len() && &bytes[..MAGIC.len()] != MAGIC {
                return Err(Error::checkpoint(path, "not a checkpoint file"));
            }
            return Err(corrupt("too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32().ok_or_else(|| corrupt("header"))?;
        if version != FORMAT_VERSION {
            return Err(Error::checkpoint(
                path,
                format!("unsupported format version {version} (this build reads {FORMAT_VERSION})"),
            ));
        }
        let arch_hash = r.u64().ok_or_else(|| corrupt("header"))?;
        let meta_len = r.u32().ok_or_else(|| corrupt("header"))? as usize;
        let meta_bytes = r.take(meta_len).ok_or_else(|| corrupt("metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::checkpoint(path, format!("invalid metadata: {e}")))?;
        let count = r.u32().ok_or_else(|| corrupt("array table"))?;
        let mut params = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| corrupt("array name"))? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(|| corrupt("array name"))?)
                .map_err(|_| corrupt("array name"))?
                .to_string();
            let dtype = r.take(1).ok_or_else(|| corrupt("dtype"))?[0];
            let ndim = r.u32().ok_or_else(|| corrupt("dims"))? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| corrupt("dims"))?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => HostData::F32(
                    r.take(n * 4)
                        .ok_or_else(|| corrupt("array data"))?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => HostData::F64(
                    r.take(n * 8)
                        .ok_or_else(|| corrupt("array data"))?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => return Err(corrupt(&format!("unknown dtype tag {other}"))),
            };
            let array = HostArray { shape, data };
            if let Some(k) = name.strip_prefix(PARAM_PREFIX) {
                params.insert(k.to_string(), array);
            } else if let Some(k) = name.strip_prefix(OPTIM_PREFIX) {
                optimizer.insert(k.to_string(), array);
            } else {
                return Err(corrupt(&format!("unexpected array `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            meta,
            arch_hash,
            params,
            optimizer,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Write atomically: a temporary file in the same directory, then rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<PathBuf> {
    let bytes = ckpt.to_bytes()?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::checkpoint(path, "path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let tmp = dir.join(format!(".{file_name}.tmp"));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::checkpoint(path, e.to_string())
    })?;
    Ok(path.to_path_buf())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(7);
        rng.next_u64();
        let mut params = BTreeMap::new();
        params.insert(
            "w".to_string(),
            HostArray {
                shape: vec![2, 3],
                data: HostData::F32(vec![1.0, -2.5, f32::MIN_POSITIVE, 3.25, 0.0, -0.0]),
            },
        );
        params.insert(
            "g".to_string(),
            HostArray {
                shape: vec![1],
                data: HostData::F64(vec![std::f64::consts::PI]),
            },
        );
        let mut optimizer = BTreeMap::new();
        optimizer.insert(
            "adam/m/w".to_string(),
            HostArray {
                shape: vec![2, 3],
                data: HostData::F32(vec![0.5; 6]),
            },
        );
        Checkpoint {
            meta: CheckpointMeta {
                stage: Stage::Synthesis,
                iteration: 12,
                num_classes: 0,
                config: TrainConfig::default(),
                rng: RngState::capture(&rng),
                optimizer_steps: [("adam".to_string(), 12u64)].into(),
                best_val_dice: Some(71.5),
                best_iteration: Some(10),
            },
            arch_hash: 0xdead_beef,
            params,
            optimizer,
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        match (&back.params["w"].data, &c.params["w"].data) {
            (HostData::F32(a), HostData::F32(b)) => {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
            }
            _ => panic!("dtype changed"),
        }
        assert!(!dir.path().join(".a.ckpt.tmp").exists());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(4);
        rng.next_u32();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore().unwrap();
        for _ in 0..10 {
            assert_eq!(rng.next_u64(), resumed.next_u64());
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&sample(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            let err = load_checkpoint(&path).unwrap_err();
            assert!(err.to_string().contains("corrupt"), "{err}");
        }
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let c = sample();
        let mut bytes = c.to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 32);
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn foreign_file_rejected() {
        let err = Checkpoint::from_bytes(&[0u8; 64], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("not a checkpoint"), "{err}");
    }
}
