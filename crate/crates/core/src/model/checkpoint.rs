//! Binary checkpoint format with a plain-text metadata sidecar.
//!
//! Layout (little endian): magic, format version, config JSON, parameters,
//! optimizer moments and counters, cycle counter, generator state, CRC-32 of
//! everything before it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::params::Adam;
use super::{ModelState, RecognizerConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"STRECCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Contents of the `.meta` sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config_hash: String,
    pub cycle: u64,
    pub charset: String,
    pub written_at: u64,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn config_hash(config: &RecognizerConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    buf.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode(state: &ModelState) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + state.params.len() * 24);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&state.config).expect("config serializes");
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config);
    put_f64s(&mut buf, &state.params);
    let adam = &state.optimizer;
    for x in [adam.beta1, adam.beta2, adam.eps] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&adam.t.to_le_bytes());
    put_f64s(&mut buf, &adam.m);
    put_f64s(&mut buf, &adam.v);
    buf.extend_from_slice(&state.cycle.to_le_bytes());
    buf.extend_from_slice(&state.rng.get_seed());
    buf.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;

    let written_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = format!(
        "format_version = {CHECKPOINT_VERSION}\nconfig_hash = {}\ncycle = {}\ncharset = {}\nwritten_at = {written_at}\n",
        config_hash(&state.config),
        state.cycle,
        state.config.charset.as_string(),
    );
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(self.corrupt("array length exceeds file size"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn corrupt(&self, message: &str) -> Error {
        Error::Checkpoint {
            path: self.path.to_owned(),
            message: message.to_owned(),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |m: String| Error::Checkpoint {
        path: path.to_owned(),
        message: m,
    };
    if buf.len() < MAGIC.len() + 8 || &buf[..MAGIC.len()] != MAGIC {
        return Err(err("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let body_len = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_len..].try_into().unwrap());
    if crc32fast::hash(&buf[..body_len]) != stored {
        return Err(err("checksum mismatch (truncated or corrupt)".into()));
    }
    let mut r = Reader {
        buf: &buf[..body_len],
        pos: 12,
        path,
    };
    let clen = r.u64()? as usize;
    let config: RecognizerConfig =
        serde_json::from_slice(r.take(clen)?).map_err(|e| err(format!("bad config: {e}")))?;
    let params = r.f64s()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;
    let t = r.u64()?;
    let m = r.f64s()?;
    let v = r.f64s()?;
    let cycle = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    if r.pos != body_len {
        return Err(err("trailing bytes".into()));
    }
    if m.len() != params.len() || v.len() != params.len() {
        return Err(err("optimizer state does not match parameter count".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let optimizer = Adam {
        beta1,
        beta2,
        eps,
        m,
        v,
        t,
    };
    ModelState::from_parts(config, params, optimizer, cycle, rng).map_err(|e| err(e.to_string()))
}

/// Parses a metadata sidecar.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let bad = |m: &str| Error::Checkpoint {
        path: mp.clone(),
        message: m.to_owned(),
    };
    let mut meta = CheckpointMeta {
        version: 0,
        config_hash: String::new(),
        cycle: 0,
        charset: String::new(),
        written_at: 0,
    };
    for line in text.lines() {
        let Some((k, v)) = line.split_once(" = ") else {
            continue;
        };
        match k {
            "format_version" => meta.version = v.parse().map_err(|_| bad("bad format_version"))?,
            "config_hash" => meta.config_hash = v.to_owned(),
            "cycle" => meta.cycle = v.parse().map_err(|_| bad("bad cycle"))?,
            "charset" => meta.charset = v.to_owned(),
            "written_at" => meta.written_at = v.parse().map_err(|_| bad("bad written_at"))?,
            _ => {}
        }
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use rand::Rng;

    #[test]
    fn round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = ModelState::new(tiny_config(), 9).unwrap();
        state.cycle = 4;
        let _: u64 = state.rng.random();
        state.optimizer.t = 3;
        state.optimizer.m[0] = 0.25;
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&state, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, state);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let meta = read_meta(&a).unwrap();
        assert_eq!(meta.cycle, 4);
        assert_eq!(meta.version, CHECKPOINT_VERSION);
        assert_eq!(meta.config_hash, config_hash(&state.config));
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let state = ModelState::new(tiny_config(), 9).unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&state, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint { .. })));
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        fs::write(&p, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint { .. })));
        let mut versioned = bytes;
        versioned[8] = 99;
        fs::write(&p, &versioned).unwrap();
        let e = load_checkpoint(&p).unwrap_err();
        assert!(e.to_string().contains("version"), "{e}");
    }
}
