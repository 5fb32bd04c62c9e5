//! Checkpoint directory: `manifest` (text), `genotype` (text), `weights.bin`
//! (raw parameter tensors), and for resumable search runs `state.bin`
//! (optimizer moments, counters, history).
//!
//! weights.bin: magic "A2SNASW1", then one record per parameter in
//! lexicographic name order: name length (u32 LE), name bytes, rank (u8),
//! extents (u32 LE each), raw f32 LE values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supernet::{Fingerprint, Genotype};
use crate::tensor::{ParamStore, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"A2SNASW1";
pub const STATE_MAGIC: &[u8; 8] = b"A2SNASS1";
pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest";
pub const GENOTYPE_FILE: &str = "genotype";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const STATE_FILE: &str = "state.bin";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub fingerprint: Fingerprint,
    pub epoch: usize,
    pub val_oa: Option<f64>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        Writer {
            buf: magic.to_vec(),
        }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn record(&mut self, name: &str, shape: &[usize], values: &[f32]) {
        self.u32(name.len() as u32);
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(shape.len() as u8);
        for &e in shape {
            self.u32(e as u32);
        }
        for &v in values {
            self.f32(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: String,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 8], file: &Path) -> Result<Self> {
        let file_name = file.display().to_string();
        if buf.len() < 8 || &buf[..8] != magic {
            return Err(Error::format(
                file_name,
                format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(Reader {
            buf,
            pos: 8,
            file: file_name,
        })
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.file.clone(),
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|e| Error::format(self.file.clone(), format!("non-utf8 name: {e}")))?;
        let rank = self.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(self.f32()?);
        }
        Ok((name, shape, values))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Serialize every parameter (weights, arch logits, running stats) in
/// lexicographic name order.
pub fn write_weights(path: &Path, params: &ParamStore<f32>) -> Result<()> {
    let mut w = Writer::new(WEIGHTS_MAGIC);
    for (name, param) in params.iter() {
        w.record(name, param.value.shape(), param.value.data());
    }
    write_atomic(path, &w.buf)
}

/// Load weights into an existing store. Every record must match a parameter
/// by name and shape, and every parameter must be present.
pub fn read_weights_into(path: &Path, params: &mut ParamStore<f32>) -> Result<()> {
    let raw = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader::new(&raw, WEIGHTS_MAGIC, path)?;
    let mut seen = 0usize;
    while r.remaining() > 0 {
        let (name, shape, values) = r.record()?;
        let current = params.get(&name).ok_or_else(|| {
            Error::format(
                path.display().to_string(),
                format!("parameter name {name:?} not in this model"),
            )
        })?;
        if current.value.shape() != shape {
            return Err(Error::format(
                path.display().to_string(),
                format!(
                    "{name}: stored shape {shape:?} != model shape {:?}",
                    current.value.shape()
                ),
            ));
        }
        params.set_value(&name, Tensor::from_vec(&shape, values)?)?;
        seen += 1;
    }
    if seen != params.len() {
        return Err(Error::format(
            path.display().to_string(),
            format!("{seen} parameters stored, model has {}", params.len()),
        ));
    }
    Ok(())
}

/// Resumable search-run state: counters, optimizer moments, per-epoch history.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub epoch: usize,
    pub seed: u64,
    pub adam_t: u64,
    pub adam_m: BTreeMap<String, Vec<f32>>,
    pub adam_v: BTreeMap<String, Vec<f32>>,
    pub sgd_buf: BTreeMap<String, Vec<f32>>,
    pub history: Vec<crate::search::EpochRecord>,
}

fn write_flat_section(w: &mut Writer, section: &BTreeMap<String, Vec<f32>>) {
    w.u32(section.len() as u32);
    for (name, values) in section {
        w.record(name, &[values.len()], values);
    }
}

fn read_flat_section(r: &mut Reader) -> Result<BTreeMap<String, Vec<f32>>> {
    let count = r.u32()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let (name, _shape, values) = r.record()?;
        out.insert(name, values);
    }
    Ok(out)
}

pub fn write_state(path: &Path, state: &SearchState) -> Result<()> {
    let mut w = Writer::new(STATE_MAGIC);
    w.u32(state.epoch as u32);
    w.u64(state.seed);
    w.u64(state.adam_t);
    write_flat_section(&mut w, &state.adam_m);
    write_flat_section(&mut w, &state.adam_v);
    write_flat_section(&mut w, &state.sgd_buf);
    w.u32(state.history.len() as u32);
    for rec in &state.history {
        w.u32(rec.epoch as u32);
        w.f32(rec.train_loss);
        w.f32(rec.val_loss);
        w.f32(rec.val_oa);
        w.u32(rec.block_probs.len() as u32);
        for &p in &rec.block_probs {
            w.f32(p);
        }
    }
    write_atomic(path, &w.buf)
}

pub fn read_state(path: &Path) -> Result<SearchState> {
    let raw = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader::new(&raw, STATE_MAGIC, path)?;
    let epoch = r.u32()? as usize;
    let seed = r.u64()?;
    let adam_t = r.u64()?;
    let adam_m = read_flat_section(&mut r)?;
    let adam_v = read_flat_section(&mut r)?;
    let sgd_buf = read_flat_section(&mut r)?;
    let n_hist = r.u32()? as usize;
    let mut history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        let epoch = r.u32()? as usize;
        let train_loss = r.f32()?;
        let val_loss = r.f32()?;
        let val_oa = r.f32()?;
        let n_probs = r.u32()? as usize;
        let mut block_probs = Vec::with_capacity(n_probs);
        for _ in 0..n_probs {
            block_probs.push(r.f32()?);
        }
        history.push(crate::search::EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_oa,
            block_probs,
        });
    }
    Ok(SearchState {
        epoch,
        seed,
        adam_t,
        adam_m,
        adam_v,
        sgd_buf,
        history,
    })
}

/// Write a checkpoint directory.
pub fn save_checkpoint(
    dir: &Path,
    manifest: &Manifest,
    genotype: &Genotype,
    params: &ParamStore<f32>,
    state: Option<&SearchState>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), (text + "\n").as_bytes())?;
    write_atomic(
        &dir.join(GENOTYPE_FILE),
        crate::supernet::genotype_to_string(genotype).as_bytes(),
    )?;
    write_weights(&dir.join(WEIGHTS_FILE), params)?;
    if let Some(state) = state {
        write_state(&dir.join(STATE_FILE), state)?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{} line {} column {}", path.display(), e.line(), e.column()),
        details: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "format version {} unsupported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

/// Load and validate the manifest against an expected fingerprint.
pub fn load_manifest_checked(dir: &Path, expected: &Fingerprint) -> Result<Manifest> {
    let manifest = load_manifest(dir)?;
    if manifest.fingerprint != *expected {
        return Err(Error::FingerprintMismatch {
            stored: manifest.fingerprint.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(manifest)
}

pub fn load_genotype(dir: &Path) -> Result<Genotype> {
    let path = dir.join(GENOTYPE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    crate::supernet::parse_genotype(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(
            "b.w",
            Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(),
            true,
            ParamKind::Weight,
        )
        .unwrap();
        s.insert(
            "a.logits",
            Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap(),
            true,
            ParamKind::Arch,
        )
        .unwrap();
        s
    }

    #[test]
    fn weights_roundtrip_bitwise_and_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let params = store();
        write_weights(&path, &params).unwrap();

        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..8], WEIGHTS_MAGIC);
        // First record must be "a.logits" (lexicographic order).
        let name_len = u32::from_le_bytes([raw[8], raw[9], raw[10], raw[11]]) as usize;
        assert_eq!(&raw[12..12 + name_len], b"a.logits");

        let mut reloaded = store();
        reloaded
            .set_value("b.w", Tensor::zeros(&[2, 2]))
            .unwrap();
        read_weights_into(&path, &mut reloaded).unwrap();
        assert!(reloaded
            .value("b.w")
            .unwrap()
            .bits_eq(params.value("b.w").unwrap()));

        // save -> load -> save is byte-identical
        let path2 = dir.path().join("weights2.bin");
        write_weights(&path2, &reloaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn weights_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let params = store();
        write_weights(&path, &params).unwrap();

        // Truncation
        let mut raw = fs::read(&path).unwrap();
        raw.truncate(raw.len() - 3);
        fs::write(&path, &raw).unwrap();
        let mut p = store();
        let err = read_weights_into(&path, &mut p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        // Bad magic
        fs::write(&path, b"NOTMAGIC rest").unwrap();
        let err = read_weights_into(&path, &mut p).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        // Name mismatch
        let other_path = dir.path().join("other.bin");
        let mut other = ParamStore::<f32>::new();
        other
            .insert("z.unknown", Tensor::zeros(&[1]), true, ParamKind::Weight)
            .unwrap();
        write_weights(&other_path, &other).unwrap();
        let err = read_weights_into(&other_path, &mut p).unwrap_err();
        assert!(err.to_string().contains("z.unknown"), "{err}");
    }

    #[test]
    fn state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        let mut state = SearchState {
            epoch: 3,
            seed: 42,
            adam_t: 17,
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            sgd_buf: BTreeMap::new(),
            history: vec![crate::search::EpochRecord {
                epoch: 0,
                train_loss: 1.5,
                val_loss: 1.25,
                val_oa: 0.5,
                block_probs: vec![0.25; 7],
            }],
        };
        state.adam_m.insert("b.w".into(), vec![0.5, -0.5]);
        state.adam_v.insert("b.w".into(), vec![0.1, 0.2]);
        state.sgd_buf.insert("a.logits".into(), vec![1.0, 2.0, 3.0]);
        write_state(&path, &state).unwrap();
        let loaded = read_state(&path).unwrap();
        assert_eq!(loaded, state);
    }
}
