//! Single-file sectioned checkpoint archive.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic "SPKCKPT1"
//! section_count: u32
//! section*: name_len u16 | name UTF-8 | payload_len u64 | digest [u8; 8] | payload
//! ```
//!
//! The digest is the first 8 bytes of the payload's SHA-256, checked on
//! read so corruption is reported against the failing section instead of
//! surfacing as garbage weights. The decoder never trusts a length field:
//! every read is bounds-checked against the remaining input, making it safe
//! on arbitrary bytes.

use crate::error::{Error, Result};
use crate::tensor::Data;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::IxDyn;
use sha2::{Digest, Sha256};
use std::io::Write as _;
use std::path::Path;

const MAGIC: &[u8; 8] = b"SPKCKPT1";

fn digest8(payload: &[u8]) -> [u8; 8] {
    let full = Sha256::digest(payload);
    let mut out = [0u8; 8];
    out.copy_from_slice(&full[..8]);
    out
}

/// Ordered named byte sections.
#[derive(Debug, Default, Clone)]
pub struct Archive {
    sections: IndexMap<String, Vec<u8>>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, payload: Vec<u8>) {
        self.sections.insert(name.into(), payload);
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.sections.get(name).map(Vec::as_slice)
    }

    pub fn require(&self, name: &str) -> Result<&[u8]> {
        self.get(name)
            .ok_or_else(|| Error::checkpoint(name, "section missing"))
    }

    pub fn section_names(&self) -> Vec<&str> {
        self.sections.keys().map(String::as_str).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(self.sections.len() as u32)
            .expect("vec write");
        for (name, payload) in &self.sections {
            out.write_u16::<LittleEndian>(name.len() as u16).expect("vec write");
            out.extend_from_slice(name.as_bytes());
            out.write_u64::<LittleEndian>(payload.len() as u64)
                .expect("vec write");
            out.extend_from_slice(&digest8(payload));
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 8];
        std::io::Read::read_exact(&mut cursor, &mut magic)
            .map_err(|_| Error::checkpoint("header", "file shorter than magic"))?;
        if &magic != MAGIC {
            return Err(Error::checkpoint("header", "bad magic bytes"));
        }
        let count = cursor
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::checkpoint("header", "truncated section count"))?;
        let mut sections = IndexMap::new();
        for i in 0..count {
            let label = |name: &str| {
                if name.is_empty() {
                    format!("#{i}")
                } else {
                    name.to_string()
                }
            };
            let name_len = cursor
                .read_u16::<LittleEndian>()
                .map_err(|_| Error::checkpoint(label(""), "truncated name length"))? as usize;
            let remaining = bytes.len() - cursor.position() as usize;
            if name_len > remaining {
                return Err(Error::checkpoint(label(""), "name runs past end of file"));
            }
            let start = cursor.position() as usize;
            let name = std::str::from_utf8(&bytes[start..start + name_len])
                .map_err(|_| Error::checkpoint(label(""), "section name is not UTF-8"))?
                .to_string();
            cursor.set_position((start + name_len) as u64);
            let payload_len = cursor
                .read_u64::<LittleEndian>()
                .map_err(|_| Error::checkpoint(label(&name), "truncated payload length"))?;
            let mut expected = [0u8; 8];
            std::io::Read::read_exact(&mut cursor, &mut expected)
                .map_err(|_| Error::checkpoint(label(&name), "truncated digest"))?;
            let remaining = (bytes.len() - cursor.position() as usize) as u64;
            if payload_len > remaining {
                return Err(Error::checkpoint(
                    label(&name),
                    format!("payload length {payload_len} exceeds remaining {remaining} bytes"),
                ));
            }
            let start = cursor.position() as usize;
            let payload = bytes[start..start + payload_len as usize].to_vec();
            cursor.set_position((start + payload_len as usize) as u64);
            if digest8(&payload) != expected {
                return Err(Error::checkpoint(label(&name), "digest mismatch"));
            }
            sections.insert(name, payload);
        }
        Ok(Self { sections })
    }

    /// Writes via a temp file in the same directory, then renames, so a
    /// crash mid-write never leaves a half-written checkpoint behind.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.encode())?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes)
    }
}

/// Encodes a list of named float arrays:
/// `count u32 | (name_len u16 | name | ndim u32 | dim u64* | f64*)*`.
pub fn encode_array_table(entries: &[(String, Data)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u32::<LittleEndian>(entries.len() as u32).unwrap();
    for (name, data) in entries {
        out.write_u16::<LittleEndian>(name.len() as u16).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u32::<LittleEndian>(data.ndim() as u32).unwrap();
        for &d in data.shape() {
            out.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &v in data.as_standard_layout().iter() {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn decode_array_table(bytes: &[u8]) -> Result<Vec<(String, Data)>> {
    let section = "array table";
    let mut cursor = std::io::Cursor::new(bytes);
    let count = cursor
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::checkpoint(section, "truncated entry count"))?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = cursor
            .read_u16::<LittleEndian>()
            .map_err(|_| Error::checkpoint(section, "truncated name length"))?
            as usize;
        let start = cursor.position() as usize;
        if start + name_len > bytes.len() {
            return Err(Error::checkpoint(section, "name runs past end"));
        }
        let name = std::str::from_utf8(&bytes[start..start + name_len])
            .map_err(|_| Error::checkpoint(section, "name is not UTF-8"))?
            .to_string();
        cursor.set_position((start + name_len) as u64);
        let ndim = cursor
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::checkpoint(section, "truncated ndim"))? as usize;
        if ndim > 8 {
            return Err(Error::checkpoint(section, format!("ndim {ndim} too large")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut len: usize = 1;
        for _ in 0..ndim {
            let d = cursor
                .read_u64::<LittleEndian>()
                .map_err(|_| Error::checkpoint(section, "truncated shape"))?
                as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::checkpoint(section, "shape overflows"))?;
            shape.push(d);
        }
        let byte_len = len
            .checked_mul(8)
            .ok_or_else(|| Error::checkpoint(section, "shape overflows"))?;
        let start = cursor.position() as usize;
        if start + byte_len > bytes.len() {
            return Err(Error::checkpoint(
                section,
                format!("array {name:?} runs past end"),
            ));
        }
        let mut values = Vec::with_capacity(len);
        for k in 0..len {
            let mut chunk = [0u8; 8];
            chunk.copy_from_slice(&bytes[start + k * 8..start + (k + 1) * 8]);
            values.push(f64::from_le_bytes(chunk));
        }
        cursor.set_position((start + byte_len) as u64);
        let data = Data::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| Error::checkpoint(section, e.to_string()))?;
        out.push((name, data));
    }
    Ok(out)
}

/// Serialized contents of one feature queue.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueDump {
    pub key: String,
    pub dim: usize,
    pub capacity: usize,
    /// Row-major, oldest first, `rows.len() == labels.len() * dim`.
    pub rows: Vec<f64>,
    pub labels: Vec<i64>,
}

pub fn encode_queues(dumps: &[QueueDump]) -> Vec<u8> {
    let mut out = Vec::new();
    out.write_u32::<LittleEndian>(dumps.len() as u32).unwrap();
    for q in dumps {
        out.write_u16::<LittleEndian>(q.key.len() as u16).unwrap();
        out.extend_from_slice(q.key.as_bytes());
        out.write_u64::<LittleEndian>(q.dim as u64).unwrap();
        out.write_u64::<LittleEndian>(q.capacity as u64).unwrap();
        out.write_u64::<LittleEndian>(q.labels.len() as u64).unwrap();
        for &l in &q.labels {
            out.write_i64::<LittleEndian>(l).unwrap();
        }
        for &v in &q.rows {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn decode_queues(bytes: &[u8]) -> Result<Vec<QueueDump>> {
    let section = "queues";
    let mut cursor = std::io::Cursor::new(bytes);
    let count = cursor
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::checkpoint(section, "truncated queue count"))?;
    let mut out = Vec::new();
    for _ in 0..count {
        let key_len = cursor
            .read_u16::<LittleEndian>()
            .map_err(|_| Error::checkpoint(section, "truncated key length"))?
            as usize;
        let start = cursor.position() as usize;
        if start + key_len > bytes.len() {
            return Err(Error::checkpoint(section, "key runs past end"));
        }
        let key = std::str::from_utf8(&bytes[start..start + key_len])
            .map_err(|_| Error::checkpoint(section, "key is not UTF-8"))?
            .to_string();
        cursor.set_position((start + key_len) as u64);
        let dim = cursor
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::checkpoint(section, "truncated dim"))? as usize;
        let capacity = cursor
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::checkpoint(section, "truncated capacity"))?
            as usize;
        let n = cursor
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::checkpoint(section, "truncated row count"))?
            as usize;
        let remaining = bytes.len() - cursor.position() as usize;
        let need = n
            .checked_mul(8)
            .zip(n.checked_mul(dim).and_then(|rows| rows.checked_mul(8)))
            .and_then(|(lab, rows)| lab.checked_add(rows))
            .ok_or_else(|| Error::checkpoint(section, "sizes overflow"))?;
        if need > remaining {
            return Err(Error::checkpoint(
                section,
                format!("queue {key:?} runs past end"),
            ));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(cursor.read_i64::<LittleEndian>().expect("bounds checked"));
        }
        let mut rows = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            rows.push(cursor.read_f64::<LittleEndian>().expect("bounds checked"));
        }
        out.push(QueueDump { key, dim, capacity, rows, labels });
    }
    Ok(out)
}

pub fn encode_u64s(values: &[u64]) -> Vec<u8> {
    let mut out = Vec::new();
    for &v in values {
        out.write_u64::<LittleEndian>(v).unwrap();
    }
    out
}

pub fn decode_u64s(bytes: &[u8], expected: usize, section: &str) -> Result<Vec<u64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::checkpoint(
            section.to_string(),
            format!("expected {} bytes, found {}", expected * 8, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// The full semantic training state carried by a checkpoint file.
#[derive(Debug, Clone)]
pub struct CheckpointState {
    pub version: String,
    pub global_step: u64,
    pub epoch: u64,
    pub weights: Vec<(String, Data)>,
    pub optimizer: Vec<(String, Data)>,
    pub scheduler: Vec<(String, Data)>,
    pub seed: u64,
    pub queues: Vec<QueueDump>,
    pub callbacks: Vec<(String, Data)>,
    /// Resolved config snapshot (TOML text) used for resume compatibility.
    pub config: String,
}

impl CheckpointState {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.insert("version", self.version.as_bytes().to_vec());
        a.insert("progress", encode_u64s(&[self.global_step, self.epoch]));
        a.insert("weights", encode_array_table(&self.weights));
        a.insert("optimizer", encode_array_table(&self.optimizer));
        a.insert("scheduler", encode_array_table(&self.scheduler));
        a.insert("rng", encode_u64s(&[self.seed]));
        a.insert("queues", encode_queues(&self.queues));
        a.insert("callbacks", encode_array_table(&self.callbacks));
        a.insert("config", self.config.as_bytes().to_vec());
        a
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let version = String::from_utf8(archive.require("version")?.to_vec())
            .map_err(|_| Error::checkpoint("version", "not UTF-8"))?;
        let current = env!("CARGO_PKG_VERSION");
        if version != current {
            log::warn!(
                "checkpoint written by version {version}, loading with {current}"
            );
        }
        let progress = decode_u64s(archive.require("progress")?, 2, "progress")?;
        let weights = decode_array_table(archive.require("weights")?)
            .map_err(|e| rename_section(e, "weights"))?;
        let optimizer = decode_array_table(archive.require("optimizer")?)
            .map_err(|e| rename_section(e, "optimizer"))?;
        let scheduler = decode_array_table(archive.require("scheduler")?)
            .map_err(|e| rename_section(e, "scheduler"))?;
        let rng = decode_u64s(archive.require("rng")?, 1, "rng")?;
        let queues = decode_queues(archive.require("queues")?)?;
        let callbacks = decode_array_table(archive.require("callbacks")?)
            .map_err(|e| rename_section(e, "callbacks"))?;
        let config = String::from_utf8(archive.require("config")?.to_vec())
            .map_err(|_| Error::checkpoint("config", "not UTF-8"))?;
        Ok(Self {
            version,
            global_step: progress[0],
            epoch: progress[1],
            weights,
            optimizer,
            scheduler,
            seed: rng[0],
            queues,
            callbacks,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

fn rename_section(err: Error, section: &str) -> Error {
    match err {
        Error::Checkpoint { reason, .. } => Error::checkpoint(section.to_string(), reason),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn sample_state() -> CheckpointState {
        CheckpointState {
            version: env!("CARGO_PKG_VERSION").to_string(),
            global_step: 120,
            epoch: 3,
            weights: vec![
                (
                    "backbone.fc.weight".into(),
                    Data::from_shape_fn(IxDyn(&[4, 3]), |ix| (ix[0] * 3 + ix[1]) as f64 * 0.25),
                ),
                ("backbone.fc.bias".into(), Data::from_elem(IxDyn(&[4]), -1.5)),
            ],
            optimizer: vec![(
                "momentum.backbone.fc.weight".into(),
                Data::from_elem(IxDyn(&[4, 3]), 0.01),
            )],
            scheduler: vec![("sched_t".into(), Data::from_elem(IxDyn(&[1]), 40.0))],
            seed: 7,
            queues: vec![QueueDump {
                key: "embedding".into(),
                dim: 2,
                capacity: 8,
                rows: vec![1.0, 2.0, 3.0, 4.0],
                labels: vec![0, 1],
            }],
            callbacks: vec![("probe.weight".into(), Data::from_elem(IxDyn(&[2, 2]), 0.5))],
            config: "[trainer]\nmax_epochs = 5\n".into(),
        }
    }

    fn field_equal(a: &CheckpointState, b: &CheckpointState) -> bool {
        a.version == b.version
            && a.global_step == b.global_step
            && a.epoch == b.epoch
            && a.weights == b.weights
            && a.optimizer == b.optimizer
            && a.scheduler == b.scheduler
            && a.seed == b.seed
            && a.queues == b.queues
            && a.callbacks == b.callbacks
            && a.config == b.config
    }

    #[test]
    fn archive_round_trips_bit_exactly() {
        let state = sample_state();
        let bytes = state.to_archive().encode();
        let back = CheckpointState::from_archive(&Archive::decode(&bytes).unwrap()).unwrap();
        assert!(field_equal(&state, &back));
        // and the re-encoding is byte-identical
        assert_eq!(bytes, back.to_archive().encode());
    }

    #[test]
    fn file_round_trip_is_atomic_and_equal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last.ckpt");
        let state = sample_state();
        state.save(&path).unwrap();
        let back = CheckpointState::load(&path).unwrap();
        assert!(field_equal(&state, &back));
        assert!(
            std::fs::read_dir(dir.path()).unwrap().count() == 1,
            "no temp files left behind"
        );
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = CheckpointState::load(Path::new("/nonexistent/last.ckpt"))
            .map(|_| ())
            .unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn corruption_names_the_failing_section() {
        let state = sample_state();
        let mut bytes = state.to_archive().encode();
        // flip one byte inside the weights payload: locate the first weight
        // value and perturb it
        let needle = 0.25f64.to_le_bytes();
        let pos = bytes
            .windows(8)
            .position(|w| w == needle)
            .expect("weight value present");
        bytes[pos] ^= 0xff;
        let err = Archive::decode(&bytes).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains("weights"), "got: {err}");
        assert!(err.to_string().contains("digest"), "got: {err}");
    }

    #[test]
    fn truncation_is_rejected_not_panicking() {
        let bytes = sample_state().to_archive().encode();
        for cut in [0, 4, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(Archive::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn hostile_lengths_do_not_allocate_or_panic() {
        // payload_len far beyond the file
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SPKCKPT1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'w');
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]);
        let err = Archive::decode(&bytes).map(|_| ()).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "got: {err}");
    }

    #[test]
    fn array_table_rejects_overflowing_shapes() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        assert!(decode_array_table(&bytes).is_err());
    }

    #[test]
    fn version_mismatch_still_loads() {
        let mut state = sample_state();
        state.version = "0.0.0-other".into();
        let bytes = state.to_archive().encode();
        let back = CheckpointState::from_archive(&Archive::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.version, "0.0.0-other");
    }

    #[test]
    fn load_does_not_mutate_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last.ckpt");
        sample_state().save(&path).unwrap();
        let before = std::fs::read(&path).unwrap();
        let _ = CheckpointState::load(&path).unwrap();
        assert_eq!(before, std::fs::read(&path).unwrap());
    }
}
