//! Binary checkpoint persistence.
//!
//! File layout: magic `HDIF`, little-endian u32 format version, little-endian
//! u64 header length, a structured-text header (model config, schedule
//! parameters, counters, rng state, and an array directory of name / shape /
//! byte offset / element count), then the raw little-endian f32 array data in
//! directory order. Writes go to a temporary sibling file and are renamed
//! into place.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::params::ParameterStore;
use crate::net::{ModelConfig, PoseModel};
use crate::schedule::{make_schedule, DiffusionSchedule, ScheduleKind};

use super::Adam;

pub const MAGIC: [u8; 4] = *b"HDIF";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable snapshot of a deterministic rng: base seed, stream id, and
/// position within the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Complete training state: everything needed to resume or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub schedule_kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub diffusion_steps: usize,
    pub epoch: usize,
    pub step: u64,
    pub opt_step: u64,
    pub rng: RngState,
    pub params: ParameterStore<f32>,
    pub opt_m: ParameterStore<f32>,
    pub opt_v: ParameterStore<f32>,
}

impl Checkpoint {
    pub fn capture(
        model: &PoseModel,
        schedule: &DiffusionSchedule,
        epoch: usize,
        step: u64,
        opt: &Adam,
        rng: &ChaCha8Rng,
    ) -> Self {
        Self {
            model: model.config.clone(),
            schedule_kind: schedule.kind,
            beta_start: schedule.beta_start,
            beta_end: schedule.beta_end,
            diffusion_steps: schedule.steps(),
            epoch,
            step,
            opt_step: opt.step,
            rng: RngState::capture(rng),
            params: model.params.clone(),
            opt_m: opt.m.clone(),
            opt_v: opt.v.clone(),
        }
    }

    /// Rebuilds the model, verifying parameters against the config.
    pub fn model(&self) -> Result<PoseModel> {
        PoseModel::from_parts(self.model.clone(), self.params.clone())
    }

    /// Rebuilds the diffusion schedule from its defining scalars.
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(
            self.diffusion_steps,
            self.beta_start,
            self.beta_end,
            self.schedule_kind,
        )
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct HeaderDoc {
    model: ModelConfig,
    schedule: ScheduleHeader,
    counters: CountersHeader,
    rng: RngHeader,
    arrays: Vec<ArrayEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ScheduleHeader {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    steps: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CountersHeader {
    epoch: usize,
    step: u64,
    opt_step: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RngHeader {
    seed_hex: String,
    stream: u64,
    /// u128 stored as a decimal string (structured-text integers are i64).
    word_pos: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset within the data section.
    offset: u64,
    /// Element count.
    len: u64,
}

const OPT_M_PREFIX: &str = "opt.m.";
const OPT_V_PREFIX: &str = "opt.v.";

fn directory_order(ckpt: &Checkpoint) -> Vec<(String, &ndarray::ArrayD<f32>)> {
    let mut out = Vec::new();
    for (name, arr) in ckpt.params.iter() {
        out.push((name.to_string(), arr));
    }
    for (name, arr) in ckpt.opt_m.iter() {
        out.push((format!("{OPT_M_PREFIX}{name}"), arr));
    }
    for (name, arr) in ckpt.opt_v.iter() {
        out.push((format!("{OPT_V_PREFIX}{name}"), arr));
    }
    out
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Parse(format!("odd-length hex string '{s}'")));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Parse(format!("bad hex byte in '{s}'")))
        })
        .collect()
}

/// Serializes and atomically writes a checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let arrays = directory_order(ckpt);
    let mut directory = Vec::with_capacity(arrays.len());
    let mut offset: u64 = 0;
    for (name, arr) in &arrays {
        directory.push(ArrayEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            offset,
            len: arr.len() as u64,
        });
        offset += 4 * arr.len() as u64;
    }
    let doc = HeaderDoc {
        model: ckpt.model.clone(),
        schedule: ScheduleHeader {
            kind: ckpt.schedule_kind,
            beta_start: ckpt.beta_start,
            beta_end: ckpt.beta_end,
            steps: ckpt.diffusion_steps,
        },
        counters: CountersHeader {
            epoch: ckpt.epoch,
            step: ckpt.step,
            opt_step: ckpt.opt_step,
        },
        rng: RngHeader {
            seed_hex: hex_encode(&ckpt.rng.seed),
            stream: ckpt.rng.stream,
            word_pos: ckpt.rng.word_pos.to_string(),
        },
        arrays: directory,
    };
    let header = toml::to_string(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    let mut bytes =
        Vec::with_capacity(16 + header.len() + offset as usize);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for (_, arr) in &arrays {
        let arr = arr.as_standard_layout();
        for &v in arr.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("bad checkpoint path {}", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn need(bytes: &[u8], offset: usize, len: usize, what: &str) -> Result<()> {
    if bytes.len() < offset + len {
        return Err(Error::format(
            offset as u64,
            format!(
                "truncated while reading {what}: need {} bytes, file has {}",
                offset + len,
                bytes.len()
            ),
        ));
    }
    Ok(())
}

/// Reads and validates a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    need(&bytes, 0, 4, "magic")?;
    if bytes[..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[..4])));
    }
    need(&bytes, 4, 4, "version")?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    need(&bytes, 8, 8, "header length")?;
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    need(&bytes, 16, header_len, "header")?;
    let header = std::str::from_utf8(&bytes[16..16 + header_len])
        .map_err(|_| Error::format(16, "header is not valid UTF-8".to_string()))?;
    let doc: HeaderDoc = toml::from_str(header).map_err(|e| Error::Parse(e.to_string()))?;

    let data_start = 16 + header_len;
    let mut params = ParameterStore::new();
    let mut opt_m = ParameterStore::new();
    let mut opt_v = ParameterStore::new();
    let mut expected_end = data_start;
    for entry in &doc.arrays {
        let count: usize = entry.shape.iter().product();
        if count as u64 != entry.len {
            return Err(Error::Parse(format!(
                "array '{}': shape {:?} disagrees with len {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = data_start + entry.offset as usize;
        let nbytes = 4 * count;
        need(&bytes, start, nbytes, &format!("array '{}'", entry.name))?;
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = start + 4 * i;
            data.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
        }
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), data)
            .map_err(|e| Error::Parse(format!("array '{}': {e}", entry.name)))?;
        expected_end = expected_end.max(start + nbytes);
        if let Some(name) = entry.name.strip_prefix(OPT_M_PREFIX) {
            opt_m.insert(name.to_string(), arr)?;
        } else if let Some(name) = entry.name.strip_prefix(OPT_V_PREFIX) {
            opt_v.insert(name.to_string(), arr)?;
        } else {
            params.insert(entry.name.clone(), arr)?;
        }
    }
    if expected_end != bytes.len() {
        return Err(Error::format(
            expected_end as u64,
            format!(
                "file has {} bytes but the directory accounts for {expected_end}",
                bytes.len()
            ),
        ));
    }
    if opt_m.len() != params.len() || opt_v.len() != params.len() {
        return Err(Error::Parse(format!(
            "optimizer moments cover {}/{} arrays for {} parameters",
            opt_m.len(),
            opt_v.len(),
            params.len()
        )));
    }
    let seed_vec = hex_decode(&doc.rng.seed_hex)?;
    let seed: [u8; 32] = seed_vec
        .try_into()
        .map_err(|_| Error::Parse("rng seed must be 32 bytes".to_string()))?;
    let word_pos: u128 = doc
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Parse(format!("bad rng word_pos '{}'", doc.rng.word_pos)))?;
    Ok(Checkpoint {
        model: doc.model,
        schedule_kind: doc.schedule.kind,
        beta_start: doc.schedule.beta_start,
        beta_end: doc.schedule.beta_end,
        diffusion_steps: doc.schedule.steps,
        epoch: doc.counters.epoch,
        step: doc.counters.step,
        opt_step: doc.counters.opt_step,
        rng: RngState {
            seed,
            stream: doc.rng.stream,
            word_pos,
        },
        params,
        opt_m,
        opt_v,
    })
}
