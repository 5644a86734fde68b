//! Versioned binary checkpoints of a [`TrainState`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SLUMSEG\0"
//! version  u32
//! hlen     u32      length of the JSON header
//! header   hlen bytes of UTF-8 JSON (method, seed, configs, shapes)
//! body     params f64[P], velocity f64[P], thresholds f64[C],
//!          threshold update counts u64[C], optimizer step u64,
//!          then per class: fill count u64, length u64, and per entry
//!          feature f64[d], provenance step u64, provenance pixel u64
//! ```
//!
//! Floats are stored bit-exactly, so a resumed run continues the original
//! trajectory.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::{BankConfig, PrototypeBank, Provenance};
use crate::caat::ThresholdState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ToyModel};
use crate::optim::{Sgd, SgdConfig};
use crate::train::{Method, TrainState};

pub const MAGIC: &[u8; 8] = b"SLUMSEG\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub method: Method,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: SgdConfig,
    pub total_steps: u64,
    pub bank: BankConfig,
    pub threshold_momentum: f64,
    pub threshold_bounds: (f64, f64),
    pub shapes: Shapes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shapes {
    pub params: usize,
    pub classes: usize,
    pub bank_lengths: Vec<usize>,
}

pub fn write_checkpoint(state: &TrainState, mut out: impl Write) -> Result<()> {
    let classes = state.thresholds.num_classes();
    let header = Header {
        method: state.method,
        seed: state.seed,
        model: *state.model.config(),
        optimizer: state.optimizer.config,
        total_steps: state.optimizer.total_steps,
        bank: *state.bank.config(),
        threshold_momentum: state.thresholds.momentum(),
        threshold_bounds: state.thresholds.bounds(),
        shapes: Shapes {
            params: state.model.num_params(),
            classes,
            bank_lengths: (0..classes).map(|c| state.bank.len(c)).collect(),
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let f64s = |buf: &mut Vec<u8>, v: &[f64]| v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    f64s(&mut buf, state.model.params());
    f64s(&mut buf, &state.optimizer.velocity);
    f64s(&mut buf, state.thresholds.raw());
    for &n in state.thresholds.update_count() {
        buf.extend_from_slice(&n.to_le_bytes());
    }
    buf.extend_from_slice(&state.optimizer.step.to_le_bytes());
    for c in 0..classes {
        buf.extend_from_slice(&state.bank.fill_count(c).to_le_bytes());
        buf.extend_from_slice(&(state.bank.len(c) as u64).to_le_bytes());
        for (v, tag) in state.bank.queue(c).iter().zip(state.bank.provenance(c)) {
            f64s(&mut buf, v);
            buf.extend_from_slice(&tag.step.to_le_bytes());
            buf.extend_from_slice(&(tag.pixel as u64).to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_bits(self.u64()?))).collect()
    }
}

pub fn read_checkpoint(mut input: impl Read) -> Result<TrainState> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?)?;
    let s = &header.shapes;

    let model = ToyModel::from_params(header.model, cur.f64s(s.params)?)?;
    let mut optimizer = Sgd::new(header.optimizer, s.params, header.total_steps)?;
    optimizer.velocity = cur.f64s(s.params)?;
    let raw = cur.f64s(s.classes)?;
    let counts = (0..s.classes).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
    let thresholds = ThresholdState::from_parts(raw, header.threshold_momentum, header.threshold_bounds, counts)?;
    optimizer.step = cur.u64()?;

    let d = header.bank.feature_dim;
    let mut fills = Vec::with_capacity(s.classes);
    let mut entries = Vec::with_capacity(s.classes);
    for c in 0..s.classes {
        fills.push(cur.u64()?);
        let len = cur.u64()? as usize;
        if s.bank_lengths.get(c) != Some(&len) {
            return Err(Error::Checkpoint(format!("bank class {c} length disagrees with header")));
        }
        let mut list = Vec::with_capacity(len);
        for _ in 0..len {
            let v = cur.f64s(d)?;
            let step = cur.u64()?;
            let pixel = cur.u64()? as usize;
            list.push((v, Provenance { step, pixel }));
        }
        entries.push(list);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(TrainState {
        method: header.method,
        seed: header.seed,
        model,
        optimizer,
        thresholds,
        bank: PrototypeBank::from_parts(header.bank, entries, fills)?,
    })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(state, std::io::BufWriter::new(file))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
