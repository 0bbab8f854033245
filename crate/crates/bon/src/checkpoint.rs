//! Binary checkpoints. All integers and reals are little-endian.
//!
//! Model (`BONMDL1`):
//!
//! | field  | type             |
//! |--------|------------------|
//! | magic  | `b"BONMDL1"`     |
//! | arch   | u8: 0 linear, 1 one hidden tanh layer |
//! | D, H, e| u32 each (H = 0 for linear) |
//! | params | f64, layer by layer: weights row-major, then bias |
//!
//! Hash state (`BONHSH1`): magic, `s` u32, `N` u32, `e` u32, `beta` f64,
//! threshold order u8, optimizer u8 (0 sgd, 1 adam), auto-encoder lr f64,
//! mean-initialized flag u8, `mu` (`s` f64), auto-encoder parameters
//! (`W1`, `b1`, `W2`, `b2`), then the current-bin array `C` as `N` u32 with
//! `0xFFFFFFFF` for unassigned samples. The bins are rebuilt from `C` and the
//! dataset identities on load. Optimizer moments are not stored, so a
//! resumed auto-encoder restarts its moment estimates.

use std::fs;
use std::path::Path;

use bon_core::data::IdentityId;
use bon_core::embedding::{Arch, EmbeddingModel};
use bon_core::hash::{BonState, HashTable, LinearAe, ThresholdOrder, ThresholdState};
use bon_core::optim::OptimizerKind;

use crate::error::{BonError, Result};

pub const MODEL_MAGIC: &[u8; 7] = b"BONMDL1";
pub const HASH_MAGIC: &[u8; 7] = b"BONHSH1";

fn put_u32(out: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| BonError::Runtime(format!("{x} does not fit in 32 bits")))?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> BonError {
        BonError::Binary {
            path: self.origin.to_string(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 7]) -> Result<()> {
        if self.take(7, "magic")? != magic {
            self.pos = 0;
            return Err(self.err(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let at = self.pos;
        let x = f64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        if !x.is_finite() {
            self.pos = at;
            return Err(self.err(format!("{what} is not finite")));
        }
        Ok(x)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_model(model: &EmbeddingModel) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + model.num_params() * 8);
    out.extend_from_slice(MODEL_MAGIC);
    let (tag, hidden) = match model.arch() {
        Arch::Linear => (0u8, 0),
        Arch::OneHiddenTanh { hidden } => (1u8, hidden),
    };
    out.push(tag);
    put_u32(&mut out, model.input_dim())?;
    put_u32(&mut out, hidden)?;
    put_u32(&mut out, model.embed_dim())?;
    put_f64s(&mut out, model.params());
    Ok(out)
}

pub fn decode_model(bytes: &[u8], origin: &str) -> Result<EmbeddingModel> {
    let mut r = Reader { bytes, pos: 0, origin };
    r.magic(MODEL_MAGIC)?;
    let tag = r.u8("arch")?;
    let input_dim = r.u32("input dim")? as usize;
    let hidden = r.u32("hidden width")? as usize;
    let embed_dim = r.u32("embedding dim")? as usize;
    let arch = match tag {
        0 => Arch::Linear,
        1 => Arch::OneHiddenTanh { hidden },
        t => {
            r.pos = 7;
            return Err(r.err(format!("unknown arch tag {t}")));
        }
    };
    let shape = EmbeddingModel::zeros(arch, input_dim, embed_dim).map_err(|e| r.err(e.to_string()))?;
    let params = r.f64s(shape.num_params(), "parameter")?;
    r.finish()?;
    EmbeddingModel::from_params(arch, input_dim, embed_dim, params).map_err(|e| r.err(e.to_string()))
}

pub fn encode_hash(state: &BonState) -> Result<Vec<u8>> {
    let ae = &state.ae;
    let table = &state.table;
    let mut out = Vec::new();
    out.extend_from_slice(HASH_MAGIC);
    put_u32(&mut out, ae.bits())?;
    put_u32(&mut out, table.num_samples())?;
    put_u32(&mut out, ae.embed_dim())?;
    put_f64s(&mut out, &[state.thresholds.beta()]);
    out.push(match state.order {
        ThresholdOrder::UpdateThenExtract => 0,
        ThresholdOrder::ExtractThenUpdate => 1,
    });
    out.push(match ae.optimizer_kind() {
        OptimizerKind::Sgd => 0,
        OptimizerKind::Adam { .. } => 1,
    });
    put_f64s(&mut out, &[ae.learning_rate()]);
    out.push(state.thresholds.is_initialized() as u8);
    put_f64s(&mut out, state.thresholds.mu());
    put_f64s(&mut out, ae.params());
    for &c in table.assignments() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a hash state; `ids` are the identities of the dataset the table
/// indexes, one per sample.
pub fn decode_hash(bytes: &[u8], ids: &[IdentityId], origin: &str) -> Result<BonState> {
    let mut r = Reader { bytes, pos: 0, origin };
    r.magic(HASH_MAGIC)?;
    let s = r.u32("s")? as usize;
    let n = r.u32("N")? as usize;
    let e = r.u32("embedding dim")? as usize;
    if n != ids.len() {
        return Err(r.err(format!("checkpoint indexes {n} samples, dataset has {}", ids.len())));
    }
    let beta = r.f64("beta")?;
    let order = match r.u8("threshold order")? {
        0 => ThresholdOrder::UpdateThenExtract,
        1 => ThresholdOrder::ExtractThenUpdate,
        t => return Err(r.err(format!("unknown threshold order {t}"))),
    };
    let optimizer = match r.u8("optimizer")? {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::ADAM,
        t => return Err(r.err(format!("unknown optimizer {t}"))),
    };
    let lr = r.f64("learning rate")?;
    let initialized = match r.u8("initialized flag")? {
        0 => false,
        1 => true,
        t => return Err(r.err(format!("bad initialized flag {t}"))),
    };
    let mu = r.f64s(s, "mu")?;
    let params = r.f64s(2 * s * e + s + e, "auto-encoder parameter")?;
    let at = r.pos;
    let mut current = Vec::with_capacity(n);
    for _ in 0..n {
        current.push(r.u32("bin")?);
    }
    r.finish()?;
    let thresholds = if initialized {
        ThresholdState::with_mean(mu, beta)
    } else {
        ThresholdState::new(s, beta)
    }
    .map_err(|e| r.err(e.to_string()))?;
    let ae = LinearAe::from_params(s, e, params, optimizer, lr).map_err(|e| r.err(e.to_string()))?;
    let num_buckets = 1usize
        .checked_shl(s as u32)
        .filter(|_| s as u32 <= bon_core::hash::MAX_BITS)
        .ok_or_else(|| r.err(format!("s = {s} too large")))?;
    if let Some(v) = current.iter().position(|&c| c != bon_core::hash::UNASSIGNED && c as usize >= num_buckets) {
        r.pos = at + 4 * v;
        return Err(r.err(format!("sample {v} assigned to bin {} of {num_buckets}", current[v])));
    }
    let table = HashTable::from_assignments(num_buckets, ids, &current).map_err(|e| r.err(e.to_string()))?;
    Ok(BonState {
        ae,
        thresholds,
        table,
        order,
    })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| BonError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn read_model(path: &Path) -> Result<EmbeddingModel> {
    let bytes = fs::read(path).map_err(|e| BonError::io(format!("reading {}", path.display()), e))?;
    decode_model(&bytes, &path.display().to_string())
}

pub fn read_hash(path: &Path, ids: &[IdentityId]) -> Result<BonState> {
    let bytes = fs::read(path).map_err(|e| BonError::io(format!("reading {}", path.display()), e))?;
    decode_hash(&bytes, ids, &path.display().to_string())
}
