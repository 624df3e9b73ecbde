//! Flat little-endian tensor container.
//!
//! Layout: `"MIMD"`, version `u32`, entry count `u32`, then per entry the
//! name length `u32`, UTF-8 name, rank `u32`, `rank` dims as `u64`, dtype
//! tag `u32` (0 = f32, 1 = f64) and the raw scalars.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pipeline::{AdamConfig, TrainState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MIMD";
pub const VERSION: u32 = 1;

const MOMENT1: &str = "optim.m/";
const MOMENT2: &str = "optim.v/";
const STEP: &str = "state.step";
const SEED: &str = "state.seed";
const ADAM: &str = "state.adam";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

pub fn encode(store: &ParamStore, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&dtype.tag().to_le_bytes());
        for &v in t.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(self.fail(format!("{} truncated: need {n} bytes, {left} left", what())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &dyn Fn() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container; `path` only labels diagnostics.
pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, &|| "header".into())?;
    if magic != MAGIC {
        return Err(r.fail(format!("bad magic {magic:?}, expected \"MIMD\"")));
    }
    let version = r.u32(&|| "header".into())?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32(&|| "header".into())?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let at = |what: &'static str| move || format!("entry {i} {what}");
        let len = r.u32(&at("name length"))? as usize;
        let name = std::str::from_utf8(r.take(len, &at("name"))?)
            .map_err(|_| r.fail(format!("entry {i} name is not UTF-8")))?
            .to_string();
        let what = |part: &str| format!("entry {i} (`{name}`) {part}");
        let rank = r.u32(&|| what("rank"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = r.u64(&|| what("dims"))?;
            shape.push(usize::try_from(d).map_err(|_| r.fail(what("dim overflows usize")))?);
        }
        let dtype = match r.u32(&|| what("dtype"))? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            t => return Err(r.fail(format!("{}: unknown dtype tag {t}", what("dtype")))),
        };
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.width()).map(|b| (n, b)));
        let (numel, nbytes) = numel.ok_or_else(|| r.fail(what("size overflows")))?;
        let raw = r.take(nbytes, &|| what("payload"))?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        debug_assert_eq!(data.len(), numel);
        let t = Tensor::new(&shape, data).map_err(|e| r.fail(format!("{}: {e}", what("shape"))))?;
        if store.contains(&name) {
            return Err(r.fail(format!("entry {i}: duplicate name `{name}`")));
        }
        store.insert(name, t)?;
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes after entry {count}", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: &Path, dtype: Dtype) -> Result<()> {
    std::fs::write(path, encode(store, dtype)).map_err(|e| io_err(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    decode(&std::fs::read(path).map_err(|e| io_err(path, e))?, path)
}

fn split_u64(v: u64) -> Tensor {
    Tensor::from_parts(vec![2], vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64])
}

fn join_u64(t: &Tensor) -> Option<u64> {
    match t.data() {
        [hi, lo] if hi.fract() == 0.0 && lo.fract() == 0.0 && *hi >= 0.0 && *lo >= 0.0 => {
            Some(((*hi as u64) << 32) | (*lo as u64))
        }
        _ => None,
    }
}

/// Parameters, both optimizer moments and the step/seed counters, in f64.
pub fn encode_state(state: &TrainState) -> Result<Vec<u8>> {
    let mut all = state.params.clone();
    for (name, t) in state.m.iter() {
        all.insert(format!("{MOMENT1}{name}"), t.clone())?;
    }
    for (name, t) in state.v.iter() {
        all.insert(format!("{MOMENT2}{name}"), t.clone())?;
    }
    all.insert(STEP.into(), split_u64(state.step))?;
    all.insert(SEED.into(), split_u64(state.seed))?;
    let a = state.adam;
    all.insert(ADAM.into(), Tensor::new(&[4], vec![a.lr, a.beta1, a.beta2, a.eps])?)?;
    Ok(encode(&all, Dtype::F64))
}

pub fn decode_state(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let all = decode(bytes, path)?;
    let fail = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    for (name, t) in all.iter() {
        if let Some(p) = name.strip_prefix(MOMENT1) {
            m.insert(p.to_string(), t.clone())?;
        } else if let Some(p) = name.strip_prefix(MOMENT2) {
            v.insert(p.to_string(), t.clone())?;
        } else if !name.starts_with("state.") {
            params.insert(name.to_string(), t.clone())?;
        }
    }
    let counter = |key: &str| -> Result<u64> {
        all.get(key)
            .ok()
            .and_then(join_u64)
            .ok_or_else(|| fail(format!("missing or malformed `{key}`")))
    };
    let adam = all.get(ADAM).map_err(|_| fail(format!("missing `{ADAM}`")))?;
    let [lr, beta1, beta2, eps] = adam.data() else {
        return Err(fail(format!("`{ADAM}` must hold 4 values")));
    };
    if !params.same_layout(&m) || !params.same_layout(&v) {
        return Err(fail("optimizer moments do not align with the parameters".into()));
    }
    Ok(TrainState {
        params,
        m,
        v,
        step: counter(STEP)?,
        seed: counter(SEED)?,
        adam: AdamConfig {
            lr: *lr,
            beta1: *beta1,
            beta2: *beta2,
            eps: *eps,
        },
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_state(state)?).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_state(&std::fs::read(path).map_err(|e| io_err(path, e))?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2).unwrap())
            .unwrap();
        s.insert("b".into(), Tensor::scalar(f64::MIN_POSITIVE)).unwrap();
        s
    }

    #[test]
    fn roundtrip_bit_exact() {
        let s = sample_store();
        let back = decode(&encode(&s, Dtype::F64), Path::new("mem")).unwrap();
        assert!(back.bit_eq(&s));
    }

    #[test]
    fn empty_store_roundtrips() {
        let bytes = encode(&ParamStore::new(), Dtype::F64);
        assert_eq!(bytes.len(), 12);
        assert!(decode(&bytes, Path::new("mem")).unwrap().is_empty());
    }

    #[test]
    fn f32_payload_loads() {
        let s = sample_store();
        let back = decode(&encode(&s, Dtype::F32), Path::new("mem")).unwrap();
        let a = back.get("a.weight").unwrap();
        assert!(a.max_abs_diff(s.get("a.weight").unwrap()).unwrap() < 1e-7);
    }

    #[test]
    fn truncation_names_entry() {
        let bytes = encode(&sample_store(), Dtype::F64);
        let err = decode(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("entry 1 (`b`) payload truncated"), "{err}");
        let err = decode(&bytes[..20], Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("entry 0"), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample_store(), Dtype::F64);
        bytes[0] = b'X';
        assert!(decode(&bytes, Path::new("mem")).unwrap_err().to_string().contains("magic"));
        let mut bytes = encode(&sample_store(), Dtype::F64);
        bytes[4] = 9;
        assert!(decode(&bytes, Path::new("mem")).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn duplicate_name_rejected() {
        let one = encode(&sample_store(), Dtype::F64);
        // Same entries twice with the count doubled.
        let mut bytes = one[..12].to_vec();
        bytes[8..12].copy_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&one[12..]);
        bytes.extend_from_slice(&one[12..]);
        let err = decode(&bytes, Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn state_roundtrip() {
        let params = sample_store();
        let mut state = TrainState::from_params(params, u64::MAX - 5).unwrap();
        state.step = (1 << 40) + 17;
        let back = decode_state(&encode_state(&state).unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, state);
    }
}
