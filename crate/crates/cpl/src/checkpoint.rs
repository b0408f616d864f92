//! Model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        4 bytes  "CPLC"
//! version      u32      1
//! header_len   u32
//! header       header_len bytes of JSON: encoder config, step, dropout
//! n_params     u64
//! params       n_params f64
//! accumulators n_params f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use cpl_core::model::{EncoderConfig, ModelState};
use serde::{Deserialize, Serialize};

use crate::binio::*;
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CPLC";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    encoder: EncoderConfig,
    step: u64,
    dropout: f64,
}

pub fn encode(model: &ModelState) -> Vec<u8> {
    let header = serde_json::to_vec(&Header { encoder: model.config().clone(), step: model.step(), dropout: model.dropout() })
        .expect("header serializes");
    let mut out = Vec::new();
    out.write_all(MAGIC).unwrap();
    write_u32(&mut out, FORMAT_VERSION).unwrap();
    write_u32(&mut out, header.len() as u32).unwrap();
    out.extend_from_slice(&header);
    write_u64(&mut out, model.params().len() as u64).unwrap();
    write_f64s(&mut out, model.params()).unwrap();
    write_f64s(&mut out, model.accumulators()).unwrap();
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ModelState, String> {
    let mut r = bytes;
    expect_header(&mut r, MAGIC, FORMAT_VERSION)?;
    let len = read_u32(&mut r).map_err(|e| e.to_string())? as usize;
    if r.len() < len {
        return Err("truncated header".into());
    }
    let header: Header = serde_json::from_slice(&r[..len]).map_err(|e| e.to_string())?;
    r = &r[len..];
    let n = read_u64(&mut r).map_err(|e| e.to_string())? as usize;
    if r.len() != n * 16 {
        return Err(format!("expected {} parameter bytes, found {}", n * 16, r.len()));
    }
    let params = read_f64s(&mut r, n).map_err(|e| e.to_string())?;
    let accum = read_f64s(&mut r, n).map_err(|e| e.to_string())?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes".into());
    }
    ModelState::from_parts(header.encoder, params, accum, header.step, header.dropout).map_err(|e| e.to_string())
}

pub fn save(model: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(CliError::io(path))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    decode(&bytes).map_err(|m| CliError::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = ModelState::init(EncoderConfig { conv_channels: 4, hidden_dims: vec![5], ..Default::default() }).unwrap();
        m.params_mut()[0] = -0.0;
        m.params_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let back = decode(&encode(&m)).unwrap();
        let bits = |s: &[f64]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.params()), bits(m.params()));
        assert_eq!(bits(back.accumulators()), bits(m.accumulators()));
        assert_eq!(back.step(), m.step());
        assert_eq!(back.config(), m.config());
        assert_eq!(encode(&back), encode(&m));
    }

    #[test]
    fn damaged_bytes_are_rejected() {
        let m = ModelState::init(EncoderConfig { conv_channels: 4, hidden_dims: vec![5], ..Default::default() }).unwrap();
        let good = encode(&m);
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut v = good.clone();
        v[4] = 9;
        assert!(decode(&v).is_err());
        assert!(decode(b"nope").is_err());
    }
}
