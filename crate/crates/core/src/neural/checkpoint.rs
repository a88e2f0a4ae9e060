//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic   6 bytes  "TPCKPT"
//! version u32      1
//! D H B T_emb E    5 x u32
//! params           f64 x param_count, in layout order
//! ```
//!
//! The diffusion step count is not stored: the network sees integer steps, so
//! sample with the same `N` (and betas) used for training.

use std::fs;
use std::path::Path;

use super::{DenoiserModel, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"TPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_FIELDS: [&str; 5] = ["dim", "hidden", "blocks", "time_dim", "event_dim"];
const HEADER_LEN: usize = 6 + 4 + 4 * HEADER_FIELDS.len();

pub fn encode_checkpoint(model: &DenoiserModel) -> Result<Vec<u8>> {
    let c = model.config();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, v) in HEADER_FIELDS
        .iter()
        .zip([c.dim, c.hidden, c.blocks, c.time_dim, c.event_dim])
    {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint {
            field: name,
            reason: format!("{v} does not fit in u32"),
        })?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DenoiserModel> {
    if bytes.len() < 6 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint {
            field: "magic",
            reason: "not a turnpoint checkpoint".into(),
        });
    }
    let u32_at = |off: usize, field: &'static str| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Checkpoint {
                field,
                reason: "file truncated".into(),
            })
    };
    let version = u32_at(6, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let mut dims = [0usize; 5];
    for (i, name) in HEADER_FIELDS.iter().enumerate() {
        dims[i] = u32_at(10 + 4 * i, name)? as usize;
    }
    let config = ModelConfig {
        dim: dims[0],
        hidden: dims[1],
        blocks: dims[2],
        time_dim: dims[3],
        event_dim: dims[4],
    };
    config.validate().map_err(|e| Error::Checkpoint {
        field: "header",
        reason: e.to_string(),
    })?;
    let expected = DenoiserModel::zeros(config)?.param_count();
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * expected {
        return Err(Error::Checkpoint {
            field: "params",
            reason: format!(
                "expected {} bytes of parameters for {config:?}, found {}",
                8 * expected,
                body.len()
            ),
        });
    }
    let params: Vec<f64> = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Checkpoint {
            field: "params",
            reason: "non-finite parameter".into(),
        });
    }
    DenoiserModel::from_params(config, params)
}

pub fn save_checkpoint(model: &DenoiserModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel> {
    let bytes = fs::read(path).map_err(|e| Error::Input {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserModel {
        let cfg = ModelConfig {
            dim: 6,
            hidden: 8,
            blocks: 2,
            time_dim: 4,
            event_dim: 3,
        };
        DenoiserModel::randomized(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = tiny();
        let back = decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&tiny()).unwrap();
        assert_eq!(&bytes[..6], b"TPCKPT");
        assert_eq!(&bytes[6..10], &[1, 0, 0, 0]);
        assert_eq!(&bytes[10..14], &[6, 0, 0, 0]);
        assert_eq!(bytes.len(), HEADER_LEN + 8 * tiny().param_count());
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = encode_checkpoint(&tiny()).unwrap();
        bytes[6] = 2;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::CheckpointVersion(2))));
    }

    #[test]
    fn corruption_names_the_field() {
        let bytes = encode_checkpoint(&tiny()).unwrap();
        let field = |b: &[u8]| match decode_checkpoint(b) {
            Err(Error::Checkpoint { field, .. }) => field,
            other => panic!("unexpected {other:?}"),
        };
        assert_eq!(field(&bytes[..bytes.len() - 1]), "params");
        assert_eq!(field(&bytes[..12]), "dim");
        assert_eq!(field(b"NOTCKPT"), "magic");
        let mut b = bytes.clone();
        b[14] = 0; // hidden = 0
        assert_eq!(field(&b), "header");
    }
}
