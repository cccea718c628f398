//! Model checkpoint container.
//!
//! Layout: 8-byte magic, u32-length JSON blob of the `ModelConfig`,
//! u32 tensor count, then per tensor a u16-length UTF-8 name, a u64
//! element count, and the values as little-endian f32. Tensor order and
//! names are fixed by the config, so readers verify rather than search.

use super::{ModelConfig, ModelParams};
use crate::dump;
use crate::error::Error;
use crate::Result;
use crate::scalar::{fr, Scalar};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KRCKPT1\0";

pub fn write_to<T: Scalar, W: Write>(w: &mut W, params: &ModelParams<T>) -> Result<()> {
    dump::write_magic(w, CHECKPOINT_MAGIC)?;
    let config_json = serde_json::to_vec(&params.config)?;
    dump::write_blob(w, &config_json)?;
    let tensors = params.tensors();
    dump::write_u32(w, tensors.len() as u32)?;
    for (name, values) in tensors {
        dump::write_name(w, &name)?;
        dump::write_u64(w, values.len() as u64)?;
        let f32s: Vec<f32> = values.iter().map(|v| v.to_f64().unwrap() as f32).collect();
        dump::write_f32s(w, &f32s)?;
    }
    Ok(())
}

pub fn read_from<T: Scalar, R: Read>(r: &mut R) -> Result<ModelParams<T>> {
    dump::expect_magic(r, CHECKPOINT_MAGIC, "checkpoint")?;
    let config_json = dump::read_blob(r)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)?;
    config.validate()?;
    let mut params = ModelParams::<T>::zeros(&config)?;
    let n = dump::read_u32(r)? as usize;
    let mut slots = params.tensors_mut();
    if n != slots.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} tensors stored, config defines {}", n, slots.len()),
        ));
    }
    for (name, values) in slots.iter_mut() {
        let stored = dump::read_name(r)?;
        if &stored != name {
            return Err(Error::format(
                "checkpoint",
                format!("tensor '{stored}' where '{name}' was expected"),
            ));
        }
        let len = dump::read_u64(r)? as usize;
        if len != values.len() {
            return Err(Error::format(
                "checkpoint",
                format!("tensor '{name}' has {len} values, config wants {}", values.len()),
            ));
        }
        let data = dump::read_f32s(r, len)?;
        for (dst, v) in values.iter_mut().zip(data) {
            *dst = fr::<T>(v as f64);
        }
    }
    Ok(params)
}

pub fn save<T: Scalar>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let file = File::open(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    read_from(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noterep::Representation;

    fn small_config() -> ModelConfig {
        ModelConfig {
            rep: Representation::Three,
            n_pitches: 5,
            n_mels: 12,
            conv_channels: [2, 3, 3],
            fc_acoustic: 7,
            embed_dim: 2,
            lstm_width: 6,
            lstm_layers: 2,
            dropout: 0.1,
            autoregressive: true,
        }
    }

    #[test]
    fn f32_round_trip_is_exact() {
        let params = ModelParams::<f32>::init(&small_config(), 9).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &params).unwrap();
        let back: ModelParams<f32> = read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn f64_values_survive_via_f32_storage() {
        // start from f32-representable values so the narrowing is lossless
        let params = ModelParams::<f32>::init(&small_config(), 10)
            .unwrap()
            .cast::<f64>();
        let mut buf = Vec::new();
        write_to(&mut buf, &params).unwrap();
        let back: ModelParams<f64> = read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn non_ar_checkpoint_round_trips() {
        let mut cfg = small_config();
        cfg.autoregressive = false;
        let params = ModelParams::<f32>::init(&cfg, 11).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &params).unwrap();
        let back: ModelParams<f32> = read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let params = ModelParams::<f32>::init(&small_config(), 12).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &params).unwrap();
        buf[0] ^= 0xff;
        assert!(read_from::<f32, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let params = ModelParams::<f32>::init(&small_config(), 13).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &params).unwrap();
        let cut = buf.len() / 2;
        assert!(read_from::<f32, _>(&mut buf[..cut].as_ref()).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let params = ModelParams::<f32>::init(&small_config(), 14).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &params).unwrap();

        // rewrite the config blob to a different fc width; keep tensors
        let mut other_cfg = small_config();
        other_cfg.fc_acoustic = 9;
        let magic_len = 8;
        let old_json = serde_json::to_vec(&small_config()).unwrap();
        let new_json = serde_json::to_vec(&other_cfg).unwrap();
        let mut patched = Vec::new();
        patched.extend_from_slice(&buf[..magic_len]);
        patched.extend_from_slice(&(new_json.len() as u32).to_le_bytes());
        patched.extend_from_slice(&new_json);
        patched.extend_from_slice(&buf[magic_len + 4 + old_json.len()..]);
        let err = read_from::<f32, _>(&mut patched.as_slice()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("fc.w"), "unexpected error: {msg}");
    }

    #[test]
    fn save_and_load_round_trip_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = ModelParams::<f32>::init(&small_config(), 15).unwrap();
        save(&path, &params).unwrap();
        let back: ModelParams<f32> = load(&path).unwrap();
        assert_eq!(params, back);
        // sanity: perturbing a tensor and re-saving changes the bytes
        let mut other = params.clone();
        other.head_w[[0, 0, 0]] += 1.0;
        let path2 = dir.path().join("model2.ckpt");
        save(&path2, &other).unwrap();
        assert_ne!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
