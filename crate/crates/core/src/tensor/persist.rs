//! Versioned JSON envelope for model files.
//!
//! Floats are written with the shortest representation that round-trips and
//! parsed with exact rounding, so a save/load cycle reproduces every `f64`
//! bit for bit.

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct TensorFile<T> {
    pub format_version: u32,
    pub kind: String,
    pub payload: T,
}

/// Writes `payload` atomically (temp file + rename).
pub fn save_json<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let file = TensorFile {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        payload,
    };
    let text = serde_json::to_string(&file)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let file: TensorFile<T> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: format version {} (expected {FORMAT_VERSION})",
            path.display(),
            file.format_version
        )));
    }
    if file.kind != kind {
        return Err(Error::Format(format!(
            "{}: holds a {} (expected {kind})",
            path.display(),
            file.kind
        )));
    }
    Ok(file.payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, MlpParams};
    use proptest::prelude::*;

    #[test]
    fn mlp_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let p = MlpParams::init(&mut seeded_rng(9), 7, [16, 16], 7);
        save_json(&path, "mlp", &p).unwrap();
        let q: MlpParams = load_json(&path, "mlp").unwrap();
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn wrong_kind_and_garbage_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_json(&path, "mlp", &1.5f64).unwrap();
        assert!(matches!(
            load_json::<f64>(&path, "other"),
            Err(Error::Format(_))
        ));
        fs::write(&path, "{\"format_version\":1,\"kind\":\"mlp\",\"payl").unwrap();
        assert!(matches!(
            load_json::<f64>(&path, "mlp"),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn any_finite_float_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let text = serde_json::to_string(&v).unwrap();
            let back: f64 = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(v.to_bits(), back.to_bits());
        }
    }
}
