use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use super::{NnError, PredictorKind, PredictorWeights};

pub const WEIGHTS_FORMAT_VERSION: u64 = 1;

fn dims_of(w: &PredictorWeights) -> Value {
    match w {
        PredictorWeights::Mlp(m) => json!({ "layers": m.dims() }),
        PredictorWeights::Gat(g) => json!({
            "history_len": g.history_len(),
            "latent": g.latent(),
            "f_hist": g.f_hist().dims(),
            "head": g.head().dims(),
        }),
    }
}

/// JSON document `{format_version, kind, dims, weights}`; floats use
/// shortest round-trip formatting so reloading is bit exact.
pub fn save_weights(w: &PredictorWeights, path: &Path) -> Result<(), NnError> {
    let mut doc = serde_json::to_value(w).map_err(|e| NnError::Parse(e.to_string()))?;
    let obj = doc.as_object_mut().expect("tagged enum serializes to an object");
    obj.insert("format_version".into(), json!(WEIGHTS_FORMAT_VERSION));
    obj.insert("dims".into(), dims_of(w));
    let text = serde_json::to_string(&doc).map_err(|e| NnError::Parse(e.to_string()))?;
    fs::write(path, text).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a weights file, checking version, the declared dims and, when
/// `expected` is given, the predictor kind.
pub fn load_weights(path: &Path, expected: Option<PredictorKind>) -> Result<PredictorWeights, NnError> {
    let text = fs::read_to_string(path).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| NnError::Parse(e.to_string()))?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| NnError::Parse("top level is not an object".into()))?;
    let version = obj
        .remove("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| NnError::Parse("missing format_version".into()))?;
    if version != WEIGHTS_FORMAT_VERSION {
        return Err(NnError::Version { found: version });
    }
    let declared = obj
        .remove("dims")
        .ok_or_else(|| NnError::Parse("missing dims".into()))?;
    let kind: PredictorKind = obj
        .get("kind")
        .cloned()
        .ok_or_else(|| NnError::Parse("missing kind".into()))
        .and_then(|k| serde_json::from_value(k).map_err(|e| NnError::Parse(e.to_string())))?;
    if let Some(expected) = expected {
        if expected != kind {
            return Err(NnError::KindMismatch { expected, found: kind });
        }
    }
    let weights: PredictorWeights = serde_json::from_value(doc).map_err(|e| NnError::Parse(e.to_string()))?;
    let actual = dims_of(&weights);
    if actual != declared {
        return Err(NnError::DimMismatch(format!("header {declared}, weights {actual}")));
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{GatWeights, MlpWeights};

    fn mlp() -> PredictorWeights {
        PredictorWeights::Mlp(MlpWeights::init(&[14, 8, 2], 10.0, &mut crate::rng::stream(1, &[])))
    }

    fn gat() -> PredictorWeights {
        PredictorWeights::Gat(GatWeights::init(8, 4, &[6], &[5], 10.0, &mut crate::rng::stream(2, &[])))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for w in [mlp(), gat()] {
            let p = dir.path().join("w.json");
            save_weights(&w, &p).unwrap();
            let back = load_weights(&p, Some(w.kind())).unwrap();
            let (mut a, mut b) = (Vec::new(), Vec::new());
            match (&w, &back) {
                (PredictorWeights::Mlp(x), PredictorWeights::Mlp(y)) => {
                    x.write_params(&mut a);
                    y.write_params(&mut b);
                }
                (PredictorWeights::Gat(x), PredictorWeights::Gat(y)) => {
                    x.write_params(&mut a);
                    y.write_params(&mut b);
                }
                _ => panic!("kind changed"),
            }
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(back, w);
        }
    }

    #[test]
    fn header_dims_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        save_weights(&mlp(), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, text.replace("\"layers\":[14,8,2]", "\"layers\":[14,9,2]")).unwrap();
        assert!(matches!(load_weights(&p, None), Err(NnError::DimMismatch(_))));
    }

    #[test]
    fn kind_and_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        save_weights(&gat(), &p).unwrap();
        assert!(matches!(
            load_weights(&p, Some(PredictorKind::Mlp)),
            Err(NnError::KindMismatch { .. })
        ));
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, text.replace("\"format_version\":1", "\"format_version\":2")).unwrap();
        assert!(matches!(load_weights(&p, None), Err(NnError::Version { found: 2 })));
    }
}
