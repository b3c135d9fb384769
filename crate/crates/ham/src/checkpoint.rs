//! Model persistence: a JSON manifest next to a little-endian f64 parameter
//! blob. Saving the same model twice produces byte-identical files.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::PredicateSchema;
use crate::error::{Error, Result};
use crate::models::{HamConfig, HamModel, Variant};
use crate::numerics::{NamedTensors, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub variant: Variant,
    pub config: HamConfig,
    pub predicate: String,
    pub values: Vec<String>,
    /// SHA-256 of the canonical schema JSON; evaluation and transfer refuse
    /// a checkpoint whose schema differs from the one on disk.
    pub schema_sha256: String,
    pub params: Vec<ParamSpec>,
}

/// Hex SHA-256 of the schema's canonical JSON serialization.
pub fn schema_hash(schema: &PredicateSchema) -> Result<String> {
    let json = serde_json::to_vec(schema)?;
    let mut h = Sha256::new();
    h.update(&json);
    Ok(format!("{:x}", h.finalize()))
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn blob_path(dir: &Path) -> PathBuf {
    dir.join("params.bin")
}

/// Write `dir/manifest.json` and `dir/params.bin`, creating `dir` if needed.
pub fn save(model: &HamModel, schema: &PredicateSchema, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        variant: model.variant,
        config: model.config.clone(),
        predicate: schema.predicate.clone(),
        values: schema.values.clone(),
        schema_sha256: schema_hash(schema)?,
        params: model
            .params
            .entries
            .iter()
            .map(|e| ParamSpec {
                name: e.name.clone(),
                shape: e.tensor.shape.clone(),
                decay: e.decay,
            })
            .collect(),
    };
    let mut mf = std::io::BufWriter::new(std::fs::File::create(manifest_path(dir))?);
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    mf.flush()?;

    let mut bf = std::io::BufWriter::new(std::fs::File::create(blob_path(dir))?);
    for e in &model.params.entries {
        for &v in &e.tensor.data {
            bf.write_all(&v.to_le_bytes())?;
        }
    }
    bf.flush()?;
    Ok(())
}

/// Load a checkpoint directory back into a model.
pub fn load(dir: &Path) -> Result<(HamModel, Manifest)> {
    let mf = std::fs::File::open(manifest_path(dir))?;
    let manifest: Manifest = serde_json::from_reader(std::io::BufReader::new(mf))?;
    let blob = {
        let mut f = std::fs::File::open(blob_path(dir))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        bytes
    };
    let expected: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if blob.len() != expected * 8 {
        return Err(Error::Format(format!(
            "parameter blob is {} bytes, manifest expects {}",
            blob.len(),
            expected * 8
        )));
    }
    let mut params = NamedTensors::default();
    let mut offset = 0usize;
    for spec in &manifest.params {
        let len: usize = spec.shape.iter().product();
        let data: Vec<f64> = (0..len)
            .map(|i| {
                let at = (offset + i) * 8;
                f64::from_le_bytes(blob[at..at + 8].try_into().unwrap())
            })
            .collect();
        offset += len;
        let t = Tensor::new(spec.shape.clone(), data)?;
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("parameter {}", spec.name)));
        }
        params.push(&spec.name, t, spec.decay);
    }
    let model = HamModel {
        variant: manifest.variant,
        config: manifest.config.clone(),
        num_classes: manifest.values.len(),
        params,
    };
    Ok((model, manifest))
}

/// Refuse to pair a checkpoint with a schema it was not trained against.
pub fn check_schema(manifest: &Manifest, schema: &PredicateSchema) -> Result<()> {
    let hash = schema_hash(schema)?;
    if hash != manifest.schema_sha256 {
        return Err(Error::Validation(format!(
            "schema mismatch: checkpoint was trained against {} ({}), got {} ({})",
            manifest.predicate,
            &manifest.schema_sha256[..12],
            schema.predicate,
            &hash[..12]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Variant;

    fn fixture() -> (HamModel, PredicateSchema) {
        let mut c = HamConfig::defaults(Variant::TwoAttn);
        c.dim = 4;
        let schema = PredicateSchema::new("color", vec!["red".into(), "blue".into()]);
        let model = HamModel::new(Variant::TwoAttn, c, 2).unwrap();
        (model, schema)
    }

    #[test]
    fn round_trip_preserves_everything() {
        let (model, schema) = fixture();
        let dir = tempfile::tempdir().unwrap();
        save(&model, &schema, dir.path()).unwrap();
        let (loaded, manifest) = load(dir.path()).unwrap();
        assert_eq!(loaded.variant, model.variant);
        assert_eq!(loaded.num_classes, 2);
        assert_eq!(manifest.values, schema.values);
        for (a, b) in model.params.entries.iter().zip(&loaded.params.entries) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape, b.tensor.shape);
            assert_eq!(a.tensor.data, b.tensor.data);
            assert_eq!(a.decay, b.decay);
        }
        check_schema(&manifest, &schema).unwrap();
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let (model, schema) = fixture();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save(&model, &schema, d1.path()).unwrap();
        save(&model, &schema, d2.path()).unwrap();
        for name in ["manifest.json", "params.bin"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let (model, schema) = fixture();
        let dir = tempfile::tempdir().unwrap();
        save(&model, &schema, dir.path()).unwrap();
        let (_, manifest) = load(dir.path()).unwrap();
        let other = PredicateSchema::new("color", vec!["red".into(), "green".into()]);
        assert!(check_schema(&manifest, &other).is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let (model, schema) = fixture();
        let dir = tempfile::tempdir().unwrap();
        save(&model, &schema, dir.path()).unwrap();
        let blob = dir.path().join("params.bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
