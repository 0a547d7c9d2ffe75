//! On-disk dataset layout.
//!
//! ```text
//! DIR/dataset.json            DatasetManifest
//! DIR/case_0000/manifest.json CaseManifest
//! DIR/case_0000/t1.f32        raw little-endian float32, row-major
//! DIR/case_0000/flair.f32
//! DIR/case_0000/met_tCho.f32  ... one per metabolite
//! DIR/case_0000/quality_mask.f32  1.0 valid / 0.0 rejected
//! DIR/case_0000/tumor_mask.f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{PhantomCase, PhantomSpec};
use crate::error::{config_err, Error, Result};
use crate::metabolite::Metabolite;
use crate::Field;

pub const FORMAT: &str = "f32-le-row-major";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub name: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    pub case_index: Option<usize>,
    pub shape: [usize; 2],
    pub format: String,
    pub seed: Option<u64>,
    pub fields: Vec<FieldEntry>,
    pub spec: Option<PhantomSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub grid_size: usize,
    pub cases: Vec<String>,
    pub spec: PhantomSpec,
}

fn write_f32(path: &Path, field: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = field.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, shape: [usize; 2]) -> Result<Field> {
    let bytes = fs::read(path)?;
    let expected = shape[0] * shape[1] * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((shape[0], shape[1]), vals).map_err(|e| Error::Shape(e.to_string()))
}

pub(crate) fn met_field_name(m: Metabolite) -> String {
    format!("met_{}", m.name())
}

/// Write one case directory; returns its path.
pub fn write_case(root: &Path, case: &PhantomCase, spec: Option<&PhantomSpec>, case_index: Option<usize>) -> Result<PathBuf> {
    let dir = root.join(&case.case_id);
    fs::create_dir_all(&dir)?;
    let mask_vals = |m: &Array2<bool>| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<f64>>();

    let mut fields = Vec::new();
    let mut put = |name: String, vals: Vec<f64>| -> Result<()> {
        let file = format!("{name}.f32");
        write_f32(&dir.join(&file), vals.into_iter())?;
        fields.push(FieldEntry { name, file });
        Ok(())
    };
    put("t1".into(), case.t1.iter().copied().collect())?;
    put("flair".into(), case.flair.iter().copied().collect())?;
    for (m, f) in &case.metabolite_maps {
        put(met_field_name(*m), f.iter().copied().collect())?;
    }
    put("quality_mask".into(), mask_vals(&case.quality_mask))?;
    put("tumor_mask".into(), mask_vals(&case.tumor_mask))?;

    let manifest = CaseManifest {
        case_id: case.case_id.clone(),
        case_index,
        shape: [case.size(), case.size()],
        format: FORMAT.into(),
        seed: spec.map(|s| s.seed),
        fields,
        spec: spec.cloned(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(dir)
}

pub fn read_case(dir: &Path) -> Result<PhantomCase> {
    let manifest: CaseManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != FORMAT {
        return Err(config_err(format!("unsupported array format `{}`", manifest.format)));
    }
    let lookup: BTreeMap<&str, &str> = manifest
        .fields
        .iter()
        .map(|f| (f.name.as_str(), f.file.as_str()))
        .collect();
    let load = |name: &str| -> Result<Field> {
        let file = lookup
            .get(name)
            .ok_or_else(|| config_err(format!("case {} lacks field `{name}`", manifest.case_id)))?;
        read_f32(&dir.join(file), manifest.shape)
    };
    let mut metabolite_maps = BTreeMap::new();
    for m in Metabolite::ALL {
        metabolite_maps.insert(m, load(&met_field_name(m))?);
    }
    Ok(PhantomCase {
        case_id: manifest.case_id.clone(),
        t1: load("t1")?,
        flair: load("flair")?,
        metabolite_maps,
        quality_mask: load("quality_mask")?.mapv(|v| v > 0.5),
        tumor_mask: load("tumor_mask")?.mapv(|v| v > 0.5),
    })
}

/// Generate and write `count` cases plus the dataset manifest.
pub fn write_dataset(root: &Path, spec: &PhantomSpec, count: usize) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(root)?;
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let case = super::generate_phantom(spec, i)?;
        write_case(root, &case, Some(spec), Some(i))?;
        cases.push(case.case_id);
    }
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        grid_size: spec.grid_size,
        cases,
        spec: spec.clone(),
    };
    fs::write(root.join("dataset.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_dataset_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("dataset.json");
    if !path.exists() {
        return Err(config_err(format!("no dataset manifest at {}", path.display())));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Case directories (those holding a manifest.json), sorted by name.
pub fn list_case_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(config_err(format!("data directory {} does not exist", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_phantom;

    #[test]
    fn write_then_read_case() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::default();
        let case = generate_phantom(&spec, 2).unwrap();
        let dir = write_case(tmp.path(), &case, Some(&spec), Some(2)).unwrap();
        let back = read_case(&dir).unwrap();
        assert_eq!(back.quality_mask, case.quality_mask);
        assert_eq!(back.tumor_mask, case.tumor_mask);
        for m in Metabolite::ALL {
            let err = back
                .map(m)
                .iter()
                .zip(case.map(m).iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-7, "float32 storage error {err}");
        }
    }

    #[test]
    fn truncated_array_is_shape_error() {
        let tmp = tempfile::tempdir().unwrap();
        let case = generate_phantom(&PhantomSpec::default(), 0).unwrap();
        let dir = write_case(tmp.path(), &case, None, None).unwrap();
        fs::write(dir.join("t1.f32"), [0u8; 12]).unwrap();
        assert!(matches!(read_case(&dir), Err(Error::Shape(_))));
    }
}
