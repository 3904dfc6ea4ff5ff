//! Raw on-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json          sample ids per role, split seed/ratio, generator config
//! <dir>/volumes/<id>.f32       little-endian f32, C order (x slowest, z fastest)
//! <dir>/volumes/<id>.json      sidecar: id, shape, dtype, order, mask file, generator
//! <dir>/masks/<id>.u8          labels for labeled and test samples
//! <dir>/eval_manifest.json     ids of withheld masks
//! <dir>/eval_masks/<id>.u8     ground truth of unlabeled samples (evaluation only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{DataConfig, Dataset, DatasetSplit, GeneratorParams, VolumeSample, WithheldMasks};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "duoseg-raw-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    volume_size: [usize; 3],
    labeled: Vec<String>,
    unlabeled: Vec<String>,
    test: Vec<String>,
    split_seed: u64,
    labeled_ratio: f64,
    config: Option<DataConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    id: String,
    shape: [usize; 3],
    dtype: String,
    order: String,
    mask: Option<String>,
    generator: Option<GeneratorParams>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalManifest {
    format: String,
    masks: Vec<String>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(Error::invalid(format!("sample id {id:?} is not a safe file name")));
    }
    Ok(())
}

fn write_f32(path: &Path, a: &Array3<f32>) -> Result<()> {
    let bytes: Vec<u8> = a.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, shape: [usize; 3]) -> Result<Array3<f32>> {
    let bytes = fs::read(path)?;
    let n = shape.iter().product::<usize>();
    if bytes.len() != n * 4 {
        return Err(format_err(
            path,
            format!("expected {} bytes, found {}", n * 4, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array3::from_shape_vec(shape, values).map_err(|e| format_err(path, e.to_string()))
}

fn write_u8(path: &Path, a: &Array3<u8>) -> Result<()> {
    fs::write(path, a.iter().copied().collect::<Vec<u8>>())?;
    Ok(())
}

fn read_u8(path: &Path, shape: [usize; 3]) -> Result<Array3<u8>> {
    let bytes = fs::read(path)?;
    let n = shape.iter().product::<usize>();
    if bytes.len() != n {
        return Err(format_err(path, format!("expected {n} bytes, found {}", bytes.len())));
    }
    Array3::from_shape_vec(shape, bytes).map_err(|e| format_err(path, e.to_string()))
}

fn write_sample(dir: &Path, s: &VolumeSample, generator: Option<&GeneratorParams>) -> Result<()> {
    check_id(&s.id)?;
    write_f32(&dir.join("volumes").join(format!("{}.f32", s.id)), &s.image)?;
    let mask = match &s.mask {
        Some(m) => {
            let rel = format!("masks/{}.u8", s.id);
            write_u8(&dir.join(&rel), m)?;
            Some(rel)
        }
        None => None,
    };
    let sidecar = Sidecar {
        id: s.id.clone(),
        shape: s.shape(),
        dtype: "float32-le".into(),
        order: "C (x slowest, z fastest)".into(),
        mask,
        generator: generator.cloned(),
    };
    write_json(&dir.join("volumes").join(format!("{}.json", s.id)), &sidecar)
}

fn read_sample(dir: &Path, id: &str, with_mask: bool) -> Result<VolumeSample> {
    check_id(id)?;
    let side_path = dir.join("volumes").join(format!("{id}.json"));
    let side: Sidecar = read_json(&side_path)?;
    if side.id != id {
        return Err(format_err(
            &side_path,
            format!("sidecar id {} does not match {id}", side.id),
        ));
    }
    let image = read_f32(&dir.join("volumes").join(format!("{id}.f32")), side.shape)?;
    let mask = match (&side.mask, with_mask) {
        (Some(rel), true) => Some(read_u8(&dir.join(rel), side.shape)?),
        (None, true) => return Err(format_err(&side_path, "labeled sample has no mask file")),
        (_, false) => None,
    };
    VolumeSample::new(id, image, mask)
}

/// Writes `data` and the withheld masks under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &Dataset, withheld: &WithheldMasks) -> Result<()> {
    let shape = data
        .volume_shape()
        .ok_or_else(|| Error::invalid("dataset has no labeled samples"))?;
    for sub in ["volumes", "masks", "eval_masks"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let generator = data.config.as_ref().map(|c| &c.generator);
    let split = &data.split;
    for s in split.labeled.iter().chain(&data.test) {
        if s.mask.is_none() {
            return Err(Error::invalid(format!("sample {} needs a mask", s.id)));
        }
    }
    for s in split.labeled.iter().chain(&split.unlabeled).chain(&data.test) {
        if s.shape() != shape {
            return Err(Error::shape(format!(
                "sample {} has shape {:?}, expected {shape:?}",
                s.id,
                s.shape()
            )));
        }
        if split.unlabeled.iter().any(|u| u.id == s.id) && s.mask.is_some() {
            return Err(Error::invalid(format!("unlabeled sample {} carries a mask", s.id)));
        }
        write_sample(dir, s, generator)?;
    }
    let ids = |v: &[VolumeSample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            format: DATASET_FORMAT.into(),
            volume_size: shape,
            labeled: ids(&split.labeled),
            unlabeled: ids(&split.unlabeled),
            test: ids(&data.test),
            split_seed: split.split_seed,
            labeled_ratio: split.labeled_ratio,
            config: data.config.clone(),
        },
    )?;
    for (id, m) in &withheld.0 {
        check_id(id)?;
        write_u8(&dir.join("eval_masks").join(format!("{id}.u8")), m)?;
    }
    write_json(
        &dir.join("eval_manifest.json"),
        &EvalManifest {
            format: DATASET_FORMAT.into(),
            masks: withheld.0.iter().map(|(id, _)| id.clone()).collect(),
        },
    )
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Loads the training view of a dataset. Masks of unlabeled samples are never read.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = manifest_path(dir);
    let m: Manifest = read_json(&path)?;
    if m.format != DATASET_FORMAT {
        return Err(format_err(&path, format!("unknown format {:?}", m.format)));
    }
    let load = |ids: &[String], with_mask: bool| -> Result<Vec<VolumeSample>> {
        ids.iter()
            .map(|id| {
                let s = read_sample(dir, id, with_mask)?;
                if s.shape() != m.volume_size {
                    return Err(format_err(&path, format!("{id} has shape {:?}", s.shape())));
                }
                Ok(s)
            })
            .collect()
    };
    Ok(Dataset {
        split: DatasetSplit {
            labeled: load(&m.labeled, true)?,
            unlabeled: load(&m.unlabeled, false)?,
            split_seed: m.split_seed,
            labeled_ratio: m.labeled_ratio,
        },
        test: load(&m.test, true)?,
        config: m.config,
    })
}

/// Loads the ground truth withheld from training.
pub fn load_eval_masks(dir: &Path) -> Result<WithheldMasks> {
    let m: Manifest = read_json(&manifest_path(dir))?;
    let path = dir.join("eval_manifest.json");
    let e: EvalManifest = read_json(&path)?;
    if e.format != DATASET_FORMAT {
        return Err(format_err(&path, format!("unknown format {:?}", e.format)));
    }
    e.masks
        .into_iter()
        .map(|id| {
            check_id(&id)?;
            let mask = read_u8(&dir.join("eval_masks").join(format!("{id}.u8")), m.volume_size)?;
            Ok((id, mask))
        })
        .collect::<Result<Vec<_>>>()
        .map(WithheldMasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Dataset, WithheldMasks) {
        let cfg = DataConfig {
            n_volumes: 5,
            n_test: 2,
            volume_size: [6, 5, 4],
            labeled_ratio: 0.4,
            ..DataConfig::default()
        };
        Dataset::generate(&cfg).unwrap()
    }

    #[test]
    fn round_trip() {
        let (data, withheld) = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, &withheld).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
        assert_eq!(load_eval_masks(dir.path()).unwrap(), withheld);
    }

    #[test]
    fn byte_layout_is_le_c_order() {
        let (data, withheld) = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, &withheld).unwrap();
        let s = &data.split.labeled[0];
        let bytes = fs::read(dir.path().join("volumes").join(format!("{}.f32", s.id))).unwrap();
        // voxel (1, 2, 3) sits at flat index (1 * 5 + 2) * 4 + 3
        let off = ((5 + 2) * 4 + 3) * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        assert_eq!(v, s.image[[1, 2, 3]]);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let (data, withheld) = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, &withheld).unwrap();
        let id = &data.split.labeled[0].id;
        fs::write(dir.path().join("volumes").join(format!("{id}.f32")), [0u8; 7]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
