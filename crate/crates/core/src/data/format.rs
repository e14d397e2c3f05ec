//! CXFE / CXLB binary files and the plain-text dataset manifest.
//!
//! Feature file (little-endian):
//! - magic `CXFE`
//! - version: u16 = 1
//! - d: u32
//! - N: u64
//! - N × d f32, row-major
//!
//! Label file (little-endian):
//! - magic `CXLB`
//! - version: u16 = 1
//! - C: u32
//! - N: u64
//! - N × C i8 label codes (0 negative, 1 positive, -1 uncertain, -2 missing)
//!
//! The manifest is `key = value` text naming the task, its classes, the split
//! and the two payload files (relative to the manifest's directory).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{LabelCode, Split, TaskDataset};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CXFE";
pub const LABEL_MAGIC: &[u8; 4] = b"CXLB";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

const RESERVED_KEYS: [&str; 6] = ["name", "task_id", "split", "classes", "features", "labels"];

fn encode_header(magic: &[u8; 4], width: u32, rows: u64) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&width.to_le_bytes());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf
}

/// Returns `(width, rows, payload)` after checking magic, version and length.
fn decode_header<'a>(
    path: &Path,
    bytes: &'a [u8],
    magic: &[u8; 4],
    elem_size: u64,
) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let width = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as u64;
    let rows = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let payload = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(width)
        .and_then(|n| n.checked_mul(elem_size))
        .ok_or_else(|| Error::Dataset(format!("{}: header sizes overflow", path.display())))?;
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len() as u64,
        });
    }
    if payload.len() as u64 > expected {
        return Err(Error::Dataset(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            payload.len() as u64 - expected
        )));
    }
    Ok((width as usize, rows as usize, payload))
}

pub fn encode_features(features: &Array2<f32>) -> Vec<u8> {
    let mut buf = encode_header(FEATURE_MAGIC, features.ncols() as u32, features.nrows() as u64);
    buf.reserve(features.len() * 4);
    for v in features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Array2<f32>> {
    let (d, n, payload) = decode_header(path, bytes, FEATURE_MAGIC, 4)?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteFeature {
            row: pos / d.max(1),
            col: pos % d.max(1),
        });
    }
    Ok(Array2::from_shape_vec((n, d), values).expect("length checked against header"))
}

pub fn encode_labels(labels: &Array2<LabelCode>) -> Vec<u8> {
    let mut buf = encode_header(LABEL_MAGIC, labels.ncols() as u32, labels.nrows() as u64);
    buf.extend(labels.iter().map(|l| l.code() as u8));
    buf
}

pub fn decode_labels(path: &Path, bytes: &[u8]) -> Result<Array2<LabelCode>> {
    let (c, n, payload) = decode_header(path, bytes, LABEL_MAGIC, 1)?;
    let codes = payload
        .iter()
        .map(|&b| LabelCode::from_code(b as i8))
        .collect::<Result<Vec<_>>>()?;
    Ok(Array2::from_shape_vec((n, c), codes).expect("length checked against header"))
}

fn payload_paths(manifest: &Path) -> (String, String) {
    let file = manifest
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let stem = file.strip_suffix(".manifest").unwrap_or(&file).to_string();
    (format!("{stem}.cxfe"), format!("{stem}.cxlb"))
}

/// Writes the manifest at `path` plus `<stem>.cxfe` / `<stem>.cxlb` beside it.
pub fn write_feature_file(dataset: &TaskDataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (feat_name, label_name) = payload_paths(path);
    let feat_path = dir.join(&feat_name);
    let label_path = dir.join(&label_name);
    fs::write(&feat_path, encode_features(&dataset.features)).map_err(|e| Error::io(&feat_path, e))?;
    fs::write(&label_path, encode_labels(&dataset.labels)).map_err(|e| Error::io(&label_path, e))?;

    let mut text = String::from("# carl-router dataset manifest\n");
    text += &format!("name = {}\n", dataset.name);
    text += &format!("task_id = {}\n", dataset.task_id);
    text += &format!("split = {}\n", dataset.split);
    text += &format!("classes = {}\n", dataset.class_names.join(","));
    text += &format!("features = {feat_name}\n");
    text += &format!("labels = {label_name}\n");
    for (k, v) in &dataset.metadata {
        text += &format!("{k} = {v}\n");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parsed manifest: reserved keys plus whatever else the writer recorded.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub name: String,
    pub task_id: usize,
    pub split: Split,
    pub classes: Vec<String>,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub metadata: BTreeMap<String, String>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Manifest {
        path: path.to_path_buf(),
        reason,
    };
    let mut entries = crate::config::parse_key_values(&text).map_err(|e| bad(e.to_string()))?;
    let mut take = |key: &str| entries.remove(key).ok_or_else(|| bad(format!("missing key `{key}`")));
    let name = take("name")?;
    let split: Split = take("split")?.parse().map_err(|e: Error| bad(e.to_string()))?;
    let classes = take("classes")?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect::<Vec<_>>();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let features = dir.join(take("features")?);
    let labels = dir.join(take("labels")?);
    let task_id = match entries.remove("task_id") {
        Some(v) => v.parse().map_err(|_| bad(format!("task_id `{v}` is not an integer")))?,
        None => 0,
    };
    debug_assert!(RESERVED_KEYS.iter().all(|k| !entries.contains_key(*k)));
    Ok(Manifest {
        name,
        task_id,
        split,
        classes,
        features,
        labels,
        metadata: entries,
    })
}

/// Loads the dataset described by the manifest at `path`.
pub fn read_feature_file(path: &Path) -> Result<TaskDataset> {
    let manifest = read_manifest(path)?;
    let feat_bytes = fs::read(&manifest.features).map_err(|e| Error::io(&manifest.features, e))?;
    let label_bytes = fs::read(&manifest.labels).map_err(|e| Error::io(&manifest.labels, e))?;
    let features = decode_features(&manifest.features, &feat_bytes)?;
    let labels = decode_labels(&manifest.labels, &label_bytes)?;
    if let Some(d) = manifest.metadata.get("d") {
        if d.parse::<usize>().ok() != Some(features.ncols()) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                reason: format!("manifest d = {d} but feature header has d = {}", features.ncols()),
            });
        }
    }
    let dataset = TaskDataset {
        task_id: manifest.task_id,
        name: manifest.name,
        class_names: manifest.classes,
        features,
        labels,
        split: manifest.split,
        metadata: manifest.metadata,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> TaskDataset {
        TaskDataset {
            task_id: 1,
            name: "chest".into(),
            class_names: vec!["a".into(), "b".into()],
            features: array![[0.5f32, -1.0, 2.0], [3.0, 4.0, -0.25]],
            labels: array![
                [LabelCode::Positive, LabelCode::Missing],
                [LabelCode::Uncertain, LabelCode::Negative]
            ],
            split: Split::Train,
            metadata: BTreeMap::from([("encoder".to_string(), "swin".to_string())]),
        }
    }

    #[test]
    fn feature_header_layout_is_bit_exact() {
        let bytes = encode_features(&array![[1.0f32, 2.0]]);
        assert_eq!(&bytes[..4], b"CXFE");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[10..18], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[18..22], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 18 + 8);
    }

    #[test]
    fn label_payload_uses_signed_codes() {
        let bytes = encode_labels(&tiny().labels);
        assert_eq!(&bytes[..4], b"CXLB");
        assert_eq!(&bytes[18..], &[1u8, 0xFE, 0xFF, 0]);
    }

    #[test]
    fn manifest_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chest.train.manifest");
        let ds = tiny();
        write_feature_file(&ds, &path).unwrap();
        assert!(dir.path().join("chest.train.cxfe").exists());
        assert_eq!(read_feature_file(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_rows_are_detected() {
        let mut bytes = encode_features(&Array2::<f32>::zeros((10, 3)));
        bytes.truncate(bytes.len() - 3 * 4);
        let err = decode_features(Path::new("x.cxfe"), &bytes).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Truncated {
                    expected: 120,
                    found: 108,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn unknown_label_byte_is_rejected() {
        let mut bytes = encode_labels(&tiny().labels);
        bytes[18] = 0x03;
        assert!(matches!(
            decode_labels(Path::new("x.cxlb"), &bytes),
            Err(Error::UnknownLabelCode(3))
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_features(&array![[1.0f32]]);
        bytes[4] = 2;
        assert!(matches!(
            decode_features(Path::new("x"), &bytes),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
        bytes[0] = b'Z';
        assert!(matches!(
            decode_features(Path::new("x"), &bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let bytes = encode_features(&array![[1.0f32, f32::NAN]]);
        assert!(matches!(
            decode_features(Path::new("x"), &bytes),
            Err(Error::NonFiniteFeature { row: 0, col: 1 })
        ));
    }
}
