//! On-disk formats: binary feature files, raw instance-label bytes, and the
//! JSON manifest.
//!
//! Feature file layout (all little-endian):
//!
//! ```text
//! magic "UFCF" | version u32 | n_r u32 | d u32 | n_r * d float32, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{
    DataError, DatasetManifest, ManifestEntry, MultiResBag, ResolutionLevel, Result, BRANCHING,
};

pub const FEATURE_MAGIC: [u8; 4] = *b"UFCF";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 16;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one level's feature matrix.
pub fn write_feature_file(path: &Path, n: u32, d: u32, features: &[f32]) -> Result<()> {
    debug_assert_eq!(features.len(), (n * d) as usize);
    let mut buf = Vec::with_capacity(HEADER_BYTES as usize + features.len() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    for v in features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Reads one level's feature matrix, validating magic, version, length, and
/// finiteness. Returns `(n, d, features)`.
pub fn read_feature_file(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut header = [0u8; HEADER_BYTES as usize];
    let actual_len = file.metadata().map_err(io_err(path))?.len();
    if actual_len < HEADER_BYTES {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected_bytes: HEADER_BYTES,
            actual_bytes: actual_len,
        });
    }
    file.read_exact(&mut header).map_err(io_err(path))?;
    if header[0..4] != FEATURE_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: [header[0], header[1], header[2], header[3]],
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DataError::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let n = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let d = u32::from_le_bytes(header[12..16].try_into().unwrap());
    let expected = HEADER_BYTES + (n as u64) * (d as u64) * 4;
    if actual_len != expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected_bytes: expected,
            actual_bytes: actual_len,
        });
    }
    let mut payload = vec![0u8; (expected - HEADER_BYTES) as usize];
    file.read_exact(&mut payload).map_err(io_err(path))?;
    let features: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !features.iter().all(|v| v.is_finite()) {
        return Err(DataError::NonFinite {
            path: path.to_path_buf(),
        });
    }
    Ok((n, d, features))
}

fn write_label_file(path: &Path, labels: &[u8]) -> Result<()> {
    fs::write(path, labels).map_err(io_err(path))
}

fn read_label_file(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected_bytes: expected as u64,
            actual_bytes: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

/// Writes a bag under `root/<sample_id>/` and returns its manifest entry.
pub fn save_bag(bag: &MultiResBag, root: &Path, split: &str) -> Result<ManifestEntry> {
    bag.validate()?;
    let dir = root.join(&bag.sample_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut feature_files = Vec::new();
    let mut label_files = Vec::new();
    let mut mpp = Vec::new();
    let mut grids = Vec::new();
    for (r, level) in bag.levels.iter().enumerate() {
        let rel = format!("{}/r{}.ufcf", bag.sample_id, r + 1);
        write_feature_file(
            &root.join(&rel),
            level.n() as u32,
            bag.feature_dim as u32,
            &level.features,
        )?;
        feature_files.push(rel);
        mpp.push(level.mpp);
        grids.push([level.grid_w, level.grid_h]);
        if let Some(labels) = &bag.instance_labels {
            let rel = format!("{}/labels_r{}.u8", bag.sample_id, r + 1);
            write_label_file(&root.join(&rel), &labels[r])?;
            label_files.push(rel);
        }
    }
    Ok(ManifestEntry {
        sample_id: bag.sample_id.clone(),
        label: bag.label,
        split: split.to_string(),
        mpp,
        grids,
        feature_files,
        label_files: bag.instance_labels.as_ref().map(|_| label_files),
    })
}

/// Loads one bag described by a manifest entry. `root` is the manifest's
/// directory.
pub fn load_bag(root: &Path, manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<MultiResBag> {
    let mut levels = Vec::with_capacity(entry.feature_files.len());
    for (r, rel) in entry.feature_files.iter().enumerate() {
        let path = root.join(rel);
        let (n, d, features) = read_feature_file(&path)?;
        if d != manifest.feature_dim {
            return Err(DataError::ShapeMismatch {
                path,
                detail: format!("feature dim {d} != manifest dim {}", manifest.feature_dim),
            });
        }
        let [grid_w, grid_h] = entry.grids[r];
        if n != grid_w * grid_h {
            return Err(DataError::ShapeMismatch {
                path,
                detail: format!("{n} rows != grid {grid_w}×{grid_h}"),
            });
        }
        levels.push(ResolutionLevel {
            mpp: entry.mpp[r],
            grid_w,
            grid_h,
            features,
        });
    }
    let instance_labels = match &entry.label_files {
        Some(files) => {
            let mut per_level = Vec::with_capacity(files.len());
            for (r, rel) in files.iter().enumerate() {
                per_level.push(read_label_file(&root.join(rel), levels[r].n())?);
            }
            Some(per_level)
        }
        None => None,
    };
    let bag = MultiResBag {
        sample_id: entry.sample_id.clone(),
        label: entry.label,
        levels,
        feature_dim: manifest.feature_dim as usize,
        branching: manifest.branching,
        instance_labels,
    };
    bag.validate()?;
    Ok(bag)
}

/// A fully loaded dataset, bags in manifest order.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<MultiResBag>,
}

impl Dataset {
    /// Bag indices carrying the given split tag.
    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_bags(&self, split: &str) -> Vec<&MultiResBag> {
        self.split_indices(split)
            .into_iter()
            .map(|i| &self.bags[i])
            .collect()
    }
}

/// Writes bags plus `manifest.json` under `dir`.
pub fn save_dataset(dir: &Path, bags: &[(MultiResBag, String)], feature_dim: u32, levels: u32) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(bags.len());
    for (bag, split) in bags {
        entries.push(save_bag(bag, dir, split)?);
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        feature_dim,
        levels,
        branching: BRANCHING,
        entries,
    };
    let path = dir.join("manifest.json");
    let mut file = fs::File::create(&path).map_err(io_err(&path))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Json {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    file.write_all(json.as_bytes()).map_err(io_err(&path))?;
    file.write_all(b"\n").map_err(io_err(&path))
}

/// Reads `dir/manifest.json` and every bag it references.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(DataError::BadVersion {
            path,
            found: manifest.version,
        });
    }
    let bags = manifest
        .entries
        .iter()
        .map(|entry| load_bag(dir, &manifest, entry))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, bags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn tiny_bag(id: &str, label: u8) -> MultiResBag {
        let d = 3usize;
        let coarse_n = 2usize;
        let fine_n = 8usize;
        MultiResBag {
            sample_id: id.to_string(),
            label,
            levels: vec![
                ResolutionLevel {
                    mpp: 2.0,
                    grid_w: 2,
                    grid_h: 1,
                    features: (0..coarse_n * d).map(|i| i as f32 * 0.25).collect(),
                },
                ResolutionLevel {
                    mpp: 1.0,
                    grid_w: 4,
                    grid_h: 2,
                    features: (0..fine_n * d).map(|i| -(i as f32) * 0.5).collect(),
                },
            ],
            feature_dim: d,
            branching: BRANCHING,
            instance_labels: Some(vec![vec![0, 1], vec![0, 0, 0, 0, 1, 1, 1, 1]]),
        }
    }

    #[test]
    fn bag_round_trip_is_exact() {
        let dir = tempdir();
        let bag = tiny_bag("s0", 1);
        let entry = save_bag(&bag, &dir, "train").unwrap();
        let manifest = DatasetManifest {
            version: FORMAT_VERSION,
            feature_dim: 3,
            levels: 2,
            branching: BRANCHING,
            entries: vec![entry.clone()],
        };
        let loaded = load_bag(&dir, &manifest, &entry).unwrap();
        assert_eq!(loaded, bag);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn truncated_file_reports_expected_bytes() {
        let dir = tempdir();
        let path = dir.join("r1.ufcf");
        write_feature_file(&path, 6, 8, &vec![0.5; 48]).unwrap();
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() - 12]).unwrap();
        match read_feature_file(&path) {
            Err(DataError::Truncated { expected_bytes, actual_bytes, .. }) => {
                assert_eq!(expected_bytes, 16 + 48 * 4);
                assert_eq!(actual_bytes, 16 + 48 * 4 - 12);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn header_row_mismatch_is_reported() {
        // Header advertises n=6 rows but the payload holds 5.
        let dir = tempdir();
        let path = dir.join("r1.ufcf");
        let mut buf = Vec::new();
        buf.extend_from_slice(&FEATURE_MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&6u32.to_le_bytes());
        buf.extend_from_slice(&8u32.to_le_bytes());
        for _ in 0..5 * 8 {
            buf.extend_from_slice(&1.0f32.to_le_bytes());
        }
        fs::write(&path, buf).unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(DataError::Truncated { .. })
        ));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempdir();
        let path = dir.join("bad.ufcf");
        fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(
            read_feature_file(&path),
            Err(DataError::BadMagic { .. })
        ));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn dataset_round_trip_with_splits() {
        let dir = tempdir();
        let bags = vec![
            (tiny_bag("s0", 0), "train".to_string()),
            (tiny_bag("s1", 1), "test".to_string()),
        ];
        save_dataset(&dir, &bags, 3, 2).unwrap();
        let ds = load_dataset(&dir).unwrap();
        assert_eq!(ds.bags.len(), 2);
        assert_eq!(ds.split_indices("train"), vec![0]);
        assert_eq!(ds.split_indices("test"), vec![1]);
        assert_eq!(ds.bags[0], bags[0].0);
        assert_eq!(ds.bags[1], bags[1].0);
        fs::remove_dir_all(&dir).unwrap();
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "ufcmil-io-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }
}
