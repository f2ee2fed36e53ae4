//! Multi-resolution bag data model.
//!
//! A bag holds one sample: a weak label plus one feature matrix per
//! resolution level, ordered coarsest to finest. Levels refine on a quadtree:
//! every coarse patch has exactly `k = 4` children at the next level, and
//! feature rows are stored child-major, so the children of coarse patch `n`
//! occupy rows `[n*k, (n+1)*k)`. Row-major layout applies only at the
//! coarsest level; finer levels follow the induced Z-ordering, and
//! [`GridIndex`] translates between row indices and grid positions.

mod io;
mod synth;

pub use io::{load_bag, load_dataset, read_feature_file, save_bag, save_dataset, write_feature_file, Dataset};
pub use synth::{generate, generate_to_dir, SynthConfig};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Range;
use std::path::PathBuf;

/// Fixed quadtree branching: each coarse patch refines into a 2×2 block.
pub const BRANCHING: u32 = 4;

pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_VAL: &str = "val";
pub const SPLIT_TEST: &str = "test";

/// Errors from validation, I/O, and generation.
#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: std::io::Error },
    BadMagic { path: PathBuf, found: [u8; 4] },
    BadVersion { path: PathBuf, found: u32 },
    Truncated { path: PathBuf, expected_bytes: u64, actual_bytes: u64 },
    ShapeMismatch { path: PathBuf, detail: String },
    NonFinite { path: PathBuf },
    Json { path: PathBuf, detail: String },
    Invalid(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::BadMagic { path, found } => {
                write!(f, "{}: bad magic {found:?}", path.display())
            }
            DataError::BadVersion { path, found } => {
                write!(f, "{}: unsupported format version {found}", path.display())
            }
            DataError::Truncated { path, expected_bytes, actual_bytes } => write!(
                f,
                "{}: truncated, expected {expected_bytes} bytes but found {actual_bytes}",
                path.display()
            ),
            DataError::ShapeMismatch { path, detail } => {
                write!(f, "{}: {detail}", path.display())
            }
            DataError::NonFinite { path } => {
                write!(f, "{}: non-finite feature values", path.display())
            }
            DataError::Json { path, detail } => write!(f, "{}: {detail}", path.display()),
            DataError::Invalid(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for DataError {}

pub type Result<T> = std::result::Result<T, DataError>;

/// One resolution level of a bag.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionLevel {
    /// Microns-per-pixel label; informational only.
    pub mpp: f32,
    pub grid_w: u32,
    pub grid_h: u32,
    /// n_r × d feature matrix, row-major, child-major row order.
    pub features: Vec<f32>,
}

impl ResolutionLevel {
    /// Patch count at this level.
    pub fn n(&self) -> usize {
        (self.grid_w * self.grid_h) as usize
    }
}

/// One sample: weak label plus per-level features and optional per-patch
/// labels (synthetic data only).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiResBag {
    pub sample_id: String,
    pub label: u8,
    /// Ordered coarsest (index 0) to finest.
    pub levels: Vec<ResolutionLevel>,
    pub feature_dim: usize,
    pub branching: u32,
    pub instance_labels: Option<Vec<Vec<u8>>>,
}

impl MultiResBag {
    /// Checks the quadtree invariant, feature dimensions, and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(DataError::Invalid(format!(
                "bag {}: no resolution levels",
                self.sample_id
            )));
        }
        for (r, level) in self.levels.iter().enumerate() {
            if level.grid_w == 0 || level.grid_h == 0 {
                return Err(DataError::Invalid(format!(
                    "bag {}: level {r} has an empty grid",
                    self.sample_id
                )));
            }
            if level.features.len() != level.n() * self.feature_dim {
                return Err(DataError::Invalid(format!(
                    "bag {}: level {r} has {} values, expected {}×{}",
                    self.sample_id,
                    level.features.len(),
                    level.n(),
                    self.feature_dim
                )));
            }
            if !level.features.iter().all(|v| v.is_finite()) {
                return Err(DataError::Invalid(format!(
                    "bag {}: level {r} contains non-finite features",
                    self.sample_id
                )));
            }
            if r > 0 {
                let prev = &self.levels[r - 1];
                if level.grid_w != 2 * prev.grid_w || level.grid_h != 2 * prev.grid_h {
                    return Err(DataError::Invalid(format!(
                        "bag {}: level {r} grid {}×{} does not double level {} grid {}×{}",
                        self.sample_id,
                        level.grid_w,
                        level.grid_h,
                        r - 1,
                        prev.grid_w,
                        prev.grid_h
                    )));
                }
            }
        }
        if let Some(labels) = &self.instance_labels {
            if labels.len() != self.levels.len() {
                return Err(DataError::Invalid(format!(
                    "bag {}: {} label levels for {} feature levels",
                    self.sample_id,
                    labels.len(),
                    self.levels.len()
                )));
            }
            for (r, (lv, lab)) in self.levels.iter().zip(labels).enumerate() {
                if lab.len() != lv.n() {
                    return Err(DataError::Invalid(format!(
                        "bag {}: level {r} has {} labels for {} patches",
                        self.sample_id,
                        lab.len(),
                        lv.n()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Position/index translation for one level of this bag.
    pub fn grid_index(&self, level: usize) -> GridIndex {
        GridIndex::for_level(self.levels[0].grid_w, self.levels[0].grid_h, level)
    }
}

/// Weak bag label from per-instance labels: negative only when every
/// instance is negative.
pub fn bag_label_from_instances(instance_labels: &[u8]) -> Result<u8> {
    if instance_labels.is_empty() {
        return Err(DataError::Invalid(
            "bag label requested for an empty instance set".to_string(),
        ));
    }
    Ok(u8::from(instance_labels.iter().any(|&y| y != 0)))
}

/// Child rows of coarse patch `n` under branching `k`.
pub fn children(n: usize, k: usize) -> Range<usize> {
    n * k..(n + 1) * k
}

/// Index/position maps for one level of the quadtree.
///
/// Level 0 is row-major over the coarse grid; level `r+1` orders rows
/// child-major beneath level `r`, so row `4n + c` is child `c` of row `n`,
/// at grid offset `(c & 1, c >> 1)` within the parent's 2×2 block.
#[derive(Debug, Clone)]
pub struct GridIndex {
    pub grid_w: u32,
    pub grid_h: u32,
    positions: Vec<(u32, u32)>,
    row_of_cell: Vec<usize>,
}

impl GridIndex {
    pub fn for_level(coarse_w: u32, coarse_h: u32, level: usize) -> Self {
        let mut positions: Vec<(u32, u32)> = (0..coarse_w * coarse_h)
            .map(|n| (n % coarse_w, n / coarse_w))
            .collect();
        for _ in 0..level {
            positions = positions
                .iter()
                .flat_map(|&(x, y)| {
                    (0..4u32).map(move |c| (2 * x + (c & 1), 2 * y + (c >> 1)))
                })
                .collect();
        }
        let grid_w = coarse_w << level;
        let grid_h = coarse_h << level;
        let mut row_of_cell = vec![0usize; (grid_w * grid_h) as usize];
        for (row, &(x, y)) in positions.iter().enumerate() {
            row_of_cell[(y * grid_w + x) as usize] = row;
        }
        Self {
            grid_w,
            grid_h,
            positions,
            row_of_cell,
        }
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    /// Grid position of storage row `n`.
    pub fn position(&self, n: usize) -> (u32, u32) {
        self.positions[n]
    }

    /// Storage row of grid cell `(x, y)`.
    pub fn row_at(&self, x: u32, y: u32) -> usize {
        self.row_of_cell[(y * self.grid_w + x) as usize]
    }

    /// 4-neighborhood (up/down/left/right) of patch `n`, as storage rows.
    /// Boundary patches have fewer neighbors; the patch itself is excluded.
    pub fn neighbors(&self, n: usize) -> Result<Vec<usize>> {
        if n >= self.n() {
            return Err(DataError::Invalid(format!(
                "patch index {n} out of range for {}×{} grid",
                self.grid_w, self.grid_h
            )));
        }
        let (x, y) = self.positions[n];
        let mut out = Vec::with_capacity(4);
        if y > 0 {
            out.push(self.row_at(x, y - 1));
        }
        if x > 0 {
            out.push(self.row_at(x - 1, y));
        }
        if x + 1 < self.grid_w {
            out.push(self.row_at(x + 1, y));
        }
        if y + 1 < self.grid_h {
            out.push(self.row_at(x, y + 1));
        }
        Ok(out)
    }

    /// Dense adjacency matrix (n×n, row-major, 1.0 for neighbors) plus a
    /// per-row flag that is 1.0 exactly for rows with no neighbors.
    pub fn adjacency(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let mut adj = vec![0.0; n * n];
        let mut isolated = vec![0.0; n];
        for row in 0..n {
            let nbrs = self.neighbors(row).expect("row in range");
            if nbrs.is_empty() {
                isolated[row] = 1.0;
            }
            for k in nbrs {
                adj[row * n + k] = 1.0;
            }
        }
        (adj, isolated)
    }
}

/// Dataset manifest: schema for a directory of bags on disk. Paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub feature_dim: u32,
    pub levels: u32,
    pub branching: u32,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub label: u8,
    pub split: String,
    pub mpp: Vec<f32>,
    /// Per-level `[grid_w, grid_h]`.
    pub grids: Vec<[u32; 2]>,
    pub feature_files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_files: Option<Vec<String>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bag_label_follows_any_positive_rule() {
        assert_eq!(bag_label_from_instances(&[0, 0, 0]).unwrap(), 0);
        assert_eq!(bag_label_from_instances(&[0, 1, 0]).unwrap(), 1);
        assert_eq!(bag_label_from_instances(&[1]).unwrap(), 1);
        assert!(bag_label_from_instances(&[]).is_err());
    }

    #[test]
    fn neighbors_on_coarse_grid() {
        // Hand enumeration: 3×3 row-major grid, center patch 4.
        let g = GridIndex::for_level(3, 3, 0);
        let mut nbrs = g.neighbors(4).unwrap();
        nbrs.sort_unstable();
        assert_eq!(nbrs, vec![1, 3, 5, 7]);

        let lone = GridIndex::for_level(1, 1, 0);
        assert!(lone.neighbors(0).unwrap().is_empty());

        let pair = GridIndex::for_level(2, 1, 0);
        assert_eq!(pair.neighbors(0).unwrap(), vec![1]);
    }

    #[test]
    fn neighbors_rejects_out_of_range() {
        let g = GridIndex::for_level(2, 2, 0);
        assert!(g.neighbors(4).is_err());
    }

    #[test]
    fn neighbors_are_symmetric() {
        for level in 0..3 {
            let g = GridIndex::for_level(3, 2, level);
            for n in 0..g.n() {
                for m in g.neighbors(n).unwrap() {
                    assert!(
                        g.neighbors(m).unwrap().contains(&n),
                        "level {level}: {m} missing reverse edge to {n}"
                    );
                }
            }
        }
    }

    #[test]
    fn children_ranges() {
        assert_eq!(children(0, 4).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(children(2, 4).collect::<Vec<_>>(), vec![8, 9, 10, 11]);
        assert_eq!(children(1, 1).collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn children_partition_next_level() {
        let g = GridIndex::for_level(3, 2, 1);
        let coarse_n = 6usize;
        assert_eq!(g.n(), 4 * coarse_n);
        let mut seen = vec![false; g.n()];
        for n in 0..coarse_n {
            for c in children(n, 4) {
                assert!(!seen[c]);
                seen[c] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn child_rows_sit_inside_parent_cell() {
        let coarse = GridIndex::for_level(3, 2, 0);
        let fine = GridIndex::for_level(3, 2, 1);
        for n in 0..coarse.n() {
            let (px, py) = coarse.position(n);
            for c in children(n, 4) {
                let (x, y) = fine.position(c);
                assert_eq!(x / 2, px);
                assert_eq!(y / 2, py);
            }
        }
    }

    #[test]
    fn isolated_flag_marks_empty_neighborhoods() {
        let g = GridIndex::for_level(1, 1, 0);
        let (adj, isolated) = g.adjacency();
        assert_eq!(adj, vec![0.0]);
        assert_eq!(isolated, vec![1.0]);

        let g2 = GridIndex::for_level(2, 1, 0);
        let (adj2, isolated2) = g2.adjacency();
        assert_eq!(adj2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(isolated2, vec![0.0, 0.0]);
    }
}
