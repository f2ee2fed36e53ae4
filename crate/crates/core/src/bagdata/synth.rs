//! Synthetic planted-lesion generator.
//!
//! Background patches draw from one Gaussian cluster; positive bags plant a
//! contiguous rectangular lesion whose features interpolate toward a signal
//! cluster. The lesion rectangle has real-valued edges: cells it only
//! partially covers get proportionally mixed features, so patches on the
//! lesion boundary are genuinely ambiguous at coarse resolution and resolve
//! at finer levels — the structure the uncertainty machinery is meant to
//! exploit. A patch is labeled positive when the lesion covers more than
//! half of it; bag labels then follow from the instance labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use super::{
    bag_label_from_instances, save_dataset, DataError, GridIndex, MultiResBag, ResolutionLevel,
    Result, BRANCHING, SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL,
};
use crate::util::mix_seed;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub samples: usize,
    pub feature_dim: usize,
    pub levels: usize,
    pub coarse_w: u32,
    pub coarse_h: u32,
    /// Fraction of bags carrying a lesion, in [0, 1].
    pub pos_fraction: f64,
    /// Maximum side length of the lesion's fully-covered core, in coarse
    /// cells. Must be >= 1 whenever positives are requested.
    pub lesion_size: u32,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Train/val/test fractions; applied per class (stratified).
    pub split_fractions: (f64, f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 40,
            feature_dim: 16,
            levels: 3,
            coarse_w: 4,
            coarse_h: 4,
            pos_fraction: 0.3,
            lesion_size: 2,
            noise_sigma: 1.0,
            seed: 0,
            split_fractions: (0.6, 0.2, 0.2),
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(DataError::Invalid("samples must be >= 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(DataError::Invalid("feature dim must be >= 1".into()));
        }
        if self.levels == 0 {
            return Err(DataError::Invalid("levels must be >= 1".into()));
        }
        if self.coarse_w == 0 || self.coarse_h == 0 {
            return Err(DataError::Invalid("coarse grid must be >= 1×1".into()));
        }
        if !(0.0..=1.0).contains(&self.pos_fraction) {
            return Err(DataError::Invalid(format!(
                "pos_fraction {} outside [0, 1]",
                self.pos_fraction
            )));
        }
        if self.pos_fraction > 0.0 && self.lesion_size == 0 {
            return Err(DataError::Invalid(
                "lesion_size = 0 cannot produce the requested positive bags".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::Invalid("noise_sigma must be >= 0".into()));
        }
        let (t, v, e) = self.split_fractions;
        if t < 0.0 || v < 0.0 || e < 0.0 || (t + v + e - 1.0).abs() > 1e-9 {
            return Err(DataError::Invalid(
                "split fractions must be non-negative and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// Lesion rectangle in coarse-grid coordinates.
#[derive(Debug, Clone, Copy)]
struct Lesion {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    /// Contrast multiplier in (0, 1]; faint lesions are harder.
    intensity: f64,
}

/// Overlap fraction of the lesion over one cell, where the cell spans
/// `[cx, cx+size) × [cy, cy+size)` in coarse units.
fn coverage(lesion: &Lesion, cx: f64, cy: f64, size: f64) -> f64 {
    let ox = (lesion.x1.min(cx + size) - lesion.x0.max(cx)).max(0.0);
    let oy = (lesion.y1.min(cy + size) - lesion.y0.max(cy)).max(0.0);
    ox * oy / (size * size)
}

/// Generates all bags in memory, tagged with their split.
pub fn generate(config: &SynthConfig) -> Result<Vec<(MultiResBag, String)>> {
    config.validate()?;
    let d = config.feature_dim;

    let mut cluster_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0]));
    let background: Vec<f64> = (0..d).map(|_| cluster_rng.sample(StandardNormal)).collect();
    let signal: Vec<f64> = (0..d).map(|_| cluster_rng.sample(StandardNormal)).collect();

    let n_pos = (config.pos_fraction * config.samples as f64).round() as usize;
    let mut is_positive = vec![false; config.samples];
    for flag in is_positive.iter_mut().take(n_pos) {
        *flag = true;
    }
    shuffle(&mut is_positive, &mut ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 1])));

    let splits = assign_splits(&is_positive, config);

    let grids: Vec<GridIndex> = (0..config.levels)
        .map(|r| GridIndex::for_level(config.coarse_w, config.coarse_h, r))
        .collect();

    let mut out = Vec::with_capacity(config.samples);
    for (i, &positive) in is_positive.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 2, i as u64]));
        let lesion = positive.then(|| sample_lesion(config, &mut rng));

        let mut levels = Vec::with_capacity(config.levels);
        let mut instance_labels = Vec::with_capacity(config.levels);
        for (r, grid) in grids.iter().enumerate() {
            let cell = 1.0 / (1u32 << r) as f64;
            let mut features = Vec::with_capacity(grid.n() * d);
            let mut labels = Vec::with_capacity(grid.n());
            for n in 0..grid.n() {
                let (x, y) = grid.position(n);
                let cov = lesion
                    .as_ref()
                    .map(|l| coverage(l, x as f64 * cell, y as f64 * cell, cell))
                    .unwrap_or(0.0);
                labels.push(u8::from(cov > 0.5));
                let blend = cov * lesion.map(|l| l.intensity).unwrap_or(0.0);
                for j in 0..d {
                    let mean = background[j] + blend * (signal[j] - background[j]);
                    let noise: f64 = rng.sample(StandardNormal);
                    features.push((mean + config.noise_sigma * noise) as f32);
                }
            }
            levels.push(ResolutionLevel {
                mpp: 2.0 / (1u32 << r) as f32,
                grid_w: grid.grid_w,
                grid_h: grid.grid_h,
                features,
            });
            instance_labels.push(labels);
        }

        let label = bag_label_from_instances(&instance_labels[0])?;
        debug_assert_eq!(label == 1, positive, "planted core must set the bag label");
        let bag = MultiResBag {
            sample_id: format!("s{i:04}"),
            label,
            levels,
            feature_dim: d,
            branching: BRANCHING,
            instance_labels: Some(instance_labels),
        };
        bag.validate()?;
        out.push((bag, splits[i].to_string()));
    }
    Ok(out)
}

/// Generates and writes a dataset directory (bags plus `manifest.json`).
pub fn generate_to_dir(config: &SynthConfig, dir: &Path) -> Result<()> {
    let bags = generate(config)?;
    save_dataset(
        dir,
        &bags,
        config.feature_dim as u32,
        config.levels as u32,
    )
}

/// A small tail of near-invisible lesions keeps the task from becoming
/// perfectly separable: they are the bags a confidence-saturated model gets
/// wrong, which is what calibration training has to answer for.
const FAINT_FRACTION: f64 = 0.15;

fn sample_lesion(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Lesion {
    let max_w = config.lesion_size.min(config.coarse_w).max(1);
    let max_h = config.lesion_size.min(config.coarse_h).max(1);
    let core_w = rng.gen_range(1..=max_w);
    let core_h = rng.gen_range(1..=max_h);
    let x0 = rng.gen_range(0..=config.coarse_w - core_w) as f64;
    let y0 = rng.gen_range(0..=config.coarse_h - core_h) as f64;
    // Fractional margins below one half-cell: ring cells stay labeled
    // negative while their features mix toward the signal cluster, far
    // enough in to be genuinely ambiguous at coarse resolution.
    let margin = |rng: &mut ChaCha8Rng| rng.gen_range(0.25..0.49);
    let x0_m = x0 - margin(rng);
    let y0_m = y0 - margin(rng);
    let x1_m = x0 + core_w as f64 + margin(rng);
    let y1_m = y0 + core_h as f64 + margin(rng);
    let intensity = if rng.gen::<f64>() < FAINT_FRACTION {
        rng.gen_range(0.22..0.35)
    } else {
        rng.gen_range(0.4..1.0)
    };
    Lesion {
        x0: x0_m.max(0.0),
        y0: y0_m.max(0.0),
        x1: x1_m.min(config.coarse_w as f64),
        y1: y1_m.min(config.coarse_h as f64),
        intensity,
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Stratified split assignment: each class is shuffled and partitioned by
/// the configured fractions.
fn assign_splits(is_positive: &[bool], config: &SynthConfig) -> Vec<&'static str> {
    let mut splits = vec![SPLIT_TRAIN; is_positive.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 3]));
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..is_positive.len())
            .filter(|&i| is_positive[i] == class)
            .collect();
        shuffle(&mut idx, &mut rng);
        let n = idx.len();
        let n_train = (config.split_fractions.0 * n as f64).round() as usize;
        let n_val = (config.split_fractions.1 * n as f64).round() as usize;
        for (pos, &i) in idx.iter().enumerate() {
            splits[i] = if pos < n_train.min(n) {
                SPLIT_TRAIN
            } else if pos < (n_train + n_val).min(n) {
                SPLIT_VAL
            } else {
                SPLIT_TEST
            };
        }
    }
    splits
}
