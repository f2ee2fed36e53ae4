//! Training: Adam with cosine annealing, the two-phase loop (joint
//! objective, then CE-only calibration on smoothed labels), deterministic
//! parallel gradient accumulation, evaluation, and the end-to-end gradient
//! checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;

use crate::bagdata::{DataError, GridIndex, MultiResBag, ResolutionLevel, BRANCHING};
use crate::calibrate::{smoothed_label, EntropyStatsTable};
use crate::losses::{total_loss, LossPhase};
use crate::metrics::Prediction;
use crate::model::{forward_bag, ForwardMode, ModelConfig, UfcMilParams, NUM_CLASSES};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::util::mix_seed;

#[derive(Debug)]
pub enum TrainError {
    Tensor(TensorError),
    Data(DataError),
    /// Loss or gradients went non-finite; training aborts with context.
    NonFinite { epoch: usize, sample_id: String },
    Config(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::NonFinite { epoch, sample_id } => {
                write!(f, "non-finite loss/gradient at epoch {epoch}, sample {sample_id}")
            }
            TrainError::Config(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Base learning rate, cosine-annealed to 0 over `epochs`.
    pub learning_rate: f64,
    pub betas: (f64, f64),
    /// PW-loss margin δ.
    pub delta: f64,
    /// SRLS temperature scaling factor α.
    pub alpha: f64,
    pub srls: bool,
    /// Epoch at which the entropy snapshot is taken and the calibration
    /// phase begins; defaults to 80% of `epochs`.
    pub record_epoch: Option<usize>,
    pub seed: u64,
    /// Gradient-accumulation window; bags inside a window run in parallel
    /// and merge into one optimizer step.
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            betas: (0.9, 0.999),
            delta: 0.49,
            alpha: 0.1,
            srls: false,
            record_epoch: None,
            seed: 0,
            window: 4,
        }
    }
}

impl TrainConfig {
    pub fn record_epoch(&self) -> usize {
        self.record_epoch.unwrap_or(self.epochs * 4 / 5)
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(TrainError::Config("window must be >= 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(TrainError::Config(format!(
                "delta {} outside (0, 0.5)",
                self.delta
            )));
        }
        if self.alpha < 0.0 {
            return Err(TrainError::Config("alpha must be >= 0".into()));
        }
        if self.srls && self.epochs > 0 && self.record_epoch() >= self.epochs {
            return Err(TrainError::Config(format!(
                "record_epoch {} must precede total epochs {}",
                self.record_epoch(),
                self.epochs
            )));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at epoch 0 to 0 at `total`.
pub fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

/// Adam state, one moment pair per parameter tensor in `named` order.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    betas: (f64, f64),
    eps: f64,
}

impl Adam {
    fn new(params: &UfcMilParams, betas: (f64, f64)) -> Self {
        let shapes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            betas,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut UfcMilParams, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for (i, (_, tensor)) in params.named_mut().into_iter().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = tensor.data().to_vec();
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            *tensor = Tensor::raw(tensor.shape().to_vec(), data);
        }
    }
}

/// Forward-pass instrumentation, split by purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardCounters {
    pub train: u64,
    pub snapshot: u64,
}

impl ForwardCounters {
    pub fn total(&self) -> u64 {
        self.train + self.snapshot
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: &'static str,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Two-phase trainer. Cloning captures the full state (parameters, Adam
/// moments, epoch cursor), so runs can branch — for example, a shared main
/// phase continued once with and once without calibration.
#[derive(Clone)]
pub struct Trainer {
    pub params: UfcMilParams,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    adam: Adam,
    epoch: usize,
    pub counters: ForwardCounters,
    /// Smoothed targets per (sample index, resolution), present after the
    /// SRLS snapshot.
    srls_targets: Option<Vec<Vec<[f64; 2]>>>,
    pub stats_table: Option<EntropyStatsTable>,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        let params = UfcMilParams::init(&model_cfg, train_cfg.seed);
        let adam = Adam::new(&params, train_cfg.betas);
        Ok(Self {
            params,
            model_cfg,
            train_cfg,
            adam,
            epoch: 0,
            counters: ForwardCounters::default(),
            srls_targets: None,
            stats_table: None,
            log: Vec::new(),
        })
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    /// Runs the remaining epochs up to `train_cfg.epochs`.
    pub fn train(&mut self, bags: &[MultiResBag]) -> Result<()> {
        let remaining = self.train_cfg.epochs.saturating_sub(self.epoch);
        self.run_epochs(bags, remaining)
    }

    /// Runs `count` epochs from the current cursor.
    pub fn run_epochs(&mut self, bags: &[MultiResBag], count: usize) -> Result<()> {
        if bags.is_empty() && count > 0 {
            return Err(TrainError::Config("no training bags".into()));
        }
        for _ in 0..count {
            self.run_one_epoch(bags)?;
        }
        Ok(())
    }

    fn run_one_epoch(&mut self, bags: &[MultiResBag]) -> Result<()> {
        let epoch = self.epoch;
        if self.train_cfg.srls && epoch == self.train_cfg.record_epoch() {
            self.take_snapshot(bags)?;
        }
        let calibration = self.train_cfg.srls && self.srls_targets.is_some();
        let lr = cosine_lr(self.train_cfg.learning_rate, epoch, self.train_cfg.epochs);

        let mut order: Vec<usize> = (0..bags.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.train_cfg.seed, 0xe0, epoch as u64]));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(self.train_cfg.window) {
            let results: Vec<Result<(f64, bool, Vec<Vec<f64>>)>> = chunk
                .par_iter()
                .map(|&idx| self.forward_backward(&bags[idx], idx, epoch, calibration))
                .collect();
            let mut grad_sum: Option<Vec<Vec<f64>>> = None;
            for result in results {
                let (loss, is_correct, grads) = result?;
                loss_sum += loss;
                correct += usize::from(is_correct);
                match &mut grad_sum {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                    None => grad_sum = Some(grads),
                }
            }
            let mut grads = grad_sum.expect("nonempty chunk");
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
            self.counters.train += chunk.len() as u64;
            self.adam.step(&mut self.params, &grads, lr);
        }

        self.log.push(EpochLog {
            epoch,
            phase: if calibration { "calibration" } else { "main" },
            lr,
            mean_loss: loss_sum / bags.len() as f64,
            train_accuracy: correct as f64 / bags.len() as f64,
        });
        self.epoch += 1;
        Ok(())
    }

    /// One training forward/backward for one bag. Returns the loss value,
    /// whether the combined prediction matches the label, and gradients in
    /// parameter order.
    fn forward_backward(
        &self,
        bag: &MultiResBag,
        sample_idx: usize,
        epoch: usize,
        calibration: bool,
    ) -> Result<(f64, bool, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let mode = ForwardMode::Train {
            seed: self.train_cfg.seed,
            epoch: epoch as u64,
            sample: sample_idx as u64,
        };
        let output = forward_bag(&mut tape, bag, &bound, &self.model_cfg, mode)?;
        let phase = if calibration {
            let targets = self
                .srls_targets
                .as_ref()
                .expect("calibration phase follows the snapshot")[sample_idx]
                .clone();
            LossPhase::Calibration { targets }
        } else {
            LossPhase::Main { label: bag.label }
        };
        let loss = total_loss(&mut tape, &output, &phase, self.train_cfg.delta)?;
        let loss_value = loss.item()?;
        if !loss_value.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                sample_id: bag.sample_id.clone(),
            });
        }
        let grads = tape.backward(&loss)?;
        let mut collected = Vec::new();
        for (_, tensor) in bound.named() {
            let g = grads.get_or_zeros(tensor);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    sample_id: bag.sample_id.clone(),
                });
            }
            collected.push(g);
        }
        let predicted = argmax(output.final_p.data());
        Ok((loss_value, predicted == bag.label as usize, collected))
    }

    /// SRLS snapshot: exactly one deterministic forward per training sample.
    /// Records per-(sample, resolution) entropy statistics and freezes the
    /// smoothed targets used by the calibration phase.
    fn take_snapshot(&mut self, bags: &[MultiResBag]) -> Result<()> {
        let per_sample: Vec<Result<Vec<Vec<f64>>>> = bags
            .par_iter()
            .enumerate()
            .map(|(idx, bag)| {
                let mut tape = Tape::new();
                let bound = self.params.bind(&mut tape, false);
                let output = forward_bag(
                    &mut tape,
                    bag,
                    &bound,
                    &self.model_cfg,
                    ForwardMode::Eval { sample: idx as u64 },
                )?;
                Ok(output
                    .levels
                    .iter()
                    .map(|level| level.entropy.data().to_vec())
                    .collect())
            })
            .collect();
        let mut stats_input = Vec::with_capacity(bags.len());
        for (bag, entropies) in bags.iter().zip(per_sample) {
            stats_input.push((bag.sample_id.clone(), entropies?));
        }
        self.counters.snapshot += bags.len() as u64;

        let table = EntropyStatsTable::build(&stats_input, self.train_cfg.alpha)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let targets: Vec<Vec<[f64; 2]>> = bags
            .iter()
            .map(|bag| {
                table
                    .epsilons_for(&bag.sample_id)
                    .into_iter()
                    .map(|eps| {
                        let soft = smoothed_label(bag.label, eps, NUM_CLASSES);
                        [soft[0], soft[1]]
                    })
                    .collect()
            })
            .collect();
        self.srls_targets = Some(targets);
        self.stats_table = Some(table);
        Ok(())
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Deterministic evaluation of one bag.
#[derive(Debug, Clone)]
pub struct BagEval {
    pub sample_id: String,
    pub label: u8,
    pub final_p: Vec<f64>,
    /// Per level: per-patch entropy in bits.
    pub level_entropy: Vec<Vec<f64>>,
    /// Per level: binary mask values.
    pub level_masks: Vec<Vec<f64>>,
}

/// Evaluates bags in deterministic mode (no dropout, noise-free masks).
/// Order follows the input; parallel execution does not change results.
pub fn evaluate(
    params: &UfcMilParams,
    model_cfg: &ModelConfig,
    bags: &[MultiResBag],
) -> Result<Vec<BagEval>> {
    bags.par_iter()
        .enumerate()
        .map(|(idx, bag)| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let output = forward_bag(
                &mut tape,
                bag,
                &bound,
                model_cfg,
                ForwardMode::Eval { sample: idx as u64 },
            )?;
            Ok(BagEval {
                sample_id: bag.sample_id.clone(),
                label: bag.label,
                final_p: output.final_p.data().to_vec(),
                level_entropy: output
                    .levels
                    .iter()
                    .map(|l| l.entropy.data().to_vec())
                    .collect(),
                level_masks: output
                    .levels
                    .iter()
                    .map(|l| l.mask.data().to_vec())
                    .collect(),
            })
        })
        .collect()
}

/// Converts evaluations into metric inputs.
pub fn to_predictions(evals: &[BagEval]) -> Vec<Prediction> {
    evals
        .iter()
        .map(|e| Prediction::new(e.final_p.clone(), e.label as usize))
        .collect()
}

// ── Gradient checking ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub params_checked: usize,
    pub elements_checked: usize,
}

/// Deterministic toy bag for the gradient check: two resolutions on a 2×2
/// coarse grid (4 and 16 patches), feature dimension 8.
pub fn gradcheck_bag(seed: u64) -> MultiResBag {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x6c]));
    let mut levels = Vec::new();
    for r in 0..2 {
        let grid = GridIndex::for_level(2, 2, r);
        let features: Vec<f32> = (0..grid.n() * d)
            .map(|_| rng.gen_range(-1.0f32..1.0f32))
            .collect();
        levels.push(ResolutionLevel {
            mpp: 2.0 / (1 << r) as f32,
            grid_w: grid.grid_w,
            grid_h: grid.grid_h,
            features,
        });
    }
    MultiResBag {
        sample_id: "gradcheck".to_string(),
        label: 1,
        levels,
        feature_dim: d,
        branching: BRANCHING,
        instance_labels: None,
    }
}

/// Compares analytic gradients of the total loss against central finite
/// differences over every parameter element, on the toy bag, in the
/// differentiable (soft-mask) configuration. Returns the maximum relative
/// error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn gradcheck(h: f64, seed: u64) -> Result<GradCheckReport> {
    let model_cfg = ModelConfig::new(8, 2);
    let params = UfcMilParams::init(&model_cfg, seed);
    let bag = gradcheck_bag(seed);
    let delta = 0.49;

    let loss_of = |params: &UfcMilParams| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let output = forward_bag(&mut tape, &bag, &bound, &model_cfg, ForwardMode::GradCheck)?;
        let loss = total_loss(
            &mut tape,
            &output,
            &LossPhase::Main { label: bag.label },
            delta,
        )?;
        Ok(loss.item()?)
    };

    // Analytic gradients, one backward pass.
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let output = forward_bag(&mut tape, &bag, &bound, &model_cfg, ForwardMode::GradCheck)?;
    let loss = total_loss(
        &mut tape,
        &output,
        &LossPhase::Main { label: bag.label },
        delta,
    )?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<(String, Vec<f64>)> = bound
        .named()
        .into_iter()
        .map(|(name, tensor)| (name, grads.get_or_zeros(tensor)))
        .collect();

    let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut elements = 0usize;
    for (p_idx, name) in names.iter().enumerate() {
        let base = params.named()[p_idx].1.clone();
        for i in 0..base.numel() {
            let x = base.data()[i];
            let eval_at = |value: f64| -> Result<f64> {
                let mut probe = params.clone();
                *probe.named_mut()[p_idx].1 = base.with_element(i, value);
                loss_of(&probe)
            };
            let plus = eval_at(x + h)?;
            let minus = eval_at(x - h)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p_idx].1[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = name.clone();
            }
            elements += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_param: worst,
        params_checked: names.len(),
        elements_checked: elements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagdata::{generate, SynthConfig};

    fn tiny_dataset() -> (Vec<MultiResBag>, Vec<MultiResBag>) {
        let config = SynthConfig {
            samples: 24,
            feature_dim: 8,
            levels: 2,
            coarse_w: 2,
            coarse_h: 2,
            pos_fraction: 0.5,
            lesion_size: 1,
            noise_sigma: 0.8,
            seed: 42,
            split_fractions: (0.75, 0.0, 0.25),
        };
        let all = generate(&config).unwrap();
        let train: Vec<MultiResBag> = all
            .iter()
            .filter(|(_, s)| s == "train")
            .map(|(b, _)| b.clone())
            .collect();
        let test: Vec<MultiResBag> = all
            .iter()
            .filter(|(_, s)| s == "test")
            .map(|(b, _)| b.clone())
            .collect();
        (train, test)
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 50), 1e-4);
        assert!(cosine_lr(1e-4, 50, 50).abs() < 1e-20);
        assert!((cosine_lr(1e-4, 25, 50) - 5e-5).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let (train_bags, _) = tiny_dataset();
        let run = || {
            let model_cfg = ModelConfig::new(8, 2);
            let train_cfg = TrainConfig {
                epochs: 3,
                seed: 5,
                window: 2,
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(model_cfg, train_cfg).unwrap();
            trainer.train(&train_bags).unwrap();
            trainer
                .params
                .named()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn window_size_does_not_break_determinism_of_eval() {
        let (train_bags, test_bags) = tiny_dataset();
        let model_cfg = ModelConfig::new(8, 2);
        let mut trainer = Trainer::new(
            model_cfg.clone(),
            TrainConfig {
                epochs: 2,
                seed: 1,
                window: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        trainer.train(&train_bags).unwrap();
        let a = evaluate(&trainer.params, &model_cfg, &test_bags).unwrap();
        let b = evaluate(&trainer.params, &model_cfg, &test_bags).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.final_p, y.final_p);
            assert_eq!(x.level_entropy, y.level_entropy);
        }
    }

    #[test]
    fn loss_decreases_on_average_early() {
        let (train_bags, _) = tiny_dataset();
        let model_cfg = ModelConfig::new(8, 2);
        let train_cfg = TrainConfig {
            epochs: 12,
            learning_rate: 5e-3,
            seed: 3,
            window: 2,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model_cfg, train_cfg).unwrap();
        trainer.train(&train_bags).unwrap();
        let first = trainer.log[0].mean_loss;
        let late: f64 = trainer.log[8..12].iter().map(|l| l.mean_loss).sum::<f64>() / 4.0;
        assert!(
            late < first,
            "mean loss should drop: first {first}, late {late}"
        );
    }

    #[test]
    fn zero_epochs_leaves_initialization_untouched() {
        let (train_bags, _) = tiny_dataset();
        let model_cfg = ModelConfig::new(8, 2);
        let train_cfg = TrainConfig {
            epochs: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model_cfg.clone(), train_cfg.clone()).unwrap();
        trainer.train(&train_bags).unwrap();
        let fresh = UfcMilParams::init(&model_cfg, train_cfg.seed);
        for ((_, a), (_, b)) in trainer.params.named().iter().zip(fresh.named()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(trainer.counters.total(), 0);
    }

    #[test]
    fn srls_snapshot_adds_exactly_one_pass_per_sample() {
        let (train_bags, _) = tiny_dataset();
        let model_cfg = ModelConfig::new(8, 2);
        let base = TrainConfig {
            epochs: 5,
            seed: 2,
            window: 2,
            ..TrainConfig::default()
        };
        let mut plain = Trainer::new(model_cfg.clone(), base.clone()).unwrap();
        plain.train(&train_bags).unwrap();

        let srls_cfg = TrainConfig {
            srls: true,
            record_epoch: Some(3),
            ..base
        };
        let mut srls = Trainer::new(model_cfg, srls_cfg).unwrap();
        srls.train(&train_bags).unwrap();

        assert_eq!(plain.counters.snapshot, 0);
        assert_eq!(srls.counters.snapshot, train_bags.len() as u64);
        assert_eq!(
            srls.counters.total(),
            plain.counters.total() + train_bags.len() as u64
        );
        assert!(srls.stats_table.is_some());
        let phases: Vec<&str> = srls.log.iter().map(|l| l.phase).collect();
        assert_eq!(phases, vec!["main", "main", "main", "calibration", "calibration"]);
    }

    #[test]
    fn calibration_epochs_zero_matches_plain_training() {
        let (train_bags, _) = tiny_dataset();
        let model_cfg = ModelConfig::new(8, 2);
        // SRLS with the snapshot scheduled at the end: no calibration epochs
        // remain, so parameters must match plain training bit for bit.
        let plain_cfg = TrainConfig {
            epochs: 4,
            seed: 7,
            window: 2,
            ..TrainConfig::default()
        };
        let mut plain = Trainer::new(model_cfg.clone(), plain_cfg.clone()).unwrap();
        plain.train(&train_bags).unwrap();

        let mut srls = Trainer::new(model_cfg, plain_cfg).unwrap();
        srls.train_cfg.srls = true;
        srls.train_cfg.record_epoch = Some(4);
        srls.train(&train_bags).unwrap();

        for ((_, a), (_, b)) in plain.params.named().iter().zip(srls.params.named()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn all_zero_epsilon_calibration_equals_hard_label_ce() {
        // When every ε is 0 the smoothed targets are one-hot, so the
        // calibration phase is plain CE-only training.
        let label = 1u8;
        let soft = smoothed_label(label, 0.0, 2);
        assert_eq!(soft, vec![0.0, 1.0]);
    }

    #[test]
    fn branched_training_resumes_identically() {
        let (train_bags, _) = tiny_dataset();
        let model_cfg = ModelConfig::new(8, 2);
        let cfg = TrainConfig {
            epochs: 4,
            seed: 11,
            window: 2,
            ..TrainConfig::default()
        };
        let mut straight = Trainer::new(model_cfg.clone(), cfg.clone()).unwrap();
        straight.train(&train_bags).unwrap();

        let mut base = Trainer::new(model_cfg, cfg).unwrap();
        base.run_epochs(&train_bags, 2).unwrap();
        let mut branched = base.clone();
        branched.run_epochs(&train_bags, 2).unwrap();

        for ((_, a), (_, b)) in straight.params.named().iter().zip(branched.params.named()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn gradcheck_toy_bag_matches_finite_differences() {
        let report = gradcheck(1e-3, 0).unwrap();
        assert!(
            report.max_rel_error < 1e-3,
            "max relative error {} at {}",
            report.max_rel_error,
            report.worst_param
        );
        assert!(report.elements_checked > 1000);
    }

    #[test]
    fn gradcheck_is_deterministic() {
        let a = gradcheck(1e-3, 4).unwrap();
        let b = gradcheck(1e-3, 4).unwrap();
        assert_eq!(a.max_rel_error.to_bits(), b.max_rel_error.to_bits());
    }
}
