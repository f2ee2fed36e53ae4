//! Inspect per-bag scores to understand ranking failures.

use ufcmil::bagdata::{generate, SynthConfig};
use ufcmil::model::ModelConfig;
use ufcmil::train::{evaluate, TrainConfig, Trainer};

fn main() {
    let config = SynthConfig {
        samples: 200, feature_dim: 16, levels: 3, coarse_w: 4, coarse_h: 4,
        pos_fraction: 0.3, lesion_size: 2, noise_sigma: 1.0, seed: 2024,
        split_fractions: (0.6, 0.2, 0.2),
    };
    let all = generate(&config).unwrap();
    let train: Vec<_> = all.iter().filter(|(_, s)| s == "train").map(|(b, _)| b.clone()).collect();
    let test: Vec<_> = all.iter().filter(|(_, s)| s == "test").map(|(b, _)| b.clone()).collect();

    let model_cfg = ModelConfig::new(16, 3);
    let cfg = TrainConfig { epochs: 50, seed: 0, window: 4, learning_rate: 2e-3, ..TrainConfig::default() };
    let mut tr = Trainer::new(model_cfg.clone(), cfg).unwrap();
    tr.train(&train).unwrap();
    let evals = evaluate(&tr.params, &model_cfg, &test).unwrap();
    // crude lesion-strength proxy: count of positive instance labels at the
    // finest level (bigger/stronger lesions cover more children), plus the
    // max feature deviation from the per-dataset background.
    let mut rows: Vec<(f64, u8, usize, String)> = test.iter().zip(&evals).map(|(b, e)| {
        let fine_pos: usize = b.instance_labels.as_ref().unwrap()[2].iter().map(|&v| v as usize).sum();
        (e.final_p[1], b.label, fine_pos, b.sample_id.clone())
    }).collect();
    rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (score, label, fine_pos, id) in rows {
        println!("{id}: score {score:.4} label {label} fine_pos {fine_pos}");
    }
}
