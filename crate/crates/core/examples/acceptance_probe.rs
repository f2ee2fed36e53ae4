//! Scratch experiment for tuning acceptance-suite parameters.

use std::time::Instant;
use ufcmil::bagdata::{generate, GridIndex, MultiResBag, SynthConfig};
use ufcmil::metrics::{accuracy, auc, ece};
use ufcmil::model::ModelConfig;
use ufcmil::train::{evaluate, to_predictions, TrainConfig, Trainer};

fn boundary_vs_background(test: &[MultiResBag], evals: &[ufcmil::train::BagEval]) -> (f64, f64) {
    let grid = GridIndex::for_level(4, 4, 0);
    let (mut b_sum, mut b_n, mut g_sum, mut g_n) = (0.0, 0usize, 0.0, 0usize);
    for (bag, ev) in test.iter().zip(evals) {
        if bag.label != 1 {
            continue;
        }
        let labels = &bag.instance_labels.as_ref().unwrap()[0];
        for n in 0..labels.len() {
            if labels[n] != 0 {
                continue;
            }
            let boundary = grid.neighbors(n).unwrap().iter().any(|&m| labels[m] == 1);
            let h = ev.level_entropy[0][n];
            if boundary {
                b_sum += h;
                b_n += 1;
            } else {
                g_sum += h;
                g_n += 1;
            }
        }
    }
    (b_sum / b_n as f64, g_sum / g_n as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data_seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2024);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let window: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);

    let config = SynthConfig {
        samples: 200,
        feature_dim: 16,
        levels: 3,
        coarse_w: 4,
        coarse_h: 4,
        pos_fraction: 0.3,
        lesion_size: 2,
        noise_sigma: 1.0,
        seed: data_seed,
        split_fractions: (0.6, 0.2, 0.2),
    };
    let all = generate(&config).unwrap();
    let train: Vec<_> = all.iter().filter(|(_, s)| s == "train").map(|(b, _)| b.clone()).collect();
    let test: Vec<_> = all.iter().filter(|(_, s)| s == "test").map(|(b, _)| b.clone()).collect();
    let test_pos = test.iter().filter(|b| b.label == 1).count();
    eprintln!(
        "data_seed={data_seed} lr={lr} window={window}: {} train / {} test ({} pos)",
        train.len(), test.len(), test_pos
    );

    let model_cfg = ModelConfig::new(16, 3);
    let t0 = Instant::now();
    let mut reductions = Vec::new();
    for seed in 0..5u64 {
        let base_cfg = TrainConfig {
            epochs: 50,
            seed,
            window,
            learning_rate: lr,
            ..TrainConfig::default()
        };
        let mut base = Trainer::new(model_cfg.clone(), base_cfg).unwrap();
        base.run_epochs(&train, 40).unwrap();
        let mut plain = base.clone();
        plain.train(&train).unwrap();
        let mut srls = base.clone();
        srls.train_cfg.srls = true;
        srls.train_cfg.record_epoch = Some(40);
        srls.train(&train).unwrap();

        let ev_plain = evaluate(&plain.params, &model_cfg, &test).unwrap();
        let ev_srls = evaluate(&srls.params, &model_cfg, &test).unwrap();
        let p_plain = to_predictions(&ev_plain);
        let p_srls = to_predictions(&ev_srls);
        let (acc_p, auc_p, ece_p) = (
            accuracy(&p_plain).unwrap(),
            auc(&p_plain).unwrap(),
            ece(&p_plain, 15).unwrap(),
        );
        let ece_s = ece(&p_srls, 15).unwrap();
        let acc_s = accuracy(&p_srls).unwrap();
        let conf_p: f64 =
            p_plain.iter().map(|p| p.confidence()).sum::<f64>() / p_plain.len() as f64;
        let (bh, gh) = boundary_vs_background(&test, &ev_plain);
        let red = (ece_p - ece_s) / ece_p;
        reductions.push((ece_p, ece_s, red));
        eprintln!(
            "seed {seed}: plain acc {acc_p:.3} auc {auc_p:.3} conf {conf_p:.3} ece {ece_p:.4} | srls acc {acc_s:.3} ece {ece_s:.4} (red {:.1}%) | H bnd {bh:.3} vs bg {gh:.3}",
            red * 100.0
        );
    }
    let mean_p: f64 = reductions.iter().map(|r| r.0).sum::<f64>() / 5.0;
    let mean_s: f64 = reductions.iter().map(|r| r.1).sum::<f64>() / 5.0;
    eprintln!(
        "mean plain ece {mean_p:.4}, mean srls ece {mean_s:.4}, mean relative reduction {:.1}% | total {:?}",
        (mean_p - mean_s) / mean_p * 100.0,
        t0.elapsed()
    );
}
