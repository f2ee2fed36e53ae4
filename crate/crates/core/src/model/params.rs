//! Learnable parameters: construction, deterministic initialization, naming,
//! and tape binding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, NUM_CLASSES};
use crate::tensor::{Tape, Tensor};
use crate::util::mix_seed;

/// Projections of one (self- or cross-) attention block, each d×d, applied
/// as right-multipliers of row-feature matrices.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// Neighbor-aggregation parameters: gate matrices `a_t`, `a_s` (d×d, applied
/// to column features) and scoring vector `w` (d×1).
#[derive(Debug, Clone)]
pub struct TnamParams {
    pub w: Tensor,
    pub a_t: Tensor,
    pub a_s: Tensor,
}

/// Reduction head: linear d→hidden, ELU, dropout, linear hidden→C.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Everything one resolution learns. Cross-attention projections exist from
/// the second level on.
#[derive(Debug, Clone)]
pub struct LevelParams {
    pub cls: Tensor,
    pub attn: AttnParams,
    pub tnam: TnamParams,
    pub cross: Option<AttnParams>,
    pub head: HeadParams,
}

#[derive(Debug, Clone)]
pub struct UfcMilParams {
    pub levels: Vec<LevelParams>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::raw(shape, data)
}

impl UfcMilParams {
    /// Deterministic initialization: projections and gate weights uniform in
    /// ±1/√fan_in, class tokens and biases zero. Each tensor draws from its
    /// own derived stream, so values do not depend on construction order.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let d = config.feature_dim;
        let h = config.hidden;
        let bound_d = 1.0 / (d as f64).sqrt();
        let bound_h = 1.0 / (h as f64).sqrt();
        let mut stream = 0u64;
        let mut next = |shape: Vec<usize>, bound: f64| {
            stream += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x9a7a, stream]));
            uniform(&mut rng, shape, bound)
        };
        let attn = |d: usize, bound: f64, next: &mut dyn FnMut(Vec<usize>, f64) -> Tensor| AttnParams {
            wq: next(vec![d, d], bound),
            wk: next(vec![d, d], bound),
            wv: next(vec![d, d], bound),
            wo: next(vec![d, d], bound),
        };
        let levels = (0..config.levels)
            .map(|r| LevelParams {
                cls: Tensor::zeros(vec![1, d]),
                attn: attn(d, bound_d, &mut next),
                tnam: TnamParams {
                    w: next(vec![d, 1], bound_d),
                    a_t: next(vec![d, d], bound_d),
                    a_s: next(vec![d, d], bound_d),
                },
                cross: (r > 0).then(|| attn(d, bound_d, &mut next)),
                head: HeadParams {
                    w1: next(vec![d, h], bound_d),
                    b1: Tensor::zeros(vec![1, h]),
                    w2: next(vec![h, NUM_CLASSES], bound_h),
                    b2: Tensor::zeros(vec![1, NUM_CLASSES]),
                },
            })
            .collect();
        Self { levels }
    }

    /// Name/tensor pairs in a fixed order (the checkpoint and optimizer
    /// order).
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (r, level) in self.levels.iter().enumerate() {
            let p = |name: &str| format!("r{r}.{name}");
            out.push((p("cls"), &level.cls));
            out.push((p("attn.wq"), &level.attn.wq));
            out.push((p("attn.wk"), &level.attn.wk));
            out.push((p("attn.wv"), &level.attn.wv));
            out.push((p("attn.wo"), &level.attn.wo));
            out.push((p("tnam.w"), &level.tnam.w));
            out.push((p("tnam.a_t"), &level.tnam.a_t));
            out.push((p("tnam.a_s"), &level.tnam.a_s));
            if let Some(cross) = &level.cross {
                out.push((p("cross.wq"), &cross.wq));
                out.push((p("cross.wk"), &cross.wk));
                out.push((p("cross.wv"), &cross.wv));
                out.push((p("cross.wo"), &cross.wo));
            }
            out.push((p("head.w1"), &level.head.w1));
            out.push((p("head.b1"), &level.head.b1));
            out.push((p("head.w2"), &level.head.w2));
            out.push((p("head.b2"), &level.head.b2));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (r, level) in self.levels.iter_mut().enumerate() {
            let p = |name: &str| format!("r{r}.{name}");
            out.push((p("cls"), &mut level.cls));
            out.push((p("attn.wq"), &mut level.attn.wq));
            out.push((p("attn.wk"), &mut level.attn.wk));
            out.push((p("attn.wv"), &mut level.attn.wv));
            out.push((p("attn.wo"), &mut level.attn.wo));
            out.push((p("tnam.w"), &mut level.tnam.w));
            out.push((p("tnam.a_t"), &mut level.tnam.a_t));
            out.push((p("tnam.a_s"), &mut level.tnam.a_s));
            if let Some(cross) = &mut level.cross {
                out.push((p("cross.wq"), &mut cross.wq));
                out.push((p("cross.wk"), &mut cross.wk));
                out.push((p("cross.wv"), &mut cross.wv));
                out.push((p("cross.wo"), &mut cross.wo));
            }
            out.push((p("head.w1"), &mut level.head.w1));
            out.push((p("head.b1"), &mut level.head.b1));
            out.push((p("head.w2"), &mut level.head.w2));
            out.push((p("head.b2"), &mut level.head.b2));
        }
        out
    }

    /// Mirrors the structure with every tensor mapped through `f` (used for
    /// tape binding).
    fn map(&self, f: &mut impl FnMut(&Tensor) -> Tensor) -> Self {
        let map_attn = |a: &AttnParams, f: &mut dyn FnMut(&Tensor) -> Tensor| AttnParams {
            wq: f(&a.wq),
            wk: f(&a.wk),
            wv: f(&a.wv),
            wo: f(&a.wo),
        };
        Self {
            levels: self
                .levels
                .iter()
                .map(|level| LevelParams {
                    cls: f(&level.cls),
                    attn: map_attn(&level.attn, f),
                    tnam: TnamParams {
                        w: f(&level.tnam.w),
                        a_t: f(&level.tnam.a_t),
                        a_s: f(&level.tnam.a_s),
                    },
                    cross: level.cross.as_ref().map(|c| map_attn(c, f)),
                    head: HeadParams {
                        w1: f(&level.head.w1),
                        b1: f(&level.head.b1),
                        w2: f(&level.head.w2),
                        b2: f(&level.head.b2),
                    },
                })
                .collect(),
        }
    }

    /// Registers every parameter as a leaf on `tape` (so gradients
    /// accumulate for it) and returns the bound mirror. With
    /// `trainable = false` the mirror stays off-tape and a forward pass
    /// records nothing.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Self {
        let mut f = |t: &Tensor| if trainable { tape.watch(t) } else { t.detached() };
        self.map(&mut f)
    }

    /// Checks that shapes line up with `config` (used when loading
    /// checkpoints).
    pub fn conforms(&self, config: &ModelConfig) -> bool {
        let d = config.feature_dim;
        let h = config.hidden;
        self.levels.len() == config.levels
            && self.levels.iter().enumerate().all(|(r, level)| {
                level.cls.shape() == [1, d]
                    && level.attn.wq.shape() == [d, d]
                    && level.tnam.w.shape() == [d, 1]
                    && level.tnam.a_t.shape() == [d, d]
                    && level.cross.is_some() == (r > 0)
                    && level.head.w1.shape() == [d, h]
                    && level.head.b1.shape() == [1, h]
                    && level.head.w2.shape() == [h, NUM_CLASSES]
                    && level.head.b2.shape() == [1, NUM_CLASSES]
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let config = ModelConfig::new(8, 2);
        let a = UfcMilParams::init(&config, 7);
        let b = UfcMilParams::init(&config, 7);
        let c = UfcMilParams::init(&config, 8);
        for ((na, ta), (nb, tb)) in a.named().iter().zip(b.named()) {
            assert_eq!(*na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let different = a
            .named()
            .iter()
            .zip(c.named())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(different);
    }

    #[test]
    fn cls_and_biases_start_at_zero_projections_bounded() {
        let config = ModelConfig::new(16, 3);
        let params = UfcMilParams::init(&config, 0);
        let bound = 1.0 / 4.0;
        for (name, t) in params.named() {
            if name.ends_with("cls") || name.contains(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            } else if !name.contains("head.w2") {
                assert!(
                    t.data().iter().all(|&v| v.abs() < bound),
                    "{name} exceeds ±1/√d"
                );
            }
        }
    }

    #[test]
    fn named_order_matches_between_variants() {
        let config = ModelConfig::new(4, 2);
        let mut params = UfcMilParams::init(&config, 1);
        let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
        let names_mut: Vec<String> = params.named_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"r1.cross.wq".to_string()));
        assert!(!names.contains(&"r0.cross.wq".to_string()));
        assert!(params.conforms(&config));
    }
}
