//! Forward pass: blocks and the full per-bag pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AttnParams, HeadParams, ModelConfig, TnamParams, UfcMilParams};
use crate::bagdata::{GridIndex, MultiResBag};
use crate::tensor::{Result, Tape, Tensor, TensorError};
use crate::util::mix_seed;

const LN_2: f64 = std::f64::consts::LN_2;

/// How one forward pass behaves.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode {
    /// Dropout active, Gumbel noise in the masks, hard masks with
    /// straight-through gradients. The key triple seeds every stochastic
    /// draw, so a pass is reproducible.
    Train { seed: u64, epoch: u64, sample: u64 },
    /// Deterministic: no dropout, noise-free masks (unless the config asks
    /// for sampled eval masks), hard masks.
    Eval { sample: u64 },
    /// Deterministic and differentiable end to end: no dropout, g = 0, and
    /// soft (relaxed) masks so finite differences of the loss match the
    /// analytic gradient.
    GradCheck,
}

/// Hard masks binarize via straight-through; soft masks feed the relaxed
/// probability to fusion directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Hard,
    Soft,
}

/// Per-forward stochastic streams: one derived generator per draw site, so
/// parallel samples and re-runs agree bit for bit.
struct NoiseStreams {
    key: u64,
    next: u64,
}

impl NoiseStreams {
    fn rng(&mut self) -> ChaCha8Rng {
        let stream = self.next;
        self.next += 1;
        ChaCha8Rng::seed_from_u64(mix_seed(&[self.key, stream]))
    }
}

struct PassCtx {
    dropout: bool,
    noise: Option<NoiseStreams>,
    mask: MaskKind,
}

impl ForwardMode {
    fn resolve(self, config: &ModelConfig) -> PassCtx {
        match self {
            ForwardMode::Train { seed, epoch, sample } => PassCtx {
                dropout: true,
                noise: Some(NoiseStreams {
                    key: mix_seed(&[seed, epoch, sample]),
                    next: 0,
                }),
                mask: MaskKind::Hard,
            },
            ForwardMode::Eval { sample } => PassCtx {
                dropout: false,
                noise: (!config.eval_deterministic_mask).then_some(NoiseStreams {
                    key: mix_seed(&[0xe7a1, sample]),
                    next: 0,
                }),
                mask: MaskKind::Hard,
            },
            ForwardMode::GradCheck => PassCtx {
                dropout: false,
                noise: None,
                mask: MaskKind::Soft,
            },
        }
    }
}

/// Output of one resolution level.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    /// Aggregated bag prediction from the class token, 1×C.
    pub p_agg: Tensor,
    /// Per-instance predictions, n×C.
    pub p_inst: Tensor,
    /// Per-instance entropy in bits, n×1.
    pub entropy: Tensor,
    /// Binary mask (soft in [`MaskKind::Soft`] passes), n×1.
    pub mask: Tensor,
    /// Relaxed mask probability, n×1.
    pub soft_mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub levels: Vec<LevelOutput>,
    /// Mean of the per-resolution aggregated predictions, 1×C.
    pub final_p: Tensor,
}

// ── Attention ──────────────────────────────────────────────────────────

/// Column block `[start, end)` via the transpose/slice composition.
fn slice_cols(tape: &mut Tape, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let xt = tape.transpose(x)?;
    let block = tape.slice_rows(&xt, start, end)?;
    tape.transpose(&block)
}

fn concat_cols(tape: &mut Tape, blocks: &[Tensor]) -> Result<Tensor> {
    let mut acc = tape.transpose(&blocks[0])?;
    for b in &blocks[1..] {
        let bt = tape.transpose(b)?;
        acc = tape.concat_rows(&acc, &bt)?;
    }
    tape.transpose(&acc)
}

/// Scaled dot-product attention core: projections, `softmax(QKᵀ/√d_h)V` per
/// head, and the output projection. No residual.
fn attention_core(
    tape: &mut Tape,
    q_src: &Tensor,
    kv_src: &Tensor,
    params: &AttnParams,
    heads: usize,
) -> Result<Tensor> {
    let d = q_src.cols();
    if kv_src.cols() != d {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: q_src.shape().to_vec(),
            rhs: kv_src.shape().to_vec(),
        });
    }
    let q = tape.matmul(q_src, &params.wq)?;
    let k = tape.matmul(kv_src, &params.wk)?;
    let v = tape.matmul(kv_src, &params.wv)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (
                slice_cols(tape, &q, h * dh, (h + 1) * dh)?,
                slice_cols(tape, &k, h * dh, (h + 1) * dh)?,
                slice_cols(tape, &v, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = tape.transpose(&kh)?;
        let scores = tape.matmul(&qh, &kt)?;
        let scaled = tape.scale(&scores, scale)?;
        let attn = tape.softmax_rows(&scaled)?;
        head_outputs.push(tape.matmul(&attn, &vh)?);
    }
    let merged = if heads == 1 {
        head_outputs.pop().unwrap()
    } else {
        concat_cols(tape, &head_outputs)?
    };
    tape.matmul(&merged, &params.wo)
}

/// Self-attention block: prepends the class token as row 0, attends, and
/// adds the residual. Output is (n+1)×d.
pub fn attention_block(
    tape: &mut Tape,
    patches: &Tensor,
    cls: &Tensor,
    params: &AttnParams,
    heads: usize,
) -> Result<Tensor> {
    let x = tape.concat_rows(cls, patches)?;
    let attended = attention_core(tape, &x, &x, params, heads)?;
    tape.add(&x, &attended)
}

/// Cross-attention: queries (and the residual) come from `queries`, keys and
/// values from `kv`.
pub fn cross_attention(
    tape: &mut Tape,
    queries: &Tensor,
    kv: &Tensor,
    params: &AttnParams,
    heads: usize,
) -> Result<Tensor> {
    if queries.rows() != kv.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_attention",
            lhs: queries.shape().to_vec(),
            rhs: kv.shape().to_vec(),
        });
    }
    let attended = attention_core(tape, queries, kv, params, heads)?;
    tape.add(queries, &attended)
}

// ── Topological neighbor attention ─────────────────────────────────────

/// Gate score for one patch feature row: `wᵀ(tanh(A_t z) ⊙ σ(A_s z))`,
/// evaluated directly on values.
fn tnam_score(tnam: &TnamParams, z: &[f64]) -> f64 {
    let d = z.len();
    let mut score = 0.0;
    for i in 0..d {
        let mut t = 0.0;
        let mut s = 0.0;
        for (j, &zj) in z.iter().enumerate() {
            t += tnam.a_t.data()[i * d + j] * zj;
            s += tnam.a_s.data()[i * d + j] * zj;
        }
        score += tnam.w.data()[i] * t.tanh() * (1.0 / (1.0 + (-s).exp()));
    }
    score
}

/// Aggregation weights over a patch's neighborhood: softmax of the gated
/// scores across `neighborhood`, the patch itself excluded. An empty
/// neighborhood yields an empty weight set.
pub fn tnam_weights(patches: &Tensor, tnam: &TnamParams, neighborhood: &[usize]) -> Vec<f64> {
    if neighborhood.is_empty() {
        return Vec::new();
    }
    let d = patches.cols();
    let scores: Vec<f64> = neighborhood
        .iter()
        .map(|&k| tnam_score(tnam, &patches.data()[k * d..(k + 1) * d]))
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&e| (e - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Neighbor aggregation with a residual sum. Row 0 (the class token) is
/// excluded and passes through unchanged; patch row n gains the
/// weight-averaged features of its grid neighbors. Patches with no
/// neighbors receive no update.
pub fn tnam_aggregate(
    tape: &mut Tape,
    x: &Tensor,
    grid: &GridIndex,
    tnam: &TnamParams,
) -> Result<Tensor> {
    let n = grid.n();
    if x.rows() != n + 1 {
        return Err(TensorError::ShapeMismatch {
            op: "tnam_aggregate",
            lhs: x.shape().to_vec(),
            rhs: vec![n + 1, x.cols()],
        });
    }
    let cls = tape.slice_rows(x, 0, 1)?;
    let patches = tape.slice_rows(x, 1, n + 1)?;

    // Scores for all patches at once: gate = tanh(Z AᵀT) ⊙ σ(Z Aᵀs), e = gate·w.
    let a_t_t = tape.transpose(&tnam.a_t)?;
    let a_s_t = tape.transpose(&tnam.a_s)?;
    let t_part = tape.matmul(&patches, &a_t_t)?;
    let s_part = tape.matmul(&patches, &a_s_t)?;
    let gate_t = tape.tanh(&t_part)?;
    let gate_s = tape.sigmoid(&s_part)?;
    let gate = tape.mul(&gate_t, &gate_s)?;
    let scores = tape.matmul(&gate, &tnam.w)?; // n×1

    // Stabilized exp; the shift cancels in the normalized weights.
    let max = tape.max_axis(&scores, 0)?;
    let shifted = tape.sub(&scores, &max)?;
    let u = tape.exp(&shifted)?;

    let (adj, isolated) = grid.adjacency();
    let adj = Tensor::raw(vec![n, n], adj);
    let isolated = Tensor::raw(vec![n, 1], isolated);

    // t_n = Σ_{k ∈ N(n)} u_k z_k / Σ_{k ∈ N(n)} u_k, with isolated rows
    // pinned to zero (their numerator row is zero; the +1 avoids 0/0).
    let weighted = tape.scale_rows(&patches, &u)?;
    let numerator = tape.matmul(&adj, &weighted)?;
    let denom = tape.matmul(&adj, &u)?;
    let denom_safe = tape.add(&denom, &isolated)?;
    let ones = Tensor::full(vec![n, 1], 1.0);
    let inv = tape.div(&ones, &denom_safe)?;
    let aggregated = tape.scale_rows(&numerator, &inv)?;

    let residual = tape.add(&patches, &aggregated)?;
    tape.concat_rows(&cls, &residual)
}

// ── Entropy and masking ────────────────────────────────────────────────

/// Per-row entropy in bits of an n×C matrix of probability rows, clamped to
/// `[1e-6, 1 - 1e-6]` before the logarithm. Rejects rows that do not sum
/// to 1 within 1e-4.
pub fn entropy_map(tape: &mut Tape, p_inst: &Tensor) -> Result<Tensor> {
    let (n, c) = (p_inst.rows(), p_inst.cols());
    for i in 0..n {
        let sum: f64 = (0..c).map(|j| p_inst.at(i, j)).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(TensorError::InvalidArg {
                op: "entropy_map",
                msg: format!("row {i} sums to {sum}, not a distribution"),
            });
        }
    }
    let clamped = tape.clamp(p_inst, 1e-6, 1.0 - 1e-6)?;
    let logs = tape.log(&clamped)?;
    let plogp = tape.mul(&clamped, &logs)?;
    let row_sum = tape.sum_axis(&plogp, 1)?;
    tape.scale(&row_sum, -1.0 / LN_2)
}

/// Relaxed binary mask over entropies.
///
/// The relaxed probability is
/// `q = σ(((log H + g₁) - (log(1-H) + g₀)) / τ)` with `g ~ Gumbel(0, scale)`
/// (zero when `rng` is `None`). Hard masks binarize at `q > threshold` with
/// straight-through gradients; soft masks return `q` itself. With g = 0 and
/// τ = 1 the relaxation collapses to `q = H`, so the hard mask is exactly
/// `H > threshold`.
pub fn gumbel_mask(
    tape: &mut Tape,
    entropy: &Tensor,
    config: &ModelConfig,
    kind: MaskKind,
    mut rng: Option<ChaCha8Rng>,
) -> Result<(Tensor, Tensor)> {
    let n = entropy.rows();
    let h = tape.clamp(entropy, 1e-6, 1.0 - 1e-6)?;
    let log_h = tape.log(&h)?;
    let neg = tape.scale(&h, -1.0)?;
    let one_minus = tape.add_scalar(&neg, 1.0)?;
    let log_not = tape.log(&one_minus)?;

    let (g1, g0) = match rng.as_mut() {
        Some(rng) => {
            let draw = |rng: &mut ChaCha8Rng| -> f64 {
                let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
                -config.gumbel_scale * (-u.ln()).ln()
            };
            let mut g1 = Vec::with_capacity(n);
            let mut g0 = Vec::with_capacity(n);
            for _ in 0..n {
                g0.push(draw(rng));
                g1.push(draw(rng));
            }
            (Tensor::raw(vec![n, 1], g1), Tensor::raw(vec![n, 1], g0))
        }
        None => (Tensor::zeros(vec![n, 1]), Tensor::zeros(vec![n, 1])),
    };

    let on_logit = tape.add(&log_h, &g1)?;
    let off_logit = tape.add(&log_not, &g0)?;
    let gap = tape.sub(&on_logit, &off_logit)?;
    let scaled = tape.scale(&gap, 1.0 / config.tau)?;
    let q = tape.sigmoid(&scaled)?;
    let mask = match kind {
        MaskKind::Hard => tape.straight_through_mask(&q, config.mask_threshold)?,
        MaskKind::Soft => q.clone(),
    };
    Ok((mask, q))
}

// ── Fusion and head ────────────────────────────────────────────────────

/// Uncertainty fusion before cross-attention. For fine patch row `j` with
/// parent `n = ⌊j/k⌋`:
///
/// `fused_j = (1 - m_n) · z̃_j + m_n · z_n`
///
/// where `z_n` is the parent's raw (unattended) coarse feature. The class
/// token row is detached first and re-attached unchanged.
pub fn fuse_features(
    tape: &mut Tape,
    mask: &Tensor,
    coarse_raw: &Tensor,
    fine_attended: &Tensor,
    k: usize,
) -> Result<Tensor> {
    let n_coarse = mask.rows();
    let n_fine = fine_attended.rows() - 1;
    if n_fine != n_coarse * k || coarse_raw.rows() != n_coarse {
        return Err(TensorError::ShapeMismatch {
            op: "fuse_features",
            lhs: vec![n_coarse, k],
            rhs: vec![n_fine],
        });
    }
    let cls = tape.slice_rows(fine_attended, 0, 1)?;
    let fine = tape.slice_rows(fine_attended, 1, n_fine + 1)?;
    let m_rep = tape.repeat_rows(mask, k)?;
    let neg = tape.scale(&m_rep, -1.0)?;
    let keep = tape.add_scalar(&neg, 1.0)?;
    let coarse_rep = tape.repeat_rows(coarse_raw, k)?;
    let kept = tape.scale_rows(&fine, &keep)?;
    let injected = tape.scale_rows(&coarse_rep, &m_rep)?;
    let fused = tape.add(&kept, &injected)?;
    tape.concat_rows(&cls, &fused)
}

/// Shared reduction head: linear → ELU → dropout (train only) → linear →
/// row softmax. Maps any number of rows; the caller splits the class-token
/// row from the patch rows.
pub fn reduce_head(
    tape: &mut Tape,
    features: &Tensor,
    head: &HeadParams,
    dropout_p: f64,
    rng: Option<ChaCha8Rng>,
) -> Result<Tensor> {
    let rows = features.rows();
    let z1 = tape.matmul(features, &head.w1)?;
    let b1 = tape.repeat_rows(&head.b1, rows)?;
    let h1 = tape.add(&z1, &b1)?;
    let a1 = tape.elu(&h1)?;
    let a1 = match rng {
        Some(mut rng) => tape.dropout(&a1, dropout_p, &mut rng, true)?,
        None => a1,
    };
    let z2 = tape.matmul(&a1, &head.w2)?;
    let b2 = tape.repeat_rows(&head.b2, rows)?;
    let logits = tape.add(&z2, &b2)?;
    tape.softmax_rows(&logits)
}

// ── Full pipeline ──────────────────────────────────────────────────────

/// Forward over pre-built per-level feature tensors (coarsest first).
/// `features[r]` must be n_r×d; `grids[r]` the matching index. Parameters
/// must already be bound to `tape` if gradients are wanted.
pub fn forward_features(
    tape: &mut Tape,
    features: &[Tensor],
    grids: &[GridIndex],
    params: &UfcMilParams,
    config: &ModelConfig,
    mode: ForwardMode,
) -> Result<ForwardOutput> {
    config.validate()?;
    if features.len() != config.levels || params.levels.len() != config.levels {
        return Err(TensorError::InvalidArg {
            op: "forward",
            msg: format!(
                "{} feature levels for a {}-level model with {} parameter levels",
                features.len(),
                config.levels,
                params.levels.len()
            ),
        });
    }
    let mut ctx = mode.resolve(config);
    let mut levels: Vec<LevelOutput> = Vec::with_capacity(config.levels);
    let mut prev_mask: Option<Tensor> = None;

    for r in 0..config.levels {
        let level_params = &params.levels[r];
        let z_raw = &features[r];
        let n = grids[r].n();
        if z_raw.rows() != n || z_raw.cols() != config.feature_dim {
            return Err(TensorError::InvalidArg {
                op: "forward",
                msg: format!(
                    "level {r}: features {:?} do not match grid of {n} patches × d={}",
                    z_raw.shape(),
                    config.feature_dim
                ),
            });
        }

        let attended = attention_block(
            tape,
            z_raw,
            &level_params.cls,
            &level_params.attn,
            config.attention_heads,
        )?;

        let pre_tnam = match (r, &prev_mask) {
            (0, _) => attended,
            (_, Some(mask)) => {
                let cross = level_params.cross.as_ref().expect("cross params for r > 0");
                let fused = fuse_features(tape, mask, &features[r - 1], &attended, 4)?;
                // The uncertainty-gated mix is what gets attended over:
                // queries (and the residual) come from the attended fine
                // features, keys and values from the fused ones. This keeps
                // the class-token row — and with it the aggregated
                // prediction — downstream of the mask.
                cross_attention(tape, &attended, &fused, cross, config.attention_heads)?
            }
            (_, None) => unreachable!("mask recorded for every level"),
        };

        let aggregated = tnam_aggregate(tape, &pre_tnam, &grids[r], &level_params.tnam)?;

        let head_rng = (ctx.dropout).then(|| {
            ctx.noise
                .as_mut()
                .expect("train mode carries noise streams")
                .rng()
        });
        let probs = reduce_head(
            tape,
            &aggregated,
            &level_params.head,
            config.dropout_p,
            head_rng,
        )?;
        let p_agg = tape.slice_rows(&probs, 0, 1)?;
        let p_inst = tape.slice_rows(&probs, 1, n + 1)?;

        let entropy = entropy_map(tape, &p_inst)?;
        let mask_rng = ctx.noise.as_mut().map(|s| s.rng());
        let (mask, soft_mask) = gumbel_mask(tape, &entropy, config, ctx.mask, mask_rng)?;

        prev_mask = Some(mask.clone());
        levels.push(LevelOutput {
            p_agg,
            p_inst,
            entropy,
            mask,
            soft_mask,
        });
    }

    let mut sum = levels[0].p_agg.clone();
    for level in &levels[1..] {
        sum = tape.add(&sum, &level.p_agg)?;
    }
    let final_p = tape.scale(&sum, 1.0 / config.levels as f64)?;
    Ok(ForwardOutput { levels, final_p })
}

/// Forward over a bag: builds constant feature tensors and grid indices,
/// then runs [`forward_features`].
pub fn forward_bag(
    tape: &mut Tape,
    bag: &MultiResBag,
    params: &UfcMilParams,
    config: &ModelConfig,
    mode: ForwardMode,
) -> Result<ForwardOutput> {
    let features: Vec<Tensor> = bag
        .levels
        .iter()
        .map(|level| {
            Tensor::from_f32(
                vec![level.n(), bag.feature_dim],
                &level.features,
            )
        })
        .collect::<Result<_>>()?;
    let grids: Vec<GridIndex> = (0..bag.levels.len()).map(|r| bag.grid_index(r)).collect();
    forward_features(tape, &features, &grids, params, config, mode)
}
