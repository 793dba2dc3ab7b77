//! Windowed multi-head self-attention and the wavelet-attention blocks.
//!
//! A block never attends on the full token grid. It first peels the input
//! down to its low-frequency wavelet approximation (`m` analysis levels),
//! runs window attention there, and synthesizes the attended map back to the
//! input resolution before the residual add. With `m = 0` the wavelet
//! stages vanish and the block is an ordinary pre-LN transformer block.
//!
//! All functions build onto a [`Tape`], so the same code path serves
//! training, evaluation, and gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::tensor::Scalar;
use crate::wavelet::WaveletFilter;

/// Epsilon used by every layer norm in the network.
pub const LN_EPS: f64 = 1e-5;

/// How an attended low-frequency map is brought back to the block's input
/// extent: zero-detail wavelet synthesis (the default) or plain
/// nearest-neighbour repetition (ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Wavelet,
    Nearest,
}

/// Shape of one attention application: head count, feature width, and the
/// cubic window edge measured in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub feature_dim: usize,
    pub window: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.feature_dim == 0 || self.window == 0 {
            return Err(CoreError::Config(format!(
                "attention config fields must be positive, got {self:?}"
            )));
        }
        if self.feature_dim % self.num_heads != 0 {
            return Err(CoreError::Config(format!(
                "feature_dim {} not divisible by {} heads",
                self.feature_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Tape handles for the parameters of one wavelet-attention block. In the
/// multi-level variant the same instance is reused at every decomposition
/// level, which is what keeps the two variants' parameter counts equal.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_qkv: Var,
    pub b_qkv: Var,
    pub w_proj: Var,
    pub b_proj: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

/// Layer norm over the channel axis of a (C, d, h, w) map, one token per
/// voxel.
pub fn layer_norm_map<T: Scalar>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let (_, d, h, w) = tape.value(x).dims4()?;
    let t = tape.to_tokens(x, 1)?;
    let n = tape.layer_norm(t, gamma, beta, LN_EPS)?;
    tape.from_tokens(n, 1, (d, h, w))
}

/// Multi-head self-attention over non-overlapping cubic windows of a
/// (C, d, h, w) map, including the qkv and output projections. Normalization
/// is the caller's job.
pub fn window_msa<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: &BlockParams,
    cfg: &AttentionConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (c, d, h, w) = tape.value(x).dims4()?;
    if c != cfg.feature_dim {
        return Err(CoreError::Shape(format!(
            "map has {c} channels but attention expects {}",
            cfg.feature_dim
        )));
    }
    let t = tape.to_tokens(x, cfg.window)?;
    let qkv = tape.linear(t, params.w_qkv, params.b_qkv)?;
    let attended = tape.attention_core(qkv, cfg.num_heads, cfg.window.pow(3))?;
    let projected = tape.linear(attended, params.w_proj, params.b_proj)?;
    tape.from_tokens(projected, cfg.window, (d, h, w))
}

/// Two affine maps with a GELU between them, applied per token of a
/// (C, d, h, w) map.
pub fn mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &BlockParams) -> Result<Var> {
    let (_, d, h, w) = tape.value(x).dims4()?;
    let t = tape.to_tokens(x, 1)?;
    let hidden = tape.linear(t, params.mlp_w1, params.mlp_b1)?;
    let act = tape.gelu(hidden);
    let out = tape.linear(act, params.mlp_w2, params.mlp_b2)?;
    tape.from_tokens(out, 1, (d, h, w))
}

/// Seven detail-band handles at half the extent of the map they came from,
/// ordered by sub-band index (LLH .. HHH).
pub type DetailVars = [Var; 7];

/// Runs `m` analysis levels on the tape and returns each level's
/// approximation (coarsest last) plus the level-1 detail bands.
fn decompose<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    m: usize,
    filter: &WaveletFilter,
) -> Result<(Vec<Var>, DetailVars)> {
    let mut approximations = Vec::with_capacity(m);
    let mut finest: Option<DetailVars> = None;
    let mut cur = z;
    for level in 0..m {
        let s = tape.dwt_axis(cur, 3, filter)?;
        let s = tape.dwt_axis(s, 2, filter)?;
        let s = tape.dwt_axis(s, 1, filter)?;
        if level == 0 {
            let mut bands = [0 as Var; 7];
            for (b, slot) in bands.iter_mut().enumerate() {
                *slot = tape.extract_octant(s, b + 1)?;
            }
            finest = Some(bands);
        }
        cur = tape.extract_octant(s, 0)?;
        approximations.push(cur);
    }
    Ok((approximations, finest.expect("m >= 1")))
}

/// Synthesizes a level-`levels` approximation back to full extent with all
/// detail bands zero, or repeats voxels when the nearest mode is selected.
fn lf_upsample_var<T: Scalar>(
    tape: &mut Tape<T>,
    lf: Var,
    levels: usize,
    filter: &WaveletFilter,
    mode: UpsampleMode,
) -> Result<Var> {
    if mode == UpsampleMode::Nearest {
        return tape.nearest_up(lf, levels);
    }
    let mut cur = lf;
    for _ in 0..levels {
        let shape = tape.value(cur).shape().to_vec();
        let zero = tape.leaf(crate::tensor::Tensor::zeros(&shape));
        let stacked = tape.assemble_octants(&[cur, zero, zero, zero, zero, zero, zero, zero])?;
        let s = tape.idwt_axis(stacked, 1, filter)?;
        let s = tape.idwt_axis(s, 2, filter)?;
        cur = tape.idwt_axis(s, 3, filter)?;
    }
    Ok(cur)
}

fn finish_block<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    attended_up: Var,
    params: &BlockParams,
) -> Result<Var> {
    let mid = tape.add(attended_up, z)?;
    let normed = layer_norm_map(tape, mid, params.ln2_gamma, params.ln2_beta)?;
    let expanded = mlp(tape, normed, params)?;
    tape.add(expanded, mid)
}

/// Single-level wavelet-attention block: attention runs once, on the
/// level-`m` approximation. Returns the block output (same shape as `z`)
/// and, for `m >= 1`, the level-1 detail bands for the decoder.
pub fn wavelet_attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    m: usize,
    params: &BlockParams,
    cfg: &AttentionConfig,
    filter: &WaveletFilter,
    mode: UpsampleMode,
) -> Result<(Var, Option<DetailVars>)> {
    if m == 0 {
        let normed = layer_norm_map(tape, z, params.ln1_gamma, params.ln1_beta)?;
        let attended = window_msa(tape, normed, params, cfg)?;
        let out = finish_block(tape, z, attended, params)?;
        return Ok((out, None));
    }
    let (approximations, details) = decompose(tape, z, m, filter)?;
    let lf = *approximations.last().expect("m >= 1");
    let normed = layer_norm_map(tape, lf, params.ln1_gamma, params.ln1_beta)?;
    let attended = window_msa(tape, normed, params, cfg)?;
    let up = lf_upsample_var(tape, attended, m, filter, mode)?;
    let out = finish_block(tape, z, up, params)?;
    Ok((out, Some(details)))
}

/// Multi-level variant: attention runs on the approximation at every level
/// 1..m with the same parameters and window, each result is synthesized back
/// to full extent, and the maps are combined by arithmetic mean before the
/// residual add.
pub fn multilevel_attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    m: usize,
    params: &BlockParams,
    cfg: &AttentionConfig,
    filter: &WaveletFilter,
    mode: UpsampleMode,
) -> Result<(Var, DetailVars)> {
    if m == 0 {
        return Err(CoreError::Config(
            "multi-level attention needs at least one decomposition level".into(),
        ));
    }
    let (approximations, details) = decompose(tape, z, m, filter)?;
    let mut upsampled = Vec::with_capacity(m);
    for (idx, &approx) in approximations.iter().enumerate() {
        let normed = layer_norm_map(tape, approx, params.ln1_gamma, params.ln1_beta)?;
        let attended = window_msa(tape, normed, params, cfg)?;
        upsampled.push(lf_upsample_var(tape, attended, idx + 1, filter, mode)?);
    }
    let combined = tape.mean_many(&upsampled)?;
    let out = finish_block(tape, z, combined, params)?;
    Ok((out, details))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::Prng;
    use crate::tensor::Tensor;

    /// Fully random parameters (including the residual-path weights, which
    /// the real initializer would zero).
    fn random_params(tape: &mut Tape<f64>, dim: usize, r: usize, seed: u64) -> BlockParams {
        let mut rng = Prng::new(seed);
        let ln1_gamma = tape.leaf(Tensor::full(&[dim], 1.0));
        let ln2_gamma = tape.leaf(Tensor::full(&[dim], 1.0));
        let mut mat = |shape: &[usize]| -> Var {
            let t: Tensor<f64> = rng.randn(shape);
            tape.leaf(t.scale(0.3))
        };
        BlockParams {
            w_qkv: mat(&[3 * dim, dim]),
            b_qkv: mat(&[3 * dim]),
            w_proj: mat(&[dim, dim]),
            b_proj: mat(&[dim]),
            mlp_w1: mat(&[r * dim, dim]),
            mlp_b1: mat(&[r * dim]),
            mlp_w2: mat(&[dim, r * dim]),
            mlp_b2: mat(&[dim]),
            ln1_gamma,
            ln1_beta: mat(&[dim]),
            ln2_gamma,
            ln2_beta: mat(&[dim]),
        }
    }

    #[test]
    fn attention_config_validates_divisibility() {
        assert!(AttentionConfig {
            num_heads: 3,
            feature_dim: 48,
            window: 6
        }
        .validate()
        .is_ok());
        assert!(AttentionConfig {
            num_heads: 5,
            feature_dim: 48,
            window: 6
        }
        .validate()
        .is_err());
        assert!(AttentionConfig {
            num_heads: 0,
            feature_dim: 48,
            window: 6
        }
        .validate()
        .is_err());
    }

    #[test]
    fn single_token_attention_matches_direct_matrices() {
        let dim = 4;
        let mut tape = Tape::<f64>::new();
        let params = random_params(&mut tape, dim, 2, 7);
        let mut rng = Prng::new(8);
        let x: Tensor<f64> = rng.randn(&[dim, 1, 1, 1]);
        let xv = tape.leaf(x.clone());
        let cfg = AttentionConfig {
            num_heads: 2,
            feature_dim: dim,
            window: 1,
        };
        let out = window_msa(&mut tape, xv, &params, &cfg).unwrap();

        // one token: softmax over a single key is 1, so attention passes V
        // straight through and the output is w_proj·(V part of qkv) + b_proj
        let wq = tape.value(params.w_qkv).clone();
        let bq = tape.value(params.b_qkv).clone();
        let wp = tape.value(params.w_proj).clone();
        let bp = tape.value(params.b_proj).clone();
        let mut v = vec![0.0; dim];
        for o in 0..dim {
            let row = 2 * dim + o;
            let mut acc = bq.data()[row];
            for i in 0..dim {
                acc += wq.data()[row * dim + i] * x.data()[i];
            }
            v[o] = acc;
        }
        for o in 0..dim {
            let mut acc = bp.data()[o];
            for i in 0..dim {
                acc += wp.data()[o * dim + i] * v[i];
            }
            let got = tape.value(out).data()[o];
            assert!((got - acc).abs() <= 1e-12, "channel {o}: {got} vs {acc}");
        }
    }

    #[test]
    fn two_token_attention_matches_hand_computed_softmax_mix() {
        // Q = K = I, V rows (1,2) and (3,4), one head, head_dim 2
        let qkv = Tensor::<f64>::new(
            &[2, 6],
            vec![
                1.0, 0.0, 1.0, 0.0, 1.0, 2.0, //
                0.0, 1.0, 0.0, 1.0, 3.0, 4.0,
            ],
        )
        .unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(qkv);
        let out = tape.attention_core(v, 1, 2).unwrap();

        let s = 1.0 / 2.0f64.sqrt();
        let e = s.exp();
        // row 0 scores (s, 0), row 1 scores (0, s)
        let p00 = e / (e + 1.0);
        let p01 = 1.0 / (e + 1.0);
        let expect = [
            p00 * 1.0 + p01 * 3.0,
            p00 * 2.0 + p01 * 4.0,
            p01 * 1.0 + p00 * 3.0,
            p01 * 2.0 + p00 * 4.0,
        ];
        for (got, want) in tape.value(out).data().iter().zip(expect) {
            assert!((got - want).abs() <= 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn permuting_tokens_within_a_window_permutes_outputs() {
        let dim = 3;
        let mut tape = Tape::<f64>::new();
        let params = random_params(&mut tape, dim, 2, 21);
        let cfg = AttentionConfig {
            num_heads: 1,
            feature_dim: dim,
            window: 2,
        };
        let mut rng = Prng::new(22);
        let x: Tensor<f64> = rng.randn(&[dim, 2, 2, 2]);

        // reverse the 8 in-window token slots
        let perm = |slot: usize| 7 - slot;
        let permuted = Tensor::from_fn(&[dim, 2, 2, 2], |i| {
            let c = i / 8;
            let slot = i % 8;
            x.data()[c * 8 + perm(slot)]
        });

        let xv = tape.leaf(x);
        let pv = tape.leaf(permuted);
        let out = window_msa(&mut tape, xv, &params, &cfg).unwrap();
        let out_p = window_msa(&mut tape, pv, &params, &cfg).unwrap();
        let (od, pd) = (tape.value(out).data(), tape.value(out_p).data());
        for c in 0..dim {
            for slot in 0..8 {
                let a = pd[c * 8 + slot];
                let b = od[c * 8 + perm(slot)];
                assert!((a - b).abs() <= 1e-12, "slot {slot} channel {c}");
            }
        }
    }

    #[test]
    fn other_windows_never_influence_a_window() {
        let dim = 2;
        let mut tape = Tape::<f64>::new();
        let params = random_params(&mut tape, dim, 2, 31);
        let cfg = AttentionConfig {
            num_heads: 1,
            feature_dim: dim,
            window: 2,
        };
        let mut rng = Prng::new(32);
        let x: Tensor<f64> = rng.randn(&[dim, 4, 4, 4]);
        // perturb everything outside the window anchored at the origin
        let bumped = Tensor::from_fn(&[dim, 4, 4, 4], |i| {
            let pos = i % 64;
            let (zd, zh, zw) = (pos / 16, (pos / 4) % 4, pos % 4);
            if zd < 2 && zh < 2 && zw < 2 {
                x.data()[i]
            } else {
                x.data()[i] + 10.0
            }
        });
        let xv = tape.leaf(x);
        let bv = tape.leaf(bumped);
        let out = window_msa(&mut tape, xv, &params, &cfg).unwrap();
        let out_b = window_msa(&mut tape, bv, &params, &cfg).unwrap();
        let (od, bd) = (tape.value(out).data(), tape.value(out_b).data());
        for c in 0..dim {
            for zd in 0..2 {
                for zh in 0..2 {
                    for zw in 0..2 {
                        let i = c * 64 + (zd * 4 + zh) * 4 + zw;
                        assert_eq!(od[i], bd[i], "origin window must be untouched");
                    }
                }
            }
        }
        assert!(od != bd, "outside windows should differ");
    }

    #[test]
    fn m0_block_equals_a_plain_pre_ln_transformer_block() {
        let dim = 8;
        let mut tape = Tape::<f32>::new();
        let params = {
            // reuse the f64 generator values, cast to f32
            let mut t64 = Tape::<f64>::new();
            let p = random_params(&mut t64, dim, 4, 41);
            BlockParams {
                ln1_gamma: tape.leaf(t64.value(p.ln1_gamma).cast()),
                ln1_beta: tape.leaf(t64.value(p.ln1_beta).cast()),
                w_qkv: tape.leaf(t64.value(p.w_qkv).cast()),
                b_qkv: tape.leaf(t64.value(p.b_qkv).cast()),
                w_proj: tape.leaf(t64.value(p.w_proj).cast()),
                b_proj: tape.leaf(t64.value(p.b_proj).cast()),
                ln2_gamma: tape.leaf(t64.value(p.ln2_gamma).cast()),
                ln2_beta: tape.leaf(t64.value(p.ln2_beta).cast()),
                mlp_w1: tape.leaf(t64.value(p.mlp_w1).cast()),
                mlp_b1: tape.leaf(t64.value(p.mlp_b1).cast()),
                mlp_w2: tape.leaf(t64.value(p.mlp_w2).cast()),
                mlp_b2: tape.leaf(t64.value(p.mlp_b2).cast()),
            }
        };
        let cfg = AttentionConfig {
            num_heads: 2,
            feature_dim: dim,
            window: 4,
        };
        let mut rng = Prng::new(42);
        let x: Tensor<f32> = rng.randn(&[dim, 4, 4, 4]);
        let xv = tape.leaf(x.clone());
        let filter = WaveletFilter::haar();
        let (block_out, hf) = wavelet_attention_block(
            &mut tape,
            xv,
            0,
            &params,
            &cfg,
            &filter,
            UpsampleMode::Wavelet,
        )
        .unwrap();
        assert!(hf.is_none(), "m=0 has no detail bands");

        // the reference block, spelled out operator by operator
        let xv2 = tape.leaf(x);
        let t = tape.to_tokens(xv2, 1).unwrap();
        let n1 = tape
            .layer_norm(t, params.ln1_gamma, params.ln1_beta, LN_EPS)
            .unwrap();
        let n1m = tape.from_tokens(n1, 1, (4, 4, 4)).unwrap();
        let tw = tape.to_tokens(n1m, 4).unwrap();
        let qkv = tape.linear(tw, params.w_qkv, params.b_qkv).unwrap();
        let core = tape.attention_core(qkv, 2, 64).unwrap();
        let proj = tape.linear(core, params.w_proj, params.b_proj).unwrap();
        let attn_map = tape.from_tokens(proj, 4, (4, 4, 4)).unwrap();
        let mid = tape.add(attn_map, xv2).unwrap();
        let tm = tape.to_tokens(mid, 1).unwrap();
        let n2 = tape
            .layer_norm(tm, params.ln2_gamma, params.ln2_beta, LN_EPS)
            .unwrap();
        let h1 = tape.linear(n2, params.mlp_w1, params.mlp_b1).unwrap();
        let act = tape.gelu(h1);
        let h2 = tape.linear(act, params.mlp_w2, params.mlp_b2).unwrap();
        let ff_map = tape.from_tokens(h2, 1, (4, 4, 4)).unwrap();
        let ref_out = tape.add(ff_map, mid).unwrap();

        assert!(tape.value(block_out).max_abs_diff(tape.value(ref_out)) <= 1e-6);
    }

    #[test]
    fn zero_residual_weights_make_the_block_an_exact_identity() {
        let dim = 4;
        for (m, mode) in [
            (0usize, UpsampleMode::Wavelet),
            (1, UpsampleMode::Wavelet),
            (2, UpsampleMode::Wavelet),
            (1, UpsampleMode::Nearest),
            (2, UpsampleMode::Nearest),
        ] {
            let mut tape = Tape::<f64>::new();
            let mut params = random_params(&mut tape, dim, 2, 51);
            params.w_proj = tape.leaf(Tensor::zeros(&[dim, dim]));
            params.b_proj = tape.leaf(Tensor::zeros(&[dim]));
            params.mlp_w2 = tape.leaf(Tensor::zeros(&[dim, 2 * dim]));
            params.mlp_b2 = tape.leaf(Tensor::zeros(&[dim]));
            let cfg = AttentionConfig {
                num_heads: 2,
                feature_dim: dim,
                window: if m == 0 { 2 } else { 4 >> m },
            };
            let mut rng = Prng::new(52);
            let x: Tensor<f64> = rng.randn(&[dim, 4, 4, 4]);
            let xv = tape.leaf(x.clone());
            let filter = WaveletFilter::haar();
            let (out, _) =
                wavelet_attention_block(&mut tape, xv, m, &params, &cfg, &filter, mode).unwrap();
            assert_eq!(tape.value(out).data(), x.data(), "m={m} mode={mode:?}");
        }
    }

    #[test]
    fn block_preserves_shape_and_returns_half_extent_details() {
        let dim = 3;
        let filter = WaveletFilter::db2();
        for m in 0..=3usize {
            let mut tape = Tape::<f64>::new();
            let params = random_params(&mut tape, dim, 2, 61);
            let cfg = AttentionConfig {
                num_heads: 1,
                feature_dim: dim,
                window: 8 >> m,
            };
            let mut rng = Prng::new(62);
            let x: Tensor<f64> = rng.randn(&[dim, 8, 8, 8]);
            let xv = tape.leaf(x);
            let (out, hf) = wavelet_attention_block(
                &mut tape,
                xv,
                m,
                &params,
                &cfg,
                &filter,
                UpsampleMode::Wavelet,
            )
            .unwrap();
            assert_eq!(tape.value(out).shape(), &[dim, 8, 8, 8]);
            match hf {
                None => assert_eq!(m, 0),
                Some(bands) => {
                    for b in bands {
                        assert_eq!(tape.value(b).shape(), &[dim, 4, 4, 4]);
                    }
                }
            }
        }
    }

    #[test]
    fn multilevel_with_one_level_matches_the_single_level_block() {
        let dim = 4;
        let mut tape = Tape::<f64>::new();
        let params = random_params(&mut tape, dim, 2, 71);
        let cfg = AttentionConfig {
            num_heads: 2,
            feature_dim: dim,
            window: 4,
        };
        let mut rng = Prng::new(72);
        let x: Tensor<f64> = rng.randn(&[dim, 8, 8, 8]);
        let filter = WaveletFilter::haar();
        let xv = tape.leaf(x.clone());
        let (single, hf_s) = wavelet_attention_block(
            &mut tape,
            xv,
            1,
            &params,
            &cfg,
            &filter,
            UpsampleMode::Wavelet,
        )
        .unwrap();
        let xv2 = tape.leaf(x);
        let (multi, hf_m) = multilevel_attention_block(
            &mut tape,
            xv2,
            1,
            &params,
            &cfg,
            &filter,
            UpsampleMode::Wavelet,
        )
        .unwrap();
        assert_eq!(tape.value(single).data(), tape.value(multi).data());
        let hf_s = hf_s.unwrap();
        for b in 0..7 {
            assert_eq!(tape.value(hf_s[b]).data(), tape.value(hf_m[b]).data());
        }
    }

    #[test]
    fn multilevel_rejects_m0_and_non_dividing_windows() {
        let dim = 2;
        let mut tape = Tape::<f64>::new();
        let params = random_params(&mut tape, dim, 2, 81);
        let mut rng = Prng::new(82);
        let x: Tensor<f64> = rng.randn(&[dim, 8, 8, 8]);
        let xv = tape.leaf(x);
        let filter = WaveletFilter::haar();
        let cfg = AttentionConfig {
            num_heads: 1,
            feature_dim: dim,
            window: 2,
        };
        assert!(multilevel_attention_block(
            &mut tape,
            xv,
            0,
            &params,
            &cfg,
            &filter,
            UpsampleMode::Wavelet
        )
        .is_err());
        // window 4 cannot tile the 2^3 level-2 grid
        let wide = AttentionConfig {
            num_heads: 1,
            feature_dim: dim,
            window: 4,
        };
        assert!(multilevel_attention_block(
            &mut tape,
            xv,
            2,
            &params,
            &wide,
            &filter,
            UpsampleMode::Wavelet
        )
        .is_err());
        // window 2 tiles 4^3 and 2^3
        assert!(multilevel_attention_block(
            &mut tape,
            xv,
            2,
            &params,
            &cfg,
            &filter,
            UpsampleMode::Wavelet
        )
        .is_ok());
    }

    #[test]
    fn mlp_zero_params_give_zero_output() {
        let dim = 3;
        let mut tape = Tape::<f64>::new();
        let mut params = random_params(&mut tape, dim, 2, 91);
        params.mlp_w1 = tape.leaf(Tensor::zeros(&[2 * dim, dim]));
        params.mlp_b1 = tape.leaf(Tensor::zeros(&[2 * dim]));
        params.mlp_w2 = tape.leaf(Tensor::zeros(&[dim, 2 * dim]));
        params.mlp_b2 = tape.leaf(Tensor::zeros(&[dim]));
        let mut rng = Prng::new(92);
        let x: Tensor<f64> = rng.randn(&[dim, 2, 2, 2]);
        let xv = tape.leaf(x);
        let out = mlp(&mut tape, xv, &params).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_reproduces_scaled_input_when_gelu_is_saturated() {
        // w1 doubles the input and shifts it far into the linear region of
        // GELU; w2 selects it back and removes the shift
        let dim = 3;
        let r = 2;
        let mut tape = Tape::<f64>::new();
        let mut params = random_params(&mut tape, dim, r, 101);
        let w1 = Tensor::from_fn(&[r * dim, dim], |i| {
            let (row, col) = (i / dim, i % dim);
            if row == col {
                2.0
            } else {
                0.0
            }
        });
        let w2 = Tensor::from_fn(&[dim, r * dim], |i| {
            let (row, col) = (i / (r * dim), i % (r * dim));
            if row == col {
                1.0
            } else {
                0.0
            }
        });
        params.mlp_w1 = tape.leaf(w1);
        params.mlp_b1 = tape.leaf(Tensor::full(&[r * dim], 10.0));
        params.mlp_w2 = tape.leaf(w2);
        params.mlp_b2 = tape.leaf(Tensor::full(&[dim], -10.0));
        let mut rng = Prng::new(102);
        let x: Tensor<f64> = rng
            .randn::<f64>(&[dim, 2, 2, 2])
            .map(|v| v.clamp(-2.0, 2.0));
        let xv = tape.leaf(x.clone());
        let out = mlp(&mut tape, xv, &params).unwrap();
        let want = x.scale(2.0);
        assert!(tape.value(out).max_abs_diff(&want) <= 1e-9);
    }

    #[test]
    fn block_shapes_hold_across_depths_and_both_filters() {
        for name in ["haar", "db2"] {
            let filter = WaveletFilter::by_name(name).unwrap();
            let dim = 2;
            let mut tape = Tape::<f64>::new();
            let params = random_params(&mut tape, dim, 2, 111);
            let cfg = AttentionConfig {
                num_heads: 1,
                feature_dim: dim,
                window: 2,
            };
            let mut rng = Prng::new(112);
            let x: Tensor<f64> = rng.randn(&[dim, 8, 8, 8]);
            let xv = tape.leaf(x);
            let (out, hf) = multilevel_attention_block(
                &mut tape,
                xv,
                2,
                &params,
                &cfg,
                &filter,
                UpsampleMode::Wavelet,
            )
            .unwrap();
            assert_eq!(tape.value(out).shape(), &[dim, 8, 8, 8]);
            for b in hf {
                assert_eq!(tape.value(b).shape(), &[dim, 4, 4, 4]);
            }
        }
    }
}
