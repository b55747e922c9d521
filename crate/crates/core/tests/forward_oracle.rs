//! Independent unrolled-recurrence oracle for the forward pass.
//!
//! These tests re-derive the logits of hand-sized models step by step with
//! plain scalar arithmetic — no shared tensor kernels, different summation
//! styles, different stable-function formulations — and require agreement
//! with [`quantsweep_core::model::forward`] to 1e-9 per element. Anything
//! the production pass gets structurally wrong (an orientation, a split, a
//! missing residual, a off-by-one in the scan) shows up here as a gross
//! mismatch rather than a rounding residue.

use quantsweep_core::model::{
    build_model, forward, BlockAux, BlockKind, LayerDescriptor, Model, ModelConfig, OutlierSpec,
    Subtype,
};
use quantsweep_core::Tensor;

const TOL: f64 = 1e-9;

// ── Scalar re-implementations (deliberately not the production kernels) ───

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn rmsnorm_row(row: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let denom = (ms + 1e-6).sqrt();
    row.iter().zip(gain).map(|(v, g)| v / denom * g).collect()
}

/// `w[out][in] · x[in]`, accumulating in reverse order on purpose.
fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..rows)
        .map(|r| (0..cols).rev().map(|c| w.at(r, c) * x[c]).sum())
        .collect()
}

fn grab(model: &Model, block: usize, subtype: Subtype) -> &Tensor {
    model.weight(&LayerDescriptor::new(block, subtype)).expect("weight exists")
}

// ── The SSM oracle ─────────────────────────────────────────────────────────

/// Unrolls one Mamba-style block plus head over a token sequence.
fn unroll_ssm_model(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = model.config.clone();
    let d = cfg.d_model;
    let d_inner = cfg.d_inner();
    let dt_rank = cfg.dt_rank();
    let n = cfg.d_state;
    let k = cfg.d_conv;

    let embedding = model.weight(&quantsweep_core::model::embedding_descriptor()).unwrap();
    let (norm_gain, a, dt_bias) = match &model.aux().blocks[0] {
        BlockAux::Ssm { norm_gain, a, dt_bias } => (norm_gain, a, dt_bias),
        _ => panic!("expected an SSM block"),
    };
    let in_proj = grab(model, 0, Subtype::MambaInProj);
    let conv1d = grab(model, 0, Subtype::MambaConv1d);
    let x_proj = grab(model, 0, Subtype::MambaXProj);
    let dt_proj = grab(model, 0, Subtype::MambaDtProj);
    let out_proj = grab(model, 0, Subtype::MambaOutProj);
    let lm_head =
        model.weight(&quantsweep_core::model::lm_head_descriptor(&cfg)).expect("lm_head exists");

    // Residual stream, embeddings in.
    let us: Vec<Vec<f64>> = tokens.iter().map(|&t| embedding.row(t as usize).to_vec()).collect();

    // Pre-activations for the whole sequence (the conv needs history).
    let xz: Vec<Vec<f64>> =
        us.iter().map(|u| matvec(in_proj, &rmsnorm_row(u, norm_gain.data()))).collect();
    let xs: Vec<&[f64]> = xz.iter().map(|row| &row[..d_inner]).collect();
    let zs: Vec<&[f64]> = xz.iter().map(|row| &row[d_inner..]).collect();

    // Depthwise causal conv with an explicit zero history, then SiLU.
    let mut xc = vec![vec![0.0; d_inner]; tokens.len()];
    for (t, slot) in xc.iter_mut().enumerate() {
        for ch in 0..d_inner {
            let mut acc = 0.0;
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src >= 0 {
                    acc += conv1d.at(ch, j) * xs[src as usize][ch];
                }
            }
            slot[ch] = silu(acc);
        }
    }

    // Recurrence, one explicit state vector per channel.
    let mut state = vec![vec![0.0; n]; d_inner];
    let mut logits = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let proj = matvec(x_proj, &xc[t]);
        let dt_low = &proj[..dt_rank];
        let b_row = &proj[dt_rank..dt_rank + n];
        let c_row = &proj[dt_rank + n..dt_rank + 2 * n];
        let dt_pre = matvec(dt_proj, dt_low);

        let mut y = vec![0.0; d_inner];
        for ch in 0..d_inner {
            let step = softplus(dt_pre[ch] + dt_bias.data()[ch]);
            for s in 0..n {
                state[ch][s] =
                    (step * a.at(ch, s)).exp() * state[ch][s] + step * b_row[s] * xc[t][ch];
                y[ch] += c_row[s] * state[ch][s];
            }
        }

        // Gate, project back, residual, final norm, head.
        let gated: Vec<f64> = y.iter().zip(zs[t]).map(|(v, z)| v * silu(*z)).collect();
        let out = matvec(out_proj, &gated);
        let resid: Vec<f64> = us[t].iter().zip(&out).map(|(u, o)| u + o).collect();
        let normed = rmsnorm_row(&resid, model.aux().final_norm_gain.data());
        logits.push(matvec(lm_head, &normed));
        assert_eq!(logits[t].len(), cfg.vocab_size);
        assert_eq!(resid.len(), d);
    }
    logits
}

#[test]
fn one_block_ssm_matches_hand_unroll() {
    let config = ModelConfig {
        num_blocks: 1,
        block_pattern: vec![BlockKind::Ssm],
        d_model: 2,
        d_state: 2,
        d_conv: 3,
        mlp_ratio: 2,
        vocab_size: 3,
        seed: 97,
        outliers: OutlierSpec::default(),
    };
    let model = build_model(&config).unwrap();
    let tokens: Vec<u32> = vec![0, 2, 1, 1, 0, 2, 2, 0, 1, 2];

    let got = forward(&model, &tokens).unwrap();
    let want = unroll_ssm_model(&model, &tokens);

    assert_eq!(got.shape(), [tokens.len(), 3]);
    for (t, wrow) in want.iter().enumerate() {
        for (v, &w) in wrow.iter().enumerate() {
            let g = got.at(t, v);
            assert!(
                (g - w).abs() <= TOL,
                "logit[{t}][{v}]: forward {g} vs oracle {w} (diff {})",
                (g - w).abs()
            );
        }
    }
}

// ── The attention oracle ───────────────────────────────────────────────────

/// Unrolls one attention+MLP block plus head over a token sequence.
fn unroll_attn_model(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = model.config.clone();
    let d = cfg.d_model;

    let embedding = model.weight(&quantsweep_core::model::embedding_descriptor()).unwrap();
    let (attn_gain, mlp_gain) = match &model.aux().blocks[0] {
        BlockAux::Attn { attn_norm_gain, mlp_norm_gain } => (attn_norm_gain, mlp_norm_gain),
        _ => panic!("expected an attention block"),
    };
    let qkv_w = grab(model, 0, Subtype::AttnQkvProj);
    let o_w = grab(model, 0, Subtype::AttnOProj);
    let up_w = grab(model, 0, Subtype::MlpUpProj);
    let down_w = grab(model, 0, Subtype::MlpDownProj);
    let lm_head =
        model.weight(&quantsweep_core::model::lm_head_descriptor(&cfg)).expect("lm_head exists");

    let us: Vec<Vec<f64>> = tokens.iter().map(|&t| embedding.row(t as usize).to_vec()).collect();
    let qkv: Vec<Vec<f64>> =
        us.iter().map(|u| matvec(qkv_w, &rmsnorm_row(u, attn_gain.data()))).collect();

    let mut logits = Vec::with_capacity(tokens.len());
    for t in 0..tokens.len() {
        let q = &qkv[t][..d];
        // Prefix-only attention with an explicitly normalized softmax.
        let scores: Vec<f64> = (0..=t)
            .map(|t2| {
                let key = &qkv[t2][d..2 * d];
                q.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let mut ctx = vec![0.0; d];
        for (t2, e) in exps.iter().enumerate() {
            let value = &qkv[t2][2 * d..];
            for (slot, vv) in ctx.iter_mut().zip(value) {
                *slot += e / denom * vv;
            }
        }

        let u1: Vec<f64> = us[t].iter().zip(matvec(o_w, &ctx)).map(|(u, o)| u + o).collect();
        let up = matvec(up_w, &rmsnorm_row(&u1, mlp_gain.data()));
        let act: Vec<f64> = up.iter().map(|&v| silu(v)).collect();
        let resid: Vec<f64> = u1.iter().zip(matvec(down_w, &act)).map(|(u, m)| u + m).collect();
        let normed = rmsnorm_row(&resid, model.aux().final_norm_gain.data());
        logits.push(matvec(lm_head, &normed));
    }
    logits
}

#[test]
fn one_block_attention_matches_hand_unroll() {
    let config = ModelConfig {
        num_blocks: 1,
        block_pattern: vec![BlockKind::Attn],
        d_model: 2,
        d_state: 2,
        d_conv: 3,
        mlp_ratio: 2,
        vocab_size: 3,
        seed: 98,
        outliers: OutlierSpec::default(),
    };
    let model = build_model(&config).unwrap();
    let tokens: Vec<u32> = vec![1, 0, 2, 2, 1, 0, 1, 2];

    let got = forward(&model, &tokens).unwrap();
    let want = unroll_attn_model(&model, &tokens);

    for (t, wrow) in want.iter().enumerate() {
        for (v, &w) in wrow.iter().enumerate() {
            let g = got.at(t, v);
            assert!(
                (g - w).abs() <= TOL,
                "logit[{t}][{v}]: forward {g} vs oracle {w} (diff {})",
                (g - w).abs()
            );
        }
    }
}

// ── Oracle holds after quantization too ────────────────────────────────────

#[test]
fn oracle_still_agrees_on_a_quantized_student() {
    let config = ModelConfig {
        num_blocks: 1,
        block_pattern: vec![BlockKind::Ssm],
        d_model: 2,
        d_state: 2,
        d_conv: 3,
        mlp_ratio: 2,
        vocab_size: 3,
        seed: 99,
        outliers: OutlierSpec::default(),
    };
    let model = build_model(&config).unwrap();
    let student = quantsweep_core::quant::quantize_layer(
        &model,
        &LayerDescriptor::new(0, Subtype::MambaXProj),
        quantsweep_core::quant::QuantSpec::INT4,
    )
    .unwrap();
    let tokens: Vec<u32> = vec![2, 1, 0, 1, 2, 0];
    let got = forward(&student, &tokens).unwrap();
    let want = unroll_ssm_model(&student, &tokens);
    for (t, wrow) in want.iter().enumerate() {
        for (v, &w) in wrow.iter().enumerate() {
            assert!((got.at(t, v) - w).abs() <= TOL);
        }
    }
}
