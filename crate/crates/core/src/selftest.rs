//! Built-in verification suite behind the `selftest` subcommand.
//!
//! Each check re-derives one of the identities or contracts the toolkit's
//! conclusions rest on — the cross-entropy split, the perplexity
//! factorization and its bound, the constant-shift counterexample that
//! separates SQNR from the KL/PPL family, Gibbs' inequality, Kendall τ
//! units, the quantizer's exactness properties, kernel shift invariance,
//! model causality, and end-to-end determinism — on freshly generated seeded
//! data. Checks never panic; they report pass/fail with a one-line detail.

use crate::error::Result;
use crate::eval::evaluate_model;
use crate::metrics::{
    analytic_cross_entropy, kl_divergence, mean_entropy, sqnr_db, EvalMode, KlDirection,
};
use crate::model::{build_model, list_quantizable_layers, BlockKind, ModelConfig};
use crate::quant::{fake_quantize, row_scales, QuantSpec};
use crate::rng::SplitMix64;
use crate::sensitivity::{kendall_tau, per_layer_sweep};
use crate::Tensor;

/// Outcome of one self-check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs every check and returns the outcomes in a fixed order.
pub fn run_selftests() -> Vec<Check> {
    [
        ("lemma1_cross_entropy_split", lemma1_split as fn() -> CheckResult),
        ("lemma2_ppl_factorization", lemma2_factorization),
        ("corollary_ppl_bound", corollary_bound),
        ("prop1_constant_shift", prop1_constant_shift),
        ("gibbs_inequality", gibbs_inequality),
        ("kendall_tau_units", kendall_units),
        ("quantizer_exactness", quantizer_exactness),
        ("softmax_shift_invariance", softmax_shift_invariance),
        ("model_causality", model_causality),
        ("pipeline_determinism", pipeline_determinism),
    ]
    .into_iter()
    .map(|(name, f)| match f() {
        Ok(detail) => Check { name, passed: true, detail },
        Err(detail) => Check { name, passed: false, detail },
    })
    .collect()
}

/// True iff every check passed.
pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

type CheckResult = std::result::Result<String, String>;

/// Converts core errors into check failures.
fn run<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| format!("unexpected error: {e}"))
}

fn random_logits(rng: &mut SplitMix64, t: usize, v: usize, std: f64) -> Tensor {
    let mut data = vec![0.0; t * v];
    rng.fill_normal(&mut data, std);
    Tensor::from_rows(t, v, data).expect("shape is consistent")
}

// ── Checks ─────────────────────────────────────────────────────────────────

/// CE(q; p) = H(p) + KL(p‖q) on 100 seeded logit pairs, to 1e-10.
fn lemma1_split() -> CheckResult {
    let mut rng = SplitMix64::new(0x5E1F_7E57);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = random_logits(&mut rng, 16, 32, 2.0);
        let q = random_logits(&mut rng, 16, 32, 2.0);
        let ce = run(analytic_cross_entropy(&p, &q))?;
        let h = run(mean_entropy(&p))?;
        let kl = run(kl_divergence(&p, &q, KlDirection::TeacherToStudent))?;
        worst = worst.max((ce - (h + kl)).abs());
    }
    if worst <= 1e-10 {
        Ok(format!("max |CE - H - KL| = {worst:.3e} over 100 pairs"))
    } else {
        Err(format!("split violated: max residual {worst:.3e} > 1e-10"))
    }
}

/// PPL(q) = PPL(p)·exp(KL(p‖q)) on the same construction, to 1e-9 relative.
fn lemma2_factorization() -> CheckResult {
    let mut rng = SplitMix64::new(0x5E1F_7E58);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = random_logits(&mut rng, 16, 32, 2.0);
        let q = random_logits(&mut rng, 16, 32, 2.0);
        let ppl_q = run(analytic_cross_entropy(&p, &q))?.exp();
        let ppl_p = run(mean_entropy(&p))?.exp();
        let kl = run(kl_divergence(&p, &q, KlDirection::TeacherToStudent))?;
        let rel = (ppl_q - ppl_p * kl.exp()).abs() / ppl_q;
        worst = worst.max(rel);
    }
    if worst <= 1e-9 {
        Ok(format!("max relative residual = {worst:.3e} over 100 pairs"))
    } else {
        Err(format!("factorization violated: {worst:.3e} > 1e-9"))
    }
}

/// KL ≤ ε implies PPL(q) ≤ PPL(p)·e^ε (up to 1e-9 absolute slack).
fn corollary_bound() -> CheckResult {
    let mut rng = SplitMix64::new(0x5E1F_7E59);
    let mut checked = 0usize;
    for _ in 0..200 {
        let p = random_logits(&mut rng, 8, 16, 1.0);
        // Small perturbations keep KL under the epsilon being tested.
        let noise = random_logits(&mut rng, 8, 16, 0.05);
        let q_data: Vec<f64> =
            p.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        let q = Tensor::from_rows(8, 16, q_data).expect("shape is consistent");
        let kl = run(kl_divergence(&p, &q, KlDirection::TeacherToStudent))?;
        let eps = 0.01;
        if kl > eps {
            continue;
        }
        checked += 1;
        let ppl_q = run(analytic_cross_entropy(&p, &q))?.exp();
        let ppl_p = run(mean_entropy(&p))?.exp();
        if ppl_q > ppl_p * eps.exp() + 1e-9 {
            return Err(format!(
                "bound violated: PPL(q)={ppl_q} > PPL(p)e^eps={}",
                ppl_p * eps.exp()
            ));
        }
    }
    if checked < 50 {
        return Err(format!("only {checked}/200 perturbations fell under epsilon"));
    }
    Ok(format!("bound held on {checked} sub-epsilon pairs"))
}

/// Constant logit shifts leave PPL and both KLs fixed (≤ 1e-10) while SQNR
/// strictly decreases — SQNR can rank order degradations that matter not
/// at all.
fn prop1_constant_shift() -> CheckResult {
    let mut rng = SplitMix64::new(0x5E1F_7E5A);
    let z = random_logits(&mut rng, 8, 16, 2.0);
    let base_ppl = run(mean_entropy(&z))?.exp();
    let mut prev_sqnr = f64::INFINITY;
    for c in [1.0, 10.0, 100.0, 1000.0] {
        let shifted = z.map(|x| x + c);
        let kl_ts = run(kl_divergence(&z, &shifted, KlDirection::TeacherToStudent))?;
        let kl_st = run(kl_divergence(&z, &shifted, KlDirection::StudentToTeacher))?;
        let ppl = run(analytic_cross_entropy(&z, &shifted))?.exp();
        if kl_ts.abs() > 1e-10 || kl_st.abs() > 1e-10 {
            return Err(format!("KL drifted at c={c}: {kl_ts:.3e} / {kl_st:.3e}"));
        }
        if (ppl - base_ppl).abs() > 1e-10 {
            return Err(format!("PPL drifted at c={c}: {:.3e}", (ppl - base_ppl).abs()));
        }
        let s = run(sqnr_db(&z, &shifted))?;
        if s >= prev_sqnr {
            return Err(format!("SQNR not strictly decreasing at c={c}: {s} >= {prev_sqnr}"));
        }
        prev_sqnr = s;
    }
    Ok(format!("KL/PPL fixed, SQNR fell to {prev_sqnr:.2} dB at c=1000"))
}

/// KL ≥ 0 with equality iff the distributions coincide, and CE(q;p) ≥ H(p).
fn gibbs_inequality() -> CheckResult {
    let mut rng = SplitMix64::new(0x5E1F_7E5B);
    for _ in 0..100 {
        let p = random_logits(&mut rng, 8, 16, 2.0);
        let q = random_logits(&mut rng, 8, 16, 2.0);
        for dir in [KlDirection::TeacherToStudent, KlDirection::StudentToTeacher] {
            if run(kl_divergence(&p, &q, dir))? < 0.0 {
                return Err("negative KL".to_string());
            }
        }
        if run(analytic_cross_entropy(&p, &q))? < run(mean_entropy(&p))? - 1e-12 {
            return Err("cross-entropy fell below entropy".to_string());
        }
    }
    let p = random_logits(&mut rng, 8, 16, 2.0);
    let self_kl = run(kl_divergence(&p, &p, KlDirection::TeacherToStudent))?;
    if self_kl != 0.0 {
        return Err(format!("KL(p||p) = {self_kl}, want exactly 0"));
    }
    Ok("KL >= 0, CE >= H, KL(p||p) = 0".to_string())
}

/// τ(a,a)=1, τ(a,rev a)=−1, and the four-element worked example τ=2/3.
fn kendall_units() -> CheckResult {
    let a: Vec<usize> = (0..6).collect();
    let rev: Vec<usize> = a.iter().rev().copied().collect();
    let same = run(kendall_tau(&a, &a))?;
    let opposite = run(kendall_tau(&a, &rev))?;
    let worked = run(kendall_tau(&[0, 1, 2, 3], &[0, 2, 1, 3]))?;
    if same.tau != 1.0 {
        return Err(format!("tau(a,a) = {}", same.tau));
    }
    if opposite.tau != -1.0 {
        return Err(format!("tau(a,rev) = {}", opposite.tau));
    }
    if worked.tau != 2.0 / 3.0 {
        return Err(format!("worked example tau = {}, want 2/3", worked.tau));
    }
    Ok("tau units exact (1, -1, 2/3)".to_string())
}

/// Idempotence (bit-for-bit), per-channel error bound, INT8 ≤ INT4 error,
/// and local code optimality on seeded random rows.
fn quantizer_exactness() -> CheckResult {
    let mut rng = SplitMix64::new(0x5E1F_7E5C);
    let w = random_logits(&mut rng, 64, 16, 1.5);
    for spec in [QuantSpec::INT4, QuantSpec::INT8] {
        let q1 = run(fake_quantize(&w, spec))?;
        let q2 = run(fake_quantize(&q1, spec))?;
        if q1.data().iter().zip(q2.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("{spec} not idempotent"));
        }
        let scales = run(row_scales(&w, spec))?;
        for (i, &scale) in scales.iter().enumerate() {
            for (a, b) in w.row(i).iter().zip(q1.row(i)) {
                if (a - b).abs() > scale / 2.0 + 1e-15 {
                    return Err(format!("{spec} error exceeded scale/2 in row {i}"));
                }
            }
        }
    }
    let q4 = run(fake_quantize(&w, QuantSpec::INT4))?;
    let q8 = run(fake_quantize(&w, QuantSpec::INT8))?;
    let err = |q: &Tensor| -> f64 {
        w.data().iter().zip(q.data()).map(|(a, b)| (a - b).powi(2)).sum()
    };
    if err(&q8) > err(&q4) {
        return Err("INT8 error exceeded INT4 error".to_string());
    }
    Ok("idempotent, bounded, INT8 <= INT4 error".to_string())
}

/// softmax(z + c) == softmax(z) to 1e-12 — the invariance behind Prop 1.
fn softmax_shift_invariance() -> CheckResult {
    let mut rng = SplitMix64::new(0x5E1F_7E5D);
    let z = random_logits(&mut rng, 4, 12, 3.0);
    let shifted = z.map(|x| x + 123.456);
    let (a, b) = (run(crate::numerics::softmax(&z))?, run(crate::numerics::softmax(&shifted))?);
    let worst = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    if worst <= 1e-12 {
        Ok(format!("max drift {worst:.3e}"))
    } else {
        Err(format!("softmax shift drift {worst:.3e} > 1e-12"))
    }
}

/// Changing a future token leaves all earlier logit rows bit-identical.
fn model_causality() -> CheckResult {
    let config = ModelConfig {
        num_blocks: 2,
        block_pattern: vec![BlockKind::Ssm, BlockKind::Attn],
        d_model: 8,
        d_state: 4,
        vocab_size: 16,
        seed: 11,
        ..ModelConfig::default()
    };
    let model = run(build_model(&config))?;
    let tokens: Vec<u32> = (0..12).map(|i| (i * 5 % 16) as u32).collect();
    let mut mutated = tokens.clone();
    mutated[11] = (mutated[11] + 1) % 16;
    let a = run(crate::model::forward(&model, &tokens))?;
    let b = run(crate::model::forward(&model, &mutated))?;
    for t in 0..11 {
        if a.row(t).iter().zip(b.row(t)).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("position {t} saw the future"));
        }
    }
    Ok("prefix logits bit-identical under future-token edits".to_string())
}

/// Same seed, same sweep — bit-identical records, sequential vs parallel.
fn pipeline_determinism() -> CheckResult {
    let config = ModelConfig {
        num_blocks: 2,
        block_pattern: vec![BlockKind::Ssm, BlockKind::Attn],
        d_model: 8,
        d_state: 4,
        vocab_size: 16,
        seed: 13,
        ..ModelConfig::default()
    };
    let model_a = run(build_model(&config))?;
    let model_b = run(build_model(&config))?;
    let digest_a = run(crate::model::io::model_digest(&model_a))?;
    let digest_b = run(crate::model::io::model_digest(&model_b))?;
    if digest_a != digest_b {
        return Err("model build is not deterministic".to_string());
    }
    let stream = run(crate::corpus::synth_stream(17, 48, 16))?;
    let eval_a = run(evaluate_model(&model_a, &stream, 16))?;
    let eval_b = run(evaluate_model(&model_b, &stream, 16))?;
    if eval_a.result.ce_nats_per_token.to_bits() != eval_b.result.ce_nats_per_token.to_bits() {
        return Err("evaluation is not deterministic".to_string());
    }
    let sweep = |threads: usize| -> std::result::Result<Vec<u64>, String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        let records = pool.install(|| {
            per_layer_sweep(&model_a, &stream, QuantSpec::INT8, EvalMode::DatasetTargets)
        });
        Ok(run(records)?.iter().map(|r| r.kl_student_to_teacher.to_bits()).collect())
    };
    if sweep(1)? != sweep(4)? {
        return Err("sweep differs across thread counts".to_string());
    }
    let n = list_quantizable_layers(&model_a).len();
    Ok(format!("digest {}…, {n}-layer sweep stable across thread counts", &digest_a[..8]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_selfcheck_passes() {
        let checks = run_selftests();
        assert_eq!(checks.len(), 10);
        for c in &checks {
            assert!(c.passed, "{} failed: {}", c.name, c.detail);
        }
        assert!(all_passed(&checks));
    }

    #[test]
    fn check_names_are_unique() {
        let checks = run_selftests();
        let mut names: Vec<_> = checks.iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), checks.len());
    }
}
