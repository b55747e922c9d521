//! Scalar metrics over teacher/student logits: cross-entropy, perplexity,
//! SQNR, KL divergence in both directions, and ΔCE.
//!
//! Everything is computed in nats (natural log) except SQNR, which is in dB.
//! Two evaluation modes exist side by side:
//!
//! * **dataset-targets** — cross-entropy against the corpus's actual next
//!   tokens, the number a perplexity eval normally reports;
//! * **teacher-analytic** — expectations taken under the teacher's own
//!   distribution, the mode in which the information-theoretic identities
//!   hold *exactly*: `CE(q) = H(p) + KL(p‖q)` and therefore
//!   `PPL(q) = PPL(p) · exp(KL(p‖q))`.
//!
//! The metric kernels are generic over [`Scalar`] like the numerics layer;
//! the pipeline instantiates them at `f64`.

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, Scalar, Tensor};

/// How cross-entropy (and hence perplexity) was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Score the corpus's actual next tokens.
    DatasetTargets,
    /// Take expectations under the teacher's output distribution.
    TeacherAnalytic,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::DatasetTargets => "dataset_targets",
            EvalMode::TeacherAnalytic => "teacher_analytic",
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset_targets" => Ok(EvalMode::DatasetTargets),
            "teacher_analytic" => Ok(EvalMode::TeacherAnalytic),
            other => Err(Error::invalid("EvalMode::from_str", format!("unknown mode {other:?}"))),
        }
    }
}

/// One model's evaluation summary.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EvalResult {
    /// Mean cross-entropy in nats per scored token.
    pub ce_nats_per_token: f64,
    /// `exp(ce_nats_per_token)`.
    pub perplexity: f64,
    /// Number of positions that contributed to the mean.
    pub num_tokens: usize,
    pub mode: EvalMode,
}

impl EvalResult {
    /// Builds a result from a cross-entropy, deriving the perplexity.
    pub fn from_ce(ce_nats_per_token: f64, num_tokens: usize, mode: EvalMode) -> Self {
        EvalResult { ce_nats_per_token, perplexity: ce_nats_per_token.exp(), num_tokens, mode }
    }
}

/// Selects which distribution plays P in `KL(P‖Q) = E_P[log P − log Q]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(teacher ‖ student)` — penalizes mass the teacher has where the
    /// student does not.
    TeacherToStudent,
    /// `KL(student ‖ teacher)` — penalizes mass the student invents on
    /// tokens the teacher considers unlikely.
    StudentToTeacher,
}

fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("teacher shape {:?} vs student shape {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Mean cross-entropy (nats per position) of `logits[t]` against the label
/// `targets[t]`; targets are next-token ids already aligned to their logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<T> {
    let (rows, cols) = logits.expect_matrix("cross_entropy")?;
    if rows != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{rows} logit rows vs {} targets", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= cols) {
        return Err(Error::invalid(
            "cross_entropy",
            format!("target id {bad} outside vocabulary of size {cols}"),
        ));
    }
    let lp = log_softmax(logits)?;
    let mut total = T::zero();
    for (t, &label) in targets.iter().enumerate() {
        total = total - lp.at(t, label as usize);
    }
    Ok(total / T::from_const(rows as f64))
}

/// Analytic cross-entropy: mean over positions of
/// `-Σ_y softmax(teacher)[t,y] · log_softmax(student)[t,y]`.
///
/// With `student == teacher` this is exactly the mean teacher entropy; in
/// general it equals `H(p) + KL(p‖q)` (the "cross-entropy split").
pub fn analytic_cross_entropy<T: Scalar>(
    teacher_logits: &Tensor<T>,
    student_logits: &Tensor<T>,
) -> Result<T> {
    check_same_shape("analytic_cross_entropy", teacher_logits, student_logits)?;
    let (rows, cols) = teacher_logits.expect_matrix("analytic_cross_entropy")?;
    let lp_t = log_softmax(teacher_logits)?;
    let lp_s = log_softmax(student_logits)?;
    let mut total = T::zero();
    for t in 0..rows {
        let mut row_ce = T::zero();
        for y in 0..cols {
            row_ce = row_ce - lp_t.at(t, y).exp() * lp_s.at(t, y);
        }
        total = total + row_ce;
    }
    Ok(total / T::from_const(rows as f64))
}

/// Mean Shannon entropy (nats) of the per-position distributions.
pub fn mean_entropy<T: Scalar>(logits: &Tensor<T>) -> Result<T> {
    let (rows, cols) = logits.expect_matrix("mean_entropy")?;
    let lp = log_softmax(logits)?;
    let mut total = T::zero();
    for t in 0..rows {
        let mut h = T::zero();
        for y in 0..cols {
            let l = lp.at(t, y);
            h = h - l.exp() * l;
        }
        total = total + h;
    }
    Ok(total / T::from_const(rows as f64))
}

/// Perplexity from a cross-entropy in nats per token.
pub fn perplexity<T: Scalar>(ce: T) -> T {
    ce.exp()
}

/// Signal-to-quantization-noise ratio of the logits, in dB:
/// `10·log10(mean(ℓ²) / mean((ℓ − ℓ̂)²))`, pooled over every element.
///
/// Zero noise (identical logits) returns the `+∞` sentinel — a legitimate
/// sweep outcome when quantization was a no-op. A teacher with zero signal
/// power has no defined ratio and is an error.
pub fn sqnr_db<T: Scalar>(teacher_logits: &Tensor<T>, student_logits: &Tensor<T>) -> Result<T> {
    check_same_shape("sqnr_db", teacher_logits, student_logits)?;
    let n = T::from_const(teacher_logits.len() as f64);
    let mut signal = T::zero();
    let mut noise = T::zero();
    for (&t, &s) in teacher_logits.data().iter().zip(student_logits.data()) {
        signal = signal + t * t;
        let d = t - s;
        noise = noise + d * d;
    }
    signal = signal / n;
    noise = noise / n;
    if signal == T::zero() {
        return Err(Error::invalid("sqnr_db", "teacher logits are all zero".to_string()));
    }
    if noise == T::zero() {
        return Ok(T::infinity());
    }
    Ok(T::from_const(10.0) * (signal / noise).log10())
}

/// Mean per-position KL divergence in nats. `direction` fixes which logits
/// provide P in `KL(P‖Q) = Σ_y P[y]·(log P[y] − log Q[y])`.
///
/// Computed from log-softmax values for stability. The result is
/// mathematically non-negative; floating-point cancellation can leave a
/// residue around `-1e-16` for near-identical inputs, which is intentionally
/// not clamped (rankings only need order, and honesty beats cosmetics).
pub fn kl_divergence<T: Scalar>(
    teacher_logits: &Tensor<T>,
    student_logits: &Tensor<T>,
    direction: KlDirection,
) -> Result<T> {
    check_same_shape("kl_divergence", teacher_logits, student_logits)?;
    let (p_logits, q_logits) = match direction {
        KlDirection::TeacherToStudent => (teacher_logits, student_logits),
        KlDirection::StudentToTeacher => (student_logits, teacher_logits),
    };
    let (rows, cols) = p_logits.expect_matrix("kl_divergence")?;
    let lp = log_softmax(p_logits)?;
    let lq = log_softmax(q_logits)?;
    let mut total = T::zero();
    for t in 0..rows {
        let mut row_kl = T::zero();
        for y in 0..cols {
            let lp_y = lp.at(t, y);
            row_kl = row_kl + lp_y.exp() * (lp_y - lq.at(t, y));
        }
        total = total + row_kl;
    }
    Ok(total / T::from_const(rows as f64))
}

/// `student_ce − teacher_ce`.
pub fn delta_ce<T: Scalar>(teacher_ce: T, student_ce: T) -> T {
    student_ce - teacher_ce
}
