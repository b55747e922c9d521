//! Symmetric per-output-channel fake quantization.
//!
//! "Fake" quantization rounds weights onto an integer grid and immediately
//! dequantizes them, so downstream compute runs in floating point but
//! observes exactly the noise a real INT4/INT8 deployment would introduce.
//! The scheme is symmetric (zero-point 0) with codes in `-qmax..qmax` and one
//! scale per output channel (weight-matrix row).
//!
//! ## Exact idempotence
//!
//! The contract requires `fake_quantize ∘ fake_quantize == fake_quantize`
//! *bit-for-bit*, which a naive `scale = amax / qmax` cannot deliver: the
//! products `code * scale` round, the re-derived scale then differs by an
//! ulp, and codes shift. The fix here is to truncate the scale's mantissa to
//! 45 significant bits (zeroing its low 8 mantissa bits). Codes occupy at
//! most 7 bits (`|code| <= 127`), so every product `code * scale` needs at
//! most 52 significant bits and is exactly representable. Re-quantizing the
//! output then recovers the same scale — the row maximum is exactly
//! `qmax * scale`, its division by `qmax` is exact, and truncation is a
//! no-op on an already-truncated value — and every division
//! `(code * scale) / scale` returns the integer code exactly. Truncation
//! shrinks the scale by less than one part in 2^44, which is irrelevant next
//! to the quantization error itself (half a scale step).

use crate::error::{Error, Result};
use crate::model::{list_quantizable_layers_with, LayerDescriptor, Model, Subtype};
use crate::numerics::round_ties_even;
use crate::planner::{MixedPrecisionPlan, Precision};
use crate::Tensor;

/// Bit-width of a symmetric per-output-channel weight quantization.
///
/// `scheme` and `granularity` are fixed by design (symmetric, per output
/// channel); the spec type is therefore just the width, validated to the two
/// supported deployments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
}

impl QuantSpec {
    /// 4-bit symmetric per-channel quantization (`qmax = 7`).
    pub const INT4: QuantSpec = QuantSpec { bits: 4 };
    /// 8-bit symmetric per-channel quantization (`qmax = 127`).
    pub const INT8: QuantSpec = QuantSpec { bits: 8 };

    /// Validates the width; only 4 and 8 bits are supported.
    pub fn new(bits: u8) -> Result<Self> {
        match bits {
            4 | 8 => Ok(QuantSpec { bits }),
            other => {
                Err(Error::invalid("QuantSpec::new", format!("unsupported bit-width {other}")))
            }
        }
    }

    /// Largest code magnitude: `2^(bits-1) - 1` (7 for INT4, 127 for INT8).
    pub fn qmax(self) -> f64 {
        ((1u32 << (self.bits - 1)) - 1) as f64
    }
}

impl std::fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "int{}", self.bits)
    }
}

/// Zeroes the low 8 mantissa bits, leaving at most 45 significant bits.
/// Truncation is toward zero in magnitude, so the truncated scale never
/// exceeds the exact one.
fn truncate_scale(s: f64) -> f64 {
    f64::from_bits(s.to_bits() & !0xFF)
}

/// Per-row scales of a weight matrix under `spec`: `max|row| / qmax`,
/// mantissa-truncated (see module docs), and 1.0 for an all-zero row.
pub fn row_scales(w: &Tensor, spec: QuantSpec) -> Result<Vec<f64>> {
    let (rows, _) = w.expect_matrix("row_scales")?;
    let qmax = spec.qmax();
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut amax = 0.0f64;
        for &v in w.row(r) {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    op: "row_scales",
                    detail: format!("row {r} contains a non-finite weight"),
                });
            }
            amax = amax.max(v.abs());
        }
        scales.push(if amax == 0.0 { 1.0 } else { truncate_scale(amax / qmax) });
    }
    Ok(scales)
}

/// Fake-quantizes a rank-2 weight tensor: per output channel (row) `c`,
/// `scale_c = max|w[c,:]| / qmax` (1.0 for an all-zero row) and
/// `w' = clamp(round_half_to_even(w / scale_c), -qmax, qmax) * scale_c`.
///
/// Idempotent bit-for-bit, and every element moves by at most `scale_c / 2`.
pub fn fake_quantize(w: &Tensor, spec: QuantSpec) -> Result<Tensor> {
    let scales = row_scales(w, spec)?;
    let qmax = spec.qmax();
    let mut out = w.clone();
    for (r, &scale) in scales.iter().enumerate() {
        for v in out.row_mut(r) {
            let code = round_ties_even(*v / scale).clamp(-qmax, qmax);
            *v = code * scale;
        }
    }
    Ok(out)
}

/// Returns a student model that shares every tensor with `model` except
/// `layer`, which is replaced by its fake-quantized copy. The teacher is
/// untouched (tensors live behind shared pointers; only the map is copied).
///
/// Any weight a plan may legally contain is accepted — all block projections,
/// `mamba.conv1d`, and `lm_head`; the embedding table is rejected.
pub fn quantize_layer(model: &Model, layer: &LayerDescriptor, spec: QuantSpec) -> Result<Model> {
    if layer.subtype == Subtype::Embedding {
        return Err(Error::InvalidLayer {
            layer: *layer,
            detail: "the embedding table is never quantizable".to_string(),
        });
    }
    let w = model.weight(layer).ok_or_else(|| Error::InvalidLayer {
        layer: *layer,
        detail: "no such weight in this model".to_string(),
    })?;
    let quantized = fake_quantize(w, spec)?;
    let mut student = model.clone();
    student.replace_weight(layer, quantized)?;
    Ok(student)
}

/// Applies a full mixed-precision plan, returning the student model.
///
/// Layers mapped to `keep` are untouched; `int8`/`int4` layers are
/// fake-quantized at that width. Writes are disjoint per layer, so this is
/// equivalent to folding [`quantize_layer`] over the plan in any order.
pub fn apply_plan(model: &Model, plan: &MixedPrecisionPlan) -> Result<Model> {
    let mut student = model.clone();
    for (layer, precision) in &plan.assignment {
        let spec = match precision {
            Precision::Keep => continue,
            Precision::Int8 => QuantSpec::INT8,
            Precision::Int4 => QuantSpec::INT4,
        };
        if layer.subtype == Subtype::Embedding || model.weight(layer).is_none() {
            return Err(Error::InvalidLayer {
                layer: *layer,
                detail: "plan references a layer that is not quantizable in this model"
                    .to_string(),
            });
        }
        let quantized = fake_quantize(model.weight(layer).unwrap(), spec)?;
        student.replace_weight(layer, quantized)?;
    }
    Ok(student)
}

/// Convenience: a plan quantizing every default-quantizable layer at one
/// width (the "uniform INT8 / INT4 baseline" of the compression curve).
pub fn uniform_plan(model: &Model, spec: QuantSpec, name: &str) -> MixedPrecisionPlan {
    let precision = match spec.bits {
        8 => Precision::Int8,
        _ => Precision::Int4,
    };
    MixedPrecisionPlan {
        name: name.to_string(),
        threshold: None,
        assignment: list_quantizable_layers_with(model, false)
            .into_iter()
            .map(|l| (l, precision))
            .collect(),
    }
}
