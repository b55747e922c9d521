//! Chunked model evaluation over a token stream.
//!
//! The stream is split into consecutive non-overlapping chunks (default 128
//! tokens); each chunk is forwarded independently — context resets at chunk
//! boundaries, as in standard chunked perplexity evaluation. Within a chunk
//! of length `T`, positions `0..T-1` are scored against the next token, so
//! cross-entropy is token-weighted across chunks automatically (sum of
//! negative log-likelihoods over all scored positions, divided by their
//! count).
//!
//! The evaluation also retains the logits of *every* position (including
//! each chunk's final, unscored position) concatenated in stream order:
//! distribution-level metrics — KL, SQNR, analytic cross-entropy — compare
//! teacher and student over all positions, not just the scored ones.

use crate::corpus::TokenStream;
use crate::error::{Error, Result};
use crate::metrics::{EvalMode, EvalResult};
use crate::model::{forward, Model};
use crate::numerics::log_softmax;
use crate::Tensor;

/// Default evaluation chunk length, in tokens.
pub const DEFAULT_CHUNK_LEN: usize = 128;

/// A model's evaluation over one stream: the dataset-targets summary plus
/// the pooled per-position logits for distribution-level comparisons.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Dataset-targets cross-entropy / perplexity over scored positions.
    pub result: EvalResult,
    /// Logits of every evaluated position, `[num_positions, vocab]`,
    /// concatenated in stream order.
    pub logits: Tensor,
}

impl Evaluation {
    /// Number of evaluated positions (rows of [`Evaluation::logits`]).
    pub fn num_positions(&self) -> usize {
        self.logits.shape()[0]
    }
}

/// Evaluates `model` over `stream` in chunks of `chunk_len` tokens.
///
/// Deterministic: chunk order, the summation order inside each chunk, and
/// the accumulation across chunks are all fixed, so repeated calls are
/// bit-identical regardless of the caller's threading.
pub fn evaluate_model(model: &Model, stream: &TokenStream, chunk_len: usize) -> Result<Evaluation> {
    stream.validate()?;
    if chunk_len < 2 {
        return Err(Error::invalid(
            "evaluate_model",
            format!("chunk_len must be at least 2, got {chunk_len}"),
        ));
    }
    if stream.vocab_size != model.config.vocab_size {
        return Err(Error::invalid(
            "evaluate_model",
            format!(
                "stream vocabulary {} does not match model vocabulary {}",
                stream.vocab_size, model.config.vocab_size
            ),
        ));
    }

    let mut nll_sum = 0.0;
    let mut scored = 0usize;
    let mut chunk_logits = Vec::new();
    for chunk in stream.chunks(chunk_len) {
        let logits = forward(model, chunk)?;
        let lp = log_softmax(&logits)?;
        // Positions 0..T-1 predict the next in-chunk token.
        for t in 0..chunk.len() - 1 {
            nll_sum -= lp.at(t, chunk[t + 1] as usize);
        }
        scored += chunk.len() - 1;
        chunk_logits.push(logits);
    }

    let ce = nll_sum / scored as f64;
    Ok(Evaluation {
        result: EvalResult::from_ce(ce, scored, EvalMode::DatasetTargets),
        logits: Tensor::vcat(&chunk_logits)?,
    })
}
