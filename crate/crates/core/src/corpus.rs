//! Evaluation corpora: byte-level text loading and seeded synthetic streams.
//!
//! Both constructors produce a [`TokenStream`], the single input type the
//! evaluation pipeline consumes. Token ids are plain `u32`s below the stream's
//! `vocab_size`; a content digest travels with the stream so result files can
//! state exactly what they were computed on.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Tokenization schemes understood by [`load_text`].
///
/// Only byte-level tokenization exists today (one token per raw byte,
/// vocabulary fixed at 256): it needs no external vocabulary files and keeps
/// every evaluation self-contained. The enum leaves room for alternatives
/// without changing the loader's signature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tokenizer {
    /// One token per byte; vocabulary size 256.
    ByteLevel,
}

/// A finite token sequence plus its provenance digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    /// Token ids, each strictly below `vocab_size`.
    pub tokens: Vec<u32>,
    /// Exclusive upper bound on token ids.
    pub vocab_size: usize,
    /// Hex SHA-256 identifying the source: the raw file bytes for loaded
    /// text, or the canonical parameter string for synthetic streams.
    pub source_digest: String,
}

impl TokenStream {
    /// Validates the invariants a stream must satisfy before evaluation:
    /// at least two tokens (one scored position) and all ids in range.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() < 2 {
            return Err(Error::invalid(
                "TokenStream::validate",
                format!("need at least 2 tokens, got {}", self.tokens.len()),
            ));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid(
                "TokenStream::validate",
                format!("vocab_size must be at least 2, got {}", self.vocab_size),
            ));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::invalid(
                "TokenStream::validate",
                format!("token id {bad} outside vocabulary of size {}", self.vocab_size),
            ));
        }
        Ok(())
    }

    /// Splits the stream into consecutive chunks of at most `chunk_len`
    /// tokens. Chunks of length 1 are dropped: a single token has no
    /// next-token position to score and would contribute nothing.
    pub fn chunks(&self, chunk_len: usize) -> Vec<&[u32]> {
        assert!(chunk_len >= 2, "chunk_len must be at least 2");
        self.tokens.chunks(chunk_len).filter(|c| c.len() >= 2).collect()
    }
}

/// Loads a text file as a byte-level token stream.
///
/// The digest is the SHA-256 of the raw file bytes, so two result files built
/// from byte-identical inputs carry the same digest regardless of path.
pub fn load_text(path: &Path, tokenizer: Tokenizer) -> Result<TokenStream> {
    let bytes = std::fs::read(path)?;
    match tokenizer {
        Tokenizer::ByteLevel => {
            let digest = hex_sha256(&bytes);
            let stream = TokenStream {
                tokens: bytes.iter().map(|&b| b as u32).collect(),
                vocab_size: 256,
                source_digest: digest,
            };
            stream.validate()?;
            Ok(stream)
        }
    }
}

/// Generates a uniform synthetic stream of `length` tokens over
/// `[0, vocab_size)` from a dedicated SplitMix64 seeded with `seed`.
///
/// Sampling uses rejection (no modulo bias), so every id is exactly equally
/// likely. The digest hashes the parameter triple rather than the tokens:
/// the tokens are a pure function of the triple, and the triple is what a
/// human wants to read back out of a results file.
pub fn synth_stream(seed: u64, length: usize, vocab_size: usize) -> Result<TokenStream> {
    if vocab_size < 2 {
        return Err(Error::invalid(
            "synth_stream",
            format!("vocab_size must be at least 2, got {vocab_size}"),
        ));
    }
    if length < 2 {
        return Err(Error::invalid(
            "synth_stream",
            format!("length must be at least 2, got {length}"),
        ));
    }
    let mut rng = crate::rng::SplitMix64::new(seed);
    let tokens = (0..length).map(|_| rng.next_below(vocab_size as u64) as u32).collect();
    let descriptor = format!("synth(seed={seed},length={length},vocab={vocab_size})");
    let stream = TokenStream {
        tokens,
        vocab_size,
        source_digest: hex_sha256(descriptor.as_bytes()),
    };
    stream.validate()?;
    Ok(stream)
}

/// Lower-case hex SHA-256 of a byte slice.
pub fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_answer() {
        // FIPS 180-2 test vector for "abc".
        assert_eq!(
            hex_sha256(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        // And the empty string.
        assert_eq!(
            hex_sha256(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn byte_level_loading_round_trip() {
        let dir = std::env::temp_dir().join(format!("quantsweep-corpus-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sample.txt");
        std::fs::write(&path, b"hello\nbytes").unwrap();

        let stream = load_text(&path, Tokenizer::ByteLevel).unwrap();
        assert_eq!(stream.vocab_size, 256);
        assert_eq!(stream.tokens.len(), 11);
        assert_eq!(stream.tokens[0], b'h' as u32);
        assert_eq!(stream.tokens[5], b'\n' as u32);
        assert_eq!(stream.source_digest, hex_sha256(b"hello\nbytes"));

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn synth_stream_is_deterministic_and_in_range() {
        let a = synth_stream(7, 500, 11).unwrap();
        let b = synth_stream(7, 500, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.iter().all(|&t| t < 11));
        // Different seed, different stream.
        let c = synth_stream(8, 500, 11).unwrap();
        assert_ne!(a.tokens, c.tokens);
        // Digest captures the parameters.
        assert_eq!(a.source_digest, hex_sha256(b"synth(seed=7,length=500,vocab=11)"));
    }

    #[test]
    fn synth_stream_covers_vocabulary() {
        let s = synth_stream(3, 4096, 7).unwrap();
        let mut seen = [false; 7];
        for &t in &s.tokens {
            seen[t as usize] = true;
        }
        assert!(seen.iter().all(|&x| x), "4096 uniform draws should hit all 7 ids");
    }

    #[test]
    fn validation_rejects_bad_streams() {
        assert!(synth_stream(1, 1, 10).is_err());
        assert!(synth_stream(1, 10, 1).is_err());
        let bad = TokenStream { tokens: vec![0, 9], vocab_size: 8, source_digest: String::new() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn chunking_drops_single_token_tails() {
        let s = synth_stream(9, 9, 16).unwrap();
        let chunks = s.chunks(4);
        // 9 tokens at chunk 4 -> [4, 4, 1]; the length-1 tail is dropped.
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].len(), 4);
        assert_eq!(chunks[1].len(), 4);
        let s2 = synth_stream(9, 10, 16).unwrap();
        let chunks2 = s2.chunks(4);
        assert_eq!(chunks2.len(), 3);
        assert_eq!(chunks2[2].len(), 2);
    }
}
