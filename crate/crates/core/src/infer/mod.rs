//! Autoregressive decoding with a multi-query KV cache, over float or
//! quantized weights.

mod cache;
mod sample;
mod weights;

pub use cache::{decode_step, prefill, KvCache};
pub use sample::{argmax, sample, softmax, top_p_filter};
pub use weights::{DecoderWeights, Linear, Norm, QuantDecoder};

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::error::{ForgeError, Result};
use crate::fim::FimMode;
use crate::tokenizer::{BpeVocab, SpecialRendering, TokenId};

const STOP_LOOKBACK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    /// `None` stops on the end-of-document token only.
    pub stop_tokens: Option<Vec<TokenId>>,
    pub stop_strings: Vec<Vec<u8>>,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { max_new_tokens: 128, temperature: 0.0, top_p: 1.0, stop_tokens: None, stop_strings: Vec::new(), seed: 0 }
    }
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        GenerationConfig { max_new_tokens, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(ForgeError::Config("max_new_tokens must be ≥ 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ForgeError::Config(format!("temperature must be ≥ 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ForgeError::Config(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if let Some(s) = self.stop_strings.iter().find(|s| s.is_empty() || s.len() > STOP_LOOKBACK) {
            return Err(ForgeError::Config(format!("stop strings must be 1..={STOP_LOOKBACK} bytes, got {}", s.len())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    StopToken,
    StopString,
    Length,
    ContextOverflow,
}

impl FinishReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FinishReason::StopToken => "stop_token",
            FinishReason::StopString => "stop_string",
            FinishReason::Length => "length",
            FinishReason::ContextOverflow => "context_overflow",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated ids, without the stop token.
    pub tokens: Vec<TokenId>,
    /// Decoded completion, cut before a matched stop string.
    pub text: Vec<u8>,
    pub finish: FinishReason,
}

/// Continues `prompt` token by token until a stop condition.
pub fn generate_tokens<W: DecoderWeights + ?Sized>(
    model: &W,
    prompt: &[TokenId],
    cfg: &GenerationConfig,
    vocab: &BpeVocab,
) -> Result<Generation> {
    cfg.validate()?;
    let (mut cache, mut logits) = prefill(model, prompt)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let eod = [vocab.specials().eod];
    let stops: &[TokenId] = cfg.stop_tokens.as_deref().unwrap_or(&eod);
    let mut tokens = Vec::new();
    let mut text = Vec::new();
    loop {
        let tok = sample(&logits, cfg.temperature, cfg.top_p, &mut rng);
        if stops.contains(&tok) {
            return Ok(Generation { tokens, text, finish: FinishReason::StopToken });
        }
        tokens.push(tok);
        text.extend(vocab.decode_with(&[tok], SpecialRendering::Hidden)?);
        let tail_start = text.len().saturating_sub(STOP_LOOKBACK);
        let hit = cfg
            .stop_strings
            .iter()
            .filter_map(|s| find(&text[tail_start..], s).map(|i| tail_start + i))
            .min();
        if let Some(cut) = hit {
            text.truncate(cut);
            return Ok(Generation { tokens, text, finish: FinishReason::StopString });
        }
        if tokens.len() == cfg.max_new_tokens {
            return Ok(Generation { tokens, text, finish: FinishReason::Length });
        }
        if cache.filled_length() == cache.capacity() {
            return Ok(Generation { tokens, text, finish: FinishReason::ContextOverflow });
        }
        logits = decode_step(model, &mut cache, tok)?;
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

pub fn generate<W: DecoderWeights + ?Sized>(model: &W, prompt: &[u8], cfg: &GenerationConfig, vocab: &BpeVocab) -> Result<Generation> {
    generate_tokens(model, &vocab.encode(prompt), cfg, vocab)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FimPrompt {
    pub prefix: Vec<u8>,
    pub suffix: Vec<u8>,
    pub mode: FimMode,
}

impl FimPrompt {
    /// The training layout up to and including the middle sentinel.
    pub fn render(&self, vocab: &BpeVocab) -> Result<Vec<TokenId>> {
        let sp = vocab.specials();
        let mut out = Vec::new();
        match self.mode {
            FimMode::Psm => {
                out.push(sp.fim_prefix);
                out.extend(vocab.encode(&self.prefix));
                out.push(sp.fim_suffix);
                out.extend(vocab.encode(&self.suffix));
            }
            FimMode::Spm => {
                out.push(sp.fim_suffix);
                out.extend(vocab.encode(&self.suffix));
                out.push(sp.fim_prefix);
                out.extend(vocab.encode(&self.prefix));
            }
            FimMode::None => return Err(ForgeError::Invalid("infilling needs PSM or SPM mode".into())),
        }
        out.push(sp.fim_middle);
        Ok(out)
    }
}

/// Generates the middle for `prompt`; the result holds the middle only.
pub fn infill<W: DecoderWeights + ?Sized>(model: &W, prompt: &FimPrompt, cfg: &GenerationConfig, vocab: &BpeVocab) -> Result<Generation> {
    let ids = prompt.render(vocab)?;
    let cap = model.config().max_position_embeddings;
    if ids.len() + cfg.max_new_tokens > cap {
        return Err(ForgeError::Invalid(format!(
            "insufficient context headroom: prompt of {} tokens plus {} new exceeds {cap}",
            ids.len(),
            cfg.max_new_tokens
        )));
    }
    generate_tokens(model, &ids, cfg, vocab)
}
