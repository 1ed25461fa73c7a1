//! Document-level fill-in-the-middle transformation.
//!
//! A document is cut at two uniformly drawn byte positions into
//! prefix/middle/suffix and re-emitted with sentinel tokens so that the
//! middle comes last, which lets a causal model learn to infill.

use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::error::{ForgeError, Result};
use crate::tokenizer::{BpeVocab, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FimMode {
    Psm,
    Spm,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FimConfig {
    pub fim_rate: f64,
    pub spm_fraction: f64,
    pub seed: u64,
}

impl Default for FimConfig {
    /// 50% of documents transformed, split evenly between PSM and SPM.
    fn default() -> Self {
        FimConfig { fim_rate: 0.5, spm_fraction: 0.5, seed: 0 }
    }
}

impl FimConfig {
    pub fn disabled() -> Self {
        FimConfig { fim_rate: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("fim_rate", self.fim_rate), ("spm_fraction", self.spm_fraction)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ForgeError::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    /// Independent generator for one document, so documents can be processed
    /// in any order (or in parallel) with identical results.
    pub fn doc_rng(&self, doc_key: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(mix64(self.seed ^ mix64(doc_key)))
    }
}

/// splitmix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FimSplit {
    pub prefix: Vec<u8>,
    pub middle: Vec<u8>,
    pub suffix: Vec<u8>,
    pub mode: FimMode,
}

impl FimSplit {
    pub fn none(text: &[u8]) -> Self {
        FimSplit { prefix: text.to_vec(), middle: Vec::new(), suffix: Vec::new(), mode: FimMode::None }
    }

    /// Splits `text` at byte positions `i ≤ j`.
    pub fn at(text: &[u8], i: usize, j: usize, mode: FimMode) -> Result<Self> {
        if i > j || j > text.len() {
            return Err(ForgeError::Invalid(format!("split points ({i}, {j}) invalid for length {}", text.len())));
        }
        if mode == FimMode::None {
            return Ok(Self::none(text));
        }
        Ok(FimSplit { prefix: text[..i].to_vec(), middle: text[i..j].to_vec(), suffix: text[j..].to_vec(), mode })
    }

    pub fn reconstruct(&self) -> Vec<u8> {
        [self.prefix.as_slice(), &self.middle, &self.suffix].concat()
    }
}

pub fn split_document<R: Rng + ?Sized>(text: &[u8], cfg: &FimConfig, rng: &mut R) -> Result<FimSplit> {
    if text.is_empty() {
        return Err(ForgeError::EmptyText);
    }
    if rng.gen::<f64>() >= cfg.fim_rate {
        return Ok(FimSplit::none(text));
    }
    let a = rng.gen_range(0..=text.len());
    let b = rng.gen_range(0..=text.len());
    let mode = if rng.gen::<f64>() < cfg.spm_fraction { FimMode::Spm } else { FimMode::Psm };
    FimSplit::at(text, a.min(b), a.max(b), mode)
}

pub fn render_fim(split: &FimSplit, vocab: &BpeVocab) -> Vec<TokenId> {
    let sp = vocab.specials();
    let mut out = Vec::new();
    match split.mode {
        FimMode::None => {
            out.extend(vocab.encode(&split.reconstruct()));
        }
        FimMode::Psm => {
            out.push(sp.fim_prefix);
            out.extend(vocab.encode(&split.prefix));
            out.push(sp.fim_suffix);
            out.extend(vocab.encode(&split.suffix));
            out.push(sp.fim_middle);
            out.extend(vocab.encode(&split.middle));
        }
        FimMode::Spm => {
            out.push(sp.fim_suffix);
            out.extend(vocab.encode(&split.suffix));
            out.push(sp.fim_prefix);
            out.extend(vocab.encode(&split.prefix));
            out.push(sp.fim_middle);
            out.extend(vocab.encode(&split.middle));
        }
    }
    out.push(sp.eod);
    out
}

/// Running counts over one pipeline pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FimStats {
    pub docs: u64,
    pub fim_docs: u64,
    pub spm_docs: u64,
    middle_fraction_sum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FimReport {
    pub docs: u64,
    pub fim_fraction: f64,
    pub spm_fraction: f64,
    pub mean_middle_fraction: f64,
}

impl FimStats {
    pub fn record(&mut self, split: &FimSplit) {
        self.docs += 1;
        if split.mode == FimMode::None {
            return;
        }
        self.fim_docs += 1;
        if split.mode == FimMode::Spm {
            self.spm_docs += 1;
        }
        let len = split.prefix.len() + split.middle.len() + split.suffix.len();
        self.middle_fraction_sum += split.middle.len() as f64 / len as f64;
    }

    pub fn psm_docs(&self) -> u64 {
        self.fim_docs - self.spm_docs
    }

    /// `spm_fraction` and `mean_middle_fraction` are taken over transformed documents only.
    pub fn report(&self) -> Result<FimReport> {
        if self.docs == 0 {
            return Err(ForgeError::Invalid("no documents processed".into()));
        }
        let per_fim = |x: f64| if self.fim_docs == 0 { 0.0 } else { x / self.fim_docs as f64 };
        Ok(FimReport {
            docs: self.docs,
            fim_fraction: self.fim_docs as f64 / self.docs as f64,
            spm_fraction: per_fim(self.spm_docs as f64),
            mean_middle_fraction: per_fim(self.middle_fraction_sum),
        })
    }
}

/// Transforms every document; document `i` uses `cfg.doc_rng(i)`.
pub fn fim_statistics<D: AsRef<[u8]>>(docs: &[D], cfg: &FimConfig) -> Result<FimReport> {
    let mut stats = FimStats::default();
    for (i, d) in docs.iter().enumerate() {
        stats.record(&split_document(d.as_ref(), cfg, &mut cfg.doc_rng(i as u64))?);
    }
    stats.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::mock::StepRng;

    const P: TokenId = 257;
    const S: TokenId = 258;
    const M: TokenId = 259;
    const E: TokenId = 256;

    fn ids(s: &str) -> Vec<TokenId> {
        s.bytes().map(|b| b as TokenId).collect()
    }

    #[test]
    fn no_fim_branch() {
        // StepRng at u64::MAX draws 1.0 - ε for every uniform, above any rate < 1.
        let mut rng = StepRng::new(u64::MAX, 0);
        let s = split_document(b"abc", &FimConfig::default(), &mut rng).unwrap();
        assert_eq!(s, FimSplit::none(b"abc"));
    }

    #[test]
    fn definition_forced_splits() {
        let s = FimSplit::at(b"abcdef", 2, 4, FimMode::Psm).unwrap();
        assert_eq!((s.prefix.as_slice(), s.middle.as_slice(), s.suffix.as_slice()), (&b"ab"[..], &b"cd"[..], &b"ef"[..]));
        let s = FimSplit::at(b"abcdef", 3, 3, FimMode::Spm).unwrap();
        assert!(s.middle.is_empty());
        assert_eq!(s.reconstruct(), b"abcdef");
        assert!(FimSplit::at(b"ab", 2, 1, FimMode::Psm).is_err());
    }

    #[test]
    fn empty_text_is_error() {
        let mut rng = StepRng::new(0, 1);
        assert!(matches!(split_document(b"", &FimConfig::default(), &mut rng), Err(ForgeError::EmptyText)));
    }

    #[test]
    fn render_layouts() {
        let v = BpeVocab::bytes_only();
        let psm = FimSplit::at(b"abcdef", 2, 4, FimMode::Psm).unwrap();
        let mut want = vec![P];
        want.extend(ids("ab"));
        want.push(S);
        want.extend(ids("ef"));
        want.push(M);
        want.extend(ids("cd"));
        want.push(E);
        assert_eq!(render_fim(&psm, &v), want);

        let spm = FimSplit { mode: FimMode::Spm, ..psm };
        let mut want = vec![S];
        want.extend(ids("ef"));
        want.push(P);
        want.extend(ids("ab"));
        want.push(M);
        want.extend(ids("cd"));
        want.push(E);
        assert_eq!(render_fim(&spm, &v), want);

        let mut want = ids("abcdef");
        want.push(E);
        assert_eq!(render_fim(&FimSplit::none(b"abcdef"), &v), want);
    }

    #[test]
    fn rate_extremes_are_exact() {
        let docs: Vec<Vec<u8>> = (0..500).map(|i| format!("class C{i} {{}}").into_bytes()).collect();
        let zero = fim_statistics(&docs, &FimConfig { fim_rate: 0.0, ..FimConfig::default() }).unwrap();
        assert_eq!(zero.fim_fraction, 0.0);
        let one = fim_statistics(&docs, &FimConfig { fim_rate: 1.0, ..FimConfig::default() }).unwrap();
        assert_eq!(one.fim_fraction, 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(FimConfig { fim_rate: 1.5, ..FimConfig::default() }.validate().is_err());
        assert!(FimConfig { spm_fraction: -0.1, ..FimConfig::default() }.validate().is_err());
        assert!(FimConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn splits_reconstruct_and_render_grammar(text in proptest::collection::vec(any::<u8>(), 1..200), seed in any::<u64>()) {
            let cfg = FimConfig { fim_rate: 1.0, spm_fraction: 0.5, seed };
            let split = split_document(&text, &cfg, &mut cfg.doc_rng(7)).unwrap();
            prop_assert_eq!(split.reconstruct(), text.clone());
            let v = BpeVocab::bytes_only();
            let out = render_fim(&split, &v);
            for tok in [P, S, M, E] {
                prop_assert_eq!(out.iter().filter(|&&t| t == tok).count(), 1);
            }
            prop_assert_eq!(*out.last().unwrap(), E);
            let mid = out.iter().position(|&t| t == M).unwrap();
            let middle = v.encode(&split.middle);
            prop_assert_eq!(&out[mid + 1..out.len() - 1], middle.as_slice());
            // Determinism.
            prop_assert_eq!(split, split_document(&text, &cfg, &mut cfg.doc_rng(7)).unwrap());
        }
    }
}
