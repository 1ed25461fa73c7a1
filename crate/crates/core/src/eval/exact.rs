use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::error::{ForgeError, Result};
use crate::fim::{mix64, FimMode};
use crate::infer::{infill, DecoderWeights, FimPrompt, GenerationConfig};
use crate::tokenizer::BpeVocab;

/// One masked line. `prefix ++ middle ++ suffix` is the document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FimTask {
    pub doc_index: usize,
    pub line_index: usize,
    pub prefix: String,
    pub middle: String,
    pub suffix: String,
}

impl FimTask {
    pub fn document(&self) -> String {
        [self.prefix.as_str(), &self.middle, &self.suffix].concat()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FimTaskSet {
    pub tasks: Vec<FimTask>,
    /// Documents with no interior non-blank line.
    pub skipped: usize,
}

/// Masks one interior non-blank line per document, chosen uniformly;
/// document `i` draws from its own seeded generator.
pub fn make_fim_tasks<D: AsRef<str>>(docs: &[D], seed: u64) -> FimTaskSet {
    let mut tasks = Vec::new();
    let mut skipped = 0;
    for (i, d) in docs.iter().enumerate() {
        let text = d.as_ref();
        let mut starts = vec![0];
        starts.extend(text.match_indices('\n').map(|(p, _)| p + 1));
        if starts.last() == Some(&text.len()) {
            starts.pop();
        }
        let line = |li: usize| {
            let s = starts[li];
            let e = text[s..].find('\n').map_or(text.len(), |o| s + o);
            (s, e)
        };
        let nlines = starts.len();
        let eligible: Vec<usize> =
            (1..nlines.saturating_sub(1)).filter(|&li| { let (s, e) = line(li); !text[s..e].trim().is_empty() }).collect();
        if eligible.is_empty() {
            skipped += 1;
            continue;
        }
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(mix64(seed ^ mix64(i as u64)));
        let li = eligible[rng.gen_range(0..eligible.len())];
        let (s, e) = line(li);
        tasks.push(FimTask {
            doc_index: i,
            line_index: li,
            prefix: text[..s].to_string(),
            middle: text[s..e].to_string(),
            suffix: text[e..].to_string(),
        });
    }
    FimTaskSet { tasks, skipped }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FimRow {
    pub doc_index: usize,
    pub expected: String,
    pub generated: String,
    pub matched: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FimEvalReport {
    pub total: usize,
    pub matches: usize,
    pub errors: usize,
    pub accuracy: f64,
    pub rows: Vec<FimRow>,
}

impl FimEvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("doc\tmatch\texpected\tgenerated\n");
        for r in &self.rows {
            let shown = r.error.as_deref().map_or_else(|| format!("{:?}", r.generated), |e| format!("error: {e}"));
            s.push_str(&format!("{}\t{}\t{:?}\t{shown}\n", r.doc_index, r.matched as u8, r.expected));
        }
        s.push_str(&format!("fim exact match = {} ({}/{})\n", self.accuracy, self.matches, self.total));
        s
    }
}

/// Infills every task, stopping at the first newline or end of document,
/// and compares whitespace-stripped lines.
pub fn fim_exact_match<W: DecoderWeights + ?Sized>(
    model: &W,
    tasks: &[FimTask],
    gencfg: &GenerationConfig,
    vocab: &BpeVocab,
    mode: FimMode,
) -> Result<FimEvalReport> {
    if tasks.is_empty() {
        return Err(ForgeError::Invalid("no infilling tasks".into()));
    }
    let mut cfg = gencfg.clone();
    if !cfg.stop_strings.iter().any(|s| s == b"\n") {
        cfg.stop_strings.push(b"\n".to_vec());
    }
    let mut rows = Vec::with_capacity(tasks.len());
    for t in tasks {
        let prompt = FimPrompt { prefix: t.prefix.clone().into_bytes(), suffix: t.suffix.clone().into_bytes(), mode };
        let row = match infill(model, &prompt, &cfg, vocab) {
            Ok(g) => {
                let generated = String::from_utf8_lossy(&g.text).into_owned();
                let matched = generated.trim() == t.middle.trim();
                FimRow { doc_index: t.doc_index, expected: t.middle.clone(), generated, matched, error: None }
            }
            Err(e) => FimRow {
                doc_index: t.doc_index,
                expected: t.middle.clone(),
                generated: String::new(),
                matched: false,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    let matches = rows.iter().filter(|r| r.matched).count();
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    Ok(FimEvalReport { total: rows.len(), matches, errors, accuracy: matches as f64 / rows.len() as f64, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, Parameters};
    use proptest::prelude::*;

    #[test]
    fn five_line_document() {
        let doc = "class A {\n  int x;\n\n  int y;\n}\n";
        let set = make_fim_tasks(&[doc], 1);
        assert_eq!(set.skipped, 0);
        let t = &set.tasks[0];
        assert!(t.line_index == 1 || t.line_index == 3, "blank line 2 and the outer lines are never picked");
        assert_eq!(t.document(), doc);
        assert!(t.suffix.starts_with('\n'));
        assert!(!t.middle.contains('\n'));
    }

    #[test]
    fn too_short_documents_are_skipped() {
        let set = make_fim_tasks(&["a\nb\n", "one line", "x\n   \ny"], 0);
        assert_eq!((set.tasks.len(), set.skipped), (0, 3));
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let docs: Vec<String> = (0..30).map(|i| (0..8).map(|j| format!("line {i} {j}\n")).collect()).collect();
        assert_eq!(make_fim_tasks(&docs, 4), make_fim_tasks(&docs, 4));
        assert_ne!(make_fim_tasks(&docs, 4), make_fim_tasks(&docs, 5));
    }

    proptest! {
        #[test]
        fn tasks_reconstruct(lines in proptest::collection::vec("[ a-z;{}]{0,12}", 1..10), trailing in any::<bool>(), seed in any::<u64>()) {
            let mut doc = lines.join("\n");
            if trailing {
                doc.push('\n');
            }
            for t in make_fim_tasks(&[doc.clone()], seed).tasks {
                prop_assert_eq!(t.document(), doc.clone());
                prop_assert!(!t.middle.trim().is_empty());
                prop_assert!(t.line_index >= 1);
            }
        }
    }

    /// A model that always emits the byte `b` after any context.
    fn constant_model(b: u8) -> Parameters<f32> {
        let cfg = ModelConfig {
            hidden_size: 8,
            intermediate_size: 16,
            max_position_embeddings: 64,
            num_attention_heads: 2,
            num_hidden_layers: 1,
            vocab_size: 260,
        };
        let mut p = init_params::<f32>(&cfg, 0).unwrap();
        p.ln_f.gain.data.iter_mut().for_each(|g| *g = 0.0);
        p.ln_f.bias.data.iter_mut().for_each(|x| *x = 1.0);
        p.token_embedding.data[b as usize * 8..(b as usize + 1) * 8].iter_mut().for_each(|x| *x = 3.0);
        p
    }

    #[test]
    fn exact_match_with_stripping() {
        let v = BpeVocab::bytes_only();
        let task = |middle: &str| FimTask {
            doc_index: 0,
            line_index: 1,
            prefix: "a\n".into(),
            middle: middle.into(),
            suffix: "\nb".into(),
        };
        // The constant model emits "\n" immediately: an empty generated line.
        let p = constant_model(b'\n');
        let g = GenerationConfig::greedy(8);
        let r = fim_exact_match(&p, &[task("   "), task("x")], &g, &v, FimMode::Psm).unwrap();
        assert_eq!((r.matches, r.total), (1, 2));
        assert_eq!(r.accuracy, 0.5);
        // A task too long for the context is a surfaced non-match.
        let long = FimTask { prefix: "p".repeat(80), ..task("x") };
        let r = fim_exact_match(&p, &[long], &g, &v, FimMode::Psm).unwrap();
        assert_eq!((r.matches, r.errors), (0, 1));
        assert!(r.to_text().contains("error:"));
    }
}
