use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use serde::Serialize;

use super::run::{evaluate_loss, Trainer};
use super::TrainConfig;
use crate::datapipe::{IndexedDataset, PackedBatch};
use crate::error::Result;
use crate::eval::{fim_exact_match, FimEvalReport, FimTask};
use crate::fim::FimMode;
use crate::infer::GenerationConfig;
use crate::model::{init_params, ModelConfig, Parameters};
use crate::tokenizer::BpeVocab;

/// Everything the two arms share.
pub struct ExperimentSetup<'a> {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub train: &'a IndexedDataset,
    pub vocab: &'a BpeVocab,
    pub validation: &'a [PackedBatch],
    pub tasks: &'a [FimTask],
    pub generation: GenerationConfig,
    pub mode: FimMode,
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmReport {
    pub label: String,
    pub steps: u64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub perplexity: f64,
    pub exact_match: FimEvalReport,
    pub train_secs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub no_fim: ArmReport,
    pub fim: ArmReport,
}

impl ExperimentReport {
    /// Relative next-token perplexity change of the FIM arm.
    pub fn perplexity_change(&self) -> f64 {
        self.fim.perplexity / self.no_fim.perplexity - 1.0
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("arm\tsteps\tval_loss_0\tval_loss\tperplexity\tfim_exact_match\n");
        for a in [&self.no_fim, &self.fim] {
            writeln!(
                s,
                "{}\t{}\t{:.4}\t{:.4}\t{:.3}\t{:.4}",
                a.label, a.steps, a.initial_val_loss, a.final_val_loss, a.perplexity, a.exact_match.accuracy
            )
            .unwrap();
        }
        writeln!(s, "perplexity change = {:+.4}", self.perplexity_change()).unwrap();
        s
    }
}

fn run_arm(setup: &ExperimentSetup<'_>, cfg: TrainConfig, label: &str) -> Result<(ArmReport, Parameters<f32>)> {
    let p0 = init_params::<f32>(&setup.model, setup.init_seed)?;
    let initial_val_loss = evaluate_loss(&p0, setup.validation)?;
    let start = Instant::now();
    let mut t = Trainer::new(p0, setup.train, setup.vocab, cfg)?;
    t.run()?;
    let train_secs = start.elapsed().as_secs_f64();
    let params = t.into_params();
    let final_val_loss = evaluate_loss(&params, setup.validation)?;
    let exact_match = fim_exact_match(&params, setup.tasks, &setup.generation, setup.vocab, setup.mode)?;
    info!("{label}: val loss {initial_val_loss:.3} → {final_val_loss:.3}, exact match {:.3}", exact_match.accuracy);
    let report = ArmReport {
        label: label.to_string(),
        steps: cfg.total_steps,
        initial_val_loss,
        final_val_loss,
        perplexity: final_val_loss.exp(),
        exact_match,
        train_secs,
    };
    Ok((report, params))
}

/// Trains a next-token-only and a FIM model from the same initialization
/// and scores both on next-token loss and single-line infilling.
pub fn experiment_compare(
    setup: &ExperimentSetup<'_>,
    cfg_no_fim: TrainConfig,
    cfg_fim: TrainConfig,
) -> Result<(ExperimentReport, [Parameters<f32>; 2])> {
    let (no_fim, p_no) = run_arm(setup, cfg_no_fim, "no_fim")?;
    let (fim, p_fim) = run_arm(setup, cfg_fim, "fim")?;
    Ok((ExperimentReport { no_fim, fim }, [p_no, p_fim]))
}
