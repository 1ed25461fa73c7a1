use std::fmt::Write as _;

use crate::error::{ForgeError, Result};
use crate::fim::FimConfig;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Sequences per optimizer step.
    pub global_batch_sequences: usize,
    /// Sequences per forward/backward pass; must divide the global batch.
    pub micro_batch: usize,
    pub context_length: usize,
    pub checkpoint_every: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip: f64,
    pub fim: FimConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Next-token objective only.
    pub fn experiment1() -> Self {
        TrainConfig {
            total_steps: 100_000,
            warmup_steps: 1_000,
            lr_max: 4e-4,
            lr_min: 4e-6,
            global_batch_sequences: 180,
            micro_batch: 180,
            context_length: 8192,
            checkpoint_every: 1_000,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            grad_clip: 1.0,
            fim: FimConfig::disabled(),
            seed: 0,
        }
    }

    /// `experiment1` plus FIM at rate 0.5, PSM and SPM in equal parts.
    pub fn experiment2() -> Self {
        TrainConfig { fim: FimConfig::default(), ..Self::experiment1() }
    }

    /// One further epoch at a tenfold lower rate.
    pub fn experiment2_1() -> Self {
        TrainConfig { total_steps: 20_000, lr_max: 4e-6, lr_min: 4e-7, ..Self::experiment2() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "experiment1" => Some(Self::experiment1()),
            "experiment2" => Some(Self::experiment2()),
            "experiment2_1" => Some(Self::experiment2_1()),
            _ => None,
        }
    }

    pub fn accumulation_steps(&self) -> usize {
        self.global_batch_sequences / self.micro_batch
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.global_batch_sequences * self.context_length) as u64
    }

    /// Smallest whole number of sequences covering `tokens` per step.
    pub fn sequences_for_tokens(tokens: usize, context_length: usize) -> usize {
        tokens.div_ceil(context_length).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ForgeError::Config(m));
        for (name, v) in [
            ("total_steps", self.total_steps),
            ("checkpoint_every", self.checkpoint_every),
            ("global_batch_sequences", self.global_batch_sequences as u64),
            ("micro_batch", self.micro_batch as u64),
            ("context_length", self.context_length as u64),
        ] {
            if v == 0 {
                return bad(format!("{name} must be ≥ 1"));
            }
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 ≤ lr_min ≤ lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.global_batch_sequences % self.micro_batch != 0 {
            return bad(format!(
                "micro_batch {} does not divide global_batch_sequences {}",
                self.micro_batch, self.global_batch_sequences
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("epsilon must be > 0; weight_decay and grad_clip ≥ 0".into());
        }
        self.fim.validate()
    }
}

/// Model shape plus training hyperparameters, as read from a `key = value` file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::base_1b(), train: TrainConfig::experiment1() }
    }
}

impl RunConfig {
    /// Keys are applied in file order, so a `preset` line resets every
    /// training field set before it. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut rc = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ForgeError::Format { file: file.to_string(), line: n + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            rc.set(key, value).map_err(err)?;
        }
        rc.model.validate()?;
        rc.train.validate()?;
        Ok(rc)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "preset" => *t = TrainConfig::preset(value).ok_or_else(|| format!("unknown preset {value:?}"))?,
            "hidden_size" => m.hidden_size = num(key, value)?,
            "intermediate_size" => m.intermediate_size = num(key, value)?,
            "max_position_embeddings" => m.max_position_embeddings = num(key, value)?,
            "num_attention_heads" => m.num_attention_heads = num(key, value)?,
            "num_hidden_layers" => m.num_hidden_layers = num(key, value)?,
            "vocab_size" => m.vocab_size = num(key, value)?,
            "total_steps" => t.total_steps = num(key, value)?,
            "warmup_steps" => t.warmup_steps = num(key, value)?,
            "lr_max" => t.lr_max = num(key, value)?,
            "lr_min" => t.lr_min = num(key, value)?,
            "global_batch_sequences" => {
                t.global_batch_sequences = num(key, value)?;
                t.micro_batch = t.global_batch_sequences;
            }
            "micro_batch" => t.micro_batch = num(key, value)?,
            "context_length" => t.context_length = num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "epsilon" => t.epsilon = num(key, value)?,
            "grad_clip" => t.grad_clip = num(key, value)?,
            "fim_rate" => t.fim.fim_rate = num(key, value)?,
            "spm_fraction" => t.fim.spm_fraction = num(key, value)?,
            "seed" => {
                t.seed = num(key, value)?;
                t.fim.seed = t.seed;
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every field, in a form `parse` reads back to the same value.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("hidden_size", m.hidden_size.to_string());
        kv("intermediate_size", m.intermediate_size.to_string());
        kv("max_position_embeddings", m.max_position_embeddings.to_string());
        kv("num_attention_heads", m.num_attention_heads.to_string());
        kv("num_hidden_layers", m.num_hidden_layers.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("total_steps", t.total_steps.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("lr_max", t.lr_max.to_string());
        kv("lr_min", t.lr_min.to_string());
        kv("global_batch_sequences", t.global_batch_sequences.to_string());
        kv("micro_batch", t.micro_batch.to_string());
        kv("context_length", t.context_length.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("epsilon", t.epsilon.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("fim_rate", t.fim.fim_rate.to_string());
        kv("spm_fraction", t.fim.spm_fraction.to_string());
        kv("seed", t.seed.to_string());
        s
    }
}
