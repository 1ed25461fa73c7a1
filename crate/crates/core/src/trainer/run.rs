use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};

use super::optim::{adamw_update, clip_global_norm, AdamHyper, OptimizerState};
use super::{lr_at, TrainConfig};
use crate::datapipe::{pack_stream, window_starts, IndexedDataset, PackedBatch};
use crate::error::{ForgeError, Result};
use crate::fim::{mix64, render_fim, split_document, FimMode};
use crate::model::checkpoint::{assemble, read_records, Reader};
use crate::model::{backward_accumulate, cross_entropy, forward, write_tensor_record, Checkpoint, Parameters};
use crate::tokenizer::{BpeVocab, TokenId};

pub const LOSS_LOG: &str = "loss.tsv";
pub const GRAD_NORM_LOG: &str = "grad_norm.tsv";
pub const STATE_MAGIC: &[u8; 8] = b"NTOPT1\0\0";
const STATE_VERSION: u32 = 1;

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:06}.bin"))
}

/// Optimizer moments and data position saved beside a checkpoint.
pub fn state_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:06}.state"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub tokens_seen: u64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Token stream and window order for one pass over the dataset.
struct Epoch {
    index: u64,
    stream: Vec<TokenId>,
    starts: Vec<usize>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    params: Parameters<f32>,
    state: OptimizerState<f32>,
    grads: Parameters<f32>,
    data: &'a IndexedDataset,
    vocab: &'a BpeVocab,
    step: u64,
    epoch: u64,
    batch_in_epoch: usize,
    current: Option<Epoch>,
    log: Vec<LogRow>,
    out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(params: Parameters<f32>, data: &'a IndexedDataset, vocab: &'a BpeVocab, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        let m = &params.config;
        if m.vocab_size < vocab.vocab_size() {
            return Err(ForgeError::Config(format!(
                "model vocab_size {} is smaller than the tokenizer's {}",
                m.vocab_size,
                vocab.vocab_size()
            )));
        }
        if cfg.context_length > m.max_position_embeddings {
            return Err(ForgeError::Config(format!(
                "context_length {} exceeds max_position_embeddings {}",
                cfg.context_length, m.max_position_embeddings
            )));
        }
        let need = cfg.global_batch_sequences * (cfg.context_length + 1);
        if data.total_tokens() < need {
            return Err(ForgeError::InsufficientTokens { have: data.total_tokens(), need });
        }
        let state = OptimizerState::new(&params);
        let grads = params.zeros_like();
        Ok(Trainer {
            cfg,
            params,
            state,
            grads,
            data,
            vocab,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            current: None,
            log: Vec::new(),
            out_dir: None,
        })
    }

    /// Picks up a run from the checkpoint written at `step` in `dir`,
    /// restoring parameters, moments, schedule position and data cursor.
    pub fn resume(dir: &Path, step: u64, data: &'a IndexedDataset, vocab: &'a BpeVocab, cfg: TrainConfig) -> Result<Self> {
        let params = Parameters::<f32>::load(&checkpoint_path(dir, step))?;
        let mut t = Trainer::new(params, data, vocab, cfg)?;
        let saved = t.load_state(&state_path(dir, step))?;
        if saved.step != step {
            return Err(ForgeError::Invalid(format!("state file records step {}, expected {step}", saved.step)));
        }
        t.step = saved.step;
        t.epoch = saved.epoch;
        t.batch_in_epoch = saved.batch_in_epoch;
        t.log = read_loss_log(dir)?.into_iter().filter(|r| r.step <= step).collect();
        t.set_out_dir(dir)?;
        Ok(t)
    }

    /// Starts a fresh schedule from a finished run's weights and moments, as
    /// for an extra low-rate epoch. The data cursor restarts at epoch 0.
    pub fn continue_from(
        ckpt: &Path,
        state: &Path,
        data: &'a IndexedDataset,
        vocab: &'a BpeVocab,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let params = Parameters::<f32>::load(ckpt)?;
        let mut t = Trainer::new(params, data, vocab, cfg)?;
        t.load_state(state)?;
        Ok(t)
    }

    /// Writes checkpoints and logs into `dir` from now on. Existing log
    /// files are rewritten to hold exactly the in-memory rows.
    pub fn set_out_dir(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| ForgeError::io(dir, e))?;
        let mut loss = String::new();
        let mut norms = String::new();
        for r in &self.log {
            loss.push_str(&loss_line(r));
            norms.push_str(&norm_line(r, self.cfg.grad_clip));
        }
        for (name, body) in [(LOSS_LOG, loss), (GRAD_NORM_LOG, norms)] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| ForgeError::io(&p, e))?;
        }
        self.out_dir = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn params(&self) -> &Parameters<f32> {
        &self.params
    }

    pub fn into_params(self) -> Parameters<f32> {
        self.params
    }

    pub fn state(&self) -> &OptimizerState<f32> {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Runs until `total_steps`.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.total_steps)
    }

    pub fn run_until(&mut self, last: u64) -> Result<()> {
        let last = last.min(self.cfg.total_steps);
        while self.step < last {
            self.train_step()?;
        }
        Ok(())
    }

    /// One optimizer step over a full global batch.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let batch = self.next_batch()?;
        let next = self.step + 1;
        let micro = self.cfg.micro_batch;
        let scale = micro as f32 / batch.batch as f32;
        self.grads.fill_zero();
        let mut loss = 0.0f64;
        for start in (0..batch.batch).step_by(micro) {
            let mb = batch.slice(start, start + micro);
            let out = forward(&self.params, &mb.inputs, mb.batch, mb.context)?;
            loss += backward_accumulate(&self.params, &out.cache, &mb.targets, scale, &mut self.grads)? * scale as f64;
        }
        if !loss.is_finite() {
            return Err(ForgeError::Divergence { step: next, tensor: "loss".into() });
        }
        let grad_norm = if self.cfg.grad_clip > 0.0 {
            clip_global_norm(&mut self.grads, self.cfg.grad_clip)
        } else {
            clip_global_norm(&mut self.grads, f64::INFINITY)
        };
        let lr = lr_at(&self.cfg, next);
        adamw_update(&mut self.params, &self.grads, &mut self.state, &AdamHyper::from(&self.cfg), lr)?;
        self.step = next;
        let row = LogRow { step: next, lr, loss, tokens_seen: next * self.cfg.tokens_per_step(), grad_norm };
        self.log.push(row);
        debug!("step {next} lr {lr:.3e} loss {loss:.4} |g| {grad_norm:.3}");
        if let Some(dir) = self.out_dir.clone() {
            append(&dir.join(LOSS_LOG), &loss_line(&row))?;
            append(&dir.join(GRAD_NORM_LOG), &norm_line(&row, self.cfg.grad_clip))?;
            if next % self.cfg.checkpoint_every == 0 || next == self.cfg.total_steps {
                self.save_checkpoint(&dir)?;
            }
        }
        Ok(row)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let ckpt = checkpoint_path(dir, self.step);
        self.params.save(&ckpt)?;
        let state = state_path(dir, self.step);
        let tmp = state.with_extension("partial");
        fs::write(&tmp, self.state_bytes()).map_err(|e| ForgeError::io(&tmp, e))?;
        fs::rename(&tmp, &state).map_err(|e| ForgeError::io(&state, e))?;
        info!("checkpoint {}", ckpt.display());
        Ok(())
    }

    fn state_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&STATE_VERSION.to_le_bytes());
        for v in [self.step, self.state.step, self.epoch, self.batch_in_epoch as u64] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (prefix, moments) in [("m.", &self.state.m), ("v.", &self.state.v)] {
            for (name, t) in moments.tensors() {
                write_tensor_record(&mut buf, &format!("{prefix}{name}"), &t.shape, &t.data);
            }
        }
        buf
    }

    /// Restores the optimizer moments from `path` and returns the cursor it holds.
    fn load_state(&mut self, path: &Path) -> Result<SavedCursor> {
        let buf = fs::read(path).map_err(|e| ForgeError::io(path, e))?;
        let what = path.display().to_string();
        let mut r = Reader::new(&buf, what.clone());
        if r.take(8)? != STATE_MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let adam_step = r.u64()?;
        let epoch = r.u64()?;
        let batch_in_epoch = r.u64()? as usize;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in read_records(&mut r)? {
            match name.split_once('.') {
                Some(("m", rest)) => m.push((rest.to_string(), t)),
                Some(("v", rest)) => v.push((rest.to_string(), t)),
                _ => return Err(ForgeError::format(what.clone(), 0, format!("unexpected record {name}"))),
            }
        }
        let cfg = self.params.config;
        self.state = OptimizerState { step: adam_step, m: assemble(&cfg, m, &what)?, v: assemble(&cfg, v, &what)? };
        Ok(SavedCursor { step, epoch, batch_in_epoch })
    }

    fn next_batch(&mut self) -> Result<PackedBatch> {
        let b = self.cfg.global_batch_sequences;
        loop {
            if self.current.as_ref().map(|e| e.index) != Some(self.epoch) {
                self.current = Some(self.build_epoch(self.epoch)?);
            }
            let ep = self.current.as_ref().expect("epoch built above");
            let total = ep.starts.len() / b;
            if total == 0 {
                return Err(ForgeError::InsufficientTokens { have: ep.stream.len(), need: b * (self.cfg.context_length + 1) });
            }
            if self.batch_in_epoch < total {
                let i = self.batch_in_epoch;
                self.batch_in_epoch += 1;
                return Ok(gather(&ep.stream, &ep.starts[i * b..(i + 1) * b], self.cfg.context_length));
            }
            self.epoch += 1;
            self.batch_in_epoch = 0;
        }
    }

    /// FIM is redrawn every epoch, so each pass sees fresh split points.
    /// Documents already carrying sentinels pass through unchanged.
    fn build_epoch(&self, index: u64) -> Result<Epoch> {
        let fim = &self.cfg.fim;
        let sp = self.vocab.specials();
        let mut stream = Vec::with_capacity(self.data.total_tokens() + self.data.doc_count() * 3);
        for (i, doc) in self.data.docs().enumerate() {
            let already = doc.iter().any(|&t| t == sp.fim_prefix || t == sp.fim_suffix || t == sp.fim_middle);
            if fim.fim_rate == 0.0 || already {
                stream.extend_from_slice(doc);
                continue;
            }
            let body = doc.strip_suffix(&[sp.eod]).unwrap_or(doc);
            let text = self.vocab.decode(body)?;
            if text.is_empty() {
                stream.extend_from_slice(doc);
                continue;
            }
            let key = mix64(index) ^ i as u64;
            let split = split_document(&text, fim, &mut fim.doc_rng(key))?;
            if split.mode == FimMode::None {
                stream.extend_from_slice(doc);
            } else {
                stream.extend(render_fim(&split, self.vocab));
            }
        }
        let starts = window_starts(stream.len(), self.cfg.context_length, mix64(self.cfg.seed ^ mix64(index)))?;
        debug!("epoch {index}: {} tokens, {} windows", stream.len(), starts.len());
        Ok(Epoch { index, stream, starts })
    }
}

struct SavedCursor {
    step: u64,
    epoch: u64,
    batch_in_epoch: usize,
}

fn gather(stream: &[TokenId], starts: &[usize], c: usize) -> PackedBatch {
    let mut inputs = Vec::with_capacity(starts.len() * c);
    let mut targets = Vec::with_capacity(starts.len() * c);
    for &s in starts {
        inputs.extend_from_slice(&stream[s..s + c]);
        targets.extend_from_slice(&stream[s + 1..s + c + 1]);
    }
    PackedBatch { batch: starts.len(), context: c, inputs, targets }
}

fn loss_line(r: &LogRow) -> String {
    format!("{}\t{}\t{}\t{}\n", r.step, r.lr, r.loss, r.tokens_seen)
}

fn norm_line(r: &LogRow, clip: f64) -> String {
    format!("{}\t{}\t{}\n", r.step, r.grad_norm, clip > 0.0 && r.grad_norm > clip)
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| ForgeError::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| ForgeError::io(path, e))
}

/// Rows of the loss log (and grad-norm log, when present) in `dir`.
pub fn read_loss_log(dir: &Path) -> Result<Vec<LogRow>> {
    let path = dir.join(LOSS_LOG);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ForgeError::io(&path, e)),
    };
    let norms: Vec<f64> = fs::read_to_string(dir.join(GRAD_NORM_LOG))
        .unwrap_or_default()
        .lines()
        .filter_map(|l| l.split('\t').nth(1)?.parse().ok())
        .collect();
    let file = path.display().to_string();
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || ForgeError::format(file.clone(), n + 1, "expected step, lr, loss, tokens_seen");
        if f.len() != 4 {
            return Err(bad());
        }
        rows.push(LogRow {
            step: f[0].parse().map_err(|_| bad())?,
            lr: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
            tokens_seen: f[3].parse().map_err(|_| bad())?,
            grad_norm: norms.get(n).copied().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// Up to `max_batches` packed batches from a held-out dataset, without FIM.
pub fn heldout_batches(data: &IndexedDataset, context: usize, batch: usize, max_batches: usize, seed: u64) -> Result<Vec<PackedBatch>> {
    Ok(pack_stream(data.tokens(), context, batch, seed)?.take(max_batches).collect())
}

/// Mean next-token cross-entropy over `batches`.
pub fn evaluate_loss(params: &Parameters<f32>, batches: &[PackedBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(ForgeError::Invalid("no evaluation batches".into()));
    }
    let mut total = 0.0;
    for b in batches {
        let out = forward(params, &b.inputs, b.batch, b.context)?;
        total += cross_entropy(&out.logits, &b.targets, params.config.vocab_size)?;
    }
    Ok(total / batches.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn setup(dir: &Path) -> (IndexedDataset, BpeVocab) {
        let vocab = BpeVocab::bytes_only();
        let docs: Vec<Vec<TokenId>> = (0..40)
            .map(|i| {
                let mut t = vocab.encode(format!("int f{i}() {{ return {i}; }}").as_bytes());
                t.push(vocab.specials().eod);
                t
            })
            .collect();
        (IndexedDataset::write(&dir.join("d"), &docs).unwrap(), vocab)
    }

    fn model() -> ModelConfig {
        ModelConfig {
            hidden_size: 16,
            intermediate_size: 32,
            max_position_embeddings: 16,
            num_attention_heads: 2,
            num_hidden_layers: 1,
            vocab_size: 260,
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            total_steps: 12,
            warmup_steps: 2,
            lr_max: 1e-2,
            lr_min: 1e-3,
            global_batch_sequences: 4,
            micro_batch: 2,
            context_length: 16,
            checkpoint_every: 5,
            seed: 3,
            ..TrainConfig::experiment2()
        }
    }

    #[test]
    fn checkpoints_and_log_rows() {
        let dir = tempfile::tempdir().unwrap();
        let (data, vocab) = setup(dir.path());
        let out = dir.path().join("run");
        let mut t = Trainer::new(init_params(&model(), 1).unwrap(), &data, &vocab, cfg()).unwrap();
        t.set_out_dir(&out).unwrap();
        t.run().unwrap();
        let mut ckpts: Vec<String> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".bin"))
            .collect();
        ckpts.sort();
        assert_eq!(ckpts, ["ckpt-000005.bin", "ckpt-000010.bin", "ckpt-000012.bin"]);
        let rows = read_loss_log(&out).unwrap();
        assert_eq!(rows.len(), 12);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.step, i as u64 + 1);
            assert_eq!(r.tokens_seen, r.step * 4 * 16);
            assert_eq!(r.lr, lr_at(&cfg(), r.step));
            assert_eq!(r, &t.log()[i]);
        }
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let dir = tempfile::tempdir().unwrap();
        let (data, vocab) = setup(dir.path());
        let run = || {
            let mut t = Trainer::new(init_params(&model(), 1).unwrap(), &data, &vocab, cfg()).unwrap();
            t.run_until(10).unwrap();
            t.into_params().to_checkpoint_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn accumulation_matches_full_batch() {
        let dir = tempfile::tempdir().unwrap();
        let (data, vocab) = setup(dir.path());
        let run = |micro| {
            let c = TrainConfig { micro_batch: micro, ..cfg() };
            let mut t = Trainer::new(init_params(&model(), 1).unwrap(), &data, &vocab, c).unwrap();
            t.run_until(3).unwrap();
            t.into_params()
        };
        let (a, b) = (run(1), run(4));
        for ((n, x), (_, y)) in a.tensors().into_iter().zip(b.tensors()) {
            for (p, q) in x.data.iter().zip(&y.data) {
                assert!((p - q).abs() <= 1e-5, "{n}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn resume_restores_logs_and_cursor() {
        let dir = tempfile::tempdir().unwrap();
        let (data, vocab) = setup(dir.path());
        let out = dir.path().join("run");
        let mut t = Trainer::new(init_params(&model(), 1).unwrap(), &data, &vocab, cfg()).unwrap();
        t.set_out_dir(&out).unwrap();
        t.run_until(7).unwrap();
        let r = Trainer::resume(&out, 5, &data, &vocab, cfg()).unwrap();
        assert_eq!(r.step_count(), 5);
        assert_eq!(r.log().len(), 5);
        assert_eq!(read_loss_log(&out).unwrap().len(), 5);
        assert_eq!(r.state().step, 5);
    }

    #[test]
    fn too_little_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (data, vocab) = setup(dir.path());
        let c = TrainConfig { global_batch_sequences: 1000, micro_batch: 1000, ..cfg() };
        assert!(matches!(
            Trainer::new(init_params(&model(), 1).unwrap(), &data, &vocab, c),
            Err(ForgeError::InsufficientTokens { .. })
        ));
    }

    #[test]
    fn loss_decreases_on_tiny_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let (data, vocab) = setup(dir.path());
        let c = TrainConfig { total_steps: 60, fim: crate::fim::FimConfig::disabled(), ..cfg() };
        let p0 = init_params(&model(), 1).unwrap();
        let val = heldout_batches(&data, 16, 4, 4, 0).unwrap();
        let before = evaluate_loss(&p0, &val).unwrap();
        let mut t = Trainer::new(p0, &data, &vocab, c).unwrap();
        t.run().unwrap();
        let after = evaluate_loss(t.params(), &val).unwrap();
        assert!(after < 0.7 * before, "{before} → {after}");
    }
}
