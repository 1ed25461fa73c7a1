//! `forge`: one binary driving every pipeline stage.

mod manifest;

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use forge_core::datapipe::{self, IndexedDataset};
use forge_core::eval::{fim_exact_match, load_suite, make_fim_tasks, run_passk};
use forge_core::fim::{FimConfig, FimMode};
use forge_core::infer::{generate, infill, DecoderWeights, FimPrompt, GenerationConfig, QuantDecoder};
use forge_core::model::{init_params, Checkpoint, ModelConfig, Parameters, CKPT_MAGIC};
use forge_core::quant::{estimate_size, quantize_model, QuantModel, QuantPolicy, Scheme, QUANT_MAGIC};
use forge_core::synth::java_corpus;
use forge_core::tokenizer::{train_bpe, BpeVocab};
use forge_core::trainer::{checkpoint_path, state_path, RunConfig, Trainer};

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "forge", version, about = "Train, quantize, run and evaluate small code models")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads where a stage can use them.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Where to write the run manifest (defaults to next to the outputs).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-level BPE vocabulary from a record file.
    TokenizerTrain {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize records into an indexed dataset, optionally applying FIM.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fim_rate: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        spm_fraction: f64,
    },
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long, conflicts_with = "init_from")]
        resume: bool,
        /// Start a fresh schedule from this checkpoint and its optimizer state.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Convert a float checkpoint into a quantized container.
    Quantize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Scheme,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a prompt.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        /// Prompt file, or `-` for standard input.
        #[arg(long)]
        prompt: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Fill the gap between a prefix and a suffix.
    Infill {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        prefix: PathBuf,
        #[arg(long)]
        suffix: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Psm)]
        mode: ModeArg,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Evaluate a model.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Print parameter count and storage sizes for a model shape.
    Info {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic Java record file.
    Synth {
        #[arg(long)]
        docs: usize,
        #[arg(long, default_value_t = 4)]
        max_fields: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Sample completions and score them with each problem's verifier.
    Passk {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        suite: PathBuf,
        #[arg(short)]
        n: usize,
        #[arg(short)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Mask one line per solution and score exact infills.
    Fim {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        solutions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Psm)]
        mode: ModeArg,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// Evaluate only the first N tasks.
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Float checkpoint or quantized container.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long, default_value_t = 128)]
    max_new: usize,
    #[arg(long, default_value_t = 0.0)]
    temp: f64,
    #[arg(long, default_value_t = 1.0)]
    top_p: f64,
    /// Stop string; `\n`, `\t` and `\\` escapes are understood. Repeatable.
    #[arg(long)]
    stop: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Psm,
    Spm,
}

impl From<ModeArg> for FimMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Psm => FimMode::Psm,
            ModeArg::Spm => FimMode::Spm,
        }
    }
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    Scheme::parse(s).ok_or_else(|| format!("unknown scheme {s:?} (expected f32, q8 or q4)"))
}

fn unescape(s: &str) -> Vec<u8> {
    let mut out = Vec::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next() {
            Some('n') => out.push(b'\n'),
            Some('t') => out.push(b'\t'),
            Some('\\') => out.push(b'\\'),
            Some(other) => {
                out.push(b'\\');
                let mut buf = [0; 4];
                out.extend_from_slice(other.encode_utf8(&mut buf).as_bytes());
            }
            None => out.push(b'\\'),
        }
    }
    out
}

impl SamplingArgs {
    fn config(&self, seed: u64) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.max_new,
            temperature: self.temp,
            top_p: self.top_p,
            stop_tokens: None,
            stop_strings: self.stop.iter().map(|s| unescape(s)).collect(),
            seed,
        }
    }

    fn record(&self, m: &mut Manifest) {
        m.config("max_new", self.max_new).config("temp", self.temp).config("top_p", self.top_p).config("stop", self.stop.clone());
    }
}

fn vocab_inputs(dir: &Path, m: &mut Manifest) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    for f in &files {
        m.input(f)?;
    }
    Ok(())
}

/// A float checkpoint or quantized container, told apart by magic bytes.
fn load_model(path: &Path) -> Result<Box<dyn DecoderWeights + Sync>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(QUANT_MAGIC) {
        Ok(Box::new(QuantDecoder::new(QuantModel::from_bytes(&bytes)?)))
    } else if bytes.starts_with(CKPT_MAGIC) {
        Ok(Box::new(Parameters::<f32>::from_checkpoint_bytes(&bytes)?))
    } else {
        bail!("{}: neither a checkpoint nor a quantized container", path.display())
    }
}

fn load_pair(args: &ModelArgs, m: &mut Manifest) -> Result<(Box<dyn DecoderWeights + Sync>, BpeVocab)> {
    m.input(&args.model)?;
    vocab_inputs(&args.vocab, m)?;
    let model = load_model(&args.model)?;
    let vocab = BpeVocab::load(&args.vocab)?;
    if vocab.vocab_size() != model.config().vocab_size {
        bail!("vocabulary has {} tokens but the model expects {}", vocab.vocab_size(), model.config().vocab_size);
    }
    Ok((model, vocab))
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    if path == Path::new("-") {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        Ok(buf)
    } else {
        fs::read(path).with_context(|| format!("reading {}", path.display()))
    }
}

/// `file.ext` → `file.ext.manifest.json`.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn latest_state(dir: &Path) -> Result<u64> {
    let mut best = None;
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("ckpt-").and_then(|s| s.strip_suffix(".state")).and_then(|s| s.parse::<u64>().ok()) {
            best = best.max(Some(step));
        }
    }
    best.with_context(|| format!("no checkpoint to resume in {}", dir.display()))
}

fn human_bytes(b: u64) -> String {
    format!("{b} bytes ({:.2} GB)", b as f64 / 1e9)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let threads = cli.threads.max(1);
    let explicit_manifest = cli.manifest.clone();
    let (mut m, default_manifest): (Manifest, PathBuf) = match cli.command {
        Command::TokenizerTrain { input, vocab_size, out } => {
            let mut m = Manifest::new("tokenizer-train");
            m.input(&input)?.config("vocab_size", vocab_size).config("out", out.display().to_string());
            let docs = datapipe::ingest(&input)?.docs;
            let vocab = train_bpe(docs.iter().map(|d| d.text.as_bytes()), vocab_size)?;
            vocab.save(&out)?;
            println!("{}", json!({ "vocab_size": vocab.vocab_size(), "merges": vocab.merges().len(), "docs": docs.len() }));
            (m, out.join("manifest.json"))
        }
        Command::Preprocess { input, vocab, out, fim_rate, spm_fraction } => {
            let mut m = Manifest::new("preprocess");
            m.input(&input)?.config("vocab", vocab.display().to_string()).config("out", out.display().to_string());
            let v = BpeVocab::load(&vocab)?;
            let docs = datapipe::ingest(&input)?.docs;
            let fim = fim_rate.map(|fim_rate| FimConfig { fim_rate, spm_fraction, seed: seed.unwrap_or(0) });
            if let Some(f) = &fim {
                f.validate()?;
                m.config("fim_rate", f.fim_rate).config("spm_fraction", f.spm_fraction).seed("fim", f.seed);
            }
            let (ds, stats) = datapipe::preprocess(&docs, &v, &out, fim.as_ref())?;
            let mut line = json!({ "docs": ds.doc_count(), "tokens": ds.total_tokens() });
            if let Some(s) = stats {
                line["fim"] = serde_json::to_value(s.report()?)?;
            }
            println!("{line}");
            (m, sidecar(&out))
        }
        Command::Train { config, data, vocab, out, resume, init_from } => {
            let mut m = Manifest::new("train");
            m.input(&config)?.input(&datapipe::bin_path(&data))?.input(&datapipe::idx_path(&data))?;
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut rc = RunConfig::parse(&text, &config.display().to_string())?;
            if let Some(s) = seed {
                rc.train.seed = s;
                rc.train.fim.seed = s;
            }
            m.config("run", rc.to_text()).config("out", out.display().to_string()).seed("train", rc.train.seed);
            let ds = IndexedDataset::open(&data)?;
            let v = BpeVocab::load(&vocab)?;
            let mut trainer = if resume {
                let step = latest_state(&out)?;
                m.config("resume_step", step);
                Trainer::resume(&out, step, &ds, &v, rc.train)?
            } else if let Some(ckpt) = &init_from {
                let state = ckpt.with_extension("state");
                m.input(ckpt)?.input(&state)?;
                let mut t = Trainer::continue_from(ckpt, &state, &ds, &v, rc.train)?;
                t.set_out_dir(&out)?;
                t
            } else {
                let params = init_params::<f32>(&rc.model, rc.train.seed)?;
                let mut t = Trainer::new(params, &ds, &v, rc.train)?;
                t.set_out_dir(&out)?;
                t
            };
            trainer.run()?;
            let last = trainer.log().last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "{}",
                json!({ "steps": trainer.step_count(), "final_loss": last, "checkpoint": checkpoint_path(&out, trainer.step_count()).display().to_string() })
            );
            log::info!("optimizer state at {}", state_path(&out, trainer.step_count()).display());
            (m, out.join("manifest.json"))
        }
        Command::Quantize { ckpt, scheme, out } => {
            let mut m = Manifest::new("quantize");
            m.input(&ckpt)?.config("scheme", scheme.name()).config("out", out.display().to_string());
            let params = Parameters::<f32>::load(&ckpt)?;
            let q = quantize_model(&params, &QuantPolicy::for_scheme(scheme))?;
            q.save(&out)?;
            let size = fs::metadata(&out)?.len();
            println!("{}", json!({ "scheme": scheme.name(), "bytes": size }));
            (m, sidecar(&out))
        }
        Command::Generate { model, prompt, sampling } => {
            let mut m = Manifest::new("generate");
            let (w, v) = load_pair(&model, &mut m)?;
            let text = read_input(&prompt)?;
            if prompt != Path::new("-") {
                m.input(&prompt)?;
            }
            let cfg = sampling.config(seed.unwrap_or(0));
            sampling.record(&mut m);
            m.seed("sampling", cfg.seed);
            let g = generate(w.as_ref(), &text, &cfg, &v)?;
            std::io::stdout().write_all(&g.text)?;
            log::info!("finished: {}", g.finish.as_str());
            m.config("finish", g.finish.as_str());
            (m, PathBuf::from("generate.manifest.json"))
        }
        Command::Infill { model, prefix, suffix, mode, sampling } => {
            let mut m = Manifest::new("infill");
            let (w, v) = load_pair(&model, &mut m)?;
            m.input(&prefix)?.input(&suffix)?;
            let p = FimPrompt { prefix: read_input(&prefix)?, suffix: read_input(&suffix)?, mode: mode.into() };
            let cfg = sampling.config(seed.unwrap_or(0));
            sampling.record(&mut m);
            m.seed("sampling", cfg.seed).config("mode", format!("{:?}", p.mode).to_lowercase());
            let g = infill(w.as_ref(), &p, &cfg, &v)?;
            std::io::stdout().write_all(&g.text)?;
            m.config("finish", g.finish.as_str());
            (m, PathBuf::from("infill.manifest.json"))
        }
        Command::Eval(EvalCommand::Passk { model, suite, n, k, out, sampling }) => {
            let mut m = Manifest::new("eval passk");
            let (w, v) = load_pair(&model, &mut m)?;
            m.input(&suite)?.config("n", n).config("k", k).config("threads", threads);
            let cfg = sampling.config(seed.unwrap_or(0));
            sampling.record(&mut m);
            m.seed("sampling", cfg.seed);
            let problems = load_suite(&suite)?;
            let report = run_passk(w.as_ref(), &problems, n, k, &cfg, &v, threads)?;
            print!("{}", report.to_text());
            let manifest_path = match &out {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    fs::write(dir.join("report.txt"), report.to_text())?;
                    fs::write(dir.join("completions.jsonl"), report.records_jsonl())?;
                    dir.join("manifest.json")
                }
                None => PathBuf::from("eval-passk.manifest.json"),
            };
            (m, manifest_path)
        }
        Command::Eval(EvalCommand::Fim { model, solutions, out, mode, max_new, limit }) => {
            let mut m = Manifest::new("eval fim");
            let (w, v) = load_pair(&model, &mut m)?;
            let task_seed = seed.unwrap_or(0);
            m.input(&solutions)?.config("mode", format!("{mode:?}").to_lowercase()).config("max_new", max_new).seed("tasks", task_seed);
            if let Some(l) = limit {
                m.config("limit", l);
            }
            let docs = datapipe::ingest(&solutions)?.docs;
            let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
            let mut set = make_fim_tasks(&texts, task_seed);
            if let Some(l) = limit {
                set.tasks.truncate(l);
            }
            let report = fim_exact_match(w.as_ref(), &set.tasks, &GenerationConfig::greedy(max_new), &v, mode.into())?;
            print!("{}", report.to_text());
            let manifest_path = match &out {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    fs::write(dir.join("report.txt"), report.to_text())?;
                    let rows: String = report.rows.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
                    fs::write(dir.join("rows.jsonl"), rows)?;
                    dir.join("manifest.json")
                }
                None => PathBuf::from("eval-fim.manifest.json"),
            };
            (m, manifest_path)
        }
        Command::Info { config } => {
            let mut m = Manifest::new("info");
            let cfg = match &config {
                Some(p) => {
                    m.input(p)?;
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    RunConfig::parse(&text, &p.display().to_string())?.model
                }
                None => ModelConfig::base_1b(),
            };
            let count = cfg.count_params();
            let mut sizes = serde_json::Map::new();
            println!("parameters: {count} ({:.3e})", count as f64);
            println!("bf16: {}", human_bytes(2 * count));
            for (name, policy) in [("f32", QuantPolicy::full()), ("q8", QuantPolicy::q8()), ("q4", QuantPolicy::q4())] {
                let size = estimate_size(&cfg, &policy)?;
                println!("{name} container: {}", human_bytes(size));
                sizes.insert(name.into(), size.into());
            }
            m.config("parameters", count).config("sizes", sizes);
            (m, PathBuf::from("info.manifest.json"))
        }
        Command::Synth { docs, max_fields, out } => {
            let mut m = Manifest::new("synth");
            let s = seed.unwrap_or(0);
            m.config("docs", docs).config("max_fields", max_fields).seed("synth", s);
            datapipe::write_records(&out, &java_corpus(docs, max_fields, s))?;
            (m, sidecar(&out))
        }
    };
    m.config("threads", threads);
    m.write(&explicit_manifest.unwrap_or(default_manifest))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
