use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::pass_at_k;
use crate::error::{ForgeError, Result};
use crate::fim::mix64;
use crate::infer::{generate, DecoderWeights, GenerationConfig};
use crate::tokenizer::BpeVocab;

pub const DEFAULT_TIMEOUT_SECS: f64 = 10.0;

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}

/// One suite line: `{"id", "prompt", "verifier_cmd", "timeout"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub prompt: String,
    /// Run with `sh -c`; receives the completion on standard input.
    pub verifier_cmd: String,
    #[serde(default = "default_timeout")]
    pub timeout: f64,
}

pub fn load_suite(path: &Path) -> Result<Vec<Problem>> {
    let text = std::fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
    let file = path.display().to_string();
    let mut out: Vec<Problem> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem = serde_json::from_str(line).map_err(|e| ForgeError::format(file.clone(), n + 1, e.to_string()))?;
        if !(p.timeout > 0.0) {
            return Err(ForgeError::format(file.clone(), n + 1, format!("timeout must be > 0, got {}", p.timeout)));
        }
        if out.iter().any(|q| q.id == p.id) {
            return Err(ForgeError::format(file.clone(), n + 1, format!("duplicate problem id {}", p.id)));
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(ForgeError::Invalid(format!("{file}: suite has no problems")));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Timeout,
    Error,
}

/// Pipes `completion` into the verifier; exit status 0 passes.
pub fn verify(cmd: &str, completion: &[u8], timeout: Duration) -> Verdict {
    let child = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .stdin(Stdio::piped())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn();
    let Ok(mut child) = child else { return Verdict::Error };
    let mut stdin = child.stdin.take().expect("stdin was piped");
    let input = completion.to_vec();
    // A verifier may exit without reading; a broken pipe is not an error.
    let writer = std::thread::spawn(move || {
        let _ = stdin.write_all(&input);
    });
    let deadline = Instant::now() + timeout;
    let verdict = loop {
        match child.try_wait() {
            Ok(Some(status)) => break if status.success() { Verdict::Pass } else { Verdict::Fail },
            Ok(None) if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                break Verdict::Timeout;
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(2)),
            Err(_) => break Verdict::Error,
        }
    };
    let _ = writer.join();
    verdict
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub problem_id: String,
    pub sample: usize,
    pub completion: String,
    pub verdict: Verdict,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProblemResult {
    pub id: String,
    pub n: usize,
    pub correct: usize,
    pub errors: usize,
    pub pass_at_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PassKReport {
    pub n: usize,
    pub k: usize,
    pub problems: Vec<ProblemResult>,
    pub mean: f64,
    pub records: Vec<CompletionRecord>,
}

impl PassKReport {
    /// Per-problem rows, then `pass@k <k> = <mean>`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("id\tcorrect\tn\terrors\tpass@k\n");
        for p in &self.problems {
            writeln!(s, "{}\t{}\t{}\t{}\t{}", p.id, p.correct, p.n, p.errors, p.pass_at_k).unwrap();
        }
        writeln!(s, "pass@k {} = {}", self.k, self.mean).unwrap();
        s
    }

    pub fn records_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

/// Samples `n` completions per problem, verifies each with up to `workers`
/// concurrent verifier processes, and averages pass@k over problems.
pub fn run_passk<W: DecoderWeights + ?Sized>(
    model: &W,
    suite: &[Problem],
    n: usize,
    k: usize,
    gencfg: &GenerationConfig,
    vocab: &BpeVocab,
    workers: usize,
) -> Result<PassKReport> {
    if suite.is_empty() {
        return Err(ForgeError::Invalid("suite has no problems".into()));
    }
    if k == 0 || k > n {
        return Err(ForgeError::Invalid(format!("need 1 ≤ k ≤ n, got k={k}, n={n}")));
    }
    let mut jobs = Vec::with_capacity(suite.len() * n);
    for (pi, p) in suite.iter().enumerate() {
        for s in 0..n {
            let cfg = GenerationConfig { seed: mix64(gencfg.seed ^ mix64((pi * n + s) as u64)), ..gencfg.clone() };
            let g = generate(model, p.prompt.as_bytes(), &cfg, vocab)?;
            jobs.push((pi, s, g.text));
        }
    }
    let workers = workers.clamp(1, jobs.len());
    let mut records: Vec<Option<CompletionRecord>> = vec![None; jobs.len()];
    std::thread::scope(|scope| {
        for (chunk_jobs, chunk_out) in jobs.chunks(jobs.len().div_ceil(workers)).zip(records.chunks_mut(jobs.len().div_ceil(workers))) {
            scope.spawn(move || {
                for ((pi, s, text), slot) in chunk_jobs.iter().zip(chunk_out) {
                    let p = &suite[*pi];
                    let start = Instant::now();
                    let verdict = verify(&p.verifier_cmd, text, Duration::from_secs_f64(p.timeout));
                    *slot = Some(CompletionRecord {
                        problem_id: p.id.clone(),
                        sample: *s,
                        completion: String::from_utf8_lossy(text).into_owned(),
                        verdict,
                        wall_secs: start.elapsed().as_secs_f64(),
                    });
                }
            });
        }
    });
    let records: Vec<CompletionRecord> = records.into_iter().map(|r| r.expect("every job ran")).collect();
    let problems = recount(suite, &records, n, k)?;
    let mean = problems.iter().map(|p| p.pass_at_k).sum::<f64>() / problems.len() as f64;
    Ok(PassKReport { n, k, problems, mean, records })
}

fn recount(suite: &[Problem], records: &[CompletionRecord], n: usize, k: usize) -> Result<Vec<ProblemResult>> {
    suite
        .iter()
        .map(|p| {
            let mine: Vec<&CompletionRecord> = records.iter().filter(|r| r.problem_id == p.id).collect();
            let correct = mine.iter().filter(|r| r.verdict == Verdict::Pass).count();
            let errors = mine.iter().filter(|r| r.verdict == Verdict::Error).count();
            Ok(ProblemResult {
                id: p.id.clone(),
                n,
                correct,
                errors,
                pass_at_k: pass_at_k::<f64>(n as u64, correct as u64, k as u64)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn toy() -> crate::model::Parameters<f32> {
        let cfg = ModelConfig {
            hidden_size: 16,
            intermediate_size: 32,
            max_position_embeddings: 32,
            num_attention_heads: 2,
            num_hidden_layers: 1,
            vocab_size: 260,
        };
        init_params(&cfg, 0).unwrap()
    }

    fn problem(id: &str, cmd: &str) -> Problem {
        Problem { id: id.into(), prompt: "class A {".into(), verifier_cmd: cmd.into(), timeout: 5.0 }
    }

    #[test]
    fn verifier_contract() {
        assert_eq!(verify("exit 0", b"", Duration::from_secs(5)), Verdict::Pass);
        assert_eq!(verify("exit 3", b"", Duration::from_secs(5)), Verdict::Fail);
        assert_eq!(verify("grep -q needle", b"hay needle hay", Duration::from_secs(5)), Verdict::Pass);
        assert_eq!(verify("grep -q needle", b"hay", Duration::from_secs(5)), Verdict::Fail);
        assert_eq!(verify("sleep 5", b"", Duration::from_millis(100)), Verdict::Timeout);
    }

    #[test]
    fn always_pass_suite() {
        let suite = [problem("a", "true"), problem("b", "cat > /dev/null")];
        let gen = GenerationConfig::greedy(4);
        let r = run_passk(&toy(), &suite, 4, 1, &gen, &BpeVocab::bytes_only(), 3).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.records.len(), 8);
        let order: Vec<(&str, usize)> = r.records.iter().map(|x| (x.problem_id.as_str(), x.sample)).collect();
        assert_eq!(order, [("a", 0), ("a", 1), ("a", 2), ("a", 3), ("b", 0), ("b", 1), ("b", 2), ("b", 3)]);
        assert!(r.to_text().ends_with("pass@k 1 = 1\n"));
    }

    #[test]
    fn mean_matches_recount_of_records() {
        let suite = [problem("x", "true"), problem("y", "false")];
        let gen = GenerationConfig { temperature: 1.0, ..GenerationConfig::greedy(4) };
        let r = run_passk(&toy(), &suite, 3, 2, &gen, &BpeVocab::bytes_only(), 2).unwrap();
        let again = recount(&suite, &r.records, 3, 2).unwrap();
        assert_eq!(again, r.problems);
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn suite_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, "{\"id\":\"p1\",\"prompt\":\"x\",\"verifier_cmd\":\"true\"}\n\n{\"id\":\"p2\",\"prompt\":\"y\",\"verifier_cmd\":\"true\",\"timeout\":2}\n").unwrap();
        let s = load_suite(&path).unwrap();
        assert_eq!((s[0].timeout, s[1].timeout), (DEFAULT_TIMEOUT_SECS, 2.0));
        std::fs::write(&path, "{\"id\":\"p1\",\"prompt\":\"x\",\"verifier_cmd\":\"true\"}\n{\"id\":\"p1\",\"prompt\":\"x\",\"verifier_cmd\":\"true\"}\n").unwrap();
        assert!(load_suite(&path).unwrap_err().to_string().contains(":2: duplicate"));
    }
}
