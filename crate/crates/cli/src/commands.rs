use std::fs;
use std::path::Path;

use mgll_core::annotations::{generate_synthetic, ingest_manifest, save_dataset, SampleAnnotation};
use mgll_core::fixtures::{self, RandomBatchSpec};
use mgll_core::gradients::{finite_difference_check, FdOptions};
use mgll_core::losses::{loss_value, AlignmentBatch, LossConfig};
use mgll_core::metrics::{evaluate, ScoredLabels};
use mgll_core::numerics::Matrix;
use mgll_core::trainer::{
    ablation_run, descend, ladder, AblationConfig, AblationTable, Dataset, DescentConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::args::{
    AblateArgs, BatchSource, Cli, Command, Fixture, GenSynthArgs, GlobalArgs, GradcheckArgs,
    LossEvalArgs, MetricsArgs, TrainArgs,
};
use crate::error::{CliError, Result};
use crate::report::RunReport;

/// What a command produced: the JSON results and a plain-text rendering.
pub struct Outcome {
    pub results: Value,
    pub text: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn matrix_digest<'a>(matrices: impl IntoIterator<Item = &'a Matrix>) -> String {
    let mut h = Sha256::new();
    for m in matrices {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// `v` rounded to `digits` significant digits, in positional notation.
pub fn significant(v: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if v == 0.0 || !v.is_finite() {
        return format!("{v:.prec$}", prec = digits - 1);
    }
    let exponent = v.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - exponent).max(0) as usize;
    format!("{v:.decimals$}")
}

fn require_seed(g: &GlobalArgs, what: &str) -> Result<u64> {
    g.seed
        .ok_or_else(|| CliError::Usage(format!("--seed is required for {what}")))
}

fn loss_config(g: &GlobalArgs) -> Result<LossConfig> {
    let cfg = g.loss_config();
    cfg.validate()?;
    Ok(cfg)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(CliError::io(path))
}

/// The batch a command operates on and a JSON description of where it came from.
fn load_batch(src: &BatchSource, g: &GlobalArgs) -> Result<(AlignmentBatch, Value)> {
    if let Some(path) = &src.manifest {
        let manifest = ingest_manifest(path)?;
        let embeddings = manifest.load_embeddings()?;
        let n = src.limit.unwrap_or(manifest.len()).min(manifest.len());
        let rows: Vec<usize> = (0..n).collect();
        let anns: Vec<SampleAnnotation> = manifest.samples[..n].to_vec();
        let images = embeddings.images.select_rows(&rows);
        let batch =
            AlignmentBatch::from_annotations(&anns, &images, &embeddings.texts, g.weights_mode)?;
        let description = json!({
            "manifest_sha256": sha256_hex(&read_file(path)?),
            "samples": n,
            "embeddings_sha256": matrix_digest(std::iter::once(&images).chain(&embeddings.texts)),
        });
        return Ok((batch, description));
    }
    let fixture = src.fixture.unwrap_or(Fixture::Random);
    let batch = match fixture {
        Fixture::Diagonal => fixtures::diagonal_pair(),
        Fixture::ZeroLogit => fixtures::zero_logit_pair(),
        Fixture::IdenticalLevels => fixtures::identical_levels(),
        Fixture::SinglePair => fixtures::single_pair(),
        Fixture::Random => fixtures::random_batch(&RandomBatchSpec {
            seed: require_seed(g, "the random fixture")?,
            ..RandomBatchSpec::default()
        })?,
    };
    let name = serde_json::to_value(fixture).expect("fixture names serialize");
    let description = json!({ "fixture": name, "samples": batch.len() });
    Ok((batch, description))
}

fn gen_synth(a: &GenSynthArgs, g: &GlobalArgs, dir_override: Option<&Path>) -> Result<Outcome> {
    let seed = require_seed(g, "gen-synth")?;
    let spec = a.synth.spec(seed);
    let (manifest, embeddings) = generate_synthetic(&spec)?;
    let dir = dir_override.unwrap_or(&a.dir);
    let manifest_path = save_dataset(dir, &manifest, &embeddings)?;

    let mut files: Vec<(String, String)> = vec![(
        "manifest.json".to_string(),
        sha256_hex(&read_file(&manifest_path)?),
    )];
    let referenced: Vec<&String> = manifest
        .sample_embeddings
        .iter()
        .flatten()
        .chain(manifest.texts.iter().map(|t| &t.embedding))
        .collect();
    for rel in referenced {
        files.push((rel.clone(), sha256_hex(&read_file(&dir.join(rel))?)));
    }
    files.sort();
    let mut combined = Sha256::new();
    for (name, digest) in &files {
        combined.update(format!("{name} {digest}\n").as_bytes());
    }
    let dataset_digest = hex(&combined.finalize());

    let text = format!(
        "wrote {} files ({} samples) to {}\ndataset sha256 {}\n",
        files.len(),
        manifest.len(),
        dir.display(),
        dataset_digest
    );
    Ok(Outcome {
        results: json!({
            "samples": manifest.len(),
            "files": files.len(),
            "manifest_sha256": files.iter().find(|(n, _)| n == "manifest.json").map(|(_, d)| d),
            "dataset_sha256": dataset_digest,
        }),
        text,
    })
}

fn loss_eval(a: &LossEvalArgs, g: &GlobalArgs) -> Result<Outcome> {
    let cfg = loss_config(g)?;
    let (batch, input) = load_batch(&a.source, g)?;
    let mut rows = Vec::with_capacity(a.losses.len());
    let mut text = String::new();
    for &kind in &a.losses {
        let value = loss_value(&batch, &cfg, kind)?;
        let shown = significant(value, 12);
        text.push_str(&format!("{:<10} {shown}\n", kind.name()));
        rows.push(json!({ "loss": kind, "value": value, "display": shown }));
    }
    Ok(Outcome {
        results: json!({ "input": input, "losses": rows }),
        text,
    })
}

fn gradcheck(a: &GradcheckArgs, g: &GlobalArgs) -> Result<Outcome> {
    let cfg = loss_config(g)?;
    let seed = require_seed(g, "gradcheck")?;
    let (batch, input) = load_batch(&a.source, g)?;
    let opts = FdOptions {
        step: a.step,
        probes: a.probes,
        seed,
    };
    let report = finite_difference_check(&batch, &cfg, a.loss, &opts)?;
    let text = format!(
        "{}: value {}  max abs error {:.3e}  max rel error {:.3e} at {}\n",
        a.loss,
        significant(report.value, 12),
        report.max_abs_error,
        report.max_rel_error,
        report.worst_coordinate
    );
    Ok(Outcome {
        results: json!({ "input": input, "report": report }),
        text,
    })
}

fn train(a: &TrainArgs, g: &GlobalArgs) -> Result<Outcome> {
    let cfg = loss_config(g)?;
    let (batch, input) = load_batch(&a.source, g)?;
    let dcfg = DescentConfig {
        step_size: a.step_size,
        max_iters: a.max_iters,
        tolerance: a.tolerance,
        seed: g.seed.unwrap_or(0),
        ..DescentConfig::default()
    };
    let t = descend(&batch, &cfg, &dcfg, a.loss, !a.freeze_images, a.train_texts)?;
    let first = t.losses.first().copied().unwrap_or(f64::NAN);
    let last = t.losses.last().copied().unwrap_or(f64::NAN);
    let text = format!(
        "{}: loss {} -> {} in {} iterations ({})\n",
        a.loss,
        significant(first, 12),
        significant(last, 12),
        t.iterations,
        if t.converged {
            "converged"
        } else {
            "not converged"
        }
    );
    Ok(Outcome {
        results: json!({
            "input": input,
            "initial_loss": first,
            "final_loss": last,
            "iterations": t.iterations,
            "converged": t.converged,
            "first_increase": t.first_increase,
            "losses": t.losses,
            "images_sha256": matrix_digest([&t.images]),
            "texts_sha256": matrix_digest(&t.texts),
        }),
        text,
    })
}

#[derive(Serialize)]
struct SeedTable {
    seed: u64,
    table: AblationTable,
}

fn ablate(a: &AblateArgs, g: &GlobalArgs) -> Result<Outcome> {
    let cfg = loss_config(g)?;
    let first_seed = require_seed(g, "ablate")?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let variants = ladder(a.ladder, &cfg);
    let fixed = match &a.manifest {
        Some(path) => {
            let manifest = ingest_manifest(path)?;
            let embeddings = manifest.load_embeddings()?;
            Some(Dataset::new(&manifest, embeddings)?)
        }
        None => None,
    };
    let run_seed = |seed: u64| -> Result<SeedTable> {
        let generated;
        let data = match &fixed {
            Some(d) => d,
            None => {
                let (manifest, embeddings) = generate_synthetic(&a.synth.spec(seed))?;
                generated = Dataset::new(&manifest, embeddings)?;
                &generated
            }
        };
        let acfg = AblationConfig {
            split_seed: seed,
            held_out_fraction: a.held_out,
            step_size: a.step_size,
            iterations: a.iterations,
            missing_fine_fraction: a.missing_fraction,
            ..AblationConfig::default()
        };
        log::info!("ablation seed {seed}");
        Ok(SeedTable {
            seed,
            table: ablation_run(data, &variants, &acfg)?,
        })
    };

    let seeds: Vec<u64> = (first_seed..first_seed + a.seeds).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.jobs.unwrap_or(1).max(1))
        .build()
        .map_err(|e| {
            CliError::Usage(format!("cannot start {} workers: {e}", g.jobs.unwrap_or(1)))
        })?;
    let runs: Vec<SeedTable> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| run_seed(s))
            .collect::<Result<_>>()
    })?;

    let mut text = String::new();
    for r in &runs {
        text.push_str(&format!(
            "seed {} (untrained auc {:.4})\n{}\n",
            r.seed,
            r.table.untrained_auc,
            r.table.render()
        ));
    }
    let summary: Vec<Value> = variants
        .iter()
        .map(|v| {
            let aucs: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.table.row(&v.name).map(|row| row.auc))
                .collect();
            json!({
                "variant": v.name,
                "mean_auc": aucs.iter().sum::<f64>() / aucs.len() as f64,
            })
        })
        .collect();
    let input = match &a.manifest {
        Some(path) => json!({ "manifest_sha256": sha256_hex(&read_file(path)?) }),
        None => json!({ "synthetic": a.synth }),
    };
    Ok(Outcome {
        results: json!({ "input": input, "runs": runs, "summary": summary }),
        text,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsInput {
    scores: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
}

fn metrics(a: &MetricsArgs, _g: &GlobalArgs) -> Result<Outcome> {
    let bytes = read_file(&a.input)?;
    let bad = |message: String| CliError::Input {
        path: a.input.clone(),
        message,
    };
    let input: MetricsInput = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    if input.scores.is_empty() {
        return Err(bad("no samples".into()));
    }
    let scores = Matrix::from_rows(&input.scores).map_err(|e| bad(format!("scores: {e}")))?;
    let truth = Matrix::from_rows(&input.truth).map_err(|e| bad(format!("truth: {e}")))?;
    let report = evaluate(&ScoredLabels::new(scores, truth)?, a.threshold)?;
    let mut text = format!(
        "auc {:.6}  map {:.6}  acc {:.6}\n",
        report.auc, report.map, report.acc
    );
    if !report.skipped_categories.is_empty() {
        text.push_str(&format!(
            "skipped categories {:?}\n",
            report.skipped_categories
        ));
    }
    Ok(Outcome {
        results: json!({ "input_sha256": sha256_hex(&bytes), "report": report }),
        text,
    })
}

/// Path to the first difference between two JSON values, if any.
fn first_difference(path: &str, a: &Value, b: &Value) -> Option<String> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for k in x.keys().chain(y.keys()) {
                let sub = format!("{path}.{k}");
                match (x.get(k), y.get(k)) {
                    (Some(p), Some(q)) => {
                        if let Some(d) = first_difference(&sub, p, q) {
                            return Some(d);
                        }
                    }
                    _ => return Some(sub),
                }
            }
            None
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                return Some(format!("{path} (length {} vs {})", x.len(), y.len()));
            }
            x.iter()
                .zip(y)
                .enumerate()
                .find_map(|(i, (p, q))| first_difference(&format!("{path}[{i}]"), p, q))
        }
        (Value::Number(x), Value::Number(y)) => {
            let same = if x.is_f64() || y.is_f64() {
                x.as_f64().map(f64::to_bits) == y.as_f64().map(f64::to_bits)
            } else {
                x == y
            };
            (!same).then(|| format!("{path} ({x} vs {y})"))
        }
        _ => (a != b).then(|| path.to_string()),
    }
}

fn replay(report_path: &Path) -> Result<Outcome> {
    let bytes = read_file(report_path)?;
    let report: RunReport = serde_json::from_slice(&bytes).map_err(|e| CliError::Input {
        path: report_path.to_path_buf(),
        message: e.to_string(),
    })?;
    if matches!(report.config.command, Command::Replay(_)) {
        return Err(CliError::Usage(
            "a replay report cannot itself be replayed".into(),
        ));
    }
    // Files a replay writes go to a scratch directory, never over the originals.
    let scratch = tempfile::tempdir().map_err(CliError::io(std::env::temp_dir()))?;
    let fresh = execute(&report.config, Some(scratch.path()))?;
    if let Some(diff) = first_difference("results", &report.results, &fresh.results) {
        return Err(CliError::ReplayMismatch(diff));
    }
    let canonical = serde_json::to_string(&fresh.results).expect("results serialize");
    let digest = sha256_hex(canonical.as_bytes());
    Ok(Outcome {
        text: format!("{}: results reproduced (sha256 {digest})\n", report.command),
        results: json!({
            "command": report.command,
            "reproduced": true,
            "results_sha256": digest,
        }),
    })
}

/// Runs `cli`. `scratch` redirects files a command would write.
pub fn execute(cli: &Cli, scratch: Option<&Path>) -> Result<Outcome> {
    let g = &cli.global;
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a, g, scratch),
        Command::LossEval(a) => loss_eval(a, g),
        Command::Gradcheck(a) => gradcheck(a, g),
        Command::Train(a) => train(a, g),
        Command::Ablate(a) => ablate(a, g),
        Command::Metrics(a) => metrics(a, g),
        Command::Replay(a) => replay(&a.report),
    }
}

pub fn command_name(command: &Command) -> &'static str {
    match command {
        Command::GenSynth(_) => "gen-synth",
        Command::LossEval(_) => "loss-eval",
        Command::Gradcheck(_) => "gradcheck",
        Command::Train(_) => "train",
        Command::Ablate(_) => "ablate",
        Command::Metrics(_) => "metrics",
        Command::Replay(_) => "replay",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(significant(0.31326168751822286, 12), "0.313261687518");
        assert_eq!(significant(1.3862943611198906, 12), "1.38629436112");
        assert_eq!(significant(0.0, 12), "0.00000000000");
        assert_eq!(significant(123456.0, 3), "123456");
        assert_eq!(significant(-2.5e-3, 2), "-0.0025");
    }

    #[test]
    fn differences_are_bitwise() {
        let a = json!({"x": [1.0, 2.0], "y": "s"});
        assert_eq!(first_difference("r", &a, &a.clone()), None);
        let b = json!({"x": [1.0, 2.000000000000001], "y": "s"});
        assert!(first_difference("r", &a, &b).unwrap().starts_with("r.x[1]"));
        let c = json!({"x": [1.0, 2.0]});
        assert_eq!(first_difference("r", &a, &c).unwrap(), "r.y");
    }
}
