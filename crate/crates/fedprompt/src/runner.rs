//! Executes resolved runs: one output directory per run with a
//! round-history CSV, a JSON summary, optional STRIP and embedding
//! exports, and prompt/trigger checkpoints. Independent runs can execute
//! in parallel under a worker cap.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{prompt_to_json, trigger_to_json, write_prompt_bin, write_trigger_bin};
use crate::config::{ResolvedRun, RunAxes};
use crate::data::poison_testset;
use crate::defenses::{strip_calibrate_threshold, strip_entropy};
use crate::error::{Error, Result};
use crate::federation::{
    check_attack_bias_bound, local_step_count, Federation, RoundRecord,
};
use crate::metrics::{accuracy, attack_success_rate, export_embeddings, fmt_real};
use crate::rng::{derive_seed, stream};

/// Output-root fallback chain: explicit flag, then the config's `out_dir`,
/// then this environment variable, then `runs/`.
pub const ENV_OUT: &str = "FEDPROMPT_OUT";
/// Worker-count fallback: explicit flag, then this variable, then 1.
pub const ENV_JOBS: &str = "FEDPROMPT_JOBS";

pub fn resolve_out_root(flag: Option<&str>, file_out_dir: Option<&str>) -> PathBuf {
    if let Some(f) = flag {
        return PathBuf::from(f);
    }
    if let Some(d) = file_out_dir {
        return PathBuf::from(d);
    }
    if let Ok(env) = std::env::var(ENV_OUT) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("runs")
}

pub fn resolve_jobs(flag: Option<usize>) -> usize {
    if let Some(j) = flag {
        return j.max(1);
    }
    std::env::var(ENV_JOBS)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map_or(1, |j| j.max(1))
}

/// STRIP screening outcome over the test split, echoed into the summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StripSummary {
    pub threshold: f64,
    pub median_clean: f64,
    pub median_poisoned: f64,
    /// Fraction of poisoned entropies above the threshold, i.e. the miss
    /// rate at the calibrated false-rejection point. Logged, not asserted.
    pub poisoned_overlap_above_threshold: f64,
    pub flagged_clean: usize,
    pub flagged_poisoned: usize,
    pub n_inputs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasSummary {
    pub delta_atk: f64,
    pub local_steps: usize,
    pub all_rounds_hold: bool,
    /// Largest measured bias as a fraction of its budget, over all rounds.
    pub max_ratio: f64,
}

/// Everything `summary.json` records about one finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub axes: RunAxes,
    pub rounds: usize,
    pub final_acc: f64,
    pub final_asr: f64,
    pub final_clean_loss: f64,
    pub config: crate::federation::ExperimentConfig,
    #[serde(default)]
    pub bias: Option<BiasSummary>,
    #[serde(default)]
    pub strip: Option<StripSummary>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub label: String,
    pub dir: PathBuf,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunFailure {
    pub label: String,
    pub error: String,
}

/// Batch result: per-run outputs in input order plus any failures.
#[derive(Debug)]
pub struct BatchOutcome {
    pub outputs: Vec<RunOutput>,
    pub failures: Vec<RunFailure>,
}

fn join_reals(values: &[f64]) -> String {
    values.iter().map(|&v| fmt_real(v)).collect::<Vec<_>>().join(";")
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

/// Streams round records to `history.csv`. List-valued fields are
/// semicolon-joined inside one CSV column.
pub fn write_history_csv<W: std::io::Write>(records: &[RoundRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "round",
        "acc",
        "asr",
        "mean_clean_loss",
        "attack_bias_norm",
        "max_malicious_step_norm",
        "update_norms",
        "weights",
        "selected",
        "excluded",
    ])?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            fmt_real(r.acc),
            fmt_real(r.asr),
            fmt_real(r.mean_clean_loss),
            fmt_real(r.attack_bias_norm),
            fmt_real(r.max_malicious_step_norm),
            join_reals(&r.update_norms),
            join_reals(&r.weights),
            join_ids(&r.selected),
            join_ids(&r.excluded),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn write_strip_csv(path: &Path, entropies: &[f64], threshold: f64) -> Result<usize> {
    let mut w = csv::Writer::from_writer(fs::File::create(path)?);
    w.write_record(["id", "entropy", "flagged"])?;
    let mut flagged = 0usize;
    for (i, &e) in entropies.iter().enumerate() {
        let flag = e < threshold;
        flagged += usize::from(flag);
        w.write_record([i.to_string(), fmt_real(e), u8::from(flag).to_string()])?;
    }
    w.flush()?;
    Ok(flagged)
}

fn strip_screen(fed: &Federation, run: &ResolvedRun, dir: &Path) -> Result<StripSummary> {
    let cfg = fed.config();
    let enc = fed.encoders();
    let prompt = fed.global_prompt();
    let test = fed.test_set();
    let overlay_pool = &test.images;

    let zero = crate::data::Trigger::zeros(cfg.dims.pixel_dim, 0.0)?;
    let trigger = fed.eval_trigger().unwrap_or(&zero);
    let poisoned = poison_testset(test, trigger, cfg.attack.target_label)?;

    // entropies are threshold-independent; the decision threshold is
    // resolved afterwards (configured value or calibrated 1% FRR on clean)
    let mut clean_entropies = Vec::with_capacity(test.len());
    for (i, im) in test.images.iter().enumerate() {
        let report = strip_entropy(
            enc,
            prompt,
            &im.pixels,
            overlay_pool,
            run.strip.overlays,
            derive_seed(cfg.seed, &[stream::STRIP, 0, i as u64]),
            0.0,
        )?;
        clean_entropies.push(report.entropy);
    }
    let mut poisoned_entropies = Vec::with_capacity(poisoned.len());
    for (i, im) in poisoned.images.iter().enumerate() {
        let report = strip_entropy(
            enc,
            prompt,
            &im.pixels,
            overlay_pool,
            run.strip.overlays,
            derive_seed(cfg.seed, &[stream::STRIP, 1, i as u64]),
            0.0,
        )?;
        poisoned_entropies.push(report.entropy);
    }

    let threshold = match run.strip.threshold {
        Some(t) => t,
        None => strip_calibrate_threshold(&clean_entropies)?,
    };

    let flagged_clean = write_strip_csv(&dir.join("strip_clean.csv"), &clean_entropies, threshold)?;
    let flagged_poisoned =
        write_strip_csv(&dir.join("strip_poisoned.csv"), &poisoned_entropies, threshold)?;

    let above = poisoned_entropies.iter().filter(|&&e| e >= threshold).count();
    Ok(StripSummary {
        threshold,
        median_clean: median(&clean_entropies),
        median_poisoned: median(&poisoned_entropies),
        poisoned_overlap_above_threshold: above as f64 / poisoned_entropies.len().max(1) as f64,
        flagged_clean,
        flagged_poisoned,
        n_inputs: test.len(),
    })
}

/// Executes one run into `out_root/<label>-<confighash>/`.
pub fn execute_run(run: &ResolvedRun, out_root: &Path) -> Result<RunOutput> {
    let started = Instant::now();
    let dir = out_root.join(run.dir_name());
    fs::create_dir_all(&dir)?;

    let cfg = run.cfg.clone();
    let mut fed = Federation::new(cfg.clone())?;
    let mut history: Vec<RoundRecord> = Vec::with_capacity(cfg.rounds);

    let checkpoint_dir = dir.join("checkpoints");
    if run.export.checkpoint_interval > 0 {
        fs::create_dir_all(&checkpoint_dir)?;
    }

    for round in 0..cfg.rounds {
        let (prompt, record) = fed.run_round(round)?;
        history.push(record);
        let interval = run.export.checkpoint_interval;
        if interval > 0 && (round + 1) % interval == 0 {
            let mut f = fs::File::create(
                checkpoint_dir.join(format!("prompt_round_{:04}.bin", round)),
            )?;
            write_prompt_bin(&prompt, &mut f)?;
        }
    }

    write_history_csv(&history, fs::File::create(dir.join("history.csv"))?)?;

    // final artifacts: prompt always, trigger when the run had an attacker
    let final_prompt = fed.global_prompt().clone();
    let mut f = fs::File::create(dir.join("prompt_final.bin"))?;
    write_prompt_bin(&final_prompt, &mut f)?;
    fs::write(dir.join("prompt_final.json"), prompt_to_json(&final_prompt)?)?;
    let final_trigger = fed.eval_trigger().cloned();
    if let Some(trigger) = &final_trigger {
        let mut f = fs::File::create(dir.join("trigger_final.bin"))?;
        write_trigger_bin(trigger, &mut f)?;
        fs::write(dir.join("trigger_final.json"), trigger_to_json(trigger)?)?;
    }

    let (final_acc, final_asr, final_clean_loss) = match history.last() {
        Some(r) => (r.acc, r.asr, r.mean_clean_loss),
        None => {
            let acc = accuracy(fed.encoders(), &final_prompt, fed.test_set())?;
            let zero = crate::data::Trigger::zeros(cfg.dims.pixel_dim, 0.0)?;
            let trigger = final_trigger.as_ref().unwrap_or(&zero);
            let asr = attack_success_rate(
                fed.encoders(),
                &final_prompt,
                trigger,
                fed.test_set(),
                cfg.attack.target_label,
            )?;
            let loss = fed
                .encoders()
                .clean_loss_grad(&final_prompt, &fed.test_set().images)?
                .loss;
            (acc, asr, loss)
        }
    };

    let bias = if history.is_empty() {
        None
    } else {
        let steps = fed
            .clients()
            .iter()
            .map(|c| local_step_count(c.shard.len(), cfg.local_epochs, cfg.batch_size))
            .max()
            .unwrap_or(0);
        let checks = check_attack_bias_bound(&history, cfg.malicious_fraction, steps)?;
        let delta_atk = history
            .iter()
            .map(|r| r.max_malicious_step_norm)
            .fold(0.0f64, f64::max);
        let max_ratio = checks
            .iter()
            .map(|c| {
                if c.triangle_bound > 0.0 {
                    c.bias_norm / c.triangle_bound
                } else {
                    0.0
                }
            })
            .fold(0.0f64, f64::max);
        Some(BiasSummary {
            delta_atk,
            local_steps: steps,
            all_rounds_hold: checks.iter().all(|c| c.triangle_holds),
            max_ratio,
        })
    };

    let strip = if run.strip.enabled {
        Some(strip_screen(&fed, run, &dir)?)
    } else {
        None
    };

    if run.export.embeddings {
        let f = fs::File::create(dir.join("embeddings.csv"))?;
        export_embeddings(
            fed.encoders(),
            &fed.test_set().images,
            final_trigger.as_ref(),
            f,
        )?;
    }

    let summary = RunSummary {
        label: run.label.clone(),
        seed: cfg.seed,
        axes: run.axes.clone(),
        rounds: cfg.rounds,
        final_acc,
        final_asr,
        final_clean_loss,
        config: cfg,
        bias,
        strip,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let mut f = fs::File::create(dir.join("summary.json"))?;
    f.write_all(serde_json::to_string_pretty(&summary)?.as_bytes())?;
    f.write_all(b"\n")?;

    Ok(RunOutput {
        label: run.label.clone(),
        dir,
        summary,
    })
}

/// Runs every resolved run, at most `jobs` concurrently, claiming work from
/// a shared queue. Failures don't stop other runs; a failure manifest is
/// written when any run fails.
pub fn run_all(runs: &[ResolvedRun], out_root: &Path, jobs: usize) -> Result<BatchOutcome> {
    fs::create_dir_all(out_root)?;
    let jobs = jobs.max(1).min(runs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<std::result::Result<RunOutput, String>>>> =
        Mutex::new((0..runs.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= runs.len() {
                    break;
                }
                let outcome = execute_run(&runs[i], out_root).map_err(|e| e.to_string());
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for (run, slot) in runs.iter().zip(results.into_inner().unwrap()) {
        match slot {
            Some(Ok(out)) => outputs.push(out),
            Some(Err(msg)) => failures.push(RunFailure {
                label: run.label.clone(),
                error: msg,
            }),
            None => failures.push(RunFailure {
                label: run.label.clone(),
                error: "run never executed".into(),
            }),
        }
    }

    if !failures.is_empty() {
        let manifest = serde_json::to_string_pretty(&failures)?;
        fs::write(out_root.join("failure_manifest.json"), manifest + "\n")?;
    }

    Ok(BatchOutcome { outputs, failures })
}

/// Collects every `summary.json` under `out_root` (one directory level
/// down) into a tidy `report.csv` keyed by the sweep axes, sorted by label.
/// Returns the report path and how many runs it covers.
pub fn write_report(out_root: &Path) -> Result<(PathBuf, usize)> {
    let mut summaries: Vec<RunSummary> = Vec::new();
    for entry in fs::read_dir(out_root)? {
        let entry = entry?;
        let candidate = entry.path().join("summary.json");
        if candidate.is_file() {
            let text = fs::read_to_string(&candidate)?;
            let summary: RunSummary = serde_json::from_str(&text).map_err(|e| {
                Error::MalformedData {
                    what: "run summary",
                    detail: format!("{}: {e}", candidate.display()),
                }
            })?;
            summaries.push(summary);
        }
    }
    summaries.sort_by(|a, b| a.label.cmp(&b.label));

    let path = out_root.join("report.csv");
    let mut w = csv::Writer::from_writer(fs::File::create(&path)?);
    w.write_record([
        "label",
        "malicious_fraction",
        "alpha",
        "lambda",
        "rule",
        "replicate",
        "seed",
        "rounds",
        "final_acc",
        "final_asr",
        "final_clean_loss",
    ])?;
    for s in &summaries {
        w.write_record([
            s.label.clone(),
            fmt_real(s.axes.malicious_fraction),
            s.axes.alpha.map_or(String::new(), fmt_real),
            fmt_real(s.axes.lambda),
            s.axes.rule.clone(),
            s.axes.replicate.to_string(),
            s.seed.to_string(),
            s.rounds.to_string(),
            fmt_real(s.final_acc),
            fmt_real(s.final_asr),
            fmt_real(s.final_clean_loss),
        ])?;
    }
    w.flush()?;
    Ok((path, summaries.len()))
}
