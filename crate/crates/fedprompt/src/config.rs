//! Declarative experiment files: a TOML schema mirroring the runtime
//! experiment config plus sweep axes, with total validation and
//! deterministic per-run seed derivation.
//!
//! Unknown keys are rejected everywhere so typos surface as errors instead
//! of silently falling back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, ObjectiveForm};
use crate::error::{Error, Result};
use crate::federation::{
    AggregationRule, ExperimentConfig, PartitionMode, WeightingMode,
};
use crate::model::ModelDims;
use crate::rng::fnv1a;

fn default_name() -> String {
    "experiment".into()
}

fn default_seed() -> u64 {
    42
}

/// Top-level experiment document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output root; the runner falls back to its own default when absent.
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub defense: DefenseSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub strip: StripSection,
    #[serde(default)]
    pub export: ExportSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_pixel_dim")]
    pub pixel_dim: usize,
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_token_dim")]
    pub token_dim: usize,
    #[serde(default = "d_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "d_class_count")]
    pub class_count: usize,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
}

fn d_pixel_dim() -> usize {
    256
}
fn d_embed_dim() -> usize {
    32
}
fn d_token_dim() -> usize {
    32
}
fn d_prompt_len() -> usize {
    4
}
fn d_class_count() -> usize {
    10
}
fn d_temperature() -> f64 {
    0.07
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            pixel_dim: d_pixel_dim(),
            embed_dim: d_embed_dim(),
            token_dim: d_token_dim(),
            prompt_len: d_prompt_len(),
            class_count: d_class_count(),
            temperature: d_temperature(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "d_per_class_train")]
    pub per_class_train: usize,
    #[serde(default = "d_per_class_test")]
    pub per_class_test: usize,
    #[serde(default = "d_noise_sigma")]
    pub noise_sigma: f64,
}

fn d_per_class_train() -> usize {
    100
}
fn d_per_class_test() -> usize {
    20
}
fn d_noise_sigma() -> f64 {
    0.05
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            per_class_train: d_per_class_train(),
            per_class_test: d_per_class_test(),
            noise_sigma: d_noise_sigma(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    #[serde(default = "d_n_clients")]
    pub n_clients: usize,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_weighting")]
    pub weighting: WeightingMode,
    #[serde(default)]
    pub randomize_roles: bool,
}

fn d_n_clients() -> usize {
    10
}
fn d_rounds() -> usize {
    100
}
fn d_local_epochs() -> usize {
    5
}
fn d_batch_size() -> usize {
    32
}
fn d_learning_rate() -> f64 {
    0.001
}
fn d_weighting() -> WeightingMode {
    WeightingMode::Uniform
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            n_clients: d_n_clients(),
            rounds: d_rounds(),
            local_epochs: d_local_epochs(),
            batch_size: d_batch_size(),
            learning_rate: d_learning_rate(),
            weighting: d_weighting(),
            randomize_roles: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    KshotIid,
    Dirichlet,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    #[serde(default = "d_partition_mode")]
    pub mode: PartitionKind,
    #[serde(default = "d_shots")]
    pub shots: usize,
    /// Dirichlet concentration; required when mode = "dirichlet".
    #[serde(default)]
    pub alpha: Option<f64>,
}

fn d_partition_mode() -> PartitionKind {
    PartitionKind::KshotIid
}
fn d_shots() -> usize {
    6
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            mode: d_partition_mode(),
            shots: d_shots(),
            alpha: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default)]
    pub malicious_fraction: f64,
    #[serde(default)]
    pub target_label: usize,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_eta_prompt")]
    pub eta_prompt: f64,
    #[serde(default = "d_eta_trigger")]
    pub eta_trigger: f64,
    #[serde(default = "d_linf_budget")]
    pub linf_budget: f64,
    #[serde(default = "d_poison_fraction")]
    pub poison_fraction: f64,
    #[serde(default = "d_objective")]
    pub objective: ObjectiveForm,
    #[serde(default = "d_true")]
    pub coordinated: bool,
    #[serde(default)]
    pub straight_through: bool,
}

fn d_lambda() -> f64 {
    1.0
}
fn d_eta_prompt() -> f64 {
    0.001
}
fn d_eta_trigger() -> f64 {
    0.01
}
fn d_linf_budget() -> f64 {
    8.0 / 255.0
}
fn d_poison_fraction() -> f64 {
    1.0
}
fn d_objective() -> ObjectiveForm {
    ObjectiveForm::Additive
}
fn d_true() -> bool {
    true
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            malicious_fraction: 0.0,
            target_label: 0,
            lambda: d_lambda(),
            eta_prompt: d_eta_prompt(),
            eta_trigger: d_eta_trigger(),
            linf_budget: d_linf_budget(),
            poison_fraction: d_poison_fraction(),
            objective: d_objective(),
            coordinated: true,
            straight_through: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
pub enum RuleKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "multi_krum")]
    MultiKrum,
    #[serde(rename = "foolsgold")]
    Foolsgold,
    #[serde(rename = "multi_metric")]
    MultiMetric,
    #[serde(rename = "dp_fedavg")]
    DpFedAvg,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::FedAvg => "fedavg",
            RuleKind::MultiKrum => "multi_krum",
            RuleKind::Foolsgold => "foolsgold",
            RuleKind::MultiMetric => "multi_metric",
            RuleKind::DpFedAvg => "dp_fedavg",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    #[serde(default = "d_rule")]
    pub rule: RuleKind,
    /// Krum's f; defaults to ⌈malicious_fraction · N⌉ when absent.
    #[serde(default)]
    pub assumed_malicious: Option<usize>,
    /// Krum's selection count; defaults to N − f when absent.
    #[serde(default)]
    pub select_count: Option<usize>,
    #[serde(default = "d_confidence")]
    pub confidence: f64,
    #[serde(default = "d_exclude_fraction")]
    pub exclude_fraction: f64,
    #[serde(default = "d_clip")]
    pub clip: f64,
    #[serde(default = "d_noise_multiplier")]
    pub noise_multiplier: f64,
}

fn d_rule() -> RuleKind {
    RuleKind::FedAvg
}
fn d_confidence() -> f64 {
    1.0
}
fn d_exclude_fraction() -> f64 {
    0.1
}
fn d_clip() -> f64 {
    1.0
}
fn d_noise_multiplier() -> f64 {
    0.02
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            rule: d_rule(),
            assumed_malicious: None,
            select_count: None,
            confidence: d_confidence(),
            exclude_fraction: d_exclude_fraction(),
            clip: d_clip(),
            noise_multiplier: d_noise_multiplier(),
        }
    }
}

impl DefenseSection {
    /// Resolves the rule for one run, filling Krum defaults from the run's
    /// client count and malicious fraction.
    pub fn resolve(&self, rule: RuleKind, n_clients: usize, malicious_fraction: f64) -> AggregationRule {
        match rule {
            RuleKind::FedAvg => AggregationRule::FedAvg,
            RuleKind::MultiKrum => {
                let f = self
                    .assumed_malicious
                    .unwrap_or((malicious_fraction * n_clients as f64).ceil() as usize);
                let m_sel = self.select_count.unwrap_or(n_clients.saturating_sub(f));
                AggregationRule::MultiKrum {
                    assumed_malicious: f,
                    select_count: m_sel,
                }
            }
            RuleKind::Foolsgold => AggregationRule::Foolsgold {
                confidence: self.confidence,
            },
            RuleKind::MultiMetric => AggregationRule::MultiMetric {
                exclude_fraction: self.exclude_fraction,
            },
            RuleKind::DpFedAvg => AggregationRule::DpFedAvg {
                clip: self.clip,
                noise_multiplier: self.noise_multiplier,
            },
        }
    }
}

/// Axes swept as a cross-product; absent axes stay at their base value.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub malicious_fraction: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
    #[serde(default)]
    pub rule: Option<Vec<RuleKind>>,
    #[serde(default = "d_replicates")]
    pub replicates: usize,
}

fn d_replicates() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StripSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "d_overlays")]
    pub overlays: usize,
    /// Decision threshold; calibrated from clean entropies when absent.
    #[serde(default)]
    pub threshold: Option<f64>,
}

fn d_overlays() -> usize {
    16
}

impl Default for StripSection {
    fn default() -> Self {
        StripSection {
            enabled: false,
            overlays: d_overlays(),
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSection {
    #[serde(default)]
    pub embeddings: bool,
    /// Rounds between prompt checkpoints; 0 keeps only the final state.
    #[serde(default)]
    pub checkpoint_interval: usize,
}

impl Default for ExportSection {
    fn default() -> Self {
        ExportSection {
            embeddings: false,
            checkpoint_interval: 0,
        }
    }
}

/// Sweep coordinates of one resolved run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAxes {
    pub malicious_fraction: f64,
    pub alpha: Option<f64>,
    pub lambda: f64,
    pub rule: String,
    pub replicate: usize,
}

/// One fully resolved, validated run ready for execution.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    /// Experiment name plus the swept-axis suffix; unique within the file.
    pub label: String,
    pub cfg: ExperimentConfig,
    pub axes: RunAxes,
    pub strip: StripSection,
    pub export: ExportSection,
}

impl ResolvedRun {
    /// Eight hex digits identifying the resolved config, used to keep
    /// different configs from colliding in one output directory.
    pub fn config_hash(&self) -> String {
        let blob = serde_json::to_string(&self.cfg).expect("config serializes");
        format!("{:08x}", fnv1a(blob.as_bytes()) as u32)
    }

    pub fn dir_name(&self) -> String {
        format!("{}-{}", self.label, self.config_hash())
    }
}

fn trim_float(v: f64) -> String {
    // Display gives the shortest exact decimal, fine for directory names
    format!("{v}").replace('.', "p").replace('-', "m")
}

/// Reads and parses an experiment file without resolving it.
pub fn load_experiment_file(path: &Path) -> Result<ExperimentFile> {
    let text = std::fs::read_to_string(path)?;
    parse_experiment_file(&text)
}

/// Parses experiment TOML. Schema violations come back as a single
/// config-error list entry.
pub fn parse_experiment_file(text: &str) -> Result<ExperimentFile> {
    toml::from_str(text).map_err(|e| Error::InvalidConfig(vec![format!("TOML: {e}")]))
}

/// Expands a parsed file into the cross-product of its sweep axes and
/// validates every run. Either all runs are valid or the full error list is
/// returned; nothing executes on a partially valid file.
pub fn resolve_runs(file: &ExperimentFile, seed_override: Option<u64>) -> Result<Vec<ResolvedRun>> {
    let base_seed = seed_override.unwrap_or(file.seed);
    let mut problems = Vec::new();

    if file.name.is_empty() {
        problems.push("name must not be empty".into());
    }
    if file.partition.mode == PartitionKind::Dirichlet && file.partition.alpha.is_none() {
        let swept = file
            .sweep
            .as_ref()
            .and_then(|s| s.alpha.as_ref())
            .is_some_and(|a| !a.is_empty());
        if !swept {
            problems.push("partition.mode = \"dirichlet\" requires partition.alpha".into());
        }
    }
    if let Some(sweep) = &file.sweep {
        if sweep.replicates == 0 {
            problems.push("sweep.replicates must be at least 1".into());
        }
        for (axis, values) in [
            ("malicious_fraction", &sweep.malicious_fraction),
            ("alpha", &sweep.alpha),
            ("lambda", &sweep.lambda),
        ] {
            if values.as_ref().is_some_and(|v| v.is_empty()) {
                problems.push(format!("sweep.{axis} must not be an empty list"));
            }
        }
        if sweep.rule.as_ref().is_some_and(|r| r.is_empty()) {
            problems.push("sweep.rule must not be an empty list".into());
        }
    }
    if file.strip.enabled && file.strip.overlays == 0 {
        problems.push("strip.overlays must be at least 1".into());
    }
    if let Some(t) = file.strip.threshold {
        if !(0.0..=1.0).contains(&t) {
            problems.push(format!("strip.threshold must lie in [0,1], got {t}"));
        }
    }

    let default_sweep = SweepSection {
        replicates: 1,
        ..Default::default()
    };
    let sweep = file.sweep.as_ref().unwrap_or(&default_sweep);
    let rho_axis = sweep
        .malicious_fraction
        .clone()
        .unwrap_or_else(|| vec![file.attack.malicious_fraction]);
    let alpha_axis: Vec<Option<f64>> = match &sweep.alpha {
        Some(list) => list.iter().copied().map(Some).collect(),
        None => vec![file.partition.alpha],
    };
    let lambda_axis = sweep
        .lambda
        .clone()
        .unwrap_or_else(|| vec![file.attack.lambda]);
    let rule_axis = sweep
        .rule
        .clone()
        .unwrap_or_else(|| vec![file.defense.rule]);
    let replicates = sweep.replicates.max(1);
    let multi_run = rho_axis.len() * alpha_axis.len() * lambda_axis.len() * rule_axis.len()
        > 1
        || replicates > 1;

    let mut runs = Vec::new();
    for &rho in &rho_axis {
        for &alpha in &alpha_axis {
            for &lambda in &lambda_axis {
                for &rule in &rule_axis {
                    for replicate in 0..replicates {
                        let partition = match file.partition.mode {
                            PartitionKind::KshotIid => PartitionMode::KshotIid {
                                shots: file.partition.shots,
                            },
                            PartitionKind::Dirichlet => PartitionMode::Dirichlet {
                                alpha: alpha.unwrap_or(f64::NAN),
                            },
                        };
                        let seed = if multi_run {
                            run_seed(base_seed, rho, alpha, lambda, rule, replicate)
                        } else {
                            base_seed
                        };
                        let cfg = ExperimentConfig {
                            dims: ModelDims {
                                pixel_dim: file.model.pixel_dim,
                                embed_dim: file.model.embed_dim,
                                token_dim: file.model.token_dim,
                                prompt_len: file.model.prompt_len,
                                class_count: file.model.class_count,
                            },
                            temperature: file.model.temperature,
                            per_class_train: file.data.per_class_train,
                            per_class_test: file.data.per_class_test,
                            noise_sigma: file.data.noise_sigma,
                            n_clients: file.federation.n_clients,
                            malicious_fraction: rho,
                            rounds: file.federation.rounds,
                            local_epochs: file.federation.local_epochs,
                            batch_size: file.federation.batch_size,
                            learning_rate: file.federation.learning_rate,
                            partition,
                            weighting: file.federation.weighting,
                            rule: file.defense.resolve(rule, file.federation.n_clients, rho),
                            attack: AttackConfig {
                                target_label: file.attack.target_label,
                                lambda,
                                eta_prompt: file.attack.eta_prompt,
                                eta_trigger: file.attack.eta_trigger,
                                linf_budget: file.attack.linf_budget,
                                poison_fraction_per_batch: file.attack.poison_fraction,
                                objective_form: file.attack.objective,
                                coordinated: file.attack.coordinated,
                                straight_through: file.attack.straight_through,
                            },
                            randomize_roles: file.federation.randomize_roles,
                            seed,
                        };
                        let axes = RunAxes {
                            malicious_fraction: rho,
                            alpha,
                            lambda,
                            rule: rule.name().to_string(),
                            replicate,
                        };
                        let label = run_label(&file.name, sweep, &axes);
                        if let Err(e) = cfg.validate() {
                            match e {
                                Error::InvalidConfig(list) => {
                                    problems
                                        .extend(list.into_iter().map(|p| format!("{label}: {p}")));
                                }
                                other => problems.push(format!("{label}: {other}")),
                            }
                        }
                        runs.push(ResolvedRun {
                            label,
                            cfg,
                            axes,
                            strip: file.strip.clone(),
                            export: file.export.clone(),
                        });
                    }
                }
            }
        }
    }

    let mut seen = std::collections::HashSet::new();
    for run in &runs {
        if !seen.insert(run.label.clone()) {
            problems.push(format!("duplicate run label {}", run.label));
        }
    }

    if problems.is_empty() {
        Ok(runs)
    } else {
        Err(Error::InvalidConfig(problems))
    }
}

/// Per-run seed: a hash of the experiment seed and the run's axis values,
/// so every sweep cell and replicate gets its own reproducible stream.
fn run_seed(
    base: u64,
    rho: f64,
    alpha: Option<f64>,
    lambda: f64,
    rule: RuleKind,
    replicate: usize,
) -> u64 {
    let mut bytes = Vec::with_capacity(64);
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(&rho.to_bits().to_le_bytes());
    bytes.extend_from_slice(&alpha.map_or(u64::MAX, f64::to_bits).to_le_bytes());
    bytes.extend_from_slice(&lambda.to_bits().to_le_bytes());
    bytes.extend_from_slice(rule.name().as_bytes());
    bytes.extend_from_slice(&(replicate as u64).to_le_bytes());
    fnv1a(&bytes)
}

/// Human-readable run label: the file name plus one token per swept axis.
fn run_label(name: &str, sweep: &SweepSection, axes: &RunAxes) -> String {
    let mut label = name.to_string();
    if sweep.malicious_fraction.is_some() {
        label.push_str(&format!("-rho{}", trim_float(axes.malicious_fraction)));
    }
    if sweep.alpha.is_some() {
        if let Some(a) = axes.alpha {
            label.push_str(&format!("-alpha{}", trim_float(a)));
        }
    }
    if sweep.lambda.is_some() {
        label.push_str(&format!("-lambda{}", trim_float(axes.lambda)));
    }
    if sweep.rule.is_some() {
        label.push_str(&format!("-{}", axes.rule));
    }
    if sweep.replicates > 1 {
        label.push_str(&format!("-rep{}", axes.replicate));
    }
    label
}
