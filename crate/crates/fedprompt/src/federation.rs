//! Synchronous federated prompt learning: broadcast, local client updates,
//! pluggable robust aggregation, and per-round bookkeeping.
//!
//! The server loop is sequential and combines client uploads in ascending
//! id order so results are reproducible regardless of how local updates are
//! scheduled.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{init_trigger, malicious_local_update, AttackConfig};
use crate::data::{
    dirichlet_partition, generate_dataset, kshot_partition, BatchSampler, Dataset, Trigger,
};
use crate::defenses::{dp_sanitize, fedavg, foolsgold, multi_krum, multi_metric};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, attack_success_rate};
use crate::model::{FrozenEncoders, ModelDims, PromptVector};
use crate::rng::{derive_seed, rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Benign,
    Malicious,
}

/// Server-side combination rule applied to the uploaded prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AggregationRule {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "multi_krum")]
    MultiKrum {
        assumed_malicious: usize,
        select_count: usize,
    },
    #[serde(rename = "foolsgold")]
    Foolsgold {
        confidence: f64,
    },
    #[serde(rename = "multi_metric")]
    MultiMetric {
        exclude_fraction: f64,
    },
    #[serde(rename = "dp_fedavg")]
    DpFedAvg {
        clip: f64,
        noise_multiplier: f64,
    },
}

impl AggregationRule {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationRule::FedAvg => "fedavg",
            AggregationRule::MultiKrum { .. } => "multi_krum",
            AggregationRule::Foolsgold { .. } => "foolsgold",
            AggregationRule::MultiMetric { .. } => "multi_metric",
            AggregationRule::DpFedAvg { .. } => "dp_fedavg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    Uniform,
    ShardSize,
}

/// How the training pool is split across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Class-balanced shards: every client draws `shots` samples per class.
    KshotIid { shots: usize },
    /// Label-skewed shards from per-class Dirichlet(alpha) proportions.
    Dirichlet { alpha: f64 },
}

/// Full description of one experiment. `seed` drives every random choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dims: ModelDims,
    pub temperature: f64,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub noise_sigma: f64,
    pub n_clients: usize,
    pub malicious_fraction: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub partition: PartitionMode,
    pub weighting: WeightingMode,
    pub rule: AggregationRule,
    pub attack: AttackConfig,
    pub randomize_roles: bool,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Count of malicious clients: ⌊fraction · N⌋, lowest ids unless
    /// role assignment is randomized.
    pub fn malicious_count(&self) -> usize {
        (self.malicious_fraction * self.n_clients as f64).floor() as usize
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.dims.validate() {
            problems.push(e.to_string());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push(format!(
                "temperature must be a positive real, got {}",
                self.temperature
            ));
        }
        if self.per_class_train == 0 {
            problems.push("per_class_train must be at least 1".into());
        }
        if self.per_class_test == 0 {
            problems.push("per_class_test must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            problems.push(format!(
                "noise_sigma must be a nonnegative real, got {}",
                self.noise_sigma
            ));
        }
        if self.n_clients == 0 {
            problems.push("n_clients must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.malicious_fraction) {
            problems.push(format!(
                "malicious_fraction must lie in [0,1), got {}",
                self.malicious_fraction
            ));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!(
                "learning_rate must be a nonnegative real, got {}",
                self.learning_rate
            ));
        }
        match self.partition {
            PartitionMode::KshotIid { shots } => {
                if shots == 0 {
                    problems.push("k-shot partition needs shots >= 1".into());
                } else if self.n_clients != 0 && shots * self.n_clients > self.per_class_train {
                    problems.push(format!(
                        "k-shot partition needs shots*n_clients <= per_class_train \
                         ({} * {} > {})",
                        shots, self.n_clients, self.per_class_train
                    ));
                }
            }
            PartitionMode::Dirichlet { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    problems.push(format!(
                        "dirichlet partition needs alpha > 0, got {alpha}"
                    ));
                }
            }
        }
        match &self.rule {
            AggregationRule::FedAvg => {}
            AggregationRule::MultiKrum {
                assumed_malicious,
                select_count,
            } => {
                let n = self.n_clients;
                if n < assumed_malicious + 3 {
                    problems.push(format!(
                        "multi_krum needs N - f - 2 >= 1 (N={n}, f={assumed_malicious})"
                    ));
                }
                if *select_count == 0 || select_count + assumed_malicious > n {
                    problems.push(format!(
                        "multi_krum needs 1 <= m_sel <= N - f \
                         (N={n}, f={assumed_malicious}, m_sel={select_count})"
                    ));
                }
            }
            AggregationRule::Foolsgold { confidence } => {
                if !(confidence > &0.0 && confidence.is_finite()) {
                    problems.push(format!(
                        "foolsgold confidence must be positive, got {confidence}"
                    ));
                }
            }
            AggregationRule::MultiMetric { exclude_fraction } => {
                if !(0.0..1.0).contains(exclude_fraction) {
                    problems.push(format!(
                        "multi_metric exclude_fraction must lie in [0,1), got {exclude_fraction}"
                    ));
                }
            }
            AggregationRule::DpFedAvg {
                clip,
                noise_multiplier,
            } => {
                if !(clip > &0.0 && clip.is_finite()) {
                    problems.push(format!("dp clip must be positive, got {clip}"));
                }
                if !(noise_multiplier >= &0.0 && noise_multiplier.is_finite()) {
                    problems.push(format!(
                        "dp noise_multiplier must be nonnegative, got {noise_multiplier}"
                    ));
                }
            }
        }
        if self.malicious_count() > 0 {
            if let Err(e) = self.attack.validate(self.dims.class_count) {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }
}

/// One participant: its data shard, its role, an optional local trigger
/// (malicious clients only), and the running sum of its uploaded deltas.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    pub shard: Dataset,
    pub trigger: Option<Trigger>,
    pub history_sum: PromptVector,
}

/// Everything measured about one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Clean accuracy of the aggregated prompt on the held-out test split.
    pub acc: f64,
    /// Fraction of triggered non-target test images predicted as the target.
    pub asr: f64,
    /// Clean cross-entropy of the aggregated prompt on the test split.
    pub mean_clean_loss: f64,
    /// ℓ2 norm of every client's uploaded delta, ascending id.
    pub update_norms: Vec<f64>,
    /// Aggregation weights actually applied, ascending id; always sums to 1.
    pub weights: Vec<f64>,
    /// ‖(1/N)·Σ over malicious clients and steps of the backdoor deltas‖.
    pub attack_bias_norm: f64,
    /// Largest single-step backdoor delta norm seen this round.
    pub max_malicious_step_norm: f64,
    pub selected: Vec<usize>,
    pub excluded: Vec<usize>,
}

/// Final state of a finished experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub history: Vec<RoundRecord>,
    pub final_prompt: PromptVector,
    /// Trigger used for the final evaluation; absent without malicious
    /// clients.
    pub final_trigger: Option<Trigger>,
}

/// T benign SGD steps on the clean contrastive loss, starting from the
/// broadcast prompt, with seeded mini-batches. The batch stream is derived
/// exactly like the malicious one so the two update paths are comparable.
pub fn benign_local_update(
    enc: &FrozenEncoders,
    global_prompt: &PromptVector,
    shard: &Dataset,
    learning_rate: f64,
    local_steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<PromptVector> {
    let mut prompt = global_prompt.clone();
    if local_steps == 0 {
        return Ok(prompt);
    }
    let mut sampler = BatchSampler::new(
        shard.len(),
        batch_size,
        derive_seed(seed, &[stream::BATCH]),
    )?;
    for _ in 0..local_steps {
        let idx = sampler.next_batch();
        let batch = shard.subset(&idx)?;
        let lg = enc.clean_loss_grad(&prompt, &batch.images)?;
        prompt.add_scaled(&lg.grad_prompt, -learning_rate)?;
    }
    Ok(prompt)
}

/// Local SGD step count for one client: epochs × batches per epoch.
pub fn local_step_count(shard_len: usize, local_epochs: usize, batch_size: usize) -> usize {
    if shard_len == 0 || batch_size == 0 {
        return 0;
    }
    local_epochs * shard_len.div_ceil(batch_size)
}

/// Live experiment state: frozen encoders, client shards, the current
/// global prompt, and the coordinated trigger when one is shared.
#[derive(Debug)]
pub struct Federation {
    cfg: ExperimentConfig,
    enc: FrozenEncoders,
    clients: Vec<ClientState>,
    global_prompt: PromptVector,
    shared_trigger: Option<Trigger>,
    test: Dataset,
}

impl Federation {
    /// Builds encoders, data, shards, roles, triggers, and the initial
    /// prompt from the config seed. Validation runs first and reports every
    /// problem.
    pub fn new(cfg: ExperimentConfig) -> Result<Federation> {
        cfg.validate()?;
        let enc = FrozenEncoders::new(
            cfg.dims,
            cfg.temperature,
            derive_seed(cfg.seed, &[stream::MODEL]),
        )?;
        let (train, test) = generate_dataset(
            cfg.dims.class_count,
            cfg.per_class_train,
            cfg.per_class_test,
            cfg.dims.pixel_dim,
            cfg.noise_sigma,
            cfg.seed,
        )?;

        let (pool, plan) = match cfg.partition {
            PartitionMode::KshotIid { shots } => {
                kshot_partition(&train, shots, cfg.n_clients, cfg.seed)?
            }
            PartitionMode::Dirichlet { alpha } => {
                let plan = dirichlet_partition(&train.labels(), cfg.n_clients, alpha, cfg.seed)?;
                (train, plan)
            }
        };

        let n_mal = cfg.malicious_count();
        let malicious_ids: Vec<usize> = if cfg.randomize_roles && n_mal > 0 {
            let mut rng: ChaCha8Rng = rng_from(derive_seed(cfg.seed, &[stream::ROLES]));
            let mut ids = rand::seq::index::sample(&mut rng, cfg.n_clients, n_mal).into_vec();
            ids.sort_unstable();
            ids
        } else {
            (0..n_mal).collect()
        };

        let shared_trigger = if cfg.attack.coordinated && n_mal > 0 {
            Some(init_trigger(
                cfg.dims.pixel_dim,
                cfg.attack.linf_budget,
                cfg.seed,
            )?)
        } else {
            None
        };

        let mut clients = Vec::with_capacity(cfg.n_clients);
        for id in 0..cfg.n_clients {
            let malicious = malicious_ids.binary_search(&id).is_ok();
            let trigger = if !malicious {
                None
            } else if let Some(shared) = &shared_trigger {
                Some(shared.clone())
            } else {
                // private trigger per malicious client
                Some(init_trigger(
                    cfg.dims.pixel_dim,
                    cfg.attack.linf_budget,
                    derive_seed(cfg.seed, &[stream::CLIENT, id as u64]),
                )?)
            };
            clients.push(ClientState {
                id,
                role: if malicious { Role::Malicious } else { Role::Benign },
                shard: pool.subset(&plan.assignment[id])?,
                trigger,
                history_sum: PromptVector::zeros(cfg.dims.prompt_len, cfg.dims.token_dim),
            });
        }

        let global_prompt = PromptVector::gaussian(
            cfg.dims.prompt_len,
            cfg.dims.token_dim,
            0.02,
            derive_seed(cfg.seed, &[stream::PROMPT_INIT]),
        );

        Ok(Federation {
            cfg,
            enc,
            clients,
            global_prompt,
            shared_trigger,
            test,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn encoders(&self) -> &FrozenEncoders {
        &self.enc
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn global_prompt(&self) -> &PromptVector {
        &self.global_prompt
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    /// Trigger the evaluation uses: the coordinated one, else the lowest-id
    /// malicious client's, else none.
    pub fn eval_trigger(&self) -> Option<&Trigger> {
        if let Some(t) = &self.shared_trigger {
            return Some(t);
        }
        self.clients
            .iter()
            .find(|c| c.role == Role::Malicious)
            .and_then(|c| c.trigger.as_ref())
    }

    fn base_weights(&self) -> Vec<f64> {
        let n = self.clients.len();
        match self.cfg.weighting {
            WeightingMode::Uniform => vec![1.0 / n as f64; n],
            WeightingMode::ShardSize => {
                let total: usize = self.clients.iter().map(|c| c.shard.len()).sum();
                if total == 0 {
                    vec![1.0 / n as f64; n]
                } else {
                    self.clients
                        .iter()
                        .map(|c| c.shard.len() as f64 / total as f64)
                        .collect()
                }
            }
        }
    }

    /// One communication round: broadcast the global prompt, run every
    /// client's local update in ascending id order, aggregate with the
    /// configured rule, then evaluate on the held-out test split.
    pub fn run_round(&mut self, round: usize) -> Result<(PromptVector, RoundRecord)> {
        let cfg = &self.cfg;
        let broadcast = self.global_prompt.clone();
        let n = self.clients.len();
        let (m, d_tok) = broadcast.shape();

        let mut uploads = Vec::with_capacity(n);
        let mut bias_sum = PromptVector::zeros(m, d_tok);
        let mut max_step_norm = 0.0f64;

        for client in &mut self.clients {
            let steps = local_step_count(client.shard.len(), cfg.local_epochs, cfg.batch_size);
            let seed = derive_seed(
                cfg.seed,
                &[stream::CLIENT, client.id as u64, round as u64],
            );
            let upload = if steps == 0 {
                broadcast.clone()
            } else if client.role == Role::Benign {
                benign_local_update(
                    &self.enc,
                    &broadcast,
                    &client.shard,
                    cfg.learning_rate,
                    steps,
                    cfg.batch_size,
                    seed,
                )?
            } else {
                let trigger_in = if cfg.attack.coordinated {
                    self.shared_trigger.clone().ok_or(Error::InvalidParameter(
                        "coordinated attack without a shared trigger".into(),
                    ))?
                } else {
                    client.trigger.clone().ok_or(Error::InvalidParameter(
                        "malicious client without a trigger".into(),
                    ))?
                };
                let (prompt, trigger_out, trace) = malicious_local_update(
                    &self.enc,
                    &broadcast,
                    &client.shard,
                    trigger_in,
                    &cfg.attack,
                    steps,
                    cfg.batch_size,
                    seed,
                )?;
                for delta in &trace.step_deltas {
                    bias_sum.add_scaled(delta, 1.0)?;
                }
                for &norm in &trace.step_backdoor_norms {
                    max_step_norm = max_step_norm.max(norm);
                }
                client.trigger = Some(trigger_out.clone());
                if cfg.attack.coordinated {
                    self.shared_trigger = Some(trigger_out);
                }
                prompt
            };
            client.history_sum.add_scaled(&upload, 1.0)?;
            client.history_sum.add_scaled(&broadcast, -1.0)?;
            uploads.push(upload);
        }

        let update_norms: Vec<f64> = uploads
            .iter()
            .map(|u| u.sub(&broadcast).map(|d| d.l2_norm()))
            .collect::<Result<_>>()?;

        let all_ids: Vec<usize> = (0..n).collect();
        let (new_global, weights, selected, excluded) = match &cfg.rule {
            AggregationRule::FedAvg => {
                let w = self.base_weights();
                (fedavg(&uploads, &w)?, w, all_ids, vec![])
            }
            AggregationRule::MultiKrum {
                assumed_malicious,
                select_count,
            } => {
                let (agg, selected) = multi_krum(&uploads, *assumed_malicious, *select_count)?;
                let mut w = vec![0.0; n];
                for &i in &selected {
                    w[i] = 1.0 / selected.len() as f64;
                }
                let excluded = all_ids
                    .iter()
                    .copied()
                    .filter(|i| !selected.contains(i))
                    .collect();
                (agg, w, selected, excluded)
            }
            AggregationRule::Foolsgold { confidence } => {
                let histories: Vec<PromptVector> = self
                    .clients
                    .iter()
                    .map(|c| c.history_sum.clone())
                    .collect();
                let deltas: Vec<PromptVector> = uploads
                    .iter()
                    .map(|u| u.sub(&broadcast))
                    .collect::<Result<_>>()?;
                let (delta, w) = foolsgold(&histories, &deltas, *confidence)?;
                let mut agg = broadcast.clone();
                agg.add_scaled(&delta, 1.0)?;
                (agg, w, all_ids, vec![])
            }
            AggregationRule::MultiMetric { exclude_fraction } => {
                let (agg, excluded) = multi_metric(&uploads, &broadcast, *exclude_fraction)?;
                let included: Vec<usize> = all_ids
                    .iter()
                    .copied()
                    .filter(|i| !excluded.contains(i))
                    .collect();
                let mut w = vec![0.0; n];
                for &i in &included {
                    w[i] = 1.0 / included.len() as f64;
                }
                (agg, w, included, excluded)
            }
            AggregationRule::DpFedAvg {
                clip,
                noise_multiplier,
            } => {
                let w = self.base_weights();
                let mut agg = broadcast.clone();
                for (client, upload) in self.clients.iter().zip(&uploads) {
                    let delta = upload.sub(&broadcast)?;
                    let mut rng = rng_from(derive_seed(
                        cfg.seed,
                        &[stream::DP_NOISE, round as u64, client.id as u64],
                    ));
                    let clean = dp_sanitize(&delta, *clip, *noise_multiplier, &mut rng)?;
                    agg.add_scaled(&clean, w[client.id])?;
                }
                (agg, w, all_ids, vec![])
            }
        };

        let acc = accuracy(&self.enc, &new_global, &self.test)?;
        let zero_trigger;
        let eval_trigger = match self.eval_trigger() {
            Some(t) => t,
            None => {
                zero_trigger = Trigger::zeros(cfg.dims.pixel_dim, 0.0)?;
                &zero_trigger
            }
        };
        let asr = attack_success_rate(
            &self.enc,
            &new_global,
            eval_trigger,
            &self.test,
            cfg.attack.target_label,
        )?;
        let mean_clean_loss = self
            .enc
            .clean_loss_grad(&new_global, &self.test.images)?
            .loss;

        bias_sum = bias_sum.scaled(1.0 / n as f64);
        let record = RoundRecord {
            round,
            acc,
            asr,
            mean_clean_loss,
            update_norms,
            weights,
            attack_bias_norm: bias_sum.l2_norm(),
            max_malicious_step_norm: max_step_norm,
            selected,
            excluded,
        };
        self.global_prompt = new_global.clone();
        Ok((new_global, record))
    }
}

/// Runs the full configured experiment: R rounds from a fresh federation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let mut fed = Federation::new(cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let (_, record) = fed.run_round(round)?;
        history.push(record);
    }
    Ok(ExperimentOutcome {
        final_prompt: fed.global_prompt.clone(),
        final_trigger: fed.eval_trigger().cloned(),
        history,
    })
}

/// Per-round check of a measured bias norm against its worst-case budget.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasBoundCheck {
    pub round: usize,
    pub bias_norm: f64,
    /// ρ · T · δ where δ is the largest single-step norm seen anywhere.
    pub triangle_bound: f64,
    pub triangle_holds: bool,
    /// The tighter ρ² · T · δ² budget on the squared norm, reported only.
    pub squared_bound: f64,
    pub squared_holds: bool,
}

/// Compares every round's measured attack bias against ρ·T·δ, where δ is
/// the maximum per-step delta norm across the whole run. The triangle form
/// must hold up to 1e-9 arithmetic slack; the squared form is informational.
pub fn check_attack_bias_bound(
    records: &[RoundRecord],
    malicious_fraction: f64,
    local_steps: usize,
) -> Result<Vec<BiasBoundCheck>> {
    if records.is_empty() {
        return Err(Error::InvalidParameter(
            "bias bound check needs at least one round record".into(),
        ));
    }
    let delta_atk = records
        .iter()
        .map(|r| r.max_malicious_step_norm)
        .fold(0.0f64, f64::max);
    let t = local_steps as f64;
    let triangle = malicious_fraction * t * delta_atk;
    let squared = malicious_fraction * malicious_fraction * t * delta_atk * delta_atk;
    Ok(records
        .iter()
        .map(|r| BiasBoundCheck {
            round: r.round,
            bias_norm: r.attack_bias_norm,
            triangle_bound: triangle,
            triangle_holds: r.attack_bias_norm <= triangle + 1e-9,
            squared_bound: squared,
            squared_holds: r.attack_bias_norm * r.attack_bias_norm <= squared + 1e-9,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::ModelDims;

    fn small_dims() -> ModelDims {
        ModelDims {
            pixel_dim: 16,
            embed_dim: 8,
            token_dim: 8,
            prompt_len: 2,
            class_count: 4,
        }
    }

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            dims: small_dims(),
            temperature: 0.07,
            per_class_train: 20,
            per_class_test: 5,
            noise_sigma: 0.05,
            n_clients: 5,
            malicious_fraction: 0.0,
            rounds: 2,
            local_epochs: 1,
            batch_size: 8,
            learning_rate: 0.05,
            partition: PartitionMode::KshotIid { shots: 4 },
            weighting: WeightingMode::Uniform,
            rule: AggregationRule::FedAvg,
            attack: AttackConfig::default(),
            randomize_roles: false,
            seed: 42,
        }
    }

    fn flat_bits(p: &PromptVector) -> Vec<u64> {
        p.to_flat().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn test_benign_update_noop_cases() {
        let enc = FrozenEncoders::new(small_dims(), 0.07, 1).unwrap();
        let (train, _) = generate_dataset(4, 5, 1, 16, 0.05, 2).unwrap();
        let p = PromptVector::gaussian(2, 8, 0.02, 3);
        let zero_steps = benign_local_update(&enc, &p, &train, 0.1, 0, 8, 4).unwrap();
        assert_eq!(flat_bits(&p), flat_bits(&zero_steps));
        let zero_rate = benign_local_update(&enc, &p, &train, 0.0, 3, 8, 4).unwrap();
        assert_eq!(flat_bits(&p), flat_bits(&zero_rate));
    }

    #[test]
    fn test_benign_single_sample_single_step() {
        let enc = FrozenEncoders::new(small_dims(), 0.07, 5).unwrap();
        let (train, _) = generate_dataset(4, 2, 1, 16, 0.05, 6).unwrap();
        let shard = train.subset(&[3]).unwrap();
        let p = PromptVector::gaussian(2, 8, 0.02, 7);
        let eta = 0.01;
        let got = benign_local_update(&enc, &p, &shard, eta, 1, 8, 8).unwrap();
        let lg = enc.clean_loss_grad(&p, &shard.images).unwrap();
        let mut want = p.clone();
        want.add_scaled(&lg.grad_prompt, -eta).unwrap();
        assert_eq!(flat_bits(&want), flat_bits(&got));
    }

    #[test]
    fn test_lambda_zero_malicious_matches_benign_bitwise() {
        let enc = FrozenEncoders::new(small_dims(), 0.07, 9).unwrap();
        let (train, _) = generate_dataset(4, 8, 1, 16, 0.05, 10).unwrap();
        let p = PromptVector::gaussian(2, 8, 0.02, 11);
        let mut attack = AttackConfig::default();
        attack.lambda = 0.0;
        attack.eta_prompt = 0.05;
        let trigger = init_trigger(16, attack.linf_budget, 99).unwrap();
        let seed = 12345;
        let benign = benign_local_update(&enc, &p, &train, 0.05, 6, 8, seed).unwrap();
        let (malicious, out_trigger, trace) =
            malicious_local_update(&enc, &p, &train, trigger.clone(), &attack, 6, 8, seed)
                .unwrap();
        assert_eq!(flat_bits(&benign), flat_bits(&malicious));
        // zero attack weight also freezes the trigger at its start value
        assert_eq!(trigger.noise, out_trigger.noise);
        assert!(trace.step_backdoor_norms.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn test_config_validation_collects_all_problems() {
        let mut cfg = small_cfg();
        cfg.batch_size = 0;
        cfg.malicious_fraction = 1.5;
        cfg.partition = PartitionMode::KshotIid { shots: 100 };
        let err = cfg.validate().unwrap_err();
        match err {
            Error::InvalidConfig(problems) => {
                assert!(problems.len() >= 3, "{problems:?}");
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn test_round_identical_uploads_under_fedavg() {
        let mut cfg = small_cfg();
        cfg.learning_rate = 0.0;
        let mut fed = Federation::new(cfg).unwrap();
        let before = fed.global_prompt().clone();
        let (after, record) = fed.run_round(0).unwrap();
        let diff = after.sub(&before).unwrap().l2_norm();
        assert!(diff < 1e-12);
        assert!(record.update_norms.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn test_round_matches_scripted_oracle() {
        let mut cfg = small_cfg();
        cfg.malicious_fraction = 0.4;
        cfg.attack.eta_prompt = cfg.learning_rate;
        let mut fed = Federation::new(cfg.clone()).unwrap();

        // script the same round by hand: derive each client seed, run the
        // matching local update, then average uniformly
        let broadcast = fed.global_prompt().clone();
        let enc = fed.encoders();
        let mut expected_uploads = Vec::new();
        let mut shared = fed.eval_trigger().cloned().unwrap();
        for client in fed.clients() {
            let steps =
                local_step_count(client.shard.len(), cfg.local_epochs, cfg.batch_size);
            let seed = derive_seed(cfg.seed, &[stream::CLIENT, client.id as u64, 0]);
            if client.role == Role::Benign {
                expected_uploads.push(
                    benign_local_update(
                        enc,
                        &broadcast,
                        &client.shard,
                        cfg.learning_rate,
                        steps,
                        cfg.batch_size,
                        seed,
                    )
                    .unwrap(),
                );
            } else {
                let (p, t, _) = malicious_local_update(
                    enc,
                    &broadcast,
                    &client.shard,
                    shared.clone(),
                    &cfg.attack,
                    steps,
                    cfg.batch_size,
                    seed,
                )
                .unwrap();
                shared = t;
                expected_uploads.push(p);
            }
        }
        let weights = vec![1.0 / 5.0; 5];
        let expected = fedavg(&expected_uploads, &weights).unwrap();

        let (got, record) = fed.run_round(0).unwrap();
        assert_eq!(flat_bits(&expected), flat_bits(&got));
        assert_eq!(record.selected, vec![0, 1, 2, 3, 4]);
        assert_eq!(shared.noise, fed.eval_trigger().unwrap().noise);
    }

    #[test]
    fn test_rho_zero_is_clean_prompt_learning() {
        let outcome = run_experiment(&small_cfg()).unwrap();
        assert_eq!(outcome.history.len(), 2);
        assert!(outcome.final_trigger.is_none());
        for r in &outcome.history {
            assert_eq!(r.attack_bias_norm, 0.0);
            assert_eq!(r.max_malicious_step_norm, 0.0);
            // chance level on K=4 with slack
            assert!(r.asr <= 0.25 + 0.25, "asr {}", r.asr);
        }
    }

    #[test]
    fn test_experiment_determinism() {
        let mut cfg = small_cfg();
        cfg.malicious_fraction = 0.4;
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(
            flat_bits(&a.final_prompt),
            flat_bits(&b.final_prompt)
        );
        assert_eq!(
            a.final_trigger.as_ref().unwrap().noise,
            b.final_trigger.as_ref().unwrap().noise
        );
    }

    #[test]
    fn test_zero_rounds_returns_initial_prompt() {
        let mut cfg = small_cfg();
        cfg.rounds = 0;
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.history.is_empty());
        let init = PromptVector::gaussian(
            cfg.dims.prompt_len,
            cfg.dims.token_dim,
            0.02,
            derive_seed(cfg.seed, &[stream::PROMPT_INIT]),
        );
        assert_eq!(flat_bits(&init), flat_bits(&outcome.final_prompt));
    }

    #[test]
    fn test_all_rules_produce_unit_weight_vectors() {
        let rules = vec![
            AggregationRule::FedAvg,
            AggregationRule::MultiKrum {
                assumed_malicious: 2,
                select_count: 3,
            },
            AggregationRule::Foolsgold { confidence: 1.0 },
            AggregationRule::MultiMetric {
                exclude_fraction: 0.2,
            },
            AggregationRule::DpFedAvg {
                clip: 1.0,
                noise_multiplier: 0.02,
            },
        ];
        for rule in rules {
            let mut cfg = small_cfg();
            cfg.malicious_fraction = 0.4;
            cfg.rounds = 2;
            cfg.rule = rule.clone();
            let outcome = run_experiment(&cfg).unwrap();
            for r in &outcome.history {
                let total: f64 = r.weights.iter().sum();
                assert!(
                    (total - 1.0).abs() < 1e-12,
                    "{}: weights sum {total}",
                    rule.name()
                );
                assert_eq!(r.update_norms.len(), cfg.n_clients);
                assert!(r.excluded.iter().all(|i| *i < cfg.n_clients));
                assert!(r.weights.iter().all(|w| w.is_finite()));
            }
        }
    }

    #[test]
    fn test_mkrum_infeasible_parameters_name_the_rule() {
        let mut cfg = small_cfg();
        cfg.rule = AggregationRule::MultiKrum {
            assumed_malicious: 3,
            select_count: 1,
        };
        let err = Federation::new(cfg).unwrap_err();
        assert!(err.to_string().contains("multi_krum"), "{err}");
    }

    #[test]
    fn test_bias_bound_holds_on_attacked_run() {
        let mut cfg = small_cfg();
        cfg.malicious_fraction = 0.4;
        cfg.rounds = 3;
        let outcome = run_experiment(&cfg).unwrap();
        let steps = cfg.local_epochs * (16usize.div_ceil(cfg.batch_size));
        let checks =
            check_attack_bias_bound(&outcome.history, cfg.malicious_fraction, steps).unwrap();
        assert_eq!(checks.len(), 3);
        for c in &checks {
            assert!(c.triangle_holds, "round {} bias {}", c.round, c.bias_norm);
        }
    }

    #[test]
    fn test_bias_bound_equality_single_client_single_step() {
        // N=2, one malicious, one local step: the mean over clients has a
        // single term, so the measured bias hits its budget exactly
        let mut cfg = small_cfg();
        cfg.n_clients = 2;
        cfg.malicious_fraction = 0.5;
        cfg.partition = PartitionMode::KshotIid { shots: 4 };
        cfg.batch_size = 64;
        cfg.local_epochs = 1;
        cfg.rounds = 1;
        let outcome = run_experiment(&cfg).unwrap();
        let r = &outcome.history[0];
        let budget = 0.5 * 1.0 * r.max_malicious_step_norm;
        assert!(r.max_malicious_step_norm > 0.0);
        assert!((r.attack_bias_norm - budget).abs() < 1e-12);
    }

    #[test]
    fn test_bias_check_rejects_empty_history() {
        assert!(check_attack_bias_bound(&[], 0.2, 5).is_err());
    }

    #[test]
    fn test_dirichlet_partition_mode_runs() {
        let mut cfg = small_cfg();
        cfg.partition = PartitionMode::Dirichlet { alpha: 0.1 };
        cfg.rounds = 1;
        let outcome = run_experiment(&cfg).unwrap();
        assert_eq!(outcome.history.len(), 1);
    }

    #[test]
    fn test_uncoordinated_triggers_are_private() {
        let mut cfg = small_cfg();
        cfg.malicious_fraction = 0.4;
        cfg.attack.coordinated = false;
        cfg.rounds = 1;
        let fed = Federation::new(cfg).unwrap();
        let triggers: Vec<&Trigger> = fed
            .clients()
            .iter()
            .filter_map(|c| c.trigger.as_ref())
            .collect();
        assert_eq!(triggers.len(), 2);
        assert_ne!(triggers[0].noise, triggers[1].noise);
    }

    #[test]
    fn test_local_step_count() {
        assert_eq!(local_step_count(0, 5, 32), 0);
        assert_eq!(local_step_count(60, 5, 32), 10);
        assert_eq!(local_step_count(64, 5, 32), 10);
        assert_eq!(local_step_count(65, 1, 32), 3);
    }

    #[test]
    fn test_shard_size_weighting() {
        let mut cfg = small_cfg();
        cfg.weighting = WeightingMode::ShardSize;
        cfg.rounds = 1;
        let outcome = run_experiment(&cfg).unwrap();
        // balanced k-shot shards make shard-size weights uniform
        for w in &outcome.history[0].weights {
            assert!((w - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn test_roles_randomized_by_seed() {
        let mut cfg = small_cfg();
        cfg.n_clients = 10;
        cfg.partition = PartitionMode::KshotIid { shots: 2 };
        cfg.malicious_fraction = 0.3;
        cfg.randomize_roles = true;
        let fed = Federation::new(cfg.clone()).unwrap();
        let ids: Vec<usize> = fed
            .clients()
            .iter()
            .filter(|c| c.role == Role::Malicious)
            .map(|c| c.id)
            .collect();
        assert_eq!(ids.len(), 3);
        let fed2 = Federation::new(cfg).unwrap();
        let ids2: Vec<usize> = fed2
            .clients()
            .iter()
            .filter(|c| c.role == Role::Malicious)
            .map(|c| c.id)
            .collect();
        assert_eq!(ids, ids2);
    }

    #[test]
    fn test_client_state_invariants() {
        let mut cfg = small_cfg();
        cfg.malicious_fraction = 0.4;
        let fed = Federation::new(cfg).unwrap();
        for c in fed.clients() {
            assert_eq!(c.trigger.is_some(), c.role == Role::Malicious);
            assert_eq!(c.shard.split, Split::Train);
        }
    }
}
