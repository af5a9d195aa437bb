//! Malicious-client behavior: trigger initialization, poisoned batch
//! construction, and the alternating trigger/prompt optimization.
//!
//! Each local step first takes one projected gradient step on the trigger
//! against the alignment loss, then one step on the prompt against the
//! combined objective. Only the prompt leaves the client; the trigger
//! persists locally across rounds. The per-step backdoor contribution to
//! the prompt gradient is traced so the server-side bias bound can be
//! measured.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_trigger, BatchSampler, Dataset, Image, Trigger};
use crate::error::{Error, Result};
use crate::model::{FrozenEncoders, PromptVector};
use crate::rng::{derive_seed, rng_from, stream};

/// How the clean and backdoor losses combine in the prompt step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveForm {
    /// clean + lambda · backdoor
    Additive,
    /// (1 − lambda) · clean + lambda · backdoor; lambda must be in [0,1]
    Convex,
}

/// Knobs of the malicious local optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub target_label: usize,
    pub lambda: f64,
    pub eta_prompt: f64,
    pub eta_trigger: f64,
    pub linf_budget: f64,
    pub poison_fraction_per_batch: f64,
    pub objective_form: ObjectiveForm,
    /// Malicious clients share and thread one trigger when set.
    pub coordinated: bool,
    /// Pass gradients through saturated clip coordinates unchanged.
    pub straight_through: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            target_label: 0,
            lambda: 1.0,
            eta_prompt: 0.001,
            eta_trigger: 0.01,
            linf_budget: 8.0 / 255.0,
            poison_fraction_per_batch: 1.0,
            objective_form: ObjectiveForm::Additive,
            coordinated: true,
            straight_through: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.target_label >= class_count {
            return Err(Error::LabelOutOfRange {
                label: self.target_label,
                classes: class_count,
            });
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "attack lambda must be a nonnegative real, got {}",
                self.lambda
            )));
        }
        if self.objective_form == ObjectiveForm::Convex && self.lambda > 1.0 {
            return Err(Error::InvalidParameter(format!(
                "convex objective requires lambda in [0,1], got {}",
                self.lambda
            )));
        }
        if !(self.eta_prompt > 0.0) || !(self.eta_trigger > 0.0) {
            return Err(Error::InvalidParameter(
                "attack step sizes must be positive".into(),
            ));
        }
        if !(self.linf_budget >= 0.0) || !self.linf_budget.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "trigger budget must be a nonnegative real, got {}",
                self.linf_budget
            )));
        }
        if !(self.poison_fraction_per_batch > 0.0 && self.poison_fraction_per_batch <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "poison fraction must lie in (0,1], got {}",
                self.poison_fraction_per_batch
            )));
        }
        Ok(())
    }
}

/// Per-step record of what the attacker injected into the prompt gradient.
#[derive(Debug, Clone)]
pub struct MaliciousUpdateTrace {
    /// Lambda-weighted backdoor contribution to each prompt step.
    pub step_deltas: Vec<PromptVector>,
    /// Norms of `step_deltas`, precomputed for the bias bound.
    pub step_backdoor_norms: Vec<f64>,
    /// Mean alignment loss over each step's poisoned samples, recorded
    /// before the trigger step and regardless of lambda.
    pub step_backdoor_losses: Vec<f64>,
    pub final_trigger: Trigger,
}

/// Fresh trigger with noise uniform in [−budget/2, budget/2] per pixel.
pub fn init_trigger(dim: usize, linf_budget: f64, seed: u64) -> Result<Trigger> {
    if !(linf_budget >= 0.0) || !linf_budget.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "trigger budget must be a nonnegative real, got {linf_budget}"
        )));
    }
    if linf_budget == 0.0 {
        return Trigger::zeros(dim, 0.0);
    }
    let mut rng = rng_from(derive_seed(seed, &[stream::TRIGGER_INIT]));
    let half = linf_budget / 2.0;
    let noise = (0..dim).map(|_| rng.random_range(-half..half)).collect();
    Ok(Trigger {
        noise,
        linf_budget,
    })
}

/// How many of `n` samples a poison fraction selects: ⌈fraction·n⌉.
fn poison_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n)
}

fn select_poisoned<R: Rng>(n: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "poison fraction must lie in (0,1], got {fraction}"
        )));
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut sel = rand::seq::index::sample(rng, n, poison_count(n, fraction)).into_vec();
    sel.sort_unstable();
    Ok(sel)
}

/// Mixed batch: every clean sample, followed by triggered duplicates of the
/// seed-selected subset relabeled to the target. The clean prefix keeps the
/// input order; the poisoned suffix is in ascending source-index order.
pub fn build_poisoned_batch(
    clean_batch: &[Image],
    trigger: &Trigger,
    target: usize,
    poison_fraction: f64,
    seed: u64,
) -> Result<Vec<Image>> {
    let mut rng = rng_from(seed);
    let sel = select_poisoned(clean_batch.len(), poison_fraction, &mut rng)?;
    let mut mixed = clean_batch.to_vec();
    for &i in &sel {
        mixed.push(Image {
            pixels: apply_trigger(&clean_batch[i].pixels, trigger)?,
            label: target,
        });
    }
    Ok(mixed)
}

/// Mean alignment loss and gradients over a poisoned subset of a batch.
fn backdoor_batch(
    enc: &FrozenEncoders,
    prompt: &PromptVector,
    trigger: &Trigger,
    batch: &[Image],
    selection: &[usize],
    cfg: &AttackConfig,
) -> Result<(f64, PromptVector, Vec<f64>)> {
    let (m, d_tok) = prompt.shape();
    let mut loss_sum = 0.0;
    let mut grad_prompt = PromptVector::zeros(m, d_tok);
    let mut grad_trigger = vec![0.0; trigger.dim()];
    for &i in selection {
        let lg = enc.backdoor_loss_grad_with(
            prompt,
            &trigger.noise,
            &batch[i].pixels,
            cfg.target_label,
            cfg.straight_through,
        )?;
        loss_sum += lg.loss;
        grad_prompt.add_scaled(&lg.grad_prompt, 1.0)?;
        let gt = lg.grad_trigger.expect("backdoor loss always differentiates the trigger");
        for (acc, g) in grad_trigger.iter_mut().zip(&gt) {
            *acc += g;
        }
    }
    let inv = 1.0 / selection.len() as f64;
    for g in &mut grad_trigger {
        *g *= inv;
    }
    Ok((loss_sum * inv, grad_prompt.scaled(inv), grad_trigger))
}

/// The malicious client's round: alternating trigger and prompt steps over
/// seeded mini-batches.
///
/// The mini-batch stream is derived exactly as the benign update derives
/// it, and the poison-selection stream is separate, so a `lambda` of exactly
/// zero under the additive objective reproduces the benign prompt
/// trajectory bit-for-bit and leaves the trigger at its initial value. The
/// returned prompt is the only object uploaded; the trigger never leaves
/// the client.
pub fn malicious_local_update(
    enc: &FrozenEncoders,
    global_prompt: &PromptVector,
    shard: &Dataset,
    trigger: Trigger,
    cfg: &AttackConfig,
    local_steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(PromptVector, Trigger, MaliciousUpdateTrace)> {
    cfg.validate(enc.dims().class_count)?;
    if trigger.dim() != enc.dims().pixel_dim {
        return Err(Error::DimensionMismatch {
            expected: enc.dims().pixel_dim,
            got: trigger.dim(),
        });
    }
    let mut trigger = trigger;
    trigger.project();
    let mut prompt = global_prompt.clone();
    let (m, d_tok) = prompt.shape();

    let mut sampler = BatchSampler::new(
        shard.len(),
        batch_size,
        derive_seed(seed, &[stream::BATCH]),
    )?;
    let mut poison_rng = rng_from(derive_seed(seed, &[stream::POISON]));

    let mut trace = MaliciousUpdateTrace {
        step_deltas: Vec::with_capacity(local_steps),
        step_backdoor_norms: Vec::with_capacity(local_steps),
        step_backdoor_losses: Vec::with_capacity(local_steps),
        final_trigger: trigger.clone(),
    };

    for _ in 0..local_steps {
        let idx = sampler.next_batch();
        let batch = shard.subset(&idx)?;
        let sel = select_poisoned(batch.len(), cfg.poison_fraction_per_batch, &mut poison_rng)?;

        // Trigger step against the lambda-weighted alignment loss, then
        // exact projection. The trigger belongs to the same weighted
        // objective as the prompt, so a zero weight freezes it in place.
        let (bd_loss, _, trigger_grad) =
            backdoor_batch(enc, &prompt, &trigger, &batch.images, &sel, cfg)?;
        trace.step_backdoor_losses.push(bd_loss);
        if cfg.lambda != 0.0 {
            for (n, g) in trigger.noise.iter_mut().zip(&trigger_grad) {
                *n -= cfg.eta_trigger * cfg.lambda * g;
            }
            trigger.project();
        }

        // Prompt step on the combined objective, seen through the updated
        // trigger. Exact zero lambda skips the backdoor term entirely.
        let clean = enc.clean_loss_grad(&prompt, &batch.images)?;
        let (total_grad, delta) = if cfg.lambda == 0.0 {
            (clean.grad_prompt, PromptVector::zeros(m, d_tok))
        } else {
            let (_, bd_prompt_grad, _) =
                backdoor_batch(enc, &prompt, &trigger, &batch.images, &sel, cfg)?;
            match cfg.objective_form {
                ObjectiveForm::Additive => {
                    let delta = bd_prompt_grad.scaled(cfg.lambda);
                    let mut total = clean.grad_prompt;
                    total.add_scaled(&delta, 1.0)?;
                    (total, delta)
                }
                ObjectiveForm::Convex => {
                    let mut total = clean.grad_prompt.scaled(1.0 - cfg.lambda);
                    total.add_scaled(&bd_prompt_grad, cfg.lambda)?;
                    let delta = bd_prompt_grad
                        .sub(&clean.grad_prompt)?
                        .scaled(cfg.lambda);
                    (total, delta)
                }
            }
        };
        trace.step_backdoor_norms.push(delta.l2_norm());
        trace.step_deltas.push(delta);
        prompt.add_scaled(&total_grad, -cfg.eta_prompt)?;
    }

    trace.final_trigger = trigger.clone();
    Ok((prompt, trigger, trace))
}
