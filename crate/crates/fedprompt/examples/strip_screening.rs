//! Run-time input screening: blend each incoming image with random clean
//! overlays and flag it when the averaged prediction keeps low entropy.
//! A backdoored input keeps voting for the target class through the
//! blends, so its entropy collapses; clean inputs get scrambled.

use fedprompt::attack::{AttackConfig, ObjectiveForm};
use fedprompt::data::apply_trigger;
use fedprompt::defenses::{strip_calibrate_threshold, strip_entropy};
use fedprompt::federation::{
    run_experiment, AggregationRule, ExperimentConfig, PartitionMode, WeightingMode,
};
use fedprompt::model::ModelDims;
use fedprompt::rng::derive_seed;
use fedprompt::Result;

const OVERLAYS: usize = 16;

fn main() -> Result<()> {
    let cfg = ExperimentConfig {
        dims: ModelDims {
            pixel_dim: 256,
            embed_dim: 32,
            token_dim: 32,
            prompt_len: 4,
            class_count: 10,
        },
        temperature: 0.07,
        per_class_train: 100,
        per_class_test: 20,
        noise_sigma: 0.05,
        n_clients: 10,
        malicious_fraction: 0.2,
        rounds: 50,
        local_epochs: 5,
        batch_size: 32,
        learning_rate: 0.001,
        partition: PartitionMode::KshotIid { shots: 6 },
        weighting: WeightingMode::Uniform,
        rule: AggregationRule::FedAvg,
        attack: AttackConfig {
            target_label: 0,
            lambda: 10.0,
            eta_prompt: 0.001,
            eta_trigger: 0.01,
            linf_budget: 24.0 / 255.0,
            poison_fraction_per_batch: 1.0,
            objective_form: ObjectiveForm::Additive,
            coordinated: true,
            straight_through: false,
        },
        randomize_roles: false,
        seed: 42,
    };

    println!("training the attacked federation ({} rounds)...", cfg.rounds);
    let outcome = run_experiment(&cfg)?;
    let last = outcome.history.last().expect("rounds ran");
    println!("final acc {:.4}, asr {:.4}", last.acc, last.asr);
    println!();

    // rebuild eval-side state: encoders and the test pool double as the
    // overlay source, exactly what a deployment would have on hand
    let fed = fedprompt::federation::Federation::new(cfg.clone())?;
    let enc = fed.encoders();
    let test = fed.test_set();
    let prompt = &outcome.final_prompt;
    let trigger = outcome.final_trigger.expect("attacked run trains a trigger");

    let mut clean = Vec::with_capacity(test.len());
    for (i, im) in test.images.iter().enumerate() {
        let r = strip_entropy(
            enc,
            prompt,
            &im.pixels,
            &test.images,
            OVERLAYS,
            derive_seed(cfg.seed, &[900, 0, i as u64]),
            0.0,
        )?;
        clean.push(r.entropy);
    }

    let mut poisoned = Vec::with_capacity(test.len());
    for (i, im) in test.images.iter().enumerate() {
        let triggered = apply_trigger(&im.pixels, &trigger)?;
        let r = strip_entropy(
            enc,
            prompt,
            &triggered,
            &test.images,
            OVERLAYS,
            derive_seed(cfg.seed, &[900, 1, i as u64]),
            0.0,
        )?;
        poisoned.push(r.entropy);
    }

    let threshold = strip_calibrate_threshold(&clean)?;
    let median = |xs: &[f64]| {
        let mut s = xs.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s[s.len() / 2]
    };
    let caught = poisoned.iter().filter(|&&e| e < threshold).count();
    let false_alarms = clean.iter().filter(|&&e| e < threshold).count();

    println!("{OVERLAYS} overlays per input, {} inputs per arm", test.len());
    println!("median entropy: clean {:.4}, triggered {:.4}", median(&clean), median(&poisoned));
    println!("threshold at 1% clean rejection: {threshold:.4}");
    println!(
        "flagged: {}/{} triggered inputs, {}/{} clean inputs",
        caught,
        poisoned.len(),
        false_alarms,
        clean.len()
    );
    Ok(())
}
