//! Measures how far the attackers push each aggregated round and checks
//! the drift against its closed-form budget: with fraction rho of clients
//! malicious, T local steps, and per-step alignment deltas no larger than
//! delta, the aggregate can move at most rho*T*delta per round.

use fedprompt::attack::{AttackConfig, ObjectiveForm};
use fedprompt::federation::{
    check_attack_bias_bound, local_step_count, run_experiment, AggregationRule, ExperimentConfig,
    PartitionMode, WeightingMode,
};
use fedprompt::model::ModelDims;
use fedprompt::Result;

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
        rounds: 30,
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

    let outcome = run_experiment(&cfg)?;

    // every client trains the same shot count, so one step count serves all
    let shard_len = cfg.dims.class_count * 6;
    let steps = local_step_count(shard_len, cfg.local_epochs, cfg.batch_size);
    let checks = check_attack_bias_bound(&outcome.history, cfg.malicious_fraction, steps)?;

    println!(
        "rho = {}, T = {steps} local steps, {} rounds",
        cfg.malicious_fraction, cfg.rounds
    );
    println!();
    println!("round  measured-bias  rho*T*delta  ratio");
    let mut max_ratio: f64 = 0.0;
    for check in &checks {
        let ratio = check.bias_norm / check.triangle_bound;
        max_ratio = max_ratio.max(ratio);
        if check.round % 3 == 0 || check.round + 1 == checks.len() {
            println!(
                "{:>5}        {:.4}       {:.4}  {:.3}",
                check.round, check.bias_norm, check.triangle_bound, ratio
            );
        }
    }

    let all_hold = checks.iter().all(|c| c.triangle_holds);
    println!();
    println!(
        "bound held in {}/{} rounds, tightest at ratio {max_ratio:.3}",
        checks.iter().filter(|c| c.triangle_holds).count(),
        checks.len()
    );
    if !all_hold {
        std::process::exit(1);
    }
    println!("delta is the largest single-step alignment delta observed in the");
    println!("run, so the budget is computable from uploads alone; a ratio near");
    println!("one means the attackers spend almost their whole allowance.");
    Ok(())
}
