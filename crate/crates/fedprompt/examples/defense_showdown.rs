//! Runs the identical attack against every aggregation rule and compares
//! outcomes: how much attack success each defense removes, what it costs
//! in clean accuracy, and how often it actually excluded the attackers.

use fedprompt::attack::{AttackConfig, ObjectiveForm};
use fedprompt::federation::{
    run_experiment, AggregationRule, ExperimentConfig, PartitionMode, WeightingMode,
};
use fedprompt::model::ModelDims;
use fedprompt::Result;

fn base_config(rule: AggregationRule) -> ExperimentConfig {
    ExperimentConfig {
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
        rule,
        attack: AttackConfig {
            target_label: 0,
            lambda: 10.0,
            eta_prompt: 0.001,
            eta_trigger: 0.01,
            linf_budget: 16.0 / 255.0,
            poison_fraction_per_batch: 1.0,
            objective_form: ObjectiveForm::Additive,
            coordinated: true,
            straight_through: false,
        },
        randomize_roles: false,
        seed: 42,
    }
}

fn main() -> Result<()> {
    let rules = [
        AggregationRule::FedAvg,
        AggregationRule::MultiKrum {
            assumed_malicious: 2,
            select_count: 6,
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

    let cfg = base_config(AggregationRule::FedAvg);
    let malicious: Vec<usize> = (0..cfg.malicious_count()).collect();
    println!(
        "attack: {} of {} clients, lambda {}, budget {:.4}, {} rounds each",
        malicious.len(),
        cfg.n_clients,
        cfg.attack.lambda,
        cfg.attack.linf_budget,
        cfg.rounds
    );
    println!();
    println!("rule          final-acc  final-asr  attacker-exclusions");

    for rule in rules {
        let cfg = base_config(rule.clone());
        let outcome = run_experiment(&cfg)?;
        let last = outcome.history.last().expect("at least one round");

        // rounds in which every malicious id was dropped from the average
        let shutouts = outcome
            .history
            .iter()
            .filter(|r| malicious.iter().all(|id| r.excluded.contains(id)))
            .count();

        println!(
            "{:<12}     {:.4}     {:.4}  {:>10}/{}",
            rule.name(),
            last.acc,
            last.asr,
            shutouts,
            cfg.rounds
        );
    }

    println!();
    println!("exclusions count rounds where every attacker was dropped;");
    println!("averaging-style rules (fedavg, dp_fedavg) never exclude anyone.");
    println!();
    println!("two effects worth noticing: a trigger trained locally keeps part");
    println!("of its power even when every poisoned prompt is rejected, and");
    println!("foolsgold can backfire here because IID shards make honest");
    println!("clients more mutually similar than the attackers it looks for.");
    Ok(())
}
