//! End-to-end attacked federation: ten clients learn a shared prompt,
//! two of them alternate trigger and poisoned-prompt steps, the server
//! averages. Prints the round-by-round trajectory and a final report.

use fedprompt::attack::{AttackConfig, ObjectiveForm};
use fedprompt::federation::{
    AggregationRule, ExperimentConfig, Federation, PartitionMode, WeightingMode,
};
use fedprompt::metrics::image_quality;
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

    println!(
        "{} clients ({} malicious), {} rounds, trigger budget {:.4}",
        cfg.n_clients,
        cfg.malicious_count(),
        cfg.rounds,
        cfg.attack.linf_budget
    );
    println!();
    println!("round    acc     asr   clean-loss  attack-bias");

    let mut fed = Federation::new(cfg.clone())?;
    for round in 0..cfg.rounds {
        let (_, rec) = fed.run_round(round)?;
        if round % 3 == 0 || round + 1 == cfg.rounds {
            println!(
                "{:>5}  {:.4}  {:.4}  {:>10.4}  {:>11.4e}",
                rec.round, rec.acc, rec.asr, rec.mean_clean_loss, rec.attack_bias_norm
            );
        }
    }

    let trigger = fed.eval_trigger().expect("attacked run trains a trigger");
    let linf = trigger
        .noise
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let saturated = trigger
        .noise
        .iter()
        .filter(|v| (v.abs() - trigger.linf_budget).abs() < 1e-12)
        .count();

    println!();
    println!(
        "trigger: |noise|_inf = {:.4} (budget {:.4}), {}/{} pixels saturated",
        linf,
        trigger.linf_budget,
        saturated,
        trigger.dim()
    );

    let sample = &fed.test_set().images[0];
    let q = image_quality(&sample.pixels, trigger, Some((16, 16)))?;
    println!(
        "sample triggered image: psnr {:.2} dB, ssim {:.4}",
        q.psnr_db, q.ssim
    );
    Ok(())
}
