//! Validates every analytic gradient against central finite differences:
//! the clean-loss prompt gradient, and the alignment-loss gradients with
//! respect to both the prompt and the trigger noise.

use fedprompt::data::{generate_dataset, Trigger};
use fedprompt::model::{FrozenEncoders, ModelDims, PromptVector};
use fedprompt::numerics::finite_diff_check;
use fedprompt::rng::rng_from;
use fedprompt::Result;
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn main() -> Result<()> {
    let dims = ModelDims {
        pixel_dim: 16,
        embed_dim: 8,
        token_dim: 8,
        prompt_len: 2,
        class_count: 4,
    };
    println!("finite-difference step {STEP:.0e}, pass tolerance {TOL:.0e}");
    println!();
    println!("seed  clean/prompt   backdoor/prompt  backdoor/trigger");

    let mut worst: f64 = 0.0;
    for seed in 0..8u64 {
        let enc = FrozenEncoders::new(dims, 0.07, seed)?;
        let prompt = PromptVector::gaussian(2, 8, 0.05, seed + 100);
        let (train, _) = generate_dataset(4, 2, 1, 16, 0.05, seed + 200)?;
        let batch = train.subset(&[0, 2, 5])?;
        let target = (seed % 4) as usize;

        let clean = enc.clean_loss_grad(&prompt, &batch.images)?;
        let clean_err = finite_diff_check(
            |x| {
                let p = PromptVector::from_flat(2, 8, x).unwrap();
                enc.clean_loss_grad(&p, &batch.images).unwrap().loss
            },
            &prompt.to_flat(),
            &clean.grad_prompt.to_flat(),
            STEP,
        )?
        .max_rel_error;

        // interior pixels and a small perturbation keep the clip inactive,
        // so the analytic trigger gradient is exact
        let mut rng = rng_from(seed + 300);
        let pixels: Vec<f64> = (0..16).map(|_| rng.random_range(0.3..0.7)).collect();
        let mut trigger = Trigger::zeros(16, 0.05)?;
        for n in trigger.noise.iter_mut() {
            *n = rng.random_range(-0.01..0.01);
        }

        let bd = enc.backdoor_loss_grad_with(&prompt, &trigger.noise, &pixels, target, false)?;
        let bd_prompt_err = finite_diff_check(
            |x| {
                let p = PromptVector::from_flat(2, 8, x).unwrap();
                enc.backdoor_loss_grad_with(&p, &trigger.noise, &pixels, target, false)
                    .unwrap()
                    .loss
            },
            &prompt.to_flat(),
            &bd.grad_prompt.to_flat(),
            STEP,
        )?
        .max_rel_error;

        let grad_trigger = bd.grad_trigger.expect("trigger gradient requested");
        let bd_trigger_err = finite_diff_check(
            |x| {
                enc.backdoor_loss_grad_with(&prompt, x, &pixels, target, false)
                    .unwrap()
                    .loss
            },
            &trigger.noise,
            &grad_trigger,
            STEP,
        )?
        .max_rel_error;

        worst = worst.max(clean_err).max(bd_prompt_err).max(bd_trigger_err);
        println!("{seed:>4}     {clean_err:>9.2e}        {bd_prompt_err:>9.2e}         {bd_trigger_err:>9.2e}");
    }

    println!();
    if worst <= TOL {
        println!("all gradients agree (worst relative error {worst:.2e})");
    } else {
        println!("MISMATCH: worst relative error {worst:.2e} exceeds {TOL:.0e}");
        std::process::exit(1);
    }
    Ok(())
}
