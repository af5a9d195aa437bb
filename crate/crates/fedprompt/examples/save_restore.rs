//! Round-trips every persisted artifact through both codecs: the compact
//! binary format the runner checkpoints with, and the JSON twin meant for
//! external tooling. Restored values must match bit for bit.

use std::fs;

use fedprompt::codec::{
    encoders_from_json, encoders_to_json, prompt_from_json, prompt_to_json, read_encoders_bin,
    read_prompt_bin, read_trigger_bin, trigger_from_json, trigger_to_json, validate_trigger,
    write_encoders_bin, write_prompt_bin, write_trigger_bin,
};
use fedprompt::data::Trigger;
use fedprompt::model::{FrozenEncoders, ModelDims, PromptVector};
use fedprompt::rng::rng_from;
use fedprompt::Result;
use rand::Rng;

fn main() -> Result<()> {
    let dims = ModelDims {
        pixel_dim: 64,
        embed_dim: 16,
        token_dim: 16,
        prompt_len: 4,
        class_count: 10,
    };
    let enc = FrozenEncoders::new(dims, 0.07, 7)?;
    let prompt = PromptVector::gaussian(4, 16, 0.05, 8);
    let mut trigger = Trigger::zeros(64, 8.0 / 255.0)?;
    let mut rng = rng_from(9);
    for n in trigger.noise.iter_mut() {
        *n = rng.random_range(-0.04..0.04);
    }
    trigger.project();

    let dir = tempfile::tempdir().expect("tempdir");
    let path = |name: &str| dir.path().join(name);

    // binary round-trips
    let mut f = fs::File::create(path("prompt.bin"))?;
    write_prompt_bin(&prompt, &mut f)?;
    let mut f = fs::File::create(path("trigger.bin"))?;
    write_trigger_bin(&trigger, &mut f)?;
    let mut f = fs::File::create(path("encoders.bin"))?;
    write_encoders_bin(&enc, &mut f)?;

    let prompt_bin = read_prompt_bin(&mut fs::File::open(path("prompt.bin"))?)?;
    let trigger_bin = read_trigger_bin(&mut fs::File::open(path("trigger.bin"))?)?;
    let enc_bin = read_encoders_bin(&mut fs::File::open(path("encoders.bin"))?)?;
    assert_eq!(prompt, prompt_bin);
    assert_eq!(trigger, trigger_bin);
    assert_eq!(enc, enc_bin);

    // JSON round-trips
    fs::write(path("prompt.json"), prompt_to_json(&prompt)?)?;
    fs::write(path("trigger.json"), trigger_to_json(&trigger)?)?;
    fs::write(path("encoders.json"), encoders_to_json(&enc)?)?;

    let prompt_json = prompt_from_json(&fs::read_to_string(path("prompt.json"))?)?;
    let trigger_json = trigger_from_json(&fs::read_to_string(path("trigger.json"))?)?;
    let enc_json = encoders_from_json(&fs::read_to_string(path("encoders.json"))?)?;
    assert_eq!(prompt, prompt_json);
    assert_eq!(trigger, trigger_json);
    assert_eq!(enc, enc_json);

    println!("artifact    binary      json");
    for (name, bin, json) in [
        ("prompt", "prompt.bin", "prompt.json"),
        ("trigger", "trigger.bin", "trigger.json"),
        ("encoders", "encoders.bin", "encoders.json"),
    ] {
        println!(
            "{:<9} {:>6} B  {:>7} B",
            name,
            fs::metadata(path(bin))?.len(),
            fs::metadata(path(json))?.len(),
        );
    }
    println!();
    println!("all six restores are bitwise equal to the originals");

    // restores are validated, so corrupt artifacts fail loudly
    let mut broken = trigger.clone();
    broken.noise[0] = f64::NAN;
    match validate_trigger(&broken) {
        Err(e) => println!("corrupt trigger rejected: {e}"),
        Ok(()) => unreachable!("NaN noise must not validate"),
    }
    Ok(())
}
