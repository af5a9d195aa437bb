//! Effectiveness and stealth measurement: clean accuracy, attack success
//! rate, image-quality scores for poisoned inputs, and embedding export.
//!
//! CSV output formats every real with 17 significant digits so files
//! round-trip f64 values exactly.

use std::io::Write;

use crate::data::{apply_trigger, poison_testset, poison_testset_keeping_target, Dataset, Image, Trigger};
use crate::error::{Error, Result};
use crate::model::{FrozenEncoders, PromptVector};

/// Clean and poisoned evaluation in one record.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub acc: f64,
    pub asr: f64,
    pub n_clean: usize,
    pub n_poisoned: usize,
}

/// Stealth scores for one clean/poisoned image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageQuality {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// f64 as text with 17 significant digits; parses back bit-exactly.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Fraction of test images predicted as their ground-truth label.
pub fn accuracy(enc: &FrozenEncoders, prompt: &PromptVector, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0usize;
    for im in &test.images {
        hits += usize::from(enc.predict(prompt, &im.pixels)? == im.label);
    }
    Ok(hits as f64 / test.len() as f64)
}

fn fraction_predicted_target(
    enc: &FrozenEncoders,
    prompt: &PromptVector,
    poisoned: &Dataset,
    target: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    for im in &poisoned.images {
        hits += usize::from(enc.predict(prompt, &im.pixels)? == target);
    }
    Ok(hits as f64 / poisoned.len() as f64)
}

/// Fraction of triggered non-target test images predicted as the target.
pub fn attack_success_rate(
    enc: &FrozenEncoders,
    prompt: &PromptVector,
    trigger: &Trigger,
    test: &Dataset,
    target: usize,
) -> Result<f64> {
    let poisoned = poison_testset(test, trigger, target)?;
    fraction_predicted_target(enc, prompt, &poisoned, target)
}

/// Success-rate variant that keeps target-class samples in the denominator.
pub fn attack_success_rate_inclusive(
    enc: &FrozenEncoders,
    prompt: &PromptVector,
    trigger: &Trigger,
    test: &Dataset,
    target: usize,
) -> Result<f64> {
    let poisoned = poison_testset_keeping_target(test, trigger, target)?;
    fraction_predicted_target(enc, prompt, &poisoned, target)
}

/// Accuracy and attack success over the same held-out test set.
pub fn eval_report(
    enc: &FrozenEncoders,
    prompt: &PromptVector,
    test: &Dataset,
    trigger: &Trigger,
    target: usize,
    include_target: bool,
) -> Result<EvalReport> {
    let acc = accuracy(enc, prompt, test)?;
    let poisoned = if include_target {
        poison_testset_keeping_target(test, trigger, target)?
    } else {
        poison_testset(test, trigger, target)?
    };
    let asr = fraction_predicted_target(enc, prompt, &poisoned, target)?;
    Ok(EvalReport {
        acc,
        asr,
        n_clean: test.len(),
        n_poisoned: poisoned.len(),
    })
}

/// Peak signal-to-noise ratio in dB for unit dynamic range, capped at 99 dB
/// when the mean squared error drops below 1e-10.
pub fn psnr(clean: &[f64], poisoned: &[f64]) -> Result<f64> {
    if clean.len() != poisoned.len() {
        return Err(Error::DimensionMismatch {
            expected: clean.len(),
            got: poisoned.len(),
        });
    }
    if clean.is_empty() {
        return Err(Error::InvalidParameter("psnr: empty images".into()));
    }
    let mse: f64 = clean
        .iter()
        .zip(poisoned)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / clean.len() as f64;
    if mse < 1e-10 {
        return Ok(99.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_TILE: usize = 8;

/// Structural similarity over non-overlapping 8×8 tiles with population
/// moments and unit dynamic range. Partial tiles at the right and bottom
/// edges are included. `shape` gives (height, width); omit it for square
/// images.
pub fn ssim(clean: &[f64], poisoned: &[f64], shape: Option<(usize, usize)>) -> Result<f64> {
    if clean.len() != poisoned.len() {
        return Err(Error::DimensionMismatch {
            expected: clean.len(),
            got: poisoned.len(),
        });
    }
    let (h, w) = match shape {
        Some((h, w)) => {
            if h * w != clean.len() {
                return Err(Error::InvalidParameter(format!(
                    "ssim: shape {h}x{w} does not match {} pixels",
                    clean.len()
                )));
            }
            (h, w)
        }
        None => {
            let side = (clean.len() as f64).sqrt().round() as usize;
            if side * side != clean.len() {
                return Err(Error::InvalidParameter(format!(
                    "ssim: {} pixels is not square; pass an explicit shape",
                    clean.len()
                )));
            }
            (side, side)
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::InvalidParameter("ssim: empty images".into()));
    }

    let mut total = 0.0;
    let mut tiles = 0usize;
    for ty in (0..h).step_by(SSIM_TILE) {
        for tx in (0..w).step_by(SSIM_TILE) {
            let th = SSIM_TILE.min(h - ty);
            let tw = SSIM_TILE.min(w - tx);
            let count = (th * tw) as f64;
            let mut sx = 0.0;
            let mut sy = 0.0;
            for r in ty..ty + th {
                for c in tx..tx + tw {
                    sx += clean[r * w + c];
                    sy += poisoned[r * w + c];
                }
            }
            let mx = sx / count;
            let my = sy / count;
            let mut vx = 0.0;
            let mut vy = 0.0;
            let mut cov = 0.0;
            for r in ty..ty + th {
                for c in tx..tx + tw {
                    let dx = clean[r * w + c] - mx;
                    let dy = poisoned[r * w + c] - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cov += dx * dy;
                }
            }
            vx /= count;
            vy /= count;
            cov /= count;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            tiles += 1;
        }
    }
    Ok(total / tiles as f64)
}

/// Quality scores for a clean image against its triggered version.
pub fn image_quality(
    clean: &[f64],
    trigger: &Trigger,
    shape: Option<(usize, usize)>,
) -> Result<ImageQuality> {
    let poisoned = apply_trigger(clean, trigger)?;
    Ok(ImageQuality {
        psnr_db: psnr(clean, &poisoned)?,
        ssim: ssim(clean, &poisoned, shape)?,
    })
}

/// Write one embedding row per image: `id,label,poisoned,e0..e{d-1}`. When
/// a trigger is given, each clean row is followed by the embedding of the
/// triggered image. The header is always written.
pub fn export_embeddings<W: Write>(
    enc: &FrozenEncoders,
    images: &[Image],
    trigger: Option<&Trigger>,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = enc.dims().embed_dim;
    let mut header = vec!["id".to_string(), "label".to_string(), "poisoned".to_string()];
    header.extend((0..d).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (id, im) in images.iter().enumerate() {
        let clean = enc.encode_image(&im.pixels)?;
        let mut row = vec![id.to_string(), im.label.to_string(), "0".to_string()];
        row.extend(clean.iter().map(|&v| fmt_real(v)));
        w.write_record(&row)?;
        if let Some(t) = trigger {
            let poisoned = enc.encode_image(&apply_trigger(&im.pixels, t)?)?;
            let mut row = vec![id.to_string(), im.label.to_string(), "1".to_string()];
            row.extend(poisoned.iter().map(|&v| fmt_real(v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Split};
    use crate::model::ModelDims;

    fn identity_fixture() -> FrozenEncoders {
        FrozenEncoders::from_parts(
            ModelDims {
                pixel_dim: 2,
                embed_dim: 2,
                token_dim: 2,
                prompt_len: 0,
                class_count: 2,
            },
            0.07,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![vec![1.0, 0.1], vec![0.1, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn test_accuracy_extremes() {
        let enc = identity_fixture();
        let prompt = PromptVector::zeros(0, 2);
        let right = Dataset {
            images: vec![
                Image { pixels: vec![1.0, 0.0], label: 0 },
                Image { pixels: vec![0.0, 1.0], label: 1 },
            ],
            class_count: 2,
            split: Split::Test,
        };
        assert_eq!(accuracy(&enc, &prompt, &right).unwrap(), 1.0);
        let wrong = Dataset {
            images: vec![
                Image { pixels: vec![1.0, 0.0], label: 1 },
                Image { pixels: vec![0.0, 1.0], label: 0 },
            ],
            class_count: 2,
            split: Split::Test,
        };
        assert_eq!(accuracy(&enc, &prompt, &wrong).unwrap(), 0.0);
        let empty = Dataset { images: vec![], class_count: 2, split: Split::Test };
        assert!(accuracy(&enc, &prompt, &empty).is_err());
    }

    #[test]
    fn test_asr_matches_definition() {
        let dims = ModelDims {
            pixel_dim: 64,
            embed_dim: 16,
            token_dim: 16,
            prompt_len: 2,
            class_count: 10,
        };
        let enc = FrozenEncoders::new(dims, 0.07, 7).unwrap();
        let prompt = PromptVector::gaussian(2, 16, 0.02, 8);
        let (_, test) = generate_dataset(10, 2, 20, 64, 0.05, 9).unwrap();
        let target = 3;
        let trigger = Trigger::zeros(64, 0.1).unwrap();
        let asr = attack_success_rate(&enc, &prompt, &trigger, &test, target).unwrap();
        // zero trigger: the rate is exactly the fraction of non-target
        // images this (untrained) model misreads as the target
        let mut hits = 0usize;
        let mut total = 0usize;
        for im in &test.images {
            if im.label == target {
                continue;
            }
            total += 1;
            hits += usize::from(enc.predict(&prompt, &im.pixels).unwrap() == target);
        }
        assert_eq!(asr, hits as f64 / total as f64);
        assert!((0.0..=1.0).contains(&asr));
    }

    #[test]
    fn test_asr_saturating_trigger_hits_one() {
        let dims = ModelDims {
            pixel_dim: 16,
            embed_dim: 8,
            token_dim: 8,
            prompt_len: 2,
            class_count: 4,
        };
        let enc = FrozenEncoders::new(dims, 0.07, 11).unwrap();
        let prompt = PromptVector::gaussian(2, 8, 0.02, 12);
        let (_, test) = generate_dataset(4, 2, 6, 16, 0.0, 13).unwrap();
        // saturating trigger: every poisoned image becomes all-ones
        let trigger = Trigger {
            noise: vec![1.0; 16],
            linf_budget: 1.0,
        };
        let target = enc.predict(&prompt, &vec![1.0; 16]).unwrap();
        let asr = attack_success_rate(&enc, &prompt, &trigger, &test, target).unwrap();
        assert_eq!(asr, 1.0);
    }

    #[test]
    fn test_asr_inclusive_denominator() {
        let enc = identity_fixture();
        let prompt = PromptVector::zeros(0, 2);
        let test = Dataset {
            images: vec![
                Image { pixels: vec![1.0, 0.0], label: 0 },
                Image { pixels: vec![0.0, 1.0], label: 1 },
            ],
            class_count: 2,
            split: Split::Test,
        };
        let trigger = Trigger::zeros(2, 0.0).unwrap();
        let report = eval_report(&enc, &prompt, &test, &trigger, 0, true).unwrap();
        assert_eq!(report.n_poisoned, 2);
        let report = eval_report(&enc, &prompt, &test, &trigger, 0, false).unwrap();
        assert_eq!(report.n_poisoned, 1);
    }

    #[test]
    fn test_psnr_identical_capped() {
        let x = vec![0.25; 64];
        assert_eq!(psnr(&x, &x).unwrap(), 99.0);
    }

    #[test]
    fn test_psnr_uniform_difference() {
        let a = vec![0.4; 100];
        let b = vec![0.5; 100];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn test_psnr_linf_budget_floor() {
        // full-budget 8/255 shift on every pixel: the worst case for any
        // trigger within that budget, sitting exactly on the analytic
        // floor 20·log10(255/8) ≈ 30.069 dB
        let eps = 8.0 / 255.0;
        let a = vec![0.3; 256];
        let b: Vec<f64> = a.iter().map(|x| x + eps).collect();
        let p = psnr(&a, &b).unwrap();
        let analytic = 20.0 * (255.0_f64 / 8.0).log10();
        assert!((p - analytic).abs() < 1e-9);
        // any partially saturated trigger lands strictly above the floor
        let c: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, x)| if i % 2 == 0 { x + eps } else { *x })
            .collect();
        assert!(psnr(&a, &c).unwrap() > analytic);
    }

    #[test]
    fn test_psnr_dim_mismatch() {
        assert!(psnr(&[0.1, 0.2], &[0.1]).is_err());
    }

    #[test]
    fn test_ssim_identical_is_exactly_one() {
        let x: Vec<f64> = (0..256).map(|i| ((i * 37) % 97) as f64 / 96.0).collect();
        assert_eq!(ssim(&x, &x, None).unwrap(), 1.0);
    }

    #[test]
    fn test_ssim_negative_image_fixture() {
        // deterministic high-variance 16x16 pattern against its negative
        let x: Vec<f64> = (0..256).map(|i| ((i * 37) % 97) as f64 / 96.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        let s = ssim(&x, &neg, None).unwrap();
        assert!((s - (-0.988_342_860_996_331_1)).abs() < 1e-12, "{s}");
    }

    #[test]
    fn test_ssim_constant_images_closed_form() {
        let a = vec![0.3; 64];
        let b = vec![0.5; 64];
        let s = ssim(&a, &b, None).unwrap();
        let want = (2.0 * 0.3 * 0.5 + SSIM_C1) / (0.3 * 0.3 + 0.5 * 0.5 + SSIM_C1);
        assert!((s - want).abs() < 1e-15);
        assert!((s - 0.882_387_533_078_506_3).abs() < 1e-12);
    }

    #[test]
    fn test_ssim_symmetry() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let y: Vec<f64> = (0..100).map(|i| (i as f64 * 0.11).cos().abs()).collect();
        let ab = ssim(&x, &y, None).unwrap();
        let ba = ssim(&y, &x, None).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn test_ssim_shape_handling() {
        let x = vec![0.5; 12];
        assert!(ssim(&x, &x, None).is_err());
        assert_eq!(ssim(&x, &x, Some((3, 4))).unwrap(), 1.0);
        assert!(ssim(&x, &x, Some((5, 2))).is_err());
        // partial edge tiles on a 10x10 image
        let y: Vec<f64> = (0..100).map(|i| (i % 7) as f64 / 6.0).collect();
        let z: Vec<f64> = (0..100).map(|i| (i % 5) as f64 / 4.0).collect();
        let s = ssim(&y, &z, Some((10, 10))).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn test_image_quality_pairs() {
        let clean = vec![0.5; 256];
        let trigger = Trigger {
            noise: vec![8.0 / 255.0; 256],
            linf_budget: 8.0 / 255.0,
        };
        let q = image_quality(&clean, &trigger, None).unwrap();
        assert!(q.psnr_db >= 20.0 * (255.0_f64 / 8.0).log10() - 1e-9);
        assert!(q.ssim > 0.9);
    }

    #[test]
    fn test_export_embeddings_header_only_when_empty() {
        let enc = identity_fixture();
        let mut buf = Vec::new();
        export_embeddings(&enc, &[], None, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "id,label,poisoned,e0,e1\n");
    }

    #[test]
    fn test_export_embeddings_rows() {
        let enc = identity_fixture();
        let images = vec![
            Image { pixels: vec![1.0, 0.0], label: 0 },
            Image { pixels: vec![0.6, 0.8], label: 1 },
        ];
        let trigger = Trigger::zeros(2, 0.1).unwrap();
        let mut buf = Vec::new();
        export_embeddings(&enc, &images, Some(&trigger), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        // zero trigger: the poisoned row repeats the clean embedding
        let clean: Vec<&str> = lines[1].split(',').collect();
        let poisoned: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(clean[0], "0");
        assert_eq!(clean[2], "0");
        assert_eq!(poisoned[2], "1");
        assert_eq!(clean[3..], poisoned[3..]);
        // values round-trip to the exact embedding
        let e = enc.encode_image(&images[1].pixels).unwrap();
        let row: Vec<&str> = lines[3].split(',').collect();
        for (text, want) in row[3..].iter().zip(&e) {
            assert_eq!(text.parse::<f64>().unwrap(), *want);
        }
    }
}
