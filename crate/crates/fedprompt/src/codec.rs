//! Bit-exact persistence for prompts, triggers, and encoder weights.
//!
//! Binary layout is little-endian throughout: a 4-byte magic, a u16 format
//! version, shape fields as u32, then raw f64 payloads. JSON mirrors the
//! same content through serde for human inspection and golden-file tests;
//! both formats round-trip every finite f64 bit-for-bit.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::Trigger;
use crate::error::{Error, Result};
use crate::model::{FrozenEncoders, ModelDims, PromptVector};

const PROMPT_MAGIC: &[u8; 4] = b"FPPV";
const TRIGGER_MAGIC: &[u8; 4] = b"FPTR";
const ENCODERS_MAGIC: &[u8; 4] = b"FPEN";
const FORMAT_VERSION: u16 = 1;

fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn expect_header<R: Read>(r: &mut R, magic: &[u8; 4], what: &'static str) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::MalformedData {
            what,
            detail: format!("bad magic {got:?}, expected {magic:?}"),
        });
    }
    let version = read_u16(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::MalformedData {
            what,
            detail: format!("unsupported format version {version}"),
        });
    }
    Ok(())
}

fn shape_as_u32(n: usize, what: &'static str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::MalformedData {
        what,
        detail: format!("dimension {n} exceeds the u32 shape field"),
    })
}

/// Reject ragged or non-finite prompts before they reach disk or math.
pub fn validate_prompt(prompt: &PromptVector) -> Result<()> {
    let (_, dim) = prompt.shape();
    if prompt.tokens.iter().any(|t| t.len() != dim) {
        return Err(Error::MalformedData {
            what: "prompt",
            detail: "ragged token dimensions".into(),
        });
    }
    if !prompt.is_finite() {
        return Err(Error::NonFinite("prompt tokens"));
    }
    Ok(())
}

/// Reject non-finite or budget-violating triggers.
pub fn validate_trigger(trigger: &Trigger) -> Result<()> {
    if !trigger.linf_budget.is_finite() || trigger.linf_budget < 0.0 {
        return Err(Error::MalformedData {
            what: "trigger",
            detail: format!("budget {} is not a nonnegative real", trigger.linf_budget),
        });
    }
    if !trigger.noise.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("trigger noise"));
    }
    if !trigger.within_budget() {
        return Err(Error::MalformedData {
            what: "trigger",
            detail: "noise exceeds the stated budget".into(),
        });
    }
    Ok(())
}

pub fn write_prompt_bin<W: Write>(prompt: &PromptVector, w: &mut W) -> Result<()> {
    validate_prompt(prompt)?;
    let (len, dim) = prompt.shape();
    w.write_all(PROMPT_MAGIC)?;
    write_u16(w, FORMAT_VERSION)?;
    write_u32(w, shape_as_u32(len, "prompt")?)?;
    write_u32(w, shape_as_u32(dim, "prompt")?)?;
    for t in &prompt.tokens {
        for &v in t {
            write_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn read_prompt_bin<R: Read>(r: &mut R) -> Result<PromptVector> {
    expect_header(r, PROMPT_MAGIC, "prompt file")?;
    let len = read_u32(r)? as usize;
    let dim = read_u32(r)? as usize;
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..len {
        let mut t = Vec::with_capacity(dim);
        for _ in 0..dim {
            t.push(read_f64(r)?);
        }
        tokens.push(t);
    }
    let prompt = PromptVector { tokens };
    validate_prompt(&prompt)?;
    Ok(prompt)
}

pub fn write_trigger_bin<W: Write>(trigger: &Trigger, w: &mut W) -> Result<()> {
    validate_trigger(trigger)?;
    w.write_all(TRIGGER_MAGIC)?;
    write_u16(w, FORMAT_VERSION)?;
    write_u32(w, shape_as_u32(trigger.noise.len(), "trigger")?)?;
    write_f64(w, trigger.linf_budget)?;
    for &v in &trigger.noise {
        write_f64(w, v)?;
    }
    Ok(())
}

pub fn read_trigger_bin<R: Read>(r: &mut R) -> Result<Trigger> {
    expect_header(r, TRIGGER_MAGIC, "trigger file")?;
    let dim = read_u32(r)? as usize;
    let linf_budget = read_f64(r)?;
    let mut noise = Vec::with_capacity(dim);
    for _ in 0..dim {
        noise.push(read_f64(r)?);
    }
    let trigger = Trigger { noise, linf_budget };
    validate_trigger(&trigger)?;
    Ok(trigger)
}

pub fn write_encoders_bin<W: Write>(enc: &FrozenEncoders, w: &mut W) -> Result<()> {
    let dims = enc.dims();
    w.write_all(ENCODERS_MAGIC)?;
    write_u16(w, FORMAT_VERSION)?;
    write_u32(w, shape_as_u32(dims.pixel_dim, "encoders")?)?;
    write_u32(w, shape_as_u32(dims.embed_dim, "encoders")?)?;
    write_u32(w, shape_as_u32(dims.token_dim, "encoders")?)?;
    write_u32(w, shape_as_u32(dims.prompt_len, "encoders")?)?;
    write_u32(w, shape_as_u32(dims.class_count, "encoders")?)?;
    write_f64(w, enc.temperature())?;
    for &v in &enc.image_proj.data {
        write_f64(w, v)?;
    }
    for &v in &enc.text_proj.data {
        write_f64(w, v)?;
    }
    for token in &enc.class_tokens {
        for &v in token {
            write_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn read_encoders_bin<R: Read>(r: &mut R) -> Result<FrozenEncoders> {
    expect_header(r, ENCODERS_MAGIC, "encoders file")?;
    let dims = ModelDims {
        pixel_dim: read_u32(r)? as usize,
        embed_dim: read_u32(r)? as usize,
        token_dim: read_u32(r)? as usize,
        prompt_len: read_u32(r)? as usize,
        class_count: read_u32(r)? as usize,
    };
    let temperature = read_f64(r)?;
    let mut image_proj = Vec::with_capacity(dims.embed_dim * dims.pixel_dim);
    for _ in 0..dims.embed_dim * dims.pixel_dim {
        image_proj.push(read_f64(r)?);
    }
    let mut text_proj = Vec::with_capacity(dims.embed_dim * dims.token_dim);
    for _ in 0..dims.embed_dim * dims.token_dim {
        text_proj.push(read_f64(r)?);
    }
    let mut class_tokens = Vec::with_capacity(dims.class_count);
    for _ in 0..dims.class_count {
        let mut t = Vec::with_capacity(dims.token_dim);
        for _ in 0..dims.token_dim {
            t.push(read_f64(r)?);
        }
        class_tokens.push(t);
    }
    FrozenEncoders::from_parts(dims, temperature, image_proj, text_proj, class_tokens)
}

/// JSON mirror of the encoder weights; the binary form is authoritative.
#[derive(Debug, Serialize, Deserialize)]
pub struct EncodersJson {
    pub pixel_dim: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub prompt_len: usize,
    pub class_count: usize,
    pub temperature: f64,
    pub image_proj: Vec<f64>,
    pub text_proj: Vec<f64>,
    pub class_tokens: Vec<Vec<f64>>,
}

pub fn encoders_to_json(enc: &FrozenEncoders) -> Result<String> {
    let dims = enc.dims();
    let mirror = EncodersJson {
        pixel_dim: dims.pixel_dim,
        embed_dim: dims.embed_dim,
        token_dim: dims.token_dim,
        prompt_len: dims.prompt_len,
        class_count: dims.class_count,
        temperature: enc.temperature(),
        image_proj: enc.image_proj.data.clone(),
        text_proj: enc.text_proj.data.clone(),
        class_tokens: enc.class_tokens.clone(),
    };
    Ok(serde_json::to_string_pretty(&mirror)?)
}

pub fn encoders_from_json(text: &str) -> Result<FrozenEncoders> {
    let mirror: EncodersJson = serde_json::from_str(text)?;
    FrozenEncoders::from_parts(
        ModelDims {
            pixel_dim: mirror.pixel_dim,
            embed_dim: mirror.embed_dim,
            token_dim: mirror.token_dim,
            prompt_len: mirror.prompt_len,
            class_count: mirror.class_count,
        },
        mirror.temperature,
        mirror.image_proj,
        mirror.text_proj,
        mirror.class_tokens,
    )
}

pub fn prompt_to_json(prompt: &PromptVector) -> Result<String> {
    validate_prompt(prompt)?;
    Ok(serde_json::to_string_pretty(prompt)?)
}

pub fn prompt_from_json(text: &str) -> Result<PromptVector> {
    let prompt: PromptVector = serde_json::from_str(text)?;
    validate_prompt(&prompt)?;
    Ok(prompt)
}

pub fn trigger_to_json(trigger: &Trigger) -> Result<String> {
    validate_trigger(trigger)?;
    Ok(serde_json::to_string_pretty(trigger)?)
}

pub fn trigger_from_json(text: &str) -> Result<Trigger> {
    let trigger: Trigger = serde_json::from_str(text)?;
    validate_trigger(&trigger)?;
    Ok(trigger)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_prompt_golden_bytes() {
        let prompt = PromptVector {
            tokens: vec![vec![1.0, -0.5]],
        };
        let mut buf = Vec::new();
        write_prompt_bin(&prompt, &mut buf).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"FPPV");
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn test_trigger_golden_bytes() {
        let trigger = Trigger {
            noise: vec![0.25],
            linf_budget: 0.5,
        };
        let mut buf = Vec::new();
        write_trigger_bin(&trigger, &mut buf).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"FPTR");
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&0.5f64.to_le_bytes());
        want.extend_from_slice(&0.25f64.to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn test_prompt_binary_round_trip_bit_exact() {
        let prompt = PromptVector::gaussian(4, 32, 0.02, 99);
        let mut buf = Vec::new();
        write_prompt_bin(&prompt, &mut buf).unwrap();
        let back = read_prompt_bin(&mut buf.as_slice()).unwrap();
        assert_eq!(prompt, back);
        // bit identity, not just value equality
        for (a, b) in prompt.to_flat().iter().zip(back.to_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn test_trigger_binary_round_trip_bit_exact() {
        let trigger = Trigger {
            noise: (0..64).map(|i| ((i * 7 % 13) as f64 - 6.0) / 300.0).collect(),
            linf_budget: 0.02,
        };
        let mut buf = Vec::new();
        write_trigger_bin(&trigger, &mut buf).unwrap();
        let back = read_trigger_bin(&mut buf.as_slice()).unwrap();
        assert_eq!(trigger, back);
    }

    #[test]
    fn test_encoders_binary_round_trip() {
        let dims = ModelDims {
            pixel_dim: 9,
            embed_dim: 4,
            token_dim: 3,
            prompt_len: 2,
            class_count: 5,
        };
        let enc = FrozenEncoders::new(dims, 0.07, 1234).unwrap();
        let mut buf = Vec::new();
        write_encoders_bin(&enc, &mut buf).unwrap();
        let back = read_encoders_bin(&mut buf.as_slice()).unwrap();
        assert_eq!(enc, back);
    }

    #[test]
    fn test_json_round_trips() {
        let prompt = PromptVector::gaussian(3, 8, 0.02, 5);
        let back = prompt_from_json(&prompt_to_json(&prompt).unwrap()).unwrap();
        assert_eq!(prompt, back);

        let trigger = Trigger {
            noise: vec![0.01, -0.02, 0.0],
            linf_budget: 0.02,
        };
        let back = trigger_from_json(&trigger_to_json(&trigger).unwrap()).unwrap();
        assert_eq!(trigger, back);

        let enc = FrozenEncoders::new(
            ModelDims {
                pixel_dim: 4,
                embed_dim: 3,
                token_dim: 2,
                prompt_len: 1,
                class_count: 2,
            },
            0.5,
            8,
        )
        .unwrap();
        let back = encoders_from_json(&encoders_to_json(&enc).unwrap()).unwrap();
        assert_eq!(enc, back);
    }

    #[test]
    fn test_wrong_magic_rejected() {
        let prompt = PromptVector::zeros(1, 1);
        let mut buf = Vec::new();
        write_prompt_bin(&prompt, &mut buf).unwrap();
        assert!(matches!(
            read_trigger_bin(&mut buf.as_slice()),
            Err(Error::MalformedData { .. })
        ));
    }

    #[test]
    fn test_unsupported_version_rejected() {
        let trigger = Trigger {
            noise: vec![0.0],
            linf_budget: 0.1,
        };
        let mut buf = Vec::new();
        write_trigger_bin(&trigger, &mut buf).unwrap();
        buf[4] = 9; // bump version field
        assert!(matches!(
            read_trigger_bin(&mut buf.as_slice()),
            Err(Error::MalformedData { .. })
        ));
    }

    #[test]
    fn test_truncated_payload_rejected() {
        let prompt = PromptVector::gaussian(2, 4, 0.1, 3);
        let mut buf = Vec::new();
        write_prompt_bin(&prompt, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_prompt_bin(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn test_budget_violation_rejected() {
        let trigger = Trigger {
            noise: vec![0.5],
            linf_budget: 0.1,
        };
        let mut buf = Vec::new();
        assert!(write_trigger_bin(&trigger, &mut buf).is_err());
        assert!(trigger_to_json(&trigger).is_err());
    }
}
