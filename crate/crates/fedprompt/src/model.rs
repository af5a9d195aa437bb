//! Frozen dual encoder with prompt-conditioned class texts.
//!
//! Images embed through a fixed linear map plus L2 normalization; class
//! texts embed by mean-pooling the learnable prompt tokens with a fixed
//! class token, mapping through a second fixed linear map, and normalizing.
//! Both embeddings are exactly unit norm, so the similarity everywhere in
//! this crate is the plain dot product of the two unit vectors divided by
//! the temperature. Only the prompt (and, for attackers, the trigger) is
//! trainable; gradients are analytic and finite-difference checked.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, softmax_cross_entropy};
use crate::rng::{derive_seed, rng_from, stream};

/// Row-major dense matrix, sized for desk-scale linear algebra.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Matrix {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) data: Vec<f64>,
}

impl Matrix {
    fn gaussian<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            })
            .collect();
        Matrix { rows, cols, data }
    }

    pub(crate) fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *o = dot(row, x);
        }
        out
    }

    pub(crate) fn matvec_transpose(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, &m) in out.iter_mut().zip(row) {
                *o += yr * m;
            }
        }
        out
    }
}

/// Shape parameters of one experiment's encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Image pixel count D.
    pub pixel_dim: usize,
    /// Shared embedding dimension d.
    pub embed_dim: usize,
    /// Token dimension d_tok.
    pub token_dim: usize,
    /// Prompt length M.
    pub prompt_len: usize,
    /// Label class count K.
    pub class_count: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.pixel_dim == 0 || self.embed_dim == 0 || self.token_dim == 0 {
            return Err(Error::InvalidParameter(
                "model dims: pixel, embed and token dimensions must be positive".into(),
            ));
        }
        if self.class_count == 0 {
            return Err(Error::InvalidParameter(
                "model dims: need at least one class".into(),
            ));
        }
        Ok(())
    }
}

/// The learnable prompt: M tokens of dimension d_tok.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVector {
    pub tokens: Vec<Vec<f64>>,
}

impl PromptVector {
    pub fn zeros(prompt_len: usize, token_dim: usize) -> PromptVector {
        PromptVector {
            tokens: vec![vec![0.0; token_dim]; prompt_len],
        }
    }

    /// Tokens drawn i.i.d. N(0, scale²).
    pub fn gaussian(prompt_len: usize, token_dim: usize, scale: f64, seed: u64) -> PromptVector {
        let mut rng = rng_from(seed);
        let tokens = (0..prompt_len)
            .map(|_| {
                (0..token_dim)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z * scale
                    })
                    .collect()
            })
            .collect();
        PromptVector { tokens }
    }

    /// (prompt_len, token_dim); a zero-length prompt reports the dim as 0.
    pub fn shape(&self) -> (usize, usize) {
        let dim = self.tokens.first().map_or(0, Vec::len);
        (self.tokens.len(), dim)
    }

    pub fn check_same_shape(&self, other: &PromptVector) -> Result<()> {
        if self.shape() != other.shape() {
            let (m, d) = self.shape();
            let (om, od) = other.shape();
            return Err(Error::DimensionMismatch {
                expected: m * d,
                got: om * od,
            });
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tokens.iter().flatten().copied().collect()
    }

    pub fn from_flat(prompt_len: usize, token_dim: usize, flat: &[f64]) -> Result<PromptVector> {
        if flat.len() != prompt_len * token_dim {
            return Err(Error::DimensionMismatch {
                expected: prompt_len * token_dim,
                got: flat.len(),
            });
        }
        let tokens = flat.chunks(token_dim.max(1)).map(<[f64]>::to_vec).collect();
        Ok(PromptVector { tokens })
    }

    pub fn l2_norm(&self) -> f64 {
        self.tokens
            .iter()
            .map(|t| dot(t, t))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &PromptVector) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .tokens
            .iter()
            .zip(&other.tokens)
            .map(|(a, b)| dot(a, b))
            .sum())
    }

    /// self += factor · other.
    pub fn add_scaled(&mut self, other: &PromptVector, factor: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (mine, theirs) in self.tokens.iter_mut().zip(&other.tokens) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m += factor * t;
            }
        }
        Ok(())
    }

    pub fn sub(&self, other: &PromptVector) -> Result<PromptVector> {
        self.check_same_shape(other)?;
        let tokens = self
            .tokens
            .iter()
            .zip(&other.tokens)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        Ok(PromptVector { tokens })
    }

    pub fn scaled(&self, factor: f64) -> PromptVector {
        let tokens = self
            .tokens
            .iter()
            .map(|t| t.iter().map(|x| x * factor).collect())
            .collect();
        PromptVector { tokens }
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.iter().flatten().all(|x| x.is_finite())
    }
}

/// Loss value with its analytic gradients. `grad_trigger` is present only
/// for losses that see the trigger.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_prompt: PromptVector,
    pub grad_trigger: Option<Vec<f64>>,
}

/// Both encoders, frozen at construction. Fully determined by (dims, seed,
/// temperature); immutable afterwards, safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoders {
    pub(crate) image_proj: Matrix,
    pub(crate) text_proj: Matrix,
    pub(crate) class_tokens: Vec<Vec<f64>>,
    temperature: f64,
    dims: ModelDims,
}

impl FrozenEncoders {
    /// Draw the frozen weights: image map entries N(0, 1/D), text map
    /// entries N(0, 1/d_tok), class tokens standard normal.
    pub fn new(dims: ModelDims, temperature: f64, seed: u64) -> Result<FrozenEncoders> {
        dims.validate()?;
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let mut rng = rng_from(derive_seed(seed, &[stream::MODEL]));
        let image_proj = Matrix::gaussian(
            dims.embed_dim,
            dims.pixel_dim,
            1.0 / (dims.pixel_dim as f64).sqrt(),
            &mut rng,
        );
        let text_proj = Matrix::gaussian(
            dims.embed_dim,
            dims.token_dim,
            1.0 / (dims.token_dim as f64).sqrt(),
            &mut rng,
        );
        let class_tokens = (0..dims.class_count)
            .map(|_| {
                (0..dims.token_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Ok(FrozenEncoders {
            image_proj,
            text_proj,
            class_tokens,
            temperature,
            dims,
        })
    }

    /// Rebuild encoders from explicit weights (deserialization, hand-built
    /// test fixtures). Matrices are row-major.
    pub fn from_parts(
        dims: ModelDims,
        temperature: f64,
        image_proj: Vec<f64>,
        text_proj: Vec<f64>,
        class_tokens: Vec<Vec<f64>>,
    ) -> Result<FrozenEncoders> {
        dims.validate()?;
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        if image_proj.len() != dims.embed_dim * dims.pixel_dim {
            return Err(Error::DimensionMismatch {
                expected: dims.embed_dim * dims.pixel_dim,
                got: image_proj.len(),
            });
        }
        if text_proj.len() != dims.embed_dim * dims.token_dim {
            return Err(Error::DimensionMismatch {
                expected: dims.embed_dim * dims.token_dim,
                got: text_proj.len(),
            });
        }
        if class_tokens.len() != dims.class_count
            || class_tokens.iter().any(|t| t.len() != dims.token_dim)
        {
            return Err(Error::MalformedData {
                what: "class tokens",
                detail: format!(
                    "need {} tokens of dim {}",
                    dims.class_count, dims.token_dim
                ),
            });
        }
        let finite = image_proj.iter().all(|x| x.is_finite())
            && text_proj.iter().all(|x| x.is_finite())
            && class_tokens.iter().flatten().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("encoder weights"));
        }
        Ok(FrozenEncoders {
            image_proj: Matrix {
                rows: dims.embed_dim,
                cols: dims.pixel_dim,
                data: image_proj,
            },
            text_proj: Matrix {
                rows: dims.embed_dim,
                cols: dims.token_dim,
                data: text_proj,
            },
            class_tokens,
            temperature,
            dims,
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    fn check_pixels(&self, pixels: &[f64]) -> Result<()> {
        if pixels.len() != self.dims.pixel_dim {
            return Err(Error::DimensionMismatch {
                expected: self.dims.pixel_dim,
                got: pixels.len(),
            });
        }
        Ok(())
    }

    fn check_prompt(&self, prompt: &PromptVector) -> Result<()> {
        if prompt.tokens.iter().any(|t| t.len() != self.dims.token_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dims.token_dim,
                got: prompt.tokens.iter().map(Vec::len).find(|&l| l != self.dims.token_dim).unwrap_or(0),
            });
        }
        Ok(())
    }

    /// Unit-norm image embedding.
    pub fn encode_image(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        self.check_pixels(pixels)?;
        let z = self.image_proj.matvec(pixels);
        normalize_or_degenerate(z, "image embedding before normalization")
    }

    /// Mean-pooled token vector for a class: (Σ prompt tokens + class token)
    /// divided by M+1.
    fn pooled_token(&self, prompt: &PromptVector, label: usize) -> Vec<f64> {
        let m = prompt.tokens.len();
        let mut pooled = self.class_tokens[label].clone();
        for t in &prompt.tokens {
            for (p, v) in pooled.iter_mut().zip(t) {
                *p += v;
            }
        }
        let inv = 1.0 / (m as f64 + 1.0);
        for p in &mut pooled {
            *p *= inv;
        }
        pooled
    }

    /// Unit-norm class-text embedding under the given prompt.
    pub fn encode_class(&self, prompt: &PromptVector, label: usize) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        if label >= self.dims.class_count {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.dims.class_count,
            });
        }
        let u = self.text_proj.matvec(&self.pooled_token(prompt, label));
        normalize_or_degenerate(u, "class embedding before normalization")
    }

    /// Per-class similarity logits: cos(image, class) / temperature.
    pub fn class_logits(&self, prompt: &PromptVector, pixels: &[f64]) -> Result<Vec<f64>> {
        let e = self.encode_image(pixels)?;
        let mut logits = Vec::with_capacity(self.dims.class_count);
        for k in 0..self.dims.class_count {
            let g = self.encode_class(prompt, k)?;
            logits.push(cos_of_units(&e, &g) / self.temperature);
        }
        Ok(logits)
    }

    /// Argmax label; ties resolve to the lowest index.
    pub fn predict(&self, prompt: &PromptVector, pixels: &[f64]) -> Result<usize> {
        let logits = self.class_logits(prompt, pixels)?;
        let mut best = 0usize;
        for (k, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = k;
            }
        }
        Ok(best)
    }

    /// Mean softmax cross-entropy over the batch with its analytic prompt
    /// gradient. Every prompt token receives the same gradient vector
    /// because each contributes identically through the mean pool.
    pub fn clean_loss_grad(&self, prompt: &PromptVector, batch: &[Image]) -> Result<LossGrad> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_prompt(prompt)?;
        let k_count = self.dims.class_count;
        let m = prompt.tokens.len();
        let pool_inv = 1.0 / (m as f64 + 1.0);

        // Class-side quantities are batch-independent.
        let mut class_units = Vec::with_capacity(k_count);
        let mut class_norms = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let u = self.text_proj.matvec(&self.pooled_token(prompt, k));
            let n = l2_norm(&u);
            if n == 0.0 {
                return Err(Error::ZeroNorm("class embedding before normalization"));
            }
            class_units.push(u.into_iter().map(|x| x / n).collect::<Vec<f64>>());
            class_norms.push(n);
        }

        let mut loss_sum = 0.0;
        // coefficient_sums[k] = Σ_samples (softmax_k − onehot_k) · image_embedding
        let mut coefficient_sums = vec![vec![0.0; self.dims.embed_dim]; k_count];
        for im in batch {
            let e = self.encode_image(&im.pixels)?;
            let logits: Vec<f64> = class_units
                .iter()
                .map(|g| cos_of_units(&e, g) / self.temperature)
                .collect();
            let (loss, coeff) = softmax_cross_entropy(&logits, im.label)?;
            loss_sum += loss;
            for (acc, c) in coefficient_sums.iter_mut().zip(&coeff) {
                for (a, &ei) in acc.iter_mut().zip(&e) {
                    *a += c * ei;
                }
            }
        }

        // Push each class's accumulated coefficient through the
        // normalization Jacobian at u_k, then through the text map.
        let mut embed_grad = vec![0.0; self.dims.embed_dim];
        for k in 0..k_count {
            let acc = &coefficient_sums[k];
            let g = &class_units[k];
            let radial = dot(g, acc);
            let scale = 1.0 / (self.temperature * class_norms[k]);
            for ((eg, &a), &gk) in embed_grad.iter_mut().zip(acc).zip(g) {
                *eg += (a - radial * gk) * scale;
            }
        }
        let n_inv = 1.0 / batch.len() as f64;
        let token_grad: Vec<f64> = self
            .text_proj
            .matvec_transpose(&embed_grad)
            .into_iter()
            .map(|x| x * pool_inv * n_inv)
            .collect();
        let grad_prompt = PromptVector {
            tokens: vec![token_grad; m],
        };
        Ok(LossGrad {
            loss: loss_sum * n_inv,
            grad_prompt,
            grad_trigger: None,
        })
    }

    /// Negative cosine between the triggered image and the target class
    /// text, with gradients for both the prompt and the trigger. The
    /// trigger gradient is zero at pixels the clip saturates; the
    /// straight-through variant passes those coordinates unchanged.
    pub fn backdoor_loss_grad_with(
        &self,
        prompt: &PromptVector,
        trigger: &[f64],
        pixels: &[f64],
        target: usize,
        straight_through: bool,
    ) -> Result<LossGrad> {
        self.check_pixels(pixels)?;
        self.check_prompt(prompt)?;
        if trigger.len() != self.dims.pixel_dim {
            return Err(Error::DimensionMismatch {
                expected: self.dims.pixel_dim,
                got: trigger.len(),
            });
        }
        if target >= self.dims.class_count {
            return Err(Error::LabelOutOfRange {
                label: target,
                classes: self.dims.class_count,
            });
        }
        let m = prompt.tokens.len();
        let pool_inv = 1.0 / (m as f64 + 1.0);

        let mut poisoned = Vec::with_capacity(pixels.len());
        let mut interior = Vec::with_capacity(pixels.len());
        for (&x, &t) in pixels.iter().zip(trigger) {
            let raw = x + t;
            interior.push(raw > 0.0 && raw < 1.0);
            poisoned.push(raw.clamp(0.0, 1.0));
        }

        let z = self.image_proj.matvec(&poisoned);
        let nz = l2_norm(&z);
        if nz == 0.0 {
            return Err(Error::ZeroNorm("image embedding before normalization"));
        }
        let e: Vec<f64> = z.iter().map(|x| x / nz).collect();

        let u = self.text_proj.matvec(&self.pooled_token(prompt, target));
        let nu = l2_norm(&u);
        if nu == 0.0 {
            return Err(Error::ZeroNorm("class embedding before normalization"));
        }
        let g: Vec<f64> = u.iter().map(|x| x / nu).collect();

        let cos = cos_of_units(&e, &g);
        let loss = -cos;

        // Image side: d loss / d z = (−g + (e·g)·e) / ‖z‖, then back
        // through the image map and the clip mask.
        let eg = dot(&e, &g);
        let z_grad: Vec<f64> = e
            .iter()
            .zip(&g)
            .map(|(&ei, &gi)| (-gi + eg * ei) / nz)
            .collect();
        let pixel_grad = self.image_proj.matvec_transpose(&z_grad);
        let grad_trigger: Vec<f64> = pixel_grad
            .into_iter()
            .zip(&interior)
            .map(|(v, &inside)| if inside || straight_through { v } else { 0.0 })
            .collect();

        // Text side: d loss / d u = (−e + (e·g)·g) / ‖u‖.
        let u_grad: Vec<f64> = g
            .iter()
            .zip(&e)
            .map(|(&gi, &ei)| (-ei + eg * gi) / nu)
            .collect();
        let token_grad: Vec<f64> = self
            .text_proj
            .matvec_transpose(&u_grad)
            .into_iter()
            .map(|x| x * pool_inv)
            .collect();
        Ok(LossGrad {
            loss,
            grad_prompt: PromptVector {
                tokens: vec![token_grad; m],
            },
            grad_trigger: Some(grad_trigger),
        })
    }

    /// [`Self::backdoor_loss_grad_with`] under the default zero-at-saturation
    /// clip subgradient.
    pub fn backdoor_loss_grad(
        &self,
        prompt: &PromptVector,
        trigger: &[f64],
        pixels: &[f64],
        target: usize,
    ) -> Result<LossGrad> {
        self.backdoor_loss_grad_with(prompt, trigger, pixels, target, false)
    }
}

/// Dot of two unit vectors, clamped so rounding never leaks |cos| > 1.
fn cos_of_units(e: &[f64], g: &[f64]) -> f64 {
    dot(e, g).clamp(-1.0, 1.0)
}

fn normalize_or_degenerate(v: Vec<f64>, context: &'static str) -> Result<Vec<f64>> {
    let n = l2_norm(&v);
    if n == 0.0 {
        return Err(Error::ZeroNorm(context));
    }
    if !n.is_finite() {
        return Err(Error::NonFinite(context));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}
