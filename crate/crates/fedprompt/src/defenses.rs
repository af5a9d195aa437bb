//! Server-side aggregation rules and the entropy-based runtime input
//! detector. Every rule consumes client prompts (or updates) and produces
//! an aggregate plus bookkeeping the federation loop records; all are pure
//! given their inputs and any explicit RNG.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::{FrozenEncoders, PromptVector};
use crate::numerics::{dot, entropy, l2_norm, softmax};
use crate::rng::rng_from;

fn check_uniform_shapes(prompts: &[PromptVector], rule: &'static str) -> Result<()> {
    if prompts.is_empty() {
        return Err(Error::InfeasibleAggregation {
            rule,
            reason: "no client prompts".into(),
        });
    }
    for p in &prompts[1..] {
        prompts[0].check_same_shape(p)?;
    }
    Ok(())
}

/// Weighted elementwise average. Weights must be nonnegative and sum to 1
/// within 1e-9.
pub fn fedavg(prompts: &[PromptVector], weights: &[f64]) -> Result<PromptVector> {
    check_uniform_shapes(prompts, "fedavg")?;
    if weights.len() != prompts.len() {
        return Err(Error::DimensionMismatch {
            expected: prompts.len(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::InfeasibleAggregation {
            rule: "fedavg",
            reason: "negative or non-finite weight".into(),
        });
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InfeasibleAggregation {
            rule: "fedavg",
            reason: format!("weights sum to {total}, expected 1"),
        });
    }
    let (m, d) = prompts[0].shape();
    let mut out = PromptVector::zeros(m, d);
    for (p, &w) in prompts.iter().zip(weights) {
        out.add_scaled(p, w)?;
    }
    Ok(out)
}

/// Per-client scores: sum of squared distances to the N−f−2 nearest peers.
pub fn multi_krum_scores(prompts: &[PromptVector], f: usize) -> Result<Vec<f64>> {
    let n = prompts.len();
    if n < f + 3 {
        return Err(Error::InfeasibleAggregation {
            rule: "multi-krum",
            reason: format!("N - f - 2 >= 1 violated (N={n}, f={f})"),
        });
    }
    check_uniform_shapes(prompts, "multi-krum")?;
    let flats: Vec<Vec<f64>> = prompts.iter().map(PromptVector::to_flat).collect();
    let neighbors = n - f - 2;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                flats[i]
                    .iter()
                    .zip(&flats[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        dists.sort_unstable_by(|a: &f64, b: &f64| a.partial_cmp(b).unwrap());
        scores.push(dists[..neighbors].iter().sum());
    }
    Ok(scores)
}

/// Select the m_sel lowest-scoring prompts (ties to the lower id) and
/// average them uniformly. Returns the aggregate and the selected ids in
/// ascending order.
pub fn multi_krum(
    prompts: &[PromptVector],
    f: usize,
    m_sel: usize,
) -> Result<(PromptVector, Vec<usize>)> {
    let scores = multi_krum_scores(prompts, f)?;
    let n = prompts.len();
    if m_sel == 0 || m_sel > n - f {
        return Err(Error::InfeasibleAggregation {
            rule: "multi-krum",
            reason: format!("m_sel must lie in [1, N - f] = [1, {}], got {m_sel}", n - f),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order[..m_sel].to_vec();
    selected.sort_unstable();
    let chosen: Vec<PromptVector> = selected.iter().map(|&i| prompts[i].clone()).collect();
    let uniform = vec![1.0 / m_sel as f64; m_sel];
    Ok((fedavg(&chosen, &uniform)?, selected))
}

/// History-similarity weights before renormalization, clipped to [0,1].
///
/// Pairwise cosines over cumulative history sums, the pardoning step
/// (similarities toward a historically stronger client are scaled down by
/// the ratio of their maxima), then 1 − max similarity, rescale by the
/// maximum, and a logit squash with the given confidence. Pairs involving a
/// zero-norm history contribute similarity 0.
pub fn foolsgold_raw_weights(history_sums: &[PromptVector], confidence: f64) -> Result<Vec<f64>> {
    check_uniform_shapes(history_sums, "foolsgold")?;
    if !(confidence > 0.0) || !confidence.is_finite() {
        return Err(Error::InfeasibleAggregation {
            rule: "foolsgold",
            reason: format!("confidence must be positive, got {confidence}"),
        });
    }
    let n = history_sums.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let flats: Vec<Vec<f64>> = history_sums.iter().map(PromptVector::to_flat).collect();
    let norms: Vec<f64> = flats.iter().map(|f| l2_norm(f)).collect();
    let mut cs = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let value = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                (dot(&flats[i], &flats[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            cs[i][j] = value;
            cs[j][i] = value;
        }
    }
    let maxima: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| cs[i][j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && maxima[j] > maxima[i] {
                cs[i][j] *= maxima[i] / maxima[j];
            }
        }
    }
    let mut weights: Vec<f64> = (0..n)
        .map(|i| {
            let m = (0..n)
                .filter(|&j| j != i)
                .map(|j| cs[i][j])
                .fold(f64::NEG_INFINITY, f64::max);
            (1.0 - m).clamp(0.0, 1.0)
        })
        .collect();
    let top = weights.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(weights);
    }
    for w in &mut weights {
        *w /= top;
        *w = (confidence * ((*w / (1.0 - *w)).ln() + 0.5)).clamp(0.0, 1.0);
    }
    Ok(weights)
}

/// Weighted update aggregation with sybil down-weighting.
///
/// Returns the weighted update delta (to add to the previous global prompt)
/// and the renormalized weights. All-zero histories, as on the first round,
/// fall back to uniform weights; so does a degenerate round where the raw
/// weights all squash to zero.
pub fn foolsgold(
    history_sums: &[PromptVector],
    current_updates: &[PromptVector],
    confidence: f64,
) -> Result<(PromptVector, Vec<f64>)> {
    if history_sums.len() != current_updates.len() {
        return Err(Error::DimensionMismatch {
            expected: history_sums.len(),
            got: current_updates.len(),
        });
    }
    check_uniform_shapes(current_updates, "foolsgold")?;
    let n = history_sums.len();
    let uniform = vec![1.0 / n as f64; n];
    let all_zero = history_sums.iter().all(|h| h.l2_norm() == 0.0);
    let mut weights = if all_zero {
        uniform.clone()
    } else {
        foolsgold_raw_weights(history_sums, confidence)?
    };
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        weights = uniform;
    } else {
        for w in &mut weights {
            *w /= total;
        }
    }
    let (m, d) = current_updates[0].shape();
    let mut delta = PromptVector::zeros(m, d);
    for (u, &w) in current_updates.iter().zip(&weights) {
        delta.add_scaled(u, w)?;
    }
    Ok((delta, weights))
}

fn median_of(mut values: Vec<f64>) -> f64 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Anomaly-score aggregation: z-score of update norm plus z-score of cosine
/// deviation from the coordinate-wise median update; the ⌈qN⌉ highest
/// scores are excluded (ties to the lower id) and the rest averaged
/// uniformly. Returns the aggregate and the excluded ids in ascending
/// order. A round where every score ties excludes nobody.
pub fn multi_metric(
    prompts: &[PromptVector],
    previous_global: &PromptVector,
    q: f64,
) -> Result<(PromptVector, Vec<usize>)> {
    check_uniform_shapes(prompts, "multi-metric")?;
    if !(0.0..1.0).contains(&q) {
        return Err(Error::InfeasibleAggregation {
            rule: "multi-metric",
            reason: format!("exclude fraction must lie in [0,1), got {q}"),
        });
    }
    let n = prompts.len();
    let updates: Vec<Vec<f64>> = prompts
        .iter()
        .map(|p| Ok(p.sub(previous_global)?.to_flat()))
        .collect::<Result<_>>()?;
    let dim = updates[0].len();
    let median: Vec<f64> = (0..dim)
        .map(|c| median_of(updates.iter().map(|u| u[c]).collect()))
        .collect();
    let median_norm = l2_norm(&median);

    let norms: Vec<f64> = updates.iter().map(|u| l2_norm(u)).collect();
    let deviations: Vec<f64> = updates
        .iter()
        .zip(&norms)
        .map(|(u, &nu)| {
            if nu == 0.0 && median_norm == 0.0 {
                0.0
            } else if nu == 0.0 || median_norm == 0.0 {
                1.0
            } else {
                1.0 - (dot(u, &median) / (nu * median_norm)).clamp(-1.0, 1.0)
            }
        })
        .collect();

    let zscores = |xs: &[f64]| -> Vec<f64> {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        let std = var.sqrt();
        if std == 0.0 {
            vec![0.0; xs.len()]
        } else {
            xs.iter().map(|x| (x - mean) / std).collect()
        }
    };
    let zn = zscores(&norms);
    let zd = zscores(&deviations);
    let scores: Vec<f64> = zn.iter().zip(&zd).map(|(a, b)| a + b).collect();

    if (q * n as f64).ceil() as usize == n {
        return Err(Error::InfeasibleAggregation {
            rule: "multi-metric",
            reason: "all clients excluded".into(),
        });
    }
    let all_equal = scores.iter().all(|&s| s == scores[0]);
    let exclude_count = if all_equal {
        0
    } else {
        (q * n as f64).ceil() as usize
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut excluded: Vec<usize> = order[..exclude_count].to_vec();
    excluded.sort_unstable();
    let included: Vec<PromptVector> = (0..n)
        .filter(|i| !excluded.contains(i))
        .map(|i| prompts[i].clone())
        .collect();
    let uniform = vec![1.0 / included.len() as f64; included.len()];
    Ok((fedavg(&included, &uniform)?, excluded))
}

/// Per-client sanitization: clip the update to ℓ2 norm ≤ clip_c, then add
/// i.i.d. Gaussian noise of standard deviation noise_z·clip_c per
/// coordinate.
pub fn dp_sanitize<R: Rng>(
    update: &PromptVector,
    clip_c: f64,
    noise_z: f64,
    rng: &mut R,
) -> Result<PromptVector> {
    if !(clip_c > 0.0) || !clip_c.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "dp clip norm must be positive, got {clip_c}"
        )));
    }
    if !(noise_z >= 0.0) || !noise_z.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "dp noise multiplier must be nonnegative, got {noise_z}"
        )));
    }
    let norm = update.l2_norm();
    let scale = if norm > clip_c { clip_c / norm } else { 1.0 };
    let mut out = update.scaled(scale);
    if noise_z > 0.0 {
        let std = noise_z * clip_c;
        for token in &mut out.tokens {
            for v in token.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += std * z;
            }
        }
    }
    Ok(out)
}

/// Outcome of screening one input by prediction entropy under random
/// overlays.
#[derive(Debug, Clone, PartialEq)]
pub struct StripReport {
    /// Entropy of the mean prediction distribution, normalized to [0,1].
    pub entropy: f64,
    pub n_strip: usize,
    pub threshold: f64,
    /// Set when the entropy falls below the threshold.
    pub flag: bool,
}

/// Blend the input half-and-half with seeded draws from the overlay pool
/// and measure the normalized entropy of the mean softmax prediction.
/// Backdoored inputs keep predicting the target under blending, which
/// drives this entropy down.
pub fn strip_entropy(
    enc: &FrozenEncoders,
    prompt: &PromptVector,
    pixels: &[f64],
    overlay_pool: &[Image],
    n_strip: usize,
    seed: u64,
    threshold: f64,
) -> Result<StripReport> {
    if overlay_pool.is_empty() {
        return Err(Error::InvalidParameter(
            "strip_entropy: empty overlay pool".into(),
        ));
    }
    if n_strip == 0 {
        return Err(Error::InvalidParameter(
            "strip_entropy: need at least one overlay".into(),
        ));
    }
    let k = enc.dims().class_count;
    if k < 2 {
        return Err(Error::InvalidParameter(
            "strip_entropy: entropy normalization needs at least two classes".into(),
        ));
    }
    let mut rng = rng_from(seed);
    let mut mean_dist = vec![0.0; k];
    for _ in 0..n_strip {
        let overlay = &overlay_pool[rng.random_range(0..overlay_pool.len())];
        if overlay.pixels.len() != pixels.len() {
            return Err(Error::DimensionMismatch {
                expected: pixels.len(),
                got: overlay.pixels.len(),
            });
        }
        let blend: Vec<f64> = pixels
            .iter()
            .zip(&overlay.pixels)
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        let dist = softmax(&enc.class_logits(prompt, &blend)?);
        for (m, p) in mean_dist.iter_mut().zip(&dist) {
            *m += p;
        }
    }
    let inv = 1.0 / n_strip as f64;
    for m in &mut mean_dist {
        *m *= inv;
    }
    let normalized = (entropy(&mean_dist) / (k as f64).ln()).clamp(0.0, 1.0);
    Ok(StripReport {
        entropy: normalized,
        n_strip,
        threshold,
        flag: normalized < threshold,
    })
}

/// Detection threshold at a 1% false-rejection rate: the nearest-rank first
/// percentile of clean-input entropies.
pub fn strip_calibrate_threshold(clean_entropies: &[f64]) -> Result<f64> {
    if clean_entropies.is_empty() {
        return Err(Error::InvalidParameter(
            "strip threshold calibration needs clean entropies".into(),
        ));
    }
    let mut sorted = clean_entropies.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.01 * sorted.len() as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}
