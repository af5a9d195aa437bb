//! Synthetic grayscale classification data and everything that slices it:
//! prototype-based generation, few-shot subsampling, IID and Dirichlet
//! client partitions, additive trigger application, test-set poisoning,
//! and seeded mini-batch scheduling.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, stream};

/// One grayscale image with its ground-truth label. Pixels live in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Vec<f64>,
    pub label: usize,
}

/// Which side of the train/test split a collection came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A labeled image collection. Every label is below `class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|im| im.label).collect()
    }

    /// Clone out the images at `indices`, preserving split and class count.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut images = Vec::with_capacity(indices.len());
        for &i in indices {
            let im = self.images.get(i).ok_or(Error::MalformedData {
                what: "subset index",
                detail: format!("index {i} out of range for {} images", self.images.len()),
            })?;
            images.push(im.clone());
        }
        Ok(Dataset {
            images,
            class_count: self.class_count,
            split: self.split,
        })
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for im in &self.images {
            counts[im.label] += 1;
        }
        counts
    }
}

/// Additive full-image perturbation with an ℓ∞ budget.
///
/// The `noise` field must satisfy ‖noise‖∞ ≤ `linf_budget` at all times;
/// every optimizer step re-establishes it through [`Trigger::project`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub noise: Vec<f64>,
    pub linf_budget: f64,
}

impl Trigger {
    pub fn zeros(dim: usize, linf_budget: f64) -> Result<Self> {
        if !(linf_budget >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "trigger budget must be nonnegative, got {linf_budget}"
            )));
        }
        Ok(Trigger {
            noise: vec![0.0; dim],
            linf_budget,
        })
    }

    pub fn dim(&self) -> usize {
        self.noise.len()
    }

    /// Clamp every coordinate back into [−budget, budget]. Exact projection
    /// onto the ℓ∞ ball.
    pub fn project(&mut self) {
        let b = self.linf_budget;
        for v in &mut self.noise {
            *v = v.clamp(-b, b);
        }
    }

    pub fn within_budget(&self) -> bool {
        self.noise.iter().all(|v| v.abs() <= self.linf_budget)
    }
}

/// Draw the train/test pair: class prototypes uniform in [0.2,0.8]^D, each
/// sample the prototype plus N(0, noise_sigma²) pixel noise clipped to [0,1].
///
/// The test images come from an RNG stream independent of the train stream,
/// so the test set does not move when per-class train counts change.
pub fn generate_dataset(
    class_count: usize,
    per_class_train: usize,
    per_class_test: usize,
    dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if class_count == 0 || per_class_train == 0 || per_class_test == 0 || dim == 0 {
        return Err(Error::InvalidParameter(
            "generate_dataset: class count, per-class counts and dim must be positive".into(),
        ));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "generate_dataset: noise_sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    let mut proto_rng = rng_from(derive_seed(seed, &[stream::DATA, 0]));
    let mut prototypes = Vec::with_capacity(class_count);
    for _ in 0..class_count {
        let p: Vec<f64> = (0..dim).map(|_| proto_rng.random_range(0.2..0.8)).collect();
        prototypes.push(p);
    }

    let draw_split = |split: Split, per_class: usize, tag: u64| -> Dataset {
        let mut rng = rng_from(derive_seed(seed, &[stream::DATA, tag]));
        let mut images = Vec::with_capacity(class_count * per_class);
        for (label, proto) in prototypes.iter().enumerate() {
            for _ in 0..per_class {
                let pixels: Vec<f64> = proto
                    .iter()
                    .map(|&mu| {
                        let z: f64 = rng.sample(StandardNormal);
                        (mu + noise_sigma * z).clamp(0.0, 1.0)
                    })
                    .collect();
                images.push(Image { pixels, label });
            }
        }
        Dataset {
            images,
            class_count,
            split,
        }
    };

    let train = draw_split(Split::Train, per_class_train, 1);
    let test = draw_split(Split::Test, per_class_test, 2);
    Ok((train, test))
}

/// Indices of `k` samples per class drawn without replacement, grouped by
/// ascending class.
fn kshot_indices(train: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.class_count];
    for (i, im) in train.images.iter().enumerate() {
        by_class[im.label].push(i);
    }
    let mut rng = rng_from(derive_seed(seed, &[stream::POOL]));
    let mut picked = Vec::with_capacity(k * train.class_count);
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::InsufficientClassSamples {
                class,
                have: members.len(),
                need: k,
            });
        }
        for choice in rand::seq::index::sample(&mut rng, members.len(), k) {
            picked.push(members[choice]);
        }
    }
    Ok(picked)
}

/// Few-shot subsample: exactly `k` samples per class, without replacement.
pub fn kshot_sample(train: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let picked = kshot_indices(train, k, seed)?;
    train.subset(&picked)
}

/// Client index assignment, plus the knobs that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    /// assignment[c] lists this client's sample indices into the partitioned set.
    pub assignment: Vec<Vec<usize>>,
    /// Dirichlet concentration when that mechanism produced the plan.
    pub alpha: Option<f64>,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    /// Check the set-partition contract: indices in range, pairwise disjoint,
    /// and (when `require_cover`) jointly covering 0..n_items.
    pub fn validate(&self, n_items: usize, require_cover: bool) -> Result<()> {
        let mut seen = vec![false; n_items];
        let mut total = 0usize;
        for (client, idxs) in self.assignment.iter().enumerate() {
            for &i in idxs {
                if i >= n_items {
                    return Err(Error::PartitionFailed(format!(
                        "client {client} holds index {i}, dataset has {n_items}"
                    )));
                }
                if seen[i] {
                    return Err(Error::PartitionFailed(format!(
                        "index {i} assigned to more than one client"
                    )));
                }
                seen[i] = true;
                total += 1;
            }
        }
        if require_cover && total != n_items {
            return Err(Error::PartitionFailed(format!(
                "{total} of {n_items} indices assigned"
            )));
        }
        Ok(())
    }
}

/// Random equal-size split of 0..n_items across clients. When the count does
/// not divide evenly the first `n_items % n_clients` clients take one extra.
pub fn iid_partition(n_items: usize, n_clients: usize, seed: u64) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::InvalidParameter("iid_partition: zero clients".into()));
    }
    if n_items < n_clients {
        return Err(Error::PartitionFailed(format!(
            "{n_items} samples cannot cover {n_clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut rng = rng_from(derive_seed(seed, &[stream::PARTITION]));
    order.shuffle(&mut rng);
    let base = n_items / n_clients;
    let extra = n_items % n_clients;
    let mut assignment = Vec::with_capacity(n_clients);
    let mut cursor = 0usize;
    for c in 0..n_clients {
        let take = base + usize::from(c < extra);
        assignment.push(order[cursor..cursor + take].to_vec());
        cursor += take;
    }
    Ok(PartitionPlan {
        assignment,
        alpha: None,
        seed,
    })
}

/// Few-shot IID setup: draw a pool of k·n_clients samples per class, then
/// deal each client exactly k of every class. Returns the pool dataset and a
/// plan whose indices refer to that pool.
pub fn kshot_partition(
    train: &Dataset,
    k: usize,
    n_clients: usize,
    seed: u64,
) -> Result<(Dataset, PartitionPlan)> {
    if n_clients == 0 {
        return Err(Error::InvalidParameter("kshot_partition: zero clients".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("kshot_partition: zero shots".into()));
    }
    let per_class = k * n_clients;
    let picked = kshot_indices(train, per_class, seed)?;
    let pool = train.subset(&picked)?;
    // Pool layout is class-major: class c occupies [c*per_class, (c+1)*per_class).
    // Selection order within a class is already random, so contiguous deals
    // are a uniform draw.
    let mut assignment = vec![Vec::with_capacity(k * train.class_count); n_clients];
    for class in 0..train.class_count {
        for (c, shard) in assignment.iter_mut().enumerate() {
            let start = class * per_class + c * k;
            shard.extend(start..start + k);
        }
    }
    Ok((
        pool,
        PartitionPlan {
            assignment,
            alpha: None,
            seed,
        },
    ))
}

/// Label-skewed partition: for each class, a Dirichlet(alpha,…,alpha) draw
/// over clients apportions that class's indices multinomially. Draws that
/// leave any client empty are resampled with a derived seed, up to 64
/// attempts.
pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::InvalidParameter(
            "dirichlet_partition: zero clients".into(),
        ));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "dirichlet_partition: alpha must be positive and finite, got {alpha}"
        )));
    }
    if labels.len() < n_clients {
        return Err(Error::PartitionFailed(format!(
            "{} samples cannot cover {n_clients} clients",
            labels.len()
        )));
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    const MAX_ATTEMPTS: u64 = 64;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng_from(derive_seed(seed, &[stream::PARTITION, attempt]));
        let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        let mut degenerate = false;
        'classes: for class in 0..class_count {
            // Dirichlet via normalized Gamma(alpha, 1) draws.
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| {
                Error::InvalidParameter(format!("dirichlet_partition: gamma draw: {e}"))
            })?;
            let shares: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = shares.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                degenerate = true;
                break 'classes;
            }
            let mut cumulative = Vec::with_capacity(n_clients);
            let mut acc = 0.0;
            for s in &shares {
                acc += s / total;
                cumulative.push(acc);
            }
            cumulative[n_clients - 1] = 1.0;
            for (i, &l) in labels.iter().enumerate() {
                if l != class {
                    continue;
                }
                let u: f64 = rng.random_range(0.0..1.0);
                let client = cumulative.iter().position(|&c| u < c).unwrap_or(n_clients - 1);
                assignment[client].push(i);
            }
        }
        if degenerate || assignment.iter().any(Vec::is_empty) {
            continue;
        }
        return Ok(PartitionPlan {
            assignment,
            alpha: Some(alpha),
            seed,
        });
    }
    Err(Error::PartitionFailed(format!(
        "no draw left every client nonempty after {MAX_ATTEMPTS} attempts \
         (alpha={alpha}, clients={n_clients})"
    )))
}

/// Superimpose the trigger and clip back into [0,1] per pixel.
pub fn apply_trigger(pixels: &[f64], trigger: &Trigger) -> Result<Vec<f64>> {
    if pixels.len() != trigger.noise.len() {
        return Err(Error::DimensionMismatch {
            expected: pixels.len(),
            got: trigger.noise.len(),
        });
    }
    Ok(pixels
        .iter()
        .zip(&trigger.noise)
        .map(|(x, t)| (x + t).clamp(0.0, 1.0))
        .collect())
}

/// Triggered copy of the test set for attack-success measurement: samples
/// already carrying the target label are dropped, the rest are triggered and
/// relabeled to the target.
pub fn poison_testset(test: &Dataset, trigger: &Trigger, target: usize) -> Result<Dataset> {
    poison_testset_impl(test, trigger, target, false)
}

/// Variant that keeps target-class samples in the poisoned set, for the
/// inclusive success-rate convention.
pub fn poison_testset_keeping_target(
    test: &Dataset,
    trigger: &Trigger,
    target: usize,
) -> Result<Dataset> {
    poison_testset_impl(test, trigger, target, true)
}

fn poison_testset_impl(
    test: &Dataset,
    trigger: &Trigger,
    target: usize,
    keep_target: bool,
) -> Result<Dataset> {
    if target >= test.class_count {
        return Err(Error::LabelOutOfRange {
            label: target,
            classes: test.class_count,
        });
    }
    let mut images = Vec::new();
    for im in &test.images {
        if !keep_target && im.label == target {
            continue;
        }
        images.push(Image {
            pixels: apply_trigger(&im.pixels, trigger)?,
            label: target,
        });
    }
    if images.is_empty() {
        return Err(Error::EmptyPoisonSet);
    }
    Ok(Dataset {
        images,
        class_count: test.class_count,
        split: Split::Test,
    })
}

/// Export a partition as `index,label,client` rows in ascending index order.
pub fn write_partition_csv<W: Write>(
    plan: &PartitionPlan,
    labels: &[usize],
    writer: W,
) -> Result<()> {
    let mut owner = vec![None; labels.len()];
    for (client, idxs) in plan.assignment.iter().enumerate() {
        for &i in idxs {
            if i >= labels.len() {
                return Err(Error::MalformedData {
                    what: "partition export",
                    detail: format!("index {i} out of range for {} labels", labels.len()),
                });
            }
            owner[i] = Some(client);
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "label", "client"])?;
    for (i, o) in owner.iter().enumerate() {
        if let Some(client) = o {
            w.write_record([i.to_string(), labels[i].to_string(), client.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Epoch-wise shuffled mini-batch scheduler over 0..n_items.
///
/// Each epoch is a fresh seeded permutation chunked into batches; the last
/// batch of an epoch may be short. Batches never straddle epochs.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n_items: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_items == 0 {
            return Err(Error::EmptyBatch);
        }
        if batch_size == 0 {
            return Err(Error::InvalidParameter(
                "batch size must be positive".into(),
            ));
        }
        Ok(BatchSampler {
            order: (0..n_items).collect(),
            batch_size,
            cursor: 0,
            rng: rng_from(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Next batch of indices, reshuffling whenever a new epoch starts.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor == 0 {
            self.order.shuffle(&mut self.rng);
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = if end == self.order.len() { 0 } else { end };
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset() -> (Dataset, Dataset) {
        generate_dataset(4, 12, 5, 16, 0.05, 7).unwrap()
    }

    #[test]
    fn test_generation_shapes_and_ranges() {
        let (train, test) = small_dataset();
        assert_eq!(train.len(), 48);
        assert_eq!(test.len(), 20);
        assert_eq!(train.per_class_counts(), vec![12; 4]);
        for im in train.images.iter().chain(&test.images) {
            assert_eq!(im.pixels.len(), 16);
            assert!(im.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert!(im.label < 4);
        }
    }

    #[test]
    fn test_generation_deterministic() {
        let a = generate_dataset(3, 5, 2, 8, 0.05, 42).unwrap();
        let b = generate_dataset(3, 5, 2, 8, 0.05, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_zero_sigma_collapses_to_prototype() {
        let (train, _) = generate_dataset(2, 4, 1, 8, 0.0, 9).unwrap();
        for class in 0..2 {
            let members: Vec<&Image> =
                train.images.iter().filter(|im| im.label == class).collect();
            for im in &members[1..] {
                assert_eq!(im.pixels, members[0].pixels);
            }
        }
    }

    #[test]
    fn test_test_split_stable_under_train_count() {
        let (_, test_a) = generate_dataset(3, 10, 4, 8, 0.05, 11).unwrap();
        let (_, test_b) = generate_dataset(3, 50, 4, 8, 0.05, 11).unwrap();
        assert_eq!(test_a, test_b);
    }

    #[test]
    fn test_default_sigma_keeps_classes_separable() {
        // nearest-prototype-mean classification on raw pixels
        let (train, test) = generate_dataset(10, 30, 10, 256, 0.05, 123).unwrap();
        let mut means = vec![vec![0.0; 256]; 10];
        let counts = train.per_class_counts();
        for im in &train.images {
            for (m, p) in means[im.label].iter_mut().zip(&im.pixels) {
                *m += p;
            }
        }
        for (mean, &n) in means.iter_mut().zip(&counts) {
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
        }
        let mut hits = 0usize;
        for im in &test.images {
            let best = (0..10)
                .min_by(|&a, &b| {
                    let da: f64 = means[a]
                        .iter()
                        .zip(&im.pixels)
                        .map(|(m, p)| (m - p) * (m - p))
                        .sum();
                    let db: f64 = means[b]
                        .iter()
                        .zip(&im.pixels)
                        .map(|(m, p)| (m - p) * (m - p))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            hits += usize::from(best == im.label);
        }
        let acc = hits as f64 / test.len() as f64;
        assert!(acc > 0.95, "separability sanity failed: acc {acc}");
    }

    #[test]
    fn test_kshot_counts_and_uniqueness() {
        let (train, _) = small_dataset();
        let shot = kshot_sample(&train, 3, 99).unwrap();
        assert_eq!(shot.per_class_counts(), vec![3; 4]);
        let mut seen: Vec<&Vec<f64>> = shot.images.iter().map(|im| &im.pixels).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), 12, "sampled with replacement");
    }

    #[test]
    fn test_kshot_full_class_is_permutation() {
        let (train, _) = small_dataset();
        let shot = kshot_sample(&train, 12, 5).unwrap();
        assert_eq!(shot.len(), train.len());
        assert_eq!(shot.per_class_counts(), train.per_class_counts());
    }

    #[test]
    fn test_kshot_insufficient_names_class() {
        let (train, _) = small_dataset();
        match kshot_sample(&train, 13, 5) {
            Err(Error::InsufficientClassSamples { class, have, need }) => {
                assert_eq!(class, 0);
                assert_eq!(have, 12);
                assert_eq!(need, 13);
            }
            other => panic!("expected InsufficientClassSamples, got {other:?}"),
        }
    }

    #[test]
    fn test_kshot_seed_sensitivity() {
        let (train, _) = small_dataset();
        let a = kshot_sample(&train, 3, 1).unwrap();
        let b = kshot_sample(&train, 3, 2).unwrap();
        assert_ne!(a, b);
        let c = kshot_sample(&train, 3, 1).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn test_iid_partition_covers_disjointly() {
        let plan = iid_partition(103, 10, 77).unwrap();
        plan.validate(103, true).unwrap();
        let sizes: Vec<usize> = plan.assignment.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 103);
        assert!(sizes.iter().all(|&s| s == 10 || s == 11));
    }

    #[test]
    fn test_iid_partition_too_few_samples() {
        assert!(matches!(
            iid_partition(3, 5, 0),
            Err(Error::PartitionFailed(_))
        ));
    }

    #[test]
    fn test_kshot_partition_deals_evenly() {
        let (train, _) = generate_dataset(4, 20, 2, 8, 0.05, 3).unwrap();
        let (pool, plan) = kshot_partition(&train, 3, 5, 21).unwrap();
        assert_eq!(pool.len(), 4 * 3 * 5);
        plan.validate(pool.len(), true).unwrap();
        for shard_idx in &plan.assignment {
            let shard = pool.subset(shard_idx).unwrap();
            assert_eq!(shard.per_class_counts(), vec![3; 4]);
        }
    }

    #[test]
    fn test_dirichlet_single_client_takes_all() {
        let labels = vec![0, 1, 2, 0, 1, 2];
        let plan = dirichlet_partition(&labels, 1, 0.5, 4).unwrap();
        assert_eq!(plan.assignment.len(), 1);
        assert_eq!(plan.assignment[0].len(), 6);
    }

    #[test]
    fn test_dirichlet_rejects_bad_alpha() {
        let labels = vec![0, 1, 0, 1];
        assert!(dirichlet_partition(&labels, 2, 0.0, 1).is_err());
        assert!(dirichlet_partition(&labels, 2, -1.0, 1).is_err());
        assert!(dirichlet_partition(&labels, 2, f64::NAN, 1).is_err());
    }

    #[test]
    fn test_dirichlet_partition_is_set_partition() {
        let labels: Vec<usize> = (0..400).map(|i| i % 5).collect();
        let plan = dirichlet_partition(&labels, 8, 0.5, 31).unwrap();
        plan.validate(400, true).unwrap();
        assert!(plan.assignment.iter().all(|a| !a.is_empty()));
        assert_eq!(plan.alpha, Some(0.5));
    }

    #[test]
    fn test_dirichlet_deterministic() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let a = dirichlet_partition(&labels, 6, 0.3, 9).unwrap();
        let b = dirichlet_partition(&labels, 6, 0.3, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_apply_trigger_clips() {
        let t = Trigger {
            noise: vec![0.1, -0.03, 0.2],
            linf_budget: 0.2,
        };
        let out = apply_trigger(&[1.0, 0.5, 0.95], &t).unwrap();
        assert_eq!(out[0], 1.0);
        assert!((out[1] - 0.47).abs() < 1e-15);
        assert_eq!(out[2], 1.0);
    }

    #[test]
    fn test_apply_zero_trigger_is_identity() {
        let t = Trigger::zeros(3, 0.1).unwrap();
        let px = [0.2, 0.8, 0.5];
        assert_eq!(apply_trigger(&px, &t).unwrap(), px.to_vec());
    }

    #[test]
    fn test_apply_trigger_dim_mismatch() {
        let t = Trigger::zeros(2, 0.1).unwrap();
        assert!(matches!(
            apply_trigger(&[0.1, 0.2, 0.3], &t),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn test_trigger_projection() {
        let mut t = Trigger {
            noise: vec![0.5, -0.9, 0.01],
            linf_budget: 0.2,
        };
        assert!(!t.within_budget());
        t.project();
        assert!(t.within_budget());
        assert_eq!(t.noise, vec![0.2, -0.2, 0.01]);
    }

    #[test]
    fn test_poison_excludes_target_and_relabels() {
        let (_, test) = small_dataset();
        let t = Trigger::zeros(16, 0.1).unwrap();
        let poisoned = poison_testset(&test, &t, 2).unwrap();
        let per_class = test.per_class_counts();
        assert_eq!(poisoned.len(), test.len() - per_class[2]);
        assert!(poisoned.images.iter().all(|im| im.label == 2));
    }

    #[test]
    fn test_poison_keeping_target() {
        let (_, test) = small_dataset();
        let t = Trigger::zeros(16, 0.1).unwrap();
        let poisoned = poison_testset_keeping_target(&test, &t, 2).unwrap();
        assert_eq!(poisoned.len(), test.len());
    }

    #[test]
    fn test_poison_single_class_errors() {
        let single = Dataset {
            images: vec![Image {
                pixels: vec![0.5; 4],
                label: 0,
            }],
            class_count: 1,
            split: Split::Test,
        };
        let t = Trigger::zeros(4, 0.1).unwrap();
        assert!(matches!(
            poison_testset(&single, &t, 0),
            Err(Error::EmptyPoisonSet)
        ));
    }

    #[test]
    fn test_poison_matches_elementwise_application() {
        let (_, test) = small_dataset();
        let t = Trigger {
            noise: (0..16).map(|i| (i as f64 - 8.0) / 200.0).collect(),
            linf_budget: 0.05,
        };
        let poisoned = poison_testset(&test, &t, 0).unwrap();
        let mut want = Vec::new();
        for im in &test.images {
            if im.label == 0 {
                continue;
            }
            let px: Vec<f64> = im
                .pixels
                .iter()
                .zip(&t.noise)
                .map(|(x, n)| (x + n).clamp(0.0, 1.0))
                .collect();
            want.push(px);
        }
        for (got, want) in poisoned.images.iter().zip(&want) {
            assert_eq!(&got.pixels, want);
        }
    }

    #[test]
    fn test_partition_csv_layout() {
        let plan = PartitionPlan {
            assignment: vec![vec![2, 0], vec![1]],
            alpha: None,
            seed: 0,
        };
        let labels = vec![5, 6, 7];
        let mut buf = Vec::new();
        write_partition_csv(&plan, &labels, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "index,label,client\n0,5,0\n1,6,1\n2,7,0\n");
    }

    #[test]
    fn test_batch_sampler_epoch_is_permutation() {
        let mut s = BatchSampler::new(10, 3, 13).unwrap();
        assert_eq!(s.batches_per_epoch(), 4);
        let mut seen = Vec::new();
        for _ in 0..4 {
            seen.extend(s.next_batch());
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn test_batch_sampler_short_last_batch_then_reshuffle() {
        let mut s = BatchSampler::new(7, 3, 1).unwrap();
        let sizes: Vec<usize> = (0..6).map(|_| s.next_batch().len()).collect();
        assert_eq!(sizes, vec![3, 3, 1, 3, 3, 1]);
    }

    #[test]
    fn test_batch_sampler_deterministic() {
        let mut a = BatchSampler::new(9, 4, 5).unwrap();
        let mut b = BatchSampler::new(9, 4, 5).unwrap();
        for _ in 0..7 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn test_batch_sampler_rejects_empty() {
        assert!(matches!(BatchSampler::new(0, 3, 0), Err(Error::EmptyBatch)));
        assert!(BatchSampler::new(3, 0, 0).is_err());
    }
}
