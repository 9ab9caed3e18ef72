//! Ensembling mechanisms over the shared backbone.
//!
//! Implicit members attach low-rank or rank-one adapters, independent heads,
//! dropout samples or epistemic-index networks to one set of frozen weights;
//! explicit and snapshot ensembles materialize full per-member copies. All
//! member state lives in the model's named parameter set, so every method
//! serializes through the same checkpoint path.

use rayon::prelude::*;

use crate::backbone::{
    init_head, AdapterInit, ForwardMode, LoadedParams, Method, Model, ModelConfig, ModelError,
};
use crate::checkpoint::ParamSet;
use crate::metrics::PredictionSet;
use crate::rng::{derive, member_seed, SplitMix64};
use crate::tensor::{matmul_raw, Element, Tape, Tensor, TensorError, ValueId};

/// Substream tags separating what each member draws from its seed stream.
const STREAM_HEAD: u64 = 1;
const STREAM_ADAPTER: u64 = 2;
const STREAM_EPINET: u64 = 3;

pub const EPINET_HIDDEN: usize = 256;
/// Head `i` of the shared-backbone multi-head baseline is seeded `42 + i`.
pub const LAST_LAYER_SEED_BASE: u64 = 42;
/// Frozen prior network `i` is seeded `42 + i * 1000`.
pub const PRIOR_SEED_STRIDE: u64 = 1000;

/// Projection output for one member at one attention slot. The base weight
/// is applied as-is, adapted multiplicatively or additively, or replaced by
/// a member copy, depending on the method. The low-rank update is computed
/// as two skinny products; the merged matrix is never formed here.
pub fn slot_forward<E: Element>(
    tape: &mut Tape<E>,
    loaded: &LoadedParams<E>,
    config: &ModelConfig,
    prefix: &str,
    member: usize,
    layer: usize,
    role: &str,
    x: ValueId,
) -> Result<ValueId, TensorError> {
    let w0 = loaded.id(&format!("{prefix}/layer{layer}/{role}/weight"));
    let bias = loaded.id(&format!("{prefix}/layer{layer}/{role}/bias"));
    match config.method {
        Method::Lora => {
            let base = tape.linear(x, w0, Some(bias))?;
            let a = loaded.id(&format!("member{member}/layer{layer}/{role}/A"));
            let b = loaded.id(&format!("member{member}/layer{layer}/{role}/B"));
            let xa = tape.linear(x, a, None)?;
            let update = tape.linear(xa, b, None)?;
            tape.add(base, update)
        }
        Method::Batch | Method::BatchPp => {
            let r = loaded.id(&format!("member{member}/layer{layer}/{role}/r"));
            let s = loaded.id(&format!("member{member}/layer{layer}/{role}/s"));
            let rank_one = tape.outer(s, r)?;
            let w = if config.method == Method::Batch {
                tape.mul(w0, rank_one)?
            } else {
                tape.add(w0, rank_one)?
            };
            tape.linear(x, w, Some(bias))
        }
        _ => tape.linear(x, w0, Some(bias)),
    }
}

/// Name prefix of the classification head used by `member`.
pub fn head_prefix<E: Element>(
    config: &ModelConfig,
    loaded: &LoadedParams<E>,
    member: usize,
) -> String {
    match config.method {
        Method::Epinet => "base/head".to_string(),
        Method::Snapshot if !loaded.has(&format!("member{member}/head/weight")) => {
            "live/head".to_string()
        }
        _ => format!("member{member}/head"),
    }
}

/// Classification logits for one member from class-token features.
pub fn head_forward<E: Element>(
    tape: &mut Tape<E>,
    loaded: &LoadedParams<E>,
    config: &ModelConfig,
    member: usize,
    features: ValueId,
    mode: &mut ForwardMode<'_>,
) -> Result<ValueId, ModelError> {
    let prefix = head_prefix(config, loaded, member);
    let w = loaded.id(&format!("{prefix}/weight"));
    let b = loaded.id(&format!("{prefix}/bias"));
    let base = tape.linear(features, w, Some(b))?;
    if config.method != Method::Epinet {
        return Ok(base);
    }

    let batch = tape.shape(features)[0];
    let dz = config.epistemic_dim;
    let classes = config.num_classes;
    // One epistemic index per forward call, shared by the whole batch: the
    // index is what distinguishes members, not the images.
    let z_vec: Vec<E> = match mode {
        ForwardMode::Deterministic => vec![E::zero(); dz],
        ForwardMode::Stochastic { rng } => {
            (0..dz).map(|_| E::from_f64(rng.normal())).collect()
        }
    };
    let mut tiled = Vec::with_capacity(batch * dz);
    for _ in 0..batch {
        tiled.extend_from_slice(&z_vec);
    }
    let z = tape.constant(vec![batch, dz], tiled);
    let sg = tape.stop_grad(features);
    let input = tape.concat_cols(&[sg, z])?;
    let learn = epinet_mlp(tape, loaded, &format!("member{member}/epinet"), input, z, dz, classes)?;
    let prior_raw =
        epinet_mlp(tape, loaded, &format!("member{member}/prior"), input, z, dz, classes)?;
    let prior = tape.scale(prior_raw, E::from_f64(config.prior_scale));
    let correction = tape.add(learn, prior)?;
    Ok(tape.add(base, correction)?)
}

/// Three-layer ReLU MLP from `[batch, d + dz]` to a `[dz, classes]` matrix
/// per row, contracted with the epistemic index `z`.
fn epinet_mlp<E: Element>(
    tape: &mut Tape<E>,
    loaded: &LoadedParams<E>,
    prefix: &str,
    input: ValueId,
    z: ValueId,
    dz: usize,
    classes: usize,
) -> Result<ValueId, TensorError> {
    let mut h = input;
    for (i, last) in [(1usize, false), (2, false), (3, true)] {
        let w = loaded.id(&format!("{prefix}/l{i}/weight"));
        let b = loaded.id(&format!("{prefix}/l{i}/bias"));
        h = tape.linear(h, w, Some(b))?;
        if !last {
            h = tape.relu(h);
        }
    }
    tape.epi_contract(h, z, dz, classes)
}

fn epinet_layer_dims(config: &ModelConfig) -> [(usize, usize); 3] {
    let input = config.embed_dim + config.epistemic_dim;
    [
        (EPINET_HIDDEN, input),
        (EPINET_HIDDEN, EPINET_HIDDEN),
        (config.epistemic_dim * config.num_classes, EPINET_HIDDEN),
    ]
}

/// Parameters in one epistemic MLP (weights and biases of three layers).
pub fn epinet_mlp_param_count(config: &ModelConfig) -> usize {
    epinet_layer_dims(config).iter().map(|&(out, inp)| out * inp + out).sum()
}

fn insert_epinet_stack(
    params: &mut ParamSet,
    prefix: &str,
    dims: &[(usize, usize); 3],
    rng: &mut SplitMix64,
    trainable: bool,
) {
    for (i, &(out, inp)) in dims.iter().enumerate() {
        params.insert(
            format!("{prefix}/l{}/weight", i + 1),
            Tensor::from_fn(vec![out, inp], |_| (rng.normal() * 0.01) as f32),
            trainable,
        );
        params.insert(format!("{prefix}/l{}/bias", i + 1), Tensor::zeros(vec![out]), trainable);
    }
}

/// Low-rank pair for one projection: `A[rank, d]` drawn from the init spec,
/// `B[k, rank]` exactly zero so members start collapsed onto the backbone.
pub fn lora_init(
    rank: usize,
    d: usize,
    k: usize,
    init: AdapterInit,
    rng: &mut SplitMix64,
) -> (Tensor<f32>, Tensor<f32>) {
    let a = match init {
        AdapterInit::Gaussian { std } => {
            Tensor::from_fn(vec![rank, d], |_| (rng.normal() * std) as f32)
        }
        AdapterInit::XavierUniform { gain } => {
            let bound = gain * (6.0 / (rank + d) as f64).sqrt();
            Tensor::from_fn(vec![rank, d], |_| rng.uniform(-bound, bound) as f32)
        }
    };
    (a, Tensor::zeros(vec![k, rank]))
}

/// Explicit merged weight `W0 + B*A`, used for verification and weight-space
/// analysis, never in the forward hot path.
pub fn merge_lora_weights(
    w0: &Tensor<f32>,
    a: &Tensor<f32>,
    b: &Tensor<f32>,
) -> Result<Tensor<f32>, ModelError> {
    let (k, d, r) = match (w0.shape(), a.shape(), b.shape()) {
        ([k, d], [r, ad], [bk, br]) if ad == d && bk == k && br == r => (*k, *d, *r),
        _ => {
            return Err(ModelError::Config(format!(
                "incompatible merge shapes W0 {:?}, A {:?}, B {:?}",
                w0.shape(),
                a.shape(),
                b.shape()
            )))
        }
    };
    let mut update = vec![0.0f32; k * d];
    matmul_raw(b.data(), a.data(), k, r, d, &mut update);
    for (u, &w) in update.iter_mut().zip(w0.data()) {
        *u += w;
    }
    Ok(Tensor::new(vec![k, d], update)?)
}

/// Effective projection weight of one member at one slot, materialized for
/// analysis: merged low-rank update, rank-one scaling or shift, a member
/// copy, or the shared base weight, depending on the method.
pub fn effective_weight(
    model: &Model,
    member: usize,
    layer: usize,
    role: &str,
) -> Result<Tensor<f32>, ModelError> {
    let config = &model.config;
    let lookup = |name: String| {
        model
            .params
            .get(&name)
            .cloned()
            .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
    };
    let has_copy = model.params.contains(&format!("member{member}/backbone/cls_token"));
    let prefix = crate::backbone::backbone_prefix(config, has_copy, member);
    let w0 = lookup(format!("{prefix}/layer{layer}/{role}/weight"))?;
    match config.method {
        Method::Lora => {
            let a = lookup(format!("member{member}/layer{layer}/{role}/A"))?;
            let b = lookup(format!("member{member}/layer{layer}/{role}/B"))?;
            merge_lora_weights(&w0, &a, &b)
        }
        Method::Batch | Method::BatchPp => {
            let r = lookup(format!("member{member}/layer{layer}/{role}/r"))?;
            let s = lookup(format!("member{member}/layer{layer}/{role}/s"))?;
            let (k, d) = (w0.shape()[0], w0.shape()[1]);
            let mut data = Vec::with_capacity(k * d);
            for i in 0..k {
                for j in 0..d {
                    let outer = s.data()[i] * r.data()[j];
                    let base = w0.data()[i * d + j];
                    data.push(if config.method == Method::Batch {
                        base * outer
                    } else {
                        base + outer
                    });
                }
            }
            Ok(Tensor::new(vec![k, d], data)?)
        }
        _ => Ok(w0),
    }
}

/// Creates all member-owned parameters for the configured method and, for
/// the rank-one factorization methods, marks the shared projection weights
/// trainable.
pub fn init_members(
    params: &mut ParamSet,
    config: &ModelConfig,
    seed: u64,
) -> Result<(), ModelError> {
    let d = config.embed_dim;
    let c = config.num_classes;
    let head_rng = |m: usize| SplitMix64::new(derive(member_seed(seed, m), STREAM_HEAD));
    match config.method {
        Method::Single | Method::McDropout => {
            init_head(params, "member0/head", d, c, &mut head_rng(0));
        }
        Method::Lora => {
            for m in 0..config.members {
                init_head(params, &format!("member{m}/head"), d, c, &mut head_rng(m));
                let mut rng = SplitMix64::new(derive(member_seed(seed, m), STREAM_ADAPTER));
                for layer in 0..config.depth {
                    for role in ["q", "k", "v", "o"] {
                        let (a, b) = lora_init(config.rank, d, d, config.adapter_init, &mut rng);
                        params.insert(format!("member{m}/layer{layer}/{role}/A"), a, true);
                        params.insert(format!("member{m}/layer{layer}/{role}/B"), b, true);
                    }
                }
            }
        }
        Method::Explicit => {
            for m in 0..config.members {
                init_head(params, &format!("member{m}/head"), d, c, &mut head_rng(m));
            }
        }
        Method::Batch | Method::BatchPp => {
            for layer in 0..config.depth {
                for role in ["q", "k", "v", "o"] {
                    let name = format!("backbone/layer{layer}/{role}/weight");
                    if !params.set_trainable(&name, true) {
                        return Err(ModelError::Config(format!("missing parameter {name}")));
                    }
                }
            }
            let mean = if config.method == Method::Batch { 1.0 } else { 0.0 };
            for m in 0..config.members {
                init_head(params, &format!("member{m}/head"), d, c, &mut head_rng(m));
                let mut rng = SplitMix64::new(derive(member_seed(seed, m), STREAM_ADAPTER));
                for layer in 0..config.depth {
                    for role in ["q", "k", "v", "o"] {
                        let r = Tensor::from_fn(vec![d], |_| (mean + rng.normal() * 0.02) as f32);
                        let s = Tensor::from_fn(vec![d], |_| (mean + rng.normal() * 0.02) as f32);
                        params.insert(format!("member{m}/layer{layer}/{role}/r"), r, true);
                        params.insert(format!("member{m}/layer{layer}/{role}/s"), s, true);
                    }
                }
            }
        }
        Method::Snapshot => {
            init_head(params, "live/head", d, c, &mut head_rng(0));
        }
        Method::LastLayer => {
            for m in 0..config.members {
                let mut rng = SplitMix64::new(LAST_LAYER_SEED_BASE + m as u64);
                init_head(params, &format!("member{m}/head"), d, c, &mut rng);
            }
        }
        Method::Epinet => {
            init_head(params, "base/head", d, c, &mut head_rng(0));
            let dims = epinet_layer_dims(config);
            for m in 0..config.members {
                let mut learn = SplitMix64::new(derive(member_seed(seed, m), STREAM_EPINET));
                insert_epinet_stack(params, &format!("member{m}/epinet"), &dims, &mut learn, true);
                let mut prior =
                    SplitMix64::new(LAST_LAYER_SEED_BASE + m as u64 * PRIOR_SEED_STRIDE);
                insert_epinet_stack(params, &format!("member{m}/prior"), &dims, &mut prior, false);
            }
        }
    }
    Ok(())
}

/// Cyclic snapshot schedule: the burn-in is extended to the smallest epoch
/// count that leaves a whole number of equal cycles, one per member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotPlan {
    pub total_epochs: usize,
    pub burn_in: usize,
    pub members: usize,
    pub cycle_length: usize,
    /// Epoch counts after which a snapshot is recorded: first at the end of
    /// burn-in, then at the end of every cycle but the last.
    pub snapshot_epochs: Vec<usize>,
}

pub fn plan_snapshots(
    total_epochs: usize,
    burn_in: usize,
    members: usize,
) -> Result<SnapshotPlan, ModelError> {
    if members == 0 {
        return Err(ModelError::Config("snapshot ensemble needs at least one member".into()));
    }
    if burn_in >= total_epochs {
        return Err(ModelError::Config(format!(
            "burn-in {burn_in} must be shorter than the {total_epochs}-epoch run"
        )));
    }
    let mut b = burn_in;
    while b < total_epochs && (total_epochs - b) % members != 0 {
        b += 1;
    }
    if b >= total_epochs {
        return Err(ModelError::Config(format!(
            "no feasible burn-in in [{burn_in}, {total_epochs}) leaves a multiple of {members} epochs"
        )));
    }
    let cycle_length = (total_epochs - b) / members;
    let snapshot_epochs = (0..members).map(|i| b + i * cycle_length).collect();
    Ok(SnapshotPlan { total_epochs, burn_in: b, members, cycle_length, snapshot_epochs })
}

/// Deep-copies the live network (backbone plus live head) into the member
/// slot as frozen parameters. Training continues on the live network.
pub fn record_snapshot(params: &mut ParamSet, member: usize) -> Result<(), ModelError> {
    let marker = format!("member{member}/backbone/cls_token");
    if params.contains(&marker) {
        return Err(ModelError::Config(format!("snapshot member {member} already recorded")));
    }
    let copies: Vec<(String, Tensor<f32>)> = params
        .iter()
        .filter_map(|p| {
            if let Some(rest) = p.name.strip_prefix("backbone/") {
                Some((format!("member{member}/backbone/{rest}"), p.tensor.clone()))
            } else {
                p.name
                    .strip_prefix("live/")
                    .map(|rest| (format!("member{member}/{rest}"), p.tensor.clone()))
            }
        })
        .collect();
    if copies.is_empty() {
        return Err(ModelError::Config("no live network to snapshot".into()));
    }
    for (name, tensor) in copies {
        params.insert(name, tensor, false);
    }
    Ok(())
}

/// Strips the live network, keeping only the recorded member snapshots.
pub fn finalize_snapshots(params: &ParamSet, members: usize) -> Result<ParamSet, ModelError> {
    let mut out = ParamSet::new();
    for p in params.iter() {
        if p.name.starts_with("member") {
            out.insert(p.name.clone(), p.tensor.clone(), false);
        }
    }
    for m in 0..members {
        if !out.contains(&format!("member{m}/backbone/cls_token")) {
            return Err(ModelError::Config(format!("snapshot member {m} was never recorded")));
        }
    }
    Ok(out)
}

/// Number of prediction streams the method produces: stochastic samples for
/// dropout, members for everything else.
pub fn prediction_members(config: &ModelConfig) -> usize {
    match config.method {
        Method::McDropout => config.mc_samples,
        _ => config.members,
    }
}

/// Per-member class probabilities over a labeled dataset, evaluated in
/// batches. Member logits are retained for downstream temperature fitting;
/// probabilities are softmax(logits / temperature).
///
/// Deterministic methods ignore `seed`. Dropout sampling derives one stream
/// per (sample, batch) pair, so the sample set is reproducible; epistemic
/// indices are re-derived per batch from the member stream alone, so every
/// batch of one member shares one index.
pub fn predict(
    model: &Model,
    images: &[f32],
    labels: &[usize],
    batch_size: usize,
    seed: u64,
    temperature: f64,
) -> Result<PredictionSet, ModelError> {
    let config = &model.config;
    let n = labels.len();
    if batch_size == 0 {
        return Err(ModelError::Config("batch size must be positive".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(ModelError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let per_image = config.image_size * config.image_size * config.channels;
    if images.len() != n * per_image {
        return Err(ModelError::Config(format!(
            "image buffer has {} values, expected {} for {} images",
            images.len(),
            n * per_image,
            n
        )));
    }
    let members = prediction_members(config);
    let classes = config.num_classes;
    let mut probs = vec![0.0f32; members * n * classes];
    let mut logits = vec![0.0f32; members * n * classes];
    let results: Vec<Result<(), ModelError>> = probs
        .par_chunks_mut(n * classes)
        .zip(logits.par_chunks_mut(n * classes))
        .enumerate()
        .map(|(m, (pout, zout))| {
            member_outputs(model, images, n, batch_size, seed, temperature, m, pout, zout)
        })
        .collect();
    for r in results {
        r?;
    }
    let set = PredictionSet::new(members, n, classes, probs, labels.to_vec())?;
    Ok(set.with_logits(logits)?)
}

#[allow(clippy::too_many_arguments)]
fn member_outputs(
    model: &Model,
    images: &[f32],
    n: usize,
    batch_size: usize,
    seed: u64,
    temperature: f64,
    member: usize,
    probs_out: &mut [f32],
    logits_out: &mut [f32],
) -> Result<(), ModelError> {
    let config = &model.config;
    let per_image = config.image_size * config.image_size * config.channels;
    let classes = config.num_classes;
    for (chunk_idx, start) in (0..n).step_by(batch_size).enumerate() {
        let bsz = batch_size.min(n - start);
        let slice = &images[start * per_image..(start + bsz) * per_image];
        let logits = match config.method {
            Method::McDropout => {
                let mut rng = SplitMix64::new(derive(member_seed(seed, member), chunk_idx as u64));
                let mut mode = ForwardMode::Stochastic { rng: &mut rng };
                model.forward(slice, bsz, 0, &mut mode)?.0
            }
            Method::Epinet => {
                let mut rng = SplitMix64::new(member_seed(seed, member));
                let mut mode = ForwardMode::Stochastic { rng: &mut rng };
                model.forward(slice, bsz, member, &mut mode)?.0
            }
            _ => model.forward(slice, bsz, member, &mut ForwardMode::Deterministic)?.0,
        };
        logits.validate_finite("predict")?;
        let zdata = logits.data();
        logits_out[start * classes..(start + bsz) * classes].copy_from_slice(zdata);
        for row in 0..bsz {
            let zr = &zdata[row * classes..(row + 1) * classes];
            let pr = &mut probs_out[(start + row) * classes..(start + row + 1) * classes];
            softmax_into(zr, temperature, pr);
        }
    }
    Ok(())
}

fn softmax_into(logits: &[f32], temperature: f64, out: &mut [f32]) {
    let max = logits
        .iter()
        .map(|&z| z as f64 / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    let mut row = vec![0.0f64; logits.len()];
    for (e, &z) in row.iter_mut().zip(logits) {
        *e = (z as f64 / temperature - max).exp();
        sum += *e;
    }
    for (o, e) in out.iter_mut().zip(row) {
        *o = (e / sum) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::count_parameters;

    fn rand_images(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = SplitMix64::new(seed);
        (0..n * 256).map(|_| rng.uniform(0.0, 1.0) as f32).collect()
    }

    #[test]
    fn lora_update_matches_dense_merge() {
        let mut rng = SplitMix64::new(3);
        let d = 6;
        let k = 6;
        let r = 2;
        let w0 = Tensor::from_fn(vec![k, d], |_| rng.uniform(-1.0, 1.0) as f32);
        let (a, mut b) = lora_init(r, d, k, AdapterInit::XavierUniform { gain: 10.0 }, &mut rng);
        for v in b.data_mut() {
            *v = rng.uniform(-0.5, 0.5) as f32;
        }
        let merged = merge_lora_weights(&w0, &a, &b).unwrap();

        let x = Tensor::from_fn(vec![3, d], |_| rng.uniform(-1.0, 1.0) as f32);
        let mut tape: Tape<f32> = Tape::new();
        let xi = tape.leaf(&x);
        let w0i = tape.leaf(&w0);
        let ai = tape.leaf(&a);
        let bi = tape.leaf(&b);
        let base = tape.linear(xi, w0i, None).unwrap();
        let xa = tape.linear(xi, ai, None).unwrap();
        let update = tape.linear(xa, bi, None).unwrap();
        let low_rank = tape.add(base, update).unwrap();

        let mi = tape.leaf(&merged);
        let dense = tape.linear(xi, mi, None).unwrap();
        for (lo, de) in tape.value(low_rank).iter().zip(tape.value(dense)) {
            assert!((lo - de).abs() < 1e-5, "{lo} vs {de}");
        }
    }

    #[test]
    fn zero_b_reproduces_base_weight_bitwise() {
        let mut rng = SplitMix64::new(4);
        let w0 = Tensor::from_fn(vec![4, 4], |_| rng.uniform(-1.0, 1.0) as f32);
        let (a, b) = lora_init(2, 4, 4, AdapterInit::XavierUniform { gain: 10.0 }, &mut rng);
        assert!(b.data().iter().all(|&v| v == 0.0));
        let merged = merge_lora_weights(&w0, &a, &b).unwrap();
        assert_eq!(merged.data(), w0.data());
    }

    #[test]
    fn xavier_entries_respect_glorot_bound() {
        let mut rng = SplitMix64::new(5);
        let (r, d) = (4, 64);
        let gain = 10.0;
        let (a, _) = lora_init(r, d, d, AdapterInit::XavierUniform { gain }, &mut rng);
        let bound = (gain * (6.0 / (r + d) as f64).sqrt()) as f32;
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        assert!(a.data().iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn zero_std_gaussian_gives_zero_adapters() {
        let mut rng = SplitMix64::new(6);
        let (a, b) = lora_init(3, 8, 8, AdapterInit::Gaussian { std: 0.0 }, &mut rng);
        assert!(a.data().iter().all(|&v| v == 0.0));
        assert!(b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn members_collapse_to_single_network_at_init() {
        let seed = 17;
        let config = ModelConfig::micro(Method::Lora);
        let model = Model::init(config, seed).unwrap();
        let single = Model::init(ModelConfig::micro(Method::Single), seed).unwrap();
        let images = rand_images(2, 9);
        let (_, f0) = model.forward(&images, 2, 0, &mut ForwardMode::Deterministic).unwrap();
        for m in 1..model.config.members {
            let (_, fm) = model.forward(&images, 2, m, &mut ForwardMode::Deterministic).unwrap();
            assert_eq!(f0.data(), fm.data(), "member {m} features diverged at init");
        }
        let (ls, fs) = single.forward(&images, 2, 0, &mut ForwardMode::Deterministic).unwrap();
        assert_eq!(f0.data(), fs.data());
        let (l0, _) = model.forward(&images, 2, 0, &mut ForwardMode::Deterministic).unwrap();
        assert_eq!(l0.data(), ls.data(), "member 0 logits differ from the single network");
    }

    #[test]
    fn batch_identity_vectors_reproduce_single_network() {
        let seed = 21;
        let images = rand_images(2, 11);
        let single = Model::init(ModelConfig::micro(Method::Single), seed).unwrap();
        let (ls, _) = single.forward(&images, 2, 0, &mut ForwardMode::Deterministic).unwrap();

        for (method, identity) in [(Method::Batch, 1.0f32), (Method::BatchPp, 0.0f32)] {
            let mut model = Model::init(ModelConfig::micro(method), seed).unwrap();
            let names: Vec<String> = model
                .params
                .iter()
                .filter(|p| p.name.ends_with("/r") || p.name.ends_with("/s"))
                .map(|p| p.name.clone())
                .collect();
            for name in names {
                for v in model.params.get_mut(&name).unwrap().data_mut() {
                    *v = identity;
                }
            }
            let (l0, _) = model.forward(&images, 2, 0, &mut ForwardMode::Deterministic).unwrap();
            assert_eq!(l0.data(), ls.data(), "{} identity departs from base", method.name());
        }
    }

    #[test]
    fn batch_slot_matches_dense_outer_product_construction() {
        let mut rng = SplitMix64::new(8);
        let config = ModelConfig::micro(Method::Batch);
        let model = Model::init(config, 31).unwrap();
        let d = model.config.embed_dim;
        let x = Tensor::from_fn(vec![3, d], |_| rng.uniform(-1.0, 1.0) as f32);

        let mut tape: Tape<f32> = Tape::new();
        let loaded = LoadedParams::load(&mut tape, &model.params);
        let xi = tape.leaf(&x);
        let out = slot_forward(&mut tape, &loaded, &model.config, "backbone", 1, 0, "q", xi).unwrap();

        let w0 = model.params.get("backbone/layer0/q/weight").unwrap();
        let bias = model.params.get("backbone/layer0/q/bias").unwrap();
        let rr = model.params.get("member1/layer0/q/r").unwrap();
        let ss = model.params.get("member1/layer0/q/s").unwrap();
        for row in 0..3 {
            for i in 0..d {
                let mut acc = 0.0f64;
                for j in 0..d {
                    let w = (w0.data()[i * d + j] * ss.data()[i] * rr.data()[j]) as f64;
                    acc += w * x.data()[row * d + j] as f64;
                }
                acc += bias.data()[i] as f64;
                let got = tape.value(out)[row * d + i] as f64;
                assert!((got - acc).abs() < 1e-6, "row {row} col {i}: {got} vs {acc}");
            }
        }
    }

    #[test]
    fn batch_gradient_carries_base_weight_only_in_multiplicative_mode() {
        // One slot, fixed upstream gradient of ones: for W_eff = W * s r^T the
        // gradient of sum(W_eff x) w.r.t. r_j is sum_i W[i,j] s_i x_j, while
        // for W_eff = W + s r^T it is sum_i s_i x_j with no W factor.
        let d = 3;
        let w = Tensor::new(vec![d, d], vec![2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0])
            .unwrap();
        let x = Tensor::new(vec![1, d], vec![1.0f32, 2.0, 4.0]).unwrap();
        let rv = Tensor::new(vec![d], vec![0.5f32, 1.5, 2.5]).unwrap();
        let sv = Tensor::new(vec![d], vec![1.0f32, 2.0, 3.0]).unwrap();

        for multiplicative in [true, false] {
            let mut tape: Tape<f32> = Tape::new();
            let wi = tape.leaf(&w);
            let xi = tape.leaf(&x);
            let ri = tape.leaf(&rv.clone().with_requires_grad(true));
            let si = tape.leaf(&sv.clone().with_requires_grad(true));
            let rank_one = tape.outer(si, ri).unwrap();
            let weff = if multiplicative {
                tape.mul(wi, rank_one).unwrap()
            } else {
                tape.add(wi, rank_one).unwrap()
            };
            let y = tape.linear(xi, weff, None).unwrap();
            let loss = tape.sum_all(y);
            tape.backward(loss).unwrap();
            let r_grad = tape.grad(ri).unwrap();
            for j in 0..d {
                let expected: f32 = (0..d)
                    .map(|i| {
                        let factor = if multiplicative { w.data()[i * d + j] } else { 1.0 };
                        factor * sv.data()[i] * x.data()[j]
                    })
                    .sum();
                assert!((r_grad[j] - expected).abs() < 1e-4, "mode mult={multiplicative} j={j}");
            }
        }
    }

    #[test]
    fn epinet_zero_index_returns_base_logits() {
        let mut config = ModelConfig::micro(Method::Epinet);
        config.members = 3;
        let model = Model::init(config, 13).unwrap();
        let images = rand_images(2, 14);
        let (logits, features) =
            model.forward(&images, 2, 1, &mut ForwardMode::Deterministic).unwrap();

        let w = model.params.get("base/head/weight").unwrap();
        let b = model.params.get("base/head/bias").unwrap();
        let (classes, d) = (w.shape()[0], w.shape()[1]);
        for row in 0..2 {
            for j in 0..classes {
                let mut acc = b.data()[j];
                for i in 0..d {
                    acc += features.data()[row * d + i] * w.data()[j * d + i];
                }
                let got = logits.data()[row * classes + j];
                assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
            }
        }
    }

    #[test]
    fn epinet_path_blocks_backbone_gradients() {
        let mut config = ModelConfig::micro(Method::Epinet);
        config.members = 1;
        let mut model = Model::init(config, 19).unwrap();
        for v in model.params.get_mut("base/head/weight").unwrap().data_mut() {
            *v = 0.0;
        }
        let images = rand_images(1, 3);
        let mut tape: Tape<f32> = Tape::new();
        let loaded = LoadedParams::load(&mut tape, &model.params);
        let patches =
            crate::backbone::patchify_batch(&mut tape, &images, 1, &model.config).unwrap();
        let mut rng = SplitMix64::new(77);
        let mut mode = ForwardMode::Stochastic { rng: &mut rng };
        let out = crate::backbone::vit_forward_graph(
            &mut tape,
            &loaded,
            &model.config,
            patches,
            1,
            0,
            &mut mode,
        )
        .unwrap();
        let loss = tape.sum_all(out.logits);
        tape.backward(loss).unwrap();

        let backbone_grad = tape.grad(loaded.id("backbone/patch_embed/weight")).unwrap();
        assert!(backbone_grad.iter().all(|&g| g == 0.0), "stop-grad leaked into the backbone");
        let epi_grad = tape.grad(loaded.id("member0/epinet/l1/weight")).unwrap();
        assert!(epi_grad.iter().any(|&g| g != 0.0), "epinet stack received no gradient");
    }

    #[test]
    fn epinet_members_disagree_under_sampled_indices() {
        let mut config = ModelConfig::micro(Method::Epinet);
        config.members = 4;
        let model = Model::init(config, 23).unwrap();
        let images = rand_images(4, 25);
        let preds = predict(&model, &images, &[0, 1, 2, 3], 2, 5, 1.0).unwrap();
        let a = preds.member(0);
        let b = preds.member(1);
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-7));
    }

    #[test]
    fn prior_networks_are_frozen() {
        let config = ModelConfig::micro(Method::Epinet);
        let model = Model::init(config, 29).unwrap();
        for p in model.params.iter() {
            if p.name.contains("/prior/") {
                assert!(!p.trainable, "{} must be frozen", p.name);
            }
        }
    }

    #[test]
    fn last_layer_heads_depend_only_on_member_index() {
        let a = Model::init(ModelConfig::micro(Method::LastLayer), 1).unwrap();
        let b = Model::init(ModelConfig::micro(Method::LastLayer), 2).unwrap();
        for m in 0..a.config.members {
            let name = format!("member{m}/head/weight");
            assert_eq!(a.params.get(&name).unwrap().data(), b.params.get(&name).unwrap().data());
        }
        assert_ne!(
            a.params.get("member0/head/weight").unwrap().data(),
            a.params.get("member1/head/weight").unwrap().data()
        );
    }

    #[test]
    fn explicit_members_share_initial_backbone_but_not_heads() {
        let model = Model::init(ModelConfig::micro(Method::Explicit), 37).unwrap();
        let w0 = model.params.get("member0/backbone/layer0/q/weight").unwrap();
        for m in 1..model.config.members {
            let wm = model
                .params
                .get(&format!("member{m}/backbone/layer0/q/weight"))
                .unwrap();
            assert_eq!(w0.data(), wm.data());
        }
        assert_ne!(
            model.params.get("member0/head/weight").unwrap().data(),
            model.params.get("member1/head/weight").unwrap().data()
        );
    }

    #[test]
    fn snapshot_plan_matches_worked_schedules() {
        let plan = plan_snapshots(65, 20, 16).unwrap();
        assert_eq!(plan.burn_in, 33);
        assert_eq!(plan.cycle_length, 2);
        assert_eq!(plan.snapshot_epochs.len(), 16);
        assert_eq!(plan.snapshot_epochs[0], 33);
        assert_eq!(*plan.snapshot_epochs.last().unwrap(), 63);

        let plan = plan_snapshots(30, 15, 5).unwrap();
        assert_eq!(plan.burn_in, 15);
        assert_eq!(plan.cycle_length, 3);
        assert_eq!(plan.snapshot_epochs, vec![15, 18, 21, 24, 27]);

        assert!(plan_snapshots(10, 9, 2).is_err());
        assert!(plan_snapshots(10, 10, 2).is_err());
    }

    #[test]
    fn snapshot_burn_in_is_minimal() {
        for total in 2..40usize {
            for requested in 0..total {
                for members in 1..6usize {
                    let plan = plan_snapshots(total, requested, members);
                    let feasible: Vec<usize> = (requested..total)
                        .filter(|b| (total - b) % members == 0 && total - b >= members)
                        .collect();
                    match plan {
                        Ok(p) => assert_eq!(Some(p.burn_in), feasible.first().copied()),
                        Err(_) => assert!(feasible.is_empty(), "({total},{requested},{members})"),
                    }
                }
            }
        }
    }

    #[test]
    fn snapshot_record_and_finalize_round_trip() {
        let mut config = ModelConfig::micro(Method::Snapshot);
        config.members = 2;
        let model = Model::init(config.clone(), 41).unwrap();
        let mut params = model.params.clone();
        record_snapshot(&mut params, 0).unwrap();
        for v in params.get_mut("backbone/patch_embed/weight").unwrap().data_mut() {
            *v += 1.0;
        }
        record_snapshot(&mut params, 1).unwrap();
        assert!(record_snapshot(&mut params, 1).is_err());

        let finalized = finalize_snapshots(&params, 2).unwrap();
        assert!(!finalized.contains("backbone/patch_embed/weight"));
        assert!(!finalized.contains("live/head/weight"));
        let w0 = finalized.get("member0/backbone/patch_embed/weight").unwrap();
        let w1 = finalized.get("member1/backbone/patch_embed/weight").unwrap();
        for (a, b) in w0.data().iter().zip(w1.data()) {
            assert!((b - a - 1.0).abs() < 1e-6);
        }

        let eval_model = Model { config, params: finalized };
        let images = rand_images(2, 43);
        let (l0, _) = eval_model.forward(&images, 2, 0, &mut ForwardMode::Deterministic).unwrap();
        let (l1, _) = eval_model.forward(&images, 2, 1, &mut ForwardMode::Deterministic).unwrap();
        assert_ne!(l0.data(), l1.data());
    }

    #[test]
    fn dropout_free_sampling_collapses_to_one_prediction() {
        let mut config = ModelConfig::micro(Method::McDropout);
        config.dropout_rate = 0.0;
        config.mc_samples = 4;
        let model = Model::init(config, 47).unwrap();
        let images = rand_images(3, 48);
        let preds = predict(&model, &images, &[0, 1, 2], 2, 7, 1.0).unwrap();
        for s in 1..4 {
            assert_eq!(preds.member(0), preds.member(s));
        }
    }

    #[test]
    fn dropout_sampling_is_reproducible_and_diverse() {
        let model = Model::init(ModelConfig::micro(Method::McDropout), 53).unwrap();
        let images = rand_images(3, 54);
        let labels = [0usize, 1, 2];
        let a = predict(&model, &images, &labels, 2, 7, 1.0).unwrap();
        let b = predict(&model, &images, &labels, 2, 7, 1.0).unwrap();
        assert_eq!(a.probs(), b.probs());
        let c = predict(&model, &images, &labels, 2, 8, 1.0).unwrap();
        assert_ne!(a.probs(), c.probs());
        assert_ne!(a.member(0), a.member(1));
    }

    #[test]
    fn dropout_zeroes_expected_fraction_of_units() {
        let mut rng = SplitMix64::new(60);
        let x = Tensor::filled(vec![100, 100], 1.0f32);
        let mut tape: Tape<f32> = Tape::new();
        let xi = tape.leaf(&x);
        let rate = 0.2;
        let out = tape.dropout(xi, rate, &mut rng).unwrap();
        let zeros = tape.value(out).iter().filter(|&&v| v == 0.0).count() as f64;
        let n = 10_000.0;
        let sigma = (n * rate * (1.0 - rate)).sqrt();
        assert!((zeros - n * rate).abs() < 3.0 * sigma, "zeroed {zeros} of {n}");
    }

    #[test]
    fn prediction_rows_are_probability_simplices() {
        let model = Model::init(ModelConfig::micro(Method::Lora), 61).unwrap();
        let images = rand_images(5, 62);
        let preds = predict(&model, &images, &[0, 1, 2, 3, 4], 2, 9, 1.0).unwrap();
        assert_eq!(preds.members(), 8);
        assert_eq!(preds.samples(), 5);
        for m in 0..preds.members() {
            for row in preds.member(m).chunks_exact(preds.classes()) {
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn epinet_parameter_count_matches_materialized_model() {
        let mut config = ModelConfig::micro(Method::Epinet);
        config.members = 3;
        let model = Model::init(config.clone(), 67).unwrap();
        let counts = count_parameters(&config).unwrap();
        assert_eq!(model.params.numel(false), counts.total);
        assert_eq!(model.params.numel(true), counts.trainable);
    }
}
