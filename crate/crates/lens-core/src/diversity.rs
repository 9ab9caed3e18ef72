//! Weight-space and function-space diversity diagnostics: pairwise
//! disagreement and Jensen-Shannon divergence, singular-value spectra with
//! intruder-dimension detection, and the correlation-based diversity score.

use serde::Serialize;
use thiserror::Error;

use crate::backbone::{Model, ModelError};
use crate::ensemble::effective_weight;
use crate::metrics::{argmax_rows, PredictionSet};
use crate::tensor::Tensor;

/// Off-diagonal convergence tolerance for the Jacobi sweeps.
const JACOBI_TOL: f64 = 1e-10;
/// Sweep budget before declaring non-convergence.
const JACOBI_MAX_SWEEPS: usize = 64;
/// Default number of leading singular vectors inspected per matrix.
pub const DEFAULT_TOP_K: usize = 16;
/// A final-state singular vector with no alignment above this against any
/// initial-state vector counts as an intruder dimension.
pub const DEFAULT_INTRUDER_THRESHOLD: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum DiversityError {
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: did not converge after {sweeps} sweeps")]
    NonConvergence { op: &'static str, sweeps: usize },
}

fn invalid(op: &'static str, msg: impl Into<String>) -> DiversityError {
    DiversityError::Invalid { op, msg: msg.into() }
}

/// Thin singular value decomposition `W = U diag(s) V^T` with `r =
/// min(rows, cols)` columns, singular values descending. Columns of `U`/`V`
/// at zero singular values are zero vectors.
pub struct Svd {
    pub rows: usize,
    pub cols: usize,
    /// Column-major `[rows * r]`.
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    /// Column-major `[cols * r]`.
    pub v: Vec<f64>,
}

impl Svd {
    pub fn rank_eps(&self) -> f64 {
        self.s.first().copied().unwrap_or(0.0) * 1e-7
    }

    /// Count of singular values meaningfully above zero.
    pub fn numeric_rank(&self) -> usize {
        let eps = self.rank_eps();
        self.s.iter().filter(|&&x| x > eps).count()
    }

    pub fn left_vector(&self, k: usize) -> &[f64] {
        &self.u[k * self.rows..(k + 1) * self.rows]
    }

    pub fn right_vector(&self, k: usize) -> &[f64] {
        &self.v[k * self.cols..(k + 1) * self.cols]
    }
}

/// One-sided Jacobi SVD in f64. The working matrix is rotated column by
/// column until all column pairs are orthogonal, which handles the small
/// dense matrices produced here without external solvers.
pub fn svd(data: &[f64], rows: usize, cols: usize) -> Result<Svd, DiversityError> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(invalid(
            "svd",
            format!("matrix {rows}x{cols} with buffer of {}", data.len()),
        ));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(invalid("svd", "matrix has non-finite entries"));
    }
    if rows < cols {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = data[i * cols + j];
            }
        }
        let flipped = svd(&t, cols, rows)?;
        return Ok(Svd { rows, cols, u: flipped.v, s: flipped.s, v: flipped.u });
    }

    let r = cols;
    // Column-major working copy of the matrix and accumulated rotations.
    let mut g = vec![0.0f64; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            g[j * rows + i] = data[i * cols + j];
        }
    }
    let mut v = vec![0.0f64; cols * cols];
    for j in 0..cols {
        v[j * cols + j] = 1.0;
    }

    let mut converged = false;
    let mut sweeps = 0;
    while !converged {
        if sweeps >= JACOBI_MAX_SWEEPS {
            return Err(DiversityError::NonConvergence { op: "svd", sweeps });
        }
        sweeps += 1;
        converged = true;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let gp = g[p * rows + i];
                    let gq = g[q * rows + i];
                    alpha += gp * gp;
                    beta += gq * gq;
                    gamma += gp * gq;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let gp = g[p * rows + i];
                    let gq = g[q * rows + i];
                    g[p * rows + i] = c * gp - s * gq;
                    g[q * rows + i] = s * gp + c * gq;
                }
                for i in 0..cols {
                    let vp = v[p * cols + i];
                    let vq = v[q * cols + i];
                    v[p * cols + i] = c * vp - s * vq;
                    v[q * cols + i] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..r).collect();
    let norms: Vec<f64> = (0..r)
        .map(|j| g[j * rows..(j + 1) * rows].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));

    let mut u_out = vec![0.0f64; rows * r];
    let mut v_out = vec![0.0f64; cols * r];
    let mut s_out = vec![0.0f64; r];
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s_out[dst] = sigma;
        if sigma > 0.0 {
            for i in 0..rows {
                u_out[dst * rows + i] = g[src * rows + i] / sigma;
            }
        }
        v_out[dst * cols..(dst + 1) * cols]
            .copy_from_slice(&v[src * cols..(src + 1) * cols]);
    }
    Ok(Svd { rows, cols, u: u_out, s: s_out, v: v_out })
}

/// Singular spectrum of one named weight matrix, keeping the leading
/// `top_k` singular vector pairs (fewer when the numeric rank is lower).
#[derive(Clone, Debug, Serialize)]
pub struct SpectralProfile {
    pub name: String,
    pub singular_values: Vec<f64>,
    pub left_vectors: Vec<Vec<f64>>,
    pub right_vectors: Vec<Vec<f64>>,
}

pub fn spectral_profile(
    name: &str,
    matrix: &Tensor<f32>,
    top_k: usize,
) -> Result<SpectralProfile, DiversityError> {
    let shape = matrix.shape();
    if shape.len() != 2 {
        return Err(invalid("spectral_profile", format!("need a matrix, got shape {shape:?}")));
    }
    let data: Vec<f64> = matrix.data().iter().map(|&x| x as f64).collect();
    let dec = svd(&data, shape[0], shape[1])?;
    let keep = top_k.min(dec.numeric_rank());
    Ok(SpectralProfile {
        name: name.to_string(),
        singular_values: dec.s.clone(),
        left_vectors: (0..keep).map(|k| dec.left_vector(k).to_vec()).collect(),
        right_vectors: (0..keep).map(|k| dec.right_vector(k).to_vec()).collect(),
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Alignment of a trained matrix's leading left singular vectors against
/// the initial matrix's. `similarity[a][b] = |cos(u_final_a, u_init_b)|`;
/// final vector `a` is an intruder when its row maximum stays below the
/// threshold.
#[derive(Clone, Debug, Serialize)]
pub struct IntruderReport {
    pub similarity: Vec<Vec<f64>>,
    pub intruders: Vec<usize>,
}

impl IntruderReport {
    pub fn count(&self) -> usize {
        self.intruders.len()
    }
}

pub fn svd_intruder_analysis(
    w_init: &Tensor<f32>,
    w_final: &Tensor<f32>,
    top_k: usize,
    threshold: f64,
) -> Result<IntruderReport, DiversityError> {
    if w_init.shape() != w_final.shape() {
        return Err(invalid(
            "svd_intruder_analysis",
            format!("shape mismatch {:?} vs {:?}", w_init.shape(), w_final.shape()),
        ));
    }
    let init = spectral_profile("init", w_init, top_k)?;
    let fin = spectral_profile("final", w_final, top_k)?;
    let mut similarity = Vec::with_capacity(fin.left_vectors.len());
    let mut intruders = Vec::new();
    for (a, u_final) in fin.left_vectors.iter().enumerate() {
        let row: Vec<f64> =
            init.left_vectors.iter().map(|u_init| cosine(u_final, u_init).abs()).collect();
        let best = row.iter().cloned().fold(0.0f64, f64::max);
        if best < threshold {
            intruders.push(a);
        }
        similarity.push(row);
    }
    Ok(IntruderReport { similarity, intruders })
}

/// Mean absolute cosine between corresponding-rank top singular vectors of
/// different members, averaged over layers. `members[m]` lists one matrix
/// per layer; every member must supply the same number of layers.
pub fn singular_vector_similarity(
    members: &[Vec<Tensor<f32>>],
    top_k: usize,
) -> Result<Vec<Vec<f64>>, DiversityError> {
    let n = members.len();
    if n < 2 {
        return Err(invalid("singular_vector_similarity", "need at least 2 members"));
    }
    let layers = members[0].len();
    if layers == 0 || members.iter().any(|m| m.len() != layers) {
        return Err(invalid("singular_vector_similarity", "members must share layer count"));
    }
    let profiles: Vec<Vec<SpectralProfile>> = members
        .iter()
        .map(|mats| {
            mats.iter()
                .enumerate()
                .map(|(l, m)| spectral_profile(&format!("layer{l}"), m, top_k))
                .collect::<Result<_, _>>()
        })
        .collect::<Result<_, _>>()?;

    let mut out = vec![vec![1.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut total = 0.0;
            let mut terms = 0usize;
            for l in 0..layers {
                let a = &profiles[i][l];
                let b = &profiles[j][l];
                let k = a.left_vectors.len().min(b.left_vectors.len());
                for rank in 0..k {
                    total += cosine(&a.left_vectors[rank], &b.left_vectors[rank]).abs();
                    terms += 1;
                }
            }
            let mean = if terms == 0 { 0.0 } else { total / terms as f64 };
            out[i][j] = mean;
            out[j][i] = mean;
        }
    }
    Ok(out)
}

/// Pearson correlation of two flattened matrices; `None` when either side
/// has zero variance. Bitwise-identical inputs correlate at exactly one.
fn pearson(x: &[f32], y: &[f32]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let dx = a as f64 - mx;
        let dy = b as f64 - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    if x == y {
        return Some(1.0);
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One minus the mean Pearson correlation over all layer/member-pair
/// combinations of flattened weight updates. Zero-variance pairs are
/// skipped with a warning.
pub fn diversity_score(members: &[Vec<Tensor<f32>>]) -> Result<f64, DiversityError> {
    let n = members.len();
    if n < 2 {
        return Err(invalid("diversity_score", "need at least 2 members"));
    }
    let layers = members[0].len();
    if layers == 0 || members.iter().any(|m| m.len() != layers) {
        return Err(invalid("diversity_score", "members must share layer count"));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            for l in 0..layers {
                match pearson(members[i][l].data(), members[j][l].data()) {
                    Some(r) => {
                        total += r;
                        used += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
    }
    if skipped > 0 {
        log::warn!("diversity_score: skipped {skipped} zero-variance matrix pairs");
    }
    if used == 0 {
        return Err(invalid("diversity_score", "all matrix pairs had zero variance"));
    }
    Ok(1.0 - total / used as f64)
}

/// Jensen-Shannon divergence in nats between two distributions:
/// `0.5 KL(p||m) + 0.5 KL(q||m)` with `m = (p+q)/2` and `0 log 0 = 0`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, DiversityError> {
    check_simplex("jsd", p)?;
    check_simplex("jsd", q)?;
    if p.len() != q.len() {
        return Err(invalid("jsd", "distributions differ in length"));
    }
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).ln();
        }
    }
    Ok(total.max(0.0))
}

fn check_simplex(op: &'static str, p: &[f64]) -> Result<(), DiversityError> {
    if p.is_empty() {
        return Err(invalid(op, "empty distribution"));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(invalid(op, "distribution entries must be finite and nonnegative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(invalid(op, format!("distribution sums to {sum}, not 1")));
    }
    Ok(())
}

/// Fraction of samples where two members' argmax classes differ.
pub fn disagreement_rate(preds_i: &[usize], preds_j: &[usize]) -> Result<f64, DiversityError> {
    if preds_i.len() != preds_j.len() {
        return Err(invalid("disagreement_rate", "prediction lists differ in length"));
    }
    if preds_i.is_empty() {
        return Err(invalid("disagreement_rate", "empty prediction lists"));
    }
    let differ = preds_i.iter().zip(preds_j).filter(|(a, b)| a != b).count();
    Ok(differ as f64 / preds_i.len() as f64)
}

/// Pairwise disagreement over the argmax predictions of every member.
pub fn disagreement_matrix(preds: &PredictionSet) -> Result<Vec<Vec<f64>>, DiversityError> {
    let n = preds.members();
    let labels: Vec<Vec<usize>> = (0..n).map(|m| argmax_rows(preds.member(m), preds.classes())).collect();
    let mut out = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = disagreement_rate(&labels[i], &labels[j])?;
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    Ok(out)
}

/// Each member's mean predictive distribution over the whole set.
pub fn member_mean_distributions(preds: &PredictionSet) -> Vec<Vec<f64>> {
    (0..preds.members())
        .map(|m| {
            let rows = preds.member(m);
            let mut mean = vec![0.0f64; preds.classes()];
            for row in rows.chunks_exact(preds.classes()) {
                for (acc, &p) in mean.iter_mut().zip(row) {
                    *acc += p as f64;
                }
            }
            for v in mean.iter_mut() {
                *v /= preds.samples() as f64;
            }
            mean
        })
        .collect()
}

/// Pairwise JSD between the members' aggregated (mean) softmax
/// distributions over the test set.
pub fn jsd_matrix(preds: &PredictionSet) -> Result<Vec<Vec<f64>>, DiversityError> {
    let dists = member_mean_distributions(preds);
    let n = dists.len();
    let mut out = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = jsd(&dists[i], &dists[j])?;
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    Ok(out)
}

/// Per-member flattened probability matrices (one row of length
/// samples*classes per member) for external embedding tools.
pub fn export_function_space(preds: &PredictionSet) -> Vec<Vec<f32>> {
    (0..preds.members()).map(|m| preds.member(m).to_vec()).collect()
}

/// Per-member, per-layer value-projection updates `W_eff(final) -
/// W_eff(init)`. For adapter methods this recovers the merged low-rank
/// update; for explicit copies, the raw weight delta.
pub fn value_projection_updates(
    init: &Model,
    trained: &Model,
) -> Result<Vec<Vec<Tensor<f32>>>, ModelError> {
    if init.config != trained.config {
        return Err(ModelError::Config(
            "init and trained models must share a configuration".into(),
        ));
    }
    let members = trained.config.members;
    let layers = trained.config.depth;
    let mut out = Vec::with_capacity(members);
    for m in 0..members {
        let mut per_layer = Vec::with_capacity(layers);
        for l in 0..layers {
            let w0 = effective_weight(init, m, l, "v")?;
            let w1 = effective_weight(trained, m, l, "v")?;
            let delta = Tensor::from_fn(w0.shape().to_vec(), |i| w1.data()[i] - w0.data()[i]);
            per_layer.push(delta);
        }
        out.push(per_layer);
    }
    Ok(out)
}

/// Mean cosine similarity between flattened per-layer updates for every
/// member pair.
pub fn weight_cosine_matrix(updates: &[Vec<Tensor<f32>>]) -> Result<Vec<Vec<f64>>, DiversityError> {
    let n = updates.len();
    if n < 2 {
        return Err(invalid("weight_cosine_matrix", "need at least 2 members"));
    }
    let layers = updates[0].len();
    let mut out = vec![vec![1.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut total = 0.0;
            for l in 0..layers {
                let a: Vec<f64> = updates[i][l].data().iter().map(|&x| x as f64).collect();
                let b: Vec<f64> = updates[j][l].data().iter().map(|&x| x as f64).collect();
                total += cosine(&a, &b);
            }
            let mean = total / layers as f64;
            out[i][j] = mean;
            out[j][i] = mean;
        }
    }
    Ok(out)
}

/// Full diagnostic bundle over a trained ensemble and its predictions.
#[derive(Clone, Debug, Serialize)]
pub struct DiversitySummary {
    pub disagreement: Vec<Vec<f64>>,
    pub jsd: Vec<Vec<f64>>,
    /// Intruder dimensions per transformer layer, summed over members.
    pub intruder_counts: Vec<usize>,
    pub diversity_score: Option<f64>,
    pub weight_cosine: Vec<Vec<f64>>,
}

/// Builds the summary from the initial and trained models plus an
/// evaluation prediction set. Weight-space entries cover the value
/// projections of every layer; single-member models report only
/// function-space fields.
pub fn summarize_diversity(
    init: &Model,
    trained: &Model,
    preds: &PredictionSet,
    top_k: usize,
    threshold: f64,
) -> Result<DiversitySummary, ModelError> {
    let members = trained.config.members;
    if preds.members() != crate::ensemble::prediction_members(&trained.config) {
        return Err(ModelError::Config(format!(
            "prediction set has {} members, model evaluates {}",
            preds.members(),
            crate::ensemble::prediction_members(&trained.config)
        )));
    }
    let disagreement = disagreement_matrix(preds).map_err(wrap)?;
    let jsd = jsd_matrix(preds).map_err(wrap)?;

    let layers = trained.config.depth;
    let mut intruder_counts = vec![0usize; layers];
    for l in 0..layers {
        for m in 0..members {
            let w0 = effective_weight(init, m, l, "v")?;
            let w1 = effective_weight(trained, m, l, "v")?;
            let report = svd_intruder_analysis(&w0, &w1, top_k, threshold).map_err(wrap)?;
            intruder_counts[l] += report.count();
        }
    }

    let (diversity, weight_cosine) = if members >= 2 {
        let updates = value_projection_updates(init, trained)?;
        let score = match diversity_score(&updates) {
            Ok(s) => Some(s),
            Err(DiversityError::Invalid { .. }) => None,
            Err(e) => return Err(wrap(e)),
        };
        (score, weight_cosine_matrix(&updates).map_err(wrap)?)
    } else {
        (None, vec![vec![1.0]])
    };

    Ok(DiversitySummary {
        disagreement,
        jsd,
        intruder_counts,
        diversity_score: diversity,
        weight_cosine,
    })
}

fn wrap(e: DiversityError) -> ModelError {
    ModelError::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
        let mut rng = SplitMix64::new(seed);
        (0..rows * cols).map(|_| rng.normal()).collect()
    }

    fn reconstruct(dec: &Svd) -> Vec<f64> {
        let r = dec.s.len();
        let mut out = vec![0.0; dec.rows * dec.cols];
        for k in 0..r {
            for i in 0..dec.rows {
                for j in 0..dec.cols {
                    out[i * dec.cols + j] +=
                        dec.s[k] * dec.u[k * dec.rows + i] * dec.v[k * dec.cols + j];
                }
            }
        }
        out
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        for (rows, cols, seed) in [(8, 5, 1u64), (5, 8, 2), (6, 6, 3)] {
            let a = random_matrix(rows, cols, seed);
            let dec = svd(&a, rows, cols).unwrap();
            let back = reconstruct(&dec);
            for (x, y) in a.iter().zip(&back) {
                assert!((x - y).abs() < 1e-10, "{rows}x{cols}: {x} vs {y}");
            }
            for w in dec.s.windows(2) {
                assert!(w[0] >= w[1]);
                assert!(w[1] >= 0.0);
            }
            let r = dec.s.len();
            for a in 0..r {
                for b in a..r {
                    let dot: f64 = dec
                        .left_vector(a)
                        .iter()
                        .zip(dec.left_vector(b))
                        .map(|(x, y)| x * y)
                        .sum();
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-6, "u{a}.u{b} = {dot}");
                }
            }
        }
    }

    #[test]
    fn svd_two_by_two_hand_values() {
        let dec = svd(&[3.0, 0.0, 4.0, 5.0], 2, 2).unwrap();
        assert!((dec.s[0] - 45f64.sqrt()).abs() < 1e-10);
        assert!((dec.s[1] - 5f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn svd_diagonal_and_rank_one() {
        let dec = svd(&[3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0], 3, 3).unwrap();
        assert_eq!(dec.s, vec![3.0, 2.0, 1.0]);

        let u = [1.0, 2.0, 2.0];
        let v = [0.6, 0.8];
        let mut a = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                a[i * 2 + j] = 4.0 * u[i] * v[j];
            }
        }
        let dec = svd(&a, 3, 2).unwrap();
        assert!((dec.s[0] - 12.0).abs() < 1e-10, "3*1*4 = {}", dec.s[0]);
        assert!(dec.s[1].abs() < 1e-10);
        assert_eq!(dec.numeric_rank(), 1);
    }

    #[test]
    fn jsd_hand_values_and_symmetry() {
        assert!(jsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap().abs() < 1e-15);
        let max = jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((max - std::f64::consts::LN_2).abs() < 1e-12);

        let mut rng = SplitMix64::new(7);
        for _ in 0..50 {
            let mut p = [0.0f64; 4];
            let mut q = [0.0f64; 4];
            for i in 0..4 {
                p[i] = rng.uniform(0.01, 1.0);
                q[i] = rng.uniform(0.01, 1.0);
            }
            let sp: f64 = p.iter().sum();
            let sq: f64 = q.iter().sum();
            p.iter_mut().for_each(|x| *x /= sp);
            q.iter_mut().for_each(|x| *x /= sq);
            let ab = jsd(&p, &q).unwrap();
            let ba = jsd(&q, &p).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&ab));
        }

        assert!(jsd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(jsd(&[1.2, -0.2], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn disagreement_hand_cases() {
        assert_eq!(disagreement_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(disagreement_rate(&[1, 2, 3], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(disagreement_rate(&[1, 2, 3, 4], &[1, 2, 0, 0]).unwrap(), 0.5);
        assert!(disagreement_rate(&[1], &[1, 2]).is_err());
    }

    fn tensor_from(rows: usize, cols: usize, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn intruder_analysis_identity_and_scaling() {
        let data: Vec<f32> = random_matrix(16, 16, 11).iter().map(|&x| x as f32).collect();
        let w = tensor_from(16, 16, data.clone());
        let report = svd_intruder_analysis(&w, &w, 8, DEFAULT_INTRUDER_THRESHOLD).unwrap();
        assert_eq!(report.count(), 0);
        for (a, row) in report.similarity.iter().enumerate() {
            assert!((row[a] - 1.0).abs() < 1e-6, "diagonal {a} = {}", row[a]);
        }

        let doubled = tensor_from(16, 16, data.iter().map(|&x| 2.0 * x).collect());
        let report = svd_intruder_analysis(&w, &doubled, 8, DEFAULT_INTRUDER_THRESHOLD).unwrap();
        assert_eq!(report.count(), 0);
    }

    #[test]
    fn intruder_analysis_detects_planted_spike() {
        let d = 16;
        let mut init = vec![0.0f32; d * d];
        for i in 0..8 {
            init[i * d + i] = 1.0 - i as f32 * 0.05;
        }
        let w_init = tensor_from(d, d, init.clone());
        let mut fin = init;
        fin[10 * d + 10] += 5.0;
        let w_final = tensor_from(d, d, fin);
        let report = svd_intruder_analysis(&w_init, &w_final, 8, DEFAULT_INTRUDER_THRESHOLD).unwrap();
        assert!(report.count() >= 1, "similarity {:?}", report.similarity);
        assert!(report.intruders.contains(&0), "spike dominates the spectrum");
    }

    #[test]
    fn singular_similarity_identity_and_sign_flip() {
        let data: Vec<f32> = random_matrix(12, 12, 21).iter().map(|&x| x as f32).collect();
        let w = tensor_from(12, 12, data.clone());
        let flipped = tensor_from(12, 12, data.iter().map(|&x| -x).collect());
        let sim = singular_vector_similarity(
            &[vec![w.clone()], vec![w.clone()], vec![flipped]],
            6,
        )
        .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((sim[i][j] - 1.0).abs() < 1e-6, "sim[{i}][{j}] = {}", sim[i][j]);
            }
        }
    }

    #[test]
    fn singular_similarity_low_for_orthogonal_spikes() {
        let d = 12;
        let mut a = vec![0.0f32; d * d];
        let mut b = vec![0.0f32; d * d];
        a[0] = 10.0;
        b[5 * d + 5] = 10.0;
        let sim = singular_vector_similarity(
            &[vec![tensor_from(d, d, a)], vec![tensor_from(d, d, b)]],
            4,
        )
        .unwrap();
        assert!(sim[0][1] < 0.1, "orthogonal spikes should not align: {}", sim[0][1]);
    }

    #[test]
    fn diversity_score_identical_zero_and_random_near_one() {
        let data: Vec<f32> = random_matrix(20, 20, 31).iter().map(|&x| x as f32).collect();
        let w = tensor_from(20, 20, data);
        let score = diversity_score(&[vec![w.clone()], vec![w.clone()]]).unwrap();
        assert_eq!(score, 0.0);

        let members: Vec<Vec<Tensor<f32>>> = (0..3)
            .map(|m| {
                vec![tensor_from(
                    40,
                    40,
                    random_matrix(40, 40, 100 + m).iter().map(|&x| x as f32).collect(),
                )]
            })
            .collect();
        let score = diversity_score(&members).unwrap();
        assert!((score - 1.0).abs() < 0.15, "independent members: {score}");

        let mut reordered = members.clone();
        reordered.rotate_left(1);
        let score2 = diversity_score(&reordered).unwrap();
        assert!((score - score2).abs() < 1e-12);
    }

    #[test]
    fn diversity_score_skips_zero_variance() {
        let flat = tensor_from(4, 4, vec![0.5; 16]);
        let data: Vec<f32> = random_matrix(4, 4, 41).iter().map(|&x| x as f32).collect();
        let varied = tensor_from(4, 4, data.clone());
        let other = tensor_from(4, 4, data.iter().map(|&x| x + 0.2 * x * x).collect());
        let score =
            diversity_score(&[vec![flat.clone()], vec![varied], vec![other]]).unwrap();
        assert!(score.is_finite());
        assert!(diversity_score(&[vec![flat.clone()], vec![flat]]).is_err());
    }

    fn toy_predictions(members: usize) -> PredictionSet {
        let mut rng = SplitMix64::new(5);
        let samples = 6;
        let classes = 3;
        let mut probs = Vec::new();
        for _ in 0..members * samples {
            let mut row: Vec<f32> = (0..classes).map(|_| rng.uniform(0.05, 1.0) as f32).collect();
            let s: f32 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            probs.extend(row);
        }
        let labels = vec![0usize; samples];
        PredictionSet::new(members, samples, classes, probs, labels).unwrap()
    }

    #[test]
    fn jsd_matrix_symmetric_zero_diagonal() {
        let preds = toy_predictions(3);
        let m = jsd_matrix(&preds).unwrap();
        for i in 0..3 {
            assert_eq!(m[i][i], 0.0);
            for j in 0..3 {
                assert!((m[i][j] - m[j][i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn export_rows_match_member_probabilities() {
        let preds = toy_predictions(2);
        let rows = export_function_space(&preds);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].len(), preds.samples() * preds.classes());
        assert_eq!(rows[0], preds.member(0));
        assert_eq!(rows[1], preds.member(1));
    }

    #[test]
    fn lora_updates_have_rank_bounded_by_adapter() {
        use crate::backbone::{Method, Model, ModelConfig};
        let config = ModelConfig::micro(Method::Lora);
        let init = Model::init(config.clone(), 9).unwrap();
        let mut trained = Model::init(config, 9).unwrap();
        let mut rng = SplitMix64::new(17);
        for m in 0..trained.config.members {
            for l in 0..trained.config.depth {
                let b = trained
                    .params
                    .get_mut(&format!("member{m}/layer{l}/v/B"))
                    .unwrap();
                for x in b.data_mut() {
                    *x = rng.normal() as f32 * 0.1;
                }
            }
        }
        let updates = value_projection_updates(&init, &trained).unwrap();
        let rank = trained.config.rank;
        for per_layer in &updates {
            for delta in per_layer {
                let data: Vec<f64> = delta.data().iter().map(|&x| x as f64).collect();
                let dec = svd(&data, delta.shape()[0], delta.shape()[1]).unwrap();
                assert!(dec.numeric_rank() <= rank, "rank {} > {rank}", dec.numeric_rank());
                assert!(dec.s[0] > 0.0);
            }
        }
        let score = diversity_score(&updates).unwrap();
        assert!(score > 0.5, "independent adapters should decorrelate: {score}");
    }

    #[test]
    fn svd_rejects_bad_input() {
        assert!(svd(&[1.0, f64::NAN], 1, 2).is_err());
        assert!(svd(&[1.0], 2, 2).is_err());
    }
}
