//! Penultimate-embedding extraction and 2-D projection: PCA by iterated
//! deflation, exact t-SNE with early exaggeration, and a scalar score for
//! numerosity-ordered cluster structure.

use serde::{Deserialize, Serialize};

use crate::harness::TrainedNetwork;
use crate::models::{Family, ModelError};
use crate::rng;
use crate::scalar::Scalar;
use crate::stats::spearman_rho;
use crate::stimgen::{Dataset, Image, StimulusCategory};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("degenerate input: all points identical")]
    DegenerateInput,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Penultimate activations for a scanned dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingSet {
    /// Row-major [rows × dim].
    pub matrix: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    pub labels: Vec<u8>,
    pub family: Family,
    pub train_category: StimulusCategory,
    pub test_category: StimulusCategory,
    pub seed: u64,
}

/// Forward-pass the dataset and collect penultimate activations; labels are
/// the stimulus numerosities.
pub fn extract_embeddings(
    run: &TrainedNetwork,
    dataset: &Dataset,
) -> Result<EmbeddingSet, EmbedError> {
    let dim = run.network.config.embedding_dim();
    let mut matrix = Vec::with_capacity(dataset.len() * dim);
    let mut labels = Vec::with_capacity(dataset.len());
    for chunk in dataset.items.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|i| &i.image).collect();
        let (_, emb) = run.network.infer(&images)?;
        debug_assert_eq!(emb.shape()[1], dim);
        matrix.extend_from_slice(emb.data());
        labels.extend(chunk.iter().map(|i| i.numerosity));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::InvalidInput("non-finite embedding".into()));
    }
    Ok(EmbeddingSet {
        matrix,
        rows: dataset.len(),
        dim,
        labels,
        family: run.network.family(),
        train_category: StimulusCategory::ConstSize,
        test_category: dataset.category(),
        seed: run.seed,
    })
}

/// Principal-component scores and explained-variance fractions.
#[derive(Debug, Clone)]
pub struct PcaResult<S> {
    /// Row-major [rows × k].
    pub scores: Vec<S>,
    /// Row-major [k × dim] orthonormal components.
    pub components: Vec<S>,
    pub explained: Vec<f64>,
    pub rows: usize,
    pub k: usize,
    /// Fewer informative components than requested.
    pub rank_deficient: bool,
}

/// PCA via power iteration with deflation on the covariance matrix.
/// Returns however many informative components exist (flagged when fewer
/// than `k`).
pub fn pca_project<S: Scalar>(
    x: &[S],
    rows: usize,
    dim: usize,
    k: usize,
) -> Result<PcaResult<S>, EmbedError> {
    if rows * dim != x.len() || k == 0 || rows <= k {
        return Err(EmbedError::InvalidInput(format!(
            "rows {rows} dim {dim} k {k} len {}",
            x.len()
        )));
    }
    // center columns
    let mut centered = x.to_vec();
    for j in 0..dim {
        let mut mean = S::zero();
        for i in 0..rows {
            mean = mean + centered[i * dim + j];
        }
        mean = mean / S::cast(rows as f64);
        for i in 0..rows {
            centered[i * dim + j] = centered[i * dim + j] - mean;
        }
    }
    // covariance (population normalization)
    let inv_rows = S::cast(1.0 / rows as f64);
    let mut cov = vec![S::zero(); dim * dim];
    for row in centered.chunks_exact(dim) {
        for (a, &va) in row.iter().enumerate() {
            let dst = &mut cov[a * dim..(a + 1) * dim];
            for (d, &vb) in dst.iter_mut().zip(row) {
                *d = *d + va * vb;
            }
        }
    }
    for v in cov.iter_mut() {
        *v = *v * inv_rows;
    }
    let trace: S = (0..dim).map(|i| cov[i * dim + i]).sum();
    if trace <= S::zero() {
        return Err(EmbedError::DegenerateInput);
    }
    let floor = trace * S::cast(1e-12);

    let mut components = Vec::with_capacity(k * dim);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut deflated = cov;
    let mut found = 0usize;
    for comp in 0..k {
        let mut v: Vec<S> = {
            let mut stream = rng::stream(0x9CA, &[comp as u64]);
            (0..dim)
                .map(|_| S::cast(rng::standard_normal(&mut stream)))
                .collect()
        };
        normalize(&mut v);
        let mut lambda = S::zero();
        for _ in 0..10_000 {
            let mut next = vec![S::zero(); dim];
            for (i, row) in deflated.chunks_exact(dim).enumerate() {
                let mut acc = S::zero();
                for (&m, &vv) in row.iter().zip(&v) {
                    acc = acc + m * vv;
                }
                next[i] = acc;
            }
            let norm = normalize(&mut next);
            let delta = v
                .iter()
                .zip(&next)
                .map(|(&a, &b)| (a - b).abs())
                .fold(S::zero(), S::max);
            // sign-flipped convergence also counts
            let delta_neg = v
                .iter()
                .zip(&next)
                .map(|(&a, &b)| (a + b).abs())
                .fold(S::zero(), S::max);
            v = next;
            lambda = norm;
            if delta.min(delta_neg) < S::cast(1e-14) {
                break;
            }
        }
        if lambda <= floor {
            break;
        }
        // deflate: C <- C − λ v vᵀ
        for a in 0..dim {
            for b in 0..dim {
                deflated[a * dim + b] = deflated[a * dim + b] - lambda * v[a] * v[b];
            }
        }
        components.extend_from_slice(&v);
        eigenvalues.push(lambda);
        found += 1;
    }
    if found == 0 {
        return Err(EmbedError::DegenerateInput);
    }
    let mut scores = vec![S::zero(); rows * found];
    for (i, row) in centered.chunks_exact(dim).enumerate() {
        for c in 0..found {
            let comp = &components[c * dim..(c + 1) * dim];
            let mut acc = S::zero();
            for (&a, &b) in row.iter().zip(comp) {
                acc = acc + a * b;
            }
            scores[i * found + c] = acc;
        }
    }
    let explained = eigenvalues
        .iter()
        .map(|&l| (l / trace).as_f64())
        .collect();
    Ok(PcaResult {
        scores,
        components,
        explained,
        rows,
        k: found,
        rank_deficient: found < k,
    })
}

fn normalize<S: Scalar>(v: &mut [S]) -> S {
    let norm = v.iter().map(|&x| x * x).sum::<S>().sqrt();
    if norm > S::zero() {
        for x in v.iter_mut() {
            *x = *x / norm;
        }
    }
    norm
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    /// PCA pre-reduction width applied before the pairwise affinities.
    pub pca_dims: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            pca_dims: 50,
            seed: 0x75e,
        }
    }
}

/// 2-D embedding with its objective trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Projection2D {
    /// Row-major [rows × 2], centered.
    pub points: Vec<f64>,
    pub rows: usize,
    pub method: String,
    /// KL(P‖Q) against the unexaggerated affinities, recorded per iteration.
    pub kl_trace: Vec<f64>,
    pub final_kl: f64,
}

/// Exact (all-pairs) t-SNE on PCA-reduced input.
///
/// Per-point bandwidths are bisection-tuned to the target perplexity; the
/// first `exaggeration_iters` iterations scale P by `early_exaggeration` and
/// use momentum with adaptive gains. After the exaggeration phase each step
/// is accepted only if the true KL objective does not increase (momentum is
/// shed and the step halved otherwise), so the recorded trace is
/// non-increasing from there on.
pub fn tsne_project<S: Scalar>(
    x: &[S],
    rows: usize,
    dim: usize,
    config: &TsneConfig,
) -> Result<Projection2D, EmbedError> {
    if rows * dim != x.len() {
        return Err(EmbedError::InvalidInput(format!(
            "rows {rows} dim {dim} len {}",
            x.len()
        )));
    }
    if rows < 4 {
        return Err(EmbedError::InvalidInput("need at least 4 points".into()));
    }
    let all_same = x
        .chunks_exact(dim)
        .all(|row| row == &x[0..dim]);
    if all_same {
        return Err(EmbedError::DegenerateInput);
    }

    // PCA pre-reduction
    let k = config.pca_dims.min(dim).min(rows - 1).max(1);
    let (reduced, rdim, method) = if k < dim {
        let pca = pca_project(x, rows, dim, k)?;
        let data: Vec<f64> = pca.scores.iter().map(|&v| v.as_f64()).collect();
        (data, pca.k, "pca+tsne".to_string())
    } else {
        (
            x.iter().map(|&v| v.as_f64()).collect(),
            dim,
            "tsne".to_string(),
        )
    };

    let p = joint_affinities(&reduced, rows, rdim, config.perplexity);

    // init near the origin
    let mut y = {
        let mut stream = rng::stream(config.seed, &[rows as u64]);
        (0..rows * 2)
            .map(|_| rng::standard_normal(&mut stream) * 1e-4)
            .collect::<Vec<f64>>()
    };
    let mut velocity = vec![0.0f64; rows * 2];
    let mut gains = vec![1.0f64; rows * 2];
    let mut kl_trace = Vec::with_capacity(config.iterations);
    let mut grad = vec![0.0f64; rows * 2];

    let mut kl_prev = kl_objective(&p, &y, rows);
    for iter in 0..config.iterations {
        let exaggerating = iter < config.exaggeration_iters;
        let p_scale = if exaggerating {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if exaggerating { 0.5 } else { 0.8 };
        tsne_gradient(&p, p_scale, &y, rows, &mut grad);

        if exaggerating {
            for i in 0..rows * 2 {
                gains[i] = if grad[i].signum() != velocity[i].signum() {
                    gains[i] + 0.2
                } else {
                    (gains[i] * 0.8).max(0.01)
                };
                velocity[i] = momentum * velocity[i] - config.learning_rate * gains[i] * grad[i];
                y[i] += velocity[i];
            }
            center(&mut y, rows);
            kl_prev = kl_objective(&p, &y, rows);
            kl_trace.push(kl_prev);
            continue;
        }

        // refinement phase: momentum step, backtracking to keep KL
        // non-increasing
        let y_before = y.clone();
        for i in 0..rows * 2 {
            gains[i] = if grad[i].signum() != velocity[i].signum() {
                gains[i] + 0.2
            } else {
                (gains[i] * 0.8).max(0.01)
            };
            velocity[i] = momentum * velocity[i] - config.learning_rate * gains[i] * grad[i];
            y[i] += velocity[i];
        }
        center(&mut y, rows);
        let mut kl_new = kl_objective(&p, &y, rows);
        if kl_new > kl_prev {
            // shed momentum and halve a plain gradient step until the
            // objective stops increasing
            let mut step = config.learning_rate;
            let mut accepted = false;
            for _ in 0..50 {
                for i in 0..rows * 2 {
                    y[i] = y_before[i] - step * grad[i];
                }
                center(&mut y, rows);
                kl_new = kl_objective(&p, &y, rows);
                if kl_new <= kl_prev {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                // local minimum at this resolution: hold position
                y.copy_from_slice(&y_before);
                kl_new = kl_prev;
            }
            for v in velocity.iter_mut() {
                *v = 0.0;
            }
        }
        kl_prev = kl_new;
        kl_trace.push(kl_prev);
    }

    center(&mut y, rows);
    Ok(Projection2D {
        points: y,
        rows,
        method,
        final_kl: kl_prev,
        kl_trace,
    })
}

/// Symmetrized affinities with per-point bandwidths bisection-tuned so each
/// conditional distribution has entropy log(perplexity).
fn joint_affinities(x: &[f64], rows: usize, dim: usize, perplexity: f64) -> Vec<f64> {
    let target_entropy = perplexity.max(1.01).ln();
    let mut d2 = vec![0.0f64; rows * rows];
    for i in 0..rows {
        for j in (i + 1)..rows {
            let mut acc = 0.0;
            for t in 0..dim {
                let diff = x[i * dim + t] - x[j * dim + t];
                acc += diff * diff;
            }
            d2[i * rows + j] = acc;
            d2[j * rows + i] = acc;
        }
    }
    let mut p = vec![0.0f64; rows * rows];
    for i in 0..rows {
        let mut beta = 1.0f64;
        let mut beta_lo = 0.0f64;
        let mut beta_hi = f64::INFINITY;
        let row = &d2[i * rows..(i + 1) * rows];
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut sum_dp = 0.0;
            for (j, &dist) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                let e = (-beta * dist).exp();
                sum += e;
                sum_dp += dist * e;
            }
            if sum <= 0.0 {
                beta_hi = beta;
                beta = 0.5 * (beta_lo + beta_hi);
                continue;
            }
            // H = ln(sum) + beta * E[d]
            let entropy = sum.ln() + beta * sum_dp / sum;
            if (entropy - target_entropy).abs() < 1e-7 {
                break;
            }
            if entropy > target_entropy {
                beta_lo = beta;
                beta = if beta_hi.is_finite() {
                    0.5 * (beta_lo + beta_hi)
                } else {
                    beta * 2.0
                };
            } else {
                beta_hi = beta;
                beta = 0.5 * (beta_lo + beta_hi);
            }
        }
        let mut sum = 0.0;
        for (j, &dist) in row.iter().enumerate() {
            if j != i {
                let e = (-beta * dist).exp();
                p[i * rows + j] = e;
                sum += e;
            }
        }
        if sum > 0.0 {
            for j in 0..rows {
                p[i * rows + j] /= sum;
            }
        }
    }
    // symmetrize and normalize to a joint distribution
    let mut joint = vec![0.0f64; rows * rows];
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..rows {
            let v = 0.5 * (p[i * rows + j] + p[j * rows + i]);
            joint[i * rows + j] = v;
            total += v;
        }
    }
    for v in joint.iter_mut() {
        *v = (*v / total).max(1e-12);
    }
    for i in 0..rows {
        joint[i * rows + i] = 0.0;
    }
    joint
}

fn tsne_gradient(p: &[f64], p_scale: f64, y: &[f64], rows: usize, grad: &mut [f64]) {
    let mut w = vec![0.0f64; rows * rows];
    let mut z = 0.0f64;
    for i in 0..rows {
        for j in (i + 1)..rows {
            let dx = y[i * 2] - y[j * 2];
            let dy = y[i * 2 + 1] - y[j * 2 + 1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * rows + j] = v;
            w[j * rows + i] = v;
            z += 2.0 * v;
        }
    }
    for g in grad.iter_mut() {
        *g = 0.0;
    }
    for i in 0..rows {
        for j in 0..rows {
            if i == j {
                continue;
            }
            let v = w[i * rows + j];
            let q = (v / z).max(1e-12);
            let mult = (p_scale * p[i * rows + j] - q) * v;
            let dx = y[i * 2] - y[j * 2];
            let dy = y[i * 2 + 1] - y[j * 2 + 1];
            grad[i * 2] += 4.0 * mult * dx;
            grad[i * 2 + 1] += 4.0 * mult * dy;
        }
    }
}

/// KL(P‖Q) with the true (unexaggerated) P.
fn kl_objective(p: &[f64], y: &[f64], rows: usize) -> f64 {
    let mut z = 0.0f64;
    let mut w = vec![0.0f64; rows * rows];
    for i in 0..rows {
        for j in (i + 1)..rows {
            let dx = y[i * 2] - y[j * 2];
            let dy = y[i * 2 + 1] - y[j * 2 + 1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * rows + j] = v;
            w[j * rows + i] = v;
            z += 2.0 * v;
        }
    }
    let mut kl = 0.0;
    for i in 0..rows {
        for j in 0..rows {
            if i == j {
                continue;
            }
            let pij = p[i * rows + j];
            if pij > 0.0 {
                let q = (w[i * rows + j] / z).max(1e-12);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

fn center(y: &mut [f64], rows: usize) {
    let mut mx = 0.0;
    let mut my = 0.0;
    for i in 0..rows {
        mx += y[i * 2];
        my += y[i * 2 + 1];
    }
    mx /= rows as f64;
    my /= rows as f64;
    for i in 0..rows {
        y[i * 2] -= mx;
        y[i * 2 + 1] -= my;
    }
}

/// Cluster-structure score for a labeled 2-D projection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OrderingScore {
    /// Mean silhouette over points, treating numerosity as the cluster id.
    pub silhouette: f64,
    /// Spearman correlation between numerosity and centroid position along
    /// the first principal axis of the centroids. Sign reflects direction;
    /// take the magnitude for "is there an ordering".
    pub centroid_order_rho: f64,
}

pub fn ordering_score(points: &[f64], labels: &[u8]) -> Result<OrderingScore, EmbedError> {
    let rows = labels.len();
    if points.len() != rows * 2 {
        return Err(EmbedError::InvalidInput(format!(
            "{} coordinates for {rows} labels",
            points.len()
        )));
    }
    let mut distinct: Vec<u8> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(EmbedError::InvalidInput(
            "need at least two distinct labels".into(),
        ));
    }

    // mean silhouette
    let dist = |a: usize, b: usize| {
        let dx = points[a * 2] - points[b * 2];
        let dy = points[a * 2 + 1] - points[b * 2 + 1];
        (dx * dx + dy * dy).sqrt()
    };
    let mut silhouette_sum = 0.0;
    for i in 0..rows {
        let mut same_sum = 0.0;
        let mut same_count = 0usize;
        let mut other: std::collections::BTreeMap<u8, (f64, usize)> = Default::default();
        for j in 0..rows {
            if i == j {
                continue;
            }
            if labels[j] == labels[i] {
                same_sum += dist(i, j);
                same_count += 1;
            } else {
                let e = other.entry(labels[j]).or_insert((0.0, 0));
                e.0 += dist(i, j);
                e.1 += 1;
            }
        }
        if same_count == 0 || other.is_empty() {
            continue; // singleton cluster contributes 0
        }
        let a = same_sum / same_count as f64;
        let b = other
            .values()
            .map(|(s, c)| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        silhouette_sum += (b - a) / a.max(b);
    }
    let silhouette = silhouette_sum / rows as f64;

    // centroid ordering along the centroids' first principal axis
    let mut centroids = Vec::with_capacity(distinct.len() * 2);
    for &label in &distinct {
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut count = 0usize;
        for i in 0..rows {
            if labels[i] == label {
                cx += points[i * 2];
                cy += points[i * 2 + 1];
                count += 1;
            }
        }
        centroids.push(cx / count as f64);
        centroids.push(cy / count as f64);
    }
    let pca = pca_project(&centroids, distinct.len(), 2, 1)?;
    let positions: Vec<f64> = (0..distinct.len()).map(|i| pca.scores[i]).collect();
    let label_values: Vec<f64> = distinct.iter().map(|&l| f64::from(l)).collect();
    let centroid_order_rho = spearman_rho(&label_values, &positions);
    Ok(OrderingScore {
        silhouette,
        centroid_order_rho,
    })
}

/// Projection CSV with numerosity labels.
pub fn projection_csv(projection: &Projection2D, labels: &[u8], category: StimulusCategory) -> String {
    let mut out = String::from("x,y,numerosity,category\n");
    for (i, &label) in labels.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            projection.points[i * 2],
            projection.points[i * 2 + 1],
            label,
            category
        ));
    }
    out
}
