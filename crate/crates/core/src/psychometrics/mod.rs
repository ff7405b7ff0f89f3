//! From trained networks' responses to psychometric curves, anchor error
//! tables, curve-shape taxonomy, and cross-stimulus transfer matrices.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::harness::TrainedNetwork;
use crate::models::{Family, ModelError, Network, MANY_CLASS};
use crate::rng;
use crate::stats::{spearman_rho, GroupSamples};
use crate::stimgen::{Dataset, Image, StimulusCategory, ALL_NUMEROSITIES};

#[derive(Debug, thiserror::Error)]
pub enum PsychError {
    #[error("empty sample")]
    EmptySample,
    #[error("records missing numerosity {0}")]
    MissingNumerosity(u8),
    #[error("degenerate fit: curve is constant")]
    DegenerateFit,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One network response to one test image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub family: Family,
    pub seed: u64,
    pub train_category: StimulusCategory,
    pub test_category: StimulusCategory,
    pub numerosity: u8,
    pub image_index: u32,
    pub p_many: f64,
    /// `p_many > 0.5`; exact ties resolve to few.
    pub predicted_many: bool,
}

impl ResponseRecord {
    /// Stable identifier of the producing model.
    pub fn model_id(&self) -> String {
        format!("{}-{}-s{}", self.family, self.train_category, self.seed)
    }
}

/// Provenance attached to a batch of responses.
#[derive(Debug, Clone, Copy)]
pub struct RecordMeta {
    pub family: Family,
    pub seed: u64,
    pub train_category: StimulusCategory,
}

/// Classify every image in the dataset; p_many is the softmax probability of
/// the many class.
pub fn classify_batch(
    network: &Network<f64>,
    dataset: &Dataset,
    meta: RecordMeta,
) -> Result<Vec<ResponseRecord>, PsychError> {
    let mut records = Vec::with_capacity(dataset.len());
    for chunk in dataset.items.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|i| &i.image).collect();
        let (logits, _) = network.infer(&images)?;
        for (row, item) in chunk.iter().enumerate() {
            let l = logits.row(row);
            let many = l[MANY_CLASS];
            let few = l[1 - MANY_CLASS];
            let max = many.max(few);
            let e_many = (many - max).exp();
            let e_few = (few - max).exp();
            let p_many = e_many / (e_many + e_few);
            records.push(ResponseRecord {
                family: meta.family,
                seed: meta.seed,
                train_category: meta.train_category,
                test_category: item.category,
                numerosity: item.numerosity,
                image_index: item.index,
                p_many,
                predicted_many: p_many > 0.5,
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            level: 0.95,
            resamples: 1000,
            seed: 0xb007,
        }
    }
}

/// Percentile bootstrap interval for the mean of `samples`.
pub fn bootstrap_ci(samples: &[f64], config: &BootstrapConfig) -> Result<(f64, f64), PsychError> {
    if samples.is_empty() {
        return Err(PsychError::EmptySample);
    }
    if !(0.0..1.0).contains(&config.level) || config.resamples == 0 {
        return Err(PsychError::InvalidInput(format!(
            "level {} resamples {}",
            config.level, config.resamples
        )));
    }
    let n = samples.len();
    let mut stream = rng::stream(config.seed, &[n as u64]);
    let mut means = Vec::with_capacity(config.resamples);
    for _ in 0..config.resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += samples[stream.gen_range(0..n)];
        }
        means.push(sum / n as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let alpha = (1.0 - config.level) / 2.0;
    Ok((percentile(&means, alpha), percentile(&means, 1.0 - alpha)))
}

/// Linear-interpolated percentile of sorted data, q in [0,1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub numerosity: u8,
    pub proportion_many: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub samples: usize,
}

/// Proportion of many responses per numerosity, with bootstrap CIs, pooled
/// over images and seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsychometricCurve {
    pub points: Vec<CurvePoint>,
    pub family: Family,
    pub train_category: StimulusCategory,
    pub test_category: StimulusCategory,
    pub seeds: Vec<u64>,
}

impl PsychometricCurve {
    pub fn proportions(&self) -> [f64; 7] {
        let mut out = [0.0; 7];
        for p in &self.points {
            out[(p.numerosity - 1) as usize] = p.proportion_many;
        }
        out
    }
}

/// Build the 7-point curve from records covering numerosities 1..=7.
pub fn psychometric_curve(
    records: &[ResponseRecord],
    bootstrap: &BootstrapConfig,
) -> Result<PsychometricCurve, PsychError> {
    if records.is_empty() {
        return Err(PsychError::EmptySample);
    }
    let mut by_n: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_n.entry(r.numerosity)
            .or_default()
            .push(f64::from(r.predicted_many));
    }
    let mut points = Vec::with_capacity(7);
    for n in ALL_NUMEROSITIES {
        let outcomes = by_n
            .get(&n)
            .ok_or(PsychError::MissingNumerosity(n))?;
        let mean = outcomes.iter().sum::<f64>() / outcomes.len() as f64;
        let cfg = BootstrapConfig {
            seed: rng::derive_seed(bootstrap.seed, &[u64::from(n)]),
            ..*bootstrap
        };
        let (lo, hi) = bootstrap_ci(outcomes, &cfg)?;
        points.push(CurvePoint {
            numerosity: n,
            proportion_many: mean,
            ci_low: lo.min(mean),
            ci_high: hi.max(mean),
            samples: outcomes.len(),
        });
    }
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let first = &records[0];
    Ok(PsychometricCurve {
        points,
        family: first.family,
        train_category: first.train_category,
        test_category: first.test_category,
        seeds,
    })
}

/// Anchor misclassification percentages: few-as-many, many-as-few, and their
/// class-balanced mean.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnchorErrors {
    pub few_error_pct: f64,
    pub many_error_pct: f64,
    pub total_error_pct: f64,
}

pub fn anchor_error_rates(records: &[ResponseRecord]) -> Result<AnchorErrors, PsychError> {
    let mut few_total = 0usize;
    let mut few_wrong = 0usize;
    let mut many_total = 0usize;
    let mut many_wrong = 0usize;
    for r in records {
        match r.numerosity {
            1 | 2 => {
                few_total += 1;
                if r.predicted_many {
                    few_wrong += 1;
                }
            }
            6 | 7 => {
                many_total += 1;
                if !r.predicted_many {
                    many_wrong += 1;
                }
            }
            _ => {}
        }
    }
    for (n, total) in [(1u8, few_total), (6u8, many_total)] {
        if total == 0 {
            return Err(PsychError::MissingNumerosity(n));
        }
    }
    let few_error_pct = 100.0 * few_wrong as f64 / few_total as f64;
    let many_error_pct = 100.0 * many_wrong as f64 / many_total as f64;
    Ok(AnchorErrors {
        few_error_pct,
        many_error_pct,
        total_error_pct: 0.5 * (few_error_pct + many_error_pct),
    })
}

/// Least-squares logistic fit of a 7-point curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Numerosity at which the fitted curve crosses 0.5.
    pub midpoint: f64,
    pub spread: f64,
    /// Sum of squared residuals at the optimum.
    pub residual: f64,
}

fn logistic(n: f64, mu: f64, sigma: f64) -> f64 {
    1.0 / (1.0 + (-(n - mu) / sigma).exp())
}

fn sse(points: &[f64; 7], mu: f64, sigma: f64) -> f64 {
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let n = (i + 1) as f64;
            let e = logistic(n, mu, sigma) - p;
            e * e
        })
        .sum()
}

/// Grid-seeded Gauss-Newton fit of P(n) = 1/(1 + exp(−(n−μ)/σ)).
pub fn fit_logistic(points: &[f64; 7]) -> Result<LogisticFit, PsychError> {
    let (min, max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
            (lo.min(p), hi.max(p))
        });
    if max - min < 1e-6 {
        return Err(PsychError::DegenerateFit);
    }

    // coarse grid seed
    let mut best = (4.0, 1.0, f64::INFINITY);
    let mut mu = 0.0;
    while mu <= 8.0 {
        for &sigma in &[0.2, 0.35, 0.6, 1.0, 1.8, 3.0, 5.0] {
            let err = sse(points, mu, sigma);
            if err < best.2 {
                best = (mu, sigma, err);
            }
        }
        mu += 0.25;
    }

    // Gauss-Newton with Levenberg damping
    let (mut mu, mut sigma, mut err) = best;
    let mut lambda = 1e-3;
    for _ in 0..200 {
        // residuals and Jacobian
        let mut jtj = [[0.0f64; 2]; 2];
        let mut jtr = [0.0f64; 2];
        for (i, &p) in points.iter().enumerate() {
            let n = (i + 1) as f64;
            let f = logistic(n, mu, sigma);
            let r = f - p;
            let w = f * (1.0 - f);
            let dmu = -w / sigma;
            let dsigma = -w * (n - mu) / (sigma * sigma);
            jtj[0][0] += dmu * dmu;
            jtj[0][1] += dmu * dsigma;
            jtj[1][1] += dsigma * dsigma;
            jtr[0] += dmu * r;
            jtr[1] += dsigma * r;
        }
        jtj[1][0] = jtj[0][1];
        let a = jtj[0][0] * (1.0 + lambda);
        let d = jtj[1][1] * (1.0 + lambda);
        let b = jtj[0][1];
        let det = a * d - b * b;
        if det.abs() < 1e-18 {
            break;
        }
        let step_mu = (d * jtr[0] - b * jtr[1]) / det;
        let step_sigma = (-b * jtr[0] + a * jtr[1]) / det;
        let cand_mu = mu - step_mu;
        let cand_sigma = (sigma - step_sigma).clamp(1e-3, 50.0);
        let cand_err = sse(points, cand_mu, cand_sigma);
        if cand_err < err {
            mu = cand_mu;
            sigma = cand_sigma;
            err = cand_err;
            lambda = (lambda * 0.5).max(1e-12);
            if step_mu.abs() < 1e-12 && step_sigma.abs() < 1e-12 {
                break;
            }
        } else {
            lambda *= 4.0;
            if lambda > 1e8 {
                break;
            }
        }
    }
    Ok(LogisticFit {
        midpoint: mu,
        spread: sigma,
        residual: err,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveShapeKind {
    Sigmoid,
    Inverted,
    AllOrNoneFew,
    AllOrNoneMany,
    Flat,
}

impl CurveShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            CurveShapeKind::Sigmoid => "sigmoid",
            CurveShapeKind::Inverted => "inverted",
            CurveShapeKind::AllOrNoneFew => "all_or_none_few",
            CurveShapeKind::AllOrNoneMany => "all_or_none_many",
            CurveShapeKind::Flat => "flat",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurveShape {
    pub kind: CurveShapeKind,
    pub low_mean: f64,
    pub high_mean: f64,
    pub spearman: f64,
    pub min: f64,
    pub max: f64,
}

/// Threshold-based taxonomy of the 7-point curve.
///
/// sigmoid: mean(P1,P2) ≤ 0.25, mean(P6,P7) ≥ 0.75, Spearman ≥ 0.8;
/// inverted: the mirror condition; all-or-none: every point ≥ 0.9 or ≤ 0.1;
/// everything else is flat (with diagnostics).
pub fn classify_curve_shape(points: &[f64; 7]) -> CurveShape {
    let ns: Vec<f64> = (1..=7).map(f64::from).collect();
    let rho = spearman_rho(&ns, points);
    let low_mean = 0.5 * (points[0] + points[1]);
    let high_mean = 0.5 * (points[5] + points[6]);
    let min = points.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = points.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kind = if low_mean <= 0.25 && high_mean >= 0.75 && rho >= 0.8 {
        CurveShapeKind::Sigmoid
    } else if low_mean >= 0.75 && high_mean <= 0.25 && rho <= -0.8 {
        CurveShapeKind::Inverted
    } else if min >= 0.9 {
        CurveShapeKind::AllOrNoneMany
    } else if max <= 0.1 {
        CurveShapeKind::AllOrNoneFew
    } else {
        CurveShapeKind::Flat
    };
    CurveShape {
        kind,
        low_mean,
        high_mean,
        spearman: rho,
        min,
        max,
    }
}

/// One cell of the transfer grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferCell {
    pub train_category: StimulusCategory,
    pub test_category: StimulusCategory,
    pub curve: PsychometricCurve,
    pub shape: CurveShape,
}

/// Train-category × test-category grid for one family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub family: Family,
    pub cells: Vec<TransferCell>,
}

impl TransferMatrix {
    pub fn cell(
        &self,
        train: StimulusCategory,
        test: StimulusCategory,
    ) -> Option<&TransferCell> {
        self.cells
            .iter()
            .find(|c| c.train_category == train && c.test_category == test)
    }
}

/// Evaluate every trained model set on every test dataset. Returns the grid
/// plus the full record stream (diagonal cells reproduce the
/// train-equals-test analysis exactly, as they aggregate the same records).
pub fn transfer_matrix(
    family: Family,
    models: &BTreeMap<StimulusCategory, Vec<TrainedNetwork>>,
    test_sets: &BTreeMap<StimulusCategory, Dataset>,
    bootstrap: &BootstrapConfig,
) -> Result<(TransferMatrix, Vec<ResponseRecord>), PsychError> {
    let mut cells = Vec::new();
    let mut all_records = Vec::new();
    for (&train_cat, runs) in models {
        for (&test_cat, dataset) in test_sets {
            let mut records = Vec::new();
            for run in runs {
                let meta = RecordMeta {
                    family,
                    seed: run.seed,
                    train_category: train_cat,
                };
                records.extend(classify_batch(&run.network, dataset, meta)?);
            }
            let bs = BootstrapConfig {
                seed: rng::derive_seed(
                    bootstrap.seed,
                    &[
                        rng::fnv1a(family.name().as_bytes()),
                        rng::fnv1a(train_cat.name().as_bytes()),
                        rng::fnv1a(test_cat.name().as_bytes()),
                    ],
                ),
                ..*bootstrap
            };
            let curve = psychometric_curve(&records, &bs)?;
            let shape = classify_curve_shape(&curve.proportions());
            cells.push(TransferCell {
                train_category: train_cat,
                test_category: test_cat,
                curve,
                shape,
            });
            all_records.extend(records);
        }
    }
    Ok((TransferMatrix { family, cells }, all_records))
}

/// Per-seed proportion-of-many samples per numerosity, the replicate groups
/// entering the discriminability test.
pub fn group_samples_from_records(records: &[ResponseRecord]) -> GroupSamples {
    let mut per_seed: BTreeMap<(u8, u64), (usize, usize)> = BTreeMap::new();
    for r in records {
        let entry = per_seed.entry((r.numerosity, r.seed)).or_insert((0, 0));
        entry.1 += 1;
        if r.predicted_many {
            entry.0 += 1;
        }
    }
    let mut groups: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for ((n, _seed), (many, total)) in per_seed {
        groups
            .entry(n)
            .or_default()
            .push(many as f64 / total as f64);
    }
    GroupSamples { groups }
}

/// Records CSV with a header row.
pub fn records_csv(records: &[ResponseRecord]) -> String {
    let mut out =
        String::from("model,family,seed,train_cat,test_cat,n,index,p_many,label\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.model_id(),
            r.family,
            r.seed,
            r.train_category,
            r.test_category,
            r.numerosity,
            r.image_index,
            r.p_many,
            if r.predicted_many { "many" } else { "few" }
        ));
    }
    out
}

/// Curve CSV with a header row.
pub fn curve_csv(curve: &PsychometricCurve) -> String {
    let mut out = String::from(
        "family,train_cat,test_cat,n,proportion_many,ci_low,ci_high,samples\n",
    );
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            curve.family,
            curve.train_category,
            curve.test_category,
            p.numerosity,
            p.proportion_many,
            p.ci_low,
            p.ci_high,
            p.samples
        ));
    }
    out
}
