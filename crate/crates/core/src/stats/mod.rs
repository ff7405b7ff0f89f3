//! Pairwise discriminability statistics: studentized range quantiles by
//! numerical integration, Tukey's HSD at a controlled family-wise error rate,
//! and the cross-model comparison report.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::sync::Mutex;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use statrs::function::gamma::ln_gamma;

use crate::models::Family;
use crate::stimgen::StimulusCategory;

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("quantile search failed: {0}")]
    ConvergenceFailure(String),
    #[error("each group needs at least two replicates")]
    InsufficientReplicates,
    #[error("groups must be balanced (equal replicate counts)")]
    Unbalanced,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// 16-point Gauss-Legendre nodes and weights on [-1, 1].
const GL16_NODES: [f64; 16] = [
    -0.989_400_934_991_649_9,
    -0.944_575_023_073_232_6,
    -0.865_631_202_387_831_7,
    -0.755_404_408_355_003_0,
    -0.617_876_244_402_643_7,
    -0.458_016_777_657_227_4,
    -0.281_603_550_779_258_9,
    -0.095_012_509_837_637_44,
    0.095_012_509_837_637_44,
    0.281_603_550_779_258_9,
    0.458_016_777_657_227_4,
    0.617_876_244_402_643_7,
    0.755_404_408_355_003_0,
    0.865_631_202_387_831_7,
    0.944_575_023_073_232_6,
    0.989_400_934_991_649_9,
];
const GL16_WEIGHTS: [f64; 16] = [
    0.027_152_459_411_754_096,
    0.062_253_523_938_647_89,
    0.095_158_511_682_492_79,
    0.124_628_971_255_533_87,
    0.149_595_988_816_576_73,
    0.169_156_519_395_002_54,
    0.182_603_415_044_923_59,
    0.189_450_610_455_068_5,
    0.189_450_610_455_068_5,
    0.182_603_415_044_923_59,
    0.169_156_519_395_002_54,
    0.149_595_988_816_576_73,
    0.124_628_971_255_533_87,
    0.095_158_511_682_492_79,
    0.062_253_523_938_647_89,
    0.027_152_459_411_754_096,
];

/// CDF of the range of k iid standard normals:
/// P(R ≤ r) = k ∫ φ(u)·[Φ(u) − Φ(u−r)]^(k−1) du.
fn normal_range_cdf(r: f64, k: usize, inner: &InnerNodes) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    if k == 1 {
        return 1.0;
    }
    let mut total = 0.0;
    for (i, &u) in inner.u.iter().enumerate() {
        let span = inner.phi_big[i] - normal_cdf(u - r);
        if span > 0.0 {
            total += inner.w_phi[i] * span.powi(k as i32 - 1);
        }
    }
    (k as f64 * total).clamp(0.0, 1.0)
}

struct InnerNodes {
    u: Vec<f64>,
    /// quadrature weight × φ(u)
    w_phi: Vec<f64>,
    /// Φ(u)
    phi_big: Vec<f64>,
}

fn inner_nodes() -> &'static InnerNodes {
    static NODES: OnceLock<InnerNodes> = OnceLock::new();
    NODES.get_or_init(|| {
        let (lo, hi, panels) = (-8.5f64, 8.5f64, 34usize);
        let width = (hi - lo) / panels as f64;
        let mut u = Vec::with_capacity(panels * 16);
        let mut w_phi = Vec::with_capacity(panels * 16);
        let mut phi_big = Vec::with_capacity(panels * 16);
        for p in 0..panels {
            let a = lo + p as f64 * width;
            let mid = a + width / 2.0;
            let half = width / 2.0;
            for (&x, &w) in GL16_NODES.iter().zip(&GL16_WEIGHTS) {
                let ui = mid + half * x;
                u.push(ui);
                w_phi.push(w * half * normal_pdf(ui));
                phi_big.push(normal_cdf(ui));
            }
        }
        InnerNodes { u, w_phi, phi_big }
    })
}

/// CDF of the studentized range with `k` groups and `df` error degrees of
/// freedom: F(q) = ∫ g(s)·P(range ≤ q·s) ds integrated over the sd-ratio
/// density g(s) = 2·(ν/2)^(ν/2)/Γ(ν/2) · s^(ν−1) · exp(−ν s²/2).
pub fn studentized_range_cdf(q: f64, k: usize, df: usize) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let inner = inner_nodes();
    let nu = df as f64;
    let half = nu / 2.0;
    // log normalizer of g(s)
    let log_norm = (2.0f64).ln() + half * half.ln() - ln_gamma(half);
    let hi = 1.0 + 10.0 / nu.sqrt() + 8.0 / nu;
    let panels = 48usize;
    let width = hi / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let a = p as f64 * width;
        let mid = a + width / 2.0;
        let hw = width / 2.0;
        for (&x, &w) in GL16_NODES.iter().zip(&GL16_WEIGHTS) {
            let s = mid + hw * x;
            if s <= 0.0 {
                continue;
            }
            let log_g = log_norm + (nu - 1.0) * s.ln() - half * s * s;
            if log_g < -745.0 {
                continue;
            }
            total += w * hw * log_g.exp() * normal_range_cdf(q * s, k, inner);
        }
    }
    total.clamp(0.0, 1.0)
}

fn quantile_cache() -> &'static Mutex<HashMap<(u64, usize, usize), f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(u64, usize, usize), f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Upper-alpha quantile of the studentized range distribution, solved by
/// bisection on the integrated CDF. Results are cached per (alpha, k, df).
pub fn studentized_range_q(alpha: f64, k: usize, df: usize) -> Result<f64, StatsError> {
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(StatsError::InvalidInput(format!("alpha {alpha}")));
    }
    if k < 2 || df < 1 {
        return Err(StatsError::InvalidInput(format!("k {k}, df {df}")));
    }
    let key = (alpha.to_bits(), k, df);
    if let Some(&q) = quantile_cache().lock().expect("cache lock").get(&key) {
        return Ok(q);
    }
    let target = 1.0 - alpha;
    let mut hi = 1.0;
    let mut doublings = 0;
    while studentized_range_cdf(hi, k, df) < target {
        hi *= 2.0;
        doublings += 1;
        if doublings > 40 {
            return Err(StatsError::ConvergenceFailure(format!(
                "no upper bracket for alpha={alpha} k={k} df={df}"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        if hi - lo < 1e-9 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if studentized_range_cdf(mid, k, df) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = 0.5 * (lo + hi);
    quantile_cache().lock().expect("cache lock").insert(key, q);
    Ok(q)
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side has no rank variance.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &slot in &idx[i..=j] {
            ranks[slot] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Balanced per-group replicate samples keyed by group id (numerosity).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroupSamples {
    pub groups: BTreeMap<u8, Vec<f64>>,
}

/// One pairwise comparison under Tukey's HSD.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairComparison {
    pub group_i: u8,
    pub group_j: u8,
    pub mean_diff: f64,
    pub q_stat: f64,
    pub critical: f64,
    pub significant: bool,
    /// Zero pooled within-group variance with unequal means: reported
    /// significant and flagged rather than returning NaN.
    pub degenerate_variance: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TukeyOutcome {
    pub comparisons: Vec<PairComparison>,
    pub pooled_within_variance: f64,
    pub df: usize,
    pub critical: f64,
}

/// Tukey's HSD over balanced groups: pair (i, j) is significant iff
/// |mean_i − mean_j| > q(alpha, k, df) · sqrt(MSW / n_per_group).
pub fn tukey_hsd(samples: &GroupSamples, alpha: f64) -> Result<TukeyOutcome, StatsError> {
    let k = samples.groups.len();
    if k < 2 {
        return Err(StatsError::InvalidInput(format!("{k} groups")));
    }
    let sizes: Vec<usize> = samples.groups.values().map(Vec::len).collect();
    let n = sizes[0];
    if sizes.iter().any(|&s| s != n) {
        return Err(StatsError::Unbalanced);
    }
    if n < 2 {
        return Err(StatsError::InsufficientReplicates);
    }
    let df = k * (n - 1);
    let mut means = BTreeMap::new();
    let mut ssw = 0.0;
    for (&g, xs) in &samples.groups {
        let mean = xs.iter().sum::<f64>() / n as f64;
        ssw += xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
        means.insert(g, mean);
    }
    let msw = ssw / df as f64;
    let critical = studentized_range_q(alpha, k, df)?;
    let se = (msw / n as f64).sqrt();
    let ids: Vec<u8> = samples.groups.keys().copied().collect();
    let mut comparisons = Vec::with_capacity(k * (k - 1) / 2);
    for (a, &gi) in ids.iter().enumerate() {
        for &gj in ids.iter().skip(a + 1) {
            let diff = means[&gi] - means[&gj];
            let (q_stat, significant, degenerate) = if msw == 0.0 {
                if diff == 0.0 {
                    (0.0, false, false)
                } else {
                    (f64::INFINITY, true, true)
                }
            } else {
                let q = diff.abs() / se;
                (q, q > critical, false)
            };
            comparisons.push(PairComparison {
                group_i: gi,
                group_j: gj,
                mean_diff: diff,
                q_stat,
                critical,
                significant,
                degenerate_variance: degenerate,
            });
        }
    }
    Ok(TukeyOutcome {
        comparisons,
        pooled_within_variance: msw,
        df,
        critical,
    })
}

/// Pairs excluded from the discriminability totals: their means are tied by
/// the training objective itself.
pub const EXCLUDED_PAIRS: [(u8, u8); 2] = [(1, 2), (6, 7)];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub family: Family,
    pub category: StimulusCategory,
    pub pair: (u8, u8),
    pub mean_diff: f64,
    pub q_stat: f64,
    pub critical: f64,
    pub significant: bool,
    pub degenerate_variance: bool,
    pub excluded: bool,
}

/// All pairwise outcomes plus the comparison bookkeeping and the histogram of
/// non-rejected (indistinguishable) pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminabilityReport {
    pub rows: Vec<ReportRow>,
    pub tested: usize,
    pub excluded: usize,
    pub not_rejected: usize,
    pub pair_histogram: BTreeMap<String, usize>,
    pub alpha: f64,
}

impl DiscriminabilityReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "family,category,pair,mean_diff,q_stat,critical,significant,degenerate_variance,excluded\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}-{},{},{},{},{},{},{}\n",
                r.family,
                r.category,
                r.pair.0,
                r.pair.1,
                r.mean_diff,
                r.q_stat,
                r.critical,
                r.significant,
                r.degenerate_variance,
                r.excluded
            ));
        }
        out
    }
}

/// Run Tukey's HSD per (family, category) group set and aggregate.
pub fn discriminability_report(
    inputs: &[(Family, StimulusCategory, GroupSamples)],
    alpha: f64,
) -> Result<DiscriminabilityReport, StatsError> {
    let mut rows = Vec::new();
    let mut tested = 0usize;
    let mut excluded = 0usize;
    let mut not_rejected = 0usize;
    let mut pair_histogram: BTreeMap<String, usize> = BTreeMap::new();
    for (family, category, samples) in inputs {
        let outcome = tukey_hsd(samples, alpha)?;
        for c in outcome.comparisons {
            let pair = (c.group_i.min(c.group_j), c.group_i.max(c.group_j));
            let is_excluded = EXCLUDED_PAIRS.contains(&pair);
            if is_excluded {
                excluded += 1;
            } else {
                tested += 1;
                if !c.significant {
                    not_rejected += 1;
                    *pair_histogram
                        .entry(format!("{}-{}", pair.0, pair.1))
                        .or_insert(0) += 1;
                }
            }
            rows.push(ReportRow {
                family: *family,
                category: *category,
                pair,
                mean_diff: c.mean_diff,
                q_stat: c.q_stat,
                critical: c.critical,
                significant: c.significant,
                degenerate_variance: c.degenerate_variance,
                excluded: is_excluded,
            });
        }
    }
    Ok(DiscriminabilityReport {
        rows,
        tested,
        excluded,
        not_rejected,
        pair_histogram,
        alpha,
    })
}
