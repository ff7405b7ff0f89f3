//! Circle-stimulus synthesis under six confound-control regimes.
//!
//! Images are binary (pixel-center test, no anti-aliasing) with a black
//! background and white circles. Every random draw derives from the dataset
//! seed through [`crate::rng`], so generation is deterministic and
//! parallel-safe.

pub mod export;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng;
use crate::scalar::Scalar;

/// Reference resolution the spec radii are quoted at.
pub const REFERENCE_RESOLUTION: usize = 224;

/// Numerosities with a training label attached.
pub const ANCHOR_NUMEROSITIES: [u8; 4] = [1, 2, 6, 7];
/// Numerosities seen only at test time.
pub const INTERPOLATED_NUMEROSITIES: [u8; 3] = [3, 4, 5];
/// Full numerosity range.
pub const ALL_NUMEROSITIES: [u8; 7] = [1, 2, 3, 4, 5, 6, 7];

/// How many times dataset generation redraws radii for one image after the
/// placement budget is exhausted. Heavy VarySize draws (e.g. several radius-55
/// circles) can be geometrically unpackable; a redraw samples a fresh radius
/// combination from the same stream.
const RADII_REDRAWS_PER_IMAGE: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum StimError {
    #[error("invalid stimulus spec: {0}")]
    InvalidSpec(String),
    #[error(
        "placement infeasible for {category} n={numerosity} radii {radii:?} after {rejections} rejections"
    )]
    PlacementInfeasible {
        category: StimulusCategory,
        numerosity: u8,
        radii: Vec<f64>,
        rejections: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png encode error: {0}")]
    Png(String),
}

/// The six stimulus categories. Contour variants share their filled
/// counterpart's geometry and differ only in fill mode.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum StimulusCategory {
    VarySize,
    ConstSize,
    ConstArea,
    ConstAreaContour,
    ConstCirc,
    ConstCircContour,
}

impl StimulusCategory {
    pub const ALL: [StimulusCategory; 6] = [
        StimulusCategory::VarySize,
        StimulusCategory::ConstSize,
        StimulusCategory::ConstArea,
        StimulusCategory::ConstAreaContour,
        StimulusCategory::ConstCirc,
        StimulusCategory::ConstCircContour,
    ];

    pub fn is_contour(self) -> bool {
        matches!(
            self,
            StimulusCategory::ConstAreaContour | StimulusCategory::ConstCircContour
        )
    }

    /// The filled category with the same geometry.
    pub fn geometry(self) -> StimulusCategory {
        match self {
            StimulusCategory::ConstAreaContour => StimulusCategory::ConstArea,
            StimulusCategory::ConstCircContour => StimulusCategory::ConstCirc,
            other => other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StimulusCategory::VarySize => "vary_size",
            StimulusCategory::ConstSize => "const_size",
            StimulusCategory::ConstArea => "const_area",
            StimulusCategory::ConstAreaContour => "const_area_contour",
            StimulusCategory::ConstCirc => "const_circ",
            StimulusCategory::ConstCircContour => "const_circ_contour",
        }
    }
}

impl fmt::Display for StimulusCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Geometric description of one stimulus family at one resolution.
///
/// All lengths (`vary_radii`, `const_radius`, `stroke_width`, `min_gap`,
/// `margin`) are quoted at the 224-px reference resolution and scale linearly
/// with `resolution`, so geometry is resolution-invariant. The stroke width
/// is clamped to 1 px so contours stay visible at small resolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StimulusSpec {
    pub category: StimulusCategory,
    pub resolution: usize,
    pub vary_radii: Vec<f64>,
    pub const_radius: f64,
    pub reference_count: u32,
    pub stroke_width: f64,
    pub min_gap: f64,
    pub margin: f64,
    pub seed: u64,
    /// Placement rejections allowed per image before the layout is declared
    /// infeasible.
    pub max_attempts: usize,
}

impl Default for StimulusSpec {
    fn default() -> Self {
        Self {
            category: StimulusCategory::ConstSize,
            resolution: REFERENCE_RESOLUTION,
            vary_radii: vec![10.0, 35.0, 55.0],
            const_radius: 20.0,
            reference_count: 4,
            stroke_width: 2.0,
            min_gap: 2.0,
            margin: 2.0,
            seed: 0,
            max_attempts: 10_000,
        }
    }
}

impl StimulusSpec {
    pub fn new(category: StimulusCategory, resolution: usize, seed: u64) -> Self {
        Self {
            category,
            resolution,
            seed,
            ..Self::default()
        }
    }

    /// Linear scale factor from the reference resolution.
    pub fn scale(&self) -> f64 {
        self.resolution as f64 / REFERENCE_RESOLUTION as f64
    }

    pub fn scaled_const_radius(&self) -> f64 {
        self.const_radius * self.scale()
    }

    pub fn scaled_vary_radii(&self) -> Vec<f64> {
        self.vary_radii.iter().map(|r| r * self.scale()).collect()
    }

    pub fn scaled_stroke_width(&self) -> f64 {
        (self.stroke_width * self.scale()).max(1.0)
    }

    pub fn scaled_margin(&self) -> f64 {
        self.margin * self.scale()
    }

    pub fn scaled_min_gap(&self) -> f64 {
        self.min_gap * self.scale()
    }

    /// Largest radius this spec can produce, after scaling.
    pub fn max_radius(&self) -> f64 {
        let geom = self.category.geometry();
        let s = self.scale();
        match geom {
            StimulusCategory::VarySize => {
                self.vary_radii.iter().cloned().fold(0.0, f64::max) * s
            }
            StimulusCategory::ConstSize => self.const_radius * s,
            // n = 1 maximizes both equal-radius formulas
            StimulusCategory::ConstArea => {
                self.const_radius * (self.reference_count as f64).sqrt() * s
            }
            StimulusCategory::ConstCirc => self.const_radius * self.reference_count as f64 * s,
            _ => unreachable!("geometry() returns filled categories"),
        }
    }

    pub fn validate(&self) -> Result<(), StimError> {
        if self.resolution == 0 {
            return Err(StimError::InvalidSpec("resolution must be positive".into()));
        }
        if self.vary_radii.is_empty() || self.vary_radii.iter().any(|&r| r <= 0.0) {
            return Err(StimError::InvalidSpec(
                "vary_radii must be non-empty and strictly positive".into(),
            ));
        }
        if self.const_radius <= 0.0 || self.stroke_width <= 0.0 {
            return Err(StimError::InvalidSpec(
                "radii and stroke width must be strictly positive".into(),
            ));
        }
        if self.reference_count == 0 {
            return Err(StimError::InvalidSpec(
                "reference_count must be at least 1".into(),
            ));
        }
        if self.min_gap < 0.0 || self.margin < 0.0 {
            return Err(StimError::InvalidSpec(
                "min_gap and margin must be non-negative".into(),
            ));
        }
        if self.max_attempts == 0 {
            return Err(StimError::InvalidSpec(
                "max_attempts must be at least 1".into(),
            ));
        }
        let half = self.resolution as f64 / 2.0;
        if self.scaled_margin() + self.max_radius() >= half {
            return Err(StimError::InvalidSpec(format!(
                "margin {} + max radius {:.2} must stay below half the frame ({half})",
                self.scaled_margin(),
                self.max_radius()
            )));
        }
        Ok(())
    }
}

/// One placed circle, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

/// Placed geometry for one image, with analytic totals fixed at construction
/// so equal-by-construction quantities compare bit-exactly across
/// numerosities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircleLayout {
    pub circles: Vec<Circle>,
    pub category: StimulusCategory,
    pub numerosity: u8,
    pub resolution: usize,
    analytic_area: f64,
    analytic_perimeter: f64,
}

impl CircleLayout {
    /// Layout with no circles; rasterizes to an all-black image.
    pub fn empty(category: StimulusCategory, resolution: usize) -> Self {
        Self {
            circles: Vec::new(),
            category,
            numerosity: 0,
            resolution,
            analytic_area: 0.0,
            analytic_perimeter: 0.0,
        }
    }

    /// Total disc area implied by the construction, Σπr².
    pub fn analytic_area(&self) -> f64 {
        self.analytic_area
    }

    /// Total circumference implied by the construction, Σ2πr.
    pub fn analytic_perimeter(&self) -> f64 {
        self.analytic_perimeter
    }

    /// Σπr² recomputed circle by circle; cross-checks the closed forms.
    pub fn per_circle_area_sum(&self) -> f64 {
        self.circles
            .iter()
            .map(|c| std::f64::consts::PI * c.r * c.r)
            .sum()
    }

    /// Σ2πr recomputed circle by circle.
    pub fn per_circle_perimeter_sum(&self) -> f64 {
        self.circles
            .iter()
            .map(|c| 2.0 * std::f64::consts::PI * c.r)
            .sum()
    }

    /// Check non-overlap, in-bounds, and count invariants.
    pub fn check_invariants(&self, spec: &StimulusSpec) -> Result<(), String> {
        if self.circles.len() != self.numerosity as usize {
            return Err(format!(
                "{} circles but numerosity {}",
                self.circles.len(),
                self.numerosity
            ));
        }
        let res = spec.resolution as f64;
        let margin = spec.scaled_margin();
        let gap = spec.scaled_min_gap();
        for (i, c) in self.circles.iter().enumerate() {
            let lo_x = c.r + margin;
            let hi_x = res - c.r - margin;
            if c.cx < lo_x || c.cx > hi_x || c.cy < lo_x || c.cy > hi_x {
                return Err(format!("circle {i} out of bounds: {c:?}"));
            }
            for (j, d) in self.circles.iter().enumerate().skip(i + 1) {
                let dist = ((c.cx - d.cx).powi(2) + (c.cy - d.cy).powi(2)).sqrt();
                if dist < c.r + d.r + gap {
                    return Err(format!("circles {i} and {j} overlap: dist {dist:.3}"));
                }
            }
        }
        Ok(())
    }
}

/// Binary single-channel image; every pixel is exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    /// Build from explicit binary pixel values (each must be 0 or 1).
    pub fn from_binary_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count");
        assert!(pixels.iter().all(|&p| p <= 1), "pixels must be 0 or 1");
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn white_pixel_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    /// Pixel intensities as scalars in {0, 1}.
    pub fn to_scalars<S: Scalar>(&self) -> Vec<S> {
        self.pixels
            .iter()
            .map(|&p| if p == 1 { S::one() } else { S::zero() })
            .collect()
    }

    fn set(&mut self, x: usize, y: usize) {
        self.pixels[y * self.width + x] = 1;
    }
}

/// Training label attached to a numerosity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Few,
    Many,
    Unlabeled,
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Few => "few",
            Label::Many => "many",
            Label::Unlabeled => "unlabeled",
        }
    }
}

/// Label for a numerosity: few for {1,2}, many for {6,7}, unlabeled otherwise.
pub fn label_for(numerosity: u8) -> Label {
    match numerosity {
        1 | 2 => Label::Few,
        6 | 7 => Label::Many,
        _ => Label::Unlabeled,
    }
}

/// One generated stimulus with its geometry and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusItem {
    pub image: Image,
    pub layout: CircleLayout,
    pub numerosity: u8,
    pub label: Label,
    pub category: StimulusCategory,
    /// Derived per-image seed.
    pub seed: u64,
    pub index: u32,
}

/// Labeled image collection for one stimulus category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: StimulusSpec,
    pub items: Vec<StimulusItem>,
    pub counts: BTreeMap<u8, usize>,
}

impl Dataset {
    pub fn category(&self) -> StimulusCategory {
        self.spec.category
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items restricted to labeled anchors.
    pub fn anchor_items(&self) -> impl Iterator<Item = &StimulusItem> {
        self.items.iter().filter(|i| i.label != Label::Unlabeled)
    }

    /// SHA-256 over the canonical content (spec, ordering, labels, pixels).
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        for item in &self.items {
            hasher.update([item.numerosity]);
            hasher.update(item.label.name().as_bytes());
            hasher.update(item.seed.to_le_bytes());
            hasher.update(item.index.to_le_bytes());
            hasher.update(item.image.pixels());
        }
        hex_string(&hasher.finalize())
    }

    /// Merge several datasets (used for hold-out training pools). Items keep
    /// their per-source category tags.
    pub fn pooled(datasets: &[&Dataset]) -> Dataset {
        let spec = datasets
            .first()
            .map(|d| d.spec.clone())
            .unwrap_or_default();
        let mut items = Vec::new();
        let mut counts = BTreeMap::new();
        for ds in datasets {
            for item in &ds.items {
                *counts.entry(item.numerosity).or_insert(0) += 1;
                items.push(item.clone());
            }
        }
        Dataset { spec, items, counts }
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Radii for one image of numerosity `n` under the spec's category rules.
///
/// VarySize draws independently and uniformly from the (scaled) radius set;
/// the other categories return n equal radii chosen so the controlled total
/// (area or circumference) is constant across numerosities.
pub fn radii_for(spec: &StimulusSpec, n: u8, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!((1..=7).contains(&n), "numerosity {n} outside 1..=7");
    let count = n as usize;
    let cr = spec.scaled_const_radius();
    let reference = spec.reference_count as f64;
    match spec.category.geometry() {
        StimulusCategory::VarySize => {
            let radii = spec.scaled_vary_radii();
            (0..count)
                .map(|_| radii[rng.gen_range(0..radii.len())])
                .collect()
        }
        StimulusCategory::ConstSize => vec![cr; count],
        StimulusCategory::ConstArea => vec![cr * (reference / n as f64).sqrt(); count],
        StimulusCategory::ConstCirc => vec![cr * reference / n as f64; count],
        _ => unreachable!("geometry() returns filled categories"),
    }
}

/// Place circles uniformly at random without overlap, largest first.
///
/// Deterministic given the rng state; fails with `PlacementInfeasible` once
/// `spec.max_attempts` rejections are spent.
pub fn place_circles(
    radii: &[f64],
    spec: &StimulusSpec,
    rng: &mut ChaCha8Rng,
) -> Result<CircleLayout, StimError> {
    let mut sorted = radii.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite radii"));
    let res = spec.resolution as f64;
    let infeasible = |rejections: usize| StimError::PlacementInfeasible {
        category: spec.category,
        numerosity: radii.len() as u8,
        radii: radii.to_vec(),
        rejections,
    };

    let mut rejections = 0usize;
    let margin = spec.scaled_margin();
    let gap = spec.scaled_min_gap();
    let mut placed: Vec<Circle> = Vec::with_capacity(sorted.len());
    for &r in &sorted {
        let lo = r + margin;
        let hi = res - r - margin;
        if lo > hi {
            return Err(infeasible(rejections));
        }
        loop {
            let cx = rng.gen_range(lo..=hi);
            let cy = rng.gen_range(lo..=hi);
            let ok = placed.iter().all(|c| {
                let dist2 = (c.cx - cx).powi(2) + (c.cy - cy).powi(2);
                let min = c.r + r + gap;
                dist2 >= min * min
            });
            if ok {
                placed.push(Circle { cx, cy, r });
                break;
            }
            rejections += 1;
            if rejections >= spec.max_attempts {
                return Err(infeasible(rejections));
            }
        }
    }

    let (area, perimeter) = analytic_totals(spec, &placed);
    Ok(CircleLayout {
        numerosity: placed.len() as u8,
        circles: placed,
        category: spec.category,
        resolution: spec.resolution,
        analytic_area: area,
        analytic_perimeter: perimeter,
    })
}

/// Closed-form totals per category. Quantities that the category holds
/// constant are evaluated from the same n-free expression for every
/// numerosity, so they compare bit-exactly.
fn analytic_totals(spec: &StimulusSpec, circles: &[Circle]) -> (f64, f64) {
    use std::f64::consts::PI;
    let n = circles.len() as f64;
    let cr = spec.scaled_const_radius();
    let reference = spec.reference_count as f64;
    match spec.category.geometry() {
        StimulusCategory::VarySize => (
            circles.iter().map(|c| PI * c.r * c.r).sum(),
            circles.iter().map(|c| 2.0 * PI * c.r).sum(),
        ),
        StimulusCategory::ConstSize => (PI * cr * cr * n, 2.0 * PI * cr * n),
        StimulusCategory::ConstArea => {
            let r = circles.first().map_or(0.0, |c| c.r);
            (PI * cr * cr * reference, 2.0 * PI * r * n)
        }
        StimulusCategory::ConstCirc => {
            let r = circles.first().map_or(0.0, |c| c.r);
            (PI * r * r * n, 2.0 * PI * cr * reference)
        }
        _ => unreachable!("geometry() returns filled categories"),
    }
}

/// Rasterize a layout to a binary image.
///
/// Filled mode sets a pixel to 1 iff its center lies within some disc;
/// contour mode iff the center's distance to some circle's boundary is below
/// half the stroke width.
pub fn rasterize(layout: &CircleLayout, spec: &StimulusSpec) -> Image {
    let res = spec.resolution;
    let mut image = Image::black(res, res);
    let contour = spec.category.is_contour();
    let half_stroke = spec.scaled_stroke_width() / 2.0;
    for c in &layout.circles {
        let reach = if contour { c.r + half_stroke } else { c.r };
        let x0 = ((c.cx - reach - 1.0).floor().max(0.0)) as usize;
        let x1 = ((c.cx + reach + 1.0).ceil().min(res as f64)) as usize;
        let y0 = ((c.cy - reach - 1.0).floor().max(0.0)) as usize;
        let y1 = ((c.cy + reach + 1.0).ceil().min(res as f64)) as usize;
        for y in y0..y1 {
            let py = y as f64 + 0.5;
            for x in x0..x1 {
                let px = x as f64 + 0.5;
                let dist = ((px - c.cx).powi(2) + (py - c.cy).powi(2)).sqrt();
                let on = if contour {
                    (dist - c.r).abs() < half_stroke
                } else {
                    dist <= c.r
                };
                if on {
                    image.set(x, y);
                }
            }
        }
    }
    image
}

/// Analytic features plus the rasterized white-pixel count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub analytic_area: f64,
    pub analytic_perimeter: f64,
    pub white_pixel_count: usize,
}

pub fn measure_features(layout: &CircleLayout, image: &Image) -> FeatureRecord {
    FeatureRecord {
        analytic_area: layout.analytic_area(),
        analytic_perimeter: layout.analytic_perimeter(),
        white_pixel_count: image.white_pixel_count(),
    }
}

/// Generate one stimulus for `(numerosity, index)` under the spec.
pub fn generate_item(spec: &StimulusSpec, n: u8, index: u32) -> Result<StimulusItem, StimError> {
    let seed = rng::derive_seed(spec.seed, &[u64::from(n), u64::from(index)]);
    let mut stream = rng::stream(seed, &[]);
    let mut last_err = None;
    for _ in 0..RADII_REDRAWS_PER_IMAGE {
        let radii = radii_for(spec, n, &mut stream);
        match place_circles(&radii, spec, &mut stream) {
            Ok(layout) => {
                let image = rasterize(&layout, spec);
                return Ok(StimulusItem {
                    image,
                    numerosity: n,
                    label: label_for(n),
                    category: spec.category,
                    seed,
                    index,
                    layout,
                });
            }
            Err(err) => last_err = Some(err),
        }
    }
    Err(last_err.expect("at least one placement attempt"))
}

/// Generate `count_per_numerosity` images for each listed numerosity.
///
/// Image seeds derive from `(spec.seed, numerosity, index)`, so the result is
/// identical however the work is partitioned. Uses the global rayon pool.
pub fn generate_dataset(
    spec: &StimulusSpec,
    numerosities: &[u8],
    count_per_numerosity: usize,
) -> Result<Dataset, StimError> {
    use rayon::prelude::*;
    spec.validate()?;
    let mut ns: Vec<u8> = numerosities.to_vec();
    ns.sort_unstable();
    ns.dedup();
    if ns.iter().any(|&n| !(1..=7).contains(&n)) {
        return Err(StimError::InvalidSpec(format!(
            "numerosities {ns:?} outside 1..=7"
        )));
    }
    let jobs: Vec<(u8, u32)> = ns
        .iter()
        .flat_map(|&n| (0..count_per_numerosity as u32).map(move |i| (n, i)))
        .collect();
    let items: Result<Vec<StimulusItem>, StimError> = jobs
        .par_iter()
        .map(|&(n, i)| generate_item(spec, n, i))
        .collect();
    let items = items?;
    let mut counts = BTreeMap::new();
    for item in &items {
        *counts.entry(item.numerosity).or_insert(0) += 1;
    }
    Ok(Dataset {
        spec: spec.clone(),
        items,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn spec(category: StimulusCategory) -> StimulusSpec {
        StimulusSpec::new(category, 224, 42)
    }

    #[test]
    fn const_size_radii_are_all_twenty() {
        let mut rng = rng::stream(1, &[]);
        let r = radii_for(&spec(StimulusCategory::ConstSize), 5, &mut rng);
        assert_eq!(r, vec![20.0; 5]);
    }

    #[test]
    fn const_area_identity_at_reference_count() {
        let mut rng = rng::stream(1, &[]);
        let r = radii_for(&spec(StimulusCategory::ConstArea), 4, &mut rng);
        assert_eq!(r, vec![20.0; 4]);
    }

    #[test]
    fn const_circ_total_circumference_constant() {
        let mut rng = rng::stream(1, &[]);
        let r2 = radii_for(&spec(StimulusCategory::ConstCirc), 2, &mut rng);
        assert_eq!(r2, vec![40.0, 40.0]);
        let total_n2: f64 = r2.iter().map(|r| 2.0 * PI * r).sum();
        let r4 = radii_for(&spec(StimulusCategory::ConstCirc), 4, &mut rng);
        let total_n4: f64 = r4.iter().map(|r| 2.0 * PI * r).sum();
        assert!((total_n2 - 2.0 * PI * 80.0).abs() < 1e-9);
        assert!((total_n2 - total_n4).abs() < 1e-9);
        for n in 1..=7u8 {
            let r = radii_for(&spec(StimulusCategory::ConstCirc), n, &mut rng);
            let total: f64 = r.iter().map(|r| 2.0 * PI * r).sum();
            assert!((total - total_n2).abs() < 1e-9, "n={n}: {total}");
        }
    }

    #[test]
    fn vary_size_draws_from_the_scaled_set() {
        let sp = StimulusSpec::new(StimulusCategory::VarySize, 112, 3);
        let mut rng = rng::stream(2, &[]);
        let r = radii_for(&sp, 7, &mut rng);
        for v in r {
            assert!(
                [5.0, 17.5, 27.5].iter().any(|&e| (v - e).abs() < 1e-12),
                "unexpected radius {v}"
            );
        }
    }

    #[test]
    fn contour_and_filled_share_geometry() {
        let filled = spec(StimulusCategory::ConstArea);
        let contour = spec(StimulusCategory::ConstAreaContour);
        for n in 1..=7u8 {
            let mut r1 = rng::stream(9, &[u64::from(n)]);
            let mut r2 = rng::stream(9, &[u64::from(n)]);
            assert_eq!(radii_for(&filled, n, &mut r1), radii_for(&contour, n, &mut r2));
        }
    }

    #[test]
    fn single_large_circle_center_stays_in_margin_band() {
        // r scaled to 80 at resolution 224 with margin 2: centers in [82, 142]
        let sp = StimulusSpec {
            category: StimulusCategory::ConstCirc,
            seed: 7,
            ..StimulusSpec::default()
        };
        for i in 0..1000u64 {
            let mut rng = rng::stream(7, &[i]);
            let radii = radii_for(&sp, 1, &mut rng);
            assert_eq!(radii, vec![80.0]);
            let layout = place_circles(&radii, &sp, &mut rng).unwrap();
            let c = layout.circles[0];
            assert!(c.cx >= 82.0 && c.cx <= 142.0, "cx {}", c.cx);
            assert!(c.cy >= 82.0 && c.cy <= 142.0, "cy {}", c.cy);
        }
    }

    #[test]
    fn placement_is_deterministic() {
        let sp = spec(StimulusCategory::ConstSize);
        let run = || {
            let mut rng = rng::stream(11, &[4]);
            let radii = radii_for(&sp, 5, &mut rng);
            place_circles(&radii, &sp, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
        // the redraw path is deterministic too
        let vary = spec(StimulusCategory::VarySize);
        assert_eq!(
            generate_item(&vary, 7, 3).unwrap(),
            generate_item(&vary, 7, 3).unwrap()
        );
    }

    #[test]
    fn impossible_packing_reports_infeasible() {
        // 7 circles of r=55 cannot fit a 224-px frame: disc area alone
        // exceeds the frame area.
        let sp = spec(StimulusCategory::VarySize);
        let mut rng = rng::stream(1, &[]);
        let radii = vec![55.0; 7];
        match place_circles(&radii, &sp, &mut rng) {
            Err(StimError::PlacementInfeasible {
                numerosity, radii, ..
            }) => {
                assert_eq!(numerosity, 7);
                assert_eq!(radii.len(), 7);
            }
            other => panic!("expected PlacementInfeasible, got {other:?}"),
        }
    }

    #[test]
    fn empty_layout_rasterizes_black() {
        let sp = spec(StimulusCategory::ConstSize);
        let layout = CircleLayout::empty(sp.category, sp.resolution);
        let image = rasterize(&layout, &sp);
        assert_eq!(image.white_pixel_count(), 0);
    }

    #[test]
    fn filled_circle_pixel_count_near_disc_area() {
        let sp = spec(StimulusCategory::ConstSize);
        let mut rng = rng::stream(21, &[]);
        let radii = radii_for(&sp, 1, &mut rng);
        let layout = place_circles(&radii, &sp, &mut rng).unwrap();
        let image = rasterize(&layout, &sp);
        let expect = PI * 400.0;
        let got = image.white_pixel_count() as f64;
        assert!(
            (got - expect).abs() / expect <= 0.03,
            "count {got} vs {expect}"
        );
    }

    #[test]
    fn contour_ring_pixel_count_near_band_area() {
        // Ring area ≈ 2πr·w for an isolated circle.
        let sp = spec(StimulusCategory::ConstAreaContour);
        let mut rng = rng::stream(22, &[]);
        let layout = place_circles(&[30.0], &sp, &mut rng).unwrap();
        let image = rasterize(&layout, &sp);
        let expect = 2.0 * PI * 30.0 * sp.scaled_stroke_width();
        let got = image.white_pixel_count() as f64;
        assert!(
            (got - expect).abs() / expect <= 0.10,
            "count {got} vs {expect}"
        );
    }

    #[test]
    fn stroke_width_scales_with_resolution_but_never_below_one() {
        let mut sp = spec(StimulusCategory::ConstAreaContour);
        assert_eq!(sp.scaled_stroke_width(), 2.0);
        sp.resolution = 64;
        assert_eq!(sp.scaled_stroke_width(), 1.0);
        sp.resolution = 448;
        assert_eq!(sp.scaled_stroke_width(), 4.0);
    }

    #[test]
    fn anchor_dataset_has_400_labeled_images() {
        let sp = StimulusSpec::new(StimulusCategory::ConstSize, 64, 5);
        let ds = generate_dataset(&sp, &ANCHOR_NUMEROSITIES, 100).unwrap();
        assert_eq!(ds.len(), 400);
        assert!(ds.items.iter().all(|i| i.label != Label::Unlabeled));
        for n in ANCHOR_NUMEROSITIES {
            assert_eq!(ds.counts[&n], 100);
        }
    }

    #[test]
    fn full_range_dataset_has_700_images() {
        let sp = StimulusSpec::new(StimulusCategory::ConstArea, 64, 6);
        let ds = generate_dataset(&sp, &ALL_NUMEROSITIES, 100).unwrap();
        assert_eq!(ds.len(), 700);
        for n in INTERPOLATED_NUMEROSITIES {
            assert!(ds
                .items
                .iter()
                .filter(|i| i.numerosity == n)
                .all(|i| i.label == Label::Unlabeled));
        }
    }

    #[test]
    fn count_zero_gives_empty_dataset() {
        let sp = StimulusSpec::new(StimulusCategory::ConstSize, 64, 5);
        let ds = generate_dataset(&sp, &ANCHOR_NUMEROSITIES, 0).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn datasets_are_byte_identical_across_runs() {
        let sp = StimulusSpec::new(StimulusCategory::VarySize, 64, 977);
        let a = generate_dataset(&sp, &ALL_NUMEROSITIES, 8).unwrap();
        let b = generate_dataset(&sp, &ALL_NUMEROSITIES, 8).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let other = StimulusSpec::new(StimulusCategory::VarySize, 64, 978);
        let c = generate_dataset(&other, &ALL_NUMEROSITIES, 8).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn const_area_totals_bit_equal_across_numerosities() {
        let sp = spec(StimulusCategory::ConstArea);
        let mut areas = Vec::new();
        for n in 1..=7u8 {
            let mut rng = rng::stream(31, &[u64::from(n)]);
            let radii = radii_for(&sp, n, &mut rng);
            let layout = place_circles(&radii, &sp, &mut rng).unwrap();
            // closed form tracks the per-circle sum
            let per_circle = layout.per_circle_area_sum();
            assert!(
                (layout.analytic_area() - per_circle).abs() / per_circle < 1e-12,
                "n={n}"
            );
            areas.push(layout.analytic_area());
        }
        assert!(areas.windows(2).all(|w| w[0] == w[1]), "{areas:?}");
    }

    #[test]
    fn const_circ_perimeters_bit_equal_across_numerosities() {
        let sp = spec(StimulusCategory::ConstCircContour);
        let mut perims = Vec::new();
        for n in 1..=7u8 {
            let mut rng = rng::stream(32, &[u64::from(n)]);
            let radii = radii_for(&sp, n, &mut rng);
            let layout = place_circles(&radii, &sp, &mut rng).unwrap();
            let per_circle = layout.per_circle_perimeter_sum();
            assert!(
                (layout.analytic_perimeter() - per_circle).abs() / per_circle < 1e-12,
                "n={n}"
            );
            perims.push(layout.analytic_perimeter());
        }
        assert!(perims.windows(2).all(|w| w[0] == w[1]), "{perims:?}");
    }

    #[test]
    fn const_size_area_grows_exactly_linearly() {
        let sp = spec(StimulusCategory::ConstSize);
        let area = |n: u8| {
            let mut rng = rng::stream(33, &[u64::from(n)]);
            let radii = radii_for(&sp, n, &mut rng);
            place_circles(&radii, &sp, &mut rng).unwrap().analytic_area()
        };
        let base = area(1);
        for n in 1..=7u8 {
            assert_eq!(area(n), base * n as f64, "n={n}");
        }
    }

    #[test]
    fn layout_invariants_hold_for_generated_datasets() {
        for category in StimulusCategory::ALL {
            let sp = StimulusSpec::new(category, 64, 1234);
            let ds = generate_dataset(&sp, &ALL_NUMEROSITIES, 6).unwrap();
            for item in &ds.items {
                item.layout
                    .check_invariants(&sp)
                    .unwrap_or_else(|e| panic!("{category}: {e}"));
            }
        }
    }

    #[test]
    fn spec_validation_rejects_oversized_radii() {
        let sp = StimulusSpec {
            category: StimulusCategory::ConstCirc,
            const_radius: 30.0, // n=1 radius becomes 120 > 112 - margin
            ..StimulusSpec::default()
        };
        assert!(sp.validate().is_err());
        assert!(StimulusSpec::default().validate().is_ok());
    }

    #[test]
    fn white_count_cv_small_for_const_area_at_reference_resolution() {
        let sp = spec(StimulusCategory::ConstArea);
        let mut means = Vec::new();
        for n in 1..=7u8 {
            let mut counts = Vec::new();
            for i in 0..10u32 {
                let item = generate_item(&sp, n, i).unwrap();
                counts.push(item.image.white_pixel_count() as f64);
            }
            means.push(counts.iter().sum::<f64>() / counts.len() as f64);
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        let sd =
            (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
        assert!(sd / mean <= 0.05, "cv {}", sd / mean);
    }
}
