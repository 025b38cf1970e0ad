//! Synthetic bags that reproduce part domination.
//!
//! Each positive bag holds one object of its class. Proposals are drawn in
//! three geometric bands relative to the object:
//!
//! * near-object boxes, IoU >= 0.6, carrying the full class prototype;
//! * part boxes, IoU in [0.2, 0.5), jittered around a discriminative region
//!   on the class's side of the object and carrying only the prototype's
//!   discriminative third, amplified by `part_gain` and scaled by overlap
//!   with that region;
//! * background boxes, IoU < 0.2, carrying class-agnostic clutter.
//!
//! Prototypes occupy disjoint coordinate blocks, so they are orthogonal.
//! A well-placed part outscores the whole object, so an image-level
//! classifier that trusts its single best proposal locks onto parts, while
//! the part's spatial neighbours lose the evidence quickly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Bag, Dataset, GroundTruth, Proposal};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

const MAX_RETRIES: usize = 10_000;
const NEAR_MIN_IOU: f64 = 0.6;
const PART_IOU: (f64, f64) = (0.2, 0.5);
const BACKGROUND_MAX_IOU: f64 = 0.2;
const OBJECT_SIDE: (f64, f64) = (0.25, 0.6);
const BACKGROUND_SIDE: (f64, f64) = (0.08, 0.4);
const CLUTTER: f64 = 0.5;
/// Width of the discriminative region as a fraction of the object.
const REGION_FRACTION: f64 = 0.3;
/// Part boxes jitter around the region by this fraction of its size.
const PART_JITTER: f64 = 0.12;
/// Exponent on region coverage in a part's amplitude.
const PART_FALLOFF: i32 = 4;
const NEAR_JITTER: f64 = 0.08;
pub const DEFAULT_PART_GAIN: f64 = 3.0;
pub const DEFAULT_FEATURE_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub bags_per_class: usize,
    pub negatives: usize,
    pub proposals_per_bag: usize,
    pub feature_dim: usize,
    /// Fraction of object-related proposals that are parts.
    pub part_fraction: f64,
    pub noise_sigma: f64,
    /// Amplitude of the discriminative coordinates in a part that exactly
    /// covers the discriminative region.
    pub part_gain: f64,
    /// Multiplies every feature vector, noise included. Small features keep
    /// learning going across the whole default schedule.
    pub feature_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            bags_per_class: 50,
            negatives: 50,
            proposals_per_bag: 30,
            feature_dim: 24,
            part_fraction: 0.4,
            noise_sigma: 0.1,
            part_gain: DEFAULT_PART_GAIN,
            feature_scale: DEFAULT_FEATURE_SCALE,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.bags_per_class == 0 && self.negatives == 0 {
            return bad("configuration produces no bags".into());
        }
        if self.proposals_per_bag < 3 {
            return bad(format!(
                "proposals_per_bag must be >= 3, got {}",
                self.proposals_per_bag
            ));
        }
        if self.feature_dim < 3 * self.num_classes {
            return bad(format!(
                "feature_dim must be >= 3 * num_classes = {}, got {}",
                3 * self.num_classes,
                self.feature_dim
            ));
        }
        if !(0.0..=1.0).contains(&self.part_fraction) {
            return bad(format!("part_fraction {} outside [0, 1]", self.part_fraction));
        }
        if !(self.part_gain >= 0.0 && self.part_gain.is_finite()) {
            return bad(format!("part_gain {} must be a finite nonnegative", self.part_gain));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return bad(format!(
                "feature_scale {} must be finite and positive",
                self.feature_scale
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be a finite nonnegative", self.noise_sigma));
        }
        Ok(())
    }

    /// (near-object, part, background) proposal counts for a positive bag.
    pub fn band_counts(&self) -> (usize, usize, usize) {
        let p = self.proposals_per_bag;
        let background = p / 3;
        let related = p - background;
        let parts = ((self.part_fraction * related as f64).round() as usize).min(related - 1);
        (related - parts, parts, background)
    }

    fn block(&self) -> usize {
        self.feature_dim / self.num_classes
    }
}

/// Side of the object that holds the class's discriminative part.
#[derive(Clone, Copy)]
enum Side {
    Left,
    Top,
    Right,
    Bottom,
}

impl Side {
    fn of_class(c: usize) -> Self {
        match c % 4 {
            0 => Side::Left,
            1 => Side::Top,
            2 => Side::Right,
            _ => Side::Bottom,
        }
    }

    /// Sub-box covering fraction `f` of `obj`, anchored on this side.
    fn slice(self, obj: &BBox, f: f64) -> [f64; 4] {
        let [x1, y1, x2, y2] = obj.to_array();
        let (w, h) = (obj.width(), obj.height());
        match self {
            Side::Left => [x1, y1, x1 + f * w, y2],
            Side::Top => [x1, y1, x2, y1 + f * h],
            Side::Right => [x2 - f * w, y1, x2, y2],
            Side::Bottom => [x1, y2 - f * h, x2, y2],
        }
    }
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
}

impl Generator<'_> {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    fn jitter(&mut self, b: [f64; 4], w: f64, h: f64, amount: f64) -> Option<BBox> {
        let j = [
            b[0] + self.uniform(-amount, amount) * w,
            b[1] + self.uniform(-amount, amount) * h,
            b[2] + self.uniform(-amount, amount) * w,
            b[3] + self.uniform(-amount, amount) * h,
        ];
        let c = [
            j[0].clamp(0.0, 1.0),
            j[1].clamp(0.0, 1.0),
            j[2].clamp(0.0, 1.0),
            j[3].clamp(0.0, 1.0),
        ];
        BBox::new(c[0], c[1], c[2], c[3]).ok()
    }

    fn random_box(&mut self, lo: f64, hi: f64) -> BBox {
        let w = self.uniform(lo, hi);
        let h = self.uniform(lo, hi);
        let x = self.uniform(0.0, 1.0 - w);
        let y = self.uniform(0.0, 1.0 - h);
        BBox::new(x, y, x + w, y + h).expect("positive side lengths")
    }

    fn sample<F>(&mut self, what: &str, mut draw: F) -> Result<BBox>
    where
        F: FnMut(&mut Self) -> Option<BBox>,
    {
        for _ in 0..MAX_RETRIES {
            if let Some(b) = draw(self) {
                return Ok(b);
            }
        }
        Err(Error::Generation(format!(
            "could not place a {what} box after {MAX_RETRIES} attempts"
        )))
    }

    fn near_object(&mut self, obj: &BBox) -> Result<BBox> {
        let (w, h) = (obj.width(), obj.height());
        self.sample("near-object", |g| {
            g.jitter(obj.to_array(), w, h, NEAR_JITTER)
                .filter(|b| iou(b, obj) >= NEAR_MIN_IOU)
        })
    }

    /// Jitter of the discriminative region, kept inside the part band.
    fn part(&mut self, obj: &BBox, region: &BBox) -> Result<BBox> {
        let (w, h) = (region.width(), region.height());
        self.sample("part", |g| {
            g.jitter(region.to_array(), w, h, PART_JITTER).filter(|b| {
                let o = iou(b, obj);
                (PART_IOU.0..PART_IOU.1).contains(&o)
            })
        })
    }

    fn background(&mut self, objects: &[BBox]) -> Result<BBox> {
        self.sample("background", |g| {
            let b = g.random_box(BACKGROUND_SIDE.0, BACKGROUND_SIDE.1);
            objects.iter().all(|o| iou(&b, o) < BACKGROUND_MAX_IOU).then_some(b)
        })
    }

    fn scaled(&self, mut f: Vec<f64>) -> Vec<f64> {
        for v in &mut f {
            *v *= self.cfg.feature_scale;
        }
        f
    }

    fn noise_vec(&mut self) -> Vec<f64> {
        (0..self.cfg.feature_dim)
            .map(|_| self.noise.sample(&mut self.rng))
            .collect()
    }

    fn object_feature(&mut self, class: usize) -> Vec<f64> {
        let block = self.cfg.block();
        let start = class * block;
        let mut f = self.noise_vec();
        for v in &mut f[start..start + block] {
            *v += 1.0;
        }
        f
    }

    fn part_feature(&mut self, class: usize, coverage: f64) -> Vec<f64> {
        let start = class * self.cfg.block();
        let disc = self.cfg.block() / 3;
        let amp = self.cfg.part_gain * coverage.powi(PART_FALLOFF);
        let mut f = self.noise_vec();
        for v in &mut f[start..start + disc] {
            *v += amp;
        }
        f
    }

    fn background_feature(&mut self) -> Vec<f64> {
        let mut f = self.noise_vec();
        for v in &mut f {
            *v += self.rng.random_range(0.0..CLUTTER);
        }
        f
    }

    fn positive_bag(&mut self, class: usize, index: usize) -> Result<Bag> {
        let obj = self.random_box(OBJECT_SIDE.0, OBJECT_SIDE.1);
        let region = BBox::try_from(Side::of_class(class).slice(&obj, REGION_FRACTION))?;
        let (near, parts, background) = self.cfg.band_counts();
        let mut proposals = Vec::with_capacity(self.cfg.proposals_per_bag);
        for _ in 0..near {
            let bbox = self.near_object(&obj)?;
            let feature = self.object_feature(class);
            proposals.push(Proposal {
                bbox,
                feature: self.scaled(feature),
            });
        }
        for _ in 0..parts {
            let bbox = self.part(&obj, &region)?;
            let feature = self.part_feature(class, iou(&bbox, &region));
            proposals.push(Proposal {
                bbox,
                feature: self.scaled(feature),
            });
        }
        for _ in 0..background {
            let bbox = self.background(&[obj])?;
            let feature = self.background_feature();
            proposals.push(Proposal {
                bbox,
                feature: self.scaled(feature),
            });
        }
        let mut labels = vec![0; self.cfg.num_classes];
        labels[class] = 1;
        Ok(Bag {
            id: format!("pos-c{class}-{index:04}"),
            labels,
            proposals,
            ground_truth: Some(vec![GroundTruth { class, bbox: obj }]),
        })
    }

    fn negative_bag(&mut self, index: usize) -> Result<Bag> {
        let mut proposals = Vec::with_capacity(self.cfg.proposals_per_bag);
        for _ in 0..self.cfg.proposals_per_bag {
            let bbox = self.background(&[])?;
            let feature = self.background_feature();
            proposals.push(Proposal {
                bbox,
                feature: self.scaled(feature),
            });
        }
        Ok(Bag {
            id: format!("neg-{index:04}"),
            labels: vec![0; self.cfg.num_classes],
            proposals,
            ground_truth: Some(Vec::new()),
        })
    }
}

/// Generates a dataset as a pure function of `cfg` (seed included).
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut g = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        noise: Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?,
    };
    let mut bags = Vec::with_capacity(cfg.num_classes * cfg.bags_per_class + cfg.negatives);
    for class in 0..cfg.num_classes {
        for i in 0..cfg.bags_per_class {
            bags.push(g.positive_bag(class, i)?);
        }
    }
    for i in 0..cfg.negatives {
        bags.push(g.negative_bag(i)?);
    }
    let ds = Dataset {
        classes: (0..cfg.num_classes).map(|c| format!("class{c}")).collect(),
        feature_dim: cfg.feature_dim,
        bags,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            bags_per_class: 6,
            negatives: 4,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn single_positive_bag() {
        let cfg = SynthConfig {
            num_classes: 1,
            bags_per_class: 1,
            negatives: 0,
            feature_dim: 6,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.bags.len(), 1);
        assert_eq!(ds.bags[0].labels, vec![1]);
        assert!(!ds.bags[0].ground_truth.as_ref().unwrap().is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = serde_json::to_vec(&generate_synthetic(&small(3)).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_synthetic(&small(3)).unwrap()).unwrap();
        let c = serde_json::to_vec(&generate_synthetic(&small(4)).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn no_parts_without_part_fraction() {
        let cfg = SynthConfig {
            part_fraction: 0.0,
            ..small(11)
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for bag in &ds.bags {
            for g in bag.ground_truth.iter().flatten() {
                for p in &bag.proposals {
                    let o = iou(&p.bbox, &g.bbox);
                    assert!(!(0.2..0.5).contains(&o), "bag {} has part IoU {o}", bag.id);
                }
            }
        }
    }

    #[test]
    fn bands_boxes_and_labels_are_consistent() {
        let ds = generate_synthetic(&small(5)).unwrap();
        let cfg = small(5);
        let (near, parts, bg) = cfg.band_counts();
        for bag in &ds.bags {
            let gts = bag.ground_truth.as_ref().unwrap();
            for c in 0..ds.num_classes() {
                assert_eq!(bag.is_positive(c), gts.iter().any(|g| g.class == c));
            }
            for p in &bag.proposals {
                let b = p.bbox;
                assert!(b.x1() >= 0.0 && b.y1() >= 0.0 && b.x2() <= 1.0 && b.y2() <= 1.0);
            }
            if let Some(g) = gts.first() {
                let o: Vec<f64> = bag.proposals.iter().map(|p| iou(&p.bbox, &g.bbox)).collect();
                assert!(o[..near].iter().all(|&v| v >= 0.6));
                assert!(o[near..near + parts].iter().all(|&v| (0.2..0.5).contains(&v)));
                assert!(o[near + parts..].iter().all(|&v| v < 0.2));
                assert_eq!(o.len(), near + parts + bg);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = SynthConfig::default();
        for cfg in [
            SynthConfig {
                proposals_per_bag: 2,
                ..base.clone()
            },
            SynthConfig {
                feature_dim: 5,
                ..base.clone()
            },
            SynthConfig {
                part_fraction: 1.5,
                ..base.clone()
            },
            SynthConfig {
                noise_sigma: -1.0,
                ..base.clone()
            },
            SynthConfig {
                num_classes: 0,
                ..base.clone()
            },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::InvalidConfig(_))));
        }
    }
}
