//! Axis-aligned box arithmetic: IoU and greedy non-maximum suppression.
//!
//! Coordinates are continuous. Areas are `(x2 - x1) * (y2 - y1)` with no
//! pixel `+1` convention.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned box with strictly positive area.
///
/// Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Boundary-inclusive point test.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Indices ordered by descending score, ties broken by lower index.
pub(crate) fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression.
///
/// Repeatedly keeps the highest-scored remaining box and discards every
/// remaining box whose IoU with it exceeds `iou_threshold`. Returned indices
/// are in descending score order; equal scores keep the lower index first.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Shape(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let order = rank_desc(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(2., 2., 3., 3.)), 0.0);
        // intersection 1, union 4 + 4 - 1
        let v = iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn touching_edges_do_not_overlap() {
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(1., 0., 2., 1.)), 0.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0., 0., 0., 1.).is_err());
        assert!(BBox::new(1., 0., 0., 1.).is_err());
        assert!(BBox::new(0., 0., f64::NAN, 1.).is_err());
        assert!(serde_json::from_str::<BBox>("[0.0, 0.0, 1.0, 0.0]").is_err());
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[], &[], 0.5).unwrap(), Vec::<usize>::new());
        assert_eq!(nms(&[b(0., 0., 1., 1.)], &[0.3], 0.5).unwrap(), vec![0]);

        let same = [b(0., 0., 1., 1.), b(0., 0., 1., 1.)];
        assert_eq!(nms(&same, &[0.9, 0.5], 0.5).unwrap(), vec![0]);
        assert_eq!(nms(&same, &[0.5, 0.9], 0.5).unwrap(), vec![1]);

        // A and B overlap at IoU 0.8, C disjoint.
        let a = b(0., 0., 1., 1.);
        let bb = b(0., 0., 0.8, 1.);
        assert!((iou(&a, &bb) - 0.8).abs() < 1e-12);
        let c = b(5., 5., 6., 6.);
        assert_eq!(nms(&[a, bb, c], &[0.9, 0.6, 0.7], 0.5).unwrap(), vec![0, 2]);
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let boxes = [b(0., 0., 1., 1.), b(0., 0., 1., 1.), b(3., 3., 4., 4.)];
        assert_eq!(nms(&boxes, &[0.5, 0.5, 0.5], 0.5).unwrap(), vec![0, 2]);
    }

    #[test]
    fn nms_length_mismatch() {
        assert!(nms(&[b(0., 0., 1., 1.)], &[], 0.5).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..10.0f64, 0.0..10.0f64, 0.01..5.0f64, 0.01..5.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c);
            prop_assert_eq!(ab, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn nms_survivors_do_not_overlap(
            items in prop::collection::vec((arb_box(), 0.0..1.0f64), 0..25),
            thr in 0.1..0.9f64,
        ) {
            let boxes: Vec<BBox> = items.iter().map(|x| x.0).collect();
            let scores: Vec<f64> = items.iter().map(|x| x.1).collect();
            let keep = nms(&boxes, &scores, thr).unwrap();
            for (i, &a) in keep.iter().enumerate() {
                for &c in &keep[i + 1..] {
                    prop_assert!(iou(&boxes[a], &boxes[c]) <= thr);
                    prop_assert!(scores[a] >= scores[c]);
                }
            }
            prop_assert_eq!(keep, nms(&boxes, &scores, thr).unwrap());
        }
    }
}
