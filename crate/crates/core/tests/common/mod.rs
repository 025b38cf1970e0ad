//! Oracles shared by several test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use melm::geometry::{iou, BBox};
use ndarray::Array2;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Norm-wise relative error; gradients that vanish (one class, say) are
/// compared against a floor instead of their own roundoff.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// Central differences of `f` at `x`, in row-major order.
pub fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    out
}

pub fn random_box(rng: &mut impl Rng) -> BBox {
    let x = rng.random_range(0.0..0.6);
    let y = rng.random_range(0.0..0.6);
    let w = rng.random_range(0.1..0.4);
    let h = rng.random_range(0.1..0.4);
    BBox::new(x, y, x + w, y + h).unwrap()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// `-sum_h c_h log softmax(s_h)[class]` with the weights `c` held fixed.
pub fn frozen_local_objective(s: &Array2<f64>, members: &[usize], c: &[f64], class: usize) -> f64 {
    let mut total = 0.0;
    for (&h, &ch) in members.iter().zip(c) {
        let row = s.row(h);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let p = ((row[class] - m).exp() / z).max(melm::entropy::EPS);
        total -= ch * p.ln();
    }
    total
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = i;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

/// Cliques as connected components of the "IoU > tau" graph over the top-k
/// pool (ties in objectness broken by index), ordered by best-ranked member.
pub fn component_oracle(boxes: &[BBox], obj: &[f64], tau: f64, top_k: usize) -> Vec<BTreeSet<usize>> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| obj[b].partial_cmp(&obj[a]).unwrap().then(a.cmp(&b)));
    order.truncate(top_k);
    let n = order.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if iou(&boxes[order[i]], &boxes[order[j]]) > tau {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut comps: Vec<(usize, BTreeSet<usize>)> = Vec::new();
    for (i, &h) in order.iter().enumerate() {
        let root = find(&mut parent, i);
        match comps.iter_mut().find(|c| c.0 == root) {
            Some(c) => {
                c.1.insert(h);
            }
            None => comps.push((root, BTreeSet::from([h]))),
        }
    }
    comps.into_iter().map(|c| c.1).collect()
}

/// `(1/G) sum_i max{ precision_j : recall_j >= i/G }`, zero when no rank reaches the level.
pub fn brute_force_ap(flags: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (j, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        points.push((tp as f64 / num_gt as f64, tp as f64 / (j + 1) as f64));
    }
    let mut total = 0.0;
    for i in 1..=num_gt {
        let level = i as f64 / num_gt as f64;
        total += points
            .iter()
            .filter(|(r, _)| *r >= level - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
    }
    total / num_gt as f64
}

/// Every TP/FP sequence of length up to `max_len`, the empty one included.
pub fn all_flag_sequences(max_len: usize) -> Vec<Vec<bool>> {
    let mut out = vec![vec![]];
    for len in 1..=max_len {
        for bits in 0..(1u32 << len) {
            out.push((0..len).map(|i| bits >> i & 1 == 1).collect());
        }
    }
    out
}
