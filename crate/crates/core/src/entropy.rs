//! Clique partition and the two min-entropy losses.
//!
//! The discovery loss works on a softmax over the whole (clique x class)
//! table of per-clique mean scores. The localization loss works on the
//! per-proposal class softmax inside the discovered clique, with the soft
//! pseudo-labels `w_h * p` held constant during differentiation.
//!
//! Every log and denominator is floored at [`EPS`]; where the floor is
//! active the returned gradient is zero, matching the floored forward value.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::{iou, rank_desc, BBox};
use crate::model::Scores;

pub const EPS: f64 = 1e-12;

/// Overlap below which a clique member counts as a hard negative of `h*`.
pub const HARD_NEGATIVE_IOU: f64 = 0.5;

fn ln_floor(x: f64) -> f64 {
    x.max(EPS).ln()
}

/// Softmax over classes within each proposal row.
pub fn softmax_rows(scores: &Scores) -> Array2<f64> {
    let mut out = scores.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clique {
    /// Proposal indices, seed first, then in absorption order.
    pub members: Vec<usize>,
}

impl Clique {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, h: usize) -> bool {
        self.members.contains(&h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliquePartition {
    pub cliques: Vec<Clique>,
    /// Top-k proposal indices by objectness, highest first.
    pub pool: Vec<usize>,
    pub tau: f64,
}

impl CliquePartition {
    pub fn clique_of(&self, h: usize) -> Option<usize> {
        self.cliques.iter().position(|c| c.contains(h))
    }

    pub fn is_empty(&self) -> bool {
        self.cliques.is_empty()
    }
}

/// Greedy clique partition of the `top_k` highest-objectness proposals.
///
/// The highest-scored unassigned proposal seeds a clique, which then absorbs
/// every unassigned pool member overlapping any clique member with
/// IoU > `tau`, until closure. Repeats until the pool is exhausted.
pub fn partition_cliques(boxes: &[BBox], objectness: &[f64], tau: f64, top_k: usize) -> Result<CliquePartition> {
    if boxes.len() != objectness.len() {
        return Err(Error::Shape(format!(
            "{} boxes but {} objectness values",
            boxes.len(),
            objectness.len()
        )));
    }
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    if objectness.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("objectness must be finite".into()));
    }
    let mut pool = rank_desc(objectness);
    pool.truncate(top_k);

    let mut assigned = vec![false; pool.len()];
    let mut cliques = Vec::new();
    for seed in 0..pool.len() {
        if assigned[seed] {
            continue;
        }
        assigned[seed] = true;
        let mut members = vec![pool[seed]];
        let mut frontier = 0;
        while frontier < members.len() {
            let m = members[frontier];
            frontier += 1;
            for (slot, &cand) in pool.iter().enumerate() {
                if !assigned[slot] && iou(&boxes[m], &boxes[cand]) > tau {
                    assigned[slot] = true;
                    members.push(cand);
                }
            }
        }
        cliques.push(Clique { members });
    }
    Ok(CliquePartition { cliques, pool, tau })
}

/// Per-clique mean scores, `num_cliques x num_classes`.
pub fn clique_means(partition: &CliquePartition, scores: &Scores) -> Result<Array2<f64>> {
    let n = scores.ncols();
    let mut means = Array2::zeros((partition.cliques.len(), n));
    for (c, clique) in partition.cliques.iter().enumerate() {
        for &h in &clique.members {
            if h >= scores.nrows() {
                return Err(Error::Shape(format!(
                    "clique member {h} out of range for {} proposals",
                    scores.nrows()
                )));
            }
            let mut row = means.row_mut(c);
            row += &scores.row(h);
        }
        let mut row = means.row_mut(c);
        row /= clique.len() as f64;
    }
    Ok(means)
}

/// `p(y, H_c)`: softmax over the full (clique x class) table of mean scores.
pub fn clique_class_probs(partition: &CliquePartition, scores: &Scores) -> Result<Array2<f64>> {
    Ok(table_softmax(&clique_means(partition, scores)?))
}

fn table_softmax(means: &Array2<f64>) -> Array2<f64> {
    let m = means.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut p = means.mapv(|v| (v - m).exp());
    let z = p.sum();
    p /= z;
    p
}

/// `w_{H_c}`: each clique's probabilities renormalized over classes.
pub fn clique_weights(clique_probs: &Array2<f64>) -> Array2<f64> {
    let mut w = clique_probs.to_owned();
    for mut row in w.rows_mut() {
        let z = row.sum().max(EPS);
        row /= z;
    }
    w
}

/// `-log sum_c w_{H_c} p(y, H_c)` for one class.
pub fn global_entropy(clique_probs: &Array2<f64>, clique_weights: &Array2<f64>, class: usize) -> f64 {
    let z: f64 = clique_probs
        .column(class)
        .iter()
        .zip(clique_weights.column(class))
        .map(|(p, w)| p * w)
        .sum();
    -ln_floor(z)
}

/// Clique with the largest summand `w_{H_c} p(y, H_c)`; ties go to the lower index.
pub fn select_clique(clique_probs: &Array2<f64>, clique_weights: &Array2<f64>, class: usize) -> usize {
    let summands: Vec<f64> = clique_probs
        .column(class)
        .iter()
        .zip(clique_weights.column(class))
        .map(|(p, w)| p * w)
        .collect();
    argmax_first(&summands)
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct DiscoveryOutput {
    pub clique_means: Array2<f64>,
    pub clique_probs: Array2<f64>,
    pub clique_weights: Array2<f64>,
    /// `(class, clique index)` for each positive class.
    pub selected: Vec<(usize, usize)>,
    /// `(class, entropy)` for each positive class.
    pub global_entropy: Vec<(usize, f64)>,
    pub loss: f64,
    /// Gradient of `loss` with respect to the discovery scores.
    pub grad: Scores,
}

impl DiscoveryOutput {
    pub fn selected_clique(&self, class: usize) -> Option<usize> {
        self.selected.iter().find(|s| s.0 == class).map(|s| s.1)
    }

    pub fn mean_global_entropy(&self) -> Option<f64> {
        if self.global_entropy.is_empty() {
            None
        } else {
            Some(self.global_entropy.iter().map(|e| e.1).sum::<f64>() / self.global_entropy.len() as f64)
        }
    }
}

/// Discovery loss with its analytic gradient.
///
/// Positive classes contribute their global entropy; negative classes
/// contribute `-sum_h log(1 - p(y, h))` over all proposals, with `p` the
/// per-proposal class softmax of `scores`.
pub fn discovery_loss(labels: &[u8], partition: &CliquePartition, scores: &Scores) -> Result<DiscoveryOutput> {
    let n = scores.ncols();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} score columns", labels.len())));
    }
    let positives: Vec<usize> = (0..n).filter(|&c| labels[c] == 1).collect();
    if !positives.is_empty() && partition.is_empty() {
        return Err(Error::Shape("positive labels require at least one clique".into()));
    }

    let means = clique_means(partition, scores)?;
    let probs = table_softmax(&means);
    let weights = clique_weights(&probs);
    let mut grad = Array2::zeros(scores.raw_dim());
    let mut grad_means = Array2::<f64>::zeros(means.raw_dim());
    let mut loss = 0.0;
    let mut entropies = Vec::with_capacity(positives.len());
    let mut selected = Vec::with_capacity(positives.len());

    for &y in &positives {
        let summands: Vec<f64> = (0..means.nrows()).map(|c| weights[[c, y]] * probs[[c, y]]).collect();
        let z: f64 = summands.iter().sum();
        let e = -ln_floor(z);
        loss += e;
        entropies.push((y, e));
        selected.push((y, argmax_first(&summands)));
        if z < EPS {
            continue;
        }
        // dE/dM[c,k] = P[c,k] - T[c] (2[k=y] - W[c,k]) / Z,  T[c] = W[c,y] P[c,y]
        for c in 0..means.nrows() {
            for k in 0..n {
                let delta = if k == y { 2.0 } else { 0.0 };
                grad_means[[c, k]] += probs[[c, k]] - summands[c] * (delta - weights[[c, k]]) / z;
            }
        }
    }
    for (c, clique) in partition.cliques.iter().enumerate() {
        let inv = 1.0 / clique.len() as f64;
        for &h in &clique.members {
            let mut row = grad.row_mut(h);
            row.scaled_add(inv, &grad_means.row(c));
        }
    }

    let negatives: Vec<usize> = (0..n).filter(|&c| labels[c] == 0).collect();
    if !negatives.is_empty() {
        let p = softmax_rows(scores);
        for &y in &negatives {
            for h in 0..scores.nrows() {
                let q: f64 = (0..n).filter(|&k| k != y).map(|k| p[[h, k]]).sum();
                loss -= ln_floor(q);
                if q < EPS {
                    continue;
                }
                let py = p[[h, y]];
                for k in 0..n {
                    let delta = if k == y { 1.0 } else { 0.0 };
                    grad[[h, k]] += py * (delta - p[[h, k]]) / q;
                }
            }
        }
    }

    Ok(DiscoveryOutput {
        clique_means: means,
        clique_probs: probs,
        clique_weights: weights,
        selected,
        global_entropy: entropies,
        loss,
        grad,
    })
}

/// `exp(-a (1 - o)^2)`.
pub fn gaussian_kernel(o: f64, a: f64) -> f64 {
    (-a * (1.0 - o).powi(2)).exp()
}

/// Soft weights `w_h = sum(g p) / (p_h sum(g))` over the neighbourhood.
///
/// `probs` are each member's probability for the class and `ious` each
/// member's overlap with `h*`. Probabilities are floored at [`EPS`].
pub fn soft_weights(probs: &[f64], ious: &[f64], a: f64) -> Result<Vec<f64>> {
    if probs.is_empty() || probs.len() != ious.len() {
        return Err(Error::Shape(format!(
            "soft_weights: {} probabilities, {} overlaps",
            probs.len(),
            ious.len()
        )));
    }
    let g: Vec<f64> = ious.iter().map(|&o| gaussian_kernel(o, a)).collect();
    let sum_g: f64 = g.iter().sum();
    let sum_gp: f64 = g.iter().zip(probs).map(|(g, p)| g * p.max(EPS)).sum();
    Ok(probs.iter().map(|p| sum_gp / (p.max(EPS) * sum_g.max(EPS))).collect())
}

/// Clique member with the highest class probability; ties go to the earlier member.
pub fn select_object(clique: &Clique, proposal_probs: &Array2<f64>, class: usize) -> usize {
    let values: Vec<f64> = clique.members.iter().map(|&h| proposal_probs[[h, class]]).collect();
    clique.members[argmax_first(&values)]
}

/// Clique members overlapping `h*` below [`HARD_NEGATIVE_IOU`].
pub fn hard_negatives(clique: &Clique, h_star: usize, boxes: &[BBox]) -> Vec<usize> {
    clique
        .members
        .iter()
        .copied()
        .filter(|&h| h != h_star && iou(&boxes[h], &boxes[h_star]) < HARD_NEGATIVE_IOU)
        .collect()
}

#[derive(Debug, Clone)]
pub struct LocalizationOutput {
    pub h_star: usize,
    /// Neighbourhood of `h*`: the members of the supervising clique.
    pub members: Vec<usize>,
    pub soft_weights: Vec<f64>,
    /// Detached pseudo-labels `w_h * p(y, h)`, aligned with `members`.
    pub pseudo_labels: Vec<f64>,
    pub local_entropy: f64,
    pub loss: f64,
    /// Gradient of `loss` with respect to the localization scores.
    pub grad: Scores,
}

/// Local min-entropy loss `-sum_h w_h p log p` over the clique, with the
/// factor `w_h p` treated as a constant pseudo-label.
pub fn localization_loss(
    clique: &Clique,
    h_star: usize,
    proposal_probs: &Array2<f64>,
    boxes: &[BBox],
    a: f64,
    class: usize,
) -> Result<LocalizationOutput> {
    if !clique.contains(h_star) {
        return Err(Error::Shape(format!("h* = {h_star} is not a clique member")));
    }
    if proposal_probs.nrows() != boxes.len() || class >= proposal_probs.ncols() {
        return Err(Error::Shape(format!(
            "probabilities {:?} for {} boxes, class {class}",
            proposal_probs.dim(),
            boxes.len()
        )));
    }
    let members = clique.members.clone();
    let p: Vec<f64> = members.iter().map(|&h| proposal_probs[[h, class]]).collect();
    let overlaps: Vec<f64> = members.iter().map(|&h| iou(&boxes[h], &boxes[h_star])).collect();
    let w = soft_weights(&p, &overlaps, a)?;
    let pseudo: Vec<f64> = w.iter().zip(&p).map(|(w, p)| w * p.max(EPS)).collect();

    let mut grad = Array2::zeros(proposal_probs.raw_dim());
    let mut loss = 0.0;
    for ((&h, &ph), &c) in members.iter().zip(&p).zip(&pseudo) {
        loss -= c * ln_floor(ph);
        if ph < EPS {
            continue;
        }
        // d(-c log p_y)/ds_k = -c ([k = y] - p_k)
        let mut row = grad.row_mut(h);
        row.scaled_add(c, &proposal_probs.row(h));
        row[class] -= c;
    }
    Ok(LocalizationOutput {
        h_star,
        members,
        soft_weights: w,
        pseudo_labels: pseudo,
        local_entropy: loss,
        loss,
        grad,
    })
}
