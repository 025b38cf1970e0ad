//! Clique partition against an independent connected-components oracle, and
//! the normalization properties of the probability tables.

mod common;

use std::collections::BTreeSet;

use melm::entropy::{
    clique_class_probs, clique_weights, partition_cliques, select_clique, select_object, softmax_rows, Clique,
};
use melm::geometry::BBox;
use ndarray::Array2;
use proptest::prelude::*;

use common::component_oracle;

fn boxes_strategy(max: usize) -> impl Strategy<Value = Vec<BBox>> {
    prop::collection::vec((0.0..0.8f64, 0.0..0.8f64, 0.02..0.5f64, 0.02..0.5f64), 1..=max).prop_map(|v| {
        v.into_iter()
            .map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
            .collect()
    })
}

/// Boxes paired with objectness drawn from a small grid, so ties are common.
fn instance(max: usize) -> impl Strategy<Value = (Vec<BBox>, Vec<f64>)> {
    boxes_strategy(max).prop_flat_map(|boxes| {
        let n = boxes.len();
        (
            Just(boxes),
            prop::collection::vec((0u8..6).prop_map(|v| f64::from(v) / 5.0), n),
        )
    })
}

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-range..range, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn partition_matches_component_oracle(
        (boxes, obj) in instance(24),
        tau in prop::sample::select(vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]),
        top_k in 1usize..30,
    ) {
        let part = partition_cliques(&boxes, &obj, tau, top_k).unwrap();
        let got: Vec<BTreeSet<usize>> = part.cliques.iter().map(|c| c.members.iter().copied().collect()).collect();
        prop_assert_eq!(&got, &component_oracle(&boxes, &obj, tau, top_k));

        // Exact cover of the pool, nothing outside it, no repeats.
        let all: Vec<usize> = part.cliques.iter().flat_map(|c| c.members.iter().copied()).collect();
        let set: BTreeSet<usize> = all.iter().copied().collect();
        prop_assert_eq!(all.len(), set.len());
        prop_assert_eq!(set, part.pool.iter().copied().collect::<BTreeSet<_>>());
        prop_assert_eq!(part.pool.len(), top_k.min(boxes.len()));
        for c in &part.cliques {
            prop_assert!(!c.is_empty());
        }
    }

    #[test]
    fn probability_tables_are_normalized(
        (scores, groups) in (1usize..10, 1usize..5).prop_flat_map(|(n, c)| {
            // Spread kept small enough that no clique row falls under the log floor.
            (matrix(n, c, 10.0), prop::collection::vec(0usize..4, n))
        }),
    ) {
        // Proposals grouped by label, groups numbered by first appearance.
        let mut cliques: Vec<(usize, Clique)> = Vec::new();
        for (h, &g) in groups.iter().enumerate() {
            match cliques.iter_mut().find(|c| c.0 == g) {
                Some(c) => c.1.members.push(h),
                None => cliques.push((g, Clique { members: vec![h] })),
            }
        }
        let part = melm::entropy::CliquePartition {
            cliques: cliques.into_iter().map(|c| c.1).collect(),
            pool: (0..groups.len()).collect(),
            tau: 0.5,
        };
        let p = clique_class_probs(&part, &scores).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-9);
        let w = clique_weights(&p);
        for row in w.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn proposal_softmax_rows_sum_to_one(s in (1usize..8, 1usize..5).prop_flat_map(|(r, c)| matrix(r, c, 30.0))) {
        for row in softmax_rows(&s).rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn selections_ignore_a_common_shift(
        s in (2usize..7, 1usize..4).prop_flat_map(|(r, c)| matrix(r, c, 30.0)),
        shift in -50.0..50.0f64,
    ) {
        let n = s.nrows();
        let part = melm::entropy::CliquePartition {
            cliques: vec![Clique { members: (0..n / 2).collect() }, Clique { members: (n / 2..n).collect() }]
                .into_iter()
                .filter(|c| !c.is_empty())
                .collect(),
            pool: (0..n).collect(),
            tau: 0.5,
        };
        let shifted = &s + shift;
        let (p, q) = (clique_class_probs(&part, &s).unwrap(), clique_class_probs(&part, &shifted).unwrap());
        for (a, b) in p.iter().zip(q.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for class in 0..s.ncols() {
            prop_assert_eq!(
                select_clique(&p, &clique_weights(&p), class),
                select_clique(&q, &clique_weights(&q), class)
            );
            let clique = &part.cliques[0];
            prop_assert_eq!(
                select_object(clique, &softmax_rows(&s), class),
                select_object(clique, &softmax_rows(&shifted), class)
            );
        }
    }
}

#[test]
fn closure_chains_through_intermediate_boxes() {
    // 0 and 2 do not overlap, but both overlap 1.
    let boxes = [
        BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
        BBox::new(0.5, 0.0, 1.5, 1.0).unwrap(),
        BBox::new(1.0, 0.0, 2.0, 1.0).unwrap(),
        BBox::new(5.0, 5.0, 6.0, 6.0).unwrap(),
    ];
    let part = partition_cliques(&boxes, &[0.9, 0.1, 0.8, 0.5], 0.3, 10).unwrap();
    assert_eq!(part.cliques.len(), 2);
    assert_eq!(part.cliques[0].members, vec![0, 1, 2]);
    assert_eq!(part.cliques[1].members, vec![3]);
}
