//! Randomised invariants over the numeric core: softmax structure, shape
//! round-trips, attention block contracts, fusion algebra, metric oracles,
//! and dataset splitting.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skinfuse::blocks::{fusion_param_count, AttentionBlock, FusionKind};
use skinfuse::data::{split_records, CaseRecord, TaskSchema};
use skinfuse::eval::{
    auc_binary, auc_pairwise, fuse_cases, simplex_grid, weight_search, weighted_fuse,
    FusionWeights, SearchObjective,
};
use skinfuse::model::PredictionSet;
use skinfuse::rng::Streams;
use skinfuse::tensor::{Graph, Tensor};
use skinfuse::train::total_loss;

fn schema_counts() -> Vec<usize> {
    TaskSchema::seven_point().category_counts()
}

/// A probability vector of length `k`, bounded away from zero so that
/// log-losses stay finite.
fn probs(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.02f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn branch_probs() -> impl Strategy<Value = Vec<Vec<f64>>> {
    schema_counts().into_iter().map(probs).collect::<Vec<_>>()
}

fn prediction_set() -> impl Strategy<Value = PredictionSet> {
    (branch_probs(), branch_probs(), branch_probs())
        .prop_map(|(derm, clin, fusion)| PredictionSet { derm, clin, fusion })
}

fn label_row() -> impl Strategy<Value = Vec<usize>> {
    schema_counts().into_iter().map(|k| 0..k).collect::<Vec<_>>()
}

fn untagged_case(i: usize) -> CaseRecord {
    CaseRecord {
        id: format!("case{i:03}"),
        clin: Tensor::zeros(&[2, 2, 3]),
        derm: Tensor::zeros(&[2, 2, 3]),
        labels: vec![0; TaskSchema::seven_point().n_tasks()],
        split: None,
    }
}

proptest! {
    /// Every softmax row is a probability distribution, and adding one
    /// constant to a whole row moves the output by at most rounding noise.
    #[test]
    fn softmax_rows_are_stochastic_and_shift_invariant(
        dims in (1usize..=4, 2usize..=6),
        seed in any::<u64>(),
    ) {
        let (m, n) = dims;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..m * n).map(|_| r.gen_range(-10.0..10.0)).collect();
        let shifts: Vec<f64> = (0..m).map(|_| r.gen_range(-20.0..20.0)).collect();
        let shifted: Vec<f64> =
            data.iter().enumerate().map(|(i, &v)| v + shifts[i / n]).collect();

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![m, n], data).unwrap());
        let xs = g.constant(Tensor::new(vec![m, n], shifted).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let ys = g.softmax_rows(xs).unwrap();

        for row in g.value(y).data().chunks(n) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12, "row sum {s}");
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        prop_assert!(
            g.value(y).approx_eq(g.value(ys), 1e-12),
            "row shifts changed the softmax output"
        );
    }

    /// Reshaping is a pure relabelling: a round trip restores the exact bits.
    #[test]
    fn reshape_round_trips_bit_for_bit(
        dims in (1usize..=3, 1usize..=3, 1usize..=4),
        seed in any::<u64>(),
    ) {
        let (a, b, c) = dims;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..a * b * c).map(|_| r.gen_range(-5.0..5.0)).collect();
        let t = Tensor::new(vec![a, b, c], data).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let flat = g.reshape(x, &[c, a * b]).unwrap();
        let back = g.reshape(flat, &[a, b, c]).unwrap();
        prop_assert!(g.value(back).bit_eq(&t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The attention block refines the target without changing its shape,
    /// and each attention map row is a probability distribution.
    #[test]
    fn attention_refinement_keeps_the_target_shape(
        dims in (1usize..=4, 1usize..=4, 1usize..=8),
        scale in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let (h, w, c) = dims;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let block = AttentionBlock::init(c, scale, &Streams::new(seed).derive("block"));
        let mk = |r: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..h * w * c).map(|_| r.gen_range(-2.0..2.0)).collect();
            Tensor::new(vec![h, w, c], data).unwrap()
        };
        let guide = mk(&mut r);
        let target = mk(&mut r);
        let mut g = Graph::new();
        let gv = g.constant(guide);
        let tv = g.constant(target.clone());
        let (refined, map) = block.forward(&mut g, gv, tv).unwrap();
        prop_assert_eq!(g.value(refined).shape(), target.shape());
        prop_assert_eq!(map.shape(), &[h * w, h * w]);
        for row in map.data().chunks(h * w) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9, "attention row sum {s}");
        }
    }
}

proptest! {
    /// One-way attention costs exactly half of two-way attention at every
    /// channel width, and concatenation adds no attention parameters.
    #[test]
    fn one_way_attention_costs_exactly_half_of_two_way(c in 1usize..=64) {
        prop_assert_eq!(
            2 * fusion_param_count(FusionKind::Aab, c),
            fusion_param_count(FusionKind::Bab, c)
        );
        prop_assert_eq!(fusion_param_count(FusionKind::Cat, c), 0);
    }

    /// A weighted fusion of probability vectors is again a probability
    /// vector, and every fused entry lies inside the branch envelope.
    #[test]
    fn fused_probabilities_stay_on_the_simplex(
        preds in prediction_set(),
        raw in (0.01f64..5.0, 0.01f64..5.0, 0.01f64..5.0),
    ) {
        let w = FusionWeights::normalized(raw.0, raw.1, raw.2).unwrap();
        let fused = weighted_fuse(&preds, w).unwrap();
        for (t, task) in fused.iter().enumerate() {
            let s: f64 = task.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9, "task {t} sum {s}");
            for (k, &p) in task.iter().enumerate() {
                let lo = preds.derm[t][k].min(preds.clin[t][k]).min(preds.fusion[t][k]);
                let hi = preds.derm[t][k].max(preds.clin[t][k]).max(preds.fusion[t][k]);
                prop_assert!(
                    p >= lo - 1e-12 && p <= hi + 1e-12,
                    "task {t} category {k}: fused {p} outside [{lo}, {hi}]"
                );
            }
        }
    }

    /// Scaling a weight triple by a positive constant before normalisation
    /// cannot change any decision with a detectable winner.
    #[test]
    fn fused_argmax_is_invariant_under_weight_rescaling(
        preds in prediction_set(),
        raw in (0.01f64..5.0, 0.01f64..5.0, 0.01f64..5.0),
        k in 0.01f64..50.0,
    ) {
        let w1 = FusionWeights::normalized(raw.0, raw.1, raw.2).unwrap();
        let w2 = FusionWeights::normalized(k * raw.0, k * raw.1, k * raw.2).unwrap();
        let f1 = weighted_fuse(&preds, w1).unwrap();
        let f2 = weighted_fuse(&preds, w2).unwrap();
        for (t1, t2) in f1.iter().zip(&f2) {
            let mut sorted = t1.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted.len() > 1 && sorted[0] - sorted[1] > 1e-9 {
                prop_assert_eq!(skinfuse::eval::argmax(t1), skinfuse::eval::argmax(t2));
            }
        }
    }

    /// Proportions survive normalisation.
    #[test]
    fn normalised_weights_sum_to_one_and_keep_ratios(
        raw in (0.01f64..10.0, 0.01f64..10.0, 0.01f64..10.0),
    ) {
        let w = FusionWeights::normalized(raw.0, raw.1, raw.2).unwrap();
        let total = w.derm() + w.clin() + w.fusion();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        let expected = raw.1 / raw.0;
        let actual = w.clin() / w.derm();
        prop_assert!(
            ((actual - expected) / expected).abs() <= 1e-9,
            "ratio drifted: {actual} vs {expected}"
        );
    }

    /// The rank-statistic AUC and the O(n^2) pairwise count are the same
    /// number, bit for bit, including tied scores and missing classes.
    #[test]
    fn rank_auc_agrees_with_pairwise_auc_bitwise(
        levels in prop::collection::vec(0u8..5, 2..40),
        flips in prop::collection::vec(any::<bool>(), 2..40),
    ) {
        let n = levels.len().min(flips.len());
        let scores: Vec<f64> = levels[..n].iter().map(|&l| l as f64 / 4.0).collect();
        let labels = flips[..n].to_vec();
        match (auc_binary(&scores, &labels), auc_pairwise(&scores, &labels)) {
            (Some(a), Some(b)) => prop_assert_eq!(a.to_bits(), b.to_bits(), "{} vs {}", a, b),
            (None, None) => {}
            (a, b) => prop_assert!(false, "disagree on definedness: {a:?} vs {b:?}"),
        }
    }

    /// Concatenating two case lists adds their losses (up to accumulation
    /// order, which can move the sum by rounding only).
    #[test]
    fn loss_is_additive_over_concatenated_case_lists(
        first in prop::collection::vec((prediction_set(), label_row()), 1..5),
        second in prop::collection::vec((prediction_set(), label_row()), 1..5),
    ) {
        let schema = TaskSchema::seven_point();
        let unzip = |v: &[(PredictionSet, Vec<usize>)]| {
            let p: Vec<PredictionSet> = v.iter().map(|(p, _)| p.clone()).collect();
            let l: Vec<Vec<usize>> = v.iter().map(|(_, l)| l.clone()).collect();
            (p, l)
        };
        let (pa, la) = unzip(&first);
        let (pb, lb) = unzip(&second);
        let (mut pc, mut lc) = (pa.clone(), la.clone());
        pc.extend(pb.clone());
        lc.extend(lb.clone());

        let a = total_loss(&pa, &la, &schema).unwrap();
        let b = total_loss(&pb, &lb, &schema).unwrap();
        let c = total_loss(&pc, &lc, &schema).unwrap();
        for (name, x, y) in [
            ("derm", a.derm + b.derm, c.derm),
            ("clin", a.clin + b.clin, c.clin),
            ("fusion", a.fusion + b.fusion, c.fusion),
            ("total", a.total + b.total, c.total),
        ] {
            prop_assert!((x - y).abs() <= 1e-9, "{name}: {x} vs {y}");
        }
    }

    /// Ratio-based splitting either puts every record in exactly one
    /// nonempty partition, or rejects the request because a partition
    /// would round to nothing — never anything in between.
    #[test]
    fn every_record_lands_in_exactly_one_split(
        n in 3usize..50,
        seed in any::<u64>(),
        cuts in (0.05f64..0.7, 0.05f64..0.7).prop_filter("ratios must leave room", |(a, b)| a + b <= 0.9),
    ) {
        let records: Vec<CaseRecord> = (0..n).map(untagged_case).collect();
        let ratios = (cuts.0, cuts.1, 1.0 - cuts.0 - cuts.1);
        match split_records(&records, ratios, seed) {
            Ok(idx) => {
                prop_assert!(!idx.train.is_empty() && !idx.val.is_empty() && !idx.test.is_empty());
                let mut all: Vec<usize> =
                    idx.train.iter().chain(&idx.val).chain(&idx.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
            Err(skinfuse::Error::Config(msg)) => {
                prop_assert!(msg.contains("empty partition"), "unexpected rejection: {}", msg);
            }
            Err(e) => prop_assert!(false, "unexpected error kind: {e}"),
        }
    }

    /// The weight grid enumerates the full simplex at the requested
    /// resolution: composition count, exact coordinate structure, ascending
    /// lexicographic order.
    #[test]
    fn simplex_grid_enumerates_the_whole_simplex_in_order(denom in 1usize..=12) {
        let step = 1.0 / denom as f64;
        let grid = simplex_grid(step).unwrap();
        prop_assert_eq!(grid.len(), (denom + 1) * (denom + 2) / 2);
        let mut prev: Option<[f64; 3]> = None;
        for w in &grid {
            let arr = w.as_array();
            let sum: f64 = arr.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for &coord in &arr {
                prop_assert!(coord >= 0.0);
                let steps = coord / step;
                prop_assert!((steps - steps.round()).abs() <= 1e-9, "coordinate {coord} off-grid");
            }
            if let Some(p) = prev {
                prop_assert!(p.as_slice() < arr.as_slice(), "grid not ascending: {p:?} then {arr:?}");
            }
            prev = Some(arr);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// The grid search returns exactly the best triple a brute-force sweep
    /// finds (ties broken toward the lexicographically smallest triple).
    #[test]
    fn weight_search_matches_a_brute_force_sweep(
        cases in prop::collection::vec((prediction_set(), label_row()), 2..6),
    ) {
        let schema = TaskSchema::seven_point();
        let preds: Vec<PredictionSet> = cases.iter().map(|(p, _)| p.clone()).collect();
        let labels: Vec<Vec<usize>> = cases.iter().map(|(_, l)| l.clone()).collect();
        let step = 0.25;
        let (best, value) =
            weight_search(&preds, &labels, &schema, step, SearchObjective::AvgAcc).unwrap();

        let mut naive: Option<([f64; 3], f64)> = None;
        for w in simplex_grid(step).unwrap() {
            let fused = fuse_cases(&preds, w).unwrap();
            let acc = skinfuse::eval::compute_metrics(&fused, &labels, &schema)
                .unwrap()
                .avg_accuracy;
            if naive.map_or(true, |(_, b)| acc > b) {
                naive = Some((w.as_array(), acc));
            }
        }
        let (nw, nv) = naive.unwrap();
        prop_assert_eq!(best.as_array(), nw);
        prop_assert_eq!(value.to_bits(), nv.to_bits());
    }
}
