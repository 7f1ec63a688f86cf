mod common;

use common::{grid_search_2d, objective_2d, oracle_zscore};
use proptest::prelude::*;
use tubemil::cues::OverlapVector;
use tubemil::mil::{
    select_proposal, solve_maxmargin, train_mil, FeatureMatrix, LinearModel, SolverConfig,
    TrainConfig, VideoBag,
};

fn bag_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..25).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), n),
            prop::collection::vec(-1.0..1.0f64, n),
        )
    })
}

fn make_bag(id: &str, rows: &[Vec<f64>], label: u32, overlaps: Option<Vec<f64>>) -> VideoBag {
    VideoBag::new(
        id,
        FeatureMatrix::from_rows(rows).unwrap(),
        vec![label],
        overlaps.map(OverlapVector),
    )
    .unwrap()
}

/// Small two-class MIL problem: one planted row per bag near the class
/// direction, the rest noise; the overlap peaks on the planted row.
fn toy_bags(seed: u64, planted_overlap: f64) -> Vec<VideoBag> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut bags = Vec::new();
    for class in 0..2u32 {
        for v in 0..6 {
            let planted = rng.random_range(0..8usize);
            let mut rows = Vec::new();
            let mut overlaps = Vec::new();
            for p in 0..8 {
                let mut x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                if p == planted {
                    x[class as usize] += 3.0;
                    overlaps.push(planted_overlap);
                } else {
                    overlaps.push(rng.random_range(0.0..0.5));
                }
                rows.push(x);
            }
            bags.push(make_bag(
                &format!("c{class}_{v}"),
                &rows,
                class,
                Some(overlaps),
            ));
        }
    }
    bags
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        solver: SolverConfig {
            epochs: 15,
            ..SolverConfig::default()
        },
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn selection_matches_brute_force((rows, overlaps) in bag_strategy(),
                                     w in prop::collection::vec(-1.0..1.0f64, 3),
                                     b in -1.0..1.0f64, alpha in 0.0..5.0f64) {
        let bag = make_bag("v", &rows, 0, Some(overlaps.clone()));
        let model = LinearModel { weights: w.clone(), bias: b, ..LinearModel::zero(3, 10.0) };
        let raw: Vec<f64> = rows.iter().map(|r| r.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() + b).collect();
        let (zs, zo) = (oracle_zscore(&raw), oracle_zscore(&overlaps));
        let mut best = 0;
        for i in 0..rows.len() {
            if zs[i] + alpha * zo[i] > zs[best] + alpha * zo[best] {
                best = i;
            }
        }
        let got = select_proposal(&bag, Some(&model), alpha);
        // rounding differences may only flip near-ties
        let value = |i: usize| zs[i] + alpha * zo[i];
        prop_assert!(got == best || (value(got) - value(best)).abs() < 1e-9);
    }

    #[test]
    fn alpha_zero_is_score_argmax((rows, overlaps) in bag_strategy(), w in prop::collection::vec(-1.0..1.0f64, 3)) {
        let model = LinearModel { weights: w, ..LinearModel::zero(3, 10.0) };
        let a = select_proposal(&make_bag("v", &rows, 0, Some(overlaps)), Some(&model), 0.0);
        let b = select_proposal(&make_bag("v", &rows, 0, None), Some(&model), 1.0);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn hinge_objective_matches_oracle(w in (-3.0..3.0f64, -3.0..3.0f64), b in -3.0..3.0f64,
                                      pos in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 1..6),
                                      neg in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 1..6)) {
        let p: Vec<[f64; 2]> = pos.iter().map(|q| [q.0, q.1]).collect();
        let n: Vec<[f64; 2]> = neg.iter().map(|q| [q.0, q.1]).collect();
        let pr: Vec<&[f64]> = p.iter().map(|r| r.as_slice()).collect();
        let nr: Vec<&[f64]> = n.iter().map(|r| r.as_slice()).collect();
        let got = tubemil::mil::objective(&[w.0, w.1], b, 10.0, &pr, &nr);
        prop_assert!((got - objective_2d(w, b, 10.0, &pos, &neg)).abs() < 1e-9);
    }
}

#[test]
fn two_point_solver_near_grid_optimum() {
    let (pos, neg) = ([(1.0, 0.0)], [(-1.0, 0.0)]);
    let best = grid_search_2d(10.0, &pos, &neg, 2.0, 0.01);
    assert!((best - 0.5).abs() < 1e-9, "grid optimum {best}");
    let m = solve_maxmargin(
        &[&[1.0, 0.0]],
        &[&[-1.0, 0.0]],
        10.0,
        &SolverConfig::default(),
        None,
    )
    .unwrap();
    let got = objective_2d((m.weights[0], m.weights[1]), m.bias, 10.0, &pos, &neg);
    assert!((got - m.objective).abs() < 1e-9);
    assert!(got <= best * 1.05, "solver {got} vs grid {best}");
    assert!(m.score(&[1.0, 0.0]) > 0.0 && m.score(&[-1.0, 0.0]) < 0.0);
}

#[test]
fn feature_scaling_keeps_training_signs() {
    let p = [[1.0, 0.4], [0.7, -0.3], [1.4, 0.9]];
    let n = [[-1.0, 0.2], [-0.6, -0.8], [-0.2, 1.1], [-1.3, -0.1]];
    let signs = |s: f64| {
        let ps: Vec<Vec<f64>> = p
            .iter()
            .map(|r| r.iter().map(|x| x * s).collect())
            .collect();
        let ns: Vec<Vec<f64>> = n
            .iter()
            .map(|r| r.iter().map(|x| x * s).collect())
            .collect();
        let pr: Vec<&[f64]> = ps.iter().map(Vec::as_slice).collect();
        let nr: Vec<&[f64]> = ns.iter().map(Vec::as_slice).collect();
        let m = solve_maxmargin(&pr, &nr, 10.0, &SolverConfig::default(), None).unwrap();
        pr.iter()
            .chain(&nr)
            .map(|x| m.score(x) > 0.0)
            .collect::<Vec<bool>>()
    };
    let base = signs(1.0);
    assert_eq!(base, vec![true, true, true, false, false, false, false]);
    assert_eq!(signs(10.0), base);
}

#[test]
fn infinite_alpha_follows_overlaps_every_round() {
    let bags = toy_bags(3, 0.6);
    let config = TrainConfig {
        alpha: f64::INFINITY,
        ..quick_config()
    };
    let out = train_mil(&bags, &[0, 1], &config).unwrap();
    for class in &out.classes {
        let want: Vec<usize> = class
            .positive_bags
            .iter()
            .map(|&i| common::first_max(bags[i].overlaps.as_ref().unwrap().as_slice()))
            .collect();
        assert_eq!(class.history.len(), 5);
        for round in &class.history {
            assert_eq!(round, &want);
        }
        assert_eq!(class.selections, want);
    }
}

#[test]
fn single_iteration_keeps_bootstrap() {
    let bags = toy_bags(4, 0.2);
    let config = TrainConfig {
        mil_iterations: 1,
        ..quick_config()
    };
    let out = train_mil(&bags, &[0, 1], &config).unwrap();
    for class in &out.classes {
        let want: Vec<usize> = class
            .positive_bags
            .iter()
            .map(|&i| common::first_max(bags[i].overlaps.as_ref().unwrap().as_slice()))
            .collect();
        assert_eq!(class.selections, want);
        assert_eq!(class.history, vec![want]);
        // only the final model is trained
        assert_eq!(class.retrains.len(), 1);
    }
}

#[test]
fn retrains_never_increase_objective_and_runs_repeat() {
    for seed in 0..4 {
        let bags = toy_bags(seed, 0.3);
        let a = train_mil(&bags, &[0, 1], &quick_config()).unwrap();
        for r in a.classes.iter().flat_map(|c| &c.retrains) {
            assert!(r.objective_end <= r.objective_start + 1e-6, "{r:?}");
        }
        let b = train_mil(&bags, &[0, 1], &quick_config()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}

#[test]
fn degenerate_and_insufficient_inputs() {
    let bags = toy_bags(5, 0.6);
    let only_class0: Vec<VideoBag> = bags.iter().filter(|b| b.labels == [0]).cloned().collect();
    assert!(train_mil(&only_class0, &[0], &quick_config()).is_err());
    let x = [0.5, 0.5];
    let m = solve_maxmargin(&[&x], &[&x], 10.0, &SolverConfig::default(), None).unwrap();
    assert!(m.degenerate);
}
