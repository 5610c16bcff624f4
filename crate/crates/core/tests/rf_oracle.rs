//! Cross-checks the production tree builder against the brute-force CART
//! oracle on small instances: identical structure and bitwise-identical
//! predictions when bootstrap is off and every feature is a candidate.

mod common;

use common::{oracle_predict, oracle_tree, trees_identical};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use todqos::featureset::{Dataset, FeatureConfig, FeatureLayout, FeatureSelector, RowMeta};
use todqos::rforest::{fit, ForestHyperparams};

fn as_dataset(x: &[Vec<f64>], y: &[f64]) -> Dataset {
    let width = x[0].len();
    let layout = FeatureLayout::new(9);
    let mut ds = Dataset::empty(layout);
    ds.config = FeatureConfig {
        id: "custom".into(),
        selectors: (0..width).map(FeatureSelector::Column).collect(),
        layout,
    };
    ds.scenario_ids.push("oracle".into());
    for (i, row) in x.iter().enumerate() {
        ds.x.extend_from_slice(row);
        ds.y.push(y[i]);
        ds.meta.push(RowMeta { t_s: i as f64, scenario_idx: 0, serving_cell: 0 });
    }
    ds
}

fn check_equivalence(x: Vec<Vec<f64>>, y: Vec<f64>, max_depth: usize, min_leaf: usize) {
    let p = x[0].len();
    let ds = as_dataset(&x, &y);
    let hp = ForestHyperparams {
        n_trees: 1,
        max_depth,
        min_samples_leaf: min_leaf,
        mtry: Some(p),
        bootstrap: false,
        seed: 0,
    };
    let forest = fit(&ds, &hp).unwrap();
    let rows: Vec<usize> = (0..x.len()).collect();
    let oracle = oracle_tree(&x, &y, &rows, max_depth, min_leaf);
    assert!(
        trees_identical(&oracle, &forest.trees[0]),
        "structure mismatch (n={}, p={p}, depth={max_depth}, leaf={min_leaf})",
        x.len()
    );
    // Probe predictions across the feature ranges.
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    for _ in 0..50 {
        let probe: Vec<f64> = (0..p).map(|_| rng.random_range(-5.0..105.0)).collect();
        let a = oracle_predict(&oracle, &probe);
        let b = forest.trees[0].predict(&probe);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn step_function_single_feature() {
    let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
    let y: Vec<f64> = (0..40).map(|i| if i < 13 { 1.0 } else { 9.0 }).collect();
    check_equivalence(x, y, 25, 1);
}

#[test]
fn duplicated_feature_values_and_ties() {
    // Repeated values force the distinct-midpoint rule and tie-breaks.
    let x: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 5) as f64, (i % 3) as f64]).collect();
    let y: Vec<f64> = (0..60).map(|i| ((i % 5) * 2 + i % 3) as f64).collect();
    check_equivalence(x, y, 6, 2);
}

#[test]
fn random_instances_match_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    for case in 0..8 {
        let n = rng.random_range(20..=150);
        let p = rng.random_range(1..=3usize);
        let min_leaf = [1, 2, 5][case % 3];
        let max_depth = [3, 8, 25][case % 3];
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| (rng.random_range(0..40) as f64) * 2.5).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| r.iter().sum::<f64>() * 3.0 + rng.random_range(0.0..10.0))
            .collect();
        check_equivalence(x, y, max_depth, min_leaf);
    }
}

#[test]
fn min_leaf_blocks_unbalanced_splits() {
    let x: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
    let y = vec![0.0, 0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 5.0, 100.0];
    check_equivalence(x, y, 25, 4);
}
