use rand::Rng;
use stochcon_core::eval::{f1_vs_units, macro_f1, planted_bit_features, rf_fit, ForestConfig, PlantedBitSpec};
use stochcon_core::{rng, Tensor};

fn columns(x: &Tensor, cols: &[usize]) -> Tensor {
    let (n, _) = x.dims2().unwrap();
    let data = (0..n).flat_map(|r| cols.iter().map(move |&c| x.row(r)[c])).collect();
    Tensor::matrix(n, cols.len(), data).unwrap()
}

/// Binary features whose agreement with a binary label decays with the column index.
fn graded(n: usize, flips: &[f64], seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng::stream(seed, &[77]);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    let mut data = Vec::new();
    for &l in &labels {
        for &p in flips {
            let v = if r.random::<f64>() < p { 1 - l } else { l };
            data.push(v as f64);
        }
    }
    (Tensor::matrix(n, flips.len(), data).unwrap(), labels)
}

#[test]
fn importance_follows_column_permutation() {
    let (x, y, _) = planted_bit_features(&PlantedBitSpec { n: 300, d: 12, ..Default::default() }, 4).unwrap();
    let cfg = ForestConfig { n_trees: 20, ..Default::default() };
    let perm = [5, 0, 11, 3, 7, 1, 9, 2, 10, 4, 8, 6];
    let a = rf_fit(&x, &y, 8, &cfg, 9).unwrap();
    let b = rf_fit(&columns(&x, &perm), &y, 8, &cfg, 9).unwrap();
    for (j, &p) in perm.iter().enumerate() {
        assert!((b.importance[j] - a.importance[p]).abs() < 1e-12);
    }
    assert_eq!(a.predict(&x).unwrap(), b.predict(&columns(&x, &perm)).unwrap());
}

#[test]
fn duplicated_features_keep_pair_order() {
    let (x, y) = graded(400, &[0.5, 0.05, 0.3, 0.15], 1);
    let cfg = ForestConfig::default();
    let single = rf_fit(&x, &y, 2, &cfg, 3).unwrap();
    let doubled = rf_fit(&columns(&x, &[0, 1, 2, 3, 0, 1, 2, 3]), &y, 2, &cfg, 3).unwrap();
    let pairs: Vec<f64> = (0..4).map(|j| doubled.importance[j] + doubled.importance[j + 4]).collect();
    let order = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
        idx
    };
    assert_eq!(order(&single.importance), vec![1, 3, 2, 0]);
    assert_eq!(order(&pairs), order(&single.importance));
}

#[test]
fn pure_noise_scores_near_chance() {
    let spec = PlantedBitSpec { n: 400, d: 8, informative: 1, num_classes: 2, flip_prob: 0.5 };
    let (x, y, _) = planted_bit_features(&spec, 6).unwrap();
    let res = f1_vs_units(&x, &y, 2, &[8], 5, &ForestConfig { n_trees: 30, ..Default::default() }, 0).unwrap();
    assert!((res.points[0].mean_f1 - 0.5).abs() < 0.1, "{}", res.points[0].mean_f1);
}

#[test]
fn full_width_matches_unrestricted_forest() {
    let (x, y, _) = planted_bit_features(&PlantedBitSpec { n: 200, d: 10, ..Default::default() }, 2).unwrap();
    let cfg = ForestConfig { n_trees: 20, ..Default::default() };
    let res = f1_vs_units(&x, &y, 8, &[10], 5, &cfg, 5).unwrap();
    // unrestricted: same folds, same per-fold seeds, all columns
    let folds = stochcon_core::data::stratified_kfold(&y, 5, 5).unwrap();
    let mut total = 0.0;
    for (f, (tr, te)) in folds.iter().enumerate() {
        let pick = |rows: &[usize]| {
            let data = rows.iter().flat_map(|&r| x.row(r).to_vec()).collect();
            Tensor::matrix(rows.len(), 10, data).unwrap()
        };
        let ytr: Vec<usize> = tr.iter().map(|&i| y[i]).collect();
        let yte: Vec<usize> = te.iter().map(|&i| y[i]).collect();
        let seed = rng::mix(5, &[rng::purpose::FOREST, f as u64]);
        let model = rf_fit(&pick(tr), &ytr, 8, &cfg, seed).unwrap();
        total += macro_f1(&model.predict(&pick(te)).unwrap(), &yte, 8);
    }
    assert!((res.points[0].mean_f1 - total / 5.0).abs() < 1e-12);
}

/// Best held-out macro F1 any single column can reach with a value-to-majority-label rule.
fn single_feature_optimum(x: &Tensor, y: &[usize]) -> f64 {
    let (n, d) = x.dims2().unwrap();
    let mut best: f64 = 0.0;
    for j in 0..d {
        for map in [[0, 1], [1, 0], [0, 0], [1, 1]] {
            let pred: Vec<usize> = (0..n).map(|r| map[x.row(r)[j] as usize]).collect();
            best = best.max(macro_f1(&pred, y, 2));
        }
    }
    best
}

#[test]
fn single_unit_cannot_solve_xor() {
    let mut r = rng::stream(3, &[1]);
    let (n, d) = (400, 6);
    let mut data = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| r.random_range(0..2) as f64).collect();
        y.push((row[1] as usize) ^ (row[4] as usize));
        data.extend(row);
    }
    let x = Tensor::matrix(n, d, data).unwrap();
    let oracle = single_feature_optimum(&x, &y);
    assert!(oracle < 0.6, "{oracle}");
    let res = f1_vs_units(&x, &y, 2, &[1, 2, 6], 5, &ForestConfig { n_trees: 30, ..Default::default() }, 1).unwrap();
    let f1 = |k| res.at(k).unwrap().mean_f1;
    assert!(f1(1) < oracle + 0.05, "{} vs {oracle}", f1(1));
    assert!(f1(2) > 0.95, "{}", f1(2));
    assert!(f1(6) > 0.9, "{}", f1(6));
}

#[test]
fn f1_is_monotone_in_k_up_to_saturation() {
    let ks = [1, 2, 3];
    let cfg = ForestConfig { n_trees: 30, ..Default::default() };
    let mut mean = [0.0; 3];
    for seed in 0..5 {
        let (x, y, _) = planted_bit_features(&PlantedBitSpec { n: 300, d: 16, ..Default::default() }, seed).unwrap();
        let res = f1_vs_units(&x, &y, 8, &ks, 5, &cfg, seed).unwrap();
        for (m, p) in mean.iter_mut().zip(&res.points) {
            *m += p.mean_f1 / 5.0;
        }
    }
    assert!(mean[1] >= mean[0] - 0.02 && mean[2] >= mean[1] - 0.02, "{mean:?}");
}
