use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

fn shuffled_classes(labels: &[usize], seed: u64) -> Vec<Vec<usize>> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    for (c, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut rng::stream(seed, &[rng::purpose::FOLDS, c as u64]));
    }
    members
}

/// Stratified k-fold: each class is shuffled and dealt round-robin over the
/// folds, starting where the previous class stopped, so every fold holds
/// `⌊n_c/k⌋` or `⌈n_c/k⌉` members of class `c` and fold sizes differ by at most one.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Parameter(format!("k-fold needs k >= 2, got {k}")));
    }
    let members = shuffled_classes(labels, seed);
    if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| !m.is_empty() && m.len() < k) {
        return Err(Error::Contract(format!("class {c} has {} members, fewer than k = {k}", m.len())));
    }
    let mut fold_of = vec![0; labels.len()];
    let mut offset = 0;
    for m in &members {
        for (j, &i) in m.iter().enumerate() {
            fold_of[i] = (offset + j) % k;
        }
        offset = (offset + m.len()) % k;
    }
    Ok((0..k)
        .map(|f| {
            let (held, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| fold_of[i] == f);
            (train, held)
        })
        .collect())
}

/// Stratified train/test split; every class keeps at least one member on each side.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0 < test_fraction && test_fraction < 1.0) {
        return Err(Error::Parameter(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, m) in shuffled_classes(labels, seed).iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        if m.len() < 2 {
            return Err(Error::Contract(format!("class {c} needs two members to appear in both splits")));
        }
        let n_test = ((m.len() as f64 * test_fraction).round() as usize).clamp(1, m.len() - 1);
        test.extend_from_slice(&m[..n_test]);
        train.extend_from_slice(&m[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_two_class_five_fold() {
        let labels = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        for (_, held) in stratified_kfold(&labels, 5, 3).unwrap() {
            let ones = held.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!((held.len(), ones), (2, 1));
        }
    }

    #[test]
    fn folds_partition_indices_and_keep_proportions() {
        let labels: Vec<usize> = (0..47).map(|i| if i < 25 { 0 } else if i < 39 { 1 } else { 2 }).collect();
        for seed in 0..10 {
            let folds = stratified_kfold(&labels, 5, seed).unwrap();
            let mut seen = vec![0; labels.len()];
            for (train, held) in &folds {
                assert_eq!(train.len() + held.len(), labels.len());
                for &i in held {
                    seen[i] += 1;
                }
                for c in 0..3 {
                    let total = labels.iter().filter(|&&l| l == c).count() as f64;
                    let got = held.iter().filter(|&&i| labels[i] == c).count() as f64;
                    let share = total * held.len() as f64 / labels.len() as f64;
                    assert!((got - share).abs() <= 1.0, "class {c}: {got} vs {share}");
                }
            }
            assert!(seen.iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn small_class_is_a_contract_error() {
        assert!(matches!(stratified_kfold(&[0, 0, 0, 1, 1], 3, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn split_keeps_every_class_on_both_sides() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let (train, test) = stratified_split(&labels, 0.2, 1).unwrap();
        assert_eq!(test.len(), 6);
        for c in 0..3 {
            assert!(train.iter().any(|&i| labels[i] == c) && test.iter().any(|&i| labels[i] == c));
        }
    }
}
