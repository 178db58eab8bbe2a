use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    /// Ascending.
    pub train_indices: Vec<usize>,
    /// Ascending.
    pub test_indices: Vec<usize>,
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::invalid(format!("k = {k}: need at least 2 folds")));
    }
    Ok(())
}

/// Builds one split per test set, with the complement as the training set.
fn splits(n: usize, tests: Vec<Vec<usize>>) -> Vec<FoldSplit> {
    tests
        .into_iter()
        .enumerate()
        .map(|(fold_index, mut test)| {
            test.sort_unstable();
            let mut in_test = vec![false; n];
            test.iter().for_each(|&i| in_test[i] = true);
            let train_indices = (0..n).filter(|&i| !in_test[i]).collect();
            FoldSplit {
                fold_index,
                train_indices,
                test_indices: test,
            }
        })
        .collect()
}

/// Seeded shuffle of `0..n` cut into `k` contiguous test sets. The first
/// `n mod k` folds get one extra element.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    check_k(k)?;
    if n < k {
        return Err(Error::invalid(format!("cannot split {n} records into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed::derive(seed, "folds", 0)));
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    let tests = (0..k)
        .map(|f| {
            let len = base + usize::from(f < extra);
            let t = perm[start..start + len].to_vec();
            start += len;
            t
        })
        .collect();
    Ok(splits(n, tests))
}

/// Folds that never split a group (subject) across test sets.
///
/// When every group is a single record this is exactly [`make_folds`].
/// Otherwise groups are visited in seeded-shuffle order, largest first, and
/// each goes to the fold with the fewest records so far (lowest index on
/// ties), so test sizes stay as even as the group sizes allow.
pub fn make_grouped_folds(groups: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    check_k(k)?;
    let n = groups.len();
    let mut members: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (i, g) in groups.iter().enumerate() {
        let slot = *index.entry(g.as_str()).or_insert_with(|| {
            members.push((g.as_str(), Vec::new()));
            members.len() - 1
        });
        members[slot].1.push(i);
    }
    if members.len() == n {
        return make_folds(n, k, seed);
    }
    if members.len() < k {
        return Err(Error::invalid(format!(
            "cannot split {} subjects into {k} folds",
            members.len()
        )));
    }
    members.shuffle(&mut seed::rng(seed::derive(seed, "folds", 0)));
    // stable: equal-sized groups keep their shuffled order
    members.sort_by_key(|m| std::cmp::Reverse(m.1.len()));
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (_, idx) in members {
        let f = (0..k).min_by_key(|&f| (tests[f].len(), f)).unwrap();
        tests[f].extend(idx);
    }
    Ok(splits(n, tests))
}
