//! Non-IID client partitioning and per-client train/val/test splits.

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Integerize `total * weights[..]` by largest remainder. Ties in the
/// fractional part go to the lower bucket index, so the result is a pure
/// function of its arguments.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let mut counts = Vec::with_capacity(weights.len());
    let mut fracs: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let share = if sum > 0.0 {
            total as f64 * w / sum
        } else {
            total as f64 / weights.len() as f64
        };
        let floor = share.floor() as usize;
        counts.push(floor);
        fracs.push((i, share - floor as f64));
        assigned += floor;
    }
    let mut leftover = total - assigned.min(total);
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in fracs {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

/// Deal every example to one of `clients` shards, class by class, with
/// Dirichlet(`alpha`) proportions per class. Clients left empty steal one
/// example from the currently largest shard.
pub fn dirichlet_partition(
    labels: &[u32],
    clients: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if alpha <= 0.0 {
        return Err(Error::invalid("dirichlet alpha must be positive"));
    }
    if labels.len() < clients {
        return Err(Error::invalid(format!(
            "{} examples cannot cover {clients} clients",
            labels.len()
        )));
    }
    let class_count = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for class in 0..class_count {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        rng.shuffle(&mut members);
        let mut proportions: Vec<f64> = (0..clients).map(|_| rng.gamma(alpha)).collect();
        if proportions.iter().sum::<f64>() <= 0.0 {
            proportions = vec![1.0; clients];
        }
        let counts = largest_remainder(members.len(), &proportions);
        let mut cursor = 0;
        for (client, &count) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&members[cursor..cursor + count]);
            cursor += count;
        }
    }
    // No client may end up empty.
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = shards
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("at least one shard");
        let moved = shards[donor].pop().expect("donor nonempty");
        shards[empty].push(moved);
    }
    Ok(shards)
}

/// Stratified-by-class split of `indices` into train/val/test. Fractions
/// must be nonnegative with a positive train share and sum 1. Classes with
/// fewer examples than buckets are split best-effort with train first.
pub fn split_train_val_test(
    indices: &[usize],
    labels: &[u32],
    fractions: (f64, f64, f64),
    rng: &mut RngStream,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (f_tr, f_val, f_te) = fractions;
    if f_tr <= 0.0 || f_val < 0.0 || f_te < 0.0 {
        return Err(Error::invalid(
            "train fraction must be positive; val/test nonnegative",
        ));
    }
    if ((f_tr + f_val + f_te) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must sum to 1"));
    }
    let mut by_class: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for &i in indices {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (_, mut members) in by_class {
        rng.shuffle(&mut members);
        // Largest remainder with the tie order train > val > test gives
        // train priority on tiny classes.
        let counts = largest_remainder(members.len(), &[f_tr, f_val, f_te]);
        let (a, b) = (counts[0], counts[0] + counts[1]);
        train.extend_from_slice(&members[..a]);
        val.extend_from_slice(&members[a..b]);
        test.extend_from_slice(&members[b..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}
