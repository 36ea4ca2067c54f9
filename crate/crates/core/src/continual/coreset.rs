//! Coreset selection: uniform random and greedy k-center.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Indices into a dataset: the selected coreset (in selection order) and the
/// remaining examples (in original order). Together they partition the data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoresetSplit {
    pub coreset: Vec<usize>,
    pub remainder: Vec<usize>,
}

fn complement(n: usize, chosen: &[usize]) -> Vec<usize> {
    let mut taken = vec![false; n];
    for &i in chosen {
        taken[i] = true;
    }
    (0..n).filter(|&i| !taken[i]).collect()
}

fn check_size(data: &Dataset, size: usize) -> Result<()> {
    if size > data.len() {
        return Err(Error::Argument(format!(
            "coreset of {size} requested from {} examples",
            data.len()
        )));
    }
    Ok(())
}

pub fn select_coreset_random(data: &Dataset, size: usize, rng: &mut SeededRng) -> Result<CoresetSplit> {
    check_size(data, size)?;
    let mut perm = rng.permutation(data.len());
    perm.truncate(size);
    Ok(CoresetSplit {
        remainder: complement(data.len(), &perm),
        coreset: perm,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-first traversal in input space. Starts from the largest-norm
/// point (lowest index on ties) and repeatedly adds the point farthest from
/// the current selection.
pub fn select_coreset_kcenter(data: &Dataset, size: usize) -> Result<CoresetSplit> {
    check_size(data, size)?;
    if size == 0 {
        return Err(Error::Argument("k-center coreset needs size >= 1".into()));
    }
    let x = &data.inputs;
    let n = data.len();
    let mut start = 0;
    let mut best = f64::NEG_INFINITY;
    for i in 0..n {
        let norm: f64 = x.row(i).iter().map(|v| v * v).sum();
        if norm > best {
            best = norm;
            start = i;
        }
    }
    let mut chosen = vec![start];
    // Selected points are pinned at -inf so duplicates in the data never get picked twice.
    let mut min_dist: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(start))).collect();
    min_dist[start] = f64::NEG_INFINITY;
    while chosen.len() < size {
        let mut far = 0;
        let mut far_d = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > far_d {
                far_d = d;
                far = i;
            }
        }
        chosen.push(far);
        min_dist[far] = f64::NEG_INFINITY;
        for (i, d) in min_dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(far)));
        }
    }
    Ok(CoresetSplit {
        remainder: complement(n, &chosen),
        coreset: chosen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use proptest::prelude::*;

    fn points(rows: &[Vec<f64>]) -> Dataset {
        let n = rows.len();
        Dataset::new(Matrix::from_rows(rows).unwrap(), vec![0; n], 1).unwrap()
    }

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = SeededRng::new(seed);
        points(&(0..n).map(|_| vec![rng.uniform(), rng.uniform()]).collect::<Vec<_>>())
    }

    fn is_partition(split: &CoresetSplit, n: usize) -> bool {
        let mut all: Vec<usize> = split.coreset.iter().chain(&split.remainder).copied().collect();
        all.sort_unstable();
        all == (0..n).collect::<Vec<_>>()
    }

    #[test]
    fn random_coreset_edges() {
        let data = toy(10, 1);
        let mut rng = SeededRng::new(2);
        let s = select_coreset_random(&data, 0, &mut rng).unwrap();
        assert!(s.coreset.is_empty());
        assert_eq!(s.remainder, (0..10).collect::<Vec<_>>());
        let s = select_coreset_random(&data, 10, &mut rng).unwrap();
        assert!(s.remainder.is_empty());
        assert!(is_partition(&s, 10));
        assert!(select_coreset_random(&data, 11, &mut rng).is_err());
        let a = select_coreset_random(&data, 4, &mut SeededRng::new(7)).unwrap();
        let b = select_coreset_random(&data, 4, &mut SeededRng::new(7)).unwrap();
        assert_eq!(a, b);
        assert!(is_partition(&a, 10));
    }

    #[test]
    fn kcenter_picks_one_point_per_distant_cluster() {
        let data = points(&[
            vec![0.10, 0.10],
            vec![0.12, 0.11],
            vec![0.09, 0.13],
            vec![0.11, 0.08],
            vec![0.90, 0.90],
            vec![0.88, 0.91],
            vec![0.91, 0.87],
            vec![0.89, 0.89],
        ]);
        let s = select_coreset_kcenter(&data, 2).unwrap();
        // Brute force: every pair split across clusters, none within one.
        let cluster = |i: usize| i / 4;
        assert_ne!(cluster(s.coreset[0]), cluster(s.coreset[1]));
        let chosen_d = sq_dist(data.inputs.row(s.coreset[0]), data.inputs.row(s.coreset[1]));
        for i in 0..8 {
            for j in i + 1..8 {
                if cluster(i) == cluster(j) {
                    assert!(sq_dist(data.inputs.row(i), data.inputs.row(j)) < chosen_d);
                }
            }
        }
        // Base case: the max-norm point.
        assert_eq!(select_coreset_kcenter(&data, 1).unwrap().coreset, vec![4]);
        assert!(select_coreset_kcenter(&data, 0).is_err());
    }

    fn radius(data: &Dataset, centers: &[usize]) -> f64 {
        (0..data.len())
            .map(|i| {
                centers
                    .iter()
                    .map(|&c| sq_dist(data.inputs.row(i), data.inputs.row(c)))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
            .sqrt()
    }

    fn best_radius(data: &Dataset, k: usize) -> f64 {
        fn rec(data: &Dataset, k: usize, from: usize, cur: &mut Vec<usize>, best: &mut f64) {
            if cur.len() == k {
                *best = best.min(radius(data, cur));
                return;
            }
            for i in from..data.len() {
                cur.push(i);
                rec(data, k, i + 1, cur, best);
                cur.pop();
            }
        }
        let mut best = f64::INFINITY;
        rec(data, k, 0, &mut Vec::new(), &mut best);
        best
    }

    proptest! {
        #[test]
        fn kcenter_is_within_twice_optimal(seed in 0u64..200, k in 1usize..4) {
            let data = toy(9, seed);
            let s = select_coreset_kcenter(&data, k).unwrap();
            let mut distinct = s.coreset.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), k);
            prop_assert!(is_partition(&s, 9));
            prop_assert!(radius(&data, &s.coreset) <= 2.0 * best_radius(&data, k) + 1e-12);
        }
    }
}
