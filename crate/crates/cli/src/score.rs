//! Agreement between a fitted state sequence and simulator truth.

use std::collections::BTreeMap;

/// Dense contingency table of two labelings of the same items.
pub fn contingency(a: &[usize], b: &[usize]) -> Vec<Vec<u64>> {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let index = |labels: &[usize]| {
        let mut map = BTreeMap::new();
        for &l in labels {
            let next = map.len();
            map.entry(l).or_insert(next);
        }
        map
    };
    let (ia, ib) = (index(a), index(b));
    let mut table = vec![vec![0u64; ib.len()]; ia.len()];
    for (x, y) in a.iter().zip(b) {
        table[ia[x]][ib[y]] += 1;
    }
    table
}

fn pairs(n: u64) -> f64 {
    n as f64 * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index. Identical trivial partitions (a single cluster, or
/// all singletons on both sides) score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let table = contingency(a, b);
    let n = a.len() as u64;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..table.first().map_or(0, Vec::len))
        .map(|j| pairs(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = pairs(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// For each fitted label, the true label it co-occurs with most often
/// (lowest true label on ties).
pub fn majority_mapping(fitted: &[usize], truth: &[usize]) -> BTreeMap<usize, usize> {
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&f, &t) in fitted.iter().zip(truth) {
        *counts.entry(f).or_default().entry(t).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(f, row)| {
            let best = row
                .iter()
                .fold((usize::MAX, 0usize), |(bt, bc), (&t, &c)| if c > bc { (t, c) } else { (bt, bc) });
            (f, best.0)
        })
        .collect()
}

/// Root-mean-square difference between two equally long lists of vectors.
pub fn rmse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (sum, n) = a.iter().zip(b).fold((0.0, 0usize), |(s, n), (u, v)| {
        (s + u.iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum::<f64>(), n + u.len())
    });
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}
