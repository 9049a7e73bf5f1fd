//! Sequence distances for forecasting: unrestricted Damerau-Levenshtein
//! (adjacent transpositions may be edited again afterwards), its normalized
//! form and the best-of-candidates variant.

use crate::model::Action;

/// Minimum number of insertions, deletions, substitutions and adjacent
/// transpositions turning `a` into `b`.
pub fn damerau_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return n + m;
    }
    let max = n + m;
    let w = m + 2;
    // d has an extra sentinel row and column holding `max`.
    let mut d = vec![0usize; (n + 2) * w];
    d[0] = max;
    for i in 0..=n {
        d[(i + 1) * w] = max;
        d[(i + 1) * w + 1] = i;
    }
    for j in 0..=m {
        d[j + 1] = max;
        d[w + j + 1] = j;
    }
    // Last row of `a` holding each symbol seen so far. Sequences here are
    // short with few distinct symbols, so a linear scan beats hashing.
    let mut last_row: Vec<(&T, usize)> = Vec::new();
    for i in 1..=n {
        let mut last_col = 0;
        for j in 1..=m {
            let i1 = last_row.iter().find(|(s, _)| *s == &b[j - 1]).map_or(0, |x| x.1);
            let j1 = last_col;
            let cost = if a[i - 1] == b[j - 1] {
                last_col = j;
                0
            } else {
                1
            };
            let sub = d[i * w + j] + cost;
            let ins = d[(i + 1) * w + j] + 1;
            let del = d[i * w + j + 1] + 1;
            let trans = d[i1 * w + j1] + (i - i1 - 1) + 1 + (j - j1 - 1);
            d[(i + 1) * w + j + 1] = sub.min(ins).min(del).min(trans);
        }
        match last_row.iter_mut().find(|(s, _)| *s == &a[i - 1]) {
            Some(x) => x.1 = i,
            None => last_row.push((&a[i - 1], i)),
        }
    }
    d[(n + 1) * w + m + 1]
}

/// Distance divided by the longer length, in `[0, 1]`. Two empty sequences
/// are at distance 0.
pub fn normalized_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    damerau_levenshtein(a, b) as f64 / longest as f64
}

/// Best normalized distance over several candidate predictions; 1 when there
/// are none.
pub fn edit_distance_at_z<T: PartialEq>(candidates: &[Vec<T>], target: &[T]) -> f64 {
    candidates.iter().map(|c| normalized_edit_distance(c, target)).fold(None, |best: Option<f64>, d| {
        Some(best.map_or(d, |b| b.min(d)))
    }).unwrap_or(1.0)
}

/// Action sequences compare by call text; guards are ignored.
pub fn action_edit_distance(predicted: &[Action], target: &[Action]) -> f64 {
    let p: Vec<String> = predicted.iter().map(Action::call_text).collect();
    let t: Vec<String> = target.iter().map(Action::call_text).collect();
    normalized_edit_distance(&p, &t)
}
