//! Independent reference implementations for the metric checks.

use flowguide::seq::Sequence;

/// Edit distance from the full `(n+1) x (m+1)` table.
pub fn levenshtein_table(a: &[u8], b: &[u8]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut t = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in t[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[n][m]
}

fn median_sorted(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn diversity_brute(seqs: &[Sequence]) -> f64 {
    let mut d = Vec::new();
    for i in 0..seqs.len() {
        for j in 0..seqs.len() {
            if i < j {
                d.push(levenshtein_table(seqs[i].tokens(), seqs[j].tokens()) as f64);
            }
        }
    }
    median_sorted(d)
}

pub fn novelty_brute(seqs: &[Sequence], train: &[Sequence]) -> f64 {
    let mins = seqs
        .iter()
        .map(|s| {
            let mut best = usize::MAX;
            for t in train {
                best = best.min(levenshtein_table(s.tokens(), t.tokens()));
            }
            best as f64
        })
        .collect();
    median_sorted(mins)
}
