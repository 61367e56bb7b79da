//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use xmodal::{EmbeddingSet, Matrix};

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Position of every item when sorted by score descending, ties by index.
/// Quadratic on purpose: each rank is a direct count.
pub fn ranks(scores: &[f64]) -> Vec<usize> {
    (0..scores.len())
        .map(|g| {
            (0..scores.len())
                .filter(|&h| scores[h] > scores[g] || (scores[h] == scores[g] && h < g))
                .count()
        })
        .collect()
}

/// Items in rank order.
pub fn order(scores: &[f64]) -> Vec<usize> {
    let r = ranks(scores);
    let mut out = vec![0; scores.len()];
    for (g, &pos) in r.iter().enumerate() {
        out[pos] = g;
    }
    out
}

/// AP@K with denominator min(R, K); `None` when nothing is relevant.
pub fn ap(relevant_in_order: &[bool], k: Option<usize>) -> Option<f64> {
    let total = relevant_in_order.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let cut = k.unwrap_or(relevant_in_order.len()).min(relevant_in_order.len());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant_in_order[..cut].iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total.min(k.unwrap_or(usize::MAX)) as f64)
}

/// Per-query AP of every query with at least one same-label gallery item.
pub fn map(queries: &EmbeddingSet, gallery: &EmbeddingSet, k: Option<usize>) -> Vec<f64> {
    (0..queries.len())
        .filter_map(|q| {
            let scores: Vec<f64> = (0..gallery.len()).map(|g| cos(queries.row(q), gallery.row(g))).collect();
            let rel: Vec<bool> = order(&scores)
                .into_iter()
                .map(|g| gallery.labels()[g] == queries.labels()[q])
                .collect();
            ap(&rel, k)
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Majority vote of the k most similar reference items; a tie goes to the
/// tied label whose best neighbor ranks highest.
pub fn knn(queries: &EmbeddingSet, reference: &EmbeddingSet, k: usize) -> Vec<u32> {
    (0..queries.len())
        .map(|q| {
            let scores: Vec<f64> = (0..reference.len()).map(|g| cos(queries.row(q), reference.row(g))).collect();
            let top: Vec<u32> = order(&scores)[..k].iter().map(|&g| reference.labels()[g]).collect();
            let count = |l: u32| top.iter().filter(|&&x| x == l).count();
            let best = top.iter().map(|&l| count(l)).max().unwrap();
            // first label in rank order that reaches the best count
            *top.iter().find(|&&l| count(l) == best).unwrap()
        })
        .collect()
}

/// Nearest prototype by cosine; ties go to the lowest label.
pub fn zero_shot(queries: &EmbeddingSet, prototypes: &EmbeddingSet) -> Vec<u32> {
    (0..queries.len())
        .map(|q| {
            let mut best = (f64::NEG_INFINITY, u32::MAX);
            for p in 0..prototypes.len() {
                let s = cos(queries.row(q), prototypes.row(p));
                let l = prototypes.labels()[p];
                if s > best.0 || (s == best.0 && l < best.1) {
                    best = (s, l);
                }
            }
            best.1
        })
        .collect()
}

pub fn accuracy(pred: &[u32], truth: &[u32]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// `-log softmax_j(cos(s_i, t_j) / tau)[i]` written as
/// `log(1 + sum_{j != i} exp(l_j - l_i))` so it stays accurate when the
/// positive dominates.
pub fn row_loss(student: &Matrix, teacher: &Matrix, tau: f64, i: usize) -> f64 {
    let li = cos(student.row(i), teacher.row(i)) / tau;
    let gaps: Vec<f64> = (0..teacher.rows())
        .filter(|&j| j != i)
        .map(|j| cos(student.row(i), teacher.row(j)) / tau - li)
        .collect();
    let m = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m > 0.0 {
        m + ((-m).exp() + gaps.iter().map(|g| (g - m).exp()).sum::<f64>()).ln()
    } else {
        gaps.iter().map(|g| g.exp()).sum::<f64>().ln_1p()
    }
}
