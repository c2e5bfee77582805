use std::collections::BTreeMap;

use rayon::prelude::*;

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure `(1+β²)PR / (R+β²P)`; 0 when either side is empty.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub const ROUGE_BETA: f64 = 1.2;

/// CIDEr settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiderConfig {
    pub max_n: usize,
    /// Gaussian length penalty width.
    pub sigma: f64,
}

impl Default for CiderConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            sigma: 6.0,
        }
    }
}

type Counts<T> = BTreeMap<Vec<T>, f64>;

fn ngram_counts<T: Clone + Ord>(tokens: &[T], n: usize) -> Counts<T> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    m
}

fn cosine<T: Ord>(a: &Counts<T>, b: &Counts<T>, idf: &dyn Fn(&[T]) -> f64) -> f64 {
    fn weigh<'a, T: Ord>(m: &'a Counts<T>, idf: &dyn Fn(&[T]) -> f64) -> BTreeMap<&'a Vec<T>, f64> {
        m.iter().map(|(k, &c)| (k, c * idf(k))).collect()
    }
    let (wa, wb) = (weigh(a, idf), weigh(b, idf));
    let dot: f64 = wa.iter().filter_map(|(k, x)| wb.get(*k).map(|y| x * y)).sum();
    let na = wa.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = wb.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-pair CIDEr scores (×10 scale).
///
/// Document frequencies come from the references; the idf is the smoothed
/// `ln((1+D)/(1+df)) + 1`. For each order `n`, the pair score is the cosine
/// of idf-weighted n-gram counts times `exp(−δ²/2σ²)` with `δ` the length
/// difference. Orders where neither side has any n-gram are left out of the
/// mean over orders.
pub fn cider_per_pair<T>(candidates: &[Vec<T>], references: &[Vec<T>], config: CiderConfig) -> Vec<f64>
where
    T: Clone + Ord + Send + Sync,
{
    assert_eq!(candidates.len(), references.len(), "one reference per candidate");
    let docs = references.len() as f64;
    let df: Vec<BTreeMap<Vec<T>, f64>> = (1..=config.max_n)
        .map(|n| {
            let mut df = BTreeMap::new();
            for r in references {
                for k in ngram_counts(r, n).into_keys() {
                    *df.entry(k).or_insert(0.0) += 1.0;
                }
            }
            df
        })
        .collect();
    candidates
        .par_iter()
        .zip(references.par_iter())
        .map(|(c, r)| {
            let delta = c.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * config.sigma * config.sigma)).exp();
            let mut total = 0.0;
            let mut orders = 0;
            for n in 1..=config.max_n {
                let (cc, rc) = (ngram_counts(c, n), ngram_counts(r, n));
                if cc.is_empty() && rc.is_empty() {
                    continue;
                }
                let d = &df[n - 1];
                let idf = |k: &[T]| ((1.0 + docs) / (1.0 + d.get(k).copied().unwrap_or(0.0))).ln() + 1.0;
                total += cosine(&cc, &rc, &idf) * penalty;
                orders += 1;
            }
            if orders == 0 {
                0.0
            } else {
                10.0 * total / orders as f64
            }
        })
        .collect()
}

/// Corpus CIDEr: mean of [`cider_per_pair`]. Empty input scores 0.
pub fn cider<T>(candidates: &[Vec<T>], references: &[Vec<T>], config: CiderConfig) -> f64
where
    T: Clone + Ord + Send + Sync,
{
    let s = cider_per_pair(candidates, references, config);
    if s.is_empty() {
        0.0
    } else {
        s.iter().sum::<f64>() / s.len() as f64
    }
}
