use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::caption::rouge_l;
use crate::error::{Error, Result};

/// One generated AD next to its ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    pub clip_id: u32,
    pub movie_id: u32,
    /// Position in time within the movie.
    pub order: usize,
}

/// Text-similarity strategy for Recall@k/N.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityKind {
    LcsF1,
    #[default]
    TfidfCosine,
    CharNgramCosine,
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LcsF1 => "lcs-f1",
            Self::TfidfCosine => "tfidf-cosine",
            Self::CharNgramCosine => "char-ngram-cosine",
        })
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lcs-f1" => Ok(Self::LcsF1),
            "tfidf-cosine" => Ok(Self::TfidfCosine),
            "char-ngram-cosine" => Ok(Self::CharNgramCosine),
            other => Err(Error::invalid(format!(
                "unknown similarity `{other}` (expected lcs-f1, tfidf-cosine or char-ngram-cosine)"
            ))),
        }
    }
}

/// A similarity function, with idf statistics for the tf-idf strategy.
#[derive(Debug, Clone)]
pub struct SimilarityFn {
    pub kind: SimilarityKind,
    idf: HashMap<String, f64>,
    docs: f64,
}

impl SimilarityFn {
    /// `documents` supply word document frequencies (used by tf-idf only).
    pub fn new(kind: SimilarityKind, documents: &[Vec<String>]) -> Self {
        let mut df: HashMap<String, f64> = HashMap::new();
        for d in documents {
            let mut seen: Vec<&String> = d.iter().collect();
            seen.sort();
            seen.dedup();
            for w in seen {
                *df.entry(w.clone()).or_insert(0.0) += 1.0;
            }
        }
        let docs = documents.len() as f64;
        let idf = df
            .into_iter()
            .map(|(w, f)| (w, ((1.0 + docs) / (1.0 + f)).ln() + 1.0))
            .collect();
        Self { kind, idf, docs }
    }

    fn word_idf(&self, w: &str) -> f64 {
        self.idf
            .get(w)
            .copied()
            .unwrap_or_else(|| (1.0 + self.docs).ln() + 1.0)
    }

    fn weigh<'a>(&self, t: &'a [String]) -> BTreeMap<&'a str, f64> {
        let mut m: BTreeMap<&str, f64> = BTreeMap::new();
        for w in t {
            *m.entry(w.as_str()).or_insert(0.0) += 1.0;
        }
        m.into_iter().map(|(w, c)| (w, c * self.word_idf(w))).collect()
    }

    /// Score in `[0, 1]`.
    pub fn score(&self, a: &[String], b: &[String]) -> f64 {
        match self.kind {
            SimilarityKind::LcsF1 => rouge_l(a, b, 1.0),
            SimilarityKind::TfidfCosine => {
                sparse_cosine(&self.weigh(a), &self.weigh(b))
            }
            SimilarityKind::CharNgramCosine => {
                let grams = |t: &[String]| {
                    let s: Vec<char> = format!(" {} ", t.join(" ")).chars().collect();
                    let mut m: BTreeMap<String, f64> = BTreeMap::new();
                    if t.is_empty() {
                        return m;
                    }
                    for w in s.windows(3) {
                        *m.entry(w.iter().collect()).or_insert(0.0) += 1.0;
                    }
                    m
                };
                sparse_cosine(&grams(a), &grams(b))
            }
        }
    }
}

fn sparse_cosine<K: Ord>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

/// Indices `[i − ⌊N/2⌋, i + ⌈N/2⌉ − 1]` clipped to `movie`.
pub fn neighbour_window(i: usize, n: usize, movie: std::ops::Range<usize>) -> std::ops::Range<usize> {
    let lo = i.saturating_sub(n / 2).max(movie.start);
    let hi = (i + n.div_ceil(2)).min(movie.end);
    lo..hi
}

fn movie_ranges(pairs: &[EvalPair]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=pairs.len() {
        if i == pairs.len() || pairs[i].movie_id != pairs[start].movie_id {
            out.push(start..i);
            start = i;
        }
    }
    out
}

/// Whether each candidate's own ground truth ranks in the top `k` among
/// the ground truths of its `N`-neighbourhood. Ties go to the smaller
/// temporal distance, then the lower index.
pub fn recall_hits(pairs: &[EvalPair], k: usize, n: usize, sim: &SimilarityFn) -> Result<Vec<bool>> {
    if k == 0 || n == 0 {
        return Err(Error::invalid(format!("R@k/N needs k ≥ 1 and N ≥ 1, got k={k}, N={n}")));
    }
    let owners: Vec<std::ops::Range<usize>> = movie_ranges(pairs)
        .into_iter()
        .flat_map(|m| std::iter::repeat(m.clone()).take(m.len()))
        .collect();
    Ok((0..pairs.len())
        .into_par_iter()
        .map(|i| {
            let window = neighbour_window(i, n, owners[i].clone());
            let mut ranked: Vec<(f64, usize, usize)> = window
                .map(|j| (sim.score(&pairs[i].candidate, &pairs[j].reference) + 0.0, j.abs_diff(i), j))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            ranked.iter().take(k).any(|&(_, _, j)| j == i)
        })
        .collect())
}

/// Fraction of candidates whose own ground truth is in the top `k`.
pub fn recall_at_k_within_n(pairs: &[EvalPair], k: usize, n: usize, sim: &SimilarityFn) -> Result<f64> {
    let hits = recall_hits(pairs, k, n, sim)?;
    if hits.is_empty() {
        return Ok(0.0);
    }
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::numerics::rng;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn pairs(texts: &[(&str, &str, u32)]) -> Vec<EvalPair> {
        texts
            .iter()
            .enumerate()
            .map(|(i, (c, r, m))| EvalPair {
                candidate: w(c),
                reference: w(r),
                clip_id: i as u32,
                movie_id: *m,
                order: i,
            })
            .collect()
    }

    fn refs(p: &[EvalPair]) -> Vec<Vec<String>> {
        p.iter().map(|x| x.reference.clone()).collect()
    }

    #[test]
    fn similarity_names_round_trip() {
        for k in [SimilarityKind::LcsF1, SimilarityKind::TfidfCosine, SimilarityKind::CharNgramCosine] {
            assert_eq!(k.to_string().parse::<SimilarityKind>().unwrap(), k);
        }
        assert!("bert".parse::<SimilarityKind>().is_err());
    }

    #[test]
    fn similarity_ranges_and_symmetry() {
        let docs = vec![w("a b c"), w("b c d"), w("x y")];
        for k in [SimilarityKind::LcsF1, SimilarityKind::TfidfCosine, SimilarityKind::CharNgramCosine] {
            let s = SimilarityFn::new(k, &docs);
            assert!((s.score(&w("a b c"), &w("a b c")) - 1.0).abs() < 1e-12, "{k}");
            assert_eq!(s.score(&w("a b"), &w("")), 0.0);
            let x = s.score(&w("a b c"), &w("b d"));
            assert!((0.0..=1.0).contains(&x));
            if k != SimilarityKind::LcsF1 {
                assert_eq!(x, s.score(&w("b d"), &w("a b c")));
            }
        }
    }

    #[test]
    fn zero_scores_tie_regardless_of_sign() {
        // `a` vs `c` scores −0 under the cosine kinds; the own reference
        // still wins the tie against the +0 neighbour
        let p = pairs(&[("a", "", 0), ("a", "c", 0)]);
        for k in [SimilarityKind::TfidfCosine, SimilarityKind::CharNgramCosine] {
            let s = SimilarityFn::new(k, &refs(&p));
            assert_eq!(recall_hits(&p, 1, 2, &s).unwrap(), vec![true, true], "{k}");
        }
    }

    #[test]
    fn windows_are_truncated_at_movie_edges() {
        assert_eq!(neighbour_window(10, 16, 0..40), 2..18);
        assert_eq!(neighbour_window(1, 5, 0..40), 0..4);
        assert_eq!(neighbour_window(38, 5, 0..40), 36..40);
        assert_eq!(neighbour_window(3, 1, 0..40), 3..4);
    }

    #[test]
    fn recall_examples() {
        let p = pairs(&[
            ("a b", "a b", 0),
            ("c d", "c d", 0),
            ("e f", "e f", 0),
            ("g h", "g h", 1),
        ]);
        let sim = SimilarityFn::new(SimilarityKind::TfidfCosine, &refs(&p));
        for k in 1..=3 {
            assert_eq!(recall_at_k_within_n(&p, k, 3, &sim).unwrap(), 1.0);
        }
        let same = pairs(&[("a", "z", 0), ("b", "z", 0), ("c", "z", 0), ("d", "z", 0)]);
        let sim = SimilarityFn::new(SimilarityKind::TfidfCosine, &refs(&same));
        // every ground truth ties; the candidate's own one is closest in time
        assert_eq!(recall_at_k_within_n(&same, 1, 3, &sim).unwrap(), 1.0);
        assert!(recall_at_k_within_n(&same, 0, 3, &sim).is_err());
        assert!(recall_at_k_within_n(&same, 1, 0, &sim).is_err());
    }

    /// Counts strictly better neighbours by exhaustive comparison.
    fn brute_force(p: &[EvalPair], k: usize, n: usize, sim: &SimilarityFn) -> f64 {
        let mut hits = 0;
        for i in 0..p.len() {
            let own = sim.score(&p[i].candidate, &p[i].reference);
            let mut better = 0;
            for (j, q) in p.iter().enumerate() {
                if j == i || q.movie_id != p[i].movie_id {
                    continue;
                }
                let offset = j as i64 - i as i64;
                let inside = offset >= -((n / 2) as i64) && offset <= (n.div_ceil(2) as i64) - 1;
                if inside && sim.score(&p[i].candidate, &q.reference) > own {
                    better += 1;
                }
            }
            if better < k {
                hits += 1;
            }
        }
        hits as f64 / p.len() as f64
    }

    fn random_pairs(seed: u64) -> Vec<EvalPair> {
        let mut r = rng::seeded(seed);
        let vocab = ["a", "b", "c", "d"];
        let text = |r: &mut rng::SeededRng| -> String {
            let len = r.gen_range(1..4);
            (0..len).map(|_| vocab[r.gen_range(0..4)]).collect::<Vec<_>>().join(" ")
        };
        let mut out = Vec::new();
        let mut movie = 0;
        for i in 0..r.gen_range(5..30) {
            if r.gen_bool(0.1) {
                movie += 1;
            }
            out.push(EvalPair {
                candidate: w(&text(&mut r)),
                reference: w(&text(&mut r)),
                clip_id: i,
                movie_id: movie,
                order: i as usize,
            });
        }
        out
    }

    #[test]
    fn recall_matches_brute_force() {
        for seed in 0..10 {
            let p = random_pairs(seed);
            for kind in [SimilarityKind::LcsF1, SimilarityKind::TfidfCosine, SimilarityKind::CharNgramCosine] {
                let sim = SimilarityFn::new(kind, &refs(&p));
                for (k, n) in [(1, 4), (2, 5), (5, 16), (3, 3)] {
                    let got = recall_at_k_within_n(&p, k, n, &sim).unwrap();
                    assert_eq!(got, brute_force(&p, k, n, &sim), "seed {seed} {kind} k={k} N={n}");
                }
                assert_eq!(recall_at_k_within_n(&p, 7, 7, &sim).unwrap(), 1.0);
            }
        }
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..500) {
            let p = random_pairs(seed);
            let sim = SimilarityFn::new(SimilarityKind::TfidfCosine, &refs(&p));
            let mut last = 0.0;
            for k in 1..=8 {
                let r = recall_at_k_within_n(&p, k, 8, &sim).unwrap();
                prop_assert!(r >= last);
                last = r;
            }
            prop_assert_eq!(last, 1.0);
        }
    }
}
