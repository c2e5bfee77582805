use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::caption::{cider_per_pair, rouge_l, CiderConfig, ROUGE_BETA};
use super::redundancy::{redundancy_contrast, REDUNDANCY_WINDOW};
use super::retrieval::{recall_hits, EvalPair, SimilarityFn, SimilarityKind};
use crate::dataio::{normalize_words, Corpus};
use crate::error::{Error, Result};
use crate::narration::{build_distinctive_set, trailing_windows, GenerationRecord};

/// What to compute in [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// `(k, N)` pairs for Recall@k/N.
    pub recall: Vec<(usize, usize)>,
    pub similarity: SimilarityKind,
    pub rouge_beta: f64,
    pub cider: CiderConfig,
    pub redundancy_window: usize,
    /// Window used to define each clip's distinctive words.
    pub context_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            recall: vec![(1, 16), (5, 16)],
            similarity: SimilarityKind::default(),
            rouge_beta: ROUGE_BETA,
            cider: CiderConfig::default(),
            redundancy_window: REDUNDANCY_WINDOW,
            context_window: 16,
        }
    }
}

/// Corpus-level scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clips: usize,
    pub rouge_l: f64,
    pub cider: f64,
    /// Keyed `R@k/N`.
    pub recall: BTreeMap<String, f64>,
    pub similarity: String,
    /// Fraction of gold distinctive words present in the generated ADs.
    pub distinctive_recall: f64,
    pub redundancy_contrast: Option<f64>,
}

/// Per-clip scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipScore {
    pub clip_id: u32,
    pub movie_id: u32,
    pub rouge_l: f64,
    pub cider: f64,
    pub distinctive_hits: usize,
    pub distinctive_total: usize,
    pub recall_hits: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_clip: Vec<ClipScore>,
    recall_keys: Vec<String>,
}

pub fn recall_key(k: usize, n: usize) -> String {
    format!("R@{k}/{n}")
}

/// Gold distinctive words per clip, from the window ending at the clip.
pub fn distinctive_words(corpus: &Corpus, window: usize) -> Vec<BTreeSet<String>> {
    let vocab = corpus.vocabulary();
    trailing_windows(corpus, window)
        .into_iter()
        .map(|w| {
            let tokens: Vec<Vec<u32>> = w
                .iter()
                .map(|&i| vocab.tokenize(&corpus.records()[i].ad_text))
                .collect();
            let (target, contexts) = tokens.split_last().expect("non-empty window");
            build_distinctive_set(target, contexts, &BTreeSet::new())
                .iter()
                .filter_map(|t| vocab.token(t).map(String::from))
                .collect()
        })
        .collect()
}

/// Scores generated ADs against the corpus ground truth. Every record of
/// the corpus must have exactly one generation.
pub fn evaluate(corpus: &Corpus, generations: &[GenerationRecord], config: &EvalConfig) -> Result<Evaluation> {
    let by_clip: HashMap<u32, &GenerationRecord> =
        generations.iter().map(|g| (g.clip_id, g)).collect();
    if by_clip.len() != generations.len() {
        return Err(Error::invalid("duplicate clip ids among generations"));
    }
    let mut pairs = Vec::with_capacity(corpus.len());
    for movie in corpus.movies() {
        for (order, i) in movie.enumerate() {
            let r = &corpus.records()[i];
            let g = by_clip
                .get(&r.clip_id)
                .ok_or_else(|| Error::invalid(format!("no generation for clip {}", r.clip_id)))?;
            pairs.push(EvalPair {
                candidate: normalize_words(&g.text),
                reference: normalize_words(&r.ad_text),
                clip_id: r.clip_id,
                movie_id: r.movie_id,
                order,
            });
        }
    }
    if generations.len() != pairs.len() {
        return Err(Error::invalid("generations contain clips absent from the corpus"));
    }
    let cands: Vec<Vec<String>> = pairs.iter().map(|p| p.candidate.clone()).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.reference.clone()).collect();
    let cider_scores = cider_per_pair(&cands, &refs, config.cider);
    let sim = SimilarityFn::new(config.similarity, &refs);
    let mut recall = BTreeMap::new();
    let mut hits_by_key = Vec::new();
    let mut recall_keys = Vec::new();
    for &(k, n) in &config.recall {
        let hits = recall_hits(&pairs, k, n, &sim)?;
        let value = hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64;
        recall.insert(recall_key(k, n), value);
        recall_keys.push(recall_key(k, n));
        hits_by_key.push(hits);
    }
    let gold = distinctive_words(corpus, config.context_window);
    let per_clip: Vec<ClipScore> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let produced: BTreeSet<&String> = p.candidate.iter().collect();
            ClipScore {
                clip_id: p.clip_id,
                movie_id: p.movie_id,
                rouge_l: rouge_l(&p.candidate, &p.reference, config.rouge_beta),
                cider: cider_scores[i],
                distinctive_hits: gold[i].iter().filter(|w| produced.contains(w)).count(),
                distinctive_total: gold[i].len(),
                recall_hits: hits_by_key.iter().map(|h| h[i]).collect(),
            }
        })
        .collect();
    let n = per_clip.len().max(1) as f64;
    let total_gold: usize = per_clip.iter().map(|c| c.distinctive_total).sum();
    let report = MetricsReport {
        clips: per_clip.len(),
        rouge_l: per_clip.iter().map(|c| c.rouge_l).sum::<f64>() / n,
        cider: per_clip.iter().map(|c| c.cider).sum::<f64>() / n,
        recall,
        similarity: config.similarity.to_string(),
        distinctive_recall: if total_gold == 0 {
            0.0
        } else {
            per_clip.iter().map(|c| c.distinctive_hits).sum::<usize>() as f64 / total_gold as f64
        },
        redundancy_contrast: redundancy_contrast(&corpus.pooled_features(), config.redundancy_window).ok(),
    };
    Ok(Evaluation {
        report,
        per_clip,
        recall_keys,
    })
}

impl Evaluation {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("plain report")
    }

    /// Header `clip_id,movie_id,rouge_l,cider,distinctive_hits,distinctive_total`
    /// followed by one `R@k/N` hit column per requested pair.
    pub fn per_clip_csv(&self) -> String {
        let mut s = String::from("clip_id,movie_id,rouge_l,cider,distinctive_hits,distinctive_total");
        for k in &self.recall_keys {
            write!(s, ",{k}").unwrap();
        }
        s.push('\n');
        for c in &self.per_clip {
            write!(
                s,
                "{},{},{},{},{},{}",
                c.clip_id, c.movie_id, c.rouge_l, c.cider, c.distinctive_hits, c.distinctive_total
            )
            .unwrap();
            for &h in &c.recall_hits {
                write!(s, ",{}", u8::from(h)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}
