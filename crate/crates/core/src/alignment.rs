//! Video/AD alignment: global contrastive matching between pooled clips and
//! `[CLS]` text vectors, frame-aware AD aggregation, the multi-instance
//! frame loss, their γ-blend, and the loop that adapts a vision-side affine
//! projection while the text side stays frozen.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataio::{Corpus, TextEncoder};
use crate::error::{Error, Result};
use crate::numerics::{
    evaluate_with_gradients, linear, rng, Adam, Graph, ParamStore, Real, Tensor, Var, NORM_EPS,
};

pub const ADAPTER_WEIGHT: &str = "adapter.weight";
pub const ADAPTER_BIAS: &str = "adapter.bias";

/// Text side of one AD: the `[CLS]` vector and the word vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdEmbedding<T> {
    /// `[C]`
    pub cls: Tensor<T>,
    /// `[m×C]`, `m ≥ 1`
    pub words: Tensor<T>,
}

/// `B` clips with their ADs. The text side never receives gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch<T> {
    pub clips: Vec<Tensor<T>>,
    pub ads: Vec<AdEmbedding<T>>,
}

impl<T: Real> AlignmentBatch<T> {
    pub fn new(clips: Vec<Tensor<T>>, ads: Vec<AdEmbedding<T>>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::invalid("alignment batch needs at least one clip"));
        }
        if clips.len() != ads.len() {
            return Err(Error::shape(format!(
                "{} clips vs {} ADs",
                clips.len(),
                ads.len()
            )));
        }
        let c = clips[0].cols();
        for (i, (v, ad)) in clips.iter().zip(&ads).enumerate() {
            if v.rows() == 0 || v.shape().len() != 2 {
                return Err(Error::invalid(format!("clip {i} has no frames")));
            }
            if ad.words.rows() == 0 || ad.words.shape().len() != 2 {
                return Err(Error::invalid(format!("AD {i} has no words")));
            }
            if v.cols() != c || ad.words.cols() != c || ad.cls.numel() != c {
                return Err(Error::shape(format!("entry {i} is not {c} channels wide")));
            }
        }
        Ok(Self { clips, ads })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.clips[0].cols()
    }
}

/// Affine projection applied to every frame embedding, followed by row
/// normalization.
#[derive(Debug, Clone, Copy)]
pub struct VisionAdapter;

impl VisionAdapter {
    /// Identity initialization.
    pub fn init<T: Real>(channels: usize) -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.insert(ADAPTER_WEIGHT, Tensor::eye(channels))
            .expect("fresh store");
        s.insert(ADAPTER_BIAS, Tensor::zeros(&[channels]))
            .expect("fresh store");
        s
    }

    pub fn is_adapter_param(name: &str) -> bool {
        name.starts_with("adapter.")
    }

    /// Adapted, L2-normalized frames on the tape.
    pub fn apply<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, frames: Var) -> Var {
        let w = g.param(store, ADAPTER_WEIGHT);
        let b = g.param(store, ADAPTER_BIAS);
        let y = linear(g, frames, w, b);
        g.l2_normalize_rows(y, T::lit(NORM_EPS))
    }

    /// Adapted frames for a plain tensor.
    pub fn forward<T: Real>(store: &ParamStore<T>, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let w = store
            .get(ADAPTER_WEIGHT)
            .ok_or_else(|| Error::invalid("store has no adapter"))?;
        if w.cols() != frames.cols() {
            return Err(Error::shape(format!(
                "adapter expects {} channels, frames have {}",
                w.cols(),
                frames.cols()
            )));
        }
        let mut g = Graph::new();
        let f = g.constant(frames.clone());
        let y = Self::apply(&mut g, store, f);
        Ok(g.value(y).clone())
    }
}

/// Stage-I hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub gamma: f64,
    /// Temperature of the frame-aware word aggregation.
    pub tau_f: f64,
    /// Frames sampled per clip for the multi-instance loss.
    pub frames_sampled: usize,
    pub logit_scale: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            tau_f: 0.1,
            frames_sampled: 1,
            logit_scale: 1.0 / 0.07,
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if !(self.tau_f > 0.0) {
            return Err(Error::invalid(format!("tau_f must be positive, got {}", self.tau_f)));
        }
        if self.frames_sampled == 0 {
            return Err(Error::invalid("frames_sampled must be at least 1"));
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::invalid("logit_scale must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Mean-pooled normalized clip vectors and normalized `[CLS]` vectors.
pub fn pool_global_graph<T: Real>(g: &mut Graph<T>, adapted: &[Var], cls: &[Var]) -> (Var, Var) {
    let means: Vec<Var> = adapted.iter().map(|&f| g.mean_rows(f)).collect();
    let v = g.concat_rows(&means);
    let v = g.l2_normalize_rows(v, T::lit(NORM_EPS));
    let t = g.concat_rows(cls);
    let t = g.l2_normalize_rows(t, T::lit(NORM_EPS));
    (v, t)
}

/// Bidirectional InfoNCE over the `B×B` similarity matrix.
pub fn global_contrastive_graph<T: Real>(g: &mut Graph<T>, v: Var, t: Var, logit_scale: T) -> Var {
    let b = g.shape(v).0;
    let sims = g.matmul_t(v, t);
    let logits = g.scale(sims, logit_scale);
    let targets: Vec<usize> = (0..b).collect();
    let w = vec![T::one() / T::from_usize(b).unwrap(); b];
    let v2t = g.cross_entropy(logits, &targets, &w);
    let logits_t = g.transpose(logits);
    let t2v = g.cross_entropy(logits_t, &targets, &w);
    g.add(v2t, t2v)
}

/// `softmax(V · wordsᵀ / τ) · words`
pub fn frame_aware_graph<T: Real>(g: &mut Graph<T>, frames: Var, words: Var, tau: T) -> Var {
    let sims = g.matmul_t(frames, words);
    let w = g.softmax_rows(sims, T::one() / tau, false);
    g.matmul(w, words)
}

/// Per-clip multi-instance losses; `sampled[i]` lists the frames of clip `i`
/// used as anchors (their losses are averaged).
pub fn mil_per_clip_graph<T: Real>(
    g: &mut Graph<T>,
    adapted: &[Var],
    words: &[Var],
    sampled: &[Vec<usize>],
    tau_f: T,
    logit_scale: T,
) -> Vec<Var> {
    let aware: Vec<Var> = adapted
        .iter()
        .zip(words)
        .map(|(&f, &w)| {
            let t = frame_aware_graph(g, f, w, tau_f);
            g.l2_normalize_rows(t, T::lit(NORM_EPS))
        })
        .collect();
    let counts: Vec<usize> = aware.iter().map(|&a| g.shape(a).0).collect();
    let all = g.concat_rows(&aware);
    let mut out = Vec::with_capacity(adapted.len());
    let mut offset = 0;
    for (i, &frames) in adapted.iter().enumerate() {
        let pos: Vec<usize> = (offset..offset + counts[i]).collect();
        offset += counts[i];
        let anchors = g.select_rows(frames, &sampled[i]);
        let sims = g.matmul_t(anchors, all);
        let logits = g.scale(sims, logit_scale);
        let lse_all = g.logsumexp_rows(logits);
        let pos_logits = g.select_cols(logits, &pos);
        let lse_pos = g.logsumexp_rows(pos_logits);
        let per_anchor = g.sub(lse_all, lse_pos);
        out.push(g.mean_rows(per_anchor));
    }
    out
}

/// Loss terms of one batch on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Terms {
    pub global: Var,
    pub fine: Var,
    pub total: Var,
}

/// Frames sampled as multi-instance anchors, one list per clip.
pub fn sample_anchor_frames(
    batch_frames: &[usize],
    per_clip: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    batch_frames
        .iter()
        .map(|&n| {
            if per_clip >= n {
                (0..n).collect()
            } else {
                rand::seq::index::sample(rng, n, per_clip).into_vec()
            }
        })
        .collect()
}

pub fn stage1_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    batch: &AlignmentBatch<T>,
    config: &AlignmentConfig,
    anchors: &[Vec<usize>],
) -> Stage1Terms {
    let adapted: Vec<Var> = batch
        .clips
        .iter()
        .map(|v| {
            let f = g.constant(v.clone());
            VisionAdapter::apply(g, store, f)
        })
        .collect();
    let cls: Vec<Var> = batch
        .ads
        .iter()
        .map(|a| g.constant(a.cls.clone().reshape(vec![1, a.cls.numel()]).expect("numel")))
        .collect();
    let words: Vec<Var> = batch.ads.iter().map(|a| g.constant(a.words.clone())).collect();
    let scale = T::lit(config.logit_scale);

    let (v, t) = pool_global_graph(g, &adapted, &cls);
    let global = global_contrastive_graph(g, v, t, scale);
    let per_clip = mil_per_clip_graph(g, &adapted, &words, anchors, T::lit(config.tau_f), scale);
    let stacked = g.concat_rows(&per_clip);
    let fine = g.mean_rows(stacked);
    let a = g.scale(global, T::lit(config.gamma));
    let b = g.scale(fine, T::lit(1.0 - config.gamma));
    let total = g.add(a, b);
    Stage1Terms {
        global,
        fine,
        total,
    }
}

/// Plain-tensor pooling: `(v [B×C], t [B×C])`, both row-normalized.
pub fn pool_global<T: Real>(
    batch: &AlignmentBatch<T>,
    adapter: &ParamStore<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let adapted: Vec<Var> = batch
        .clips
        .iter()
        .map(|v| {
            let f = g.constant(v.clone());
            VisionAdapter::apply(&mut g, adapter, f)
        })
        .collect();
    let cls: Vec<Var> = batch
        .ads
        .iter()
        .map(|a| g.constant(a.cls.clone().reshape(vec![1, a.cls.numel()]).expect("numel")))
        .collect();
    let (v, t) = pool_global_graph(&mut g, &adapted, &cls);
    Ok((g.value(v).clone(), g.value(t).clone()))
}

pub fn global_contrastive_loss<T: Real>(v: &Tensor<T>, t: &Tensor<T>, logit_scale: f64) -> Result<T> {
    if v.rows() != t.rows() || v.cols() != t.cols() || v.rows() == 0 {
        return Err(Error::shape(format!(
            "video {:?} vs text {:?}",
            v.shape(),
            t.shape()
        )));
    }
    let mut g = Graph::new();
    let (vv, tt) = (g.constant(v.clone()), g.constant(t.clone()));
    let l = global_contrastive_graph(&mut g, vv, tt, T::lit(logit_scale));
    Ok(g.value(l).item())
}

pub fn frame_aware_ad<T: Real>(frames: &Tensor<T>, words: &Tensor<T>, tau_f: f64) -> Result<Tensor<T>> {
    if words.rows() == 0 {
        return Err(Error::invalid("frame-aware aggregation needs at least one word"));
    }
    if !(tau_f > 0.0) {
        return Err(Error::invalid(format!("tau_f must be positive, got {tau_f}")));
    }
    if frames.cols() != words.cols() {
        return Err(Error::shape("frames and words differ in width"));
    }
    let mut g = Graph::new();
    let (f, w) = (g.constant(frames.clone()), g.constant(words.clone()));
    let out = frame_aware_graph(&mut g, f, w, T::lit(tau_f));
    Ok(g.value(out).clone())
}

fn anchors_for<T: Real>(batch: &AlignmentBatch<T>, config: &AlignmentConfig) -> Vec<Vec<usize>> {
    let mut r = rng::fork(config.seed, "mil-anchors");
    let frames: Vec<usize> = batch.clips.iter().map(Tensor::rows).collect();
    sample_anchor_frames(&frames, config.frames_sampled, &mut r)
}

/// Per-clip multi-instance losses with anchors drawn from `config.seed`.
pub fn mil_per_clip<T: Real>(
    batch: &AlignmentBatch<T>,
    adapter: &ParamStore<T>,
    config: &AlignmentConfig,
) -> Result<Vec<T>> {
    config.validate()?;
    let anchors = anchors_for(batch, config);
    let mut g = Graph::new();
    let adapted: Vec<Var> = batch
        .clips
        .iter()
        .map(|v| {
            let f = g.constant(v.clone());
            VisionAdapter::apply(&mut g, adapter, f)
        })
        .collect();
    let words: Vec<Var> = batch.ads.iter().map(|a| g.constant(a.words.clone())).collect();
    let per = mil_per_clip_graph(
        &mut g,
        &adapted,
        &words,
        &anchors,
        T::lit(config.tau_f),
        T::lit(config.logit_scale),
    );
    Ok(per.into_iter().map(|v| g.value(v).item()).collect())
}

pub fn mil_loss<T: Real>(
    batch: &AlignmentBatch<T>,
    adapter: &ParamStore<T>,
    config: &AlignmentConfig,
) -> Result<T> {
    let per = mil_per_clip(batch, adapter, config)?;
    let n = T::from_usize(per.len()).unwrap();
    Ok(per.into_iter().sum::<T>() / n)
}

/// Values of the Stage-I loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Loss {
    pub global: f64,
    pub fine: f64,
    pub total: f64,
}

pub fn stage1_loss<T: Real>(
    batch: &AlignmentBatch<T>,
    adapter: &ParamStore<T>,
    config: &AlignmentConfig,
) -> Result<Stage1Loss> {
    config.validate()?;
    let anchors = anchors_for(batch, config);
    let mut g = Graph::new();
    let terms = stage1_graph(&mut g, adapter, batch, config, &anchors);
    Ok(Stage1Loss {
        global: g.value(terms.global).item().as_f64(),
        fine: g.value(terms.fine).item().as_f64(),
        total: g.value(terms.total).item().as_f64(),
    })
}

/// One row of the Stage-I loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentLogRow {
    pub epoch: usize,
    pub step: usize,
    pub l_g: f64,
    pub l_f: f64,
    pub l_i: f64,
}

pub fn alignment_log_csv(rows: &[AlignmentLogRow]) -> String {
    let mut s = String::from("epoch,step,L_g,L_f,L_I\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.l_g, r.l_f, r.l_i).unwrap();
    }
    s
}

/// Mean `L_I` per epoch, in epoch order.
pub fn epoch_means(rows: &[AlignmentLogRow]) -> Vec<f64> {
    let epochs = rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f64> = rows.iter().filter(|r| r.epoch == e).map(|r| r.l_i).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

/// Frozen text side of a corpus: one embedding per record.
pub fn encode_corpus_text(corpus: &Corpus, encoder: &TextEncoder) -> Result<Vec<AdEmbedding<f32>>> {
    if encoder.dim != corpus.channels() {
        return Err(Error::shape(format!(
            "text encoder width {} vs corpus channels {}",
            encoder.dim,
            corpus.channels()
        )));
    }
    corpus
        .records()
        .iter()
        .map(|r| {
            let e = encoder
                .encode(&r.ad_text)
                .ok_or_else(|| Error::invalid(format!("clip {} has an empty AD", r.clip_id)))?;
            Ok(AdEmbedding {
                cls: e.cls,
                words: e.words,
            })
        })
        .collect()
}

/// Trained adapter and its loss log.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub adapter: ParamStore<f32>,
    pub log: Vec<AlignmentLogRow>,
}

/// Adapts the vision projection on `corpus`; the text side is read-only.
pub fn adapt_train(
    corpus: &Corpus,
    text: &[AdEmbedding<f32>],
    config: &AlignmentConfig,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if text.len() != corpus.len() {
        return Err(Error::shape("one text embedding per record required"));
    }
    let mut adapter = VisionAdapter::init::<f32>(corpus.channels());
    let mut opt = Adam::new(config.learning_rate);
    let mut shuffle = rng::fork(config.seed, "adapt-shuffle");
    let mut anchor_rng = rng::fork(config.seed, "adapt-anchors");
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 && corpus.len() >= 2 {
                continue;
            }
            let batch = AlignmentBatch::new(
                chunk.iter().map(|&i| corpus.records()[i].frames.clone()).collect(),
                chunk.iter().map(|&i| text[i].clone()).collect(),
            )?;
            let frames: Vec<usize> = batch.clips.iter().map(Tensor::rows).collect();
            let anchors = sample_anchor_frames(&frames, config.frames_sampled, &mut anchor_rng);
            let mut terms = None;
            evaluate_with_gradients(&mut adapter, |g, s| {
                let t = stage1_graph(g, s, &batch, config, &anchors);
                terms = Some((g.value(t.global).item(), g.value(t.fine).item()));
                Ok(t.total)
            })?;
            let (l_g, l_f) = terms.expect("loss built");
            let (l_g, l_f) = (l_g as f64, l_f as f64);
            opt.step(&mut adapter, VisionAdapter::is_adapter_param);
            log.push(AlignmentLogRow {
                epoch,
                step,
                l_g,
                l_f,
                l_i: config.gamma * l_g + (1.0 - config.gamma) * l_f,
            });
            step += 1;
        }
    }
    Ok(AdaptOutcome { adapter, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_f64_rows(rows).unwrap()
    }

    fn ad(cls: &[f64], words: &[&[f64]]) -> AdEmbedding<f64> {
        AdEmbedding {
            cls: Tensor::vector(cls.to_vec()),
            words: t(words),
        }
    }

    #[test]
    fn pooling_examples() {
        let id = VisionAdapter::init::<f64>(2);
        let batch = AlignmentBatch::new(
            vec![t(&[&[3.0, 4.0]]), t(&[&[1.0, 0.0], &[0.0, 1.0]])],
            vec![ad(&[2.0, 0.0], &[&[1.0, 0.0]]), ad(&[0.0, 1.0], &[&[0.0, 1.0]])],
        )
        .unwrap();
        let (v, tt) = pool_global(&batch, &id).unwrap();
        assert!((v.at(0, 0) - 0.6).abs() < 1e-12 && (v.at(0, 1) - 0.8).abs() < 1e-12);
        assert!((v.at(1, 0) - 0.70710678).abs() < 1e-6);
        assert!((v.at(1, 1) - 0.70710678).abs() < 1e-6);
        assert!((tt.at(0, 0) - 1.0).abs() < 1e-9 && tt.at(0, 1) == 0.0);

        // opposite frames pool to the zero vector; the epsilon keeps it finite
        let batch = AlignmentBatch::new(
            vec![t(&[&[1.0, 0.0], &[-1.0, 0.0]])],
            vec![ad(&[1.0, 0.0], &[&[1.0, 0.0]])],
        )
        .unwrap();
        let (v, _) = pool_global(&batch, &id).unwrap();
        assert!(v.is_finite());
        assert!(v.data().iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn empty_batch_and_empty_clip_are_rejected() {
        assert!(AlignmentBatch::<f64>::new(vec![], vec![]).is_err());
        let r = AlignmentBatch::new(
            vec![Tensor::<f64>::zeros(&[0, 2])],
            vec![ad(&[1.0, 0.0], &[&[1.0, 0.0]])],
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn contrastive_examples() {
        let one = t(&[&[0.6, 0.8]]);
        assert_eq!(global_contrastive_loss(&one, &one, 1.0).unwrap(), 0.0);
        let e = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = global_contrastive_loss(&e, &e, 1.0).unwrap();
        let dir = (1.0 + (-1f64).exp()).ln();
        assert!((dir - 0.31326).abs() < 1e-5);
        assert!((l - 2.0 * dir).abs() < 1e-4);
        assert!((l - 0.62652).abs() < 1e-4);
        let swapped = t(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let l = global_contrastive_loss(&e, &swapped, 1.0).unwrap();
        assert!((l - 2.0 * (1.0 + 1f64.exp()).ln()).abs() < 1e-9);
        assert!(global_contrastive_loss(&e, &one, 1.0).is_err());
    }

    #[test]
    fn frame_aware_examples() {
        let w = t(&[&[0.3, -0.2]]);
        let f = t(&[&[1.0, 0.0], &[0.5, 0.5]]);
        for tau in [0.01, 1.0, 100.0] {
            let out = frame_aware_ad(&f, &w, tau).unwrap();
            assert_eq!(out.row(0), w.row(0));
            assert_eq!(out.row(1), w.row(0));
        }
        let words = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = frame_aware_ad(&t(&[&[1.0, 0.0]]), &words, 1.0).unwrap();
        assert!((out.at(0, 0) - 0.7311).abs() < 1e-4);
        assert!((out.at(0, 1) - 0.2689).abs() < 1e-4);
        let out = frame_aware_ad(&t(&[&[1.0, 0.0]]), &words, 1e6).unwrap();
        assert!((out.at(0, 0) - 0.5).abs() < 1e-5);
        assert!(frame_aware_ad(&t(&[&[1.0, 0.0]]), &Tensor::zeros(&[0, 2]), 1.0).is_err());
    }

    #[test]
    fn mil_examples() {
        let id = VisionAdapter::init::<f64>(2);
        let cfg = AlignmentConfig {
            logit_scale: 1.0,
            tau_f: 1.0,
            ..AlignmentConfig::default()
        };
        let single = AlignmentBatch::new(
            vec![t(&[&[1.0, 0.0], &[0.0, 1.0]])],
            vec![ad(&[1.0, 0.0], &[&[1.0, 0.0], &[0.2, 0.9]])],
        )
        .unwrap();
        assert_eq!(mil_loss(&single, &id, &cfg).unwrap(), 0.0);

        // positive at similarity 1, negative at 0
        let batch = AlignmentBatch::new(
            vec![t(&[&[1.0, 0.0]]), t(&[&[0.0, 1.0]])],
            vec![ad(&[1.0, 0.0], &[&[1.0, 0.0]]), ad(&[0.0, 1.0], &[&[0.0, 1.0]])],
        )
        .unwrap();
        let l = mil_loss(&batch, &id, &cfg).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-9);

        // first clip: positive and negative both at similarity 0
        let id3 = VisionAdapter::init::<f64>(3);
        let batch = AlignmentBatch::new(
            vec![t(&[&[1.0, 0.0, 0.0]]), t(&[&[0.0, 1.0, 0.0]])],
            vec![
                ad(&[0.0, 1.0, 0.0], &[&[0.0, 1.0, 0.0]]),
                ad(&[0.0, 0.0, 1.0], &[&[0.0, 0.0, 1.0]]),
            ],
        )
        .unwrap();
        let per = mil_per_clip(&batch, &id3, &cfg).unwrap();
        assert!((per[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gamma_endpoints_select_components() {
        let id = VisionAdapter::init::<f64>(2);
        let batch = AlignmentBatch::new(
            vec![t(&[&[1.0, 0.2], &[0.1, 1.0]]), t(&[&[0.3, -1.0]])],
            vec![
                ad(&[1.0, 0.1], &[&[1.0, 0.0], &[0.5, 0.5]]),
                ad(&[0.1, -1.0], &[&[0.0, -1.0]]),
            ],
        )
        .unwrap();
        let base = AlignmentConfig::default();
        let one = stage1_loss(&batch, &id, &AlignmentConfig { gamma: 1.0, ..base.clone() }).unwrap();
        let (v, tt) = pool_global(&batch, &id).unwrap();
        assert_eq!(one.total, global_contrastive_loss(&v, &tt, base.logit_scale).unwrap());
        let zero = stage1_loss(&batch, &id, &AlignmentConfig { gamma: 0.0, ..base.clone() }).unwrap();
        assert_eq!(zero.total, mil_loss(&batch, &id, &base).unwrap());
        let half = stage1_loss(&batch, &id, &base).unwrap();
        assert!((half.total - 0.5 * (half.global + half.fine)).abs() < 1e-12);
        assert!(AlignmentConfig { gamma: 1.5, ..base }.validate().is_err());
    }
}
