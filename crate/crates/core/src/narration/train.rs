use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decoder::{
    all_logits, is_decoder_param, stage2_terms, target_logits, DecoderConfig, Stage2Terms,
};
use super::prompt::{
    assemble_prompt, build_distinctive_set, clip_names, DistinctiveSet, PromptSequence,
};
use crate::alignment::VisionAdapter;
use crate::contextual_ema::{encode_window_graph, ContextualConfig};
use crate::dataio::{sample_windows, Corpus, Vocabulary, WindowSampling, BOS, CHAR_SLOT, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::numerics::{rng, Adam, Graph, ParamStore, Real, Tensor};

/// Stage-II training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub contextual: ContextualConfig,
    /// `vocab_size` is replaced by the corpus vocabulary size.
    pub decoder: DecoderConfig,
    /// Window size `N`.
    pub window: usize,
    pub consecutive: bool,
    pub stride: usize,
    /// Adds `L_dist` to the objective.
    pub distinctive: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub train_adapter: bool,
    /// Resampler, bases, cross-attention and projector.
    pub train_visual: bool,
    pub train_decoder: bool,
    pub stopwords: Vec<String>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            contextual: ContextualConfig::default(),
            decoder: DecoderConfig::new(0),
            window: 16,
            consecutive: true,
            stride: 1,
            distinctive: true,
            learning_rate: 3e-3,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            train_adapter: false,
            train_visual: true,
            train_decoder: true,
            stopwords: Vec::new(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.contextual.validate()?;
        if self.contextual.decoder_width != self.decoder.width {
            return Err(Error::invalid(format!(
                "projector width {} differs from decoder width {}",
                self.contextual.decoder_width, self.decoder.width
            )));
        }
        if self.window == 0 || self.stride == 0 || self.batch_size == 0 {
            return Err(Error::invalid("window, stride and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }

    fn trainable(&self, name: &str) -> bool {
        if VisionAdapter::is_adapter_param(name) {
            self.train_adapter
        } else if is_decoder_param(name) {
            self.train_decoder
        } else {
            self.train_visual
        }
    }
}

/// Everything needed to describe new clips.
#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub params: ParamStore<f32>,
    pub contextual: ContextualConfig,
    pub decoder: DecoderConfig,
    pub vocab: Vocabulary,
    /// Character bank: names that enter prompts as name tokens.
    pub names: BTreeSet<String>,
    pub window: usize,
}

impl Stage2Model {
    /// Fresh model around a (possibly identity) adapter.
    pub fn init(
        adapter: ParamStore<f32>,
        vocab: Vocabulary,
        names: BTreeSet<String>,
        config: &Stage2Config,
    ) -> Result<Self> {
        let mut decoder = config.decoder.clone();
        decoder.vocab_size = vocab.len();
        decoder.validate()?;
        let mut params = adapter;
        params.merge(config.contextual.init_params(config.seed))?;
        params.merge(decoder.init_params(config.seed))?;
        Ok(Self {
            params,
            contextual: config.contextual.clone(),
            decoder,
            vocab,
            names,
            window: config.window,
        })
    }
}

/// Window data independent of model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowExample {
    pub records: Vec<usize>,
    pub names: Vec<Vec<u32>>,
    /// Last clip's AD tokens, without `EOS`.
    pub target: Vec<u32>,
    pub distinctive: DistinctiveSet,
}

pub fn prepare_window(
    corpus: &Corpus,
    vocab: &Vocabulary,
    bank: &BTreeSet<String>,
    stopwords: &BTreeSet<u32>,
    records: &[usize],
) -> WindowExample {
    let texts: Vec<&str> = records
        .iter()
        .map(|&i| corpus.records()[i].ad_text.as_str())
        .collect();
    let tokens: Vec<Vec<u32>> = texts.iter().map(|t| vocab.tokenize(t)).collect();
    let (target, contexts) = tokens.split_last().expect("non-empty window");
    WindowExample {
        records: records.to_vec(),
        names: texts.iter().map(|t| clip_names(t, bank, vocab)).collect(),
        target: target.clone(),
        distinctive: build_distinctive_set(target, contexts, stopwords),
    }
}

fn clip_frames<T: Real>(corpus: &Corpus, records: &[usize]) -> Vec<Tensor<T>> {
    records
        .iter()
        .map(|&i| corpus.records()[i].frames.cast())
        .collect()
}

/// Full Stage-II loss of one window on the tape.
pub fn window_loss_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    contextual: &ContextualConfig,
    decoder: &DecoderConfig,
    frames: &[Tensor<T>],
    example: &WindowExample,
    dist_weight: f64,
) -> Result<(Stage2Terms, PromptSequence)> {
    let refs: Vec<&Tensor<T>> = frames.iter().collect();
    let features = encode_window_graph(g, store, &refs, contextual);
    let prompt = assemble_prompt(
        contextual.latents,
        &example.names,
        Some(&example.target),
        decoder.context,
    )?;
    let logits = target_logits(g, store, decoder, Some(features.fused), &prompt)?;
    Ok((stage2_terms(g, logits, &prompt, &example.distinctive, dist_weight), prompt))
}

/// One row of the Stage-II loss log; values are window means of the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2LogRow {
    pub epoch: usize,
    pub step: usize,
    pub l_auto: f64,
    pub l_dist: f64,
    pub l_ii: f64,
}

pub fn stage2_log_csv(rows: &[Stage2LogRow]) -> String {
    let mut s = String::from("epoch,step,L_auto,L_dist,L_II\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.l_auto, r.l_dist, r.l_ii).unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub model: Stage2Model,
    pub log: Vec<Stage2LogRow>,
    /// Movies too short for one window.
    pub skipped_movies: usize,
}

/// Windows of the corpus → adapter → resampler → EM → fusion → prompt →
/// `L_II`, optimized with Adam over the trainable parameter groups.
/// Windows of a step are evaluated in parallel and reduced in order.
pub fn train_stage2(
    corpus: &Corpus,
    adapter: ParamStore<f32>,
    names: BTreeSet<String>,
    config: &Stage2Config,
) -> Result<Stage2Outcome> {
    config.validate()?;
    let vocab = corpus.vocabulary();
    let mut model = Stage2Model::init(adapter, vocab, names, config)?;
    let set = sample_windows(
        corpus,
        WindowSampling {
            size: config.window,
            consecutive: config.consecutive,
            stride: config.stride,
            seed: config.seed,
        },
    )?;
    let stop: BTreeSet<u32> = config
        .stopwords
        .iter()
        .filter_map(|w| model.vocab.id(w))
        .collect();
    let examples: Vec<WindowExample> = set
        .windows
        .iter()
        .map(|w| prepare_window(corpus, &model.vocab, &model.names, &stop, w))
        .collect();
    let dist_weight = if config.distinctive { 1.0 } else { 0.0 };
    let mut opt = Adam::new(config.learning_rate);
    let mut shuffle = rng::fork(config.seed, "stage2-shuffle");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(config.batch_size) {
            let store = &model.params;
            let results: Vec<Result<_>> = chunk
                .par_iter()
                .map(|&w| {
                    let ex = &examples[w];
                    let frames = clip_frames::<f32>(corpus, &ex.records);
                    let mut g = Graph::new();
                    let (terms, _) = window_loss_graph(
                        &mut g,
                        store,
                        &model.contextual,
                        &model.decoder,
                        &frames,
                        ex,
                        dist_weight,
                    )?;
                    let auto = g.value(terms.auto).item() as f64;
                    let dist = g.value(terms.dist).item() as f64;
                    let total = g.value(terms.total).item() as f64;
                    if !total.is_finite() {
                        return Err(Error::numerical(
                            "loss",
                            format!("window {w} produced L_II = {total}"),
                        ));
                    }
                    let grads = g.backward(terms.total);
                    Ok((g, grads, auto, dist, total))
                })
                .collect();
            model.params.zero_grads();
            let (mut sa, mut sd, mut st) = (0.0, 0.0, 0.0);
            for r in results {
                let (g, grads, a, d, t) = r?;
                g.accumulate_param_grads(&grads, &mut model.params);
                sa += a;
                sd += d;
                st += t;
            }
            let n = chunk.len() as f64;
            model.params.scale_grads(1.0 / n as f32);
            model.params.check_finite()?;
            opt.step(&mut model.params, |name| config.trainable(name));
            log.push(Stage2LogRow {
                epoch,
                step,
                l_auto: sa / n,
                l_dist: sd / n,
                l_ii: st / n,
            });
            step += 1;
        }
        log::info!(
            "stage2 epoch {epoch}: mean L_II {:.4}",
            log.iter().filter(|r| r.epoch == epoch).map(|r| r.l_ii).sum::<f64>()
                / log.iter().filter(|r| r.epoch == epoch).count().max(1) as f64
        );
    }
    Ok(Stage2Outcome {
        model,
        log,
        skipped_movies: set.skipped_movies,
    })
}

/// Token selection during generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// Continues a `BOS`-terminated prompt until `EOS` or `max_len` tokens.
/// Padding, `BOS`, `UNK` and the name marker are never emitted. The
/// returned tokens exclude `EOS`.
pub fn generate<T: Real>(
    store: &ParamStore<T>,
    decoder: &DecoderConfig,
    visual: &Tensor<T>,
    prompt: &PromptSequence,
    max_len: usize,
    mode: DecodeMode,
) -> Result<Vec<u32>> {
    if prompt.slots.last() != Some(&super::PromptSlot::Token(BOS)) {
        return Err(Error::invalid("generation prompt must end with BOS"));
    }
    if let DecodeMode::Sample { temperature, .. } = mode {
        if !(temperature > 0.0) {
            return Err(Error::invalid("sampling temperature must be positive"));
        }
    }
    let mut sampler = match mode {
        DecodeMode::Sample { seed, .. } => Some(rng::fork(seed, "generate")),
        DecodeMode::Greedy => None,
    };
    let mut out: Vec<u32> = Vec::new();
    while out.len() < max_len && prompt.slots.len() + out.len() < decoder.context {
        let logits = all_logits(store, decoder, visual, &prompt.slots, &out);
        let last: Vec<f64> = logits.row(logits.rows() - 1).iter().map(|x| x.as_f64()).collect();
        let allowed = |i: usize| ![PAD, BOS, UNK, CHAR_SLOT].contains(&(i as u32));
        let next = match (&mut sampler, mode) {
            (Some(r), DecodeMode::Sample { temperature, .. }) => {
                let m = last
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| allowed(*i))
                    .map(|(_, &x)| x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = last
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| if allowed(i) { ((x - m) / temperature).exp() } else { 0.0 })
                    .collect();
                let mut u = r.gen::<f64>() * w.iter().sum::<f64>();
                let mut pick = w.len() - 1;
                for (i, &wi) in w.iter().enumerate() {
                    if u < wi {
                        pick = i;
                        break;
                    }
                    u -= wi;
                }
                pick as u32
            }
            _ => {
                let mut best = (EOS, f64::NEG_INFINITY);
                for (i, &x) in last.iter().enumerate() {
                    if allowed(i) && x > best.1 {
                        best = (i as u32, x);
                    }
                }
                best.0
            }
        };
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// One generated AD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub clip_id: u32,
    pub movie_id: u32,
    pub text: String,
    pub tokens: Vec<u32>,
}

/// Record indices of the window ending at each clip, truncated at the
/// start of its movie.
pub fn trailing_windows(corpus: &Corpus, size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(corpus.len());
    for movie in corpus.movies() {
        for i in movie.clone() {
            let start = (i + 1).saturating_sub(size).max(movie.start);
            out.push((start..=i).collect());
        }
    }
    out
}

/// Describes every clip of `corpus` from the window that ends at it.
pub fn describe_corpus(
    model: &Stage2Model,
    corpus: &Corpus,
    max_len: usize,
    mode: DecodeMode,
) -> Result<Vec<GenerationRecord>> {
    if corpus.channels() != model.contextual.channels {
        return Err(Error::shape(format!(
            "corpus has {} channels, model expects {}",
            corpus.channels(),
            model.contextual.channels
        )));
    }
    let windows = trailing_windows(corpus, model.window);
    windows
        .par_iter()
        .map(|w| {
            let frames = clip_frames::<f32>(corpus, w);
            let refs: Vec<&Tensor<f32>> = frames.iter().collect();
            let mut g = Graph::new();
            let feats = encode_window_graph(&mut g, &model.params, &refs, &model.contextual);
            let visual = g.value(feats.fused).clone();
            let names: Vec<Vec<u32>> = w
                .iter()
                .map(|&i| clip_names(&corpus.records()[i].ad_text, &model.names, &model.vocab))
                .collect();
            let prompt = assemble_prompt(model.contextual.latents, &names, None, model.decoder.context)?;
            let last = &corpus.records()[*w.last().expect("non-empty")];
            let clip_mode = match mode {
                DecodeMode::Sample { temperature, seed } => DecodeMode::Sample {
                    temperature,
                    seed: seed ^ u64::from(last.clip_id),
                },
                m => m,
            };
            let tokens = generate(&model.params, &model.decoder, &visual, &prompt, max_len, clip_mode)?;
            Ok(GenerationRecord {
                clip_id: last.clip_id,
                movie_id: last.movie_id,
                text: model.vocab.detokenize(&tokens),
                tokens,
            })
        })
        .collect()
}

pub fn generation_jsonl(records: &[GenerationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("plain record"));
        s.push('\n');
    }
    s
}

pub fn parse_generation_jsonl(text: &str) -> Result<Vec<GenerationRecord>> {
    let mut offset = 0u64;
    let mut out = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim();
        if !body.is_empty() {
            out.push(serde_json::from_str(body).map_err(|e| Error::Format {
                offset,
                detail: format!("generation line {}: {e}", i + 1),
            })?);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}
