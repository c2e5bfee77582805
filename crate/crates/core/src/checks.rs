//! Finite-difference gradient suite over every differentiable objective.

use std::collections::BTreeSet;

use crate::alignment::{sample_anchor_frames, stage1_graph, AdEmbedding, AlignmentBatch, AlignmentConfig, VisionAdapter};
use crate::contextual_ema::{encode_window_graph, ContextualConfig};
use crate::dataio::{gen_synthetic, SyntheticSpec};
use crate::error::Result;
use crate::narration::{prepare_window, window_loss_graph, DecoderConfig, Stage2Config, Stage2Model};
use crate::numerics::{grad_check, rng, GradReport, Graph, ParamStore, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Objectives covered by [`gradient_suite`], in report order.
pub const OBJECTIVES: [&str; 7] = ["L_g", "L_f", "L_I", "resample-EM-fuse", "L_auto", "L_dist", "L_II"];

/// One checked objective on one random instance.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub objective: &'static str,
    pub instance: usize,
    pub report: GradReport,
}

fn jitter(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut r = rng::fork(seed, "jitter");
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        let noise: Tensor<f64> = rng::normal(&mut r, t.shape(), std);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, e)| *x += e);
    }
}

fn stage1_instance(seed: u64) -> (ParamStore<f64>, AlignmentBatch<f64>, Vec<Vec<usize>>) {
    let mut r = rng::seeded(seed);
    let c = 4;
    let clips: Vec<Tensor<f64>> = (0..3).map(|i| rng::normal(&mut r, &[2 + i % 2, c], 1.0)).collect();
    let ads = (0..3)
        .map(|i| AdEmbedding {
            cls: rng::normal(&mut r, &[c], 1.0),
            words: rng::normal(&mut r, &[1 + i % 3, c], 1.0),
        })
        .collect();
    let batch = AlignmentBatch::new(clips, ads).expect("consistent batch");
    let mut store = VisionAdapter::init::<f64>(c);
    jitter(&mut store, seed, 0.3);
    let frames: Vec<usize> = batch.clips.iter().map(Tensor::rows).collect();
    let anchors = sample_anchor_frames(&frames, 1, &mut rng::fork(seed, "anchors"));
    (store, batch, anchors)
}

fn tiny_window(seed: u64) -> Result<(Stage2Model, Vec<Tensor<f64>>, crate::narration::WindowExample)> {
    let spec = SyntheticSpec {
        num_movies: 1,
        clips_per_movie: 6,
        scene_length: 3,
        channels: 6,
        frames_per_clip: 3,
        seed,
        ..SyntheticSpec::default()
    };
    let corpus = gen_synthetic(&spec)?;
    let names: BTreeSet<String> = spec.character_names().into_iter().collect();
    let config = Stage2Config {
        contextual: ContextualConfig {
            channels: 6,
            frames_per_clip: 2,
            latents: 2,
            ff_hidden: 6,
            bases: 3,
            decoder_width: 8,
            ..ContextualConfig::default()
        },
        decoder: DecoderConfig {
            vocab_size: 0,
            width: 8,
            layers: 1,
            heads: 2,
            ff_hidden: 8,
            context: 32,
        },
        window: 3,
        seed,
        ..Stage2Config::default()
    };
    let model = Stage2Model::init(VisionAdapter::init(6), corpus.vocabulary(), names.clone(), &config)?;
    let ex = prepare_window(&corpus, &model.vocab, &names, &BTreeSet::new(), &[2, 3, 4]);
    let frames = ex.records.iter().map(|&i| corpus.records()[i].frames.cast()).collect();
    Ok((model, frames, ex))
}

fn check(loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>, store: &ParamStore<f64>) -> GradReport {
    grad_check(loss, store, STEP, TOLERANCE)
}

/// Runs every objective of [`OBJECTIVES`] on `instances` seeded random
/// instances in 64-bit arithmetic.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for i in 0..instances {
        let s = seed.wrapping_add(i as u64);
        let (store, batch, anchors) = stage1_instance(s);
        let cfg = AlignmentConfig {
            gamma: 0.4,
            logit_scale: 2.0,
            ..AlignmentConfig::default()
        };
        let pick = |which: usize| {
            let (batch, anchors, cfg) = (&batch, &anchors, &cfg);
            move |g: &mut Graph<f64>, st: &ParamStore<f64>| {
                let t = stage1_graph(g, st, batch, cfg, anchors);
                Ok([t.global, t.fine, t.total][which])
            }
        };
        for (k, name) in OBJECTIVES[..3].iter().enumerate() {
            out.push(SuiteEntry {
                objective: name,
                instance: i,
                report: check(pick(k), &store),
            });
        }

        let (model, frames, ex) = tiny_window(s)?;
        let mut store: ParamStore<f64> = model.params.cast();
        jitter(&mut store, s, 0.05);
        let ctx = store_subset(&store, |n| !crate::narration::is_decoder_param(n));
        let probe: Tensor<f64> = rng::normal(
            &mut rng::fork(s, "probe"),
            &[frames.len() * model.contextual.latents, model.contextual.decoder_width],
            1.0,
        );
        let path = |g: &mut Graph<f64>, st: &ParamStore<f64>| {
            let refs: Vec<&Tensor<f64>> = frames.iter().collect();
            let f = encode_window_graph(g, st, &refs, &model.contextual);
            let p = g.constant(probe.clone());
            let m = g.mul(f.fused, p);
            Ok(g.sum(m))
        };
        out.push(SuiteEntry {
            objective: OBJECTIVES[3],
            instance: i,
            report: check(path, &ctx),
        });

        for (k, name) in OBJECTIVES[4..].iter().enumerate() {
            let term = |g: &mut Graph<f64>, st: &ParamStore<f64>| {
                let (t, _) = window_loss_graph(g, st, &model.contextual, &model.decoder, &frames, &ex, 1.0)?;
                Ok([t.auto, t.dist, t.total][k])
            };
            out.push(SuiteEntry {
                objective: name,
                instance: i,
                report: check(term, &store),
            });
        }
    }
    Ok(out)
}

fn store_subset(store: &ParamStore<f64>, keep: impl Fn(&str) -> bool) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in store.iter().filter(|(n, _)| keep(n)) {
        s.insert(n, t.clone()).expect("unique names");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_objective() {
        let entries = gradient_suite(1, 11).unwrap();
        let names: Vec<&str> = entries.iter().map(|e| e.objective).collect();
        assert_eq!(names, OBJECTIVES);
        for e in &entries {
            assert!(e.report.pass, "{} {}", e.objective, e.report);
            assert!(!e.report.max_rel_error.is_empty());
        }
    }
}
