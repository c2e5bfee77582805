//! Prompt assembly, the causal decoder, auto-regressive and distinctive
//! losses, and the Stage-II training and generation loops.

mod decoder;
mod prompt;
mod train;

pub use decoder::{
    all_logits, auto_loss, decoder_hidden, distinctive_loss, embed_inputs, is_decoder_param,
    output_logits, stage2_loss, stage2_terms, target_logits, DecoderConfig, Stage2Loss,
    Stage2Terms, OUTPUT_BIAS, POSITION_EMBEDDING, TOKEN_EMBEDDING,
};
pub use prompt::{
    assemble_prompt, build_distinctive_set, clip_names, DistinctiveSet, PromptSequence,
    PromptSlot,
};
pub use train::{
    describe_corpus, generate, generation_jsonl, parse_generation_jsonl, prepare_window,
    stage2_log_csv, trailing_windows, train_stage2, window_loss_graph, DecodeMode,
    GenerationRecord, Stage2Config, Stage2LogRow, Stage2Model, Stage2Outcome, WindowExample,
};

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::contextual_ema::ContextualConfig;
    use crate::dataio::{gen_synthetic, SyntheticSpec, EOS};
    use crate::numerics::{grad_check, rng, ParamStore, Tensor};

    fn tiny_decoder(vocab: usize) -> DecoderConfig {
        DecoderConfig {
            vocab_size: vocab,
            width: 8,
            layers: 1,
            heads: 2,
            ff_hidden: 8,
            context: 32,
        }
    }

    fn uniform(cfg: &DecoderConfig) -> ParamStore<f64> {
        let mut s = cfg.init_params::<f64>(3);
        *s.get_mut(TOKEN_EMBEDDING).unwrap() = Tensor::zeros(&[cfg.vocab_size, cfg.width]);
        s
    }

    fn visual(rows: usize, width: usize, seed: u64) -> Tensor<f64> {
        rng::normal(&mut rng::seeded(seed), &[rows, width], 1.0)
    }

    #[test]
    fn uniform_predictor_losses() {
        let cfg = tiny_decoder(10);
        let s = uniform(&cfg);
        let v = visual(2, 8, 1);
        // jack=5, opens=6, door=7; the target with EOS has three positions
        let p = assemble_prompt(2, &[vec![]], Some(&[5, 6]), 32).unwrap();
        let auto = auto_loss(&s, &cfg, &v, &p).unwrap();
        assert!((auto - 3.0 * 10f64.ln()).abs() < 1e-6, "{auto}");

        let p = assemble_prompt(2, &[vec![]], Some(&[5, 6, 7]), 32).unwrap();
        let wd: DistinctiveSet = [6, 7].into_iter().collect();
        let dist = distinctive_loss(&s, &cfg, &v, &p, &wd).unwrap();
        assert!((dist - 2.0 * 10f64.ln()).abs() < 1e-6);
        assert_eq!(distinctive_loss(&s, &cfg, &v, &p, &DistinctiveSet::default()).unwrap(), 0.0);

        let both = stage2_loss(&s, &cfg, &v, &p, &wd).unwrap();
        assert!((both.total - (both.auto + both.dist)).abs() < 1e-12);
        let none = stage2_loss(&s, &cfg, &v, &p, &DistinctiveSet::default()).unwrap();
        assert_eq!(none.total, none.auto);
    }

    #[test]
    fn certain_predictor_has_zero_loss() {
        let cfg = tiny_decoder(10);
        let mut s = uniform(&cfg);
        s.get_mut(OUTPUT_BIAS).unwrap().data_mut()[EOS as usize] = 1e3;
        let p = assemble_prompt(1, &[vec![]], Some(&[]), 32).unwrap();
        assert!(auto_loss(&s, &cfg, &visual(1, 8, 0), &p).unwrap() < 1e-12);
    }

    fn per_position_ce(s: &ParamStore<f64>, cfg: &DecoderConfig, v: &Tensor<f64>, p: &PromptSequence) -> Vec<f64> {
        let fed = &p.target[..p.target.len() - 1];
        let logits = all_logits(s, cfg, v, &p.slots, fed);
        p.target_positions()
            .zip(&p.target)
            .map(|(row, &t)| {
                let r = logits.row(row);
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                lse - r[t as usize]
            })
            .collect()
    }

    #[test]
    fn losses_decompose_over_positions() {
        let cfg = tiny_decoder(12);
        let s = cfg.init_params::<f64>(9);
        let v = visual(4, 8, 2);
        let target = [5, 9, 6, 11];
        let p = assemble_prompt(2, &[vec![7], vec![8]], Some(&target), 32).unwrap();
        let ce = per_position_ce(&s, &cfg, &v, &p);
        let auto = auto_loss(&s, &cfg, &v, &p).unwrap();
        assert!((auto - ce.iter().sum::<f64>()).abs() < 1e-6);

        let all: DistinctiveSet = target.iter().copied().collect();
        let dist = distinctive_loss(&s, &cfg, &v, &p, &all).unwrap();
        assert!((dist - (auto - ce[ce.len() - 1])).abs() < 1e-9);
        assert!(dist <= auto);
    }

    #[test]
    fn changing_a_target_token_leaves_earlier_logits_untouched() {
        let cfg = tiny_decoder(12);
        let s = cfg.init_params::<f64>(4);
        let v = visual(2, 8, 5);
        let p = assemble_prompt(2, &[vec![]], None, 32).unwrap();
        let a = all_logits(&s, &cfg, &v, &p.slots, &[5, 6, 7, 8]);
        for n in 0..4 {
            let mut changed = vec![5, 6, 7, 8];
            changed[n] = 11;
            let b = all_logits(&s, &cfg, &v, &p.slots, &changed);
            let first_affected = p.slots.len() + n;
            for row in 0..first_affected {
                assert_eq!(a.row(row), b.row(row), "row {row} after change at {n}");
            }
            assert_ne!(a.row(first_affected), b.row(first_affected));
        }
    }

    #[test]
    fn generation_contracts() {
        let cfg = tiny_decoder(12);
        let mut s = cfg.init_params::<f64>(6);
        let v = visual(2, 8, 7);
        let p = assemble_prompt(2, &[vec![]], None, 32).unwrap();
        let a = generate(&s, &cfg, &v, &p, 6, DecodeMode::Greedy).unwrap();
        assert_eq!(a, generate(&s, &cfg, &v, &p, 6, DecodeMode::Greedy).unwrap());
        assert!(generate(&s, &cfg, &v, &p, 1, DecodeMode::Greedy).unwrap().len() <= 1);
        let mode = DecodeMode::Sample { temperature: 1.0, seed: 3 };
        let x = generate(&s, &cfg, &v, &p, 6, mode).unwrap();
        assert_eq!(x, generate(&s, &cfg, &v, &p, 6, mode).unwrap());
        assert!(x.iter().chain(&a).all(|&t| t > 4));

        s.get_mut(OUTPUT_BIAS).unwrap().data_mut()[EOS as usize] = 1e4;
        assert!(generate(&s, &cfg, &v, &p, 6, DecodeMode::Greedy).unwrap().is_empty());

        let unterminated = PromptSequence { slots: vec![PromptSlot::Visual(0)], target: vec![] };
        assert!(generate(&s, &cfg, &v, &unterminated, 3, DecodeMode::Greedy).is_err());
    }

    fn tiny_stage2() -> (crate::dataio::Corpus, Stage2Config, BTreeSet<String>) {
        let spec = SyntheticSpec {
            num_movies: 2,
            clips_per_movie: 8,
            scene_length: 4,
            channels: 6,
            frames_per_clip: 3,
            ..SyntheticSpec::default()
        };
        let corpus = gen_synthetic(&spec).unwrap();
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
            decoder: tiny_decoder(0),
            window: 3,
            epochs: 1,
            batch_size: 4,
            ..Stage2Config::default()
        };
        (corpus, config, spec.character_names().into_iter().collect())
    }

    #[test]
    fn window_loss_gradients_match_finite_differences() {
        let (corpus, config, names) = tiny_stage2();
        let model = Stage2Model::init(
            crate::alignment::VisionAdapter::init(6),
            corpus.vocabulary(),
            names.clone(),
            &config,
        )
        .unwrap();
        let store: ParamStore<f64> = model.params.cast();
        let ex = prepare_window(&corpus, &model.vocab, &names, &BTreeSet::new(), &[3, 4, 5]);
        assert!(!ex.distinctive.is_empty());
        let frames: Vec<Tensor<f64>> = ex.records.iter().map(|&i| corpus.records()[i].frames.cast()).collect();
        let report = grad_check(
            |g, s| {
                let (t, _) = window_loss_graph(g, s, &model.contextual, &model.decoder, &frames, &ex, 1.0)?;
                Ok(t.total)
            },
            &store,
            1e-5,
            1e-4,
        );
        assert!(report.pass, "{report}");
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged_and_training_descends() {
        let (corpus, config, names) = tiny_stage2();
        let adapter = crate::alignment::VisionAdapter::init(6);
        let zero = Stage2Config { epochs: 0, ..config.clone() };
        let out = train_stage2(&corpus, adapter.clone(), names.clone(), &zero).unwrap();
        let fresh = Stage2Model::init(adapter.clone(), corpus.vocabulary(), names.clone(), &zero).unwrap();
        assert_eq!(out.model.params, fresh.params);
        assert!(out.log.is_empty());

        let long = Stage2Config { epochs: 30, learning_rate: 1e-2, ..config };
        let out = train_stage2(&corpus, adapter.clone(), names.clone(), &long).unwrap();
        let first = out.log.iter().filter(|r| r.epoch == 0).map(|r| r.l_ii).sum::<f64>();
        let last = out.log.iter().filter(|r| r.epoch == 29).map(|r| r.l_ii).sum::<f64>();
        assert!(last < first, "{first} -> {last}");
        assert_eq!(out.model.params.get("adapter.weight"), adapter.get("adapter.weight"));
        let again = train_stage2(&corpus, adapter, names, &long).unwrap();
        assert_eq!(stage2_log_csv(&out.log), stage2_log_csv(&again.log));
        assert!(stage2_log_csv(&out.log).starts_with("epoch,step,L_auto,L_dist,L_II\n"));

        let gens = describe_corpus(&out.model, &corpus, 6, DecodeMode::Greedy).unwrap();
        assert_eq!(gens.len(), corpus.len());
        let text = generation_jsonl(&gens);
        assert_eq!(parse_generation_jsonl(&text).unwrap(), gens);
        let broken = format!("{}\n{{oops\n", text.lines().next().unwrap());
        match parse_generation_jsonl(&broken) {
            Err(crate::Error::Format { offset, .. }) => assert_eq!(offset as usize, text.lines().next().unwrap().len() + 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trailing_windows_stop_at_movie_start() {
        let (corpus, _, _) = tiny_stage2();
        let w = trailing_windows(&corpus, 3);
        assert_eq!(w[0], vec![0]);
        assert_eq!(w[2], vec![0, 1, 2]);
        assert_eq!(w[8], vec![8]);
        assert_eq!(w[9], vec![8, 9]);
    }
}
