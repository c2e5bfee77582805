use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use adnarrate_core::alignment::{adapt_train, encode_corpus_text, epoch_means, alignment_log_csv, VisionAdapter};
use adnarrate_core::checks::{gradient_suite, STEP, TOLERANCE};
use adnarrate_core::contextual_ema::{branch_vectors_csv, window_branches};
use adnarrate_core::dataio::{encode_container, gen_synthetic, read_container, Corpus, TextEncoder, Vocabulary};
use adnarrate_core::metrics::{evaluate, movie_contrast, redundancy_contrast};
use adnarrate_core::narration::{
    describe_corpus, generation_jsonl, parse_generation_jsonl, stage2_log_csv, train_stage2, Stage2Model,
};
use adnarrate_core::numerics::{decode_checkpoint, encode_checkpoint};
use adnarrate_core::{Error, ParamStore, Tensor};

use crate::config::{ConfigError, RunConfig};
use crate::manifest::{RunDir, SNAPSHOT_FILE};

pub const CORPUS_FILE: &str = "corpus.dadf";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const NAMES_FILE: &str = "names.txt";
pub const ADAPTER_FILE: &str = "adapter.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";

/// The suite found a gradient mismatch. Exit code 3.
#[derive(Debug, thiserror::Error)]
#[error("{0} gradient check(s) failed")]
pub struct GradcheckFailed(pub usize);

fn required(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    cfg.path(key)
        .ok_or_else(|| ConfigError(format!("`{key}` is required (flag --{key})")).into())
}

fn load_corpus(cfg: &RunConfig) -> Result<(PathBuf, Corpus)> {
    let path = required(cfg, "data")?;
    let corpus = read_container(&path)?;
    log::info!("{}: {} clips, C={}", path.display(), corpus.len(), corpus.channels());
    Ok((path, corpus))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e).into())
}

fn names_text(names: &BTreeSet<String>) -> String {
    names.iter().map(|n| format!("{n}\n")).collect()
}

fn parse_names(text: &str) -> BTreeSet<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_lowercase).collect()
}

/// The `names` key, else `names.txt` beside the corpus, else an empty bank.
fn character_bank(cfg: &RunConfig, data: &Path) -> Result<BTreeSet<String>> {
    let path = match cfg.path("names") {
        Some(p) => p,
        None => match data.parent().map(|d| d.join(NAMES_FILE)) {
            Some(p) if p.exists() => p,
            _ => return Ok(BTreeSet::new()),
        },
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(parse_names(&text))
}

pub fn gen_synthetic_cmd(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let spec = cfg.synthetic();
    spec.validate().map_err(|e| match e {
        Error::InvalidArgument(m) => ConfigError(format!("synthetic.{m}")),
        other => ConfigError(other.to_string()),
    })?;
    let corpus = gen_synthetic(&spec)?;
    run.write(CORPUS_FILE, &encode_container(&corpus))?;
    run.write(VOCAB_FILE, corpus.vocabulary().to_sidecar().as_bytes())?;
    let names: BTreeSet<String> = spec.character_names().into_iter().collect();
    run.write(NAMES_FILE, names_text(&names).as_bytes())?;
    println!(
        "wrote {} clips in {} movies to {}",
        corpus.len(),
        corpus.movies().len(),
        run.path(CORPUS_FILE).display()
    );
    Ok(())
}

pub fn adapt_cmd(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let (_, corpus) = load_corpus(cfg)?;
    let config = cfg.alignment();
    let text = encode_corpus_text(&corpus, &TextEncoder::new(corpus.channels(), cfg.u64("text_seed")))?;
    let out = adapt_train(&corpus, &text, &config)?;
    run.write(ADAPTER_FILE, &encode_checkpoint(&out.adapter))?;
    run.write("adapt_loss.csv", alignment_log_csv(&out.log).as_bytes())?;
    let means = epoch_means(&out.log);
    match (means.first(), means.last()) {
        (Some(a), Some(b)) => println!("L_I epoch mean {a:.4} -> {b:.4} over {} epochs", means.len()),
        _ => println!("0 epochs: wrote the initial adapter"),
    }
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let (data, corpus) = load_corpus(cfg)?;
    let adapter = match cfg.path("adapter") {
        Some(p) => decode_checkpoint::<f32>(&read_bytes(&p)?).with_context(|| format!("loading {}", p.display()))?,
        None => VisionAdapter::init(corpus.channels()),
    };
    let names = character_bank(cfg, &data)?;
    let config = cfg.stage2(corpus.channels());
    config.validate().map_err(|e| ConfigError(e.to_string()))?;
    let out = train_stage2(&corpus, adapter, names, &config)?;
    if out.skipped_movies > 0 {
        log::warn!("{} movies have fewer than {} clips and were skipped", out.skipped_movies, config.window);
    }
    run.write(MODEL_FILE, &encode_checkpoint(&out.model.params))?;
    run.write(VOCAB_FILE, out.model.vocab.to_sidecar().as_bytes())?;
    run.write(NAMES_FILE, names_text(&out.model.names).as_bytes())?;
    run.write("train_loss.csv", stage2_log_csv(&out.log).as_bytes())?;
    match out.log.last() {
        Some(r) => println!("trained {} steps; last L_II {:.4}", out.log.len(), r.l_ii),
        None => println!("0 steps: wrote the initial model"),
    }
    Ok(())
}

/// Rebuilds a model from a `train` output directory.
pub fn load_model(dir: &Path, channels: usize) -> Result<Stage2Model> {
    let mut saved = RunConfig::default();
    saved.apply_file(&dir.join(SNAPSHOT_FILE))?;
    let config = saved.stage2(channels);
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let names_path = dir.join(NAMES_FILE);
    let names = parse_names(&std::fs::read_to_string(&names_path).map_err(|e| Error::io(&names_path, e))?);
    let params: ParamStore<f32> = decode_checkpoint(&read_bytes(&dir.join(MODEL_FILE))?)?;
    let mut model = Stage2Model::init(VisionAdapter::init(channels), vocab, names, &config)?;
    for (name, value) in model.params.iter() {
        match params.get(name) {
            Some(p) if p.shape() == value.shape() => {}
            _ => return Err(Error::shape(format!("checkpoint lacks a matching `{name}`")).into()),
        }
    }
    if params.len() != model.params.len() {
        return Err(Error::shape("checkpoint holds parameters the model does not use").into());
    }
    model.params = params;
    Ok(model)
}

pub fn eval_cmd(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let (_, corpus) = load_corpus(cfg)?;
    let eval_config = cfg.eval()?;
    let generations = match (cfg.path("generations"), cfg.path("model")) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            parse_generation_jsonl(&text)?
        }
        (None, Some(dir)) => {
            let model = load_model(&dir, corpus.channels())?;
            let g = describe_corpus(&model, &corpus, cfg.usize("generate.max_len"), cfg.decode_mode())?;
            run.write("generations.jsonl", generation_jsonl(&g).as_bytes())?;
            g
        }
        (None, None) => return Err(ConfigError("eval needs --generations or --model".into()).into()),
    };
    let e = evaluate(&corpus, &generations, &eval_config)?;
    run.write("metrics.json", (e.to_json() + "\n").as_bytes())?;
    run.write("per_clip.csv", e.per_clip_csv().as_bytes())?;
    println!("{}", e.to_json());
    Ok(())
}

#[derive(Serialize)]
struct MovieRedundancy {
    movie_id: u32,
    clips: usize,
    contrast: Option<f64>,
}

#[derive(Serialize)]
struct RedundancyReport {
    window: usize,
    redundancy_contrast: Option<f64>,
    movies: Vec<MovieRedundancy>,
}

pub fn analyze_cmd(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let (data, corpus) = load_corpus(cfg)?;
    let w = cfg.usize("eval.redundancy_window");
    let pooled = corpus.pooled_features();
    let movies = corpus.movies();
    let report = RedundancyReport {
        window: w,
        redundancy_contrast: redundancy_contrast(&pooled, w).ok(),
        movies: movies
            .iter()
            .zip(&pooled)
            .map(|(r, f)| MovieRedundancy {
                movie_id: corpus.records()[r.start].movie_id,
                clips: r.len(),
                contrast: movie_contrast(f, w),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&report)?;
    run.write("redundancy.json", (json.clone() + "\n").as_bytes())?;

    let model = match cfg.path("model") {
        Some(dir) => load_model(&dir, corpus.channels())?,
        None => {
            let config = cfg.stage2(corpus.channels());
            config.validate().map_err(|e| ConfigError(e.to_string()))?;
            let names = character_bank(cfg, &data)?;
            Stage2Model::init(VisionAdapter::init(corpus.channels()), corpus.vocabulary(), names, &config)?
        }
    };
    let first = movies.first().ok_or_else(|| Error::invalid("empty corpus"))?;
    let end = first.start + first.len().min(model.window);
    let frames: Vec<&Tensor<f32>> = corpus.records()[first.start..end].iter().map(|r| &r.frames).collect();
    let (h, h_hat, h_tilde) = window_branches(&model.params, &frames, &model.contextual)?;
    let csv = branch_vectors_csv(&[("H", &h), ("H_hat", &h_hat), ("H_tilde", &h_tilde)])?;
    run.write("branches.csv", csv.as_bytes())?;
    println!("{json}");
    Ok(())
}

pub fn gradcheck_cmd(cfg: &RunConfig, run: &mut RunDir, instances: usize) -> Result<()> {
    let entries = gradient_suite(instances, cfg.u64("seed"))?;
    let mut listing = format!("gradient check: h={STEP:e}, tolerance={TOLERANCE:e}, f64\n");
    for e in &entries {
        writeln!(listing, "{} instance {}:\n{}", e.objective, e.instance, e.report).unwrap();
    }
    let failed = entries.iter().filter(|e| !e.report.pass).count();
    writeln!(listing, "{} of {} checks passed", entries.len() - failed, entries.len()).unwrap();
    run.write("gradcheck.txt", listing.as_bytes())?;
    print!("{listing}");
    if failed > 0 {
        return Err(GradcheckFailed(failed).into());
    }
    Ok(())
}
