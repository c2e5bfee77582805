//! Flat `key = value` run configuration: defaults, then file, then flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adnarrate_core::alignment::AlignmentConfig;
use adnarrate_core::contextual_ema::ContextualConfig;
use adnarrate_core::dataio::SyntheticSpec;
use adnarrate_core::metrics::{CiderConfig, EvalConfig, SimilarityKind};
use adnarrate_core::narration::{DecodeMode, DecoderConfig, Stage2Config};

/// Bad key, bad value or an inconsistent combination. Exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn fail<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Int { min: u64 },
    Real { min: f64, open: bool, max: f64 },
    Bool,
    Choice(&'static [&'static str]),
    Text,
}

const fn int(min: u64) -> Kind {
    Kind::Int { min }
}

const fn positive() -> Kind {
    Kind::Real { min: 0.0, open: true, max: f64::INFINITY }
}

const fn non_negative() -> Kind {
    Kind::Real { min: 0.0, open: false, max: f64::INFINITY }
}

const KEYS: &[(&str, &str, Kind)] = &[
    ("seed", "0", int(0)),
    ("threads", "1", int(1)),
    ("data", "", Kind::Text),
    ("adapter", "", Kind::Text),
    ("model", "", Kind::Text),
    ("generations", "", Kind::Text),
    ("names", "", Kind::Text),
    ("text_seed", "2119655149", int(0)),
    ("synthetic.num_movies", "4", int(1)),
    ("synthetic.clips_per_movie", "56", int(1)),
    ("synthetic.scene_length", "8", int(2)),
    ("synthetic.channels", "32", int(1)),
    ("synthetic.frames", "8", int(1)),
    ("synthetic.name_pool", "12", int(1)),
    ("synthetic.verb_pool", "16", int(1)),
    ("synthetic.noun_pool", "32", int(1)),
    ("synthetic.noise", "0.1", non_negative()),
    ("synthetic.distinct_weight", "0.6", non_negative()),
    ("adapt.gamma", "0.5", Kind::Real { min: 0.0, open: false, max: 1.0 }),
    ("adapt.tau_f", "0.1", positive()),
    ("adapt.frames_sampled", "1", int(1)),
    ("adapt.logit_scale", "14.285714285714285", positive()),
    ("adapt.lr", "0.001", positive()),
    ("adapt.epochs", "5", int(0)),
    ("adapt.batch_size", "16", int(1)),
    ("ema.frames", "8", int(1)),
    ("ema.latents", "4", int(1)),
    ("ema.ff_hidden", "64", int(1)),
    ("ema.bases", "32", int(1)),
    ("ema.iterations", "3", int(1)),
    ("ema.tau_e", "0.05", positive()),
    ("ema.alpha", "3", non_negative()),
    ("ema.beta", "1", non_negative()),
    ("decoder.width", "64", int(1)),
    ("decoder.layers", "2", int(1)),
    ("decoder.heads", "2", int(1)),
    ("decoder.ff_hidden", "128", int(1)),
    ("decoder.context", "256", int(1)),
    ("train.window", "16", int(1)),
    ("train.stride", "1", int(1)),
    ("train.consecutive", "true", Kind::Bool),
    ("train.distinctive", "true", Kind::Bool),
    ("train.lr", "0.003", positive()),
    ("train.epochs", "10", int(0)),
    ("train.batch_size", "8", int(1)),
    ("train.adapter", "false", Kind::Bool),
    ("train.visual", "true", Kind::Bool),
    ("train.decoder", "true", Kind::Bool),
    ("train.stopwords", "", Kind::Text),
    ("generate.max_len", "16", int(1)),
    ("generate.mode", "greedy", Kind::Choice(&["greedy", "sample"])),
    ("generate.temperature", "1", positive()),
    ("eval.recall", "1/16,5/16", Kind::Text),
    ("eval.similarity", "tfidf-cosine", Kind::Choice(&["lcs-f1", "tfidf-cosine", "char-ngram-cosine"])),
    ("eval.rouge_beta", "1.2", positive()),
    ("eval.cider_max_n", "4", int(1)),
    ("eval.cider_sigma", "6", positive()),
    ("eval.redundancy_window", "3", int(1)),
    ("eval.context_window", "16", int(1)),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
        }
    }
}

fn lookup(key: &str) -> Result<(&'static str, Kind), ConfigError> {
    KEYS.iter()
        .find(|(k, _, _)| *k == key)
        .map(|(k, _, kind)| (*k, *kind))
        .map_or_else(|| fail(format!("unknown key `{key}`")), Ok)
}

fn check(key: &str, kind: Kind, value: &str) -> Result<(), ConfigError> {
    match kind {
        Kind::Int { min } => match value.parse::<u64>() {
            Ok(v) if v >= min => Ok(()),
            Ok(v) => fail(format!("{key}: must be >= {min}, got {v}")),
            Err(_) => fail(format!("{key}: expected a non-negative integer, got `{value}`")),
        },
        Kind::Real { min, open, max } => match value.parse::<f64>() {
            Ok(v) if !v.is_finite() => fail(format!("{key}: must be finite, got {v}")),
            Ok(v) if (open && v <= min) || v < min => {
                fail(format!("{key}: must be {} {min}, got {v}", if open { ">" } else { ">=" }))
            }
            Ok(v) if v > max => fail(format!("{key}: must be <= {max}, got {v}")),
            Ok(_) => Ok(()),
            Err(_) => fail(format!("{key}: expected a number, got `{value}`")),
        },
        Kind::Bool => match value {
            "true" | "false" => Ok(()),
            _ => fail(format!("{key}: expected true or false, got `{value}`")),
        },
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                fail(format!("{key}: expected one of {}, got `{value}`", options.join(", ")))
            }
        }
        Kind::Text => Ok(()),
    }
}

/// Splits `key = value`; `#` starts a comment line.
fn parse_line(line: &str) -> Option<Result<(&str, &str), ConfigError>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) => Ok((k.trim(), v.trim())),
        None => fail(format!("expected `key = value`, got `{line}`")),
    })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (key, kind) = lookup(key)?;
        check(key, kind, value)?;
        self.values.insert(key, value.to_string());
        Ok(())
    }

    /// `key=value` as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        match pair.split_once('=') {
            Some((k, v)) => self.set(k.trim(), v.trim()),
            None => fail(format!("expected key=value, got `{pair}`")),
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let Some(kv) = parse_line(line) else { continue };
            let (k, v) = kv.map_err(|e| ConfigError(format!("line {}: {}", i + 1, e.0)))?;
            if !seen.insert(k.to_string()) {
                return fail(format!("line {}: duplicate key `{k}`", i + 1));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Every key in name order, one `key = value` per line.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn entries(&self) -> &BTreeMap<&'static str, String> {
        &self.values
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("unregistered key `{key}`"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("checked on set")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("checked on set")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("checked on set")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    /// A path key, `None` when unset.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_movies: self.usize("synthetic.num_movies"),
            clips_per_movie: self.usize("synthetic.clips_per_movie"),
            scene_length: self.usize("synthetic.scene_length"),
            channels: self.usize("synthetic.channels"),
            frames_per_clip: self.usize("synthetic.frames"),
            name_pool: self.usize("synthetic.name_pool"),
            verb_pool: self.usize("synthetic.verb_pool"),
            noun_pool: self.usize("synthetic.noun_pool"),
            noise: self.f64("synthetic.noise"),
            distinct_weight: self.f64("synthetic.distinct_weight"),
            text_seed: self.u64("text_seed"),
            seed: self.u64("seed"),
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            gamma: self.f64("adapt.gamma"),
            tau_f: self.f64("adapt.tau_f"),
            frames_sampled: self.usize("adapt.frames_sampled"),
            logit_scale: self.f64("adapt.logit_scale"),
            learning_rate: self.f64("adapt.lr"),
            epochs: self.usize("adapt.epochs"),
            batch_size: self.usize("adapt.batch_size"),
            seed: self.u64("seed"),
        }
    }

    /// Stage-II settings for a corpus with `channels` feature channels.
    pub fn stage2(&self, channels: usize) -> Stage2Config {
        let width = self.usize("decoder.width");
        Stage2Config {
            contextual: ContextualConfig {
                channels,
                frames_per_clip: self.usize("ema.frames"),
                latents: self.usize("ema.latents"),
                ff_hidden: self.usize("ema.ff_hidden"),
                bases: self.usize("ema.bases"),
                iterations: self.usize("ema.iterations"),
                tau_e: self.f64("ema.tau_e"),
                alpha: self.f64("ema.alpha"),
                beta: self.f64("ema.beta"),
                decoder_width: width,
            },
            decoder: DecoderConfig {
                vocab_size: 0,
                width,
                layers: self.usize("decoder.layers"),
                heads: self.usize("decoder.heads"),
                ff_hidden: self.usize("decoder.ff_hidden"),
                context: self.usize("decoder.context"),
            },
            window: self.usize("train.window"),
            consecutive: self.bool("train.consecutive"),
            stride: self.usize("train.stride"),
            distinctive: self.bool("train.distinctive"),
            learning_rate: self.f64("train.lr"),
            epochs: self.usize("train.epochs"),
            batch_size: self.usize("train.batch_size"),
            seed: self.u64("seed"),
            train_adapter: self.bool("train.adapter"),
            train_visual: self.bool("train.visual"),
            train_decoder: self.bool("train.decoder"),
            stopwords: self
                .get("train.stopwords")
                .split(',')
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .map(String::from)
                .collect(),
        }
    }

    pub fn decode_mode(&self) -> DecodeMode {
        match self.get("generate.mode") {
            "sample" => DecodeMode::Sample {
                temperature: self.f64("generate.temperature"),
                seed: self.u64("seed"),
            },
            _ => DecodeMode::Greedy,
        }
    }

    pub fn eval(&self) -> Result<EvalConfig, ConfigError> {
        let mut recall = Vec::new();
        for item in self.get("eval.recall").split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let parsed = item
                .split_once('/')
                .and_then(|(k, n)| Some((k.trim().parse::<usize>().ok()?, n.trim().parse::<usize>().ok()?)));
            match parsed {
                Some((k, n)) if k >= 1 && k <= n => recall.push((k, n)),
                _ => return fail(format!("eval.recall: expected k/N pairs with 1 <= k <= N, got `{item}`")),
            }
        }
        Ok(EvalConfig {
            recall,
            similarity: self.get("eval.similarity").parse::<SimilarityKind>().expect("checked choice"),
            rouge_beta: self.f64("eval.rouge_beta"),
            cider: CiderConfig {
                max_n: self.usize("eval.cider_max_n"),
                sigma: self.f64("eval.cider_sigma"),
            },
            redundancy_window: self.usize("eval.redundancy_window"),
            context_window: self.usize("eval.context_window"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use adnarrate_core::dataio::DEFAULT_TEXT_SEED;

    #[test]
    fn defaults_mirror_library_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.synthetic(), SyntheticSpec::default());
        assert_eq!(c.u64("text_seed"), DEFAULT_TEXT_SEED);
        assert_eq!(c.alignment(), AlignmentConfig::default());
        let mut s2 = Stage2Config::default();
        s2.contextual.channels = 32;
        assert_eq!(c.stage2(32), s2);
        assert_eq!(c.eval().unwrap(), EvalConfig::default());
        assert_eq!(c.decode_mode(), DecodeMode::Greedy);
    }

    #[test]
    fn precedence_and_rejections() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nadapt.gamma = 0.25\n\nseed=9\n").unwrap();
        c.set_pair("seed=11").unwrap();
        assert_eq!(c.f64("adapt.gamma"), 0.25);
        assert_eq!(c.u64("seed"), 11);

        let e = c.set("synthetic.noise", "-1").unwrap_err();
        assert!(e.0.contains("synthetic.noise"), "{e}");
        assert!(c.set("nonsense", "1").unwrap_err().0.contains("unknown key"));
        assert!(c.set("adapt.gamma", "1.5").is_err());
        assert!(c.set("ema.tau_e", "0").is_err());
        assert!(c.set("train.consecutive", "yes").is_err());
        assert!(c.set("generate.mode", "beam").is_err());
        assert!(c.apply_text("seed = 1\nseed = 2\n").is_err());
        assert!(c.apply_text("just words\n").is_err());
        c.set("eval.recall", "6/5").unwrap();
        assert!(c.eval().is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.set("ema.alpha", "0").unwrap();
        c.set("data", "/tmp/x.dadf").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.snapshot()).unwrap();
        assert_eq!(c, d);
    }
}
