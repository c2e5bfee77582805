use super::prompt::{DistinctiveSet, PromptSequence, PromptSlot};
use crate::error::{Error, Result};
use crate::numerics::{linear, rng, Graph, ParamStore, Real, Tensor, Var};

pub const TOKEN_EMBEDDING: &str = "decoder.tok_emb";
pub const POSITION_EMBEDDING: &str = "decoder.pos_emb";
pub const OUTPUT_BIAS: &str = "decoder.out_bias";
const LN_EPS: f64 = 1e-5;

/// Shape of the causal decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub context: usize,
}

impl DecoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            width: 64,
            layers: 2,
            heads: 2,
            ff_hidden: 128,
            context: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.width == 0 || self.layers == 0 || self.context == 0 {
            return Err(Error::invalid("decoder sizes must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "decoder width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.ff_hidden == 0 {
            return Err(Error::invalid("decoder ff_hidden must be positive"));
        }
        Ok(())
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut r = rng::fork(seed, "decoder-init");
        let mut s = ParamStore::new();
        let d = self.width;
        let mut put = |name: String, t: Tensor<T>| s.insert(name, t).expect("unique names");
        put(TOKEN_EMBEDDING.into(), rng::normal(&mut r, &[self.vocab_size, d], 0.1));
        put(POSITION_EMBEDDING.into(), rng::normal(&mut r, &[self.context, d], 0.1));
        for l in 0..self.layers {
            let p = |n: &str| format!("decoder.block{l}.{n}");
            for ln in ["ln1", "ln2"] {
                put(p(&format!("{ln}.gain")), Tensor::full(&[d], T::one()));
                put(p(&format!("{ln}.bias")), Tensor::zeros(&[d]));
            }
            for w in ["wq", "wk", "wv", "wo"] {
                put(p(w), rng::kaiming(&mut r, &[d, d], d));
                put(p(&format!("b{}", &w[1..])), Tensor::zeros(&[d]));
            }
            put(p("ff1.weight"), rng::kaiming(&mut r, &[self.ff_hidden, d], d));
            put(p("ff1.bias"), Tensor::zeros(&[self.ff_hidden]));
            put(
                p("ff2.weight"),
                rng::normal(&mut r, &[d, self.ff_hidden], 0.5 / (self.ff_hidden as f64).sqrt()),
            );
            put(p("ff2.bias"), Tensor::zeros(&[d]));
        }
        put("decoder.lnf.gain".into(), Tensor::full(&[d], T::one()));
        put("decoder.lnf.bias".into(), Tensor::zeros(&[d]));
        put(OUTPUT_BIAS.into(), Tensor::zeros(&[self.vocab_size]));
        s
    }
}

pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("decoder.")
}

fn layer_norm<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, prefix: &str) -> Var {
    let n = g.layer_norm_rows(x, T::lit(LN_EPS));
    let gain = g.param(store, &format!("{prefix}.gain"));
    let bias = g.param(store, &format!("{prefix}.bias"));
    let y = g.mul_row(n, gain);
    g.add_row(y, bias)
}

fn causal_self_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    prefix: &str,
    heads: usize,
) -> Var {
    let p = |g: &mut Graph<T>, n: &str| g.param(store, &format!("{prefix}.{n}"));
    let (wq, bq, wk, bk, wv, bv, wo, bo) = (
        p(g, "wq"),
        p(g, "bq"),
        p(g, "wk"),
        p(g, "bk"),
        p(g, "wv"),
        p(g, "bv"),
        p(g, "wo"),
        p(g, "bo"),
    );
    let q = linear(g, x, wq, bq);
    let k = linear(g, x, wk, bk);
    let v = linear(g, x, wv, bv);
    let width = g.shape(x).1;
    let dh = width / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
            let (qh, kh, vh) = (
                g.select_cols(q, &cols),
                g.select_cols(k, &cols),
                g.select_cols(v, &cols),
            );
            let scores = g.matmul_t(qh, kh);
            let w = g.softmax_rows(scores, scale, true);
            g.matmul(w, vh)
        })
        .collect();
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, cat, wo, bo)
}

/// Decoder input rows for `slots` followed by `tokens`.
pub fn embed_inputs<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    visual: Option<Var>,
    slots: &[PromptSlot],
    tokens: &[u32],
) -> Var {
    let emb = g.param(store, TOKEN_EMBEDDING);
    let mut parts = Vec::new();
    let mut run: Vec<usize> = Vec::new();
    let mut vis_run: Vec<usize> = Vec::new();
    let flush_tokens = |g: &mut Graph<T>, run: &mut Vec<usize>, parts: &mut Vec<Var>| {
        if !run.is_empty() {
            parts.push(g.select_rows(emb, run));
            run.clear();
        }
    };
    let flush_visual = |g: &mut Graph<T>, run: &mut Vec<usize>, parts: &mut Vec<Var>| {
        if !run.is_empty() {
            let v = visual.expect("visual slots need visual features");
            parts.push(g.select_rows(v, run));
            run.clear();
        }
    };
    for slot in slots {
        match *slot {
            PromptSlot::Visual(i) => {
                flush_tokens(g, &mut run, &mut parts);
                vis_run.push(i);
            }
            PromptSlot::Token(t) => {
                flush_visual(g, &mut vis_run, &mut parts);
                run.push(t as usize);
            }
        }
    }
    flush_visual(g, &mut vis_run, &mut parts);
    run.extend(tokens.iter().map(|&t| t as usize));
    flush_tokens(g, &mut run, &mut parts);
    let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
    let len = g.shape(x).0;
    let pos = g.param(store, POSITION_EMBEDDING);
    let positions: Vec<usize> = (0..len).collect();
    let pe = g.select_rows(pos, &positions);
    g.add(x, pe)
}

/// Final hidden states `[L×C_dec]` of a causal pass over `inputs`.
pub fn decoder_hidden<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    config: &DecoderConfig,
    inputs: Var,
) -> Var {
    let mut x = inputs;
    for l in 0..config.layers {
        let prefix = format!("decoder.block{l}");
        let n = layer_norm(g, store, x, &format!("{prefix}.ln1"));
        let a = causal_self_attention(g, store, n, &prefix, config.heads);
        x = g.add(x, a);
        let n = layer_norm(g, store, x, &format!("{prefix}.ln2"));
        let w1 = g.param(store, &format!("{prefix}.ff1.weight"));
        let b1 = g.param(store, &format!("{prefix}.ff1.bias"));
        let w2 = g.param(store, &format!("{prefix}.ff2.weight"));
        let b2 = g.param(store, &format!("{prefix}.ff2.bias"));
        let h = linear(g, n, w1, b1);
        let h = g.gelu(h);
        let f = linear(g, h, w2, b2);
        x = g.add(x, f);
    }
    layer_norm(g, store, x, "decoder.lnf")
}

/// Vocabulary logits for hidden rows, through the tied embedding table.
pub fn output_logits<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, hidden: Var) -> Var {
    let emb = g.param(store, TOKEN_EMBEDDING);
    let bias = g.param(store, OUTPUT_BIAS);
    let y = g.matmul_t(hidden, emb);
    g.add_row(y, bias)
}

/// Logits at the scored target positions of a training prompt, `[|target|×V]`.
pub fn target_logits<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    config: &DecoderConfig,
    visual: Option<Var>,
    prompt: &PromptSequence,
) -> Result<Var> {
    if prompt.target.is_empty() {
        return Err(Error::invalid("prompt has no target"));
    }
    if prompt.input_len() > config.context {
        return Err(Error::ContextOverflow {
            clip: 0,
            len: prompt.input_len(),
            limit: config.context,
        });
    }
    let fed = &prompt.target[..prompt.target.len() - 1];
    let x = embed_inputs(g, store, visual, &prompt.slots, fed);
    let h = decoder_hidden(g, store, config, x);
    let rows: Vec<usize> = prompt.target_positions().collect();
    let h = g.select_rows(h, &rows);
    Ok(output_logits(g, store, h))
}

/// Auto-regressive and distinctive loss nodes plus their sum.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Terms {
    pub auto: Var,
    pub dist: Var,
    pub total: Var,
}

/// `L_auto`: cross-entropy summed over every target position including
/// `EOS`. `L_dist`: the same cross-entropy restricted to positions whose
/// gold token is distinctive. `dist_weight` scales the latter in the total.
pub fn stage2_terms<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    prompt: &PromptSequence,
    distinctive: &DistinctiveSet,
    dist_weight: f64,
) -> Stage2Terms {
    let targets: Vec<usize> = prompt.target.iter().map(|&t| t as usize).collect();
    let ones = vec![T::one(); targets.len()];
    let auto = g.cross_entropy(logits, &targets, &ones);
    let mask: Vec<T> = prompt
        .target
        .iter()
        .map(|&t| if distinctive.contains(t) { T::one() } else { T::zero() })
        .collect();
    let dist = g.cross_entropy(logits, &targets, &mask);
    let total = if dist_weight == 0.0 {
        auto
    } else if dist_weight == 1.0 {
        g.add(auto, dist)
    } else {
        let d = g.scale(dist, T::lit(dist_weight));
        g.add(auto, d)
    };
    Stage2Terms { auto, dist, total }
}

/// Plain-valued losses of one prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Loss {
    pub auto: f64,
    pub dist: f64,
    pub total: f64,
}

fn evaluate_terms<T: Real>(
    store: &ParamStore<T>,
    config: &DecoderConfig,
    visual: &Tensor<T>,
    prompt: &PromptSequence,
    distinctive: &DistinctiveSet,
) -> Result<Stage2Loss> {
    config.validate()?;
    if visual.cols() != config.width && visual.numel() > 0 {
        return Err(Error::shape("visual features do not match the decoder width"));
    }
    let mut g = Graph::new();
    let v = g.constant(visual.clone());
    let logits = target_logits(&mut g, store, config, Some(v), prompt)?;
    let t = stage2_terms(&mut g, logits, prompt, distinctive, 1.0);
    Ok(Stage2Loss {
        auto: g.value(t.auto).item().as_f64(),
        dist: g.value(t.dist).item().as_f64(),
        total: g.value(t.total).item().as_f64(),
    })
}

pub fn auto_loss<T: Real>(
    store: &ParamStore<T>,
    config: &DecoderConfig,
    visual: &Tensor<T>,
    prompt: &PromptSequence,
) -> Result<f64> {
    Ok(evaluate_terms(store, config, visual, prompt, &DistinctiveSet::default())?.auto)
}

pub fn distinctive_loss<T: Real>(
    store: &ParamStore<T>,
    config: &DecoderConfig,
    visual: &Tensor<T>,
    prompt: &PromptSequence,
    distinctive: &DistinctiveSet,
) -> Result<f64> {
    Ok(evaluate_terms(store, config, visual, prompt, distinctive)?.dist)
}

/// `L_II = L_auto + L_dist`
pub fn stage2_loss<T: Real>(
    store: &ParamStore<T>,
    config: &DecoderConfig,
    visual: &Tensor<T>,
    prompt: &PromptSequence,
    distinctive: &DistinctiveSet,
) -> Result<Stage2Loss> {
    evaluate_terms(store, config, visual, prompt, distinctive)
}

/// Logits of every input position for `slots` followed by `tokens`.
pub fn all_logits<T: Real>(
    store: &ParamStore<T>,
    config: &DecoderConfig,
    visual: &Tensor<T>,
    slots: &[PromptSlot],
    tokens: &[u32],
) -> Tensor<T> {
    let mut g = Graph::new();
    let v = g.constant(visual.clone());
    let x = embed_inputs(&mut g, store, Some(v), slots, tokens);
    let h = decoder_hidden(&mut g, store, config, x);
    let l = output_logits(&mut g, store, h);
    g.value(l).clone()
}
