//! Window-level visual representation: a latent-query resampler per clip,
//! expectation-maximization attention over all resampled vectors of a
//! window, a cross-attention branch from the raw vectors onto the refined
//! bases, and the weighted fusion projected to the decoder width.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::alignment::VisionAdapter;
use crate::error::{Error, Result};
use crate::numerics::{attend, linear, rng, Graph, ParamStore, Real, Tensor, Var, NORM_EPS};

/// Responsibility mass below which a base counts as dead and is reseeded.
pub const DEAD_BASE_MASS: f64 = 1e-12;

/// Shapes and hyperparameters of the window encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualConfig {
    /// Input channel count `C`.
    pub channels: usize,
    /// Frames sampled per clip (`T`).
    pub frames_per_clip: usize,
    /// Resampled vectors per clip (`T′`).
    pub latents: usize,
    pub ff_hidden: usize,
    /// Number of bases `K`.
    pub bases: usize,
    /// EM rounds `R`.
    pub iterations: usize,
    /// Responsibility temperature `τ_e`.
    pub tau_e: f64,
    /// Weight of the reconstructed branch.
    pub alpha: f64,
    /// Weight of the cross-attention branch.
    pub beta: f64,
    /// Decoder embedding width.
    pub decoder_width: usize,
}

impl Default for ContextualConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            frames_per_clip: 8,
            latents: 4,
            ff_hidden: 64,
            bases: 32,
            iterations: 3,
            tau_e: 0.05,
            alpha: 3.0,
            beta: 1.0,
            decoder_width: 64,
        }
    }
}

impl ContextualConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("frames_per_clip", self.frames_per_clip),
            ("latents", self.latents),
            ("ff_hidden", self.ff_hidden),
            ("bases", self.bases),
            ("iterations", self.iterations),
            ("decoder_width", self.decoder_width),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{k} must be at least 1")));
            }
        }
        if !(self.tau_e > 0.0) {
            return Err(Error::invalid(format!("tau_e must be positive, got {}", self.tau_e)));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        Ok(())
    }

    /// EM runs only when one of its branches contributes.
    pub fn uses_em(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }

    /// Fresh resampler, bases, cross-attention and projector parameters.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut r = rng::fork(seed, "contextual-init");
        let mut s = ParamStore::new();
        let c = self.channels;
        let mut put = |name: &str, t: Tensor<T>| s.insert(name, t).expect("unique names");
        put(RESAMPLER_LATENTS, rng::normal(&mut r, &[self.latents, c], 0.02));
        for (w, b) in [
            (RESAMPLER_WQ, RESAMPLER_BQ),
            (RESAMPLER_WK, RESAMPLER_BK),
            (RESAMPLER_WV, RESAMPLER_BV),
        ] {
            put(w, rng::kaiming(&mut r, &[c, c], c));
            put(b, Tensor::zeros(&[c]));
        }
        put(RESAMPLER_FF1_W, rng::kaiming(&mut r, &[self.ff_hidden, c], c));
        put(RESAMPLER_FF1_B, Tensor::zeros(&[self.ff_hidden]));
        put(RESAMPLER_FF2_W, Tensor::zeros(&[c, self.ff_hidden]));
        put(RESAMPLER_FF2_B, Tensor::zeros(&[c]));
        put(EMA_BASES, rng::kaiming(&mut r, &[self.bases, c], c));
        for (w, b) in [(XATTN_WQ, XATTN_BQ), (XATTN_WK, XATTN_BK), (XATTN_WV, XATTN_BV)] {
            put(w, rng::kaiming(&mut r, &[c, c], c));
            put(b, Tensor::zeros(&[c]));
        }
        put(PROJ_WEIGHT, rng::kaiming(&mut r, &[c, self.decoder_width], c));
        put(PROJ_BIAS, Tensor::zeros(&[self.decoder_width]));
        s
    }
}

pub const RESAMPLER_LATENTS: &str = "resampler.latents";
pub const RESAMPLER_WQ: &str = "resampler.wq";
pub const RESAMPLER_BQ: &str = "resampler.bq";
pub const RESAMPLER_WK: &str = "resampler.wk";
pub const RESAMPLER_BK: &str = "resampler.bk";
pub const RESAMPLER_WV: &str = "resampler.wv";
pub const RESAMPLER_BV: &str = "resampler.bv";
pub const RESAMPLER_FF1_W: &str = "resampler.ff1.weight";
pub const RESAMPLER_FF1_B: &str = "resampler.ff1.bias";
pub const RESAMPLER_FF2_W: &str = "resampler.ff2.weight";
pub const RESAMPLER_FF2_B: &str = "resampler.ff2.bias";
pub const EMA_BASES: &str = "ema.bases";
pub const XATTN_WQ: &str = "xattn.wq";
pub const XATTN_BQ: &str = "xattn.bq";
pub const XATTN_WK: &str = "xattn.wk";
pub const XATTN_BK: &str = "xattn.bk";
pub const XATTN_WV: &str = "xattn.wv";
pub const XATTN_BV: &str = "xattn.bv";
pub const PROJ_WEIGHT: &str = "proj.weight";
pub const PROJ_BIAS: &str = "proj.bias";

/// Latent queries cross-attend to the frames (residual), then a two-layer
/// GELU feed-forward with residual. Output is `[T′×C]` for any frame count.
pub fn resample_graph<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, frames: Var) -> Var {
    let latents = g.param(store, RESAMPLER_LATENTS);
    let p = |g: &mut Graph<T>, n: &str| g.param(store, n);
    let (wq, bq, wk, bk, wv, bv) = (
        p(g, RESAMPLER_WQ),
        p(g, RESAMPLER_BQ),
        p(g, RESAMPLER_WK),
        p(g, RESAMPLER_BK),
        p(g, RESAMPLER_WV),
        p(g, RESAMPLER_BV),
    );
    let q = linear(g, latents, wq, bq);
    let k = linear(g, frames, wk, bk);
    let v = linear(g, frames, wv, bv);
    let a = attend(g, q, k, v);
    let x = g.add(latents, a);
    let (w1, b1, w2, b2) = (
        p(g, RESAMPLER_FF1_W),
        p(g, RESAMPLER_FF1_B),
        p(g, RESAMPLER_FF2_W),
        p(g, RESAMPLER_FF2_B),
    );
    let h = linear(g, x, w1, b1);
    let h = g.gelu(h);
    let f = linear(g, h, w2, b2);
    g.add(x, f)
}

pub fn resample<T: Real>(frames: &Tensor<T>, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let latents = store
        .get(RESAMPLER_LATENTS)
        .ok_or_else(|| Error::invalid("store has no resampler"))?;
    if frames.rows() == 0 {
        return Err(Error::invalid("resampling needs at least one frame"));
    }
    if frames.cols() != latents.cols() {
        return Err(Error::shape(format!(
            "frames have {} channels, resampler expects {}",
            frames.cols(),
            latents.cols()
        )));
    }
    let mut g = Graph::new();
    let f = g.constant(frames.clone());
    let out = resample_graph(&mut g, store, f);
    Ok(g.value(out).clone())
}

/// Final EM state of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    /// `[K×C]`, rows L2-normalized.
    pub bases: Tensor<T>,
    /// `[(N·T′)×K]`, rows sum to one.
    pub responsibilities: Tensor<T>,
    pub iterations: usize,
    pub tau_e: f64,
    /// Dead bases reseeded from the worst-reconstructed row.
    pub reseeded: usize,
}

/// EM nodes on the tape.
#[derive(Debug, Clone, Copy)]
pub struct EmGraph {
    pub bases: Var,
    pub responsibilities: Var,
    pub reseeded: usize,
}

/// `R` rounds of responsibility estimation and base re-estimation,
/// differentiable end to end. Bases are L2-normalized after every update.
pub fn em_iterate_graph<T: Real>(
    g: &mut Graph<T>,
    h: Var,
    m0: Var,
    iterations: usize,
    tau_e: f64,
) -> EmGraph {
    let inv_tau = T::lit(1.0 / tau_e);
    let mut m = m0;
    let mut z = None;
    let mut reseeded = 0;
    for _ in 0..iterations {
        let logits = g.matmul_t(h, m);
        let zz = g.softmax_rows(logits, inv_tau, false);
        let zt = g.transpose(zz);
        let weighted = g.matmul(zt, h);
        let mass = g.sum_cols(zt);
        let mass_values: Vec<f64> = g.value(mass).data().iter().map(|x| x.as_f64()).collect();
        let dead: Vec<usize> = mass_values
            .iter()
            .enumerate()
            .filter(|(_, &w)| !(w >= DEAD_BASE_MASS))
            .map(|(k, _)| k)
            .collect();
        let updated = if dead.is_empty() {
            g.div_by_col(weighted, mass)
        } else {
            let alive: Vec<usize> = (0..mass_values.len()).filter(|k| !dead.contains(k)).collect();
            let worst = worst_reconstructed_row(g.value(h), g.value(zz), g.value(m));
            let mut rows = Vec::with_capacity(mass_values.len());
            let live = if alive.is_empty() {
                None
            } else {
                let w = g.select_rows(weighted, &alive);
                let d = g.select_rows(mass, &alive);
                Some(g.div_by_col(w, d))
            };
            for k in 0..mass_values.len() {
                if let Some(pos) = alive.iter().position(|&a| a == k) {
                    rows.push(g.select_rows(live.expect("alive rows exist"), &[pos]));
                } else {
                    log::debug!("EM base {k} lost all responsibility; reseeding from row {worst}");
                    rows.push(g.select_rows(h, &[worst]));
                    reseeded += 1;
                }
            }
            g.concat_rows(&rows)
        };
        m = g.l2_normalize_rows(updated, T::lit(NORM_EPS));
        z = Some(zz);
    }
    EmGraph {
        bases: m,
        responsibilities: z.expect("at least one iteration"),
        reseeded,
    }
}

fn worst_reconstructed_row<T: Real>(h: &Tensor<T>, z: &Tensor<T>, m: &Tensor<T>) -> usize {
    let recon = z.matmul(m).expect("EM shapes");
    (0..h.rows())
        .map(|i| {
            let e: f64 = h
                .row(i)
                .iter()
                .zip(recon.row(i))
                .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
                .sum();
            (i, e)
        })
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0
}

pub fn em_iterate<T: Real>(
    h: &Tensor<T>,
    m0: &Tensor<T>,
    iterations: usize,
    tau_e: f64,
) -> Result<EmaState<T>> {
    if m0.rows() == 0 {
        return Err(Error::invalid("EM needs at least one base"));
    }
    if iterations == 0 {
        return Err(Error::invalid("EM needs at least one iteration"));
    }
    if !(tau_e > 0.0) {
        return Err(Error::invalid(format!("tau_e must be positive, got {tau_e}")));
    }
    if h.cols() != m0.cols() || h.rows() == 0 {
        return Err(Error::shape(format!(
            "inputs {:?} vs bases {:?}",
            h.shape(),
            m0.shape()
        )));
    }
    let mut g = Graph::new();
    let (hv, mv) = (g.constant(h.clone()), g.constant(m0.clone()));
    let out = em_iterate_graph(&mut g, hv, mv, iterations, tau_e);
    Ok(EmaState {
        bases: g.value(out.bases).clone(),
        responsibilities: g.value(out.responsibilities).clone(),
        iterations,
        tau_e,
        reseeded: out.reseeded,
    })
}

/// `Ĥ = Z · M`
pub fn reconstruct<T: Real>(state: &EmaState<T>) -> Tensor<T> {
    state
        .responsibilities
        .matmul(&state.bases)
        .expect("EM state shapes agree")
}

/// `softmax(Q Kᵀ / √d_k) V` with `Q` from the raw vectors and `K`, `V` from
/// the bases, each through its own affine map.
pub fn cross_attend_graph<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, h: Var, m: Var) -> Var {
    let p = |g: &mut Graph<T>, n: &str| g.param(store, n);
    let (wq, bq, wk, bk, wv, bv) = (
        p(g, XATTN_WQ),
        p(g, XATTN_BQ),
        p(g, XATTN_WK),
        p(g, XATTN_BK),
        p(g, XATTN_WV),
        p(g, XATTN_BV),
    );
    let q = linear(g, h, wq, bq);
    let k = linear(g, m, wk, bk);
    let v = linear(g, m, wv, bv);
    attend(g, q, k, v)
}

pub fn cross_attend<T: Real>(
    h: &Tensor<T>,
    bases: &Tensor<T>,
    projections: &ParamStore<T>,
) -> Result<Tensor<T>> {
    for name in [XATTN_WQ, XATTN_BQ, XATTN_WK, XATTN_BK, XATTN_WV, XATTN_BV] {
        if !projections.contains(name) {
            return Err(Error::invalid(format!("missing projection `{name}`")));
        }
    }
    let wq = projections.get(XATTN_WQ).unwrap();
    let wk = projections.get(XATTN_WK).unwrap();
    let wv = projections.get(XATTN_WV).unwrap();
    if wq.cols() != h.cols() || wk.cols() != bases.cols() || wv.cols() != bases.cols() {
        return Err(Error::shape("projection input widths disagree with H or M"));
    }
    if wq.rows() != wk.rows() {
        return Err(Error::shape("query and key projections differ in width"));
    }
    let mut g = Graph::new();
    let (hv, mv) = (g.constant(h.clone()), g.constant(bases.clone()));
    let out = cross_attend_graph(&mut g, projections, hv, mv);
    Ok(g.value(out).clone())
}

/// `Proj(H + α·Ĥ + β·H̃)` with `Proj(x) = x · W + b`, `W` stored `[C×C_dec]`.
pub fn fuse_project_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    h: Var,
    h_hat: Option<Var>,
    h_tilde: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Var {
    let mut x = h;
    if let Some(hh) = h_hat.filter(|_| alpha != 0.0) {
        let s = g.scale(hh, T::lit(alpha));
        x = g.add(x, s);
    }
    if let Some(ht) = h_tilde.filter(|_| beta != 0.0) {
        let s = g.scale(ht, T::lit(beta));
        x = g.add(x, s);
    }
    let w = g.param(store, PROJ_WEIGHT);
    let b = g.param(store, PROJ_BIAS);
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Branch weights and the projector used by [`fuse_project`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig<T> {
    pub alpha: f64,
    pub beta: f64,
    /// `[C×C_dec]`
    pub weight: Tensor<T>,
    /// `[C_dec]`
    pub bias: Tensor<T>,
}

impl<T: Real> FusionConfig<T> {
    /// Default branch weights α = 3, β = 1.
    pub fn with_projector(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            alpha: 3.0,
            beta: 1.0,
            weight,
            bias,
        }
    }
}

pub fn fuse_project<T: Real>(
    h: &Tensor<T>,
    h_hat: &Tensor<T>,
    h_tilde: &Tensor<T>,
    config: &FusionConfig<T>,
) -> Result<Tensor<T>> {
    if h.shape() != h_hat.shape() || h.shape() != h_tilde.shape() {
        return Err(Error::shape("H, Ĥ and H̃ must share a shape"));
    }
    if config.weight.rows() != h.cols() || config.bias.numel() != config.weight.cols() {
        return Err(Error::shape("projector does not match the input width"));
    }
    let mut store = ParamStore::new();
    store.insert(PROJ_WEIGHT, config.weight.clone())?;
    store.insert(PROJ_BIAS, config.bias.clone())?;
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let hh = g.constant(h_hat.clone());
    let ht = g.constant(h_tilde.clone());
    let out = fuse_project_graph(&mut g, &store, hv, Some(hh), Some(ht), config.alpha, config.beta);
    Ok(g.value(out).clone())
}

/// Evenly spaced frame indices: `floor((j + ½)·n / T)`.
pub fn uniform_frame_indices(available: usize, wanted: usize) -> Vec<usize> {
    (0..wanted)
        .map(|j| ((2 * j + 1) * available / (2 * wanted)).min(available - 1))
        .collect()
}

/// All branches of one encoded window.
#[derive(Debug, Clone, Copy)]
pub struct WindowFeatures {
    /// `[(N·T′)×C]` resampled vectors.
    pub h: Var,
    pub h_hat: Option<Var>,
    pub h_tilde: Option<Var>,
    /// `[(N·T′)×C_dec]`
    pub fused: Var,
    pub reseeded: usize,
}

/// Adapter → resampler per clip → EM over the window → cross-attention →
/// fusion. The store must hold the adapter and contextual parameters.
pub fn encode_window_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    clips: &[&Tensor<T>],
    config: &ContextualConfig,
) -> WindowFeatures {
    let per_clip: Vec<Var> = clips
        .iter()
        .map(|frames| {
            let idx = uniform_frame_indices(frames.rows(), config.frames_per_clip);
            let raw = g.constant((*frames).clone());
            let picked = g.select_rows(raw, &idx);
            let adapted = VisionAdapter::apply(g, store, picked);
            resample_graph(g, store, adapted)
        })
        .collect();
    let h = g.concat_rows(&per_clip);
    let (mut h_hat, mut h_tilde, mut reseeded) = (None, None, 0);
    if config.uses_em() {
        let m0 = g.param(store, EMA_BASES);
        let em = em_iterate_graph(g, h, m0, config.iterations, config.tau_e);
        reseeded = em.reseeded;
        if config.alpha > 0.0 {
            h_hat = Some(g.matmul(em.responsibilities, em.bases));
        }
        if config.beta > 0.0 {
            h_tilde = Some(cross_attend_graph(g, store, h, em.bases));
        }
    }
    let fused = fuse_project_graph(g, store, h, h_hat, h_tilde, config.alpha, config.beta);
    WindowFeatures {
        h,
        h_hat,
        h_tilde,
        fused,
        reseeded,
    }
}

/// Plain `H`, `Ĥ` and `H̃` of one window. EM always runs here, whatever
/// the fusion weights.
pub fn window_branches<T: Real>(
    store: &ParamStore<T>,
    clips: &[&Tensor<T>],
    config: &ContextualConfig,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let plain = ContextualConfig {
        alpha: 0.0,
        beta: 0.0,
        ..config.clone()
    };
    let mut g = Graph::new();
    let f = encode_window_graph(&mut g, store, clips, &plain);
    let h = g.value(f.h).clone();
    let m0 = store
        .get(EMA_BASES)
        .ok_or_else(|| Error::invalid(format!("missing `{EMA_BASES}`")))?;
    let state = em_iterate(&h, m0, config.iterations, config.tau_e)?;
    let h_hat = reconstruct(&state);
    let h_tilde = cross_attend(&h, &state.bases, store)?;
    Ok((h, h_hat, h_tilde))
}

/// CSV of branch vectors: header `branch,index,c0..c{C-1}`, then one line
/// per row of each branch.
pub fn branch_vectors_csv<T: Real>(branches: &[(&str, &Tensor<T>)]) -> Result<String> {
    let c = branches.first().map_or(0, |(_, t)| t.cols());
    if branches.iter().any(|(_, t)| t.cols() != c) {
        return Err(Error::shape("branches differ in width"));
    }
    let mut s = String::from("branch,index");
    for j in 0..c {
        write!(s, ",c{j}").unwrap();
    }
    s.push('\n');
    for (tag, t) in branches {
        for i in 0..t.rows() {
            write!(s, "{tag},{i}").unwrap();
            for v in t.row(i) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
    }
    Ok(s)
}

/// Writes `H`, `Ĥ`, `H̃` for external plotting.
pub fn export_branch_vectors<T: Real>(
    h: &Tensor<T>,
    h_hat: &Tensor<T>,
    h_tilde: &Tensor<T>,
    path: &Path,
) -> Result<()> {
    let csv = branch_vectors_csv(&[("H", h), ("H_hat", h_hat), ("H_tilde", h_tilde)])?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}

/// Draws `count` points around `clusters` random unit centres with isotropic
/// noise of scale `spread`. Used by the EM property checks and benchmarks.
pub fn gaussian_mixture(
    r: &mut impl Rng,
    count: usize,
    clusters: usize,
    dim: usize,
    spread: f64,
) -> Tensor<f64> {
    let centres: Vec<Vec<f64>> = (0..clusters)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng::gaussian(r)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let c = &centres[r.gen_range(0..clusters)];
            c.iter()
                .map(|&x| x + spread / (dim as f64).sqrt() * rng::gaussian(r))
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows).expect("equal widths")
}
