//! Fusion Pathformer: a multi-scale patch transformer shared across modalities.
//!
//! Each modality `m` (a `T x d_m` slice of the window) is projected to width
//! `d_e` by its own alignment embedding and offset by a learned positional
//! embedding. A router scores the `L` patch sizes from temporal summary
//! statistics of that embedding and keeps the top `K`; the modality is then
//! pushed through the AMS block of every selected patch size and the block
//! outputs are mixed with the router weights. Blocks are shared by all
//! modalities. The per-modality outputs are combined with a weight vector of
//! length `M` into `X_h` (`T x d_e`), whose temporal mean is the window
//! representation `h`. A linear decoder maps `X_h` back to `T x D` for
//! auto-regressive pretraining.
//!
//! Inside an AMS block with patch size `S`, the window is cut into `T / S`
//! patches. Token unit is one timestamp of width `d_e`, so channels of a
//! modality are mixed by the embedding rather than treated separately:
//!
//! 1. intra-patch attention: timestamps attend only within their patch;
//! 2. inter-patch attention: patch means attend to each other, and the result
//!    is broadcast back to every timestamp of the patch;
//! 3. position-wise feed-forward.
//!
//! Each step is pre-normalized and residual, so a block with zero attention
//! and feed-forward weights is the identity.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{s, Array1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamId, ParamStore, Tape, Var};
use crate::datamodel::{total_dims, validate_modalities, ModalitySpec};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `d_e`.
    pub d_e: usize,
    /// Candidate patch sizes; each must divide `window_len`.
    pub patch_sizes: Vec<usize>,
    /// Number of patch sizes routed per modality.
    pub top_k: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward step.
    pub d_ff: usize,
    /// Input window length `T` in timestamps.
    pub window_len: usize,
    pub modalities: Vec<ModalitySpec>,
    /// Standard deviation of router score noise during training.
    pub router_noise: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_e: 16,
            patch_sizes: vec![6, 20, 60],
            top_k: 2,
            n_heads: 2,
            d_ff: 32,
            window_len: 180,
            modalities: crate::datamodel::default_modalities().0,
            router_noise: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = validate_modalities(&self.modalities)
            .into_iter()
            .map(|e| format!("model.{e}"))
            .collect();
        if self.d_e == 0 {
            errs.push("model.d_e must be >= 1".into());
        }
        if self.n_heads == 0 || !self.d_e.is_multiple_of(self.n_heads.max(1)) {
            errs.push(format!(
                "model.d_e ({}) must be divisible by n_heads ({})",
                self.d_e, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            errs.push("model.d_ff must be >= 1".into());
        }
        if self.window_len < 2 {
            errs.push("model.window_len must be >= 2".into());
        }
        if self.patch_sizes.is_empty() {
            errs.push("model.patch_sizes must not be empty".into());
        }
        for (i, &s) in self.patch_sizes.iter().enumerate() {
            if s == 0 || !self.window_len.is_multiple_of(s) {
                errs.push(format!(
                    "model.patch_sizes: {s} does not divide window_len {}",
                    self.window_len
                ));
            }
            if self.patch_sizes[..i].contains(&s) {
                errs.push(format!("model.patch_sizes: {s} listed twice"));
            }
        }
        if self.top_k == 0 || self.top_k > self.patch_sizes.len() {
            errs.push(format!(
                "model.top_k must lie in 1..={}, got {}",
                self.patch_sizes.len(),
                self.top_k
            ));
        }
        if !(self.router_noise >= 0.0) {
            errs.push("model.router_noise must be >= 0".into());
        }
        errs
    }

    /// Total input channels `D`.
    pub fn input_dims(&self) -> usize {
        total_dims(&self.modalities)
    }
}

/// Top-K gate choice for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Selected patch-size indices, highest score first.
    pub gates: Vec<usize>,
    /// Mixing weights for `gates`; nonnegative, summing to one.
    pub weights: Vec<f64>,
    /// Raw scores for every patch size, noise included.
    pub scores: Vec<f64>,
}

impl RoutingDecision {
    pub fn validate(&self, n_gates: usize, k: usize) -> Result<()> {
        let mut sorted = self.gates.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let sum: f64 = self.weights.iter().sum();
        if self.gates.len() != k
            || sorted.len() != k
            || self.weights.len() != k
            || sorted.iter().any(|&g| g >= n_gates)
            || self.weights.iter().any(|w| !(*w >= 0.0))
            || (sum - 1.0).abs() > 1e-6
        {
            return Err(Error::shape(
                "routing decision",
                format!("{k} distinct gates < {n_gates} with unit weight"),
                format!("{self:?}"),
            ));
        }
        Ok(())
    }
}

/// Indices of the `k` largest scores, ties broken toward the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// How the router chooses gates during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'a> {
    /// Deterministic top-K on the raw scores.
    Inference,
    /// Adds the given per-modality score noise before selection.
    Noisy(&'a [Vec<f64>]),
    /// Uses a fixed selection per modality; weights are still computed.
    Frozen(&'a [Vec<usize>]),
}

/// Splits `x` (`T x d`) into `T / patch` consecutive patches.
pub fn patch_divide(x: &Mat, patch: usize) -> Result<Vec<Mat>> {
    if patch == 0 || !x.nrows().is_multiple_of(patch) {
        return Err(Error::config(format!(
            "patch size {patch} does not divide length {}",
            x.nrows()
        )));
    }
    Ok((0..x.nrows() / patch)
        .map(|p| x.slice(s![p * patch..(p + 1) * patch, ..]).to_owned())
        .collect())
}

/// Concatenates patches along time.
pub fn patch_concat(patches: &[Mat]) -> Result<Mat> {
    let views: Vec<_> = patches.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape("patch_concat", "equal widths", e))
}

#[derive(Clone, Debug)]
struct AttnParams {
    ln_g: ParamId,
    ln_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct FfnParams {
    ln_g: ParamId,
    ln_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Transformer unit for one patch size, shared by every modality routed to it.
#[derive(Clone, Debug)]
struct AmsBlock {
    intra: AttnParams,
    inter: AttnParams,
    ffn: FfnParams,
    patch_size: usize,
    /// `P x T` patch-mean operator.
    pool: Arc<Mat>,
    /// `T x P` broadcast back to timestamps.
    spread: Arc<Mat>,
}

#[derive(Clone, Debug)]
struct Layout {
    align: Vec<(ParamId, ParamId)>,
    pos: ParamId,
    blocks: Vec<AmsBlock>,
    router_w: ParamId,
    router_b: ParamId,
    fusion_w: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

/// Output of [`FusionPathformer::represent`].
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    /// Uniform representation, length `d_e`.
    pub h: Array1<f64>,
    /// Modality-weighted combination, `T x d_e`.
    pub x_h: Mat,
    pub decisions: Vec<RoutingDecision>,
}

/// Tape handles produced by [`FusionPathformer::build_graph`].
pub struct Graph {
    pub x_h: Var,
    pub h: Var,
    pub pred: Var,
    pub decisions: Vec<RoutingDecision>,
}

pub struct FusionPathformer {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    block_calls: Vec<AtomicUsize>,
    mean_row: Arc<Mat>,
    diff: Arc<Mat>,
    diff_mean: Arc<Mat>,
}

impl Clone for FusionPathformer {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            block_calls: self
                .block_calls
                .iter()
                .map(|c| AtomicUsize::new(c.load(Ordering::Relaxed)))
                .collect(),
            mean_row: self.mean_row.clone(),
            diff: self.diff.clone(),
            diff_mean: self.diff_mean.clone(),
        }
    }
}

impl std::fmt::Debug for FusionPathformer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FusionPathformer")
            .field("config", &self.config)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl FusionPathformer {
    /// Builds a model with seed-controlled fan-in scaled uniform initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = seed::stream(config.seed, "model/init");
        let (t, de, dff) = (config.window_len, config.d_e, config.d_ff);
        let n_gates = config.patch_sizes.len();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = ParamStore::new();

        let align = config
            .modalities
            .iter()
            .map(|m| {
                let w = p.add(
                    format!("align.{}.w", m.name),
                    "alignment",
                    uniform(&mut rng, m.dims, de, fan(m.dims)),
                );
                let b = p.add(format!("align.{}.b", m.name), "alignment", Mat::zeros((1, de)));
                (w, b)
            })
            .collect();
        let pos = p.add("pos", "positional", uniform(&mut rng, t, de, 0.1));

        let mut blocks = Vec::with_capacity(n_gates);
        for (l, &size) in config.patch_sizes.iter().enumerate() {
            let attn = |p: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, part: &str| {
                let g = format!("block{l}.{part}");
                AttnParams {
                    ln_g: p.add(format!("{g}.ln_g"), &g, Mat::ones((1, de))),
                    ln_b: p.add(format!("{g}.ln_b"), &g, Mat::zeros((1, de))),
                    wq: p.add(format!("{g}.wq"), &g, uniform(rng, de, de, fan(de))),
                    wk: p.add(format!("{g}.wk"), &g, uniform(rng, de, de, fan(de))),
                    wv: p.add(format!("{g}.wv"), &g, uniform(rng, de, de, fan(de))),
                    wo: p.add(format!("{g}.wo"), &g, uniform(rng, de, de, fan(de))),
                }
            };
            let intra = attn(&mut p, &mut rng, "intra");
            let inter = attn(&mut p, &mut rng, "inter");
            let g = format!("block{l}.ffn");
            let ffn = FfnParams {
                ln_g: p.add(format!("{g}.ln_g"), &g, Mat::ones((1, de))),
                ln_b: p.add(format!("{g}.ln_b"), &g, Mat::zeros((1, de))),
                w1: p.add(format!("{g}.w1"), &g, uniform(&mut rng, de, dff, fan(de))),
                b1: p.add(format!("{g}.b1"), &g, Mat::zeros((1, dff))),
                w2: p.add(format!("{g}.w2"), &g, uniform(&mut rng, dff, de, fan(dff))),
                b2: p.add(format!("{g}.b2"), &g, Mat::zeros((1, de))),
            };
            let n_patches = t / size;
            blocks.push(AmsBlock {
                intra,
                inter,
                ffn,
                patch_size: size,
                pool: Arc::new(Mat::from_shape_fn((n_patches, t), |(q, i)| {
                    if i / size == q {
                        1.0 / size as f64
                    } else {
                        0.0
                    }
                })),
                spread: Arc::new(Mat::from_shape_fn((t, n_patches), |(i, q)| {
                    f64::from(u8::from(i / size == q))
                })),
            });
        }

        let router_w = p.add("router.w", "router", uniform(&mut rng, 2 * de, n_gates, fan(2 * de)));
        let router_b = p.add("router.b", "router", Mat::zeros((1, n_gates)));
        let m = config.modalities.len();
        let fusion_w = p.add("fusion.w", "fusion", Mat::from_elem((1, m), 1.0 / m as f64));
        let d = config.input_dims();
        let dec_w = p.add("decoder.w", "decoder", uniform(&mut rng, de, d, fan(de)));
        let dec_b = p.add("decoder.b", "decoder", Mat::zeros((1, d)));

        let layout = Layout {
            align,
            pos,
            blocks,
            router_w,
            router_b,
            fusion_w,
            dec_w,
            dec_b,
        };
        let mean_row = Arc::new(Mat::from_elem((1, t), 1.0 / t as f64));
        let diff = Arc::new(difference_operator(t));
        let diff_mean = Arc::new(Mat::from_elem((1, t - 1), 1.0 / (t - 1) as f64));
        Ok(Self {
            block_calls: (0..n_gates).map(|_| AtomicUsize::new(0)).collect(),
            config,
            params: p,
            layout,
            mean_row,
            diff,
            diff_mean,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.ids().find(|&id| self.params.name(id) == name)
    }

    /// Parameter tensor by name, e.g. `"decoder.w"` or `"block0.intra.wq"`.
    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.param_id(name).map(|id| self.params.get(id))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Mat> {
        let id = self.param_id(name)?;
        Some(self.params.get_mut(id))
    }

    /// Number of times each AMS block has been evaluated.
    pub fn block_calls(&self) -> Vec<usize> {
        self.block_calls.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_block_calls(&self) {
        self.block_calls.iter().for_each(|c| c.store(0, Ordering::Relaxed));
    }

    fn check_input(&self, input: &Mat) -> Result<()> {
        let expected = (self.config.window_len, self.config.input_dims());
        if input.dim() != expected {
            return Err(Error::shape(
                "model input",
                format!("{expected:?}"),
                format!("{:?}", input.dim()),
            ));
        }
        check_finite(input, "model input")
    }

    fn check_embedding(&self, x: &Mat) -> Result<()> {
        let expected = (self.config.window_len, self.config.d_e);
        if x.dim() != expected {
            return Err(Error::shape(
                "modality embedding",
                format!("{expected:?}"),
                format!("{:?}", x.dim()),
            ));
        }
        check_finite(x, "modality embedding")
    }

    fn align_graph(&self, tape: &mut Tape, input: &Mat) -> Vec<Var> {
        let mut col = 0;
        self.config
            .modalities
            .iter()
            .zip(&self.layout.align)
            .map(|(m, &(w, b))| {
                let x = tape.constant(input.slice(s![.., col..col + m.dims]).to_owned());
                col += m.dims;
                let w = tape.param(&self.params, w);
                let b = tape.param(&self.params, b);
                let xw = tape.matmul(x, w);
                tape.add_row(xw, b)
            })
            .collect()
    }

    /// Multi-head attention. With `block`, rows attend only within consecutive
    /// blocks of that length.
    fn attention_graph(&self, tape: &mut Tape, x: Var, p: &AttnParams, block: Option<usize>) -> Var {
        let heads = self.config.n_heads;
        let dh = self.config.d_e / heads;
        let wq = tape.param(&self.params, p.wq);
        let wk = tape.param(&self.params, p.wk);
        let wv = tape.param(&self.params, p.wv);
        let wo = tape.param(&self.params, p.wo);
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let scale = 1.0 / (dh as f64).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let (qh, kh, vh) = if heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_cols(q, h * dh, dh),
                        tape.slice_cols(k, h * dh, dh),
                        tape.slice_cols(v, h * dh, dh),
                    )
                };
                if let Some(size) = block {
                    return tape.block_attention(qh, kh, vh, size, scale);
                }
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scores, None);
                tape.matmul(attn, vh)
            })
            .collect();
        let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        tape.matmul(merged, wo)
    }

    fn block_graph(&self, tape: &mut Tape, l: usize, x: Var) -> Var {
        self.block_calls[l].fetch_add(1, Ordering::Relaxed);
        let b = &self.layout.blocks[l];
        let p = &self.params;

        let (g, be) = (tape.param(p, b.intra.ln_g), tape.param(p, b.intra.ln_b));
        let n1 = tape.layer_norm(x, g, be);
        let a1 = self.attention_graph(tape, n1, &b.intra, Some(b.patch_size));
        let x1 = tape.add(x, a1);

        let (g, be) = (tape.param(p, b.inter.ln_g), tape.param(p, b.inter.ln_b));
        let n2 = tape.layer_norm(x1, g, be);
        let summaries = tape.left_mul(b.pool.clone(), n2);
        let a2 = self.attention_graph(tape, summaries, &b.inter, None);
        let spread = tape.left_mul(b.spread.clone(), a2);
        let x2 = tape.add(x1, spread);

        let f = &b.ffn;
        let (g, be) = (tape.param(p, f.ln_g), tape.param(p, f.ln_b));
        let n3 = tape.layer_norm(x2, g, be);
        let (w1, b1, w2, b2) = (
            tape.param(p, f.w1),
            tape.param(p, f.b1),
            tape.param(p, f.w2),
            tape.param(p, f.b2),
        );
        let hidden = tape.matmul(n3, w1);
        let hidden = tape.add_row(hidden, b1);
        let hidden = tape.gelu(hidden);
        let out = tape.matmul(hidden, w2);
        let out = tape.add_row(out, b2);
        tape.add(x2, out)
    }

    /// Router scores (`1 x L`) from the temporal mean and first-difference
    /// energy of a modality embedding.
    fn router_scores(&self, tape: &mut Tape, x: Var) -> Var {
        let mean = tape.left_mul(self.mean_row.clone(), x);
        let d = tape.left_mul(self.diff.clone(), x);
        let sq = tape.mul(d, d);
        let energy = tape.left_mul(self.diff_mean.clone(), sq);
        let feats = tape.concat_cols(&[mean, energy]);
        let w = tape.param(&self.params, self.layout.router_w);
        let b = tape.param(&self.params, self.layout.router_b);
        let s = tape.matmul(feats, w);
        tape.add_row(s, b)
    }

    /// Routes one modality embedding and mixes the selected block outputs.
    fn route_and_fuse(
        &self,
        tape: &mut Tape,
        x: Var,
        noise: Option<&[f64]>,
        frozen: Option<&[usize]>,
    ) -> (Var, RoutingDecision) {
        let mut scores = self.router_scores(tape, x);
        if let Some(noise) = noise {
            let n = tape.constant(Mat::from_shape_vec((1, noise.len()), noise.to_vec()).expect("noise width"));
            scores = tape.add(scores, n);
        }
        let score_vals: Vec<f64> = tape.value(scores).iter().copied().collect();
        let gates = match frozen {
            Some(g) => g.to_vec(),
            None => top_k_indices(&score_vals, self.config.top_k),
        };
        let selected = tape.gather_cols(scores, &gates);
        let weights = tape.softmax_rows(selected, None);
        let mut out: Option<Var> = None;
        for (k, &g) in gates.iter().enumerate() {
            let y = self.block_graph(tape, g, x);
            let y = tape.scale_by(y, weights, k);
            out = Some(match out {
                Some(acc) => tape.add(acc, y),
                None => y,
            });
        }
        let decision = RoutingDecision {
            gates,
            weights: tape.value(weights).iter().copied().collect(),
            scores: score_vals,
        };
        (out.expect("top_k >= 1"), decision)
    }

    /// Records the full forward pass on `tape`.
    pub fn build_graph(&self, tape: &mut Tape, input: &Mat, routing: Routing<'_>) -> Result<Graph> {
        self.check_input(input)?;
        let m_count = self.config.modalities.len();
        match routing {
            Routing::Noisy(n) if n.len() != m_count || n.iter().any(|v| v.len() != self.config.patch_sizes.len()) => {
                return Err(Error::shape("router noise", format!("{m_count} x L"), n.len()));
            }
            Routing::Frozen(f) if f.len() != m_count || f.iter().any(|g| g.len() != self.config.top_k) => {
                return Err(Error::shape("frozen routing", format!("{m_count} x K"), f.len()));
            }
            _ => {}
        }
        let aligned = self.align_graph(tape, input);
        let pos = tape.param(&self.params, self.layout.pos);
        let wh = tape.param(&self.params, self.layout.fusion_w);
        let mut x_h: Option<Var> = None;
        let mut decisions = Vec::with_capacity(m_count);
        for (m, a) in aligned.into_iter().enumerate() {
            let e = tape.add(a, pos);
            let (noise, frozen) = match routing {
                Routing::Inference => (None, None),
                Routing::Noisy(n) => (Some(n[m].as_slice()), None),
                Routing::Frozen(f) => (None, Some(f[m].as_slice())),
            };
            let (out, decision) = self.route_and_fuse(tape, e, noise, frozen);
            decisions.push(decision);
            let weighted = tape.scale_by(out, wh, m);
            x_h = Some(match x_h {
                Some(acc) => tape.add(acc, weighted),
                None => weighted,
            });
        }
        let x_h = x_h.expect("at least one modality");
        check_finite(tape.value(x_h), "fusion output")?;
        let h = tape.left_mul(self.mean_row.clone(), x_h);
        let dw = tape.param(&self.params, self.layout.dec_w);
        let db = tape.param(&self.params, self.layout.dec_b);
        let pred = tape.matmul(x_h, dw);
        let pred = tape.add_row(pred, db);
        Ok(Graph {
            x_h,
            h,
            pred,
            decisions,
        })
    }

    /// Per-modality alignment embeddings `X^(m) W_a^(m) + b_a^(m)`, each `T x d_e`.
    pub fn align_modalities(&self, input: &Mat) -> Result<Vec<Mat>> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let vars = self.align_graph(&mut tape, input);
        Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Alignment embedding plus the positional embedding: the tensor routed
    /// and fed to the AMS blocks.
    pub fn modality_embeddings(&self, input: &Mat) -> Result<Vec<Mat>> {
        let pos = self.params.get(self.layout.pos);
        Ok(self.align_modalities(input)?.into_iter().map(|a| a + pos).collect())
    }

    /// Dual attention plus feed-forward of AMS block `block` on a `T x d_e` input.
    pub fn dual_attention(&self, block: usize, x: &Mat) -> Result<Mat> {
        if block >= self.layout.blocks.len() {
            return Err(Error::shape("block index", self.layout.blocks.len(), block));
        }
        self.check_embedding(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.block_graph(&mut tape, block, xv);
        let out = tape.value(out).clone();
        check_finite(&out, "dual attention output")?;
        Ok(out)
    }

    /// Scores every patch size for one modality embedding and keeps the top K.
    pub fn route_topk(&self, embedding: &Mat, noise: Option<&[f64]>) -> Result<RoutingDecision> {
        self.check_embedding(embedding)?;
        if let Some(n) = noise {
            if n.len() != self.config.patch_sizes.len() {
                return Err(Error::shape("router noise", self.config.patch_sizes.len(), n.len()));
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(embedding.clone());
        let mut scores = self.router_scores(&mut tape, x);
        if let Some(n) = noise {
            let nv = tape.constant(Mat::from_shape_vec((1, n.len()), n.to_vec()).expect("noise width"));
            scores = tape.add(scores, nv);
        }
        let score_vals: Vec<f64> = tape.value(scores).iter().copied().collect();
        let gates = top_k_indices(&score_vals, self.config.top_k);
        let sel = tape.gather_cols(scores, &gates);
        let w = tape.softmax_rows(sel, None);
        Ok(RoutingDecision {
            gates,
            weights: tape.value(w).iter().copied().collect(),
            scores: score_vals,
        })
    }

    /// Weighted sum of the selected blocks' outputs; unselected blocks are not run.
    pub fn fuse_aggregate(&self, embedding: &Mat, decision: &RoutingDecision) -> Result<Mat> {
        self.check_embedding(embedding)?;
        decision.validate(self.layout.blocks.len(), self.config.top_k)?;
        let mut out = Mat::zeros(embedding.raw_dim());
        for (&g, &w) in decision.gates.iter().zip(&decision.weights) {
            out.scaled_add(w, &self.dual_attention(g, embedding)?);
        }
        Ok(out)
    }

    /// Representation `h` (and `X_h`) of one `T x D` window, without router noise.
    pub fn represent(&self, input: &Mat) -> Result<Representation> {
        let mut tape = Tape::new();
        let g = self.build_graph(&mut tape, input, Routing::Inference)?;
        Ok(Representation {
            h: tape.value(g.h).row(0).to_owned(),
            x_h: tape.value(g.x_h).clone(),
            decisions: g.decisions,
        })
    }

    /// Linear decoder applied per timestamp: `X_h W + b`, `T x D`.
    pub fn decode(&self, x_h: &Mat) -> Result<Mat> {
        let w = self.params.get(self.layout.dec_w);
        if x_h.ncols() != w.nrows() {
            return Err(Error::shape("decoder input width", w.nrows(), x_h.ncols()));
        }
        Ok(x_h.dot(w) + self.params.get(self.layout.dec_b))
    }

    /// Forecast of the next window.
    pub fn predict(&self, input: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let g = self.build_graph(&mut tape, input, Routing::Inference)?;
        Ok(tape.value(g.pred).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    /// Loads a checkpoint; if `expected` is given the stored config must equal it.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(ckpt, expected)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed: self.config.seed,
            params: self
                .params
                .ids()
                .map(|id| {
                    let v = self.params.get(id);
                    StoredTensor {
                        name: self.params.name(id).to_string(),
                        rows: v.nrows(),
                        cols: v.ncols(),
                        data: v.iter().copied().collect(),
                    }
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        if let Some(cfg) = expected {
            if *cfg != ckpt.config {
                return Err(Error::Checkpoint(
                    "checkpoint config does not match the requested model config".into(),
                ));
            }
        }
        let mut model = Self::new(ckpt.config)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                ckpt.params.len()
            )));
        }
        for (id, stored) in model.params.ids().collect::<Vec<_>>().into_iter().zip(ckpt.params) {
            let target = model.params.get(id);
            if stored.name != model.params.name(id) || (stored.rows, stored.cols) != target.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} ({}x{}) does not match {} {:?}",
                    stored.name,
                    stored.rows,
                    stored.cols,
                    model.params.name(id),
                    target.dim()
                )));
            }
            let value = Mat::from_shape_vec((stored.rows, stored.cols), stored.data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            *model.params.get_mut(id) = value;
        }
        Ok(model)
    }
}

pub const CHECKPOINT_FORMAT: &str = "fusion-pathformer";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Self-describing model file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Vec<StoredTensor>,
}

/// `(T - 1) x T` first-order difference operator.
pub fn difference_operator(t: usize) -> Mat {
    Mat::from_shape_fn((t - 1, t), |(i, j)| {
        if j == i + 1 {
            1.0
        } else if j == i {
            -1.0
        } else {
            0.0
        }
    })
}

fn check_finite(x: &Mat, location: &'static str) -> Result<()> {
    match x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((row, col), _)) => Err(Error::NonFinite { location, row, col }),
        None => Ok(()),
    }
}
