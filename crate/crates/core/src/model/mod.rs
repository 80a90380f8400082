//! The two-decoder transformer: a context encoder, a masked window encoder,
//! and twin decoders, run in two phases where the second is conditioned on
//! the first phase's reconstruction error.

mod checkpoint;
mod layers;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use layers::{attention, multi_head_att, position_encode, positional_encoding};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use layers::{AttentionIx, HeadIx, LinearIx, NormIx};

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// √(per-head key width)
    HeadDim,
    /// √m, the number of data dimensions
    DataDim,
}

/// Which encoder input the focus score is concatenated with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocusTarget {
    Context,
    Window,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Data dimensions.
    pub m: usize,
    /// Window length.
    pub k: usize,
    /// Context cap.
    pub l_ctx: usize,
    pub n_heads: usize,
    /// Internal width; must equal 2m (input concatenated with the focus score).
    pub d_model: usize,
    pub ff_hidden: usize,
    pub n_enc_layers: usize,
    /// Dense layers per feed-forward unit.
    pub ff_layers: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub scale_mode: ScaleMode,
    pub focus_target: FocusTarget,
    /// Feed the phase-1 deviation back in phase 2; off forces a zero focus.
    pub self_condition: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(1)
    }
}

impl ModelConfig {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            k: 10,
            l_ctx: 100,
            n_heads: m,
            d_model: 2 * m,
            ff_hidden: 64,
            n_enc_layers: 1,
            ff_layers: 2,
            dropout: 0.1,
            activation: Activation::Relu,
            scale_mode: ScaleMode::HeadDim,
            focus_target: FocusTarget::Context,
            self_condition: true,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.m == 0 || self.k == 0 || self.l_ctx < self.k {
            return bad(format!(
                "need m >= 1 and 1 <= K <= L_ctx (m={}, K={}, L_ctx={})",
                self.m, self.k, self.l_ctx
            ));
        }
        if self.d_model != 2 * self.m {
            return bad(format!(
                "d_model must be 2m = {}, got {}",
                2 * self.m,
                self.d_model
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.ff_layers == 0 || self.ff_hidden == 0 || self.n_enc_layers == 0 {
            return bad("layer counts and hidden width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn attention_scale(&self) -> f64 {
        match self.scale_mode {
            ScaleMode::HeadDim => (self.head_dim() as f64).sqrt(),
            ScaleMode::DataDim => (self.m as f64).sqrt(),
        }
    }

    fn window_input_width(&self) -> usize {
        match self.focus_target {
            FocusTarget::Context => self.m,
            FocusTarget::Window => 2 * self.m,
        }
    }
}

/// Which parameter group a path belongs to, for routing the two losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Decoder1,
    Decoder2,
    Shared,
}

pub fn param_group(path: &str) -> ParamGroup {
    if path.starts_with("decoder1.") {
        ParamGroup::Decoder1
    } else if path.starts_with("decoder2.") {
        ParamGroup::Decoder2
    } else {
        ParamGroup::Shared
    }
}

#[derive(Clone, Debug)]
struct EncoderLayerIx {
    attn: AttentionIx,
    norm1: NormIx,
    ff: Vec<LinearIx>,
    norm2: NormIx,
}

#[derive(Clone, Debug)]
struct WindowLayerIx {
    self_attn: AttentionIx,
    norm1: NormIx,
    cross_attn: AttentionIx,
    norm2: NormIx,
}

#[derive(Clone, Debug)]
struct Layout {
    context: Vec<EncoderLayerIx>,
    embed: LinearIx,
    window: Vec<WindowLayerIx>,
    decoder1: Vec<LinearIx>,
    decoder2: Vec<LinearIx>,
}

/// Builds parameters in a fixed order and records their paths.
struct Builder<'a, R: Rng> {
    store: ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn uniform(&mut self, path: String, fan_in: usize, shape: Vec<usize>) -> Result<String> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.store.insert(path.clone(), Tensor::new(shape, data)?)?;
        Ok(path)
    }

    fn filled(&mut self, path: String, n: usize, value: f64) -> Result<String> {
        self.store
            .insert(path.clone(), Tensor::vector(vec![value; n])?)?;
        Ok(path)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.uniform(format!("{prefix}.w"), fan_in, vec![fan_in, fan_out])?;
        self.filled(format!("{prefix}.b"), fan_out, 0.0)?;
        Ok(())
    }

    fn norm(&mut self, prefix: &str, width: usize) -> Result<()> {
        self.filled(format!("{prefix}.gain"), width, 1.0)?;
        self.filled(format!("{prefix}.bias"), width, 0.0)?;
        Ok(())
    }

    fn attention(&mut self, prefix: &str, cfg: &ModelConfig) -> Result<()> {
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        for h in 0..cfg.n_heads {
            let hp = format!("{prefix}.head{h}");
            self.linear(&format!("{hp}.q"), d, dh)?;
            self.uniform(format!("{hp}.k.w"), d, vec![d, dh])?;
            self.linear(&format!("{hp}.v"), d, dh)?;
        }
        self.linear(&format!("{prefix}.out"), d, d)
    }

    fn feed_forward(&mut self, prefix: &str, cfg: &ModelConfig, out: usize) -> Result<()> {
        let widths = ff_widths(cfg, out);
        for (j, pair) in widths.windows(2).enumerate() {
            self.linear(&format!("{prefix}.ff{j}"), pair[0], pair[1])?;
        }
        Ok(())
    }
}

fn ff_widths(cfg: &ModelConfig, out: usize) -> Vec<usize> {
    let mut w = vec![cfg.d_model];
    w.extend(std::iter::repeat_n(cfg.ff_hidden, cfg.ff_layers - 1));
    w.push(out);
    w
}

fn resolve(store: &ParamStore, path: &str) -> Result<usize> {
    store
        .index_of(path)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {path}")))
}

fn linear_ix(store: &ParamStore, prefix: &str) -> Result<LinearIx> {
    Ok(LinearIx {
        w: resolve(store, &format!("{prefix}.w"))?,
        b: resolve(store, &format!("{prefix}.b"))?,
    })
}

fn norm_ix(store: &ParamStore, prefix: &str) -> Result<NormIx> {
    Ok(NormIx {
        gain: resolve(store, &format!("{prefix}.gain"))?,
        bias: resolve(store, &format!("{prefix}.bias"))?,
    })
}

fn attention_ix(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<AttentionIx> {
    let heads = (0..cfg.n_heads)
        .map(|h| {
            let hp = format!("{prefix}.head{h}");
            Ok(HeadIx {
                query: linear_ix(store, &format!("{hp}.q"))?,
                key: resolve(store, &format!("{hp}.k.w"))?,
                value: linear_ix(store, &format!("{hp}.v"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AttentionIx {
        heads,
        out: linear_ix(store, &format!("{prefix}.out"))?,
    })
}

fn ff_ix(store: &ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Vec<LinearIx>> {
    (0..cfg.ff_layers)
        .map(|j| linear_ix(store, &format!("{prefix}.ff{j}")))
        .collect()
}

impl Layout {
    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let context = (0..cfg.n_enc_layers)
            .map(|l| {
                let p = format!("encoder1.layer{l}");
                Ok(EncoderLayerIx {
                    attn: attention_ix(store, &format!("{p}.attn"), cfg)?,
                    norm1: norm_ix(store, &format!("{p}.norm1"))?,
                    ff: ff_ix(store, &p, cfg)?,
                    norm2: norm_ix(store, &format!("{p}.norm2"))?,
                })
            })
            .collect::<Result<_>>()?;
        let window = (0..cfg.n_enc_layers)
            .map(|l| {
                let p = format!("window_encoder.layer{l}");
                Ok(WindowLayerIx {
                    self_attn: attention_ix(store, &format!("{p}.self_attn"), cfg)?,
                    norm1: norm_ix(store, &format!("{p}.norm1"))?,
                    cross_attn: attention_ix(store, &format!("{p}.cross_attn"), cfg)?,
                    norm2: norm_ix(store, &format!("{p}.norm2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            context,
            embed: linear_ix(store, "embed")?,
            window,
            decoder1: ff_ix(store, "decoder1", cfg)?,
            decoder2: ff_ix(store, "decoder2", cfg)?,
        })
    }
}

/// Configuration plus every learnable parameter.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Graph handles produced by one two-phase forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub window: Var,
    pub o1: Var,
    pub o2: Var,
    pub o2_hat: Var,
    pub focus: Var,
    /// Phase-2 window self-attention weights, one K×K matrix per head.
    pub window_attention: Vec<Var>,
    /// Phase-2 cross-attention weights, one K×L matrix per head.
    pub cross_attention: Vec<Var>,
}

/// Head-averaged attention maps retained for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub window_self: Vec<Tensor>,
    pub cross: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoPhaseOutput {
    pub o1: Tensor,
    pub o2: Tensor,
    pub o2_hat: Tensor,
    pub focus: Tensor,
    pub attention_maps: Option<AttentionMaps>,
}

fn build_params<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    for l in 0..config.n_enc_layers {
        let p = format!("encoder1.layer{l}");
        b.attention(&format!("{p}.attn"), config)?;
        b.norm(&format!("{p}.norm1"), config.d_model)?;
        b.feed_forward(&p, config, config.d_model)?;
        b.norm(&format!("{p}.norm2"), config.d_model)?;
    }
    b.linear("embed", config.window_input_width(), config.d_model)?;
    for l in 0..config.n_enc_layers {
        let p = format!("window_encoder.layer{l}");
        b.attention(&format!("{p}.self_attn"), config)?;
        b.norm(&format!("{p}.norm1"), config.d_model)?;
        b.attention(&format!("{p}.cross_attn"), config)?;
        b.norm(&format!("{p}.norm2"), config.d_model)?;
    }
    b.feed_forward("decoder1", config, config.m)?;
    b.feed_forward("decoder2", config, config.m)?;
    Ok(b.store)
}

impl ModelState {
    /// Fresh model: weights uniform in ±1/√fan_in, zero biases, unit
    /// layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config, &mut rng_for(seed, "model-init"))?;
        Self::from_params(config, params)
    }

    /// Wraps existing parameters, checking them against the configuration.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = build_params(&config, &mut rng_for(0, "layout"))?;
        if !reference.same_layout(&params) {
            return Err(Error::Checkpoint(
                "parameter shapes do not match the model configuration".into(),
            ));
        }
        let layout = Layout::resolve(&params, &config)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Parameters as differentiable leaves, in store order.
    pub fn bind(&self, g: &Graph) -> Vec<Var> {
        self.params.bind(g)
    }

    /// Parameters as constants; nothing downstream records backward state.
    pub fn bind_frozen(&self, g: &Graph) -> Vec<Var> {
        self.params.iter().map(|(_, t)| g.constant(t)).collect()
    }

    fn feed_forward<R: Rng + ?Sized>(
        &self,
        g: &Graph,
        params: &[Var],
        layers: &[LinearIx],
        x: Var,
        dropout: Option<(bool, &mut R)>,
    ) -> Result<Var> {
        let mut h = x;
        let mut dropout = dropout;
        for (j, lin) in layers.iter().enumerate() {
            h = lin.apply(g, params, h)?;
            if j + 1 < layers.len() {
                h = match self.config.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Sigmoid => g.sigmoid(h),
                };
                if let Some((training, rng)) = dropout.as_mut() {
                    h = g.dropout(h, self.config.dropout, *training, &mut **rng);
                }
            }
        }
        Ok(h)
    }

    /// Context encoder. `context` is L×m row-major, `focus` a K×m node. The
    /// focus is aligned with the last rows of the context (zero-padded above,
    /// or cut to its last L rows when the context is shorter than K).
    pub fn encode_context<R: Rng + ?Sized>(
        &self,
        g: &Graph,
        params: &[Var],
        context: &[f64],
        focus: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = &self.config;
        if context.is_empty() || !context.len().is_multiple_of(cfg.m) {
            return Err(Error::DimensionMismatch {
                expected: cfg.m,
                found: context.len(),
            });
        }
        let rows = context.len() / cfg.m;
        if g.shape(focus) != (cfg.k, cfg.m) {
            let (r, c) = g.shape(focus);
            return Err(Error::ShapeMismatch(format!(
                "focus is {r}x{c}, expected {}x{}",
                cfg.k, cfg.m
            )));
        }
        let c = g.constant_matrix(rows, cfg.m, context.to_vec());
        let side = match cfg.focus_target {
            FocusTarget::Context if rows >= cfg.k => g.pad_rows_top(focus, rows - cfg.k),
            FocusTarget::Context => g.slice_rows(focus, cfg.k - rows, rows)?,
            FocusTarget::Window => g.constant_matrix(rows, cfg.m, vec![0.0; rows * cfg.m]),
        };
        let mut x = position_encode(g, g.concat_cols(c, side)?)?;
        let scale = cfg.attention_scale();
        for layer in &self.layout.context {
            let (a, _) = multi_head_att(g, params, &layer.attn, x, x, scale, false)?;
            let a = g.dropout(a, cfg.dropout, training, rng);
            let x1 = layer.norm1.apply(g, params, g.add(x, a)?, cfg.ln_eps)?;
            let f = self.feed_forward(g, params, &layer.ff, x1, Some((training, &mut *rng)))?;
            let f = g.dropout(f, cfg.dropout, training, rng);
            x = layer.norm2.apply(g, params, g.add(x1, f)?, cfg.ln_eps)?;
        }
        Ok(x)
    }

    /// Window encoder: embedding, masked self-attention, then cross-attention
    /// with the window as query and the context encoding as keys and values.
    /// Returns the encoding plus the per-head self- and cross-attention weights.
    pub fn encode_window<R: Rng + ?Sized>(
        &self,
        g: &Graph,
        params: &[Var],
        window: Var,
        focus: Var,
        ctx_encoding: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let cfg = &self.config;
        if g.shape(window) != (cfg.k, cfg.m) {
            let (r, c) = g.shape(window);
            return Err(Error::ShapeMismatch(format!(
                "window is {r}x{c}, expected {}x{}",
                cfg.k, cfg.m
            )));
        }
        if g.shape(ctx_encoding).1 != cfg.d_model {
            return Err(Error::DimensionMismatch {
                expected: cfg.d_model,
                found: g.shape(ctx_encoding).1,
            });
        }
        let input = match cfg.focus_target {
            FocusTarget::Context => window,
            FocusTarget::Window => g.concat_cols(window, focus)?,
        };
        let mut x = position_encode(g, self.layout.embed.apply(g, params, input)?)?;
        let scale = cfg.attention_scale();
        let (mut self_w, mut cross_w) = (Vec::new(), Vec::new());
        for layer in &self.layout.window {
            let (s, w) = multi_head_att(g, params, &layer.self_attn, x, x, scale, true)?;
            self_w = w;
            let s = g.dropout(s, cfg.dropout, training, rng);
            let x2 = layer.norm1.apply(g, params, g.add(x, s)?, cfg.ln_eps)?;
            let (c, w) =
                multi_head_att(g, params, &layer.cross_attn, x2, ctx_encoding, scale, false)?;
            cross_w = w;
            let c = g.dropout(c, cfg.dropout, training, rng);
            x = layer.norm2.apply(g, params, g.add(x2, c)?, cfg.ln_eps)?;
        }
        Ok((x, self_w, cross_w))
    }

    /// Decoder `which` ∈ {1, 2}: feed-forward per timestep, then sigmoid.
    pub fn decode(&self, g: &Graph, params: &[Var], encoded: Var, which: u8) -> Result<Var> {
        let layers = match which {
            1 => &self.layout.decoder1,
            2 => &self.layout.decoder2,
            _ => return Err(Error::InvalidConfig(format!("no decoder {which}"))),
        };
        let h = self.feed_forward::<rand_chacha::ChaCha8Rng>(g, params, layers, encoded, None)?;
        Ok(g.sigmoid(h))
    }

    /// Phase 1 with a zero focus yields O1 and O2; phase 2 re-encodes with the
    /// squared deviation (O1 − W)∘(O1 − W) as focus and yields Ô2 from
    /// decoder 2. Gradients flow through the focus.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &Graph,
        params: &[Var],
        window: &[f64],
        context: &[f64],
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        if window.len() != cfg.k * cfg.m {
            return Err(Error::ShapeMismatch(format!(
                "window has {} values, expected {}",
                window.len(),
                cfg.k * cfg.m
            )));
        }
        let w = g.constant_matrix(cfg.k, cfg.m, window.to_vec());
        let zero = g.constant_matrix(cfg.k, cfg.m, vec![0.0; cfg.k * cfg.m]);

        let ctx1 = self.encode_context(g, params, context, zero, training, rng)?;
        let (enc1, _, _) = self.encode_window(g, params, w, zero, ctx1, training, rng)?;
        let o1 = self.decode(g, params, enc1, 1)?;
        let o2 = self.decode(g, params, enc1, 2)?;

        let focus = if cfg.self_condition {
            let d = g.sub(o1, w)?;
            g.mul(d, d)?
        } else {
            zero
        };
        let ctx2 = self.encode_context(g, params, context, focus, training, rng)?;
        let (enc2, window_attention, cross_attention) =
            self.encode_window(g, params, w, focus, ctx2, training, rng)?;
        let o2_hat = self.decode(g, params, enc2, 2)?;
        Ok(ForwardVars {
            window: w,
            o1,
            o2,
            o2_hat,
            focus,
            window_attention,
            cross_attention,
        })
    }

    /// Inference pass (dropout off, no gradient state).
    pub fn infer(&self, window: &[f64], context: &[f64], inspect: bool) -> Result<TwoPhaseOutput> {
        let g = Graph::new();
        let params = self.bind_frozen(&g);
        let mut rng = rng_for(0, "inference");
        let v = self.forward(&g, &params, window, context, false, &mut rng)?;
        let attention_maps = inspect.then(|| AttentionMaps {
            window_self: v.window_attention.iter().map(|&w| g.value(w)).collect(),
            cross: v.cross_attention.iter().map(|&w| g.value(w)).collect(),
        });
        Ok(TwoPhaseOutput {
            o1: g.value(v.o1),
            o2: g.value(v.o2),
            o2_hat: g.value(v.o2_hat),
            focus: g.value(v.focus),
            attention_maps,
        })
    }
}

/// Average of equally shaped matrices.
pub fn mean_of(maps: &[Tensor]) -> Option<Tensor> {
    let first = maps.first()?;
    let mut acc = vec![0.0; first.numel()];
    for t in maps {
        acc.iter_mut().zip(t.data()).for_each(|(a, v)| *a += v);
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::new(first.shape().to_vec(), acc).ok()
}

#[cfg(test)]
mod tests;
