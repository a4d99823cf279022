//! Regular and cross-modal transformer encoders.
//!
//! Both stacks use post-norm sublayers: `x <- norm(x + attn(x, kv))` followed
//! by `x <- norm(x + ffn(x))` with a ReLU feed-forward. The cross-modal stack
//! draws keys and values from the same partner sequence at every layer.

use crate::error::{Error, Result};
use crate::harness::rng::CitRng;
use crate::kernel::layers::{LayerNorm, Linear};
use crate::kernel::ops::positional_embedding;
use crate::kernel::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub use_positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            use_positional: true,
        }
    }
}

impl EncoderConfig {
    /// A stack with zero layers is allowed and acts as the identity (plus positions).
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Invalid(format!("encoder sizes must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Divisibility {
                what: "model dim",
                value: self.d_model,
                divisor: self.heads,
            });
        }
        if self.use_positional && !self.d_model.is_multiple_of(2) {
            return Err(Error::Divisibility {
                what: "model dim",
                value: self.d_model,
                divisor: 2,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut CitRng) -> Result<Self> {
        Ok(Attention {
            query: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            output: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            heads,
        })
    }
}

/// Scaled dot-product attention, one softmax per head over the key axis.
///
/// Queries come from `q_in: [L_q × d]`, keys and values from `kv_in: [L_kv × d]`.
pub fn multi_head_attention(g: &mut Graph<'_>, q_in: Var, kv_in: Var, attn: &Attention) -> Result<Var> {
    let (qs, ks) = (g.shape(q_in).to_vec(), g.shape(kv_in).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("multi_head_attention", format!("queries {qs:?}, keys {ks:?}")));
    }
    let d = qs[1];
    if d % attn.heads != 0 {
        return Err(Error::Divisibility {
            what: "model dim",
            value: d,
            divisor: attn.heads,
        });
    }
    let dh = d / attn.heads;
    let q = attn.query.forward(g, q_in)?;
    let k = attn.key.forward(g, kv_in)?;
    let v = attn.value.forward(g, kv_in)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(attn.heads);
    for h in 0..attn.heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let weights = g.softmax(logits, 1)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    attn.output.forward(g, joined)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: Attention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut CitRng) -> Result<Self> {
        Ok(EncoderLayer {
            attention: Attention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model)?,
            ff_in: Linear::new(store, &format!("{name}.ff1"), cfg.d_model, cfg.d_ff, true, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff2"), cfg.d_ff, cfg.d_model, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model)?,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, kv: Option<Var>) -> Result<Var> {
        let a = multi_head_attention(g, x, kv.unwrap_or(x), &self.attention)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, x)?;
        let h = self.ff_in.forward(g, x)?;
        let h = g.relu(h);
        let f = self.ff_out.forward(g, h)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, x)
    }
}

/// An N-layer encoder; the same parameters serve self- or cross-attention use.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
}

impl EncoderStack {
    pub fn new(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut CitRng) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| EncoderLayer::new(store, &format!("{name}.layer{l}"), &config, rng))
            .collect::<Result<_>>()?;
        Ok(EncoderStack { config, layers })
    }

    fn check_dim(&self, g: &Graph<'_>, x: Var, what: &str) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.config.d_model {
            return Err(Error::shape(
                "encoder",
                format!("{what} {s:?}, expected [L x {}]", self.config.d_model),
            ));
        }
        Ok(())
    }

    fn with_positions(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if !self.config.use_positional {
            return Ok(x);
        }
        let len = g.shape(x)[0];
        let pe = g.constant(positional_embedding(len, self.config.d_model)?);
        g.add(x, pe)
    }

    /// Regular encoder: `F_m [L × d] -> O_m [L × d]`.
    pub fn self_forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.check_dim(g, x, "input")?;
        let mut x = self.with_positions(g, x)?;
        for layer in &self.layers {
            x = layer.forward(g, x, None)?;
        }
        Ok(x)
    }

    /// Cross-modal encoder: queries evolve from `q`, keys/values stay `kv` throughout.
    pub fn cross_forward(&self, g: &mut Graph<'_>, q: Var, kv: Var) -> Result<Var> {
        self.check_dim(g, q, "queries")?;
        self.check_dim(g, kv, "keys/values")?;
        let mut x = self.with_positions(g, q)?;
        let kv = self.with_positions(g, kv)?;
        for layer in &self.layers {
            x = layer.forward(g, x, Some(kv))?;
        }
        Ok(x)
    }
}
