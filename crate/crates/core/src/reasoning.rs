//! Stage two: render the try-on image from the person and the warped cloth.
//!
//! The interactive variant patch-embeds the person, warped cloth and warped
//! mask, relates the three token streams through a three-way interactive
//! transformer, and projects the result back to a one-channel reasoning map.
//! That map is added to the UNet input and gates the rendered person during
//! composition. The plain variant feeds the raw concatenation to the UNet and
//! composes without gating.

use crate::encoders::{EncoderConfig, EncoderStack};
use crate::error::{Error, Result};
use crate::harness::rng::CitRng;
use crate::kernel::layers::{Conv2d, Linear, TemporalConv};
use crate::kernel::{Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningConfig {
    pub height: usize,
    pub width: usize,
    pub person_channels: usize,
    pub patch: usize,
    pub encoder: EncoderConfig,
    pub temporal_kernel: usize,
    /// Channels per UNet level; the depth is the number of entries.
    pub unet_channels: Vec<usize>,
    pub interactive: bool,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        ReasoningConfig {
            height: 64,
            width: 48,
            person_channels: 8,
            patch: 4,
            encoder: EncoderConfig::default(),
            temporal_kernel: 3,
            unet_channels: vec![16, 32, 64],
            interactive: true,
        }
    }
}

impl ReasoningConfig {
    /// 16×16 canvas, `P = 4`, `d = 4`: every path at gradient-check size.
    pub fn tiny() -> Self {
        ReasoningConfig {
            height: 16,
            width: 16,
            encoder: EncoderConfig {
                layers: 1,
                d_model: 4,
                heads: 2,
                d_ff: 8,
                use_positional: true,
            },
            unet_channels: vec![2, 3, 4],
            ..Default::default()
        }
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.unet_channels.is_empty() {
            return Err(Error::Invalid("UNet needs at least one level".into()));
        }
        let stride = 1usize << self.unet_channels.len();
        for (what, v, d) in [
            ("image height", self.height, self.patch),
            ("image width", self.width, self.patch),
            ("image height", self.height, stride),
            ("image width", self.width, stride),
        ] {
            if d == 0 || v % d != 0 {
                return Err(Error::Divisibility {
                    what,
                    value: v,
                    divisor: d,
                });
            }
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Invalid(format!("temporal kernel must be odd, got {}", self.temporal_kernel)));
        }
        Ok(())
    }
}

/// Non-overlapping patches projected to the model dim, then a temporal conv.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub conv: TemporalConv,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &ReasoningConfig, rng: &mut CitRng) -> Result<Self> {
        let d = cfg.encoder.d_model;
        let din = channels * cfg.patch * cfg.patch;
        Ok(PatchEmbed {
            proj: Linear::new(store, &format!("{name}.proj"), din, d, false, rng)?,
            conv: TemporalConv::new(store, &format!("{name}.conv"), cfg.temporal_kernel, d, d, rng)?,
            patch: cfg.patch,
        })
    }

    /// `[C × h × w] -> [T × d]`, tokens in row-major patch order.
    pub fn forward(&self, g: &mut Graph<'_>, img: Var) -> Result<Var> {
        let tokens = g.patchify(img, self.patch)?;
        let x = self.proj.forward(g, tokens)?;
        self.conv.forward(g, x)
    }
}

/// Three regular encoders and six cross encoders over person, cloth and mask streams.
#[derive(Clone, Debug)]
pub struct InteractiveTransformer2 {
    /// Indexed by stream: person, warped cloth, warped mask.
    pub selfs: [EncoderStack; 3],
    /// `crosses[q][i]` attends from stream `q` to the `i`-th other stream in order.
    pub crosses: [[EncoderStack; 2]; 3],
}

impl InteractiveTransformer2 {
    /// `tied` uses one regular and one cross stack everywhere.
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, tied: bool, rng: &mut CitRng) -> Result<Self> {
        const STREAMS: [&str; 3] = ["p", "c", "cm"];
        let mut make = |label: String| EncoderStack::new(store, &format!("{name}.{label}"), cfg, rng);
        let shared = if tied {
            Some((make("self".into())?, make("cross".into())?))
        } else {
            None
        };
        let mut selfs = Vec::with_capacity(3);
        let mut crosses = Vec::with_capacity(3);
        for (q, qn) in STREAMS.iter().enumerate() {
            let mut pair = Vec::with_capacity(2);
            match &shared {
                Some((s, c)) => {
                    selfs.push(s.clone());
                    pair.extend([c.clone(), c.clone()]);
                }
                None => {
                    selfs.push(make(format!("self_{qn}"))?);
                    for kn in STREAMS.iter().enumerate().filter(|&(k, _)| k != q).map(|(_, kn)| kn) {
                        pair.push(make(format!("cross_{qn}_{kn}"))?);
                    }
                }
            }
            crosses.push(<[EncoderStack; 2]>::try_from(pair).unwrap());
        }
        Ok(InteractiveTransformer2 {
            selfs: selfs.try_into().unwrap(),
            crosses: crosses.try_into().unwrap(),
        })
    }

    /// Three `[T × d]` streams to `[T × 6d]`: for each query stream in order,
    /// its crossings against the other two streams in order.
    pub fn forward(&self, g: &mut Graph<'_>, streams: [Var; 3]) -> Result<Var> {
        let t = g.shape(streams[0])[0];
        if streams.iter().any(|&s| g.shape(s)[0] != t) {
            let lens: Vec<usize> = streams.iter().map(|&s| g.shape(s)[0]).collect();
            return Err(Error::shape("interactive_transformer_2", format!("token counts {lens:?}")));
        }
        let mut encoded = Vec::with_capacity(3);
        for (stack, &s) in self.selfs.iter().zip(&streams) {
            encoded.push(stack.self_forward(g, s)?);
        }
        let mut parts = Vec::with_capacity(6);
        for q in 0..3 {
            let others = (0..3).filter(|&k| k != q);
            for (stack, k) in self.crosses[q].iter().zip(others) {
                parts.push(stack.cross_forward(g, encoded[q], encoded[k])?);
            }
        }
        g.concat(&parts, 1)
    }
}

/// Per-token `6d -> P·P` projection laid back onto the image as `[1 × h × w]`.
pub fn reason_map(g: &mut Graph<'_>, x_cross: Var, proj: &Linear, h: usize, w: usize, patch: usize) -> Result<Var> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) || g.shape(x_cross)[0] != (h / patch) * (w / patch) {
        return Err(Error::shape(
            "reason_map",
            format!("{:?} tokens for {h}x{w} with patch {patch}", g.shape(x_cross)),
        ));
    }
    let tokens = proj.forward(g, x_cross)?;
    g.unpatchify(tokens, 1, h, w, patch)
}

/// `concat(p, ĉ, ĉm)` plus the reasoning map broadcast over every channel.
pub fn activate_inputs(g: &mut Graph<'_>, p: Var, cloth: Var, mask: Var, map: Option<Var>) -> Result<Var> {
    let x = g.concat(&[p, cloth, mask], 0)?;
    match map {
        Some(m) => {
            let (sm, sx) = (g.shape(m), g.shape(x));
            if sm.len() != 3 || sm[0] != 1 || sm[1..] != sx[1..] {
                return Err(Error::shape("activate_inputs", format!("map {sm:?} for input {sx:?}")));
            }
            g.add(x, m)
        }
        None => Ok(x),
    }
}

/// Encoder-decoder with skip connections ending in four sigmoid channels.
#[derive(Clone, Debug)]
pub struct UNet {
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub up: Vec<Conv2d>,
    pub head: Conv2d,
}

impl UNet {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, channels: &[usize], rng: &mut CitRng) -> Result<Self> {
        let depth = channels.len();
        if depth == 0 {
            return Err(Error::Invalid("UNet needs at least one level".into()));
        }
        let stem = Conv2d::new(store, &format!("{name}.stem"), c_in, channels[0], 3, 1, 1, rng)?;
        // Level i downsamples channels[i] -> channels[i + 1]; the bottleneck keeps the last width.
        let wider = |i: usize| channels[(i + 1).min(depth - 1)];
        let mut down = Vec::with_capacity(depth);
        for (i, &c) in channels.iter().enumerate() {
            down.push(Conv2d::new(store, &format!("{name}.down{i}"), c, wider(i), 3, 2, 1, rng)?);
        }
        // Decoder level i restores the resolution of skip i.
        let mut up = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            up.push(Conv2d::new(
                store,
                &format!("{name}.up{i}"),
                wider(i) + channels[i],
                channels[i],
                3,
                1,
                1,
                rng,
            )?);
        }
        let head = Conv2d::new(store, &format!("{name}.head"), channels[0], 4, 1, 1, 0, rng)?;
        Ok(UNet { stem, down, up, head })
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    /// `[C_in × h × w] -> (I_R [3 × h × w], M_o [1 × h × w])`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let stride = 1usize << self.depth();
        if s.len() != 3 {
            return Err(Error::shape("unet_forward", format!("{s:?}")));
        }
        for (what, v) in [("image height", s[1]), ("image width", s[2])] {
            if v % stride != 0 {
                return Err(Error::Divisibility {
                    what,
                    value: v,
                    divisor: stride,
                });
            }
        }
        let h = self.stem.forward(g, x)?;
        let mut h = g.relu(h);
        let mut skips = Vec::with_capacity(self.depth());
        for conv in &self.down {
            skips.push(h);
            let y = conv.forward(g, h)?;
            h = g.relu(y);
        }
        for conv in &self.up {
            let skip = skips.pop().unwrap();
            let up = g.upsample2x(h)?;
            let cat = g.concat(&[up, skip], 0)?;
            let y = conv.forward(g, cat)?;
            h = g.relu(y);
        }
        let out = self.head.forward(g, h)?;
        let out = g.sigmoid(out);
        let rendered = g.narrow(out, 0, 0, 3)?;
        let mask = g.narrow(out, 0, 3, 1)?;
        Ok((rendered, mask))
    }
}

/// `I_o = M_o·ĉ + (1 − M_o)·sigmoid(X)·I_R`; without a map the gate is omitted.
pub fn compose(g: &mut Graph<'_>, mask: Var, cloth: Var, rendered: Var, map: Option<Var>) -> Result<Var> {
    let gated = match map {
        Some(m) => {
            let gate = g.sigmoid(m);
            g.mul(gate, rendered)?
        }
        None => rendered,
    };
    let keep = g.mul(mask, cloth)?;
    let inv = g.rsub_scalar(1.0, mask);
    let fill = g.mul(inv, gated)?;
    g.add(keep, fill)
}

#[derive(Clone, Debug)]
pub struct ReasoningInteraction {
    pub embed: [PatchEmbed; 3],
    pub transformer: InteractiveTransformer2,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct ReasoningModel {
    pub config: ReasoningConfig,
    pub interaction: Option<ReasoningInteraction>,
    pub unet: UNet,
}

#[derive(Clone, Copy, Debug)]
pub struct TryOnOutput {
    pub rendered: Var,
    pub mask: Var,
    pub reason_map: Option<Var>,
    pub image: Var,
}

impl ReasoningModel {
    pub fn new(store: &mut ParamStore, config: ReasoningConfig, rng: &mut CitRng) -> Result<Self> {
        Self::build(store, config, false, rng)
    }

    pub fn new_tied(store: &mut ParamStore, config: ReasoningConfig, rng: &mut CitRng) -> Result<Self> {
        Self::build(store, config, true, rng)
    }

    fn build(store: &mut ParamStore, config: ReasoningConfig, tied: bool, rng: &mut CitRng) -> Result<Self> {
        config.validate()?;
        let interaction = if config.interactive {
            let d = config.encoder.d_model;
            let pp = config.patch * config.patch;
            Some(ReasoningInteraction {
                embed: [
                    PatchEmbed::new(store, "reasoning.embed_p", config.person_channels, &config, rng)?,
                    PatchEmbed::new(store, "reasoning.embed_c", 3, &config, rng)?,
                    PatchEmbed::new(store, "reasoning.embed_cm", 1, &config, rng)?,
                ],
                transformer: InteractiveTransformer2::new(store, "reasoning.it2", config.encoder, tied, rng)?,
                proj: Linear::new(store, "reasoning.map", 6 * d, pp, true, rng)?,
            })
        } else {
            None
        };
        let c_in = config.person_channels + 4;
        let unet = UNet::new(store, "reasoning.unet", c_in, &config.unet_channels, rng)?;
        Ok(ReasoningModel {
            config,
            interaction,
            unet,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: Var, cloth: Var, mask: Var) -> Result<TryOnOutput> {
        let map = match &self.interaction {
            Some(it) => {
                let streams = [
                    it.embed[0].forward(g, p)?,
                    it.embed[1].forward(g, cloth)?,
                    it.embed[2].forward(g, mask)?,
                ];
                let cross = it.transformer.forward(g, streams)?;
                let c = &self.config;
                Some(reason_map(g, cross, &it.proj, c.height, c.width, c.patch)?)
            }
            None => None,
        };
        let input = activate_inputs(g, p, cloth, mask, map)?;
        let (rendered, out_mask) = self.unet.forward(g, input)?;
        let image = compose(g, out_mask, cloth, rendered, map)?;
        Ok(TryOnOutput {
            rendered,
            mask: out_mask,
            reason_map: map,
            image,
        })
    }
}
