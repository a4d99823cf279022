//! Stage one: regress TPS offsets that warp the in-shop cloth onto the person.
//!
//! Person and cloth pass through independent strided conv extractors, become
//! token sequences, interact through paired self- and cross-encoders, and the
//! resulting attention map strengthens both feature maps before a normalized
//! correlation feeds the θ regressor. The plain variant skips the transformer
//! and strengthening and correlates the raw features.

use crate::encoders::{EncoderConfig, EncoderStack};
use crate::error::{Error, Result};
use crate::harness::rng::CitRng;
use crate::kernel::layers::{Conv2d, Linear, TemporalConv};
use crate::kernel::ops::conv_out_size;
use crate::kernel::{Graph, ParamStore, Var};
use crate::tps::TpsBasis;

/// Guards zero feature columns in the correlation normalization.
pub const CORRELATION_EPS: f64 = 1e-6;

/// Shrinks the initial θ regressor so training starts near the identity warp.
const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingConfig {
    pub height: usize,
    pub width: usize,
    pub person_channels: usize,
    /// Cloth image plus its mask.
    pub cloth_channels: usize,
    /// Output channels of each stride-2 extractor stage.
    pub feature_channels: Vec<usize>,
    pub encoder: EncoderConfig,
    pub temporal_kernel: usize,
    pub grid_k: usize,
    pub theta_max: f64,
    pub head_channels: usize,
    /// Interactive transformer and strengthened attention, or plain correlation.
    pub interactive: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig {
            height: 64,
            width: 48,
            person_channels: 8,
            cloth_channels: 4,
            feature_channels: vec![16, 32, 64, 64],
            encoder: EncoderConfig::default(),
            temporal_kernel: 3,
            grid_k: 5,
            theta_max: 0.4,
            head_channels: 32,
            interactive: true,
        }
    }
}

impl MatchingConfig {
    /// Smallest configuration that still exercises every path: 16×12 input, 4×3 features.
    pub fn tiny() -> Self {
        MatchingConfig {
            height: 16,
            width: 12,
            feature_channels: vec![4, 4],
            encoder: EncoderConfig {
                layers: 1,
                d_model: 4,
                heads: 2,
                d_ff: 8,
                use_positional: true,
            },
            grid_k: 3,
            head_channels: 4,
            ..Default::default()
        }
    }

    pub fn feature_size(&self) -> Result<(usize, usize)> {
        let stride = 1usize << self.feature_channels.len();
        for (what, v) in [("image height", self.height), ("image width", self.width)] {
            if v % stride != 0 {
                return Err(Error::Divisibility {
                    what,
                    value: v,
                    divisor: stride,
                });
            }
        }
        Ok((self.height / stride, self.width / stride))
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_channels.is_empty() {
            return Err(Error::Invalid("extractor needs at least one stage".into()));
        }
        self.feature_size()?;
        self.encoder.validate()?;
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Invalid(format!("temporal kernel must be odd, got {}", self.temporal_kernel)));
        }
        if self.grid_k < 2 {
            return Err(Error::Invalid(format!("control grid needs K >= 2, got {}", self.grid_k)));
        }
        if self.theta_max.is_nan() || self.theta_max <= 0.0 {
            return Err(Error::Invalid(format!("theta_max must be positive, got {}", self.theta_max)));
        }
        Ok(())
    }

    pub fn theta_len(&self) -> usize {
        2 * self.grid_k * self.grid_k
    }
}

/// Strided conv+ReLU pyramid.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub stages: Vec<Conv2d>,
}

impl Extractor {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, channels: &[usize], rng: &mut CitRng) -> Result<Self> {
        let mut stages = Vec::with_capacity(channels.len());
        let mut prev = c_in;
        for (i, &c) in channels.iter().enumerate() {
            stages.push(Conv2d::new(store, &format!("{name}.conv{i}"), prev, c, 3, 2, 1, rng)?);
            prev = c;
        }
        Ok(Extractor { stages })
    }

    /// `[C_in × h × w] -> [C × h/2^S × w/2^S]`.
    pub fn forward(&self, g: &mut Graph<'_>, img: Var) -> Result<Var> {
        let s = g.shape(img).to_vec();
        let stride = 1usize << self.stages.len();
        if s.len() != 3 {
            return Err(Error::shape("extract_features", format!("{s:?}")));
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
        let mut x = img;
        for stage in &self.stages {
            x = stage.forward(g, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }
}

/// Flattens `[C × H × W]` to `H·W` tokens of dim `C`, then mixes neighbours with `conv`.
pub fn to_sequence(g: &mut Graph<'_>, x: Var, conv: &TemporalConv) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("to_sequence", format!("{s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let tokens = g.transpose(flat)?;
    conv.forward(g, tokens)
}

/// Two regular encoders followed by two cross encoders, one per direction.
#[derive(Clone, Debug)]
pub struct InteractiveTransformer1 {
    pub self_person: EncoderStack,
    pub self_cloth: EncoderStack,
    pub cross_person: EncoderStack,
    pub cross_cloth: EncoderStack,
}

impl InteractiveTransformer1 {
    /// `tied` shares one self stack and one cross stack between the streams.
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, tied: bool, rng: &mut CitRng) -> Result<Self> {
        let self_person = EncoderStack::new(store, &format!("{name}.self_p"), cfg, rng)?;
        let self_cloth = if tied {
            self_person.clone()
        } else {
            EncoderStack::new(store, &format!("{name}.self_c"), cfg, rng)?
        };
        let cross_person = EncoderStack::new(store, &format!("{name}.cross_pc"), cfg, rng)?;
        let cross_cloth = if tied {
            cross_person.clone()
        } else {
            EncoderStack::new(store, &format!("{name}.cross_cp"), cfg, rng)?
        };
        Ok(InteractiveTransformer1 {
            self_person,
            self_cloth,
            cross_person,
            cross_cloth,
        })
    }

    /// `F_p, F_c: [L × d] -> [L × 2d]`, person-query half first.
    pub fn forward(&self, g: &mut Graph<'_>, f_p: Var, f_c: Var) -> Result<Var> {
        let (lp, lc) = (g.shape(f_p)[0], g.shape(f_c)[0]);
        if lp != lc {
            return Err(Error::shape("interactive_transformer_1", format!("lengths {lp} and {lc}")));
        }
        let x_p = self.self_person.self_forward(g, f_p)?;
        let x_c = self.self_cloth.self_forward(g, f_c)?;
        let p_to_c = self.cross_person.cross_forward(g, x_p, x_c)?;
        let c_to_p = self.cross_cloth.cross_forward(g, x_c, x_p)?;
        g.concat(&[p_to_c, c_to_p], 1)
    }
}

/// `X_att = sigmoid(proj(X_cross1))` laid out as `[C × H × W]`; returns `(X_att, X_p + X_p·X_att, X_c + X_c·X_att)`.
pub fn global_strengthen(
    g: &mut Graph<'_>,
    x_p: Var,
    x_c: Var,
    x_cross: Var,
    proj: &Linear,
) -> Result<(Var, Var, Var)> {
    let (sp, sc) = (g.shape(x_p).to_vec(), g.shape(x_c).to_vec());
    if sp.len() != 3 || sp != sc {
        return Err(Error::shape("global_strengthen", format!("{sp:?} vs {sc:?}")));
    }
    if g.shape(x_cross)[0] != sp[1] * sp[2] {
        return Err(Error::shape(
            "global_strengthen",
            format!("{} tokens for a {}x{} map", g.shape(x_cross)[0], sp[1], sp[2]),
        ));
    }
    let logits = proj.forward(g, x_cross)?;
    let att = g.sigmoid(logits);
    let att = g.transpose(att)?;
    let att = g.reshape(att, &sp)?;
    let strengthen = |g: &mut Graph<'_>, x: Var| -> Result<Var> {
        let gated = g.mul(x, att)?;
        g.add(x, gated)
    };
    let p = strengthen(g, x_p)?;
    let c = strengthen(g, x_c)?;
    Ok((att, p, c))
}

/// `[C × H × W]` pair -> `[(H·W) × H × W]`: channel = person position, spatial = cloth position.
pub fn correlation(g: &mut Graph<'_>, x_p: Var, x_c: Var) -> Result<Var> {
    let (sp, sc) = (g.shape(x_p).to_vec(), g.shape(x_c).to_vec());
    if sp.len() != 3 || sp != sc {
        return Err(Error::shape("correlation", format!("{sp:?} vs {sc:?}")));
    }
    let (c, h, w) = (sp[0], sp[1], sp[2]);
    let a_p = g.reshape(x_p, &[c, h * w])?;
    let a_p = g.l2_normalize_columns(a_p, CORRELATION_EPS)?;
    let a_c = g.reshape(x_c, &[c, h * w])?;
    let a_c = g.l2_normalize_columns(a_c, CORRELATION_EPS)?;
    let a_pt = g.transpose(a_p)?;
    let corr = g.matmul(a_pt, a_c)?;
    g.reshape(corr, &[h * w, h, w])
}

/// Two stride-2 conv+ReLU stages, flatten, affine map to `2K²`, then `θ_max·tanh`.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc: Linear,
    pub theta_max: f64,
}

impl RegressionHead {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &MatchingConfig, rng: &mut CitRng) -> Result<Self> {
        let (fh, fw) = cfg.feature_size()?;
        let l = fh * fw;
        let ch = cfg.head_channels;
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), l, ch, 3, 2, 1, rng)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), ch, ch, 3, 2, 1, rng)?;
        let (h2, w2) = (
            conv_out_size(conv_out_size(fh, 3, 2, 1)?, 3, 2, 1)?,
            conv_out_size(conv_out_size(fw, 3, 2, 1)?, 3, 2, 1)?,
        );
        let fc = Linear::new(store, &format!("{name}.fc"), ch * h2 * w2, cfg.theta_len(), true, rng)?;
        for id in [Some(fc.weight), fc.bias].into_iter().flatten() {
            store.value_mut(id).scale_assign(HEAD_INIT_SCALE);
            store.value_mut(id).round_to_f32();
        }
        Ok(RegressionHead {
            conv1,
            conv2,
            fc,
            theta_max: cfg.theta_max,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, corr: Var) -> Result<Var> {
        let x = self.conv1.forward(g, corr)?;
        let x = g.relu(x);
        let x = self.conv2.forward(g, x)?;
        let x = g.relu(x);
        let n = g.value(x).len();
        let flat = g.reshape(x, &[1, n])?;
        let y = self.fc.forward(g, flat)?;
        let y = g.tanh(y);
        let y = g.scale(y, self.theta_max);
        let len = g.value(y).len();
        g.reshape(y, &[len])
    }
}

/// Transformer path present only in the interactive variant.
#[derive(Clone, Debug)]
pub struct MatchingInteraction {
    pub seq_person: TemporalConv,
    pub seq_cloth: TemporalConv,
    pub transformer: InteractiveTransformer1,
    pub attention_proj: Linear,
}

#[derive(Clone, Debug)]
pub struct MatchingModel {
    pub config: MatchingConfig,
    pub person: Extractor,
    pub cloth: Extractor,
    pub interaction: Option<MatchingInteraction>,
    pub head: RegressionHead,
    pub basis: TpsBasis,
}

/// Everything stage one produces for one sample.
#[derive(Clone, Copy, Debug)]
pub struct MatchingOutput {
    pub theta: Var,
    pub grid: Var,
    pub warped_cloth: Var,
    pub warped_mask: Var,
    pub correlation: Var,
}

impl MatchingModel {
    pub fn new(store: &mut ParamStore, config: MatchingConfig, rng: &mut CitRng) -> Result<Self> {
        Self::build(store, config, false, rng)
    }

    /// Shares encoder weights across streams so symmetric inputs give symmetric outputs.
    pub fn new_tied(store: &mut ParamStore, config: MatchingConfig, rng: &mut CitRng) -> Result<Self> {
        Self::build(store, config, true, rng)
    }

    fn build(store: &mut ParamStore, config: MatchingConfig, tied: bool, rng: &mut CitRng) -> Result<Self> {
        config.validate()?;
        let fc = &config.feature_channels;
        let c = *fc.last().unwrap();
        let person = Extractor::new(store, "matching.person", config.person_channels, fc, rng)?;
        let cloth = Extractor::new(store, "matching.cloth", config.cloth_channels, fc, rng)?;
        let interaction = if config.interactive {
            let d = config.encoder.d_model;
            let k = config.temporal_kernel;
            Some(MatchingInteraction {
                seq_person: TemporalConv::new(store, "matching.seq_p", k, c, d, rng)?,
                seq_cloth: TemporalConv::new(store, "matching.seq_c", k, c, d, rng)?,
                transformer: InteractiveTransformer1::new(store, "matching.it1", config.encoder, tied, rng)?,
                attention_proj: Linear::new(store, "matching.att", 2 * d, c, true, rng)?,
            })
        } else {
            None
        };
        let head = RegressionHead::new(store, "matching.head", &config, rng)?;
        let basis = TpsBasis::new(config.grid_k, config.height, config.width)?;
        Ok(MatchingModel {
            config,
            person,
            cloth,
            interaction,
            head,
            basis,
        })
    }

    /// Correlation map of person `p: [C_p × h × w]` and `cloth_in: [C_c × h × w]`.
    pub fn correlate(&self, g: &mut Graph<'_>, p: Var, cloth_in: Var) -> Result<Var> {
        let x_p = self.person.forward(g, p)?;
        let x_c = self.cloth.forward(g, cloth_in)?;
        let (x_p, x_c) = match &self.interaction {
            Some(it) => {
                let f_p = to_sequence(g, x_p, &it.seq_person)?;
                let f_c = to_sequence(g, x_c, &it.seq_cloth)?;
                let cross = it.transformer.forward(g, f_p, f_c)?;
                let (_, p, c) = global_strengthen(g, x_p, x_c, cross, &it.attention_proj)?;
                (p, c)
            }
            None => (x_p, x_c),
        };
        correlation(g, x_p, x_c)
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: Var, cloth: Var, mask: Var) -> Result<MatchingOutput> {
        let cloth_in = g.concat(&[cloth, mask], 0)?;
        let correlation = self.correlate(g, p, cloth_in)?;
        let theta = self.head.forward(g, correlation)?;
        let grid = self.basis.grid_var(g, theta)?;
        let warped_cloth = g.bilinear_sample(cloth, grid)?;
        let warped_mask = g.bilinear_sample(mask, grid)?;
        Ok(MatchingOutput {
            theta,
            grid,
            warped_cloth,
            warped_mask,
            correlation,
        })
    }
}
