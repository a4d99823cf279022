//! Named finite-difference checks over every differentiable primitive and the
//! assembled blocks.
//!
//! Inputs are fixed by seed. Arguments of kinked functions (`relu`, `abs`) are
//! kept at least [`KINK_MARGIN`] from the kink, and sampling coordinates at
//! least [`KINK_MARGIN`] pixels from the bilinear breakpoints. Whole-model
//! cases have too many ReLU units to place by hand; their seeds fix points
//! where no pre-activation crosses zero within the probe step.

use std::sync::Arc;

use crate::encoders::{EncoderConfig, EncoderStack};
use crate::error::Result;
use crate::harness::rng::CitRng;
use crate::kernel::gradcheck::{finite_diff_check, param_grad_check, GradCheckReport, DEFAULT_EPS};
use crate::kernel::layers::Linear;
use crate::kernel::{Graph, ParamStore, Tensor, Var};
use crate::matching::{correlation, global_strengthen, InteractiveTransformer1, MatchingConfig, MatchingModel};
use crate::objectives::PerceptualProxy;
use crate::reasoning::{activate_inputs, compose, reason_map, InteractiveTransformer2, ReasoningConfig, ReasoningModel, UNet};
use crate::tps::TpsBasis;

pub const TOLERANCE: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-2;
/// Elements probed per parameter tensor in block checks.
const PER_PARAM: usize = 16;

pub struct GradCase {
    pub name: &'static str,
    run: fn() -> Result<GradCheckReport>,
}

impl GradCase {
    pub fn run(&self) -> Result<GradCheckReport> {
        (self.run)()
    }
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = CitRng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

fn signed(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, seed, -1.0, 1.0)
}

/// Magnitudes in `[KINK_MARGIN, 1]` with random sign.
fn off_kink(shape: &[usize], seed: u64) -> Tensor {
    signed(shape, seed).map(|v| v.signum() * (KINK_MARGIN + v.abs() * (1.0 - KINK_MARGIN)))
}

fn unary(x: Tensor, op: impl Fn(&mut Graph<'_>, Var) -> Var) -> Result<GradCheckReport> {
    finite_diff_check(&[x], DEFAULT_EPS, |g, v| Ok(op(g, v[0])))
}

/// Distance in pixels from any coordinate of a `[oh × ow × 2]` grid to an
/// integer position of an `h × w` image.
fn breakpoint_distance(grid: &Tensor, h: usize, w: usize) -> f64 {
    grid.data()
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let size = if i % 2 == 0 { w } else { h };
            let pix = (c + 1.0) * (size - 1) as f64 / 2.0;
            (pix - pix.round()).abs()
        })
        .fold(f64::INFINITY, f64::min)
}

/// A `[oh × ow × 2]` grid in `(-1, 1)` avoiding breakpoints of an `h × w` image.
fn safe_grid(oh: usize, ow: usize, h: usize, w: usize, seed: u64) -> Tensor {
    (seed..)
        .map(|s| signed(&[oh, ow, 2], s).map(|v| v * 0.95))
        .find(|g| breakpoint_distance(g, h, w) >= KINK_MARGIN)
        .expect("unbounded search")
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        d_model: 4,
        heads: 2,
        d_ff: 8,
        use_positional: true,
    }
}

fn block(store: &ParamStore, forward: impl Fn(&mut Graph<'_>) -> Result<Var>) -> Result<GradCheckReport> {
    param_grad_check(store, DEFAULT_EPS, Some(PER_PARAM), forward)
}

/// Registers `t` as a learnable leaf so block checks also cover input gradients.
fn leaf(store: &mut ParamStore, name: &str, t: Tensor) -> Result<crate::kernel::ParamId> {
    store.add(format!("input.{name}"), t)
}

fn op_add() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[2, 3], 1), signed(&[3], 2)], DEFAULT_EPS, |g, v| g.add(v[0], v[1]))
}

fn op_sub() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[2, 3], 3), signed(&[2, 1], 4)], DEFAULT_EPS, |g, v| g.sub(v[0], v[1]))
}

fn op_mul() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[2, 3], 5), signed(&[1, 3], 6)], DEFAULT_EPS, |g, v| g.mul(v[0], v[1]))
}

fn op_scale() -> Result<GradCheckReport> {
    unary(signed(&[5], 7), |g, v| g.scale(v, -1.7))
}

fn op_add_scalar() -> Result<GradCheckReport> {
    unary(signed(&[5], 8), |g, v| g.add_scalar(v, 0.3))
}

fn op_rsub_scalar() -> Result<GradCheckReport> {
    unary(signed(&[5], 9), |g, v| g.rsub_scalar(1.0, v))
}

fn op_sigmoid() -> Result<GradCheckReport> {
    unary(signed(&[6], 10).map(|v| 3.0 * v), |g, v| g.sigmoid(v))
}

fn op_tanh() -> Result<GradCheckReport> {
    unary(signed(&[6], 11).map(|v| 2.0 * v), |g, v| g.tanh(v))
}

fn op_relu() -> Result<GradCheckReport> {
    unary(off_kink(&[8], 12), |g, v| g.relu(v))
}

fn op_abs() -> Result<GradCheckReport> {
    unary(off_kink(&[8], 13), |g, v| g.abs(v))
}

fn op_square() -> Result<GradCheckReport> {
    unary(signed(&[5], 14), |g, v| g.square(v))
}

fn op_sum() -> Result<GradCheckReport> {
    unary(signed(&[2, 3], 15), |g, v| g.sum(v))
}

fn op_mean() -> Result<GradCheckReport> {
    unary(signed(&[2, 3], 16), |g, v| g.mean(v))
}

fn op_weighted_sum() -> Result<GradCheckReport> {
    let w = signed(&[2, 3], 17);
    finite_diff_check(&[signed(&[2, 3], 18)], DEFAULT_EPS, |g, v| g.weighted_sum(v[0], &w))
}

fn op_reshape() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[2, 3], 19)], DEFAULT_EPS, |g, v| g.reshape(v[0], &[3, 2]))
}

fn op_transpose() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[2, 3], 20)], DEFAULT_EPS, |g, v| g.transpose(v[0]))
}

fn op_concat() -> Result<GradCheckReport> {
    let inputs = [signed(&[2, 3], 21), signed(&[2, 2], 22), signed(&[1, 5], 23)];
    finite_diff_check(&inputs, DEFAULT_EPS, |g, v| {
        let rows = g.concat(&[v[0], v[1]], 1)?;
        g.concat(&[rows, v[2]], 0)
    })
}

fn op_narrow() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[3, 4, 2], 24)], DEFAULT_EPS, |g, v| g.narrow(v[0], 1, 1, 2))
}

fn op_matmul() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[3, 4], 25), signed(&[4, 2], 26)], DEFAULT_EPS, |g, v| g.matmul(v[0], v[1]))
}

fn op_linear_project() -> Result<GradCheckReport> {
    let inputs = [signed(&[3, 4], 27), signed(&[4, 2], 28), signed(&[2], 29)];
    finite_diff_check(&inputs, DEFAULT_EPS, |g, v| {
        let with = g.linear_project(v[0], v[1], Some(v[2]))?;
        let without = g.linear_project(v[0], v[1], None)?;
        g.concat(&[with, without], 1)
    })
}

fn op_softmax() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[3, 4], 30).map(|v| 2.0 * v)], DEFAULT_EPS, |g, v| {
        let rows = g.softmax(v[0], 1)?;
        let cols = g.softmax(v[0], 0)?;
        g.concat(&[rows, cols], 0)
    })
}

fn op_layer_norm() -> Result<GradCheckReport> {
    let inputs = [signed(&[3, 5], 31), uniform(&[5], 32, 0.5, 1.5), signed(&[5], 33)];
    finite_diff_check(&inputs, DEFAULT_EPS, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
}

fn op_temporal_conv1d() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[5, 3], 34), signed(&[3, 3, 2], 35)], DEFAULT_EPS, |g, v| {
        g.temporal_conv1d(v[0], v[1])
    })
}

fn op_conv2d() -> Result<GradCheckReport> {
    let inputs = [
        signed(&[2, 5, 6], 36),
        signed(&[3, 2, 3, 3], 37),
        signed(&[3], 38),
        signed(&[2, 2, 3, 3], 39),
    ];
    finite_diff_check(&inputs, DEFAULT_EPS, |g, v| {
        let dense = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let strided = g.conv2d(v[0], v[3], None, 2, 1)?;
        let a = g.reshape(dense, &[3 * 5 * 6])?;
        let b = g.reshape(strided, &[2 * 3 * 3])?;
        g.concat(&[a, b], 0)
    })
}

fn op_upsample2x() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[2, 2, 3], 40)], DEFAULT_EPS, |g, v| g.upsample2x(v[0]))
}

fn op_l2_normalize_columns() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[3, 4], 41)], DEFAULT_EPS, |g, v| g.l2_normalize_columns(v[0], 1e-6))
}

fn op_gather() -> Result<GradCheckReport> {
    let index = Arc::new(vec![4, 0, 0, 2, 5, 4]);
    finite_diff_check(&[signed(&[6], 42)], DEFAULT_EPS, |g, v| g.gather(v[0], index.clone(), &[2, 3]))
}

fn op_patchify() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[2, 4, 6], 43)], DEFAULT_EPS, |g, v| g.patchify(v[0], 2))
}

fn op_unpatchify() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[6, 8], 44)], DEFAULT_EPS, |g, v| g.unpatchify(v[0], 2, 4, 6, 2))
}

fn op_bilinear_sample() -> Result<GradCheckReport> {
    let inputs = [signed(&[2, 5, 6], 45), safe_grid(4, 3, 5, 6, 46)];
    finite_diff_check(&inputs, DEFAULT_EPS, |g, v| g.bilinear_sample(v[0], v[1]))
}

fn loss_l1() -> Result<GradCheckReport> {
    // Differences stay away from zero so |·| is smooth at every element.
    let a = signed(&[2, 3, 3], 47);
    let b = a.zip_map(&off_kink(&[2, 3, 3], 48), |x, d| x + d)?;
    finite_diff_check(&[a, b], DEFAULT_EPS, |g, v| g.l1_loss(v[0], v[1]))
}

fn loss_grid_reg() -> Result<GradCheckReport> {
    finite_diff_check(&[signed(&[18], 49).map(|v| 0.3 * v)], DEFAULT_EPS, |g, v| g.grid_reg_loss(v[0], 3))
}

fn loss_perceptual() -> Result<GradCheckReport> {
    let perc = PerceptualProxy::new(0x5eed);
    let inputs = [uniform(&[3, 8, 8], 50, 0.0, 1.0), uniform(&[3, 8, 8], 51, 0.0, 1.0)];
    finite_diff_check(&inputs, DEFAULT_EPS, |g, v| perc.loss(g, v[0], v[1]))
}

fn block_global_strengthen() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = CitRng::new(52);
    let proj = Linear::new(&mut store, "proj", 4, 3, true, &mut rng)?;
    let x_p = leaf(&mut store, "x_p", signed(&[3, 2, 2], 53))?;
    let x_c = leaf(&mut store, "x_c", signed(&[3, 2, 2], 54))?;
    let cross = leaf(&mut store, "cross", signed(&[4, 4], 55))?;
    block(&store, |g| {
        let (p, c, x) = (g.param(x_p), g.param(x_c), g.param(cross));
        let (att, sp, sc) = global_strengthen(g, p, c, x, &proj)?;
        g.concat(&[att, sp, sc], 0)
    })
}

fn block_correlation() -> Result<GradCheckReport> {
    let inputs = [signed(&[3, 2, 3], 56), signed(&[3, 2, 3], 57)];
    finite_diff_check(&inputs, DEFAULT_EPS, |g, v| correlation(g, v[0], v[1]))
}

fn block_encoder() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let stack = EncoderStack::new(&mut store, "enc", tiny_encoder(), &mut CitRng::new(58))?;
    let x = leaf(&mut store, "x", signed(&[3, 4], 59))?;
    let kv = leaf(&mut store, "kv", signed(&[3, 4], 60))?;
    block(&store, |g| {
        let (x, kv) = (g.param(x), g.param(kv));
        let s = stack.self_forward(g, x)?;
        let c = stack.cross_forward(g, x, kv)?;
        g.concat(&[s, c], 1)
    })
}

fn block_interactive_1() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let it = InteractiveTransformer1::new(&mut store, "it1", tiny_encoder(), false, &mut CitRng::new(61))?;
    let f_p = leaf(&mut store, "f_p", signed(&[3, 4], 62))?;
    let f_c = leaf(&mut store, "f_c", signed(&[3, 4], 63))?;
    block(&store, |g| {
        let (p, c) = (g.param(f_p), g.param(f_c));
        it.forward(g, p, c)
    })
}

fn block_interactive_2() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let it = InteractiveTransformer2::new(&mut store, "it2", tiny_encoder(), false, &mut CitRng::new(64))?;
    let streams = [
        leaf(&mut store, "p", signed(&[4, 4], 65))?,
        leaf(&mut store, "c", signed(&[4, 4], 66))?,
        leaf(&mut store, "m", signed(&[4, 4], 67))?,
    ];
    block(&store, |g| {
        let s = streams.map(|id| g.param(id));
        it.forward(g, s)
    })
}

fn block_reasoning_map() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = CitRng::new(68);
    let proj = Linear::new(&mut store, "proj", 6, 4, true, &mut rng)?;
    let x = leaf(&mut store, "x", signed(&[4, 6], 69))?;
    let p = leaf(&mut store, "p", signed(&[2, 4, 4], 70))?;
    let c = leaf(&mut store, "c", signed(&[3, 4, 4], 71))?;
    let m = leaf(&mut store, "m", signed(&[1, 4, 4], 72))?;
    let r = leaf(&mut store, "r", signed(&[3, 4, 4], 73))?;
    block(&store, |g| {
        let xv = g.param(x);
        let map = reason_map(g, xv, &proj, 4, 4, 2)?;
        let (pv, cv, mv, rv) = (g.param(p), g.param(c), g.param(m), g.param(r));
        let act = activate_inputs(g, pv, cv, mv, Some(map))?;
        let gate = g.sigmoid(mv);
        let out = compose(g, gate, cv, rv, Some(map))?;
        g.concat(&[act, out], 0)
    })
}

fn block_unet() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let unet = UNet::new(&mut store, "unet", 3, &[2, 3, 4], &mut CitRng::new(74))?;
    let x = leaf(&mut store, "x", signed(&[3, 8, 8], 75))?;
    block(&store, |g| {
        let xv = g.param(x);
        let (rendered, mask) = unet.forward(g, xv)?;
        g.concat(&[rendered, mask], 0)
    })
}

fn block_tps_warp() -> Result<GradCheckReport> {
    let (k, h, w) = (3, 8, 8);
    let basis = TpsBasis::new(k, h, w)?;
    let theta = (76..)
        .map(|s| signed(&[2 * k * k], s).map(|v| 0.3 * v))
        .find(|t| basis.grid(t).is_ok_and(|grid| breakpoint_distance(&grid, h, w) >= KINK_MARGIN))
        .expect("unbounded search");
    let mut store = ParamStore::new();
    let img = leaf(&mut store, "img", signed(&[3, h, w], 77))?;
    let th = leaf(&mut store, "theta", theta)?;
    // The f32 rounding in `leaf` may move coordinates; re-verify on the stored value.
    debug_assert!(breakpoint_distance(&basis.grid(store.value(th))?, h, w) >= KINK_MARGIN / 2.0);
    block(&store, |g| {
        let (iv, tv) = (g.param(img), g.param(th));
        let grid = basis.grid_var(g, tv)?;
        g.bilinear_sample(iv, grid)
    })
}

fn model_matching() -> Result<GradCheckReport> {
    let cfg = MatchingConfig::tiny();
    let (h, w) = (cfg.height, cfg.width);
    let mut store = ParamStore::new();
    let model = MatchingModel::new(&mut store, cfg, &mut CitRng::new(80))?;
    let p = uniform(&[8, h, w], 81, 0.0, 1.0);
    let c = uniform(&[3, h, w], 82, 0.0, 1.0);
    let m = uniform(&[1, h, w], 83, 0.0, 1.0).map(|v| (v > 0.4) as u8 as f64);
    block(&store, |g| {
        let (pv, cv, mv) = (g.constant(p.clone()), g.constant(c.clone()), g.constant(m.clone()));
        let out = model.forward(g, pv, cv, mv)?;
        let warped = g.reshape(out.warped_cloth, &[3 * h * w])?;
        g.concat(&[warped, out.theta], 0)
    })
}

fn model_reasoning() -> Result<GradCheckReport> {
    let cfg = ReasoningConfig::tiny();
    let (h, w) = (cfg.height, cfg.width);
    let mut store = ParamStore::new();
    let model = ReasoningModel::new(&mut store, cfg, &mut CitRng::new(88))?;
    let p = uniform(&[8, h, w], 85, 0.0, 1.0);
    let c = uniform(&[3, h, w], 86, 0.0, 1.0);
    let m = uniform(&[1, h, w], 87, 0.0, 1.0).map(|v| (v > 0.5) as u8 as f64);
    block(&store, |g| {
        let (pv, cv, mv) = (g.constant(p.clone()), g.constant(c.clone()), g.constant(m.clone()));
        let out = model.forward(g, pv, cv, mv)?;
        g.concat(&[out.image, out.mask], 0)
    })
}

pub fn cases() -> Vec<GradCase> {
    macro_rules! table {
        ($($name:literal => $f:ident),* $(,)?) => {
            vec![$(GradCase { name: $name, run: $f }),*]
        };
    }
    table![
        "op.add" => op_add,
        "op.sub" => op_sub,
        "op.mul" => op_mul,
        "op.scale" => op_scale,
        "op.add_scalar" => op_add_scalar,
        "op.rsub_scalar" => op_rsub_scalar,
        "op.sigmoid" => op_sigmoid,
        "op.tanh" => op_tanh,
        "op.relu" => op_relu,
        "op.abs" => op_abs,
        "op.square" => op_square,
        "op.sum" => op_sum,
        "op.mean" => op_mean,
        "op.weighted_sum" => op_weighted_sum,
        "op.reshape" => op_reshape,
        "op.transpose" => op_transpose,
        "op.concat" => op_concat,
        "op.narrow" => op_narrow,
        "op.matmul" => op_matmul,
        "op.linear_project" => op_linear_project,
        "op.softmax" => op_softmax,
        "op.layer_norm" => op_layer_norm,
        "op.temporal_conv1d" => op_temporal_conv1d,
        "op.conv2d" => op_conv2d,
        "op.upsample2x" => op_upsample2x,
        "op.l2_normalize_columns" => op_l2_normalize_columns,
        "op.gather" => op_gather,
        "op.patchify" => op_patchify,
        "op.unpatchify" => op_unpatchify,
        "op.bilinear_sample" => op_bilinear_sample,
        "loss.l1" => loss_l1,
        "loss.grid_reg" => loss_grid_reg,
        "loss.perceptual" => loss_perceptual,
        "block.global_strengthen" => block_global_strengthen,
        "block.correlation" => block_correlation,
        "block.encoder" => block_encoder,
        "block.interactive_1" => block_interactive_1,
        "block.interactive_2" => block_interactive_2,
        "block.reasoning_map" => block_reasoning_map,
        "block.unet" => block_unet,
        "block.tps_warp" => block_tps_warp,
        "model.matching" => model_matching,
        "model.reasoning" => model_reasoning,
    ]
}

/// Runs every case whose name contains `filter`.
pub fn run(filter: Option<&str>) -> Result<Vec<(&'static str, GradCheckReport)>> {
    cases()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| Ok((c.name, c.run()?)))
        .collect()
}
