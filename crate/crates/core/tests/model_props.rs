//! Structural properties of the encoders, both blocks and the objectives.

use cit_core::encoders::{EncoderConfig, EncoderStack};
use cit_core::harness::rng::CitRng;
use cit_core::kernel::layers::Linear;
use cit_core::kernel::{Graph, ParamStore, Tensor};
use cit_core::matching::{correlation, global_strengthen};
use cit_core::objectives::{jaccard, matching_loss, ssim, tryon_loss, LossWeights, PerceptualProxy};
use cit_core::reasoning::{compose, reason_map, ReasoningConfig, ReasoningModel};
use proptest::prelude::*;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = CitRng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

fn encoder(d: usize, heads: usize, layers: usize, positional: bool) -> EncoderConfig {
    EncoderConfig {
        layers,
        d_model: d,
        heads,
        d_ff: 2 * d,
        use_positional: positional,
    }
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn encoder_outputs_keep_query_shape(
        lq in 1usize..=8, lkv in 1usize..=8, heads in 1usize..=3, half_head in 1usize..=2, layers in 0usize..=2, seed in any::<u64>(),
    ) {
        let d = heads * 2 * half_head;
        let mut store = ParamStore::new();
        let stack = EncoderStack::new(&mut store, "e", encoder(d, heads, layers, true), &mut CitRng::new(seed)).unwrap();
        let mut g = Graph::with_params(&store);
        let q = g.input(rand_tensor(&[lq, d], seed, -1.0, 1.0));
        let kv = g.input(rand_tensor(&[lkv, d], !seed, -1.0, 1.0));
        let s = stack.self_forward(&mut g, q).unwrap();
        let c = stack.cross_forward(&mut g, q, kv).unwrap();
        prop_assert_eq!(g.shape(s), &[lq, d]);
        prop_assert_eq!(g.shape(c), &[lq, d]);
    }

    #[test]
    fn cross_attention_ignores_key_order_without_positions(
        lq in 1usize..=6, lkv in 2usize..=8, layers in 1usize..=2, seed in any::<u64>(),
    ) {
        let mut store = ParamStore::new();
        let stack = EncoderStack::new(&mut store, "e", encoder(4, 2, layers, false), &mut CitRng::new(seed)).unwrap();
        let q = rand_tensor(&[lq, 4], seed, -1.0, 1.0);
        let kv = rand_tensor(&[lkv, 4], !seed, -1.0, 1.0);
        let mut order: Vec<usize> = (0..lkv).collect();
        CitRng::new(seed ^ 9).shuffle(&mut order);
        let permuted = Tensor::from_fn(&[lkv, 4], |i| kv.at(&[order[i[0]], i[1]]));
        let run = |kv: &Tensor| {
            let mut g = Graph::with_params(&store);
            let (qv, kvv) = (g.input(q.clone()), g.input(kv.clone()));
            let out = stack.cross_forward(&mut g, qv, kvv).unwrap();
            g.value(out).clone()
        };
        prop_assert!(run(&kv).max_abs_diff(&run(&permuted)) < 1e-6);
    }

    #[test]
    fn strengthening_keeps_sign_and_bounds_magnitude(c in 1usize..=4, h in 1usize..=3, w in 1usize..=3, seed in any::<u64>()) {
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "proj", 6, c, true, &mut CitRng::new(seed)).unwrap();
        let x = rand_tensor(&[c, h, w], seed ^ 1, -2.0, 2.0);
        let mut g = Graph::with_params(&store);
        let (xp, xc) = (g.input(x.clone()), g.input(x.clone()));
        let cross = g.input(rand_tensor(&[h * w, 6], seed ^ 2, -3.0, 3.0));
        let (att, sp, _) = global_strengthen(&mut g, xp, xc, cross, &proj).unwrap();
        prop_assert!(g.value(att).data().iter().all(|&a| a > 0.0 && a < 1.0));
        for (&v, &s) in x.data().iter().zip(g.value(sp).data()) {
            if v != 0.0 {
                prop_assert_eq!(v.signum(), s.signum());
                prop_assert!(v.abs() < s.abs() && s.abs() < 2.0 * v.abs());
            }
        }
    }

    #[test]
    fn swapping_correlation_inputs_transposes_the_map(c in 1usize..=4, h in 1usize..=3, w in 1usize..=3, seed in any::<u64>()) {
        let a = rand_tensor(&[c, h, w], seed, -1.0, 1.0);
        let b = rand_tensor(&[c, h, w], !seed, -1.0, 1.0);
        let run = |x: &Tensor, y: &Tensor| {
            let mut g = Graph::new();
            let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
            let out = correlation(&mut g, xv, yv).unwrap();
            g.value(out).clone()
        };
        let (ab, ba) = (run(&a, &b), run(&b, &a));
        let n = h * w;
        for i in 0..n {
            for j in 0..n {
                prop_assert!((ab.data()[i * n + j] - ba.data()[j * n + i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn composition_stays_between_its_inputs(seed in any::<u64>(), gated in any::<bool>()) {
        let shape = [3, 4, 5];
        let mask = rand_tensor(&[1, 4, 5], seed, 0.0, 1.0);
        let cloth = rand_tensor(&shape, seed ^ 1, 0.0, 1.0);
        let rendered = rand_tensor(&shape, seed ^ 2, 0.0, 1.0);
        let map = rand_tensor(&[1, 4, 5], seed ^ 3, -4.0, 4.0);
        let mut g = Graph::new();
        let (m, c, r) = (g.input(mask), g.input(cloth.clone()), g.input(rendered.clone()));
        let mv = gated.then(|| g.input(map.clone()));
        let out = compose(&mut g, m, c, r, mv).unwrap();
        let out = g.value(out);
        for i in 0..out.len() {
            let p = i % 20;
            let gate = if gated { 1.0 / (1.0 + (-map.data()[p]).exp()) } else { 1.0 };
            let (a, b) = (cloth.data()[i], gate * rendered.data()[i]);
            let v = out.data()[i];
            prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn reasoning_map_token_touches_only_its_patch(token in 0usize..6, seed in any::<u64>()) {
        let (h, w, p) = (4, 6, 2);
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "proj", 3, p * p, true, &mut CitRng::new(seed)).unwrap();
        let x = rand_tensor(&[6, 3], seed ^ 1, -1.0, 1.0);
        let mut bumped = x.clone();
        for j in 0..3 {
            bumped.set(&[token, j], x.at(&[token, j]) + 0.5);
        }
        let run = |x: &Tensor| {
            let mut g = Graph::with_params(&store);
            let v = g.input(x.clone());
            let out = reason_map(&mut g, v, &proj, h, w, p).unwrap();
            g.value(out).clone()
        };
        let (a, b) = (run(&x), run(&bumped));
        let (ty, tx) = (token / (w / p), token % (w / p));
        for y in 0..h {
            for xx in 0..w {
                if y / p != ty || xx / p != tx {
                    prop_assert_eq!(a.at(&[0, y, xx]), b.at(&[0, y, xx]));
                }
            }
        }
    }

    #[test]
    fn ssim_at_most_one_and_jaccard_symmetric(seed in any::<u64>()) {
        let a = rand_tensor(&[3, 12, 12], seed, 0.0, 1.0);
        let b = rand_tensor(&[3, 12, 12], !seed, 0.0, 1.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!(s < 1.0 - 1e-9);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let ma = rand_tensor(&[1, 6, 6], seed ^ 4, 0.0, 1.0);
        let mb = rand_tensor(&[1, 6, 6], seed ^ 5, 0.0, 1.0);
        let j = jaccard(&ma, &mb).unwrap();
        prop_assert_eq!(j, jaccard(&mb, &ma).unwrap());
        let mut order: Vec<usize> = (0..36).collect();
        CitRng::new(seed).shuffle(&mut order);
        let perm = |m: &Tensor| Tensor::from_fn(&[1, 6, 6], |i| m.data()[order[i[1] * 6 + i[2]]]);
        prop_assert_eq!(j, jaccard(&perm(&ma), &perm(&mb)).unwrap());
    }

    #[test]
    fn losses_are_non_negative_and_vanish_at_fixed_points(seed in any::<u64>()) {
        let w = LossWeights::default();
        let img = rand_tensor(&[3, 8, 8], seed, 0.0, 1.0);
        let other = rand_tensor(&[3, 8, 8], !seed, 0.0, 1.0);
        let mask = rand_tensor(&[1, 8, 8], seed ^ 2, 0.0, 1.0).map(|v| (v > 0.5) as u8 as f64);
        let theta = rand_tensor(&[18], seed ^ 3, -0.2, 0.2);
        let perc = PerceptualProxy::new(seed);
        let eval = |warped: &Tensor, th: &Tensor, m: &Tensor| {
            let mut g = Graph::new();
            let (a, t, tv) = (g.input(warped.clone()), g.input(img.clone()), g.input(th.clone()));
            let lm = matching_loss(&mut g, a, t, tv, 3, &w).unwrap();
            let (mv, tm) = (g.input(m.clone()), g.input(mask.clone()));
            let lt = tryon_loss(&mut g, a, t, mv, tm, &perc, &w).unwrap();
            (g.value(lm).item(), g.value(lt).item())
        };
        let (lm, lt) = eval(&other, &theta, &mask.map(|v| 1.0 - v));
        prop_assert!(lm > 0.0 && lt > 0.0);
        prop_assert_eq!(eval(&img, &Tensor::zeros(&[18]), &mask), (0.0, 0.0));
    }
}

#[test]
fn full_reasoning_output_is_a_valid_image() {
    let cfg = ReasoningConfig::tiny();
    let mut store = ParamStore::new();
    let model = ReasoningModel::new(&mut store, cfg.clone(), &mut CitRng::new(3)).unwrap();
    for seed in 0..8 {
        let mut g = Graph::with_params(&store);
        let p = g.input(rand_tensor(&[8, cfg.height, cfg.width], seed, 0.0, 1.0));
        let c = g.input(rand_tensor(&[3, cfg.height, cfg.width], seed ^ 1, 0.0, 1.0));
        let m = g.input(rand_tensor(&[1, cfg.height, cfg.width], seed ^ 2, 0.0, 1.0));
        let out = model.forward(&mut g, p, c, m).unwrap();
        assert!(g.value(out.image).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
