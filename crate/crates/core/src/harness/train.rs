//! Two-stage training and inference around one [`Pipeline`].
//!
//! Each batch element is differentiated on its own graph, possibly in
//! parallel; gradients are then summed in batch order, so the result does not
//! depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::TrainConfig;
use crate::harness::data::SamplePair;
use crate::harness::optim::{lr_at, Adam};
use crate::harness::rng::CitRng;
use crate::kernel::{Gradients, Graph, ParamStore, Tensor, Var};
use crate::matching::MatchingModel;
use crate::objectives::{l1_loss, matching_loss, matching_loss_b4, tryon_loss, PerceptualProxy};
use crate::reasoning::ReasoningModel;

const MATCHING_INIT: u64 = 0x6d61_7463;
const REASONING_INIT: u64 = 0x7265_6173;
const MATCHING_ORDER: u64 = 0x6f72_6431;
const TRYON_ORDER: u64 = 0x6f72_6432;

/// Worker count from `CIT_THREADS`; unset or `0` leaves the choice to rayon.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("CIT_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs `f` on a pool sized by `threads`, or by `CIT_THREADS` when `None`.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads.or_else(threads_from_env) {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Epoch-wise shuffled index stream.
struct Sampler {
    rng: CitRng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler {
            rng: CitRng::new(seed),
            order: (0..n).collect(),
            pos: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Loss and parameter gradients of every batch element, in batch order.
fn batch_gradients<F>(store: &ParamStore, batch: &[usize], loss: F) -> Result<Vec<(f64, Gradients)>>
where
    F: Fn(&mut Graph<'_>, usize) -> Result<Var> + Sync,
{
    batch
        .par_iter()
        .map(|&i| {
            let mut g = Graph::with_params(store);
            let l = loss(&mut g, i)?;
            let value = g.value(l).item();
            let grads = g.backward(l)?;
            Ok((value, grads))
        })
        .collect()
}

/// One optimizer step; returns the mean batch loss.
fn train_step<F>(
    store: &mut ParamStore,
    adam: &mut Adam,
    batch: &[usize],
    lr: f64,
    seeds: impl Fn(usize) -> u64,
    step: usize,
    loss: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, usize) -> Result<Var> + Sync,
{
    let results = batch_gradients(store, batch, loss)?;
    store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (&i, (value, grads)) in batch.iter().zip(&results) {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {value} at step {step} on sample seed {}",
                seeds(i)
            )));
        }
        total += value;
        store.accumulate(grads, scale);
    }
    adam.apply(store, lr);
    Ok(total * scale)
}

/// Stage-one outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Warped {
    pub theta: Tensor,
    pub cloth: Tensor,
    pub mask: Tensor,
}

/// Stage-two outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TryOn {
    pub warped: Warped,
    pub rendered: Tensor,
    pub mask: Tensor,
    pub reason_map: Option<Tensor>,
    pub image: Tensor,
}

/// Both models with their parameters.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: TrainConfig,
    pub matching_params: ParamStore,
    pub matching: MatchingModel,
    pub reasoning_params: ParamStore,
    pub reasoning: ReasoningModel,
}

impl Pipeline {
    /// Fresh initialization determined by `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut matching_params = ParamStore::new();
        let matching = MatchingModel::new(
            &mut matching_params,
            config.matching(),
            &mut CitRng::new(config.seed ^ MATCHING_INIT),
        )?;
        let mut reasoning_params = ParamStore::new();
        let reasoning = ReasoningModel::new(
            &mut reasoning_params,
            config.reasoning(),
            &mut CitRng::new(config.seed ^ REASONING_INIT),
        )?;
        Ok(Pipeline {
            config: config.clone(),
            matching_params,
            matching,
            reasoning_params,
            reasoning,
        })
    }

    /// Rebuilds from a checkpoint's embedded config; reasoning weights load only if present.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.is_empty() {
            return Err(Error::Corrupt("checkpoint carries no configuration".into()));
        }
        let config = TrainConfig::parse(&ck.config)?;
        Self::from_checkpoint_with(ck, &config)
    }

    /// Like [`Pipeline::from_checkpoint`] but with an explicit architecture.
    pub fn from_checkpoint_with(ck: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        let mut p = Pipeline::new(config)?;
        ck.load_into(&mut p.matching_params)?;
        if p.reasoning_params.iter().any(|q| ck.get(&q.name).is_some()) {
            ck.load_into(&mut p.reasoning_params)?;
        }
        Ok(p)
    }

    pub fn has_reasoning_weights(ck: &Checkpoint) -> bool {
        ck.params.iter().any(|(n, _)| n.starts_with("reasoning."))
    }

    /// Matching weights only.
    pub fn matching_checkpoint(&self, step: u32) -> Checkpoint {
        Checkpoint::from_stores(step, self.config.to_text(), &[&self.matching_params])
    }

    /// Matching and reasoning weights.
    pub fn full_checkpoint(&self, step: u32) -> Checkpoint {
        Checkpoint::from_stores(
            step,
            self.config.to_text(),
            &[&self.matching_params, &self.reasoning_params],
        )
    }

    pub fn warp(&self, person: &Tensor, cloth: &Tensor, mask: &Tensor) -> Result<Warped> {
        let mut g = Graph::with_params(&self.matching_params);
        let (p, c, m) = (g.constant(person.clone()), g.constant(cloth.clone()), g.constant(mask.clone()));
        let out = self.matching.forward(&mut g, p, c, m)?;
        Ok(Warped {
            theta: g.value(out.theta).clone(),
            cloth: g.value(out.warped_cloth).clone(),
            mask: g.value(out.warped_mask).clone(),
        })
    }

    pub fn render(&self, person: &Tensor, warped: Warped) -> Result<TryOn> {
        let mut g = Graph::with_params(&self.reasoning_params);
        let p = g.constant(person.clone());
        let c = g.constant(warped.cloth.clone());
        let m = g.constant(warped.mask.clone());
        let out = self.reasoning.forward(&mut g, p, c, m)?;
        Ok(TryOn {
            rendered: g.value(out.rendered).clone(),
            mask: g.value(out.mask).clone(),
            reason_map: out.reason_map.map(|v| g.value(v).clone()),
            image: g.value(out.image).clone(),
            warped,
        })
    }

    pub fn tryon(&self, person: &Tensor, cloth: &Tensor, mask: &Tensor) -> Result<TryOn> {
        let warped = self.warp(person, cloth, mask)?;
        self.render(person, warped)
    }
}

fn matching_sample_loss(model: &MatchingModel, cfg: &TrainConfig, g: &mut Graph<'_>, s: &SamplePair) -> Result<Var> {
    let (p, c, m) = (
        g.constant(s.person.clone()),
        g.constant(s.cloth.clone()),
        g.constant(s.cloth_mask.clone()),
    );
    let out = model.forward(g, p, c, m)?;
    let target = g.constant(s.target_cloth.clone());
    let w = &cfg.weights;
    if cfg.ablation.mask_loss() {
        let tm = g.constant(s.target_mask.clone());
        matching_loss_b4(g, out.warped_cloth, target, out.warped_mask, tm, out.theta, cfg.grid_k, w)
    } else {
        matching_loss(g, out.warped_cloth, target, out.theta, cfg.grid_k, w)
    }
}

/// Warp quality of stage one over a sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchingEval {
    /// Mean `l1(ĉ, c_t)`.
    pub warp_l1: f64,
    /// Mean Euclidean distance between predicted and true control destinations.
    pub control_error: f64,
}

/// Mean Euclidean distance per control point between two θ of the same K.
pub fn control_point_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 1 || !a.len().is_multiple_of(2) {
        return Err(Error::shape("control_point_error", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.len() / 2;
    let (x, y) = (a.data(), b.data());
    Ok((0..n)
        .map(|i| ((x[i] - y[i]).powi(2) + (x[n + i] - y[n + i]).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64)
}

pub fn eval_matching(pipeline: &Pipeline, data: &[SamplePair]) -> Result<MatchingEval> {
    if data.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let per: Vec<(f64, f64)> = data
        .par_iter()
        .map(|s| {
            let w = pipeline.warp(&s.person, &s.cloth, &s.cloth_mask)?;
            Ok((l1_loss(&w.cloth, &s.target_cloth)?, control_point_error(&w.theta, &s.theta)?))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok(MatchingEval {
        warp_l1: per.iter().map(|p| p.0).sum::<f64>() / n,
        control_error: per.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

/// Mean `l1(I_o, I_GT)` of the full pipeline.
pub fn eval_tryon(pipeline: &Pipeline, data: &[SamplePair]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let per: Vec<f64> = data
        .par_iter()
        .map(|s| l1_loss(&pipeline.tryon(&s.person, &s.cloth, &s.cloth_mask)?.image, &s.image))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub pipeline: Pipeline,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Trains the matching model of `pipeline` in place for `config.steps` steps.
pub fn train_matching_from(
    mut pipeline: Pipeline,
    data: &[SamplePair],
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let cfg = pipeline.config.clone();
    let mut adam = Adam::new(&pipeline.matching_params);
    let mut sampler = Sampler::new(data.len(), cfg.seed ^ MATCHING_ORDER);
    let mut losses = Vec::with_capacity(cfg.steps);
    let model = pipeline.matching.clone();
    for step in 0..cfg.steps {
        let batch = sampler.batch(cfg.batch_size);
        let lr = lr_at(step, cfg.lr, cfg.decay_start, cfg.steps);
        let loss = train_step(
            &mut pipeline.matching_params,
            &mut adam,
            &batch,
            lr,
            |i| data[i].seed,
            step,
            |g, i| matching_sample_loss(&model, &cfg, g, &data[i]),
        )?;
        losses.push(loss);
        progress(step, loss);
    }
    Ok(TrainOutcome { pipeline, losses })
}

/// Stage one from a fresh initialization.
pub fn train_matching(
    data: &[SamplePair],
    config: &TrainConfig,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome> {
    train_matching_from(Pipeline::new(config)?, data, progress)
}

/// Stage two on top of a trained stage one, whose weights stay fixed.
pub fn train_tryon(
    data: &[SamplePair],
    stage1: &Checkpoint,
    config: &TrainConfig,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let mut pipeline = Pipeline::new(config)?;
    stage1.load_into(&mut pipeline.matching_params)?;
    let warped: Vec<Warped> = data
        .par_iter()
        .map(|s| pipeline.warp(&s.person, &s.cloth, &s.cloth_mask))
        .collect::<Result<_>>()?;
    let perceptual = PerceptualProxy::new(config.perceptual_seed);
    let mut adam = Adam::new(&pipeline.reasoning_params);
    let mut sampler = Sampler::new(data.len(), config.seed ^ TRYON_ORDER);
    let mut losses = Vec::with_capacity(config.steps);
    let reasoning = pipeline.reasoning.clone();
    let w = config.weights;
    for step in 0..config.steps {
        let batch = sampler.batch(config.batch_size);
        let lr = lr_at(step, config.lr, config.decay_start, config.steps);
        let loss = train_step(
            &mut pipeline.reasoning_params,
            &mut adam,
            &batch,
            lr,
            |i| data[i].seed,
            step,
            |g, i| {
                let s = &data[i];
                let p = g.constant(s.person.clone());
                let c = g.constant(warped[i].cloth.clone());
                let m = g.constant(warped[i].mask.clone());
                let out = reasoning.forward(g, p, c, m)?;
                let gt = g.constant(s.image.clone());
                let tm = g.constant(s.target_mask.clone());
                tryon_loss(g, out.image, gt, out.mask, tm, &perceptual, &w)
            },
        )?;
        losses.push(loss);
        progress(step, loss);
    }
    Ok(TrainOutcome { pipeline, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{gen_dataset, DataConfig};

    fn tiny_config() -> TrainConfig {
        TrainConfig::parse(
            "height = 16\nwidth = 16\nfeature_channels = 4,4\nd_model = 4\nheads = 2\nlayers = 1\n\
             d_ff = 8\ngrid_k = 3\nhead_channels = 4\nunet_channels = 2,3,4\nsteps = 3\nbatch_size = 2\n\
             lr = 0.001\ndecay_start = 2",
        )
        .unwrap()
    }

    fn tiny_data() -> Vec<SamplePair> {
        gen_dataset(
            1,
            3,
            DataConfig {
                height: 16,
                width: 16,
                grid_k: 3,
            },
        )
        .unwrap()
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(5, 9);
        let mut first: Vec<usize> = s.batch(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.batch(12).len(), 12);
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let cfg = TrainConfig {
            steps: 0,
            ..tiny_config()
        };
        let out = train_matching(&tiny_data(), &cfg, &mut |_, _| {}).unwrap();
        let init = Pipeline::new(&cfg).unwrap();
        assert_eq!(out.pipeline.matching_checkpoint(0), init.matching_checkpoint(0));
        assert!(out.losses.is_empty());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let cfg = tiny_config();
        let data = tiny_data();
        let run = |n| {
            with_threads(Some(n), || {
                let a = train_matching(&data, &cfg, &mut |_, _| {}).unwrap();
                let ck = a.pipeline.matching_checkpoint(cfg.steps as u32);
                let b = train_tryon(&data, &ck, &cfg, &mut |_, _| {}).unwrap();
                (a.losses, b.pipeline.full_checkpoint(0).encode().unwrap())
            })
            .unwrap()
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn stage_one_stays_frozen_in_stage_two() {
        let cfg = tiny_config();
        let data = tiny_data();
        let a = train_matching(&data, &cfg, &mut |_, _| {}).unwrap();
        let ck = a.pipeline.matching_checkpoint(3);
        let b = train_tryon(&data, &ck, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(b.pipeline.matching_checkpoint(3), ck);
        assert_ne!(
            b.pipeline.full_checkpoint(0).params.last(),
            Pipeline::new(&cfg).unwrap().full_checkpoint(0).params.last()
        );
    }

    #[test]
    fn checkpoint_restores_pipeline() {
        let cfg = tiny_config();
        let data = tiny_data();
        let a = train_matching(&data, &cfg, &mut |_, _| {}).unwrap();
        let ck = a.pipeline.full_checkpoint(3);
        let back = Pipeline::from_checkpoint(&Checkpoint::decode(&ck.encode().unwrap()).unwrap()).unwrap();
        let s = &data[0];
        assert_eq!(
            back.tryon(&s.person, &s.cloth, &s.cloth_mask).unwrap(),
            a.pipeline.tryon(&s.person, &s.cloth, &s.cloth_mask).unwrap()
        );
    }

    #[test]
    fn control_error_is_mean_point_distance() {
        let a = Tensor::from_vec(vec![0.0, 0.0, 0.0, 0.0]);
        let b = Tensor::from_vec(vec![0.3, 0.0, 0.4, 0.1]);
        assert!((control_point_error(&a, &b).unwrap() - 0.3).abs() < 1e-15);
    }
}
