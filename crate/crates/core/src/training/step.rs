use edgesynth_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{combine_terms, generator_terms, LossBreakdown, TermInputs};
use super::model::{stack_layouts, synthesize_graph, Model};
use super::optim::Adam;
use crate::config::Config;
use crate::data::{Batch, BatchIterator, DatasetSpec, Layout};
use crate::discriminator::{d_loss_edge, d_loss_image, discriminate, normalized_weights, power_iteration};
use crate::nn::{Bound, ParamStore};
use crate::similarity::{proxy_cross_entropy, proxy_logits};
use crate::{Error, Result};

const BANK_SALT: u64 = 0xba2c_5eed;

/// Parameters, optimiser moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: Config,
    pub model: Model,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_p: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: Config) -> Result<Self> {
        let model = Model::init(&config)?;
        let t = &config.train;
        let adam = || Adam::new(t.lr, t.beta1, t.beta2, t.eps);
        Ok(Self { model, opt_g: adam(), opt_d: adam(), opt_p: adam(), step: 0, config })
    }
}

/// Losses recorded for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub generator: LossBreakdown,
    /// Negated discriminator objective that the D step minimises.
    pub discriminator: f64,
    pub proxy: Option<f64>,
}

fn images<'a>(scenes: impl Iterator<Item = &'a crate::data::Image>) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = scenes.map(|i| i.to_tensor()).collect();
    Ok(Tensor::stack_batch(&parts)?)
}

/// One discriminator step, one generator step and, with the similarity
/// loss enabled, one proxy-segmenter step.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let cfg = state.config.clone();
    let slope = cfg.model.leaky_slope;
    let lambda = cfg.loss.lambda;
    let layouts: Vec<Layout> = batch.scenes.iter().map(|s| s.layout.clone()).collect();
    let refs: Vec<&Layout> = layouts.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ BANK_SALT);
    rng.set_stream(state.step);

    let mut g = Graph::<f32>::new();
    let s = g.constant(stack_layouts(&layouts)?);
    let real_image = g.constant(images(batch.scenes.iter().map(|s| &s.image))?);
    let real_edge = g.constant(images(batch.scenes.iter().map(|s| &s.edge))?);
    let gen = Bound::bind(&mut g, &state.model.gen, true);
    let syn = synthesize_graph(&mut g, &gen, s, &refs, &cfg, true)?;

    // Discriminator step on detached fakes.
    power_iteration(&state.model.disc, &mut state.model.spectral)?;
    let d_raw = Bound::bind(&mut g, &state.model.disc, true);
    let d = normalized_weights(&mut g, &d_raw, &state.model.spectral)?;
    let prime = g.detach(syn.acts.image_prime);
    let real_out = discriminate(&mut g, &d, s, real_image, slope)?;
    let prime_out = discriminate(&mut g, &d, s, prime, slope)?;
    let dprime_out = match syn.dprime {
        Some(v) => {
            let v = g.detach(v);
            Some(discriminate(&mut g, &d, s, v, slope)?.logits)
        }
        None => None,
    };
    let mut objective = d_loss_image(&mut g, real_out.logits, prime_out.logits, dprime_out, lambda)?;
    if let Some(e) = syn.acts.edge {
        let e = g.detach(e);
        let real_e = discriminate(&mut g, &d, s, real_edge, slope)?;
        let fake_e = discriminate(&mut g, &d, s, e, slope)?;
        let edge_obj = d_loss_edge(&mut g, real_e.logits, fake_e.logits)?;
        objective = g.add(objective, edge_obj)?;
    }
    let d_loss = g.neg(objective);
    let d_value = g.scalar(d_loss) as f64;
    if !d_value.is_finite() {
        return Err(Error::NonFinite("discriminator".into()));
    }
    let grads = g.backward(d_loss)?;
    state.opt_d.step(&mut state.model.disc, &d_raw, &grads)?;
    drop(grads);

    // Generator step against the updated, frozen discriminator.
    let d_frozen = Bound::bind(&mut g, &state.model.disc, false);
    let d_frozen = normalized_weights(&mut g, &d_frozen, &state.model.spectral)?;
    let proxy = Bound::bind(&mut g, &state.model.proxy, false);
    let perceptual = Bound::bind(&mut g, &state.model.perceptual, false);
    let inputs = TermInputs {
        cfg: &cfg,
        layout: s,
        real_image,
        real_edge,
        gen: &gen,
        disc: &d_frozen,
        proxy: &proxy,
        perceptual: &perceptual,
        layouts: &refs,
        pyramids: &batch.pyramids,
    };
    let terms = generator_terms(&mut g, &syn, &inputs, &mut rng)?;
    let (total, breakdown) = combine_terms(&mut g, &terms, &cfg.loss)?;
    if breakdown.total > cfg.train.divergence_limit {
        return Err(Error::Diverged { step: state.step, value: breakdown.total });
    }
    let grads = g.backward(total)?;
    state.opt_g.step(&mut state.model.gen, &gen, &grads)?;
    drop(grads);
    drop(g);

    let proxy_ce = if cfg.ablation.similarity_loss {
        let img = images(batch.scenes.iter().map(|s| &s.image))?;
        let target = stack_layouts(&layouts)?;
        Some(proxy_step(&mut state.model.proxy, &mut state.opt_p, img, target, slope)?)
    } else {
        None
    };

    let report = StepReport { step: state.step, generator: breakdown, discriminator: d_value, proxy: proxy_ce };
    state.step += 1;
    Ok(report)
}

/// One cross-entropy step of the proxy segmenter on real pairs.
pub fn proxy_step(
    proxy: &mut ParamStore<f32>,
    opt: &mut Adam,
    images: Tensor<f32>,
    one_hot: Tensor<f32>,
    slope: f64,
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let p = Bound::bind(&mut g, proxy, true);
    let img = g.constant(images);
    let target = g.constant(one_hot);
    let logits = proxy_logits(&mut g, &p, img, slope)?;
    let ce = proxy_cross_entropy(&mut g, logits, target)?;
    let value = g.scalar(ce) as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("proxy cross-entropy".into()));
    }
    let grads = g.backward(ce)?;
    opt.step(proxy, &p, &grads)?;
    Ok(value)
}

/// Train a fresh proxy segmenter alone on rendered pairs.
pub fn pretrain_proxy(cfg: &Config, steps: u64, lr: f64) -> Result<ParamStore<f32>> {
    let mut proxy = Model::init(cfg)?.proxy;
    let t = &cfg.train;
    let mut opt = Adam::new(lr, t.beta1, t.beta2, t.eps);
    let mut batches = BatchIterator::new(DatasetSpec::train(&cfg.dataset), t.batch_size, t.seed)?;
    for _ in 0..steps {
        let batch = batches.next_batch()?;
        let layouts: Vec<Layout> = batch.scenes.iter().map(|s| s.layout.clone()).collect();
        let img = images(batch.scenes.iter().map(|s| &s.image))?;
        proxy_step(&mut proxy, &mut opt, img, stack_layouts(&layouts)?, cfg.model.leaky_slope)?;
    }
    Ok(proxy)
}

/// Training loop over the seeded batch stream.
pub struct Trainer {
    pub state: TrainState,
    batches: BatchIterator,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        Self::resume(TrainState::new(config)?)
    }

    /// Continue from `state`, replaying the batch order up to its step.
    pub fn resume(state: TrainState) -> Result<Self> {
        let t = &state.config.train;
        let mut batches = BatchIterator::new(DatasetSpec::train(&state.config.dataset), t.batch_size, t.seed)?;
        for _ in 0..state.step {
            batches.next_ids();
        }
        Ok(Self { state, batches })
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.batches.next_batch()?;
        train_step(&mut self.state, &batch)
    }

    /// Run until the state reaches `until` steps, calling `on_step` after each.
    pub fn run_until(
        &mut self,
        until: u64,
        mut on_step: impl FnMut(&TrainState, &StepReport) -> Result<()>,
    ) -> Result<()> {
        while self.state.step < until {
            let r = self.step()?;
            on_step(&self.state, &r)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::ablation_config;
    use crate::verify::tiny_config;

    fn run(cfg: Config, steps: u64) -> Result<TrainState> {
        let mut t = Trainer::new(cfg)?;
        t.run_until(steps, |_, _| Ok(()))?;
        Ok(t.state)
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = run(tiny_config(3), 10).unwrap();
        let b = run(tiny_config(3), 10).unwrap();
        assert_eq!(a.step, 10);
        assert_eq!(a, b);
        assert_ne!(a.model.gen, run(tiny_config(4), 10).unwrap().model.gen);
    }

    #[test]
    fn divergence_guard_aborts() {
        let mut cfg = tiny_config(0);
        cfg.train.divergence_limit = 1e-3;
        let err = run(cfg, 1).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn proxy_only_trains_with_similarity_loss() {
        let base = tiny_config(2);
        let b1 = ablation_config(&base, "B1").unwrap();
        let fresh = Model::init(&b1).unwrap();
        assert_eq!(run(b1, 2).unwrap().model.proxy, fresh.proxy);
        let b5 = ablation_config(&base, "B5").unwrap();
        assert_ne!(run(b5, 2).unwrap().model.proxy, fresh.proxy);
    }
}
