use std::path::Path;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{join_u64, split_u64, warmup_lr, Optimizer, OptimizerKind};
use crate::data::Pair;
use crate::error::{Error, Result};
use crate::gan::{discriminator_loss, generator_losses, quality_proxy, Discriminator, LossReport, LossWeights};
use crate::model::layers::BN_MOMENTUM;
use crate::model::{Checkpoint, Ctx, Mode, ModelConfig, ParameterStore, TridentNet};
use crate::signal::StftPlan;
use crate::tensor::{Tape, Tensor, Var};

/// Optimization settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub optimizer_generator: OptimizerKind,
    pub optimizer_discriminator: OptimizerKind,
    /// Apply the warm-up ramp to the discriminator as well.
    pub warmup_discriminator: bool,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 1000, batch_size: 4, warmup_steps: 200, ..Self::full_scale() }
    }
}

impl TrainConfig {
    /// Full-scale settings: LAMB at 8e-4 for the generator, Adam at 4e-4 for
    /// the discriminator, 5000 warm-up steps, batch 8.
    pub fn full_scale() -> Self {
        TrainConfig {
            steps: 100_000,
            batch_size: 8,
            warmup_steps: 5000,
            lr_generator: 8e-4,
            lr_discriminator: 4e-4,
            optimizer_generator: OptimizerKind::Lamb,
            optimizer_discriminator: OptimizerKind::Adam,
            warmup_discriminator: true,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} {lr} must be a finite nonnegative number")));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    /// 1-based number of the step just taken.
    pub step: u64,
    pub lr: f64,
    pub losses: LossReport,
}

impl LogRecord {
    pub const HEADER: &'static str = "step lr L_a L_p L_w L_GAN L L_D";

    pub fn to_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e}",
            self.step,
            self.lr,
            l.l_a,
            l.l_p,
            l.l_w,
            l.l_gan,
            l.total,
            l.l_d.unwrap_or(f64::NAN)
        )
    }
}

/// What the discriminator sub-step needs from the generator sub-step.
struct GeneratorStep {
    report: LossReport,
    clean_spec: Tensor<f32>,
    est_spec: Tensor<f32>,
    quality: Vec<f64>,
}

/// Generator, discriminator and both optimizers.
pub struct Trainer {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub config: TrainConfig,
    net: TridentNet,
    generator: ParameterStore,
    disc: Discriminator,
    disc_params: ParameterStore,
    opt_g: Optimizer,
    opt_d: Optimizer,
    plan: Rc<StftPlan<f32>>,
    step: u64,
    seed: u64,
}

fn learnable<'a>(store: &'a ParameterStore) -> impl Iterator<Item = &'a Tensor<f32>> {
    store.learnable_ids().into_iter().map(|id| store.get(id))
}

fn apply(opt: &mut Optimizer, store: &mut ParameterStore, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
    let ids = store.learnable_ids();
    let mut slots: Vec<Tensor<f32>> = ids.iter().map(|&id| std::mem::replace(store.get_mut(id), Tensor::zeros([0]))).collect();
    let res = opt.update(&mut slots.iter_mut().collect::<Vec<_>>(), grads, lr);
    for (id, t) in ids.into_iter().zip(slots) {
        *store.get_mut(id) = t;
    }
    res
}

fn grads_of(tape: &Tape<f32>, vars: &[Var<f32>], store: &ParameterStore) -> Vec<Tensor<f32>> {
    store.learnable_ids().into_iter().map(|id| tape.grad_or_zeros(&vars[id.index()])).collect()
}

/// Stacks equal-length signals as a `[B, N]` tensor.
fn stack(signals: &[&[f32]]) -> Result<Tensor<f32>> {
    let n = signals[0].len();
    Tensor::new([signals.len(), n], signals.concat())
}

impl Trainer {
    pub fn new(model: ModelConfig, weights: LossWeights, config: TrainConfig, seed: u64) -> Result<Self> {
        weights.validate()?;
        config.validate()?;
        let (net, generator) = TridentNet::init(&model, seed)?;
        let (disc, disc_params) = Discriminator::init(seed.wrapping_add(1), weights.p)?;
        let opt_g = Optimizer::new(config.optimizer_generator, learnable(&generator));
        let opt_d = Optimizer::new(config.optimizer_discriminator, learnable(&disc_params));
        let plan = Rc::new(StftPlan::new(model.stft)?);
        Ok(Trainer { model, weights, config, net, generator, disc, disc_params, opt_g, opt_d, plan, step: 0, seed })
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> &ParameterStore {
        &self.generator
    }

    pub fn discriminator_params(&self) -> &ParameterStore {
        &self.disc_params
    }

    pub fn net(&self) -> &TridentNet {
        &self.net
    }

    /// Spectrograms `[B, T, F, 2]` of equal-length signals.
    fn spectra(&self, signals: &[&[f32]]) -> Result<Tensor<f32>> {
        let frames = self.model.stft.frames(signals[0].len());
        let mut data = Vec::new();
        for s in signals {
            data.extend(self.plan.analyze(s)?.into_data());
        }
        Tensor::new([signals.len(), frames, self.model.stft.bins(), 2], data)
    }

    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { op } => Error::Diverged { step: self.step + 1, detail: format!("non-finite value from `{op}`") },
            other => other,
        }
    }

    /// Discriminator scores `D(reference, test)` with the given parameter vars.
    fn score(&self, tape: &mut Tape<f32>, params: &crate::model::Bound<f32>, reference: &Var<f32>, test: &Var<f32>) -> Result<Var<f32>> {
        let mut ctx = Ctx::new(tape, params, Mode::Train);
        self.disc.forward(&mut ctx, reference, test)
    }

    /// One generator update with the discriminator frozen, then one
    /// discriminator update on the detached enhancement.
    pub fn train_step(&mut self, batch: &[&Pair]) -> Result<LossReport> {
        self.train_step_inner(batch).map_err(|e| self.diverged(e))
    }

    fn train_step_inner(&mut self, batch: &[&Pair]) -> Result<LossReport> {
        let g = self.generator_step(batch)?;
        let l_d = self.discriminator_step(&g)?;
        self.step += 1;
        Ok(LossReport { l_d: Some(l_d), ..g.report })
    }

    fn learning_rates(&self) -> (f64, f64) {
        let n = self.step + 1;
        let lr_g = warmup_lr(n, self.config.lr_generator, self.config.warmup_steps);
        let lr_d = if self.config.warmup_discriminator {
            warmup_lr(n, self.config.lr_discriminator, self.config.warmup_steps)
        } else {
            self.config.lr_discriminator
        };
        (lr_g, lr_d)
    }

    /// Updates the generator on `L` with the discriminator bound as constants.
    fn generator_step(&mut self, batch: &[&Pair]) -> Result<GeneratorStep> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let noisy: Vec<&[f32]> = batch.iter().map(|p| p.noisy.samples()).collect();
        let clean: Vec<&[f32]> = batch.iter().map(|p| p.clean.samples()).collect();
        if clean.iter().chain(&noisy).any(|s| s.len() != clean[0].len()) {
            return Err(Error::Signal("batch signals differ in length".into()));
        }
        let clean_spec = self.spectra(&clean)?;
        let (lr_g, _) = self.learning_rates();

        let mut tape = Tape::<f32>::new();
        let bound_g = self.generator.bind(&mut tape, true);
        let bound_d = self.disc_params.bind(&mut tape, false);
        let out = {
            let mut ctx = Ctx::new(&mut tape, &bound_g, Mode::Train);
            self.net.forward(&mut ctx, &noisy)?
        };
        let s = tape.constant(clean_spec.clone());
        let w = tape.constant(stack(&clean)?);
        let d_est = self.score(&mut tape, &bound_d, &s, &out.spec)?;
        let loss = generator_losses(&mut tape, &out.spec, &s, &out.enhanced, &w, &d_est, self.weights)?;
        tape.backward(&loss.total)?;
        let grads = grads_of(&tape, bound_g.vars(), &self.generator);
        apply(&mut self.opt_g, &mut self.generator, &grads, lr_g)?;
        self.generator.apply_bn_updates(&out.bn_updates, BN_MOMENTUM);

        let len = clean[0].len();
        let enhanced = out.enhanced.value().data();
        let quality = (0..batch.len())
            .map(|b| quality_proxy(&enhanced[b * len..(b + 1) * len], clean[b]))
            .collect::<Result<Vec<f64>>>()?;
        Ok(GeneratorStep { report: loss.report, clean_spec, est_spec: out.spec.value().clone(), quality })
    }

    /// Updates the discriminator on `L_D` against the detached enhancement.
    fn discriminator_step(&mut self, g: &GeneratorStep) -> Result<f64> {
        let (_, lr_d) = self.learning_rates();
        let mut tape = Tape::<f32>::new();
        let bound_d = self.disc_params.bind(&mut tape, true);
        let s = tape.constant(g.clean_spec.clone());
        let e = tape.constant(g.est_spec.clone());
        let d_clean = self.score(&mut tape, &bound_d, &s, &s)?;
        let d_est = self.score(&mut tape, &bound_d, &s, &e)?;
        let l_d = discriminator_loss(&mut tape, &d_clean, &d_est, &g.quality)?;
        tape.backward(&l_d)?;
        let grads = grads_of(&tape, bound_d.vars(), &self.disc_params);
        apply(&mut self.opt_d, &mut self.disc_params, &grads, lr_d)?;
        Ok(l_d.value().item() as f64)
    }

    /// Batch indices for the next step, drawn from `(seed, step)` alone so a
    /// resumed run sees the same batches.
    pub fn next_batch(&self, dataset: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step);
        sample(&mut rng, dataset, self.config.batch_size.min(dataset)).into_vec()
    }

    /// Runs until `config.steps` steps are done, calling `on_step` after each.
    pub fn run(&mut self, data: &[Pair], mut on_step: impl FnMut(&Self, &LogRecord) -> Result<()>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("no training pairs".into()));
        }
        while self.step < self.config.steps {
            let batch: Vec<&Pair> = self.next_batch(data.len()).into_iter().map(|i| &data[i]).collect();
            let lr = warmup_lr(self.step + 1, self.config.lr_generator, self.config.warmup_steps);
            let losses = self.train_step(&batch)?;
            on_step(self, &LogRecord { step: self.step, lr, losses })?;
        }
        Ok(())
    }

    /// `D(S, test)` for each pair, without gradients.
    pub fn discriminate(&self, clean: &[f32], test: &[f32]) -> Result<f64> {
        let mut tape = Tape::<f32>::no_grad();
        let bound = self.disc_params.bind(&mut tape, false);
        let s = tape.constant(self.spectra(&[clean])?);
        let t = tape.constant(self.spectra(&[test])?);
        Ok(self.score(&mut tape, &bound, &s, &t)?.value().item() as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_model_config(&self.model)?;
        ck.push("meta.step", Tensor::new([2], split_u64(self.step))?)?;
        ck.push("meta.seed", Tensor::new([4], (0..4).map(|i| ((self.seed >> (16 * i)) & 0xffff) as f32).collect())?)?;
        ck.push_store("gen.", &self.generator)?;
        ck.push_store("disc.", &self.disc_params)?;
        self.opt_g.save("opt.g.", &mut ck)?;
        self.opt_d.save("opt.d.", &mut ck)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Rebuilds the full training state; `config` may extend the step budget.
    pub fn from_checkpoint(ck: &Checkpoint, weights: LossWeights, config: TrainConfig) -> Result<Self> {
        let model = ck.model_config()?;
        let seed = ck.require("meta.seed")?.data().iter().enumerate().fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i)));
        let mut t = Trainer::new(model, weights, config, seed)?;
        ck.restore_store("gen.", &mut t.generator)?;
        ck.restore_store("disc.", &mut t.disc_params)?;
        t.opt_g.load("opt.g.", ck)?;
        t.opt_d.load("opt.d.", ck)?;
        t.step = join_u64(ck.require("meta.step")?.data());
        Ok(t)
    }
}

/// Generator parameters and configuration from a checkpoint, for inference.
pub fn load_generator(ck: &Checkpoint, model: Option<&ModelConfig>) -> Result<(ModelConfig, ParameterStore)> {
    let cfg = match model {
        Some(cfg) => *cfg,
        None => ck.model_config()?,
    };
    let (_, mut store) = TridentNet::init(&cfg, 0)?;
    ck.restore_store("gen.", &mut store)?;
    Ok((cfg, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_pair, MixSpec, NoiseKind, SnrMode};
    use crate::model::model_forward;
    use crate::signal::Waveform;

    fn pairs(n: usize) -> Vec<Pair> {
        let specs = MixSpec::draw_many(3, n, &SnrMode::voicebank(), &NoiseKind::ALL, 0.05).unwrap();
        specs.iter().map(|s| make_pair(s).unwrap()).collect()
    }

    fn config(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            warmup_steps: 2,
            lr_generator: 1e-3,
            lr_discriminator: 1e-3,
            optimizer_generator: OptimizerKind::Lamb,
            ..TrainConfig::default()
        }
    }

    fn trainer(steps: u64) -> Trainer {
        Trainer::new(ModelConfig::tiny(), LossWeights::default(), config(steps), 11).unwrap()
    }

    fn snapshot(store: &ParameterStore) -> Vec<Vec<f32>> {
        store.iter().map(|(_, _, e)| e.tensor.data().to_vec()).collect()
    }

    fn losses(t: &mut Trainer, data: &[Pair]) -> Vec<LossReport> {
        let mut out = Vec::new();
        t.run(data, |_, r| {
            out.push(r.losses);
            Ok(())
        })
        .unwrap();
        out
    }

    #[test]
    fn generator_step_leaves_discriminator_untouched() {
        let data = pairs(2);
        let mut t = trainer(1);
        let (g0, d0) = (snapshot(&t.generator), snapshot(&t.disc_params));
        let step = t.generator_step(&[&data[0], &data[1]]).unwrap();
        assert_eq!(snapshot(&t.disc_params), d0);
        assert_ne!(snapshot(&t.generator), g0);

        let g1 = snapshot(&t.generator);
        t.discriminator_step(&step).unwrap();
        assert_eq!(snapshot(&t.generator), g1);
        assert_ne!(snapshot(&t.disc_params), d0);
    }

    #[test]
    fn zero_lambda_sends_no_gradient_through_the_discriminator() {
        let data = pairs(2);
        let t = Trainer::new(ModelConfig::tiny(), LossWeights { lambda: 0.0, ..Default::default() }, config(1), 5).unwrap();
        let clean: Vec<&[f32]> = data.iter().map(|p| p.clean.samples()).collect();
        let noisy: Vec<&[f32]> = data.iter().map(|p| p.noisy.samples()).collect();
        let mut tape = Tape::<f32>::new();
        let bound_g = t.generator.bind(&mut tape, true);
        let bound_d = t.disc_params.bind(&mut tape, true);
        let out = t.net.forward(&mut Ctx::new(&mut tape, &bound_g, Mode::Train), &noisy).unwrap();
        let s = tape.constant(t.spectra(&clean).unwrap());
        let w = tape.constant(stack(&clean).unwrap());
        let d_est = t.score(&mut tape, &bound_d, &s, &out.spec).unwrap();
        let loss = generator_losses(&mut tape, &out.spec, &s, &out.enhanced, &w, &d_est, t.weights).unwrap();
        assert!(loss.report.l_gan > 0.0);
        tape.backward(&loss.total).unwrap();
        assert_eq!(tape.grad_or_zeros(&d_est).norm(), 0.0);
        for v in bound_d.vars() {
            assert_eq!(tape.grad_or_zeros(v).norm(), 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_bits() {
        let data = pairs(4);
        let mut t = trainer(2);
        losses(&mut t, &data);
        let bytes = t.to_checkpoint().unwrap().to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let (cfg, store) = load_generator(&ck, None).unwrap();
        assert_eq!(cfg, t.model);
        for mode in [Mode::Train, Mode::Eval] {
            let a = model_forward(&data[0].noisy, &cfg, &store, mode, false).unwrap();
            let b = model_forward(&data[0].noisy, &t.model, &t.generator, mode, false).unwrap();
            let bits = |w: &Waveform| w.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.enhanced), bits(&b.enhanced));
        }
        let restored = Trainer::from_checkpoint(&ck, t.weights, t.config).unwrap();
        assert_eq!(restored.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn resumed_run_reproduces_the_loss_sequence() {
        let data = pairs(5);
        let mut full = trainer(4);
        let expected = losses(&mut full, &data);

        let mut first = trainer(2);
        let mut seen = losses(&mut first, &data);
        let ck = Checkpoint::from_bytes(&first.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
        let mut second = Trainer::from_checkpoint(&ck, first.weights, config(4)).unwrap();
        assert_eq!(second.step(), 2);
        seen.extend(losses(&mut second, &data));
        assert_eq!(seen, expected);
        assert_eq!(second.to_checkpoint().unwrap().to_bytes().unwrap(), full.to_checkpoint().unwrap().to_bytes().unwrap());
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let data = pairs(4);
        let (mut a, mut b) = (trainer(2), trainer(2));
        losses(&mut a, &data);
        losses(&mut b, &data);
        assert_eq!(a.to_checkpoint().unwrap().to_bytes().unwrap(), b.to_checkpoint().unwrap().to_bytes().unwrap());
    }

    #[test]
    fn exploding_updates_abort_with_the_step() {
        let data = pairs(2);
        let cfg = TrainConfig { lr_generator: 1e30, warmup_steps: 1, optimizer_generator: OptimizerKind::Adam, ..config(20) };
        let mut t = Trainer::new(ModelConfig::tiny(), LossWeights::default(), cfg, 1).unwrap();
        let err = t.run(&data, |_, _| Ok(())).unwrap_err();
        let Error::Diverged { step, .. } = err else { panic!("{err}") };
        assert!(step >= 2 && step == t.step() + 1, "{step}");
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let mut t = trainer(3);
        let a = t.next_batch(10);
        t.step = 1;
        let b = t.next_batch(10);
        t.step = 0;
        assert_eq!(t.next_batch(10), a);
        assert_ne!(a, b);
        assert!(a.iter().all(|&i| i < 10) && a.len() == 2);
    }
}
