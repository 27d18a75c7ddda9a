//! Episodic training: poly learning-rate schedule, SGD with momentum and L2
//! weight decay, random flips, periodic validation on training classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Dataset, Phase, SplitConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::heads::{LossBundle, Reduction};
use crate::inference::PrototypeMode;
use crate::metrics::{Accumulation, SplitAccumulator};
use crate::model::{ModelConfig, Network, ObjectiveOptions, TrainingPair};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFlags {
    pub use_pff: bool,
    pub use_mcl: bool,
    pub use_spt: bool,
    pub freeze_encoder: bool,
}

impl Default for TrainFlags {
    fn default() -> Self {
        Self {
            use_pff: true,
            use_mcl: true,
            use_spt: true,
            freeze_encoder: false,
        }
    }
}

impl TrainFlags {
    /// Single 3×3 fusion, no auxiliary losses.
    pub fn base() -> Self {
        Self {
            use_pff: false,
            use_mcl: false,
            use_spt: false,
            freeze_encoder: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub lambda_mcl: f64,
    pub seed: u64,
    pub flags: TrainFlags,
    pub reduction: Reduction,
    /// Random horizontal flip of each image/mask pair.
    pub flip: bool,
    /// Validate every this many episodes (0 disables).
    pub validate_every: usize,
    pub validation_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 20_000,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            batch_size: 1,
            lambda_mcl: 0.1,
            seed: 0,
            flags: TrainFlags::default(),
            reduction: Reduction::Mean,
            flip: true,
            validate_every: 1000,
            validation_episodes: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::InvalidConfig("episodes must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) || !(self.poly_power > 0.0) {
            return Err(Error::InvalidConfig("lr0 and poly_power must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("momentum must be in [0, 1) and weight_decay nonnegative".into()));
        }
        if self.lambda_mcl < 0.0 {
            return Err(Error::NegativeWeight(self.lambda_mcl));
        }
        Ok(())
    }

    /// Optimizer steps needed to consume every episode.
    pub fn total_steps(&self) -> usize {
        self.episodes.div_ceil(self.batch_size)
    }

    pub fn objective_options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            use_spt: self.flags.use_spt,
            use_mcl: self.flags.use_mcl,
            lambda_mcl: self.lambda_mcl,
            reduction: self.reduction,
            train_encoder: !self.flags.freeze_encoder,
        }
    }

    /// Model architecture implied by the flags for a split with `num_train_classes`.
    pub fn model_config(&self, num_train_classes: usize) -> ModelConfig {
        ModelConfig {
            fusion: if self.flags.use_pff { FusionKind::Pyramid } else { FusionKind::Base },
            num_train_classes,
            ..ModelConfig::default()
        }
    }
}

/// `lr0 · (1 − iter/total)^power`.
pub fn poly_lr(iter: usize, total: usize, lr0: f64, power: f64) -> Result<f64> {
    if iter > total {
        return Err(Error::ScheduleOverrun { iter, total });
    }
    if iter == total {
        return Ok(0.0);
    }
    Ok(lr0 * (1.0 - iter as f64 / total as f64).powf(power))
}

/// SGD with momentum and loss-coupled L2 decay:
/// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Gradients<T>,
    frozen: Vec<bool>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zero_gradients(),
            frozen: vec![false; params.len()],
        }
    }

    /// Excludes parameters from every update.
    pub fn freeze(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.frozen[id.index()] = true;
        }
    }

    pub fn velocity(&self) -> &Gradients<T> {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        let mu = T::from_f64(self.momentum);
        let wd = T::from_f64(self.weight_decay);
        let lr = T::from_f64(lr);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if self.frozen[id.index()] {
                continue;
            }
            let g = grads.get(id);
            let v = self.velocity.get_mut(id);
            let w = params.values_mut(id);
            for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
    }
}

/// One optimizer step over `pairs` (gradients averaged); returns the mean losses.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    sgd: &mut Sgd<T>,
    pairs: &[TrainingPair<T>],
    opts: &ObjectiveOptions,
    lr: f64,
) -> Result<LossBundle> {
    let first = pairs.first().ok_or(Error::Empty("training batch"))?;
    let mut grads = net.params.zero_gradients();
    let mut sums = net.objective(first, opts, Some(&mut grads))?;
    for pair in &pairs[1..] {
        let b = net.objective(pair, opts, Some(&mut grads))?;
        sums.l_q += b.l_q;
        sums.l_s += b.l_s;
        sums.l_seg += b.l_seg;
        sums.total += b.total;
    }
    let n = pairs.len() as f64;
    if pairs.len() > 1 {
        grads.scale(T::from_f64(1.0 / n));
    }
    if !grads.all_finite() {
        return Err(Error::InvalidConfig("non-finite gradient; lower the learning rate".into()));
    }
    sgd.step(&mut net.params, &grads, lr);
    Ok(LossBundle {
        l_q: sums.l_q / n,
        l_s: sums.l_s / n,
        l_seg: sums.l_seg / n,
        total: sums.total / n,
        lambda_mcl: opts.lambda_mcl,
    })
}

/// Mean-IoU on held-in classes after a given number of episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub episode: usize,
    pub mean_iou: f64,
    pub binary_iou: f64,
}

/// Loss of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Episodes consumed after this step.
    pub episode: usize,
    pub lr: f64,
    pub loss: LossBundle,
}

/// Stateful training loop; [`run_training`] drives it to completion.
pub struct Trainer {
    pub config: TrainConfig,
    pub split: SplitConfig,
    pub net: Network<f32>,
    sgd: Sgd<f32>,
    rng: ChaCha8Rng,
    lut: [u8; 256],
    step: usize,
    episode: usize,
    pub trace: Vec<StepRecord>,
    pub history: Vec<ValidationRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, split: SplitConfig) -> Result<Self> {
        config.validate()?;
        let model = config.model_config(split.train_classes.len());
        let net = Network::new(model, config.seed)?;
        Self::with_network(config, split, net)
    }

    /// Starts from an existing network (its architecture must match the flags).
    pub fn with_network(config: TrainConfig, split: SplitConfig, net: Network<f32>) -> Result<Self> {
        config.validate()?;
        let mut sgd = Sgd::new(&net.params, config.momentum, config.weight_decay);
        if config.flags.freeze_encoder {
            sgd.freeze(&net.encoder_param_ids());
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e),
            lut: split.train_label_lut(),
            config,
            split,
            net,
            sgd,
            step: 0,
            episode: 0,
            trace: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn episodes_done(&self) -> usize {
        self.episode
    }

    pub fn is_finished(&self) -> bool {
        self.episode >= self.config.episodes
    }

    /// Runs one optimizer step; returns `None` once every episode is consumed.
    pub fn step(&mut self, dataset: &Dataset) -> Result<Option<StepRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let batch = self.config.batch_size.min(self.config.episodes - self.episode);
        let mut pairs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut ep = sample_episode(dataset, &self.split, Phase::Train, 1, &mut self.rng)?;
            if self.config.flip {
                // support and query are flipped independently
                let flip_s = self.rng.random_bool(0.5);
                let flip_q = self.rng.random_bool(0.5);
                let flipped = ep.flipped();
                if flip_s {
                    ep.supports = flipped.supports;
                }
                if flip_q {
                    ep.query_image = flipped.query_image;
                    ep.query_mask = flipped.query_mask;
                    ep.query_labels = flipped.query_labels;
                }
            }
            pairs.push(TrainingPair::from_episode(&ep, &self.lut)?);
        }
        let lr = poly_lr(self.step, self.config.total_steps(), self.config.lr0, self.config.poly_power)?;
        let loss = train_step(&mut self.net, &mut self.sgd, &pairs, &self.config.objective_options(), lr)?;
        self.step += 1;
        let before = self.episode;
        self.episode += batch;
        let record = StepRecord {
            step: self.step,
            episode: self.episode,
            lr,
            loss,
        };
        self.trace.push(record);
        let every = self.config.validate_every;
        if every > 0 && self.config.validation_episodes > 0 && (before / every != self.episode / every || self.is_finished()) {
            let v = self.validate(dataset)?;
            self.history.push(v);
        }
        Ok(Some(record))
    }

    /// Support-guided mean-IoU on fresh train-class episodes; uses its own
    /// generator so training is unaffected.
    pub fn validate(&self, dataset: &Dataset) -> Result<ValidationRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7661_6c69 ^ self.episode as u64);
        let mut acc = SplitAccumulator::new(&self.split.train_classes, Accumulation::Split);
        for _ in 0..self.config.validation_episodes {
            let ep = sample_episode(dataset, &self.split, Phase::Train, 1, &mut rng)?;
            let pred = self.net.segment(&ep, PrototypeMode::Support)?;
            acc.add(ep.target_class, &pred.mask, &ep.query_mask)?;
        }
        let r = acc.report();
        // classes never drawn would score a vacuous 1.0; average the drawn ones only
        let drawn: Vec<f64> = r
            .per_class_counts
            .iter()
            .filter(|(_, c)| c.tp + c.fp + c.fn_ > 0)
            .map(|(k, _)| r.per_class_iou[k])
            .collect();
        let mean_iou = if drawn.is_empty() { r.mean_iou } else { drawn.iter().sum::<f64>() / drawn.len() as f64 };
        Ok(ValidationRecord {
            episode: self.episode,
            mean_iou,
            binary_iou: r.binary_iou,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network<f32>,
    pub trace: Vec<StepRecord>,
    pub history: Vec<ValidationRecord>,
    pub episodes: usize,
}

pub fn run_training(dataset: &Dataset, split: &SplitConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), split.clone())?;
    while trainer.step(dataset)?.is_some() {}
    Ok(TrainOutcome {
        episodes: trainer.episodes_done(),
        net: trainer.net,
        trace: trainer.trace,
        history: trainer.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, make_splits, GenConfig};

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 2.5e-4, 0.9).unwrap(), 2.5e-4);
        assert_eq!(poly_lr(100, 100, 2.5e-4, 0.9).unwrap(), 0.0);
        let half = poly_lr(50, 100, 1.0, 0.9).unwrap();
        assert!((half - (0.9 * 0.5f64.ln()).exp()).abs() < 1e-15);
        assert!(matches!(poly_lr(101, 100, 1.0, 0.9), Err(Error::ScheduleOverrun { .. })));
    }

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("a", vec![3], vec![1.0, -2.0, 0.5]);
        s.add("b", vec![2], vec![4.0, 0.25]);
        s
    }

    #[test]
    fn weight_decay_scales_by_one_minus_lr_wd() {
        let mut params = store();
        let before = params.clone();
        let mut sgd = Sgd::new(&params, 0.9, 1e-4);
        let zero = params.zero_gradients();
        sgd.step(&mut params, &zero, 0.1);
        for id in params.ids() {
            for (a, b) in params.values(id).iter().zip(before.values(id)) {
                assert_eq!(*a, b - 0.1 * (1e-4 * b));
                assert!((a - b * (1.0 - 0.1 * 1e-4)).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn momentum_follows_geometric_recurrence() {
        let mut params = store();
        let w0 = params.clone();
        let mut sgd = Sgd::new(&params, 0.9, 0.0);
        let mut g = params.zero_gradients();
        for (i, v) in g.get_mut(ParamId(0)).iter_mut().enumerate() {
            *v = 0.5 * (i as f64 + 1.0);
        }
        let lr = 0.01;
        for _ in 0..3 {
            sgd.step(&mut params, &g, lr);
        }
        let mu: f64 = 0.9;
        for (i, &gi) in g.get(ParamId(0)).iter().enumerate() {
            let v3 = gi * (1.0 + mu + mu * mu);
            assert!((sgd.velocity().get(ParamId(0))[i] - v3).abs() < 1e-15);
            // w3 = w0 − lr·(v1 + v2 + v3) with v_t = g·Σ_{j<t} μ^j
            let moved = lr * gi * (1.0 + (1.0 + mu) + (1.0 + mu + mu * mu));
            assert!((params.values(ParamId(0))[i] - (w0.values(ParamId(0))[i] - moved)).abs() < 1e-15);
        }
        assert_eq!(params.values(ParamId(1)), w0.values(ParamId(1)));
    }

    fn tiny_setup() -> (Dataset, SplitConfig, TrainConfig) {
        let ds = generate_dataset(&GenConfig {
            num_classes: 8,
            images_per_class: 6,
            image_size: 32,
            seed: 3,
        })
        .unwrap();
        let split = make_splits(8, 0).unwrap();
        let cfg = TrainConfig {
            episodes: 6,
            batch_size: 2,
            validate_every: 4,
            validation_episodes: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        (ds, split, cfg)
    }

    #[test]
    fn zero_learning_rate_leaves_params_bit_identical() {
        let (ds, split, _) = tiny_setup();
        let mut net = Network::<f32>::new(ModelConfig::micro(split.train_classes.len()), 1).unwrap();
        let before = net.params.clone();
        let mut sgd = Sgd::new(&net.params, 0.9, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = sample_episode(&ds, &split, Phase::Train, 1, &mut rng).unwrap();
        let pair = TrainingPair::from_episode(&ep, &split.train_label_lut()).unwrap();
        let b = train_step(&mut net, &mut sgd, &[pair], &ObjectiveOptions::default(), 0.0).unwrap();
        assert!(b.total > 0.0);
        assert_eq!(net.params, before);
    }

    #[test]
    fn runs_are_deterministic_and_frozen_encoder_stays_fixed() {
        let (ds, split, cfg) = tiny_setup();
        let a = run_training(&ds, &split, &cfg).unwrap();
        let b = run_training(&ds, &split, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.net.params, b.net.params);
        assert_eq!(a.trace.len(), 3);
        assert_eq!(a.episodes, 6);
        assert_eq!(a.history.len(), 2);
        assert_eq!(a.trace.last().unwrap().lr, poly_lr(2, 3, cfg.lr0, 0.9).unwrap());

        let frozen = TrainConfig {
            flags: TrainFlags {
                freeze_encoder: true,
                ..TrainFlags::default()
            },
            ..cfg.clone()
        };
        let init = Network::<f32>::new(frozen.model_config(split.train_classes.len()), frozen.seed).unwrap();
        let out = run_training(&ds, &split, &frozen).unwrap();
        for id in init.encoder_param_ids() {
            assert_eq!(init.params.values(id), out.net.params.values(id));
        }
        assert_ne!(init.params, out.net.params);

        let other_seed = TrainConfig { seed: 12, ..cfg };
        assert_ne!(run_training(&ds, &split, &other_seed).unwrap().trace, a.trace);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { episodes: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr0: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lambda_mcl: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert_eq!(TrainConfig { episodes: 7, batch_size: 2, ..TrainConfig::default() }.total_steps(), 4);
    }
}
