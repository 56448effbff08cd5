//! Optimization, evaluation, score fusion and checkpoints.

mod checkpoint;
mod eval;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{augment_random, batch_tensor, AugmentConfig, Dataset, Modality, SkeletonSample};
use crate::error::{config_err, shape_err, Error, Result};
use crate::network::Model;
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, FORMAT_VERSION};
pub use eval::{argmax, evaluate, fuse_scores, predict_scores, top_k_accuracy, EvalReport, FusionReport, StreamScores};

/// Step decay: `base_lr · gamma^(number of milestones ≤ epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub total_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { base_lr: 0.1, milestones: vec![30, 40], gamma: 0.1, total_epochs: 50 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return config_err(format!("base learning rate must be positive, got {}", self.base_lr));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return config_err(format!("milestones must be strictly increasing: {:?}", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_epochs) {
            return config_err(format!("milestones {:?} must lie below {} epochs", self.milestones, self.total_epochs));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Index(format!("epoch {epoch} outside a {}-epoch schedule", self.total_epochs)));
        }
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count() as i32;
        // 0.1 · 0.1 is not 0.01 in binary; dividing by an integral
        // reciprocal (10, 100, ...) lands on the correctly rounded decimal
        let inv = 1.0 / self.gamma;
        if inv.fract() == 0.0 && inv.powi(passed) < 2f64.powi(53) {
            Ok(self.base_lr / inv.powi(passed))
        } else {
            Ok(self.base_lr * self.gamma.powi(passed))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { momentum: 0.9, nesterov: true, weight_decay: 1e-4 }
    }
}

/// SGD with (Nesterov) momentum. One zero-initialized velocity per store
/// entry; only trainable, unfrozen entries are ever updated.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: OptimizerConfig) -> Self {
        let velocity = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { config, velocity }
    }

    /// `g = grad + wd·p; v = μv + g; p -= lr·(g + μv)` (Nesterov) or
    /// `p -= lr·v`. Weight decay skips biases and normalization scales.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, store holds {}",
                self.velocity.len(),
                store.len()
            )));
        }
        let OptimizerConfig { momentum: mu, nesterov, weight_decay } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let e = store.entry_mut(id);
            if !e.requires_grad() {
                continue;
            }
            let v = &mut self.velocity[id.index()];
            if v.shape() != e.value.shape() || e.grad.as_ref().is_some_and(|g| g.shape() != v.shape()) {
                return shape_err(format!("{}: gradient/velocity shape differs from {:?}", e.name, e.value.shape()));
            }
            let wd = if e.kind.decayed() { weight_decay } else { 0.0 };
            let grad = e.grad.as_ref().map(|g| g.data());
            for (i, (p, vel)) in e.value.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let g = grad.map_or(0.0, |g| g[i]) + wd * *p;
                *vel = mu * *vel + g;
                let update = if nesterov { g + mu * *vel } else { *vel };
                *p -= lr * update;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    /// Global graphs stay frozen for epochs `0..freeze_epochs`.
    pub freeze_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            freeze_epochs: 5,
            seed: 0,
            augment: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    // distinct, reproducible stream per epoch so resumed runs match
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64 + 1);
    r
}

fn diagnose(g: &Graph, store: &ParamStore) -> String {
    if let Some(e) = store.entries().iter().find(|e| !e.value.all_finite()) {
        return format!("parameter {}", e.name);
    }
    g.first_non_finite().unwrap_or_else(|| "loss".into())
}

/// Forward, loss and backward for one minibatch; gradients are left in
/// `store` and running statistics are updated. Returns the summed loss and
/// the number of correct top-1 predictions.
pub fn train_step(model: &Model, store: &mut ParamStore, batch: &[&SkeletonSample]) -> Result<(f64, usize)> {
    let labels: Vec<usize> = batch
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Config(format!("training sample {:?} has no label", s.id))))
        .collect::<Result<_>>()?;
    let x = batch_tensor(batch)?;
    let mut g = Graph::with_probes();
    let xv = g.constant(x);
    let scores = model.forward(&mut g, store, xv, Mode::Train)?;
    let loss = g.cross_entropy(scores, &labels)?;
    let lv = g.value(loss).item()?;
    if !lv.is_finite() {
        return Err(Error::NonFinite(diagnose(&g, store)));
    }
    let grads = g.backward(loss)?;
    store.zero_grads();
    g.accumulate_param_grads(&grads, store);
    store.apply_running_updates(&g.take_running_updates());
    let s = g.value(scores);
    let k = s.shape()[1];
    let correct = labels.iter().enumerate().filter(|(i, &l)| argmax(&s.data()[i * k..(i + 1) * k]) == l).count();
    Ok((lv * batch.len() as f64, correct))
}

/// Mutable training state: the parameters, the optimizer and the number of
/// epochs completed so far.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(store: ParamStore, cfg: &OptimizerConfig) -> Self {
        let optimizer = OptimizerState::new(&store, cfg.clone());
        Self { store, optimizer, epoch: 0 }
    }
}

/// Runs epochs `state.epoch..schedule.total_epochs`. `on_epoch` sees each
/// finished epoch (for logging or checkpointing) and may abort by
/// returning an error.
pub fn train<F>(
    model: &Model,
    state: &mut TrainState,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &TrainState) -> Result<()>,
{
    cfg.schedule.validate()?;
    if train_set.is_empty() {
        return config_err("training set is empty");
    }
    if cfg.batch_size == 0 {
        return config_err("batch size must be positive");
    }
    let mut logs = Vec::new();
    let translate_ok = train_set.modality == Modality::Joint;
    for epoch in state.epoch..cfg.schedule.total_epochs {
        if epoch >= cfg.freeze_epochs {
            model.unfreeze_global_graphs(&mut state.store);
        }
        let lr = cfg.schedule.lr_at_epoch(epoch)?;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<SkeletonSample>;
            let batch: Vec<&SkeletonSample> = match &cfg.augment {
                Some(a) => {
                    // bone and motion values are differences, which a
                    // translation would not affect in the raw skeleton
                    let a = AugmentConfig { max_translate: if translate_ok { a.max_translate } else { 0.0 }, ..a.clone() };
                    augmented = chunk
                        .iter()
                        .map(|&i| augment_random(&train_set.samples[i], rng.gen(), &a))
                        .collect::<Result<_>>()?;
                    augmented.iter().collect()
                }
                None => chunk.iter().map(|&i| &train_set.samples[i]).collect(),
            };
            let (l, c) = train_step(model, &mut state.store, &batch)?;
            state.optimizer.step(&mut state.store, lr)?;
            if let Some(e) = state.store.entries().iter().find(|e| !e.value.all_finite()) {
                return Err(Error::NonFinite(format!("parameter {} after update", e.name)));
            }
            loss_sum += l;
            correct += c;
        }
        state.store.zero_grads();
        let n = train_set.len() as f64;
        let val_acc = match val_set {
            Some(v) if !v.is_empty() => Some(evaluate(model, &state.store, v, &[1], cfg.batch_size)?.top_k[0]),
            _ => None,
        };
        state.epoch = epoch + 1;
        let log = EpochLog { epoch, lr, loss: loss_sum / n, train_acc: correct as f64 / n, val_acc };
        on_epoch(&log, state)?;
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};
    use crate::network::ModelConfig;
    use crate::params::ParamKind;

    #[test]
    fn default_schedule_values() {
        let s = Schedule::default();
        assert_eq!(s.lr_at_epoch(29).unwrap(), 0.1);
        assert_eq!(s.lr_at_epoch(30).unwrap(), 0.01);
        assert_eq!(s.lr_at_epoch(40).unwrap(), 0.001);
        assert!(s.lr_at_epoch(50).is_err());
        let odd = Schedule { gamma: 0.3, ..s.clone() };
        assert_eq!(odd.lr_at_epoch(45).unwrap(), 0.1 * 0.3f64.powi(2));
        let flat = Schedule { milestones: vec![], ..s.clone() };
        assert!((0..50).all(|e| flat.lr_at_epoch(e).unwrap() == 0.1));
        let lrs: Vec<f64> = (0..50).map(|e| s.lr_at_epoch(e).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(Schedule { milestones: vec![40, 30], ..s.clone() }.validate().is_err());
        assert!(Schedule { milestones: vec![30, 50], ..s }.validate().is_err());
    }

    fn scalar_store(p: f64, kind: ParamKind) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(p), kind);
        s
    }

    #[test]
    fn sgd_basic_cases() {
        let mut s = scalar_store(1.5, ParamKind::Weight);
        let id = s.id("p").unwrap();
        let cfg = OptimizerConfig { momentum: 0.0, nesterov: true, weight_decay: 0.0 };
        let mut opt = OptimizerState::new(&s, cfg.clone());
        s.accumulate_grad(id, &Tensor::scalar(0.0));
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).item().unwrap(), 1.5);
        s.zero_grads();
        s.accumulate_grad(id, &Tensor::scalar(2.0));
        opt.step(&mut s, 1.0).unwrap();
        assert_eq!(s.value(id).item().unwrap(), -0.5);

        let mut opt = OptimizerState::new(&s, OptimizerConfig::default());
        let before = s.value(id).clone();
        opt.step(&mut s, 0.0).unwrap();
        assert_eq!(s.value(id), &before);
    }

    #[test]
    fn nesterov_matches_scalar_recurrence() {
        // f(p) = 0.5·a·p², grad = a·p
        let (a, lr, mu, wd) = (3.0, 0.05, 0.9, 1e-4);
        let mut s = scalar_store(2.0, ParamKind::Weight);
        let id = s.id("p").unwrap();
        let mut opt = OptimizerState::new(&s, OptimizerConfig { momentum: mu, nesterov: true, weight_decay: wd });
        let (mut p, mut v) = (2.0f64, 0.0f64);
        for _ in 0..3 {
            s.zero_grads();
            let gp = a * s.value(id).item().unwrap();
            s.accumulate_grad(id, &Tensor::scalar(gp));
            opt.step(&mut s, lr).unwrap();
            let g = a * p + wd * p;
            v = mu * v + g;
            p -= lr * (g + mu * v);
            assert!((s.value(id).item().unwrap() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_and_freeze_rules() {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::scalar(1.0), ParamKind::Weight);
        let b = s.add("b", Tensor::scalar(1.0), ParamKind::Bias);
        let n = s.add("n", Tensor::scalar(1.0), ParamKind::Norm);
        let r = s.add("r", Tensor::scalar(1.0), ParamKind::Buffer);
        let f = s.add("f", Tensor::scalar(1.0), ParamKind::Weight);
        s.set_frozen(f, true);
        let mut opt = OptimizerState::new(&s, OptimizerConfig { momentum: 0.0, nesterov: false, weight_decay: 0.5 });
        opt.step(&mut s, 1.0).unwrap();
        assert_eq!(s.value(w).item().unwrap(), 0.5);
        for id in [b, n, r, f] {
            assert_eq!(s.value(id).item().unwrap(), 1.0);
        }
    }

    fn tiny_setup(samples: usize, seed: u64) -> (Model, ParamStore, Dataset) {
        let ds = synth_dataset(&SynthConfig { num_per_class: samples / 4, frames: 8, seed, ..Default::default() })
            .unwrap();
        let cfg = ModelConfig::tiny(3, 4, 8, 1);
        let (model, store) = Model::new(cfg, seed).unwrap();
        (model, store, ds)
    }

    #[test]
    fn one_step_reduces_single_sample_loss() {
        let (model, store, ds) = tiny_setup(4, 1);
        let one = Dataset::new(ds.samples[..1].to_vec(), vec![], Modality::Joint);
        let loss_of = |store: &ParamStore| {
            let mut s = store.clone();
            train_step(&model, &mut s, &[&one.samples[0]]).unwrap().0
        };
        let before = loss_of(&store);
        let cfg = TrainConfig {
            schedule: Schedule { base_lr: 0.01, milestones: vec![], gamma: 0.1, total_epochs: 1 },
            ..Default::default()
        };
        let mut state = TrainState::fresh(store, &cfg.optimizer);
        train(&model, &mut state, &one, None, &cfg, |_, _| Ok(())).unwrap();
        assert!(loss_of(&state.store) < before);
    }

    #[test]
    fn freeze_window_and_resume() {
        let (model, store, ds) = tiny_setup(8, 2);
        let cfg = TrainConfig {
            schedule: Schedule { base_lr: 0.05, milestones: vec![2], gamma: 0.1, total_epochs: 4 },
            freeze_epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let b_ids: Vec<_> = model.agcl_layers().map(|a| a.global_graph).collect();
        let initial: Vec<Tensor> = b_ids.iter().map(|&id| store.value(id).clone()).collect();
        let mut snapshots = Vec::new();
        let mut state = TrainState::fresh(store.clone(), &cfg.optimizer);
        let logs = train(&model, &mut state, &ds, Some(&ds), &cfg, |log, st| {
            snapshots.push((log.epoch, b_ids.iter().map(|&id| st.store.value(id).clone()).collect::<Vec<_>>()));
            Ok(())
        })
        .unwrap();
        assert_eq!(logs.len(), 4);
        for (epoch, bs) in &snapshots {
            if *epoch < 2 {
                assert_eq!(bs, &initial);
            } else {
                assert_ne!(bs, &initial);
            }
        }

        // interrupted after two epochs, resumed to the end: identical result
        let mut half = TrainState::fresh(store, &cfg.optimizer);
        let short = TrainConfig { schedule: Schedule { total_epochs: 2, milestones: vec![], ..cfg.schedule.clone() }, ..cfg.clone() };
        let first = train(&model, &mut half, &ds, Some(&ds), &short, |_, _| Ok(())).unwrap();
        assert_eq!(half.epoch, 2);
        let rest = train(&model, &mut half, &ds, Some(&ds), &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(rest[0].epoch, 2);
        let joined: Vec<_> = first.into_iter().chain(rest).collect();
        assert_eq!(joined, logs);
        assert_eq!(half.store, state.store);
    }

    #[test]
    fn empty_dataset_and_non_finite_loss() {
        let (model, store, ds) = tiny_setup(4, 3);
        let cfg = TrainConfig::default();
        let mut state = TrainState::fresh(store.clone(), &cfg.optimizer);
        let empty = Dataset::new(vec![], vec![], Modality::Joint);
        assert!(matches!(train(&model, &mut state, &empty, None, &cfg, |_, _| Ok(())), Err(Error::Config(_))));
        let mut bad = store;
        let fc = bad.id("fc.bias").unwrap();
        bad.set_value(fc, Tensor::full(&[4], f64::NAN)).unwrap();
        let err = train_step(&model, &mut bad, &[&ds.samples[0]]).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains("fc.bias")), "{err}");
    }
}
