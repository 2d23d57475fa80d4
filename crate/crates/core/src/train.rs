//! Training loops: clean classifier training, detector training on PGD
//! examples, and adversarial finetuning of the detector against adaptive
//! attacks crafted on the fly.
//!
//! The classifier is only ever borrowed immutably by the detector loops.
//! Detector labels are `ben = 0`, `adv = 1`.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{attack_dataset, run_attack, AttackConfig, AttackKind};
use crate::data::Dataset;
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, roc_auc_scores};
use crate::nets::{argmax, Mode, Model, Role};

/// Items per forward pass when scoring or crafting outside the optimizer loop.
const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Cosine annealing to zero with period `2·t_max` epochs.
    Cosine { t_max: usize },
    /// Multiply the rate by `factor` after more than `patience` epochs
    /// without a relative validation-loss improvement of 1e-4.
    Plateau { patience: usize, factor: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            schedule: Schedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidTrain("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidTrain("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidTrain(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        match self.schedule {
            Schedule::Cosine { t_max: 0 } => Err(Error::InvalidTrain("t_max must be at least 1".into())),
            Schedule::Plateau { factor, .. } if !(factor > 0.0 && factor <= 1.0) => {
                Err(Error::InvalidTrain(format!("plateau factor {factor} not in (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in model
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Per-epoch learning-rate controller.
#[derive(Clone, Debug)]
struct LrSchedule {
    base: f64,
    current: f64,
    schedule: Schedule,
    best: f64,
    bad_epochs: usize,
}

impl LrSchedule {
    fn new(base: f64, schedule: Schedule) -> Self {
        LrSchedule {
            base,
            current: base,
            schedule,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    fn lr_for_epoch(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine { t_max } => {
                let phase = std::f64::consts::PI * epoch as f64 / t_max as f64;
                self.base * (1.0 + phase.cos()) / 2.0
            }
            _ => self.current,
        }
    }

    fn observe(&mut self, val_loss: f64) {
        if let Schedule::Plateau { patience, factor } = self.schedule {
            if val_loss < self.best * (1.0 - 1e-4) {
                self.best = val_loss;
                self.bad_epochs = 0;
            } else {
                self.bad_epochs += 1;
                if self.bad_epochs > patience {
                    self.current *= factor;
                    self.bad_epochs = 0;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Auc,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub metric: Metric,
    pub epochs: Vec<EpochLog>,
    /// Validation loss before the first update.
    pub initial_val_loss: f64,
    pub initial_val_metric: f64,
}

impl TrainLog {
    fn new(metric: Metric, initial_val_loss: f64, initial_val_metric: f64) -> Self {
        TrainLog {
            metric,
            epochs: Vec::new(),
            initial_val_loss,
            initial_val_metric,
        }
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    /// CSV with columns `epoch,split,metric,value`; epoch 0 is the state
    /// before training.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,split,metric,value")?;
        writeln!(w, "0,val,loss,{}", self.initial_val_loss)?;
        writeln!(w, "0,val,{},{}", self.metric, self.initial_val_metric)?;
        for e in &self.epochs {
            writeln!(w, "{},train,lr,{}", e.epoch, e.lr)?;
            writeln!(w, "{},train,loss,{}", e.epoch, e.train_loss)?;
            writeln!(w, "{},val,loss,{}", e.epoch, e.val_loss)?;
            writeln!(w, "{},val,{},{}", e.epoch, self.metric, e.val_metric)?;
        }
        Ok(())
    }
}

fn diverged(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Divergence { epoch, batch },
        other => other,
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng, drop_last: bool) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let b = batch_size.min(n);
    idx.chunks(b)
        .filter(|c| !drop_last || c.len() == b)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Mean cross-entropy and accuracy of a classifier over a dataset.
pub fn classifier_loss_and_accuracy(f: &Model, ds: &Dataset) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(ds.len());
    for start in (0..ds.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(ds.len())).collect();
        let (x, y) = ds.batch(&idx)?;
        let mut tape = Tape::new();
        let params: Vec<_> = f.params().iter().map(|p| tape.leaf(p.value.clone(), false)).collect();
        let xv = tape.leaf(x, false);
        let logits = f.apply(&mut tape, &params, xv)?;
        let ce = tape.cross_entropy_items(logits, &y)?;
        total += tape.value(ce).data().iter().sum::<f64>();
        let k = tape.shape(logits)[1];
        preds.extend(tape.value(logits).data().chunks(k).map(argmax));
    }
    Ok((total / ds.len() as f64, accuracy(&preds, ds.labels())?))
}

fn detector_scores(g: &Model, x: &Tensor) -> Result<Vec<f64>> {
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        out.extend(g.detect(&x.slice_leading(start, (start + CHUNK).min(n) - start)?)?);
    }
    Ok(out)
}

/// Mean BCE (ben = 0, adv = 1) and ROC-AUC of a detector on paired sets.
pub fn detector_loss_and_auc(g: &Model, benign: &Tensor, adversarial: &Tensor) -> Result<(f64, f64)> {
    let ben = detector_scores(g, benign)?;
    let adv = detector_scores(g, adversarial)?;
    let mut tape = Tape::new();
    let probs: Vec<f64> = ben.iter().chain(&adv).copied().collect();
    let targets: Vec<f64> = std::iter::repeat_n(0.0, ben.len())
        .chain(std::iter::repeat_n(1.0, adv.len()))
        .collect();
    let n = probs.len();
    let p = tape.leaf(Tensor::new(vec![n], probs)?, false);
    let loss = tape.binary_cross_entropy(p, &targets)?;
    Ok((tape.value(loss).data()[0], roc_auc_scores(&ben, &adv)?))
}

/// Minimizes mean cross-entropy with Adam over shuffled mini-batches.
/// Leaves `f` in eval mode.
pub fn train_clean(f: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if f.role() != Role::Classifier {
        return Err(Error::InvalidTrain("train_clean needs a classifier".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(f, cfg.lr);
    let mut sched = LrSchedule::new(cfg.lr, cfg.schedule.clone());
    f.set_mode(Mode::Eval);
    let (l0, a0) = classifier_loss_and_accuracy(f, val)?;
    let mut log = TrainLog::new(Metric::Accuracy, l0, a0);

    for epoch in 1..=cfg.epochs {
        opt.lr = sched.lr_for_epoch(epoch - 1);
        f.set_mode(Mode::Train);
        let mut total = 0.0;
        for (bi, idx) in batches(train.len(), cfg.batch_size, &mut rng, false).iter().enumerate() {
            let (x, y) = train.batch(idx)?;
            let step = || -> Result<(f64, Vec<Vec<f64>>)> {
                let mut tape = Tape::new();
                let params = f.bind(&mut tape);
                let xv = tape.leaf(x, false);
                let logits = f.apply(&mut tape, &params, xv)?;
                let loss = tape.cross_entropy(logits, &y)?;
                let value = tape.value(loss).data()[0];
                tape.backward(loss)?;
                Ok((value, f.collect_grads(&mut tape, &params)?))
            };
            let (loss, grads) = step().map_err(|e| diverged(e, epoch, bi))?;
            opt.step(f, &grads);
            total += loss * idx.len() as f64;
        }
        f.set_mode(Mode::Eval);
        let (val_loss, val_acc) = classifier_loss_and_accuracy(f, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: 0 });
        }
        sched.observe(val_loss);
        log.epochs.push(EpochLog {
            epoch,
            lr: opt.lr,
            train_loss: total / train.len() as f64,
            val_loss,
            val_metric: val_acc,
        });
    }
    Ok(log)
}

/// `X_ben ⊕ X_adv` with labels `{ben}^B ⊕ {adv}^B`.
pub fn mixed_batch(benign: &Tensor, adversarial: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if benign.shape() != adversarial.shape() {
        return Err(Error::shape(
            "mixed_batch",
            format!("{:?} vs {:?}", benign.shape(), adversarial.shape()),
        ));
    }
    let b = benign.shape()[0];
    let x = Tensor::concat_leading(&[benign, adversarial])?;
    let mut labels = vec![0.0; b];
    labels.extend(std::iter::repeat_n(1.0, b));
    Ok((x, labels))
}

/// One optimizer step on mean BCE over a mixed batch; returns the loss.
fn detector_step(g: &mut Model, opt: &mut Adam, x: Tensor, labels: &[f64]) -> Result<f64> {
    g.set_mode(Mode::Train);
    let mut tape = Tape::new();
    let params = g.bind(&mut tape);
    let xv = tape.leaf(x, false);
    let probs = g.apply(&mut tape, &params, xv)?;
    let loss = tape.binary_cross_entropy(probs, labels)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = g.collect_grads(&mut tape, &params)?;
    opt.step(g, &grads);
    Ok(value)
}

fn check_detector_pair(g: &Model, f: &Model) -> Result<()> {
    if g.role() != Role::Detector || f.role() != Role::Classifier {
        return Err(Error::InvalidTrain("expected a detector and a classifier".into()));
    }
    if f.mode() != Mode::Eval {
        return Err(Error::NotEvalMode("frozen classifier"));
    }
    Ok(())
}

/// How many PGD iterations each detector-training example receives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PgdBudget {
    /// Every example gets the configured `iters`.
    #[default]
    Fixed,
    /// Each example gets a seeded uniform draw from `1..=iters`, so the
    /// detector also sees weak, partially converged perturbations.
    Uniform,
}

/// PGD examples for every item of `ds`. Without a random start, PGD run for
/// `k` iterations is exactly the `k`-th iterate of a longer run, so items
/// sharing a budget are attacked together.
pub fn pgd_examples(f: &Model, ds: &Dataset, attack: &AttackConfig, budget: PgdBudget, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let cfg = AttackConfig {
        kind: AttackKind::Pgd,
        record_loss_trajectory: false,
        ..attack.clone()
    };
    if budget == PgdBudget::Fixed || cfg.iters <= 1 {
        return Ok(attack_dataset(f, None, ds, &cfg)?.x_adv);
    }
    let iters: Vec<usize> = (0..ds.len()).map(|_| rng.gen_range(1..=cfg.iters)).collect();
    let mut out = ds.images().clone();
    let width = out.numel() / ds.len();
    let mut levels = iters.clone();
    levels.sort_unstable();
    levels.dedup();
    for k in levels {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| iters[i] == k).collect();
        let x_adv = attack_dataset(f, None, &ds.subset(&idx)?, &AttackConfig { iters: k, ..cfg.clone() })?.x_adv;
        for (j, &i) in idx.iter().enumerate() {
            out.data_mut()[i * width..(i + 1) * width].copy_from_slice(&x_adv.data()[j * width..(j + 1) * width]);
        }
    }
    Ok(out)
}

/// Trains the detector to separate clean inputs from PGD examples crafted
/// against the frozen classifier. PGD starts at δ = 0 and ignores the
/// detector, so each image's adversarial counterpart is crafted once up
/// front. Batches hold `B` clean items and their `B` counterparts;
/// incomplete trailing batches are dropped.
pub fn train_detector_initial(
    g: &mut Model,
    f: &Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    attack: &AttackConfig,
    budget: PgdBudget,
) -> Result<TrainLog> {
    cfg.validate()?;
    attack.validate()?;
    check_detector_pair(g, f)?;
    let mut budget_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00b0_d6e7);
    let adv_train = pgd_examples(f, train, attack, budget, &mut budget_rng)?;
    let adv_val = pgd_examples(f, val, attack, budget, &mut budget_rng)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(g, cfg.lr);
    let mut sched = LrSchedule::new(cfg.lr, cfg.schedule.clone());
    g.set_mode(Mode::Eval);
    let (l0, a0) = detector_loss_and_auc(g, val.images(), &adv_val)?;
    let mut log = TrainLog::new(Metric::Auc, l0, a0);

    for epoch in 1..=cfg.epochs {
        opt.lr = sched.lr_for_epoch(epoch - 1);
        let mut total = 0.0;
        let mut steps = 0;
        for (bi, idx) in batches(train.len(), cfg.batch_size, &mut rng, true).iter().enumerate() {
            let (x_ben, _) = train.batch(idx)?;
            let x_adv = adv_train.gather_leading(idx)?;
            let (x, labels) = mixed_batch(&x_ben, &x_adv)?;
            total += detector_step(g, &mut opt, x, &labels).map_err(|e| diverged(e, epoch, bi))?;
            steps += 1;
        }
        g.set_mode(Mode::Eval);
        let (val_loss, val_auc) = detector_loss_and_auc(g, val.images(), &adv_val)?;
        sched.observe(val_loss);
        log.epochs.push(EpochLog {
            epoch,
            lr: opt.lr,
            train_loss: total / steps.max(1) as f64,
            val_loss,
            val_metric: val_auc,
        });
    }
    Ok(log)
}

/// Adversarial finetuning of the detector. For every batch of `B` clean
/// items: put `g` in eval mode, craft adaptive adversarials against the
/// frozen classifier and the current detector, then take one descent step
/// on the mean BCE of the `2B` mixed batch. Validation uses a fixed set of
/// adversarials crafted against the detector as it was on entry.
pub fn radar_finetune(
    g: &mut Model,
    f: &Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    attack: &AttackConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    attack.validate()?;
    check_detector_pair(g, f)?;
    if !attack.kind.is_adaptive() {
        return Err(Error::InvalidAttack(format!(
            "finetuning needs an adaptive attack (opgd or spgd), got {}",
            attack.kind
        )));
    }
    let craft_cfg = AttackConfig {
        record_loss_trajectory: false,
        ..attack.clone()
    };
    g.set_mode(Mode::Eval);
    let adv_val = attack_dataset(f, Some(g), val, &craft_cfg)?.x_adv;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(g, cfg.lr);
    let mut sched = LrSchedule::new(cfg.lr, cfg.schedule.clone());
    let (l0, a0) = detector_loss_and_auc(g, val.images(), &adv_val)?;
    let mut log = TrainLog::new(Metric::Auc, l0, a0);

    for epoch in 1..=cfg.epochs {
        opt.lr = sched.lr_for_epoch(epoch - 1);
        let mut total = 0.0;
        let mut steps = 0;
        for (bi, idx) in batches(train.len(), cfg.batch_size, &mut rng, true).iter().enumerate() {
            let (x_ben, y) = train.batch(idx)?;
            g.set_mode(Mode::Eval);
            let x_adv = run_attack(f, Some(g), &x_ben, &y, &craft_cfg)?.x_adv;
            let (x, labels) = mixed_batch(&x_ben, &x_adv)?;
            total += detector_step(g, &mut opt, x, &labels).map_err(|e| diverged(e, epoch, bi))?;
            steps += 1;
        }
        g.set_mode(Mode::Eval);
        let (val_loss, val_auc) = detector_loss_and_auc(g, val.images(), &adv_val)?;
        sched.observe(val_loss);
        log.epochs.push(EpochLog {
            epoch,
            lr: opt.lr,
            train_loss: total / steps.max(1) as f64,
            val_loss,
            val_metric: val_auc,
        });
    }
    g.set_mode(Mode::Eval);
    Ok(log)
}
