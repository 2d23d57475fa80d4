//! L∞-bounded gradient attacks.
//!
//! [`pgd`] ascends the classifier cross-entropy. The adaptive attacks target
//! the classifier and the detector together:
//!
//! * [`spgd`] ascends `CE·1[f(x+δ)=y] + BCE(g(x+δ), adv)·1[g(x+δ)=adv]`, so
//!   each objective stops contributing once it is met.
//! * [`opgd`] steps along the active gradient with its component along the
//!   other objective's gradient removed: the classifier gradient while the
//!   classifier still predicts `y`, otherwise the detector gradient while the
//!   detector still flags the input.
//!
//! Conditions are evaluated per item at the current iterate. An item stops
//! moving as soon as both objectives hold. Every attack starts at δ = 0 and
//! is deterministic.
//!
//! Recorded trajectories use the attacker's minimization view of each loss:
//! `−log(1 − p_y)` for the classifier and `−log(1 − g)` for the detector.
//! Both fall to zero as the attack succeeds.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::data::Dataset;
use crate::diff::{dot, Tape, Tensor, BCE_CLAMP};
use crate::error::{Error, Result};
use crate::nets::{argmax, Mode, Model, Role};

/// Below this norm a projection target is treated as zero.
pub const ORTH_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Pgd,
    Spgd,
    Opgd,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Pgd, AttackKind::Opgd, AttackKind::Spgd];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Pgd => "pgd",
            AttackKind::Spgd => "spgd",
            AttackKind::Opgd => "opgd",
        }
    }

    pub fn is_adaptive(self) -> bool {
        self != AttackKind::Pgd
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pgd" => Ok(AttackKind::Pgd),
            "spgd" => Ok(AttackKind::Spgd),
            "opgd" => Ok(AttackKind::Opgd),
            other => Err(Error::InvalidAttack(format!("unknown attack kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// L∞ radius in pixel units.
    pub epsilon: f64,
    /// Sign-step size.
    pub alpha: f64,
    pub iters: usize,
    pub kind: AttackKind,
    pub record_loss_trajectory: bool,
    /// Detector scores at or above this are verdict `adv`.
    pub detector_threshold: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 16.0 / 255.0,
            alpha: 0.03,
            iters: 100,
            kind: AttackKind::Pgd,
            record_loss_trajectory: false,
            detector_threshold: 0.5,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidAttack(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidAttack(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(0.0..=1.0).contains(&self.detector_threshold) {
            return Err(Error::InvalidAttack(format!(
                "detector threshold must lie in [0, 1], got {}",
                self.detector_threshold
            )));
        }
        Ok(())
    }
}

/// Which objective drove an iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActiveCase {
    Classifier,
    Detector,
    Both,
    Done,
}

impl ActiveCase {
    pub fn name(self) -> &'static str {
        match self {
            ActiveCase::Classifier => "ce",
            ActiveCase::Detector => "bce",
            ActiveCase::Both => "both",
            ActiveCase::Done => "done",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub image_id: usize,
    pub iteration: usize,
    pub loss_ce: f64,
    /// Absent for attacks that do not involve a detector.
    pub loss_bce: Option<f64>,
    pub active_case: ActiveCase,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// `argmax f(x_adv) ≠ y` per item.
    pub classifier_fooled: Vec<bool>,
    /// Detector P(adv) at `x_adv`, when a detector took part.
    pub detector_scores: Option<Vec<f64>>,
    /// Detector score below the configured threshold, when a detector took part.
    pub detector_evaded: Option<Vec<bool>>,
    /// Sign steps actually applied to each item.
    pub steps_taken: Vec<usize>,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Largest `|⟨d, v⟩| / (‖u‖‖v‖)` over all orthogonal-PGD directions.
    pub max_orthogonality_error: f64,
}

impl AttackResult {
    /// Last recorded trajectory point per image.
    pub fn final_points(&self) -> Vec<&TrajectoryPoint> {
        let n = self.classifier_fooled.len();
        let mut last: Vec<Option<&TrajectoryPoint>> = vec![None; n];
        for p in &self.trajectory {
            last[p.image_id] = Some(p);
        }
        last.into_iter().flatten().collect()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip_[0,1](clip_{x_orig ± ε}(x_cur + α·sign(grad)))`, elementwise.
pub fn linf_step_project_slice(
    x_cur: &mut [f64],
    x_orig: &[f64],
    grad: &[f64],
    alpha: f64,
    epsilon: f64,
) {
    for ((x, &o), &g) in x_cur.iter_mut().zip(x_orig).zip(grad) {
        let stepped = *x + alpha * sign(g);
        *x = stepped.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
    }
}

pub fn linf_step_project(
    x_cur: &Tensor,
    x_orig: &Tensor,
    grad: &[f64],
    alpha: f64,
    epsilon: f64,
) -> Result<Tensor> {
    if x_cur.shape() != x_orig.shape() || grad.len() != x_cur.numel() {
        return Err(Error::shape(
            "linf_step_project",
            format!("{:?} / {:?} / {}", x_cur.shape(), x_orig.shape(), grad.len()),
        ));
    }
    let mut next = x_cur.clone();
    linf_step_project_slice(next.data_mut(), x_orig.data(), grad, alpha, epsilon);
    Ok(next)
}

/// `u − (⟨u,v⟩/⟨v,v⟩)·v`; `u` unchanged when `‖v‖ < ORTH_EPS`.
pub fn orth_component(u: &[f64], v: &[f64]) -> Vec<f64> {
    let vv = dot(v, v);
    if vv.sqrt() < ORTH_EPS {
        return u.to_vec();
    }
    let coef = dot(u, v) / vv;
    u.iter().zip(v).map(|(a, b)| a - coef * b).collect()
}

/// Attacker-side classifier loss `−log(1 − softmax(z)_y)`.
fn attacker_ce(row: &[f64], label: usize) -> f64 {
    let lse = |it: &mut dyn Iterator<Item = f64>| {
        let vals: Vec<f64> = it.collect();
        let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    let all = lse(&mut row.iter().copied());
    let others = lse(&mut row.iter().enumerate().filter(|(j, _)| *j != label).map(|(_, &v)| v));
    all - others
}

/// Attacker-side detector loss `−log(1 − g)`.
fn attacker_bce(p: f64) -> f64 {
    -(1.0 - p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)).ln()
}

fn check_inputs(f: &Model, g: Option<&Model>, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if f.role() != Role::Classifier {
        return Err(Error::InvalidAttack("first model must be a classifier".into()));
    }
    if f.mode() != Mode::Eval {
        return Err(Error::NotEvalMode("attacking the classifier"));
    }
    if let Some(g) = g {
        if g.role() != Role::Detector {
            return Err(Error::InvalidAttack("second model must be a detector".into()));
        }
        if g.mode() != Mode::Eval {
            return Err(Error::NotEvalMode("attacking the detector"));
        }
    }
    if x.rank() != 4 || x.shape()[0] != y.len() {
        return Err(Error::shape(
            "attack",
            format!("inputs {:?} with {} labels", x.shape(), y.len()),
        ));
    }
    Ok(())
}

/// Per-item values of one gradient evaluation on a sub-batch.
struct Probe {
    logits: Vec<f64>,
    classes: usize,
    probs: Option<Vec<f64>>,
    grad_ce: Option<Vec<f64>>,
    grad_bce: Option<Vec<f64>>,
    grad_joint: Option<Vec<f64>>,
}

impl Probe {
    fn correct(&self, i: usize, label: usize) -> bool {
        argmax(&self.logits[i * self.classes..(i + 1) * self.classes]) == label
    }
}

fn classifier_grad(f: &Model, x: &Tensor, y: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let logits = f.forward(&mut tape, xv)?;
    let ce = tape.cross_entropy_items(logits, y)?;
    let loss = tape.sum(ce)?;
    let values = tape.value(logits).data().to_vec();
    tape.backward(loss)?;
    Ok((values, tape.take_grad(xv).expect("input leaf tracks gradients")))
}

fn detector_grad(g: &Model, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let probs = g.forward(&mut tape, xv)?;
    let targets = vec![1.0; x.shape()[0]];
    let bce = tape.bce_items(probs, &targets)?;
    let loss = tape.sum(bce)?;
    let values = tape.value(probs).data().to_vec();
    tape.backward(loss)?;
    Ok((values, tape.take_grad(xv).expect("input leaf tracks gradients")))
}

/// Masked joint objective on a single tape. The masks come from the forward
/// values, so the indicators are evaluated at the current iterate.
fn selective_grad(
    f: &Model,
    g: &Model,
    x: &Tensor,
    y: &[usize],
    threshold: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let logits = f.forward(&mut tape, xv)?;
    let probs = g.forward(&mut tape, xv)?;
    let k = tape.shape(logits)[1];
    let logit_vals = tape.value(logits).data().to_vec();
    let prob_vals = tape.value(probs).data().to_vec();
    let ce_mask: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(i, &l)| f64::from(u8::from(argmax(&logit_vals[i * k..(i + 1) * k]) == l)))
        .collect();
    let bce_mask: Vec<f64> = prob_vals
        .iter()
        .map(|&p| f64::from(u8::from(p >= threshold)))
        .collect();
    let ce = tape.cross_entropy_items(logits, y)?;
    let ce = tape.mul_const(ce, ce_mask)?;
    let ce = tape.sum(ce)?;
    let bce = tape.bce_items(probs, &vec![1.0; y.len()])?;
    let bce = tape.mul_const(bce, bce_mask)?;
    let bce = tape.sum(bce)?;
    let loss = tape.add(ce, bce)?;
    tape.backward(loss)?;
    let grad = tape.take_grad(xv).expect("input leaf tracks gradients");
    Ok((logit_vals, prob_vals, grad))
}

fn probe(
    kind: AttackKind,
    f: &Model,
    g: Option<&Model>,
    x: &Tensor,
    y: &[usize],
    threshold: f64,
) -> Result<Probe> {
    let classes = f.arch().classes;
    match (kind, g) {
        (AttackKind::Pgd, _) => {
            let (logits, grad) = classifier_grad(f, x, y)?;
            let probs = g.map(|g| g.detect(x)).transpose()?;
            Ok(Probe {
                logits,
                classes,
                probs,
                grad_ce: Some(grad),
                grad_bce: None,
                grad_joint: None,
            })
        }
        (AttackKind::Spgd, Some(g)) => {
            let (logits, probs, grad) = selective_grad(f, g, x, y, threshold)?;
            Ok(Probe {
                logits,
                classes,
                probs: Some(probs),
                grad_ce: None,
                grad_bce: None,
                grad_joint: Some(grad),
            })
        }
        (AttackKind::Opgd, Some(g)) => {
            let (logits, grad_ce) = classifier_grad(f, x, y)?;
            let (probs, grad_bce) = detector_grad(g, x)?;
            Ok(Probe {
                logits,
                classes,
                probs: Some(probs),
                grad_ce: Some(grad_ce),
                grad_bce: Some(grad_bce),
                grad_joint: None,
            })
        }
        (kind, None) => Err(Error::InvalidAttack(format!("{kind} needs a detector"))),
    }
}

fn attack_impl(
    kind: AttackKind,
    f: &Model,
    g: Option<&Model>,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    check_inputs(f, g, x, y, cfg)?;
    let n = y.len();
    let width = x.numel() / n;
    let tau = cfg.detector_threshold;
    let mut x_cur = x.clone();
    let mut active: Vec<usize> = (0..n).collect();
    let mut steps_taken = vec![0usize; n];
    let mut trajectory = Vec::new();
    let mut max_orth = 0.0f64;
    let mut iteration = 0;

    while iteration < cfg.iters && !active.is_empty() {
        let sub = x_cur.gather_leading(&active)?;
        let sub_y: Vec<usize> = active.iter().map(|&i| y[i]).collect();
        let pr = probe(kind, f, g, &sub, &sub_y, tau)?;
        let mut still_active = Vec::with_capacity(active.len());

        for (slot, &item) in active.iter().enumerate() {
            let label = y[item];
            let correct = pr.correct(slot, label);
            let flagged = pr.probs.as_ref().map(|p| p[slot] >= tau);
            let range = slot * width..(slot + 1) * width;

            let (case, direction): (ActiveCase, Option<Vec<f64>>) = match kind {
                AttackKind::Pgd => (
                    ActiveCase::Classifier,
                    Some(pr.grad_ce.as_ref().expect("pgd probe")[range.clone()].to_vec()),
                ),
                AttackKind::Spgd => {
                    let flagged = flagged.expect("spgd probe has detector");
                    let case = match (correct, flagged) {
                        (true, true) => ActiveCase::Both,
                        (true, false) => ActiveCase::Classifier,
                        (false, true) => ActiveCase::Detector,
                        (false, false) => ActiveCase::Done,
                    };
                    let dir = (case != ActiveCase::Done)
                        .then(|| pr.grad_joint.as_ref().expect("spgd probe")[range.clone()].to_vec());
                    (case, dir)
                }
                AttackKind::Opgd => {
                    let flagged = flagged.expect("opgd probe has detector");
                    let gce = &pr.grad_ce.as_ref().expect("opgd probe")[range.clone()];
                    let gbce = &pr.grad_bce.as_ref().expect("opgd probe")[range.clone()];
                    let (case, u, v) = if correct {
                        (ActiveCase::Classifier, gce, gbce)
                    } else if flagged {
                        (ActiveCase::Detector, gbce, gce)
                    } else {
                        (ActiveCase::Done, gce, gbce)
                    };
                    if case == ActiveCase::Done {
                        (case, None)
                    } else {
                        let d = orth_component(u, v);
                        let scale = dot(u, u).sqrt() * dot(v, v).sqrt();
                        if scale > 0.0 && dot(v, v).sqrt() >= ORTH_EPS {
                            max_orth = max_orth.max(dot(&d, v).abs() / scale);
                        }
                        (case, Some(d))
                    }
                }
            };

            if cfg.record_loss_trajectory {
                let row = &pr.logits[slot * pr.classes..(slot + 1) * pr.classes];
                trajectory.push(TrajectoryPoint {
                    image_id: item,
                    iteration,
                    loss_ce: attacker_ce(row, label),
                    loss_bce: pr.probs.as_ref().map(|p| attacker_bce(p[slot])),
                    active_case: case,
                });
            }

            if let Some(dir) = direction {
                let xs = &mut x_cur.data_mut()[item * width..(item + 1) * width];
                let xo = &x.data()[item * width..(item + 1) * width];
                linf_step_project_slice(xs, xo, &dir, cfg.alpha, cfg.epsilon);
                steps_taken[item] += 1;
                still_active.push(item);
            }
        }
        active = still_active;
        iteration += 1;
    }

    let logits = f.predict(&x_cur)?;
    let k = logits.shape()[1];
    let classifier_fooled: Vec<bool> = (0..n)
        .map(|i| argmax(&logits.data()[i * k..(i + 1) * k]) != y[i])
        .collect();
    let detector_scores = g.map(|g| g.detect(&x_cur)).transpose()?;
    let detector_evaded = detector_scores
        .as_ref()
        .map(|s| s.iter().map(|&p| p < tau).collect::<Vec<_>>());

    if cfg.record_loss_trajectory {
        // Closing point at x_adv for items that never reported `done`.
        for &item in &active {
            let row = &logits.data()[item * k..(item + 1) * k];
            let loss_bce = detector_scores.as_ref().map(|s| attacker_bce(s[item]));
            let case = if kind.is_adaptive()
                && classifier_fooled[item]
                && detector_evaded.as_ref().is_some_and(|e| e[item])
            {
                ActiveCase::Done
            } else {
                trajectory
                    .iter()
                    .rev()
                    .find(|p| p.image_id == item)
                    .map_or(ActiveCase::Classifier, |p| p.active_case)
            };
            trajectory.push(TrajectoryPoint {
                image_id: item,
                iteration,
                loss_ce: attacker_ce(row, y[item]),
                loss_bce,
                active_case: case,
            });
        }
        trajectory.sort_by_key(|p| (p.image_id, p.iteration));
    }

    Ok(AttackResult {
        x_adv: x_cur,
        classifier_fooled,
        detector_scores,
        detector_evaded,
        steps_taken,
        trajectory,
        max_orthogonality_error: max_orth,
    })
}

/// PGD on the classifier cross-entropy for `cfg.iters` steps.
pub fn pgd(f: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    attack_impl(AttackKind::Pgd, f, None, x, y, cfg)
}

/// Selective PGD against classifier and detector.
pub fn spgd(f: &Model, g: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    attack_impl(AttackKind::Spgd, f, Some(g), x, y, cfg)
}

/// Orthogonal PGD against classifier and detector.
pub fn opgd(f: &Model, g: &Model, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    attack_impl(AttackKind::Opgd, f, Some(g), x, y, cfg)
}

/// Dispatches on `cfg.kind`. PGD ignores the detector while crafting but
/// still reports its scores when one is given.
pub fn run_attack(
    f: &Model,
    g: Option<&Model>,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    match cfg.kind {
        AttackKind::Pgd => {
            let mut r = pgd(f, x, y, cfg)?;
            if let Some(g) = g {
                let scores = g.detect(&r.x_adv)?;
                r.detector_evaded = Some(scores.iter().map(|&p| p < cfg.detector_threshold).collect());
                r.detector_scores = Some(scores);
            }
            Ok(r)
        }
        kind => attack_impl(kind, f, g, x, y, cfg),
    }
}

/// Items per attack call in [`attack_dataset`].
const DATASET_CHUNK: usize = 256;

/// Attacks a whole dataset in chunks and stitches the per-chunk results
/// together, renumbering trajectory image ids globally.
pub fn attack_dataset(f: &Model, g: Option<&Model>, ds: &Dataset, cfg: &AttackConfig) -> Result<AttackResult> {
    let mut parts = Vec::new();
    let mut fooled = Vec::with_capacity(ds.len());
    let mut scores: Option<Vec<f64>> = g.map(|_| Vec::with_capacity(ds.len()));
    let mut evaded: Option<Vec<bool>> = g.map(|_| Vec::with_capacity(ds.len()));
    let mut steps = Vec::with_capacity(ds.len());
    let mut trajectory = Vec::new();
    let mut max_orth = 0.0f64;
    for start in (0..ds.len()).step_by(DATASET_CHUNK) {
        let idx: Vec<usize> = (start..(start + DATASET_CHUNK).min(ds.len())).collect();
        let (x, y) = ds.batch(&idx)?;
        let r = run_attack(f, g, &x, &y, cfg)?;
        parts.push(r.x_adv);
        fooled.extend(r.classifier_fooled);
        if let (Some(all), Some(s)) = (scores.as_mut(), r.detector_scores) {
            all.extend(s);
        }
        if let (Some(all), Some(e)) = (evaded.as_mut(), r.detector_evaded) {
            all.extend(e);
        }
        steps.extend(r.steps_taken);
        trajectory.extend(r.trajectory.into_iter().map(|p| TrajectoryPoint {
            image_id: p.image_id + start,
            ..p
        }));
        max_orth = max_orth.max(r.max_orthogonality_error);
    }
    Ok(AttackResult {
        x_adv: Tensor::concat_leading(&parts.iter().collect::<Vec<_>>())?,
        classifier_fooled: fooled,
        detector_scores: scores,
        detector_evaded: evaded,
        steps_taken: steps,
        trajectory,
        max_orthogonality_error: max_orth,
    })
}

/// CSV with columns `image_id,iteration,loss_ce,loss_bce,active_case`.
pub fn write_trajectory_csv<W: Write>(mut w: W, points: &[TrajectoryPoint]) -> std::io::Result<()> {
    writeln!(w, "image_id,iteration,loss_ce,loss_bce,active_case")?;
    for p in points {
        let bce = p.loss_bce.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            p.image_id,
            p.iteration,
            p.loss_ce,
            bce,
            p.active_case.name()
        )?;
    }
    Ok(())
}
