//! Oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radar_core::diff::{Tape, Tensor, Var};
use radar_core::nets::{ArchConfig, Mode, Model, Role};

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
const KINK_TOL: f64 = 1e-6;
const COORDS: usize = 12;
const BATCH: usize = 2;

struct Case {
    model: Model,
    x: Tensor,
    labels: Vec<usize>,
    targets: Vec<f64>,
}

impl Case {
    fn new(arch: &str, role: Role, seed: u64) -> Case {
        let cfg = ArchConfig::new(arch, 2, 8, 8, 3);
        let mut model = Model::build(&cfg, role, seed).unwrap();
        model.set_mode(Mode::Train);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
        let x: Vec<f64> = (0..BATCH * 2 * 8 * 8).map(|_| rng.gen_range(0.0..1.0)).collect();
        Case {
            model,
            x: Tensor::new(vec![BATCH, 2, 8, 8], x).unwrap(),
            labels: (0..BATCH).map(|_| rng.gen_range(0..3)).collect(),
            targets: (0..BATCH).map(|i| (i % 2) as f64).collect(),
        }
    }

    fn loss_on(&self, tape: &mut Tape, model: &Model, x: &Tensor, track_x: bool) -> (Var, Vec<Var>, Var) {
        let xv = tape.leaf(x.clone(), track_x);
        let params = model.bind(tape);
        let out = model.apply(tape, &params, xv).unwrap();
        let loss = match model.role() {
            Role::Classifier => tape.cross_entropy(out, &self.labels).unwrap(),
            Role::Detector => tape.binary_cross_entropy(out, &self.targets).unwrap(),
        };
        (xv, params, loss)
    }

    fn loss(&self, model: &Model, x: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let (_, _, l) = self.loss_on(&mut tape, model, x, false);
        tape.value(l).data()[0]
    }

    fn analytic(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let (xv, params, l) = self.loss_on(&mut tape, &self.model, &self.x, true);
        tape.backward(l).unwrap();
        let gx = tape.take_grad(xv).unwrap();
        let gp = self.model.collect_grads(&mut tape, &params).unwrap();
        (gx, gp)
    }
}

#[derive(Debug, Default)]
pub struct GradTally {
    pub checked: usize,
    /// Coordinates whose `1e-3` stencil straddled a ReLU kink.
    pub kinks: usize,
    pub worst: f64,
}

impl GradTally {
    /// Central difference at `h = 1e-3`. When a ReLU kink sits inside that
    /// stencil the difference quotient does not measure the derivative at
    /// the point, so the step shrinks until the stencil is kink-free.
    fn check(&mut self, analytic: f64, eval: &dyn Fn(f64) -> f64, what: &str) -> Result<(), String> {
        let fd = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
        let mut h = FD_STEP;
        let mut coarse = fd(h);
        loop {
            let fine = fd(h / 10.0);
            let scale = coarse.abs().max(fine.abs()).max(1e-5);
            if (coarse - fine).abs() / scale <= KINK_TOL || h < 1e-6 {
                break;
            }
            h /= 10.0;
            coarse = fine;
        }
        if h < FD_STEP {
            self.kinks += 1;
        }
        let scale = analytic.abs().max(coarse.abs()).max(1e-7);
        let rel = (analytic - coarse).abs() / scale;
        self.checked += 1;
        self.worst = self.worst.max(rel);
        if rel < GRAD_TOL {
            Ok(())
        } else {
            Err(format!("{what}: analytic {analytic:e} vs fd {coarse:e} at h {h:e} (rel {rel:e})"))
        }
    }
}

/// Input and parameter gradients of `arch` in `role` over `seeds` random
/// models and batches.
pub fn gradient_check(arch: &str, role: Role, seeds: u64) -> Result<GradTally, String> {
    let mut tally = GradTally::default();
    for seed in 0..seeds {
        let case = Case::new(arch, role, seed);
        let (gx, gp) = case.analytic();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc00d);

        for _ in 0..COORDS {
            let i = rng.gen_range(0..case.x.numel());
            let eval = |d: f64| {
                let mut x = case.x.clone();
                x.data_mut()[i] += d;
                case.loss(&case.model, &x)
            };
            tally.check(gx[i], &eval, &format!("{arch} {role:?} seed {seed} input[{i}]"))?;
        }

        for (p, g) in gp.iter().enumerate() {
            let numel = case.model.params()[p].value.numel();
            let picks: Vec<usize> = if numel <= COORDS {
                (0..numel).collect()
            } else {
                (0..COORDS).map(|_| rng.gen_range(0..numel)).collect()
            };
            for j in picks {
                let eval = |d: f64| {
                    let mut m = case.model.clone();
                    m.params_mut()[p].value.data_mut()[j] += d;
                    case.loss(&m, &case.x)
                };
                let name = &case.model.params()[p].name;
                tally.check(g[j], &eval, &format!("{arch} {role:?} seed {seed} {name}[{j}]"))?;
            }
        }
    }
    Ok(tally)
}

/// Pairwise count over every benign/adversarial pair, ties ½.
pub fn auc_oracle(benign: &[f64], adv: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in adv {
        for &b in benign {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (benign.len() * adv.len()) as f64
}

/// Tries every candidate threshold (each benign score, and +∞) and keeps
/// the smallest one whose benign flag rate stays within N%.
pub fn sr_oracle(benign: &[f64], adv: &[(f64, bool)], n: f64) -> f64 {
    let mut tau = f64::INFINITY;
    for &t in benign {
        let flagged = benign.iter().filter(|&&b| b >= t).count() as f64;
        if flagged / benign.len() as f64 <= n / 100.0 + 1e-15 && t < tau {
            tau = t;
        }
    }
    adv.iter().filter(|&&(s, fooled)| fooled && s < tau).count() as f64 / adv.len() as f64
}

/// Scores on a coarse grid so ties are common, or continuous.
pub fn scores(rng: &mut ChaCha8Rng, n: usize, tied: bool, shift: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.0..1.0) + shift;
            if tied {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        })
        .collect()
}

/// Random AUC instance: benign and adversarial scores, up to `max_n` each.
pub fn auc_instance(rng: &mut ChaCha8Rng, i: u64, max_n: usize) -> (Vec<f64>, Vec<f64>) {
    let nb = rng.gen_range(1..=max_n);
    let na = rng.gen_range(1..=max_n);
    let tied = i.is_multiple_of(2);
    let shift = rng.gen_range(-0.5..0.5);
    let b = scores(rng, nb, tied, 0.0);
    let a = scores(rng, na, tied, shift);
    (b, a)
}

/// Random SR@N instance: benign scores, scored attacks and N.
pub fn sr_instance(rng: &mut ChaCha8Rng, i: u64, max_n: usize) -> (Vec<f64>, Vec<(f64, bool)>, f64) {
    let nb = rng.gen_range(1..=max_n);
    let na = rng.gen_range(1..=max_n);
    let tied = i.is_multiple_of(3);
    let b = scores(rng, nb, tied, 0.0);
    let a: Vec<(f64, bool)> = scores(rng, na, tied, -0.2)
        .into_iter()
        .map(|s| (s, rng.gen_bool(0.8)))
        .collect();
    let n = [1.0, 5.0, 10.0, 50.0, rng.gen_range(0.5..99.0)][i as usize % 5];
    (b, a, n)
}
