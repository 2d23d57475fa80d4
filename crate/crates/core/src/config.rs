//! Experiment configuration: a flat `[section]` / `key = value` text format.
//!
//! ```text
//! [run]
//! seed = 7
//! out = runs/demo
//!
//! [dataset]
//! kind = synthetic
//! samples_per_class = 100
//!
//! [train.finetune]
//! epochs = 15
//! batch_size = 8
//! schedule = plateau
//! ```
//!
//! `#` starts a comment. Every key is optional except `run.seed`; omitted
//! keys take the desk-scale defaults documented on [`ExperimentConfig`].
//! Unknown sections and keys are errors that name the line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attacks::{AttackConfig, AttackKind};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::train::{PgdBudget, Schedule, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    /// Directory holding `data_batch_*.bin` and `test_batch.bin`. `limit`
    /// truncates both the training pool and the test set.
    Cifar10 { path: PathBuf, limit: Option<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Share of synthetic samples held out for testing (CIFAR-10 has its
    /// own test batch).
    pub test_fraction: f64,
    /// Share of the remaining pool used for training; the rest validates.
    pub train_fraction: f64,
}

/// Which detector checkpoint `attack` targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectorStage {
    Initial,
    Radar,
}

impl DetectorStage {
    pub fn name(self) -> &'static str {
        match self {
            DetectorStage::Initial => "initial",
            DetectorStage::Radar => "radar",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub attacks: Vec<AttackKind>,
    /// False-positive rates (percent) reported as SR@N.
    pub sr_n: Vec<f64>,
    /// False-positive rate (percent) at which the detector threshold handed
    /// to the adaptive attacks is calibrated.
    pub threshold_fpr: f64,
    /// Number of leading test images whose loss trajectories are kept.
    pub trajectory_images: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub classifier_arch: String,
    pub detector_arch: String,
    pub classifier_train: TrainConfig,
    pub detector_train: TrainConfig,
    pub finetune_train: TrainConfig,
    /// Budget of the evaluation attacks and of the `attack` command.
    pub attack: AttackConfig,
    pub attack_target: DetectorStage,
    /// PGD crafting for initial detector training.
    pub detector_attack: AttackConfig,
    pub detector_budget: PgdBudget,
    /// Adaptive crafting inside finetuning.
    pub finetune_attack: AttackConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Defaults for everything but the seed.
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            out: None,
            dataset: DatasetConfig {
                source: DatasetSource::Synthetic(SynthConfig {
                    noise: 0.02,
                    contrast: 0.3,
                    ..SynthConfig::default()
                }),
                test_fraction: 0.2,
                train_fraction: 0.7,
            },
            classifier_arch: "cnn-small".into(),
            detector_arch: "cnn-small".into(),
            classifier_train: TrainConfig {
                epochs: 10,
                batch_size: 32,
                lr: 1e-3,
                schedule: Schedule::Cosine { t_max: 10 },
                seed: 0,
            },
            detector_train: TrainConfig {
                epochs: 25,
                batch_size: 32,
                lr: 1e-3,
                schedule: Schedule::Plateau { patience: 3, factor: 0.1 },
                seed: 0,
            },
            finetune_train: TrainConfig {
                epochs: 40,
                batch_size: 8,
                lr: 1e-3,
                schedule: Schedule::Plateau { patience: 3, factor: 0.1 },
                seed: 0,
            },
            attack: AttackConfig {
                kind: AttackKind::Opgd,
                ..AttackConfig::default()
            },
            attack_target: DetectorStage::Initial,
            detector_attack: AttackConfig {
                iters: 4,
                ..AttackConfig::default()
            },
            detector_budget: PgdBudget::Uniform,
            finetune_attack: AttackConfig {
                kind: AttackKind::Opgd,
                iters: 10,
                ..AttackConfig::default()
            },
            eval: EvalConfig {
                attacks: AttackKind::ALL.to_vec(),
                sr_n: vec![5.0],
                threshold_fpr: 5.0,
                trajectory_images: 20,
            },
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::with_seed(0);
        let mut seed = None;
        let mut section = String::new();
        let mut seen = BTreeSet::new();
        let mut synth = match &cfg.dataset.source {
            DatasetSource::Synthetic(s) => s.clone(),
            DatasetSource::Cifar10 { .. } => unreachable!(),
        };
        let mut kind = "synthetic".to_string();
        let mut path: Option<PathBuf> = None;
        let mut limit = None;
        let mut schedule_keys: [ScheduleKeys; 3] = Default::default();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config { line: line_no, msg: format!("malformed section header `{line}`") })?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config { line: line_no, msg: format!("unknown section `[{name}]`") });
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config { line: line_no, msg: format!("expected `key = value`, got `{line}`") })?;
            if section.is_empty() {
                return Err(Error::Config { line: line_no, msg: format!("key `{key}` outside any section") });
            }
            if !seen.insert(format!("{section}.{key}")) {
                return Err(Error::Config { line: line_no, msg: format!("duplicate key `{key}` in [{section}]") });
            }
            let at = Loc { line: line_no, section: &section, key };
            match (section.as_str(), key) {
                ("run", "seed") => seed = Some(at.parse(value)?),
                ("run", "out") => cfg.out = Some(PathBuf::from(value)),

                ("dataset", "kind") => kind = value.to_string(),
                ("dataset", "path") => path = Some(PathBuf::from(value)),
                ("dataset", "limit") => limit = Some(at.parse(value)?),
                ("dataset", "test_fraction") => cfg.dataset.test_fraction = at.parse(value)?,
                ("dataset", "train_fraction") => cfg.dataset.train_fraction = at.parse(value)?,
                ("dataset", "classes") => synth.classes = at.parse(value)?,
                ("dataset", "samples_per_class") => synth.samples_per_class = at.parse(value)?,
                ("dataset", "channels") => synth.channels = at.parse(value)?,
                ("dataset", "image_size") => synth.image_size = at.parse(value)?,
                ("dataset", "noise") => synth.noise = at.parse(value)?,
                ("dataset", "contrast") => synth.contrast = at.parse(value)?,
                ("dataset", "blobs") => synth.blobs = at.parse(value)?,

                ("model", "classifier") => cfg.classifier_arch = value.to_string(),
                ("model", "detector") => cfg.detector_arch = value.to_string(),

                ("train.classifier", _) => set_train(&mut cfg.classifier_train, &mut schedule_keys[0], &at, value)?,
                ("train.detector", _) => set_train(&mut cfg.detector_train, &mut schedule_keys[1], &at, value)?,
                ("train.finetune", _) => set_train(&mut cfg.finetune_train, &mut schedule_keys[2], &at, value)?,

                ("attack", "target") => {
                    cfg.attack_target = match value {
                        "initial" => DetectorStage::Initial,
                        "radar" => DetectorStage::Radar,
                        other => return Err(at.bad(format!("expected `initial` or `radar`, got `{other}`"))),
                    }
                }
                ("attack", _) => set_attack(&mut cfg.attack, &at, value)?,
                ("attack.detector", "budget") => {
                    cfg.detector_budget = match value {
                        "fixed" => PgdBudget::Fixed,
                        "uniform" => PgdBudget::Uniform,
                        other => return Err(at.bad(format!("expected `fixed` or `uniform`, got `{other}`"))),
                    }
                }
                ("attack.detector", _) => set_attack(&mut cfg.detector_attack, &at, value)?,
                ("attack.finetune", _) => set_attack(&mut cfg.finetune_attack, &at, value)?,

                ("eval", "attacks") => {
                    cfg.eval.attacks = value
                        .split(',')
                        .map(|s| s.trim().parse::<AttackKind>().map_err(|e| at.bad(e.to_string())))
                        .collect::<Result<_>>()?
                }
                ("eval", "sr_n") => {
                    cfg.eval.sr_n = value.split(',').map(|s| at.parse(s.trim())).collect::<Result<_>>()?
                }
                ("eval", "threshold_fpr") => cfg.eval.threshold_fpr = at.parse(value)?,
                ("eval", "trajectory_images") => cfg.eval.trajectory_images = at.parse(value)?,

                _ => return Err(at.unknown()),
            }
        }

        cfg.seed = seed.ok_or(Error::Config { line: 0, msg: "missing required key `seed` in [run]".into() })?;
        cfg.dataset.source = match kind.as_str() {
            "synthetic" => DatasetSource::Synthetic(synth),
            "cifar10" => DatasetSource::Cifar10 {
                path: path.ok_or(Error::Config { line: 0, msg: "dataset kind cifar10 needs `path`".into() })?,
                limit,
            },
            other => {
                return Err(Error::Config {
                    line: 0,
                    msg: format!("unknown dataset kind `{other}` (expected synthetic or cifar10)"),
                })
            }
        };
        for (train, keys) in [
            &mut cfg.classifier_train,
            &mut cfg.detector_train,
            &mut cfg.finetune_train,
        ]
        .into_iter()
        .zip(&schedule_keys)
        {
            keys.apply(train)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks cross-field constraints; called by [`parse`](Self::parse).
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: String| Error::Config { line: 0, msg };
        for (name, f) in [("test_fraction", self.dataset.test_fraction), ("train_fraction", self.dataset.train_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(cfg_err(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        for (name, t) in [
            ("train.classifier", &self.classifier_train),
            ("train.detector", &self.detector_train),
            ("train.finetune", &self.finetune_train),
        ] {
            t.validate().map_err(|e| cfg_err(format!("[{name}] {e}")))?;
        }
        for (name, a) in [
            ("attack", &self.attack),
            ("attack.detector", &self.detector_attack),
            ("attack.finetune", &self.finetune_attack),
        ] {
            a.validate().map_err(|e| cfg_err(format!("[{name}] {e}")))?;
        }
        if self.detector_attack.kind != AttackKind::Pgd {
            return Err(cfg_err("[attack.detector] kind must be pgd".into()));
        }
        if !self.finetune_attack.kind.is_adaptive() {
            return Err(cfg_err("[attack.finetune] kind must be opgd or spgd".into()));
        }
        if self.eval.attacks.is_empty() || self.eval.sr_n.is_empty() {
            return Err(cfg_err("[eval] attacks and sr_n must be non-empty".into()));
        }
        for &n in self.eval.sr_n.iter().chain([&self.eval.threshold_fpr]) {
            if !(n > 0.0 && n < 100.0) {
                return Err(cfg_err(format!("[eval] rate {n} not in (0, 100)")));
            }
        }
        Ok(())
    }
}

const SECTIONS: &[&str] = &[
    "run",
    "dataset",
    "model",
    "train.classifier",
    "train.detector",
    "train.finetune",
    "attack",
    "attack.detector",
    "attack.finetune",
    "eval",
];

struct Loc<'a> {
    line: usize,
    section: &'a str,
    key: &'a str,
}

impl Loc<'_> {
    fn parse<T: FromStr>(&self, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| self.bad(format!("cannot parse `{value}`")))
    }

    fn bad(&self, msg: String) -> Error {
        Error::Config {
            line: self.line,
            msg: format!("[{}] {}: {msg}", self.section, self.key),
        }
    }

    fn unknown(&self) -> Error {
        Error::Config {
            line: self.line,
            msg: format!("unknown key `{}` in [{}]", self.key, self.section),
        }
    }
}

#[derive(Default)]
struct ScheduleKeys {
    kind: Option<(usize, String)>,
    t_max: Option<usize>,
    patience: Option<usize>,
    factor: Option<f64>,
}

impl ScheduleKeys {
    fn apply(&self, train: &mut TrainConfig) -> Result<()> {
        let kind = match &self.kind {
            Some((line, k)) => match k.as_str() {
                "constant" => Schedule::Constant,
                "cosine" => Schedule::Cosine { t_max: 10 },
                "plateau" => Schedule::Plateau { patience: 3, factor: 0.1 },
                other => {
                    return Err(Error::Config {
                        line: *line,
                        msg: format!("unknown schedule `{other}` (expected constant, cosine or plateau)"),
                    })
                }
            },
            None => train.schedule.clone(),
        };
        train.schedule = match kind {
            Schedule::Cosine { t_max } => Schedule::Cosine { t_max: self.t_max.unwrap_or(t_max) },
            Schedule::Plateau { patience, factor } => Schedule::Plateau {
                patience: self.patience.unwrap_or(patience),
                factor: self.factor.unwrap_or(factor),
            },
            Schedule::Constant => Schedule::Constant,
        };
        Ok(())
    }
}

fn set_train(train: &mut TrainConfig, sched: &mut ScheduleKeys, at: &Loc, value: &str) -> Result<()> {
    match at.key {
        "epochs" => train.epochs = at.parse(value)?,
        "batch_size" => train.batch_size = at.parse(value)?,
        "lr" => train.lr = at.parse(value)?,
        "schedule" => sched.kind = Some((at.line, value.to_string())),
        "t_max" => sched.t_max = Some(at.parse(value)?),
        "patience" => sched.patience = Some(at.parse(value)?),
        "factor" => sched.factor = Some(at.parse(value)?),
        _ => return Err(at.unknown()),
    }
    Ok(())
}

fn set_attack(attack: &mut AttackConfig, at: &Loc, value: &str) -> Result<()> {
    match at.key {
        "epsilon" => attack.epsilon = parse_fraction(value).ok_or_else(|| at.bad(format!("cannot parse `{value}`")))?,
        "alpha" => attack.alpha = at.parse(value)?,
        "iters" => attack.iters = at.parse(value)?,
        "kind" => attack.kind = value.parse().map_err(|e: Error| at.bad(e.to_string()))?,
        "threshold" => attack.detector_threshold = at.parse(value)?,
        _ => return Err(at.unknown()),
    }
    Ok(())
}

/// Accepts `0.0627` as well as `16/255`.
fn parse_fraction(value: &str) -> Option<f64> {
    match value.split_once('/') {
        Some((n, d)) => Some(n.trim().parse::<f64>().ok()? / d.trim().parse::<f64>().ok()?),
        None => value.parse().ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::parse("[run]\nseed = 9\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::with_seed(9));
    }

    #[test]
    fn full_round_of_keys() {
        let text = "\
# demo
[run]
seed = 3
out = /tmp/x

[dataset]
kind = synthetic
samples_per_class = 20   # small
image_size = 8
noise = 0.01

[model]
detector = cnn-res

[train.detector]
epochs = 4
schedule = cosine
t_max = 2

[attack]
epsilon = 8/255
kind = spgd
target = radar

[attack.finetune]
kind = spgd
iters = 3
threshold = 0.3

[eval]
attacks = pgd, spgd
sr_n = 1, 5, 10
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.out.as_deref(), Some(Path::new("/tmp/x")));
        match &cfg.dataset.source {
            DatasetSource::Synthetic(s) => {
                assert_eq!(s.samples_per_class, 20);
                assert_eq!(s.image_size, 8);
                assert_eq!(s.noise, 0.01);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.detector_arch, "cnn-res");
        assert_eq!(cfg.detector_train.epochs, 4);
        assert_eq!(cfg.detector_train.schedule, Schedule::Cosine { t_max: 2 });
        assert_eq!(cfg.attack.epsilon, 8.0 / 255.0);
        assert_eq!(cfg.attack.kind, AttackKind::Spgd);
        assert_eq!(cfg.attack_target, DetectorStage::Radar);
        assert_eq!(cfg.finetune_attack.iters, 3);
        assert_eq!(cfg.finetune_attack.detector_threshold, 0.3);
        assert_eq!(cfg.eval.attacks, vec![AttackKind::Pgd, AttackKind::Spgd]);
        assert_eq!(cfg.eval.sr_n, vec![1.0, 5.0, 10.0]);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = ExperimentConfig::parse("[run]\nseed = 1\n\n[attack]\nepsilom = 0.1\n").unwrap_err();
        match err {
            Error::Config { line, msg } => {
                assert_eq!(line, 5);
                assert!(msg.contains("epsilom"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_inputs_rejected() {
        for text in [
            "seed = 1\n",
            "[run]\n",
            "[run]\nseed = x\n",
            "[run]\nseed = 1\nseed = 2\n",
            "[nope]\n",
            "[run]\nseed = 1\n[dataset]\nkind = svhn\n",
            "[run]\nseed = 1\n[dataset]\nkind = cifar10\n",
            "[run]\nseed = 1\n[attack.finetune]\nkind = pgd\n",
            "[run]\nseed = 1\n[train.finetune]\nschedule = step\n",
            "[run]\nseed = 1\n[eval]\nsr_n = 100\n",
            "[run\nseed = 1\n",
            "[run]\nseed 1\n",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(Error::Config { .. })),
                "accepted {text:?}"
            );
        }
    }

    #[test]
    fn cifar_source() {
        let cfg = ExperimentConfig::parse("[run]\nseed = 1\n[dataset]\nkind = cifar10\npath = /data\nlimit = 500\n").unwrap();
        assert_eq!(
            cfg.dataset.source,
            DatasetSource::Cifar10 {
                path: PathBuf::from("/data"),
                limit: Some(500)
            }
        );
    }
}
