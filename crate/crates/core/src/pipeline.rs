//! Experiment stages behind the `radar` CLI. Each stage reads its inputs
//! from, and writes its artifacts to, one output directory:
//!
//! | stage | writes |
//! |---|---|
//! | [`cmd_train_classifier`] | `classifier.rdr`, `classifier_log.csv` |
//! | [`cmd_train_detector`] | `detector.rdr`, `detector_log.csv` |
//! | [`cmd_finetune_radar`] | `detector_radar.rdr`, `finetune_log.csv` |
//! | [`cmd_attack`] | `attack_<kind>_<stage>.rdr`, `attack_<kind>_<stage>_trajectory.csv` |
//! | [`cmd_evaluate`] | `report_{pre,post}.{csv,txt}`, `report.txt`, `trajectory_{pre,post}_<kind>.csv` |
//!
//! Every random choice derives from the config seed, so rerunning a stage
//! with the same config reproduces its files byte for byte.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::attacks::{attack_dataset, write_trajectory_csv, AttackConfig, AttackKind, AttackResult};
use crate::config::{DatasetSource, DetectorStage, ExperimentConfig};
use crate::data::{load_cifar10, load_cifar10_test, split, synth_dataset, Dataset};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, fpr_threshold, render_tables, roc_auc_scores, sr_at_n, AttackMetrics, EvalReport};
use crate::nets::checkpoint::write_tensors;
use crate::nets::{build_classifier, build_detector, load_checkpoint, save_checkpoint, ArchConfig, Mode, Model, Role};
use crate::train::{radar_finetune, train_clean, train_detector_initial, TrainLog};

/// Independent stream seed for one pipeline component.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SEED_DATA: u64 = 0;
const SEED_TEST_SPLIT: u64 = 1;
const SEED_VAL_SPLIT: u64 = 2;
const SEED_INIT_F: u64 = 3;
const SEED_INIT_G: u64 = 4;
const SEED_TRAIN_F: u64 = 5;
const SEED_TRAIN_G: u64 = 6;
const SEED_FINETUNE: u64 = 7;

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let (pool, test) = match &cfg.dataset.source {
        DatasetSource::Synthetic(s) => {
            let s = crate::data::SynthConfig {
                seed: sub_seed(cfg.seed, SEED_DATA),
                ..s.clone()
            };
            let all = synth_dataset(&s)?;
            split(&all, 1.0 - cfg.dataset.test_fraction, sub_seed(cfg.seed, SEED_TEST_SPLIT))?
        }
        DatasetSource::Cifar10 { path, limit } => {
            let mut pool = load_cifar10(path)?;
            let mut test = load_cifar10_test(path)?;
            if let Some(n) = *limit {
                pool = pool.take(n.min(pool.len()))?;
                test = test.take(n.min(test.len()))?;
            }
            (pool, test)
        }
    };
    let (train, val) = split(&pool, cfg.dataset.train_fraction, sub_seed(cfg.seed, SEED_VAL_SPLIT))?;
    Ok(Splits { train, val, test })
}

fn arch(name: &str, ds: &Dataset) -> ArchConfig {
    let [c, h, w] = ds.image_shape();
    ArchConfig::new(name, c, h, w, ds.classes())
}

/// File layout under the output directory.
#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Paths { root: root.into() }
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier.rdr")
    }

    pub fn classifier_log(&self) -> PathBuf {
        self.root.join("classifier_log.csv")
    }

    pub fn detector(&self, stage: DetectorStage) -> PathBuf {
        match stage {
            DetectorStage::Initial => self.root.join("detector.rdr"),
            DetectorStage::Radar => self.root.join("detector_radar.rdr"),
        }
    }

    pub fn detector_log(&self) -> PathBuf {
        self.root.join("detector_log.csv")
    }

    pub fn finetune_log(&self) -> PathBuf {
        self.root.join("finetune_log.csv")
    }

    pub fn attack_batch(&self, kind: AttackKind, stage: DetectorStage) -> PathBuf {
        self.root.join(format!("attack_{kind}_{}.rdr", stage.name()))
    }

    pub fn attack_trajectory(&self, kind: AttackKind, stage: DetectorStage) -> PathBuf {
        self.root.join(format!("attack_{kind}_{}_trajectory.csv", stage.name()))
    }

    pub fn report(&self, tag: &str, ext: &str) -> PathBuf {
        self.root.join(format!("report_{tag}.{ext}"))
    }

    pub fn combined_report(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    pub fn eval_trajectory(&self, tag: &str, kind: AttackKind) -> PathBuf {
        self.root.join(format!("trajectory_{tag}_{kind}.csv"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_csv<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    body(&mut w).map_err(|e| Error::io(ctx(), e))?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(ctx(), e))
}

fn load_model(path: &Path, role: Role) -> Result<Model> {
    let mut m = load_checkpoint(path)?;
    if m.role() != role {
        return Err(Error::Checkpoint(format!("{} does not hold a {role:?}", path.display())));
    }
    m.set_mode(Mode::Eval);
    Ok(m)
}

pub fn cmd_train_classifier(cfg: &ExperimentConfig, out: &Path) -> Result<TrainLog> {
    let paths = Paths::new(out);
    create_dir(out)?;
    let s = load_splits(cfg)?;
    let mut f = build_classifier(&arch(&cfg.classifier_arch, &s.train), sub_seed(cfg.seed, SEED_INIT_F))?;
    let train_cfg = crate::train::TrainConfig {
        seed: sub_seed(cfg.seed, SEED_TRAIN_F),
        ..cfg.classifier_train.clone()
    };
    let log = train_clean(&mut f, &s.train, &s.val, &train_cfg)?;
    save_checkpoint(&f, &paths.classifier())?;
    write_csv(&paths.classifier_log(), |w| log.write_csv(w))?;
    Ok(log)
}

pub fn cmd_train_detector(cfg: &ExperimentConfig, out: &Path) -> Result<TrainLog> {
    let paths = Paths::new(out);
    let f = load_model(&paths.classifier(), Role::Classifier)?;
    let s = load_splits(cfg)?;
    let mut g = build_detector(&arch(&cfg.detector_arch, &s.train), sub_seed(cfg.seed, SEED_INIT_G))?;
    let train_cfg = crate::train::TrainConfig {
        seed: sub_seed(cfg.seed, SEED_TRAIN_G),
        ..cfg.detector_train.clone()
    };
    let log = train_detector_initial(&mut g, &f, &s.train, &s.val, &train_cfg, &cfg.detector_attack, cfg.detector_budget)?;
    g.set_mode(Mode::Eval);
    save_checkpoint(&g, &paths.detector(DetectorStage::Initial))?;
    write_csv(&paths.detector_log(), |w| log.write_csv(w))?;
    Ok(log)
}

pub fn cmd_finetune_radar(cfg: &ExperimentConfig, out: &Path) -> Result<TrainLog> {
    let paths = Paths::new(out);
    let f = load_model(&paths.classifier(), Role::Classifier)?;
    let mut g = load_model(&paths.detector(DetectorStage::Initial), Role::Detector)?;
    let s = load_splits(cfg)?;
    let train_cfg = crate::train::TrainConfig {
        seed: sub_seed(cfg.seed, SEED_FINETUNE),
        ..cfg.finetune_train.clone()
    };
    let log = radar_finetune(&mut g, &f, &s.train, &s.val, &train_cfg, &cfg.finetune_attack)?;
    save_checkpoint(&g, &paths.detector(DetectorStage::Radar))?;
    write_csv(&paths.finetune_log(), |w| log.write_csv(w))?;
    Ok(log)
}

/// Detector threshold at `fpr` percent false positives on `ds`, clamped
/// into `[0, 1]` (an infinite threshold means nothing can be flagged).
pub fn calibrate_threshold(g: &Model, ds: &Dataset, fpr: f64) -> Result<(Vec<f64>, f64)> {
    let scores = g.detect(ds.images())?;
    let tau = fpr_threshold(&scores, fpr)?.min(1.0);
    Ok((scores, tau))
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub results: Vec<(AttackKind, AttackResult)>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Runs every configured attack on the test set against `f` and `g` and
/// scores the detector. Attacks see the threshold calibrated at
/// `eval.threshold_fpr` on the benign test scores.
pub fn evaluate_detector(f: &Model, g: &Model, test: &Dataset, cfg: &ExperimentConfig, label: &str) -> Result<Evaluation> {
    let clean_pred = f.classify(test.images())?;
    let clean_accuracy = accuracy(&clean_pred, test.labels())?;
    let (benign, tau) = calibrate_threshold(g, test, cfg.eval.threshold_fpr)?;
    let keep = cfg.eval.trajectory_images;
    let mut attacks = Vec::new();
    let mut results = Vec::new();
    for &kind in &cfg.eval.attacks {
        let attack_cfg = AttackConfig {
            kind,
            detector_threshold: tau,
            record_loss_trajectory: keep > 0,
            ..cfg.attack.clone()
        };
        let mut r = attack_dataset(f, Some(g), test, &attack_cfg)?;
        r.trajectory.retain(|p| p.image_id < keep);
        let scores = r.detector_scores.clone().unwrap_or_default();
        let pairs: Vec<(f64, bool)> = scores.iter().copied().zip(r.classifier_fooled.iter().copied()).collect();
        let sr = cfg
            .eval
            .sr_n
            .iter()
            .map(|&n| Ok((n, sr_at_n(&benign, &pairs, n)?)))
            .collect::<Result<Vec<_>>>()?;
        let finals: Option<Vec<f64>> = r.final_points().iter().map(|p| p.loss_bce).collect();
        let correct = r.classifier_fooled.iter().filter(|&&b| !b).count();
        attacks.push(AttackMetrics {
            kind,
            auc: roc_auc_scores(&benign, &scores)?,
            sr,
            adversarial_accuracy: correct as f64 / test.len() as f64,
            detector_threshold: tau,
            median_final_bce: finals.and_then(median),
        });
        results.push((kind, r));
    }
    let a = &cfg.attack;
    let report = EvalReport {
        label: label.to_string(),
        clean_accuracy,
        attacks,
        metadata: vec![
            ("seed".into(), cfg.seed.to_string()),
            ("dataset".into(), test.provenance().to_string()),
            ("test_items".into(), test.len().to_string()),
            ("epsilon".into(), a.epsilon.to_string()),
            ("alpha".into(), a.alpha.to_string()),
            ("iters".into(), a.iters.to_string()),
            ("threshold_fpr".into(), cfg.eval.threshold_fpr.to_string()),
        ],
    };
    Ok(Evaluation { report, results })
}

/// Attacks the test set with `[attack]` against the chosen detector and
/// writes the adversarial batch plus its loss trajectory.
pub fn cmd_attack(cfg: &ExperimentConfig, out: &Path) -> Result<AttackResult> {
    let paths = Paths::new(out);
    let stage = cfg.attack_target;
    let f = load_model(&paths.classifier(), Role::Classifier)?;
    let g = load_model(&paths.detector(stage), Role::Detector)?;
    let test = load_splits(cfg)?.test;
    let (_, tau) = calibrate_threshold(&g, &test, cfg.eval.threshold_fpr)?;
    let attack_cfg = AttackConfig {
        detector_threshold: tau,
        record_loss_trajectory: true,
        ..cfg.attack.clone()
    };
    let r = attack_dataset(&f, Some(&g), &test, &attack_cfg)?;
    let n = test.len();
    let flags = |v: &[bool]| Tensor::new(vec![n], v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
    let tensors = vec![
        ("x".to_string(), test.images().clone()),
        ("x_adv".to_string(), r.x_adv.clone()),
        ("labels".to_string(), Tensor::new(vec![n], test.labels().iter().map(|&l| l as f64).collect())?),
        ("classifier_fooled".to_string(), flags(&r.classifier_fooled)?),
        ("detector_score".to_string(), Tensor::new(vec![n], r.detector_scores.clone().unwrap_or_default())?),
        ("detector_threshold".to_string(), Tensor::scalar(tau)),
    ];
    write_tensors(&paths.attack_batch(cfg.attack.kind, stage), &tensors)?;
    write_csv(&paths.attack_trajectory(cfg.attack.kind, stage), |w| write_trajectory_csv(w, &r.trajectory))?;
    Ok(r)
}

/// Evaluates the initial detector and, when present, the finetuned one.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Evaluation>> {
    let paths = Paths::new(out);
    let f = load_model(&paths.classifier(), Role::Classifier)?;
    let test = load_splits(cfg)?.test;
    let mut stages = vec![(DetectorStage::Initial, "pre", "pre-radar")];
    if paths.detector(DetectorStage::Radar).exists() {
        stages.push((DetectorStage::Radar, "post", "post-radar"));
    }
    let mut evals = Vec::new();
    for (stage, tag, label) in stages {
        let g = load_model(&paths.detector(stage), Role::Detector)?;
        let ev = evaluate_detector(&f, &g, &test, cfg, label)?;
        write_file(&paths.report(tag, "csv"), &ev.report.to_csv())?;
        write_file(&paths.report(tag, "txt"), &render_tables(std::slice::from_ref(&ev.report)))?;
        for (kind, r) in &ev.results {
            write_csv(&paths.eval_trajectory(tag, *kind), |w| write_trajectory_csv(w, &r.trajectory))?;
        }
        evals.push(ev);
    }
    let reports: Vec<EvalReport> = evals.iter().map(|e| e.report.clone()).collect();
    write_file(&paths.combined_report(), &render_tables(&reports))?;
    Ok(evals)
}

/// Every stage in order: classifier, detector, finetuning, evaluation.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Evaluation>> {
    cmd_train_classifier(cfg, out)?;
    cmd_train_detector(cfg, out)?;
    cmd_finetune_radar(cfg, out)?;
    cmd_evaluate(cfg, out)
}
