//! Desk-scale convolutional classifiers and detectors.
//!
//! | name        | layers                                                                      |
//! |-------------|-----------------------------------------------------------------------------|
//! | `cnn-small` | conv(16,3×3) relu pool2 conv(32,3×3) relu pool2 flatten dense(128) relu head |
//! | `cnn-res`   | as `cnn-small`, with a residual block conv-relu-conv(16) + skip after the first relu |
//! | `linear`    | flatten head                                                                |
//!
//! Convolutions use stride 1 and padding 1, pools are 2×2 means. The head is
//! a dense layer to `K` logits for classifiers and a dense layer to one logit
//! followed by a sigmoid for detectors (output is P(adv)).

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};

pub const ARCHITECTURES: &[&str] = &["cnn-small", "cnn-res", "linear"];

const HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Classifier,
    Detector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture name plus the input geometry and class count it is built for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl ArchConfig {
    pub fn new(name: &str, channels: usize, height: usize, width: usize, classes: usize) -> Self {
        ArchConfig {
            name: name.to_string(),
            channels,
            height,
            width,
            classes,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::new("cnn-small", 3, 32, 32, 10)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Pool {
        size: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// `x + conv(relu(conv(x)))`, channel count preserved.
    Residual {
        channels: usize,
        kernel: usize,
    },
    ClassHead {
        inputs: usize,
        classes: usize,
    },
    SigmoidHead {
        inputs: usize,
    },
}

impl LayerSpec {
    /// Parameter names (suffixes) and shapes this layer owns.
    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        // (suffix, shape, fan_in)
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                vec![
                    ("weight", vec![out_channels, in_channels, kernel, kernel], fan_in),
                    ("bias", vec![out_channels], fan_in),
                ]
            }
            LayerSpec::Residual { channels, kernel } => {
                let fan_in = channels * kernel * kernel;
                let w = vec![channels, channels, kernel, kernel];
                vec![
                    ("a.weight", w.clone(), fan_in),
                    ("a.bias", vec![channels], fan_in),
                    ("b.weight", w, fan_in),
                    ("b.bias", vec![channels], fan_in),
                ]
            }
            LayerSpec::Dense { inputs, outputs } => vec![
                ("weight", vec![inputs, outputs], inputs),
                ("bias", vec![outputs], inputs),
            ],
            LayerSpec::ClassHead { inputs, classes } => vec![
                ("weight", vec![inputs, classes], inputs),
                ("bias", vec![classes], inputs),
            ],
            LayerSpec::SigmoidHead { inputs } => vec![
                ("weight", vec![inputs, 1], inputs),
                ("bias", vec![1], inputs),
            ],
            LayerSpec::Relu | LayerSpec::Pool { .. } | LayerSpec::Flatten => vec![],
        }
    }

    fn is_head(&self) -> bool {
        matches!(self, LayerSpec::ClassHead { .. } | LayerSpec::SigmoidHead { .. })
    }
}

/// Expands an architecture name into its layer list.
pub fn layer_plan(cfg: &ArchConfig, role: Role) -> Result<Vec<LayerSpec>> {
    let [c, h, w] = cfg.input_shape();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::shape("layer_plan", format!("input {c}x{h}x{w}")));
    }
    if role == Role::Classifier && cfg.classes < 2 {
        return Err(Error::shape("layer_plan", "classifier needs at least two classes"));
    }
    let head = |inputs| match role {
        Role::Classifier => LayerSpec::ClassHead {
            inputs,
            classes: cfg.classes,
        },
        Role::Detector => LayerSpec::SigmoidHead { inputs },
    };
    let conv = |i, o| LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    let trunk_tail = |layers: &mut Vec<LayerSpec>| {
        layers.extend([
            LayerSpec::Relu,
            LayerSpec::Pool { size: 2 },
            conv(16, 32),
            LayerSpec::Relu,
            LayerSpec::Pool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 32 * (h / 4) * (w / 4),
                outputs: HIDDEN,
            },
            LayerSpec::Relu,
            head(HIDDEN),
        ]);
    };
    match cfg.name.as_str() {
        "cnn-small" | "cnn-res" => {
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::shape(
                    "layer_plan",
                    format!("{} needs spatial dims divisible by 4, got {h}x{w}", cfg.name),
                ));
            }
            let mut layers = vec![conv(c, 16)];
            if cfg.name == "cnn-res" {
                layers.push(LayerSpec::Relu);
                layers.push(LayerSpec::Residual {
                    channels: 16,
                    kernel: 3,
                });
            }
            trunk_tail(&mut layers);
            Ok(layers)
        }
        "linear" => Ok(vec![LayerSpec::Flatten, head(c * h * w)]),
        other => Err(Error::UnknownArchitecture(other.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    arch: ArchConfig,
    role: Role,
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
    mode: Mode,
}

pub fn build_classifier(cfg: &ArchConfig, seed: u64) -> Result<Model> {
    Model::build(cfg, Role::Classifier, seed)
}

pub fn build_detector(cfg: &ArchConfig, seed: u64) -> Result<Model> {
    Model::build(cfg, Role::Detector, seed)
}

impl Model {
    /// He-uniform weights (`U(±√(6/fan_in))`), zero biases.
    pub fn build(cfg: &ArchConfig, role: Role, seed: u64) -> Result<Model> {
        let layers = layer_plan(cfg, role)?;
        debug_assert!(layers.last().is_some_and(LayerSpec::is_head));
        debug_assert_eq!(layers.iter().filter(|l| l.is_head()).count(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            for (suffix, shape, fan_in) in layer.param_shapes() {
                let value = if suffix.ends_with("bias") {
                    Tensor::zeros(&shape)
                } else {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                };
                params.push(Param {
                    name: format!("layer{i}.{suffix}"),
                    value,
                });
            }
        }
        let mut cfg = cfg.clone();
        if role == Role::Detector {
            cfg.classes = 0;
        }
        Ok(Model {
            arch: cfg,
            role,
            layers,
            params,
            mode: Mode::Eval,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Records the parameters as tape leaves. They only track gradients in
    /// train mode.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        let track = self.mode == Mode::Train;
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), track))
            .collect()
    }

    /// Forward pass over already-bound parameters. Classifier output is
    /// `[B×K]` logits, detector output is `[B]` probabilities.
    pub fn apply(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let [c, h, w] = self.arch.input_shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape(
                "model input",
                format!("expected [B, {c}, {h}, {w}], got {s:?}"),
            ));
        }
        let batch = s[0];
        let mut cur = x;
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list matches layer plan");
        for layer in &self.layers {
            cur = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let y = tape.conv2d(cur, next(), stride, pad)?;
                    tape.add_channel_bias(y, next())?
                }
                LayerSpec::Relu => tape.relu(cur)?,
                LayerSpec::Pool { size } => tape.mean_pool(cur, size)?,
                LayerSpec::Flatten => tape.flatten(cur)?,
                LayerSpec::Dense { .. } | LayerSpec::ClassHead { .. } => {
                    let y = tape.matmul(cur, next())?;
                    tape.add_row_bias(y, next())?
                }
                LayerSpec::Residual { kernel, .. } => {
                    let pad = kernel / 2;
                    let a = tape.conv2d(cur, next(), 1, pad)?;
                    let a = tape.add_channel_bias(a, next())?;
                    let a = tape.relu(a)?;
                    let b = tape.conv2d(a, next(), 1, pad)?;
                    let b = tape.add_channel_bias(b, next())?;
                    tape.add(cur, b)?
                }
                LayerSpec::SigmoidHead { .. } => {
                    let y = tape.matmul(cur, next())?;
                    let y = tape.add_row_bias(y, next())?;
                    let y = tape.reshape(y, vec![batch])?;
                    tape.sigmoid(y)?
                }
            };
        }
        Ok(cur)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let params = self.bind(tape);
        self.apply(tape, &params, x)
    }

    /// Classifier logits `[B×K]` without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if self.role != Role::Classifier {
            return Err(Error::shape("predict", "model is a detector"));
        }
        self.infer(x)
    }

    /// Detector P(adv) per item.
    pub fn detect(&self, x: &Tensor) -> Result<Vec<f64>> {
        if self.role != Role::Detector {
            return Err(Error::shape("detect", "model is a classifier"));
        }
        Ok(self.infer(x)?.into_data())
    }

    /// Arg-max class per item.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.predict(x)?;
        let k = logits.shape()[1];
        Ok(logits.data().chunks(k).map(argmax).collect())
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), false))
            .collect();
        let xv = tape.leaf(x.clone(), false);
        let out = self.apply(&mut tape, &params, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Gradients of the tape's backward root for each bound parameter.
    pub fn collect_grads(&self, tape: &mut Tape, params: &[Var]) -> Result<Vec<Vec<f64>>> {
        params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| {
                tape.take_grad(v)
                    .ok_or_else(|| Error::shape("collect_grads", format!("no gradient for {}", p.name)))
            })
            .collect()
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
