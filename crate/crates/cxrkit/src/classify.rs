//! The CNN classifier zoo: four architectures with a shared 2-class head
//! contract, training under a common hyperparameter set, and prediction.
//!
//! The four topologies keep their published structure (layer kinds, kernel
//! geometry, branching) but at reduced channel widths so they train in
//! minutes on one CPU core. Every model ends in a feature extractor plus a
//! small head; the split is what the activation-map explainer hooks into.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, init, loss, optim::Adam, AvgPool2d, BatchNorm2d, Concat, Flatten, GlobalAvgPool, Layer,
    MaxPool2d, Relu, Residual, Sequential, Tensor,
};
use crate::raster::{ClassLabel, LabeledImage, RasterImage, IMAGENET_MEAN, IMAGENET_STD};

/// The supported backbone families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Alexnet,
    Resnet50,
    Inceptionv3,
    Squeezenet,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Alexnet,
        Architecture::Resnet50,
        Architecture::Inceptionv3,
        Architecture::Squeezenet,
    ];

    /// Side length of the square input each architecture requires.
    pub fn input_size(self) -> usize {
        match self {
            // 244 is intentional, not a typo for 224.
            Architecture::Alexnet => 244,
            Architecture::Resnet50 => 244,
            Architecture::Inceptionv3 => 299,
            Architecture::Squeezenet => 224,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Alexnet => "alexnet",
            Architecture::Resnet50 => "resnet50",
            Architecture::Inceptionv3 => "inceptionv3",
            Architecture::Squeezenet => "squeezenet",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alexnet" => Ok(Architecture::Alexnet),
            "resnet50" => Ok(Architecture::Resnet50),
            "inceptionv3" => Ok(Architecture::Inceptionv3),
            "squeezenet" => Ok(Architecture::Squeezenet),
            other => Err(Error::InvalidConfig(format!(
                "unknown architecture {other:?}; expected one of alexnet, resnet50, inceptionv3, squeezenet"
            ))),
        }
    }
}

/// Which backbone to build and whether to start from stored backbone weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: Architecture,
    #[serde(default)]
    pub pretrained: bool,
}

impl ArchitectureSpec {
    pub fn new(name: Architecture, pretrained: bool) -> Self {
        ArchitectureSpec { name, pretrained }
    }

    pub fn input_size(&self) -> usize {
        self.name.input_size()
    }
}

/// Training hyperparameters. The defaults are the pipeline's canonical
/// setting: batch 32, 30 epochs, learning rate 0.001, Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    32
}

fn default_epochs() -> usize {
    30
}

fn default_learning_rate() -> f64 {
    0.001
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            learning_rate: default_learning_rate(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `epochs = 0` is allowed and means "no training".
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Loss and accuracy on both splits after one pass over the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// A 2-way classification outcome. Probabilities come from a softmax over
/// the head scores, so they are nonnegative and sum to 1 (within rounding).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: ClassLabel,
    pub p_covid: f64,
    pub p_normal: f64,
}

impl Prediction {
    /// Probabilities indexed like [`ClassLabel::index`]: covid first.
    pub fn probabilities(&self) -> [f64; 2] {
        [self.p_covid, self.p_normal]
    }
}

/// A backbone plus 2-class head, with per-epoch training history.
///
/// The feature extractor and head are stored separately so explanation code
/// can read feature-map activations and push gradients back through the head
/// alone; `predict` always runs both.
pub struct TrainedClassifier {
    spec: ArchitectureSpec,
    pub(crate) features: Sequential,
    pub(crate) head: Sequential,
    history: Vec<EpochStats>,
}

impl fmt::Debug for TrainedClassifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainedClassifier")
            .field("spec", &self.spec)
            .field("epochs_trained", &self.history.len())
            .finish_non_exhaustive()
    }
}

impl TrainedClassifier {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_size()
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub(crate) fn infer_logits(&self, x: &Tensor) -> Array2<f32> {
        logits_matrix(&self.head.infer(&self.features.infer(x)))
    }

    pub fn export_state(&self) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        self.features.export_state(&mut out);
        self.head.export_state(&mut out);
        out
    }

    /// Writes architecture, weights, and history to one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "spec": self.spec,
            "history": self.history,
        });
        nn::store::write_checkpoint(path, "classifier", &header, &self.export_state())
    }

    /// Restores a model saved by [`TrainedClassifier::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let (header, state) = nn::store::read_checkpoint(path, "classifier")?;
        let spec: ArchitectureSpec = serde_json::from_value(header["spec"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad architecture spec in checkpoint: {e}")))?;
        let history: Vec<EpochStats> = serde_json::from_value(header["history"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad history in checkpoint: {e}")))?;
        let mut model = build_fresh(&spec, 0);
        let mut it = state.into_iter();
        model.features.import_state(&mut it)?;
        model.head.import_state(&mut it)?;
        if it.next().is_some() {
            return Err(Error::Checkpoint(format!(
                "{}: unexpected trailing parameter blocks",
                path.display()
            )));
        }
        model.history = history;
        Ok(model)
    }

    /// Writes only the feature-extractor weights, in the format
    /// [`build_classifier`] loads when `pretrained = true`.
    pub fn export_backbone(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({ "architecture": self.spec.name });
        let mut state = Vec::new();
        self.features.export_state(&mut state);
        nn::store::write_checkpoint(path, "backbone", &header, &state)
    }
}

/// Builds a classifier, looking for pretrained backbone checkpoints under
/// `pretrained/` in the cache directory (see [`crate::cache::cache_dir`]).
pub fn build_classifier(spec: &ArchitectureSpec, seed: u64) -> Result<TrainedClassifier> {
    build_classifier_from(spec, seed, &crate::cache::cache_dir().join("pretrained"))
}

/// Same as [`build_classifier`], but with an explicit directory searched for
/// `<architecture>.ckpt` backbone checkpoints. The head is always freshly
/// seeded; only backbone weights are ever loaded from disk.
pub fn build_classifier_from(
    spec: &ArchitectureSpec,
    seed: u64,
    weights_dir: &Path,
) -> Result<TrainedClassifier> {
    let mut model = build_fresh(spec, seed);
    if spec.pretrained {
        let path = weights_dir.join(format!("{}.ckpt", spec.name));
        if !path.is_file() {
            return Err(Error::Resource(format!(
                "pretrained weights for {} not found at {}; place a backbone checkpoint there \
                 (see TrainedClassifier::export_backbone) or use pretrained = false",
                spec.name,
                path.display()
            )));
        }
        let (header, state) = nn::store::read_checkpoint(&path, "backbone")?;
        let stored = header["architecture"].as_str().unwrap_or("");
        if stored != spec.name.as_str() {
            return Err(Error::Checkpoint(format!(
                "{}: backbone is for architecture {stored:?}, requested {}",
                path.display(),
                spec.name
            )));
        }
        let mut it = state.into_iter();
        model.features.import_state(&mut it)?;
        if it.next().is_some() {
            return Err(Error::Checkpoint(format!(
                "{}: unexpected trailing parameter blocks",
                path.display()
            )));
        }
    }
    Ok(model)
}

/// Seeded construction with no weight loading; same seed, same parameters.
fn build_fresh(spec: &ArchitectureSpec, seed: u64) -> TrainedClassifier {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (features, head) = match spec.name {
        Architecture::Alexnet => build_alexnet(&mut rng),
        Architecture::Resnet50 => build_resnet50(&mut rng),
        Architecture::Inceptionv3 => build_inceptionv3(&mut rng),
        Architecture::Squeezenet => build_squeezenet(&mut rng),
    };
    TrainedClassifier {
        spec: *spec,
        features,
        head,
        history: Vec::new(),
    }
}

type B = Box<dyn Layer>;

fn relu() -> B {
    Box::new(Relu::new())
}

fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> B {
    Box::new(init::conv2d_square(rng, cin, cout, k, s, p))
}

/// conv + batchnorm + relu, appended to `v`.
fn cbr_into(
    v: &mut Vec<B>,
    rng: &mut ChaCha8Rng,
    cin: usize,
    cout: usize,
    k: (usize, usize),
    s: (usize, usize),
    p: (usize, usize),
) {
    v.push(Box::new(init::conv2d(rng, cin, cout, k, s, p)));
    v.push(Box::new(BatchNorm2d::new(cout)));
    v.push(relu());
}

/// A branch made of chained conv+BN+ReLU stages `(cin, cout, k, s, p)`.
#[allow(clippy::type_complexity)]
fn cbr_branch(
    rng: &mut ChaCha8Rng,
    stages: &[(usize, usize, (usize, usize), (usize, usize), (usize, usize))],
) -> Sequential {
    let mut v: Vec<B> = Vec::new();
    for &(cin, cout, k, s, p) in stages {
        cbr_into(&mut v, rng, cin, cout, k, s, p);
    }
    Sequential::new(v)
}

/// 244 -> conv11/4 -> 60 -> pool 29 -> pool 14 -> pool 6; features (64, 6, 6).
fn build_alexnet(rng: &mut ChaCha8Rng) -> (Sequential, Sequential) {
    let features = Sequential::new(vec![
        conv(rng, 3, 16, 11, 4, 2),
        relu(),
        Box::new(MaxPool2d::new(3, 2, 0)),
        conv(rng, 16, 48, 5, 1, 2),
        relu(),
        Box::new(MaxPool2d::new(3, 2, 0)),
        conv(rng, 48, 96, 3, 1, 1),
        relu(),
        conv(rng, 96, 64, 3, 1, 1),
        relu(),
        conv(rng, 64, 64, 3, 1, 1),
        relu(),
        Box::new(MaxPool2d::new(3, 2, 0)),
    ]);
    // The fully connected stage: 1x1 convolutions over the flattened column
    // vector are exactly dense layers.
    let head = Sequential::new(vec![
        Box::new(Flatten::new()),
        conv(rng, 64 * 6 * 6, 128, 1, 1, 0),
        relu(),
        conv(rng, 128, 2, 1, 1, 0),
    ]);
    (features, head)
}

/// One pre-activation-free bottleneck: 1x1 down, 3x3 (strided first in a
/// stage), 1x1 up to `4 * width`, identity or projected shortcut, ReLU.
fn bottleneck(rng: &mut ChaCha8Rng, cin: usize, width: usize, stride: usize) -> Vec<B> {
    let cout = width * 4;
    let main = Sequential::new(vec![
        conv(rng, cin, width, 1, 1, 0),
        Box::new(BatchNorm2d::new(width)),
        relu(),
        conv(rng, width, width, 3, stride, 1),
        Box::new(BatchNorm2d::new(width)),
        relu(),
        conv(rng, width, cout, 1, 1, 0),
        Box::new(BatchNorm2d::new(cout)),
    ]);
    let shortcut = if stride != 1 || cin != cout {
        Some(Sequential::new(vec![
            conv(rng, cin, cout, 1, stride, 0),
            Box::new(BatchNorm2d::new(cout)),
        ]))
    } else {
        None
    };
    vec![Box::new(Residual::new(main, shortcut)), relu()]
}

/// Stem + bottleneck stages of 3/4/6/3 blocks; features (256, 8, 8).
fn build_resnet50(rng: &mut ChaCha8Rng) -> (Sequential, Sequential) {
    let mut layers: Vec<B> = vec![
        conv(rng, 3, 16, 7, 2, 3),
        Box::new(BatchNorm2d::new(16)),
        relu(),
        Box::new(MaxPool2d::new(3, 2, 1)),
    ];
    let stages: [(usize, usize, usize); 4] = [(8, 3, 1), (16, 4, 2), (32, 6, 2), (64, 3, 2)];
    let mut cin = 16;
    for (width, blocks, stride) in stages {
        for b in 0..blocks {
            let s = if b == 0 { stride } else { 1 };
            layers.extend(bottleneck(rng, cin, width, s));
            cin = width * 4;
        }
    }
    let features = Sequential::new(layers);
    let head = Sequential::new(vec![Box::new(GlobalAvgPool::new()), conv(rng, 256, 2, 1, 1, 0)]);
    (features, head)
}

/// Fire module: 1x1 squeeze, then parallel 1x1 and 3x3 expands concatenated
/// to `2 * expand` channels.
fn fire(rng: &mut ChaCha8Rng, cin: usize, squeeze: usize, expand: usize) -> Vec<B> {
    let e1 = Sequential::new(vec![conv(rng, squeeze, expand, 1, 1, 0), relu()]);
    let e3 = Sequential::new(vec![conv(rng, squeeze, expand, 3, 1, 1), relu()]);
    vec![
        conv(rng, cin, squeeze, 1, 1, 0),
        relu(),
        Box::new(Concat::new(vec![e1, e3])),
    ]
}

/// The late-downsampling fire-module stack; features (128, 13, 13).
fn build_squeezenet(rng: &mut ChaCha8Rng) -> (Sequential, Sequential) {
    let mut layers: Vec<B> = vec![conv(rng, 3, 16, 3, 2, 0), relu(), Box::new(MaxPool2d::new(3, 2, 0))];
    layers.extend(fire(rng, 16, 4, 16));
    layers.extend(fire(rng, 32, 4, 16));
    layers.push(Box::new(MaxPool2d::new(3, 2, 0)));
    layers.extend(fire(rng, 32, 8, 32));
    layers.extend(fire(rng, 64, 8, 32));
    layers.push(Box::new(MaxPool2d::new(3, 2, 0)));
    layers.extend(fire(rng, 64, 12, 48));
    layers.extend(fire(rng, 96, 12, 48));
    layers.extend(fire(rng, 96, 16, 64));
    layers.extend(fire(rng, 128, 16, 64));
    let features = Sequential::new(layers);
    // Class scores come from a 1x1 conv averaged over space; no ReLU before
    // the pool, so both logits can move freely in either direction.
    let head = Sequential::new(vec![conv(rng, 128, 2, 1, 1, 0), Box::new(GlobalAvgPool::new())]);
    (features, head)
}

fn inception_a(rng: &mut ChaCha8Rng, cin: usize) -> B {
    let b1 = cbr_branch(rng, &[(cin, 16, (1, 1), (1, 1), (0, 0))]);
    let b2 = cbr_branch(
        rng,
        &[
            (cin, 12, (1, 1), (1, 1), (0, 0)),
            (12, 16, (5, 5), (1, 1), (2, 2)),
        ],
    );
    let b3 = cbr_branch(
        rng,
        &[
            (cin, 16, (1, 1), (1, 1), (0, 0)),
            (16, 24, (3, 3), (1, 1), (1, 1)),
            (24, 24, (3, 3), (1, 1), (1, 1)),
        ],
    );
    let mut pool: Vec<B> = vec![Box::new(AvgPool2d::new(3, 1, 1))];
    cbr_into(&mut pool, rng, cin, 8, (1, 1), (1, 1), (0, 0));
    let b4 = Sequential::new(pool);
    // 16 + 16 + 24 + 8 = 64 channels out.
    Box::new(Concat::new(vec![b1, b2, b3, b4]))
}

fn reduction_a(rng: &mut ChaCha8Rng, cin: usize) -> B {
    let b1 = cbr_branch(rng, &[(cin, 48, (3, 3), (2, 2), (0, 0))]);
    let b2 = cbr_branch(
        rng,
        &[
            (cin, 12, (1, 1), (1, 1), (0, 0)),
            (12, 24, (3, 3), (1, 1), (1, 1)),
            (24, 24, (3, 3), (2, 2), (0, 0)),
        ],
    );
    let b3 = Sequential::new(vec![Box::new(MaxPool2d::new(3, 2, 0)) as B]);
    // 48 + 24 + cin channels out.
    Box::new(Concat::new(vec![b1, b2, b3]))
}

/// The factorized-7 block: 1x7 and 7x1 kernels in place of 7x7.
fn inception_b(rng: &mut ChaCha8Rng, cin: usize) -> B {
    let b1 = cbr_branch(rng, &[(cin, 24, (1, 1), (1, 1), (0, 0))]);
    let b2 = cbr_branch(
        rng,
        &[
            (cin, 16, (1, 1), (1, 1), (0, 0)),
            (16, 16, (1, 7), (1, 1), (0, 3)),
            (16, 24, (7, 1), (1, 1), (3, 0)),
        ],
    );
    let b3 = cbr_branch(
        rng,
        &[
            (cin, 16, (1, 1), (1, 1), (0, 0)),
            (16, 16, (7, 1), (1, 1), (3, 0)),
            (16, 16, (1, 7), (1, 1), (0, 3)),
            (16, 16, (7, 1), (1, 1), (3, 0)),
            (16, 24, (1, 7), (1, 1), (0, 3)),
        ],
    );
    let mut pool: Vec<B> = vec![Box::new(AvgPool2d::new(3, 1, 1))];
    cbr_into(&mut pool, rng, cin, 24, (1, 1), (1, 1), (0, 0));
    let b4 = Sequential::new(pool);
    // 24 * 4 = 96 channels out.
    Box::new(Concat::new(vec![b1, b2, b3, b4]))
}

fn reduction_b(rng: &mut ChaCha8Rng, cin: usize) -> B {
    let b1 = cbr_branch(
        rng,
        &[
            (cin, 16, (1, 1), (1, 1), (0, 0)),
            (16, 24, (3, 3), (2, 2), (0, 0)),
        ],
    );
    let b2 = cbr_branch(
        rng,
        &[
            (cin, 16, (1, 1), (1, 1), (0, 0)),
            (16, 16, (1, 7), (1, 1), (0, 3)),
            (16, 16, (7, 1), (1, 1), (3, 0)),
            (16, 24, (3, 3), (2, 2), (0, 0)),
        ],
    );
    let b3 = Sequential::new(vec![Box::new(MaxPool2d::new(3, 2, 0)) as B]);
    // 24 + 24 + cin channels out.
    Box::new(Concat::new(vec![b1, b2, b3]))
}

/// The widest block: two branches themselves fork into parallel 1x3 / 3x1
/// convolutions whose outputs are concatenated.
fn inception_c(rng: &mut ChaCha8Rng, cin: usize) -> B {
    let split = |rng: &mut ChaCha8Rng, c: usize| -> B {
        let row = cbr_branch(rng, &[(c, 24, (1, 3), (1, 1), (0, 1))]);
        let col = cbr_branch(rng, &[(c, 24, (3, 1), (1, 1), (1, 0))]);
        Box::new(Concat::new(vec![row, col]))
    };
    let b1 = cbr_branch(rng, &[(cin, 32, (1, 1), (1, 1), (0, 0))]);
    let mut v2: Vec<B> = Vec::new();
    cbr_into(&mut v2, rng, cin, 24, (1, 1), (1, 1), (0, 0));
    v2.push(split(rng, 24));
    let b2 = Sequential::new(v2);
    let mut v3: Vec<B> = Vec::new();
    cbr_into(&mut v3, rng, cin, 24, (1, 1), (1, 1), (0, 0));
    cbr_into(&mut v3, rng, 24, 28, (3, 3), (1, 1), (1, 1));
    v3.push(split(rng, 28));
    let b3 = Sequential::new(v3);
    let mut pool: Vec<B> = vec![Box::new(AvgPool2d::new(3, 1, 1))];
    cbr_into(&mut pool, rng, cin, 16, (1, 1), (1, 1), (0, 0));
    let b4 = Sequential::new(pool);
    // 32 + 48 + 48 + 16 = 144 channels out.
    Box::new(Concat::new(vec![b1, b2, b3, b4]))
}

/// 299 -> stem -> 35x35, A blocks, reduce to 17x17, factorized-7 B blocks,
/// reduce to 8x8, C blocks; features (144, 8, 8).
fn build_inceptionv3(rng: &mut ChaCha8Rng) -> (Sequential, Sequential) {
    let mut layers: Vec<B> = Vec::new();
    cbr_into(&mut layers, rng, 3, 8, (3, 3), (2, 2), (0, 0));
    cbr_into(&mut layers, rng, 8, 8, (3, 3), (1, 1), (0, 0));
    cbr_into(&mut layers, rng, 8, 16, (3, 3), (1, 1), (1, 1));
    layers.push(Box::new(MaxPool2d::new(3, 2, 0)));
    cbr_into(&mut layers, rng, 16, 20, (1, 1), (1, 1), (0, 0));
    cbr_into(&mut layers, rng, 20, 48, (3, 3), (1, 1), (0, 0));
    layers.push(Box::new(MaxPool2d::new(3, 2, 0)));
    layers.push(inception_a(rng, 48));
    layers.push(inception_a(rng, 64));
    layers.push(reduction_a(rng, 64));
    layers.push(inception_b(rng, 136));
    layers.push(inception_b(rng, 96));
    layers.push(reduction_b(rng, 96));
    layers.push(inception_c(rng, 144));
    layers.push(inception_c(rng, 144));
    let features = Sequential::new(layers);
    let head = Sequential::new(vec![Box::new(GlobalAvgPool::new()), conv(rng, 144, 2, 1, 1, 0)]);
    (features, head)
}

/// Features and head chained into one trainable unit. Parameters are visited
/// features-first, so optimizer state lines up across batches.
struct Tandem<'a> {
    features: &'a mut Sequential,
    head: &'a mut Sequential,
}

impl Layer for Tandem<'_> {
    fn infer(&self, x: &Tensor) -> Tensor {
        self.head.infer(&self.features.infer(x))
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let a = self.features.forward(x);
        self.head.forward(&a)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let ga = self.head.backward(gy);
        self.features.backward(&ga)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        self.features.visit_params(f);
        self.head.visit_params(f);
    }

    fn zero_grad(&mut self) {
        self.features.zero_grad();
        self.head.zero_grad();
    }
}

/// Encodes one image for a classifier: grayscale is replicated to three
/// channels, then standard per-channel normalization is applied.
pub(crate) fn image_to_input(img: &RasterImage, size: usize) -> Result<Tensor> {
    if img.width() != size || img.height() != size {
        return Err(Error::InvalidInput(format!(
            "classifier expects {size}x{size} input, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let rgb;
    let rgb_ref = match img.channels() {
        3 => img,
        1 => {
            rgb = RasterImage::from_fn(img.width(), img.height(), 3, |x, y, _| img.get(x, y, 0));
            &rgb
        }
        c => {
            return Err(Error::InvalidInput(format!(
                "classifier expects 1 or 3 channels, got {c}"
            )))
        }
    };
    let arr = crate::raster::normalize_for_model(rgb_ref, &IMAGENET_MEAN, &IMAGENET_STD)?;
    let mut x = Tensor::zeros((1, 3, size, size));
    for c in 0..3 {
        for y in 0..size {
            for xx in 0..size {
                x[[0, c, y, xx]] = arr[[c, y, xx]] as f32;
            }
        }
    }
    Ok(x)
}

/// (N, 2, 1, 1) head output viewed as an (N, 2) score matrix.
fn logits_matrix(t: &Tensor) -> Array2<f32> {
    let n = t.shape()[0];
    debug_assert_eq!(&t.shape()[1..], &[2, 1, 1]);
    Array2::from_shape_fn((n, 2), |(i, j)| t[[i, j, 0, 0]])
}

fn grad_tensor(g: &Array2<f32>) -> Tensor {
    Tensor::from_shape_fn((g.nrows(), 2, 1, 1), |(i, j, _, _)| g[[i, j]])
}

/// Copies the selected samples into one batch tensor.
fn gather_batch(items: &[Tensor], idx: &[usize]) -> Tensor {
    let sh = items[0].shape();
    let mut out = Tensor::zeros((idx.len(), sh[1], sh[2], sh[3]));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&items[i].index_axis(Axis(0), 0));
    }
    out
}

/// Label index chosen from a score row, ties toward covid.
fn argmax_label(z_covid: f32, z_normal: f32) -> usize {
    if z_covid >= z_normal {
        ClassLabel::Covid.index()
    } else {
        ClassLabel::Normal.index()
    }
}

fn count_correct(logits: &Array2<f32>, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| argmax_label(logits[[i, 0]], logits[[i, 1]]) == t)
        .count()
}

fn encode_set(set: &[LabeledImage], size: usize) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let mut xs = Vec::with_capacity(set.len());
    let mut ys = Vec::with_capacity(set.len());
    for sample in set {
        let x = image_to_input(&sample.image, size)
            .map_err(|e| Error::InvalidData(format!("sample {}: {e}", sample.source_id)))?;
        xs.push(x);
        ys.push(sample.label.index());
    }
    Ok((xs, ys))
}

/// Mean loss and correct count over a split, without touching weights or
/// normalization statistics.
fn evaluate_pass(
    model: &TrainedClassifier,
    xs: &[Tensor],
    ys: &[usize],
    batch: usize,
) -> (f64, usize) {
    let idx: Vec<usize> = (0..xs.len()).collect();
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for chunk in idx.chunks(batch) {
        let x = gather_batch(xs, chunk);
        let targets: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
        let logits = model.infer_logits(&x);
        let (loss, _) = loss::softmax_cross_entropy(&logits, &targets);
        loss_sum += loss as f64 * targets.len() as f64;
        correct += count_correct(&logits, &targets);
    }
    (loss_sum / xs.len() as f64, correct)
}

/// Trains with mini-batch cross-entropy under Adam. The train and validation
/// sets must be nonempty and share no `source_id`; all images must already be
/// at the model's input size. Reruns with the same seed, data, and config
/// produce bitwise-identical weights and history.
pub fn train_classifier(
    mut model: TrainedClassifier,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidData("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::InvalidData("validation set is empty".into()));
    }
    let val_ids: HashSet<&str> = val_set.iter().map(|s| s.source_id.as_str()).collect();
    if let Some(shared) = train_set
        .iter()
        .find(|s| val_ids.contains(s.source_id.as_str()))
    {
        return Err(Error::DataLeak(format!(
            "source {} appears in both the training and validation sets",
            shared.source_id
        )));
    }

    let size = model.spec.input_size();
    let (train_x, train_y) = encode_set(train_set, size)?;
    let (val_x, val_y) = encode_set(val_set, size)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_x.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = gather_batch(&train_x, chunk);
            let targets: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut net = Tandem {
                features: &mut model.features,
                head: &mut model.head,
            };
            let logits = logits_matrix(&net.forward(&x));
            let (loss, grad) = loss::softmax_cross_entropy(&logits, &targets);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            loss_sum += loss as f64 * targets.len() as f64;
            correct += count_correct(&logits, &targets);
            net.zero_grad();
            net.backward(&grad_tensor(&grad));
            adam.step(&mut net);
        }
        let (val_loss, val_correct) = evaluate_pass(&model, &val_x, &val_y, cfg.batch_size);
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_x.len() as f64,
            train_accuracy: correct as f64 / train_x.len() as f64,
            val_loss,
            val_accuracy: val_correct as f64 / val_x.len() as f64,
        });
    }
    model.history = history;
    Ok(model)
}

/// Converts a pair of head scores to probabilities and a label. Softmax runs
/// in f64 with the max subtracted; exact ties go to covid, the costlier class
/// to miss.
pub(crate) fn scores_to_prediction(z_covid: f64, z_normal: f64) -> Prediction {
    let m = z_covid.max(z_normal);
    let e_covid = (z_covid - m).exp();
    let e_normal = (z_normal - m).exp();
    let sum = e_covid + e_normal;
    let p_covid = e_covid / sum;
    let p_normal = e_normal / sum;
    let label = if p_covid >= p_normal {
        ClassLabel::Covid
    } else {
        ClassLabel::Normal
    };
    Prediction {
        label,
        p_covid,
        p_normal,
    }
}

/// Classifies one image; a pure function of the weights and the pixels.
pub fn predict(model: &TrainedClassifier, img: &RasterImage) -> Result<Prediction> {
    let x = image_to_input(img, model.spec.input_size())?;
    let z = model.infer_logits(&x);
    Ok(scores_to_prediction(z[[0, 0]] as f64, z[[0, 1]] as f64))
}

/// [`predict`] over a list, preserving order; element `i` equals
/// `predict(model, &imgs[i])` exactly.
pub fn predict_batch(model: &TrainedClassifier, imgs: &[RasterImage]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(imgs.len());
    for (i, img) in imgs.iter().enumerate() {
        let p = predict(model, img).map_err(|e| match e {
            Error::InvalidInput(msg) => Error::InvalidInput(format!("image {i}: {msg}")),
            other => other,
        })?;
        out.push(p);
    }
    Ok(out)
}
