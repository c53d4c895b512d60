//! Procedural 16×16 shape images and classifier training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::costs::Classifier;
use crate::diffgraph::{AdamState, Tape, Tensor};
use crate::error::{bail, Error, Result};
use crate::noise::{NoiseStream, Purpose};
use crate::score::GaussianMixture;

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;
pub const CLASS_NAMES: [&str; 4] = ["h-bar", "v-bar", "cross", "ring"];

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == name)
}

fn blank() -> Vec<f64> {
    vec![-1.0; PIXELS]
}

fn h_bar(img: &mut [f64], top: usize, thick: usize) {
    for r in top..top + thick {
        for c in 2..SIDE - 2 {
            img[r * SIDE + c] = 1.0;
        }
    }
}

fn v_bar(img: &mut [f64], left: usize, thick: usize) {
    for r in 2..SIDE - 2 {
        for c in left..left + thick {
            img[r * SIDE + c] = 1.0;
        }
    }
}

fn ring(img: &mut [f64], cy: f64, cx: f64, radius: f64) {
    for r in 0..SIDE {
        for c in 0..SIDE {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            let dist = crate::math::sqrt(dy * dy + dx * dx);
            if (dist - radius).abs() <= 0.9 {
                img[r * SIDE + c] = 1.0;
            }
        }
    }
}

/// Every clean template of every class, as `(label, image)` pairs.
pub fn templates() -> Vec<(usize, Vec<f64>)> {
    let mut out = Vec::new();
    for thick in [2, 3] {
        for pos in 5..=8 {
            let mut img = blank();
            h_bar(&mut img, pos, thick);
            out.push((0, img));
            let mut img = blank();
            v_bar(&mut img, pos, thick);
            out.push((1, img));
        }
    }
    for thick in [2, 3] {
        for pr in 5..=8 {
            for pc in [6, 7] {
                let mut img = blank();
                h_bar(&mut img, pr, thick);
                v_bar(&mut img, pc, thick);
                out.push((2, img));
            }
        }
    }
    for radius in [4.0, 5.0] {
        for dy in [-1.0, 0.0, 1.0] {
            for dx in [-1.0, 0.0, 1.0] {
                let mut img = blank();
                ring(&mut img, 7.5 + dy, 7.5 + dx, radius);
                out.push((3, img));
            }
        }
    }
    out
}

/// Labelled images with a train/held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapesDataset {
    pub train: Tensor,
    pub train_labels: Vec<usize>,
    pub held_out: Tensor,
    pub held_out_labels: Vec<usize>,
    pub num_classes: usize,
}

/// Pixel jitter standard deviation of generated samples.
pub const PIXEL_NOISE: f64 = 0.1;

impl ShapesDataset {
    /// `per_class` training and `held_per_class` held-out images per class:
    /// a random template of the class plus clamped pixel jitter.
    pub fn generate(per_class: usize, held_per_class: usize, seed: u64) -> Result<Self> {
        if per_class == 0 || held_per_class == 0 {
            bail!(Config, "dataset needs at least one image per class and split");
        }
        let all = templates();
        let by_class: Vec<Vec<&Vec<f64>>> =
            (0..CLASS_NAMES.len()).map(|c| all.iter().filter(|(l, _)| *l == c).map(|(_, t)| t).collect()).collect();
        let mut rng = NoiseStream::new(seed, Purpose::Data, 0x5a);
        let mut make = |count: usize| -> Result<(Tensor, Vec<usize>)> {
            let mut rows = Vec::with_capacity(count * by_class.len());
            let mut labels = Vec::with_capacity(count * by_class.len());
            for _ in 0..count {
                for (c, ts) in by_class.iter().enumerate() {
                    let t = ts[rng.below(ts.len())];
                    rows.push(t.iter().map(|&v| (v + PIXEL_NOISE * rng.normal()).clamp(-1.0, 1.0)).collect::<Vec<_>>());
                    labels.push(c);
                }
            }
            Ok((Tensor::from_rows(&rows)?, labels))
        };
        let (train, train_labels) = make(per_class)?;
        let (held_out, held_out_labels) = make(held_per_class)?;
        Ok(Self { train, train_labels, held_out, held_out_labels, num_classes: CLASS_NAMES.len() })
    }

    /// Dataset whose every image is the same constant, for degenerate-input checks.
    pub fn constant(per_class: usize, value: f64) -> Self {
        let n = per_class * CLASS_NAMES.len();
        let labels: Vec<usize> = (0..n).map(|i| i % CLASS_NAMES.len()).collect();
        Self {
            train: Tensor::filled(n, PIXELS, value),
            train_labels: labels.clone(),
            held_out: Tensor::filled(n, PIXELS, value),
            held_out_labels: labels,
            num_classes: CLASS_NAMES.len(),
        }
    }
}

/// Gaussian mixture with one equal-weight component per clean template,
/// used as a closed-form score model for the shapes task.
pub fn template_mixture(variance: f64) -> Result<GaussianMixture> {
    GaussianMixture::uniform(templates().into_iter().map(|(_, t)| t).collect(), variance)
}

/// The same mixture restricted to the templates of one class.
pub fn class_mixture(label: usize, variance: f64) -> Result<GaussianMixture> {
    if label >= CLASS_NAMES.len() {
        bail!(Config, "class {label} does not exist");
    }
    GaussianMixture::uniform(templates().into_iter().filter(|(l, _)| *l == label).map(|(_, t)| t).collect(), variance)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTrainConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Extra Gaussian pixel noise added to each training batch.
    pub augment: f64,
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { hidden: vec![64], steps: 600, batch: 64, lr: 3e-3, augment: 0.3, min_accuracy: 0.95, seed: 0 }
    }
}

/// `confusion[true][predicted]` counts.
pub fn confusion_matrix(labels: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&l, &p) in labels.iter().zip(predicted) {
        m[l][p] += 1;
    }
    m
}

pub fn accuracy(labels: &[usize], predicted: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().zip(predicted).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Train a classifier; fails with the loss curve attached when held-out
/// accuracy stays below `cfg.min_accuracy`. Returns the model and its
/// held-out accuracy.
pub fn train_classifier(data: &ShapesDataset, cfg: &ClassifierTrainConfig) -> Result<(Classifier, f64)> {
    let n = data.train.rows();
    if n == 0 || cfg.batch == 0 {
        bail!(Config, "classifier training needs data and a positive batch size");
    }
    let mut clf = Classifier::new(data.train.cols(), &cfg.hidden, data.num_classes, cfg.seed)?;
    let mut adam = AdamState::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = NoiseStream::new(cfg.seed, Purpose::Minibatch, step as u64);
        let mut x = Tensor::zeros(cfg.batch, data.train.cols());
        let mut labels = Vec::with_capacity(cfg.batch);
        for r in 0..cfg.batch {
            let idx = rng.below(n);
            for (o, &v) in x.row_mut(r).iter_mut().zip(data.train.row(idx)) {
                *o = v + cfg.augment * rng.normal();
            }
            labels.push(data.train_labels[idx]);
        }
        let mut tape = Tape::new();
        let vars = clf.net.bind(&mut tape, true);
        let xv = tape.constant(x);
        let logits = clf.net.forward(&mut tape, &vars, &[xv], None)?;
        let lp = tape.log_softmax(logits);
        let mut onehot = Tensor::zeros(cfg.batch, data.num_classes);
        for (r, &l) in labels.iter().enumerate() {
            onehot.row_mut(r)[l] = -1.0;
        }
        let oh = tape.constant(onehot);
        let picked = tape.mul(lp, oh)?;
        let total = tape.sum(picked);
        let loss = tape.scale(total, 1.0 / cfg.batch as f64);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training { message: format!("non-finite classifier loss at step {step}"), curve });
        }
        curve.push(value);
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.vars().iter().map(|&v| grads.wrt(&tape, v)).collect();
        adam.update(&mut clf.net.tensors_mut(), &g)?;
    }
    let acc = accuracy(&data.held_out_labels, &clf.predict(&data.held_out)?);
    if acc < cfg.min_accuracy {
        return Err(Error::Training {
            message: format!("held-out accuracy {acc:.3} is below the required {:.3}", cfg.min_accuracy),
            curve,
        });
    }
    Ok((clf, acc))
}
