//! Frozen two-class severity classifier scoring the intermediate frames.

use dmm_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, DmmError, Result};
use crate::image::Image;
use crate::nn::{Bound, Conv, Dense, Norm, ParamSet};
use crate::phantom::{generate_phantom, PhantomParams};
use crate::rng::{self, DmmRng};
use crate::training::{Adam, Checkpoint, ROLE_SUPERVISOR};

/// Class scored on the η = 0.5 frame.
pub const CLASS_MODERATE: usize = 0;
/// Class scored on the η = 0.75 frame.
pub const CLASS_ADVANCED: usize = 1;

pub const MODERATE_SEVERITY: (f64, f64) = (0.45, 0.55);
pub const ADVANCED_SEVERITY: (f64, f64) = (0.70, 0.80);

const WIDTHS: [usize; 4] = [8, 16, 32, 32];

/// Four stride-2 conv/GroupNorm/Swish blocks, global average pooling and a
/// two-logit head.
pub struct SupervisorNet {
    params: ParamSet,
    blocks: Vec<(Conv, Norm)>,
    head: Dense,
}

impl SupervisorNet {
    pub fn new(rng: &mut DmmRng) -> Self {
        let p = &mut ParamSet::new();
        let mut c_in = 1;
        let blocks = WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(p, &format!("block.{i}.conv"), c_in, c, 3, 2, 1, rng);
                let norm = Norm::new(p, &format!("block.{i}.norm"), c);
                c_in = c;
                (conv, norm)
            })
            .collect();
        let head = Dense::new(p, "head", c_in, 2, rng);
        Self {
            params: std::mem::take(p),
            blocks,
            head,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Logits `(n, 2)` for images `(n, 1, h, w)`.
    pub fn logits(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(x).dims4("classify")?;
        if c != 1 || h < 16 || w < 16 {
            return Err(DmmError::Shape(format!(
                "classifier expects (n, 1, h, w) with h, w >= 16, got {:?}",
                tape.value(x).shape()
            )));
        }
        let mut h = x;
        for (conv, norm) in &self.blocks {
            h = conv.forward(tape, b, h)?;
            h = norm.forward(tape, b, h)?;
            h = tape.swish(h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        self.head.forward(tape, b, pooled)
    }

    /// Eval-mode logits of one image.
    pub fn classify(&self, img: &Image) -> Result<[f64; 2]> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(img.to_tensor());
        let out = self.logits(&mut tape, &b, x)?;
        let d = tape.value(out).data();
        Ok([d[0], d[1]])
    }

    pub fn predict(&self, img: &Image) -> Result<usize> {
        let l = self.classify(img)?;
        Ok(usize::from(l[1] > l[0]))
    }

    /// Checkpoint with role `supervisor` and the validation accuracy as a
    /// scalar.
    pub fn to_checkpoint(&self, val_accuracy: f64) -> Checkpoint {
        Checkpoint {
            role: ROLE_SUPERVISOR.into(),
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            scalars: vec![("val_accuracy".into(), val_accuracy)],
            ..Default::default()
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_role(ROLE_SUPERVISOR)?;
        let mut net = Self::new(&mut rng::stream(0, rng::INIT));
        net.params.load(|name| ckpt.param(name))?;
        Ok(net)
    }

    pub fn accuracy(&self, images: &[(Image, usize)]) -> Result<f64> {
        let mut correct = 0;
        for (img, label) in images {
            if self.predict(img)? == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }
}

/// `CE(half, moderate) + CE(three_quarter, advanced)`, each averaged over
/// the batch. The classifier should be bound as constants so that only the
/// frames receive gradient.
pub fn supervision_loss(
    tape: &mut Tape,
    net: &SupervisorNet,
    b: &Bound,
    frame_half: Var,
    frame_three_quarter: Var,
) -> Result<Var> {
    let n = tape.value(frame_half).shape()[0];
    let half = net.logits(tape, b, frame_half)?;
    let ce_half = tape.cross_entropy(half, &vec![CLASS_MODERATE; n])?;
    let n = tape.value(frame_three_quarter).shape()[0];
    let late = net.logits(tape, b, frame_three_quarter)?;
    let ce_late = tape.cross_entropy(late, &vec![CLASS_ADVANCED; n])?;
    Ok(tape.add(ce_half, ce_late)?)
}

/// Phantoms with severities uniform in `range` and fresh textures.
pub fn severity_class_dataset(
    n: usize,
    range: (f64, f64),
    template: &PhantomParams,
    seed: u64,
    stream: &str,
) -> Result<Vec<Image>> {
    let mut r = rng::stream(seed, stream);
    (0..n)
        .map(|_| {
            let params = PhantomParams {
                severity: r.random_range(range.0..=range.1),
                texture_seed: r.random(),
                ..template.clone()
            };
            generate_phantom(&params)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            val_fraction: 0.25,
            min_accuracy: 0.8,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub val_accuracy: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub epochs_run: usize,
    pub final_loss: f64,
}

/// Trains a classifier on `moderate` (class 0) versus `advanced` (class 1)
/// with a per-class disjoint validation split.
pub fn pretrain_supervisor(
    moderate: &[Image],
    advanced: &[Image],
    config: &PretrainConfig,
) -> Result<(SupervisorNet, PretrainReport)> {
    if moderate.is_empty() || advanced.is_empty() {
        return Err(invalid("dataset", "both classes need at least one image"));
    }
    if !(0.0..1.0).contains(&config.val_fraction) || config.batch_size == 0 || config.epochs == 0 {
        return Err(invalid(
            "pretrain",
            "need val_fraction in [0, 1), positive batch size and epochs",
        ));
    }
    let mut data_rng = rng::stream(config.seed, rng::DATA);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, images) in [(CLASS_MODERATE, moderate), (CLASS_ADVANCED, advanced)] {
        let mut idx: Vec<usize> = (0..images.len()).collect();
        idx.shuffle(&mut data_rng);
        let n_val =
            ((images.len() as f64 * config.val_fraction).round() as usize).min(images.len() - 1);
        for (k, &i) in idx.iter().enumerate() {
            let item = (images[i].clone(), class);
            if k < n_val {
                val.push(item);
            } else {
                train.push(item);
            }
        }
    }
    let mut net = SupervisorNet::new(&mut rng::stream(config.seed, rng::INIT));
    let mut opt = Adam::new(net.params(), config.lr)?;
    let mut report = PretrainReport {
        val_accuracy: 0.0,
        train_size: train.len(),
        val_size: val.len(),
        epochs_run: 0,
        final_loss: f64::NAN,
    };
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::indexed_stream(
            config.seed,
            rng::DATA,
            epoch as u64,
        ));
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<&Image> = chunk.iter().map(|&i| &train[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].1).collect();
            let mut tape = Tape::new();
            let b = net.params().bind(&mut tape, true);
            let x = tape.constant(Image::stack(&images)?);
            let logits = net.logits(&mut tape, &b, x)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            report.final_loss = tape.value(loss).item()?;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = b
                .vars()
                .iter()
                .map(|&v| grads.take(v).expect("leaf gradient"))
                .collect();
            opt.update(net.params_mut(), &g)?;
        }
        report.epochs_run = epoch + 1;
        let eval = if val.is_empty() { &train } else { &val };
        report.val_accuracy = net.accuracy(eval)?;
    }
    if report.val_accuracy < config.min_accuracy {
        return Err(DmmError::NonConvergence {
            accuracy: report.val_accuracy,
            required: config.min_accuracy,
        });
    }
    Ok((net, report))
}
