//! Training loops: the two-pass mutual-learning trainer and the single-pass
//! baseline trainer.

use std::time::Instant;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::loss::{mean_cross_entropy, rblock_loss, LogitsPair, LossBreakdown, LossWeights};
use crate::mask::{sample_step, DropSpec, MaskShape, StepMasks};
use crate::rng::RngStream;
use crate::tensor::Tensor4;

use super::config::TrainConfig;
use super::data::Dataset;
use super::metrics::MetricsRow;
use super::model::{Network, ParamGrads};
use super::optim::{lr_at, Sgd};
use super::{STREAM_MASKS, STREAM_SHUFFLE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
        /// Parameters at the start of the failing epoch.
        last_good: Box<Network>,
    },
    #[error(transparent)]
    Failed(#[from] Error),
}

/// Loss and summed parameter gradients of one optimization step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub grads: ParamGrads,
}

fn logits_tensor(grad: Vec<f64>, batch: usize, classes: usize) -> Result<Tensor4> {
    Tensor4::from_vec([batch, classes, 1, 1], grad)
}

/// Two forward passes over the same batch and parameters, one per mask set,
/// and the gradient of the combined loss.
pub fn rblock_step(
    net: &Network,
    x: &Tensor4,
    labels: &[usize],
    masks1: &[&Tensor4],
    masks2: &[&Tensor4],
    weights: &LossWeights,
) -> Result<StepOutput> {
    let (logits1, cache1) = net.forward(x, masks1)?;
    let (logits2, cache2) = net.forward(x, masks2)?;
    let k = net.classes();
    let pair = LogitsPair::new(logits1.into_vec(), logits2.into_vec(), k)?;
    let loss = rblock_loss(&pair, labels, weights)?;
    let b = labels.len();
    let mut grads = net.backward(&cache1, &logits_tensor(loss.grad1, b, k)?)?;
    grads.add_assign(&net.backward(&cache2, &logits_tensor(loss.grad2, b, k)?)?);
    Ok(StepOutput {
        loss: loss.breakdown,
        grads,
    })
}

/// One forward pass and plain cross-entropy.
pub fn single_step(net: &Network, x: &Tensor4, labels: &[usize], masks: &[&Tensor4]) -> Result<StepOutput> {
    let (logits, cache) = net.forward(x, masks)?;
    let k = net.classes();
    let (ce, grad) = mean_cross_entropy(logits.data(), labels, k)?;
    let grads = net.backward(&cache, &logits_tensor(grad, labels.len(), k)?)?;
    Ok(StepOutput {
        loss: LossBreakdown {
            total: ce,
            ce1: ce,
            ..LossBreakdown::default()
        },
        grads,
    })
}

/// Accuracy of the unmasked model.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        correct += net.predict(&x)?.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    /// Parameters at the epoch with the best validation accuracy.
    pub best_network: Network,
    pub metrics: Vec<MetricsRow>,
    /// Total loss of every optimization step.
    pub step_losses: Vec<f64>,
    /// Unmasked training-set accuracy per epoch; `None` between evaluations.
    pub train_acc: Vec<Option<f64>>,
    /// Masks that kept nothing and were replaced by the identity.
    pub degenerate_masks: u64,
}

impl TrainOutcome {
    pub fn best_train_acc(&self) -> f64 {
        self.train_acc.iter().flatten().cloned().fold(0.0, f64::max)
    }

    pub fn final_val_acc(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.val_acc)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Pair,
    Single,
}

/// Draws masks for every slot. Returns the mask tensors for sub-model 1
/// and 2 (empty for single-model methods) and the degenerate count.
fn draw_masks(
    shapes: &[MaskShape],
    spec: &DropSpec,
    batch: usize,
    per_sample: bool,
    rng: &mut RngStream,
) -> Result<(Vec<Tensor4>, Vec<Tensor4>, u64)> {
    let mut first = Vec::with_capacity(shapes.len());
    let mut second = Vec::with_capacity(shapes.len());
    let mut degenerate = 0u64;
    let draws = if per_sample { batch } else { 1 };
    for &shape in shapes {
        let mut d1 = Vec::with_capacity(draws * shape.channels * shape.plane());
        let mut d2 = Vec::new();
        for _ in 0..draws {
            match sample_step(shape, spec, rng)? {
                StepMasks::Single(m) => {
                    degenerate += m.degenerate as u64;
                    d1.extend_from_slice(m.keep.data());
                }
                StepMasks::Pair(p) => {
                    degenerate += p.degenerate as u64;
                    d1.extend_from_slice(p.keep1.data());
                    d2.extend_from_slice(p.keep2.data());
                }
            }
        }
        let dims = [draws, shape.channels, shape.height, shape.width];
        first.push(Tensor4::from_vec(dims, d1)?);
        if !d2.is_empty() {
            second.push(Tensor4::from_vec(dims, d2)?);
        }
    }
    Ok((first, second, degenerate))
}

fn train_loop(mut net: Network, train: &Dataset, test: &Dataset, cfg: &TrainConfig, mode: Mode) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set").into());
    }
    let method = cfg.drop.method;
    match mode {
        Mode::Pair if !method.is_pair() => {
            return Err(Error::invalid(format!("'{method}' is not a two-sub-model method")).into())
        }
        Mode::Single if method.is_pair() => {
            return Err(Error::invalid(format!("'{method}' needs the two-pass trainer")).into())
        }
        _ => {}
    }
    let label = method.display_name().to_string();
    let mask_shapes = net.mask_shapes().to_vec();
    let mut shuffle_rng = RngStream::new(cfg.seed, STREAM_SHUFFLE);
    let mut mask_rng = RngStream::new(cfg.seed, STREAM_MASKS);
    let mut opt = Sgd::new(cfg.optimizer, &net);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();

    let mut out = TrainOutcome {
        best_network: net.clone(),
        network: net.clone(),
        metrics: Vec::with_capacity(cfg.epochs),
        step_losses: Vec::new(),
        train_acc: Vec::with_capacity(cfg.epochs),
        degenerate_masks: 0,
    };
    let mut best = f64::NEG_INFINITY;
    let mut val_acc = 0.0;

    for epoch in 0..cfg.epochs {
        let spec = cfg.drop.at_epoch(epoch, cfg.epochs);
        let lr = lr_at(cfg.optimizer.lr, &cfg.lr_milestones, epoch);
        let last_good = net.clone();
        shuffle_rng.shuffle(&mut order);
        let mut sums = LossBreakdown::default();

        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(chunk);
            let masks_needed = method != crate::mask::DropMethod::Baseline && !mask_shapes.is_empty();
            let (m1, m2, degenerate) = if masks_needed {
                draw_masks(&mask_shapes, &spec, chunk.len(), cfg.per_sample_masks, &mut mask_rng)?
            } else {
                (Vec::new(), Vec::new(), 0)
            };
            out.degenerate_masks += degenerate;
            let r1: Vec<&Tensor4> = m1.iter().collect();
            let r2: Vec<&Tensor4> = m2.iter().collect();
            let result = match mode {
                Mode::Pair => rblock_step(&net, &x, &y, &r1, if m2.is_empty() { &r1 } else { &r2 }, &cfg.loss),
                Mode::Single => single_step(&net, &x, &y, &r1),
            };
            let detail = match &result {
                Err(Error::Numerical(msg)) => Some(format!("{msg} (lr = {lr}, p = {})", spec.p)),
                Ok(r) if !r.loss.total.is_finite() => Some(format!(
                    "non-finite loss (ce1 = {}, ce2 = {}, kl12 = {}, kl21 = {}, lr = {lr}, p = {})",
                    r.loss.ce1, r.loss.ce2, r.loss.kl12, r.loss.kl21, spec.p
                )),
                _ => None,
            };
            if let Some(detail) = detail {
                return Err(TrainError::Diverged {
                    epoch: epoch + 1,
                    step,
                    detail,
                    last_good: Box::new(last_good),
                });
            }
            let result = result?;
            let l = result.loss;
            let w = chunk.len() as f64 / train.len() as f64;
            sums.total += w * l.total;
            sums.ce1 += w * l.ce1;
            sums.ce2 += w * l.ce2;
            sums.kl12 += w * l.kl12;
            sums.kl21 += w * l.kl21;
            out.step_losses.push(l.total);
            opt.step(&mut net, &result.grads, lr);
        }

        let evaluate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        if evaluate {
            val_acc = accuracy(&net, test)?;
            out.train_acc.push(Some(accuracy(&net, train)?));
            if val_acc > best {
                best = val_acc;
                out.best_network = net.clone();
            }
        } else {
            out.train_acc.push(None);
        }
        out.metrics.push(MetricsRow {
            method: label.clone(),
            epoch: epoch + 1,
            loss_total: sums.total,
            loss_ce1: sums.ce1,
            loss_ce2: sums.ce2,
            loss_kl12: sums.kl12,
            loss_kl21: sums.kl21,
            val_acc,
            best_val_acc: best.max(0.0),
            p_current: spec.p,
            wall_ms: if cfg.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 },
        });
    }
    out.network = net;
    Ok(out)
}

/// Trains with two masked passes per step and the mutual-learning loss.
/// Evaluation always uses the unmasked model.
pub fn train_rblock(net: Network, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_loop(net, train, test, cfg, Mode::Pair)
}

/// Trains with one (optionally masked) pass per step and cross-entropy.
pub fn train_single(net: Network, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_loop(net, train, test, cfg, Mode::Single)
}

/// Dispatches on the configured method.
pub fn train(net: Network, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if cfg.drop.method.is_pair() {
        train_rblock(net, train, test, cfg)
    } else {
        train_single(net, train, test, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{DropMethod, DropSpec};
    use crate::train::data::{make_synthetic_split, SyntheticSpec};

    fn tiny() -> (Dataset, Dataset, TrainConfig) {
        let spec = SyntheticSpec { per_class: 20, test_per_class: 10, height: 8, width: 8, ..SyntheticSpec::default() };
        let (train, test) = make_synthetic_split(&spec).unwrap();
        let mut cfg = TrainConfig::desk_scale();
        cfg.epochs = 3;
        cfg.batch_size = 16;
        cfg.model.conv_channels = vec![3, 4];
        cfg.mask_placement = vec![0];
        (train, test, cfg)
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let (train, test, cfg) = tiny();
        let a = train_rblock(cfg.init_network(&train).unwrap(), &train, &test, &cfg).unwrap();
        let b = train_rblock(cfg.init_network(&train).unwrap(), &train, &test, &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.network, b.network);
        assert_eq!(a.metrics.len(), 3);
    }

    #[test]
    fn best_val_is_running_max() {
        let (train, test, cfg) = tiny();
        let out = train_rblock(cfg.init_network(&train).unwrap(), &train, &test, &cfg).unwrap();
        let mut best = 0.0_f64;
        for row in &out.metrics {
            best = best.max(row.val_acc);
            assert_eq!(row.best_val_acc, best);
        }
    }

    #[test]
    fn trainer_mode_must_match_method() {
        let (train, test, cfg) = tiny();
        let single = cfg.clone().with_drop(DropSpec::new(DropMethod::Dropout, 0.1));
        assert!(train_rblock(single.init_network(&train).unwrap(), &train, &test, &single).is_err());
        assert!(train_single(cfg.init_network(&train).unwrap(), &train, &test, &cfg).is_err());
    }

    #[test]
    fn step_does_not_touch_parameters() {
        let (train, _, cfg) = tiny();
        let net = cfg.init_network(&train).unwrap();
        let before = net.checksum();
        let (x, y) = train.batch(&[0, 1, 2, 3]);
        let shape = net.mask_shapes()[0];
        let mut rng = RngStream::new(1, 1);
        let pair = match sample_step(shape, &DropSpec::new(DropMethod::BDropDml, 0.3), &mut rng).unwrap() {
            StepMasks::Pair(p) => p,
            _ => unreachable!(),
        };
        rblock_step(&net, &x, &y, &[&pair.keep1], &[&pair.keep2], &cfg.loss).unwrap();
        assert_eq!(net.checksum(), before);
    }

    #[test]
    fn divergence_is_reported_with_last_good_state() {
        let (train, test, mut cfg) = tiny();
        cfg.optimizer.lr = 1e200;
        cfg.lr_milestones.clear();
        match train_rblock(cfg.init_network(&train).unwrap(), &train, &test, &cfg) {
            Err(TrainError::Diverged { last_good, .. }) => {
                assert!(last_good.params().iter().all(|p| p.iter().all(|v| v.is_finite())));
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics.len())),
        }
    }

    #[test]
    fn per_sample_masks_train() {
        let (train, test, mut cfg) = tiny();
        cfg.per_sample_masks = true;
        cfg.epochs = 1;
        let out = train_rblock(cfg.init_network(&train).unwrap(), &train, &test, &cfg).unwrap();
        assert!(out.metrics[0].loss_total.is_finite());
    }
}
