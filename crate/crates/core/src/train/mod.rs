//! Loss, optimizers, splits, and the train/eval loop.

mod metrics;
mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use metrics::{format_sig9, overfit_report, EpochMetrics, OverfitReport, RunMetrics, Verdict, METRICS_HEADER};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::embedding::VideoClip;
use crate::error::{Error, Result};
use crate::model::{forward, ClassProbs, ModelConfig, Pipeline, Weights};
use crate::seed::mix;
use crate::tensor::{Mode, Tape, Tensor};

/// `−ln(max(p[label], 1e-12))`.
pub fn cross_entropy(probs: &ClassProbs, label: usize) -> Result<f64> {
    crate::tensor::ops::nll(&probs.probs, label)?.item()
}

/// Taped cross-entropy on a probability vector.
pub fn cross_entropy_taped(tape: &mut Tape, probs: &Tensor, label: usize) -> Result<Tensor> {
    tape.nll(probs, label)
}

/// Fraction of positions where `predictions[i] == labels[i]`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Precondition("accuracy of an empty set".into()));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Seeded shuffle, then the first `⌈fraction·n⌉` items (kept within
/// `[1, n−1]`) go to train and the rest to test.
pub fn train_test_split<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Parameter(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = items.len();
    if n < 2 {
        return Err(Error::Precondition(format!("cannot split {n} items")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub split_fraction: f64,
    pub seed: u64,
    /// Record wall-clock milliseconds per epoch; off keeps metrics
    /// byte-reproducible.
    pub log_wall_time: bool,
}

impl TrainConfig {
    pub fn drowsy() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            split_fraction: 0.8,
            seed: 0,
            log_wall_time: false,
        }
    }

    pub fn distracted() -> Self {
        TrainConfig {
            epochs: 50,
            ..Self::drowsy()
        }
    }

    pub fn for_pipeline(p: Pipeline) -> Self {
        match p {
            Pipeline::Drowsy => Self::drowsy(),
            Pipeline::Distracted => Self::distracted(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate {} is not a finite non-negative number", self.learning_rate)));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("split_fraction {} outside (0, 1)", self.split_fraction)));
        }
        Ok(())
    }
}

/// Mean loss, accuracy and per-clip predictions over `clips` in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

pub fn evaluate(cfg: &ModelConfig, w: &Weights, clips: &[VideoClip]) -> Result<Evaluation> {
    if clips.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    let per_clip = clips
        .par_iter()
        .map(|c| {
            let probs = crate::model::predict(cfg, w, c)?;
            Ok((cross_entropy(&probs, c.label)?, probs.argmax()))
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = per_clip.iter().map(|r| r.0).sum::<f64>() / clips.len() as f64;
    let predictions: Vec<usize> = per_clip.iter().map(|r| r.1).collect();
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    Ok(Evaluation {
        loss,
        accuracy: accuracy(&predictions, &labels)?,
        predictions,
    })
}

/// Loss and per-tensor gradients for one clip; dropout draws from `seed`.
fn clip_gradient(cfg: &ModelConfig, w: &Weights, clip: &VideoClip, seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let watched = w.watch(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = forward(&mut tape, cfg, &watched, &clip.frames, Mode::Train, &mut rng)?;
    let loss = tape.nll(&probs, clip.label)?;
    let value = loss.item()?;
    let grads = tape.backward(&loss)?;
    Ok((value, watched.tensors().map(|t| grads.get_or_zeros(t)).collect()))
}

/// Mean loss and mean gradient over a minibatch. Per-clip work may run in
/// parallel; the reduction is always in batch order.
pub fn batch_gradient(
    cfg: &ModelConfig,
    w: &Weights,
    batch: &[&VideoClip],
    seeds: &[u64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let results = batch
        .par_iter()
        .zip(seeds)
        .map(|(c, &s)| clip_gradient(cfg, w, c, s))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut total: Vec<Vec<f64>> = w.tensors().map(|t| vec![0.0; t.len()]).collect();
    for (l, g) in results {
        loss += l;
        for (acc, gi) in total.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    total.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok((loss * scale, total))
}

/// Trains from `weights` and returns the final weights with one metrics
/// record per epoch. `on_epoch` sees each record as it is produced.
pub fn train_with(
    cfg: &ModelConfig,
    weights: Weights,
    train_set: &[VideoClip],
    val_set: &[VideoClip],
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Weights, RunMetrics)> {
    train_while(cfg, weights, train_set, val_set, tcfg, |e| {
        on_epoch(e);
        true
    })
}

/// Like [`train_with`], but stops after any epoch for which `keep_going`
/// returns false. Epochs that do run are identical to a full run.
pub fn train_while(
    cfg: &ModelConfig,
    mut weights: Weights,
    train_set: &[VideoClip],
    val_set: &[VideoClip],
    tcfg: &TrainConfig,
    mut keep_going: impl FnMut(&EpochMetrics) -> bool,
) -> Result<(Weights, RunMetrics)> {
    tcfg.validate()?;
    cfg.validate()?;
    weights.validate(cfg)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Precondition("train and validation sets must be non-empty".into()));
    }
    let mut opt = Optimizer::new(tcfg.optimizer, tcfg.learning_rate);
    let mut metrics = RunMetrics::default();
    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(tcfg.seed, &[epoch as u64])));
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<&VideoClip> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|k| mix(tcfg.seed, &[epoch as u64, b as u64, k as u64]))
                .collect();
            let blame = |what: String| {
                let ids: Vec<&str> = batch.iter().map(|c| c.source_id.as_str()).collect();
                Error::Numerical(format!("{what} in epoch {epoch}, batch {b} (clips {})", ids.join(", ")))
            };
            let (loss, grads) = match batch_gradient(cfg, &weights, &batch, &seeds) {
                Ok(r) => r,
                Err(e @ (Error::NonFinite { .. } | Error::Numerical(_))) => return Err(blame(e.to_string())),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(blame(format!("non-finite loss {loss}")));
            }
            opt.step(weights.iter_mut().map(|(_, t)| t), &grads)?;
        }
        let tr = evaluate(cfg, &weights, train_set)?;
        let va = evaluate(cfg, &weights, val_set)?;
        let wall_ms = if tcfg.log_wall_time { started.elapsed().as_millis() as u64 } else { 0 };
        metrics.push(EpochMetrics {
            epoch,
            train_loss: tr.loss,
            val_loss: va.loss,
            train_acc: tr.accuracy,
            val_acc: va.accuracy,
            wall_ms,
        });
        if !keep_going(metrics.last().expect("just pushed")) {
            break;
        }
    }
    Ok((weights, metrics))
}

pub fn train(
    cfg: &ModelConfig,
    weights: Weights,
    train_set: &[VideoClip],
    val_set: &[VideoClip],
    tcfg: &TrainConfig,
) -> Result<(Weights, RunMetrics)> {
    train_with(cfg, weights, train_set, val_set, tcfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> (ModelConfig, Vec<VideoClip>) {
        let cfg = ModelConfig {
            seq_len: 4,
            height: 16,
            width: 16,
            d_model: 8,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
            feature_dim: 12,
            seed: 3,
            ..ModelConfig::drowsy()
        };
        let spec = SyntheticSpec {
            clips_per_class: 8,
            seq_len: 4,
            height: 16,
            width: 16,
            patch: 8,
            ..SyntheticSpec::drowsy(8)
        };
        (cfg, generate_synthetic(&spec, 11).unwrap())
    }

    #[test]
    fn cross_entropy_values() {
        let one = ClassProbs::new(Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(cross_entropy(&one, 1).unwrap(), 0.0);
        let uniform = ClassProbs::new(Tensor::full(&[9], 1.0 / 9.0)).unwrap();
        assert!((cross_entropy(&uniform, 4).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy(&uniform, 9), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_gradient_wrt_logits() {
        let logits = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let mut tape = Tape::new();
        let z = tape.watch(&logits);
        let p = tape.softmax(&z, -1).unwrap();
        let probs = p.to_vec();
        let loss = cross_entropy_taped(&mut tape, &p, 2).unwrap();
        let g = tape.backward(&loss).unwrap();
        let dz = g.get(&z).unwrap();
        for i in 0..4 {
            let expect = probs[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((dz[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(Error::Contract(_))));
        assert!(matches!(accuracy(&[], &[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let items: Vec<u32> = (0..10).collect();
        let (a, b) = train_test_split(&items, 0.8, 5).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(train_test_split(&items, 0.8, 5).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<u32> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(train_test_split(&[1, 2], 0.8, 0).unwrap().0.len(), 1);
        assert!(matches!(train_test_split::<u8>(&[], 0.8, 0), Err(Error::Precondition(_))));
        assert!(train_test_split(&items, 1.0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        TrainConfig::drowsy().validate().unwrap();
        assert_eq!(TrainConfig::distracted().epochs, 50);
        assert!(TrainConfig { epochs: 0, ..TrainConfig::drowsy() }.validate().is_err());
        assert!(TrainConfig { split_fraction: 0.0, ..TrainConfig::drowsy() }.validate().is_err());
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let (cfg, clips) = tiny();
        let cfg = ModelConfig { dropout_p: 0.0, ..cfg };
        let mut w = Weights::init(&cfg).unwrap();
        let batch: Vec<&VideoClip> = clips.iter().take(4).collect();
        let seeds = [0, 1, 2, 3];
        let (before, grads) = batch_gradient(&cfg, &w, &batch, &seeds).unwrap();
        assert!(grads.iter().flatten().any(|&g| g != 0.0));
        Optimizer::new(OptimizerKind::Sgd, 1e-4).step(w.iter_mut().map(|(_, t)| t), &grads).unwrap();
        let (after, _) = batch_gradient(&cfg, &w, &batch, &seeds).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn zero_learning_rate_freezes_validation() {
        let (cfg, clips) = tiny();
        let (tr, va) = train_test_split(&clips, 0.8, 1).unwrap();
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.0,
            ..TrainConfig::drowsy()
        };
        let w0 = Weights::init(&cfg).unwrap();
        let (w, m) = train(&cfg, w0.clone(), &tr, &va, &tcfg).unwrap();
        assert!(w.bitwise_eq(&w0));
        assert_eq!(m.len(), 3);
        for e in &m.epochs[1..] {
            assert_eq!((e.val_loss, e.val_acc), (m.epochs[0].val_loss, m.epochs[0].val_acc));
        }
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let (cfg, clips) = tiny();
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            learning_rate: 1e-2,
            seed: 9,
            ..TrainConfig::drowsy()
        };
        let run = || train(&cfg, Weights::init(&cfg).unwrap(), &clips[..12], &clips[12..], &tcfg).unwrap();
        let (w1, m1) = run();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (w2, m2) = pool.install(run);
        assert!(w1.bitwise_eq(&w2));
        assert_eq!(m1, m2);

        // Stopping early replays the same leading epochs.
        let three = TrainConfig { epochs: 3, ..tcfg };
        let (_, m3) = train_while(&cfg, Weights::init(&cfg).unwrap(), &clips[..12], &clips[12..], &three, |e| e.epoch < 2).unwrap();
        assert_eq!(m3, m1);
    }

    #[test]
    fn overfits_eight_clips() {
        let (cfg, clips) = tiny();
        let eight: Vec<VideoClip> = clips[..4].iter().chain(&clips[8..12]).cloned().collect();
        let tcfg = TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 2,
            ..TrainConfig::drowsy()
        };
        let mut hit = None;
        let (_, m) = train_with(&cfg, Weights::init(&cfg).unwrap(), &eight, &eight[..2], &tcfg, |e| {
            if hit.is_none() && e.train_acc == 1.0 {
                hit = Some(e.epoch);
            }
        })
        .unwrap();
        assert!(hit.is_some(), "final train acc {}", m.last().unwrap().train_acc);
    }

    #[test]
    fn nan_loss_names_the_batch() {
        let (cfg, clips) = tiny();
        let mut w = Weights::init(&cfg).unwrap();
        w.iter_mut().next().unwrap().1.update(|d| d[0] = f64::NAN);
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::drowsy()
        };
        match train(&cfg, w, &clips[..4], &clips[4..6], &tcfg) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("batch 0"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
