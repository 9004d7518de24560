//! Mini-batch training loop (Adam + L2 + decay schedule) and inference
//! evaluation producing classification reports.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, DemoStats, Label, Subject};
use crate::error::{Error, Result};
use crate::metrics::{confusion, precision_recall_f2, ClassificationReport};
use crate::model::{conv_regularized, Model};
use crate::optim::{adam_step, l2_penalty, lr_schedule, AdamState, TrainConfig};
use crate::seeds::derive_seed;
use crate::tensor::{softmax, softmax_cross_entropy, softmax_cross_entropy_backward, Tensor};

/// One completed epoch. `wall_secs` is informational only and never
/// participates in comparisons or rankings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_f2: f64,
    pub dev_f2: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters the model ended up with (highest dev F2).
    pub best_epoch: Option<usize>,
    pub best_dev_f2: f64,
}

/// Extracts per-row predicted labels and P(PD) scores from `[N,2]` probs.
fn rows_to_predictions(probs: &Tensor<f32>) -> (Vec<Label>, Vec<f64>) {
    let n = probs.shape()[0];
    let mut preds = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for row in 0..n {
        let hc = probs.data()[row * 2];
        let pd = probs.data()[row * 2 + 1];
        preds.push(if pd > hc { Label::Pd } else { Label::Hc });
        scores.push(pd as f64);
    }
    (preds, scores)
}

fn truth_labels(labels: &[usize]) -> Vec<Label> {
    labels
        .iter()
        .map(|&l| Label::from_class_index(l).expect("batch labels are binary"))
        .collect()
}

/// Trains in place: shuffled mini-batches, softmax cross-entropy plus the
/// configured L2 penalty on conv parameters, Adam with the exponential
/// step schedule. Tracks dev F2 each epoch and finishes with the
/// best-dev-epoch parameters restored. Stops early after
/// `early_stop_patience` consecutive perfect-train-F2 epochs. Everything
/// is a pure function of the seed; wall time is recorded but never read.
pub fn train(
    model: &mut Model<f32>,
    train_subjects: &[Subject],
    dev_subjects: &[Subject],
    root: &Path,
    demo_stats: &DemoStats,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    tc.validate()?;
    if train_subjects.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if dev_subjects.is_empty() {
        return Err(Error::InvalidArgument(
            "dev set is empty; best-epoch tracking needs dev F2".into(),
        ));
    }
    if model.config.num_classes != 2 {
        return Err(Error::InvalidArgument(
            "the training pipeline is binary (num_classes = 2)".into(),
        ));
    }

    let rc = model.config.rc;
    let use_demo = model.config.use_demographics;
    let mut adam: AdamState<f32> = AdamState::new();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 1));

    let mut history = TrainHistory::default();
    let mut best: Option<(crate::optim::ParamMap<f32>, _)> = None;
    let mut best_dev = f64::NEG_INFINITY;
    let mut perfect_streak = 0usize;

    for e in 0..tc.max_epochs {
        let epoch = e + 1;
        let started = Instant::now();
        let shuffle_seed = derive_seed(tc.seed, 2 + e as u64);

        let mut loss_weighted = 0.0f64;
        let mut samples = 0usize;
        let mut epoch_preds: Vec<Label> = Vec::new();
        let mut epoch_truth: Vec<Label> = Vec::new();
        let mut last_lr = tc.lr0;

        for (b, batch) in batch_iter::<f32>(
            train_subjects,
            root,
            demo_stats,
            tc.batch_size,
            shuffle_seed,
        )?
        .enumerate()
        {
            let batch = batch?;
            let demo = use_demo.then_some(&batch.demographics);
            let (logits, tape) = model.forward_training(&batch.volumes, demo, &mut dropout_rng)?;
            let (ce, probs) = softmax_cross_entropy(&logits, &batch.labels)?;
            let (l2, l2_grads) = l2_penalty(model.params(), conv_regularized, rc);
            let loss = ce + l2;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                });
            }

            let grad_logits = softmax_cross_entropy_backward(&probs, &batch.labels)?;
            let mut grads = model.backward(&tape, &grad_logits)?;
            for (name, extra) in &l2_grads {
                let g = grads.get_mut(name).ok_or_else(|| {
                    Error::Data(format!("penalty covers unknown parameter {name}"))
                })?;
                for (gi, ei) in g.data_mut().iter_mut().zip(extra.data()) {
                    *gi += *ei;
                }
            }

            last_lr = lr_schedule(tc.lr0, tc.decay_k, adam.step as usize, tc.decay_steps);
            adam_step(model.params_mut(), &grads, &mut adam, last_lr, tc)?;

            let n = batch.labels.len();
            loss_weighted += loss as f64 * n as f64;
            samples += n;
            let (preds, _) = rows_to_predictions(&probs);
            epoch_preds.extend(preds);
            epoch_truth.extend(truth_labels(&batch.labels));
        }

        let train_f2 = precision_recall_f2(&confusion(&epoch_preds, &epoch_truth)?).2;
        let dev_f2 = evaluate(model, dev_subjects, root, demo_stats, tc.batch_size)?.f2;

        let record = EpochRecord {
            epoch,
            train_loss: loss_weighted / samples as f64,
            train_f2,
            dev_f2,
            lr: last_lr,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);

        if dev_f2 > best_dev {
            best_dev = dev_f2;
            best = Some((model.params.clone(), model.norm_states.clone()));
            history.best_epoch = Some(epoch);
            history.best_dev_f2 = dev_f2;
        }

        if train_f2 == 1.0 {
            perfect_streak += 1;
        } else {
            perfect_streak = 0;
        }
        if tc.early_stop_patience > 0 && perfect_streak >= tc.early_stop_patience {
            break;
        }
    }

    if let Some((params, norm_states)) = best {
        model.params = params;
        model.norm_states = norm_states;
    }
    Ok(history)
}

/// Runs inference over the whole set and assembles the classification
/// report; predictions are probability argmax, ROC scores are P(PD).
pub fn evaluate(
    model: &Model<f32>,
    subjects: &[Subject],
    root: &Path,
    demo_stats: &DemoStats,
    batch_size: usize,
) -> Result<ClassificationReport> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    if model.config.num_classes != 2 {
        return Err(Error::InvalidArgument(
            "evaluation is binary (num_classes = 2)".into(),
        ));
    }
    let mut preds = Vec::with_capacity(subjects.len());
    let mut truth = Vec::with_capacity(subjects.len());
    let mut scores = Vec::with_capacity(subjects.len());
    for batch in batch_iter::<f32>(subjects, root, demo_stats, batch_size, 0)? {
        let batch = batch?;
        let demo = model.config.use_demographics.then_some(&batch.demographics);
        let logits = model.forward_inference(&batch.volumes, demo)?;
        let probs = softmax(&logits)?;
        let (p, s) = rows_to_predictions(&probs);
        preds.extend(p);
        scores.extend(s);
        truth.extend(truth_labels(&batch.labels));
    }
    ClassificationReport::from_predictions(&preds, &truth, Some(&scores))
}
