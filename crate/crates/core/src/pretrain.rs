//! Maximum-likelihood training of the generation-shaped and span models.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::corpus::{make_training_duet, Chorale, Duet};
use crate::models::{mask_context, DuetNet, ModelConfig, ModelKind, View, WindowedContext};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Grads, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub kind: ModelKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Gradient-norm clip applied to each batch.
    pub clip: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

/// Step-size schedule over epochs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to zero at the last epoch.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(self, lr: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let progress = (epoch - 1) as f64 / epochs.max(1) as f64;
                0.5 * lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl PretrainConfig {
    pub fn new(kind: ModelKind, lr: f64) -> Self {
        PretrainConfig {
            kind,
            lr,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            model: ModelConfig::default(),
            clip: 5.0,
            schedule: LrSchedule::Constant,
        }
    }

    /// The six reward recipes: view (a) at three learning rates, then
    /// (b), (c), (d).
    pub fn reward_suite(seed: u64, model: ModelConfig) -> Vec<PretrainConfig> {
        let mut out: Vec<PretrainConfig> = [0.005, 0.01, 0.05]
            .iter()
            .map(|&lr| PretrainConfig::new(ModelKind::RwdA, lr))
            .collect();
        out.extend(
            [ModelKind::RwdB, ModelKind::RwdC, ModelKind::RwdD]
                .map(|k| PretrainConfig::new(k, 0.05)),
        );
        for (i, c) in out.iter_mut().enumerate() {
            c.seed = seed + i as u64;
            c.model = model;
        }
        out
    }

    /// File stem used for a recipe's checkpoint, e.g. `rwd_a_lr0.01`.
    pub fn stem(&self) -> String {
        format!("{}_lr{}", self.kind.tag().to_lowercase(), self.lr)
    }
}

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("loss diverged at epoch {epoch}, batch {batch} (loss {loss})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
}

/// One line of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub kind: ModelKind,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Best validation loss (or last epoch when there is no validation set).
    pub checkpoint: Checkpoint,
    pub last: DuetNet<f32>,
    pub log: Vec<EpochLog>,
}

/// One `(context, targets)` training pair; targets are `(position, id)`.
#[derive(Debug, Clone)]
pub struct Example {
    pub context: WindowedContext,
    pub targets: Vec<(usize, usize)>,
}

/// Teacher-forced example for anchor step `t` of a duet already in the
/// view's scheme.
pub fn example_at(duet: &Duet, t: usize, view: View, config: &ModelConfig) -> Example {
    let context = mask_context(duet, t, view, config);
    let targets = (0..context.valid)
        .map(|j| (j, duet.machine.ids[t + j]))
        .collect();
    Example { context, targets }
}

/// One epoch's worth of examples: every chorale gets a fresh random part
/// pairing and about `T / 4` random anchor steps.
pub fn draw_examples<R: Rng + ?Sized>(
    chorales: &[Chorale],
    view: View,
    config: &ModelConfig,
    rng: &mut R,
) -> Vec<Example> {
    let mut out = Vec::new();
    for c in chorales {
        if c.length == 0 {
            continue;
        }
        let duet = make_training_duet(c, view.scheme(), rng);
        for _ in 0..c.length.div_ceil(4) {
            let t = rng.random_range(0..c.length);
            out.push(example_at(&duet, t, view, config));
        }
    }
    out
}

/// Summed cross-entropy of the examples and its gradient.
pub fn loss_and_grads(net: &DuetNet<f32>, examples: &[Example]) -> (f64, usize, Grads) {
    let mut grads = Grads::zeros_like(&net.params);
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let mut tape = Tape::new(&net.params);
        let f = net.context_features(&mut tape, &ex.context);
        let logits = net.logits(&mut tape, &f);
        let loss = tape.cross_entropy(logits, &ex.targets);
        total += tape.scalar(loss);
        count += ex.targets.len();
        grads.add_scaled(&tape.backward(loss).params, 1.0);
    }
    (total, count, grads)
}

/// Mean per-token cross-entropy without gradients.
pub fn mean_loss(net: &DuetNet<f32>, examples: &[Example]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let out = net.reward_forward(&ex.context);
        for &(j, id) in &ex.targets {
            total -= out.probs[j][id].ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Trains one model. `on_epoch` sees each curve point as it is produced.
pub fn pretrain(
    train: &[Chorale],
    valid: &[Chorale],
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome, PretrainError> {
    if train.iter().all(|c| c.length == 0) {
        return Err(PretrainError::EmptyCorpus);
    }
    let view = config.kind.view();
    let mut net: DuetNet<f32> = DuetNet::new(config.kind, config.model, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let valid_examples = {
        let mut vrng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
        draw_examples(valid, view, &config.model, &mut vrng)
    };
    let mut adam = Adam::new(&net.params, AdamConfig::with_lr(config.lr));
    let mut best: Option<(f64, usize, DuetNet<f32>)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        adam.config.lr = config.schedule.lr_at(config.lr, epoch, config.epochs);
        let mut examples = draw_examples(train, view, &config.model, &mut rng);
        examples.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0;
        for (b, batch) in examples.chunks(config.batch_size.max(1)).enumerate() {
            let (loss, tokens, mut grads) = loss_and_grads(&net, batch);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(PretrainError::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            if tokens == 0 {
                continue;
            }
            grads.scale(1.0 / tokens as f64);
            grads.clip_norm(config.clip);
            adam.step(&mut net.params, &grads);
            if !net.params.is_finite() {
                return Err(PretrainError::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            epoch_loss += loss;
            epoch_tokens += tokens;
        }
        let valid_loss = (!valid_examples.is_empty()).then(|| mean_loss(&net, &valid_examples));
        let entry = EpochLog {
            kind: config.kind,
            epoch,
            train_loss: epoch_loss / epoch_tokens.max(1) as f64,
            valid_loss,
            samples: examples.len(),
        };
        on_epoch(&entry);
        log.push(entry);
        let score = valid_loss.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score <= *s) {
            best = Some((score, epoch, net.clone()));
        }
    }
    let (best_loss, best_epoch, best_net) = best.unwrap_or((f64::NAN, 0, net.clone()));
    let checkpoint = Checkpoint::new(best_net, config.seed)
        .with_meta("objective", "mle")
        .with_meta("lr", config.lr)
        .with_meta("epochs", config.epochs)
        .with_meta("batch_size", config.batch_size)
        .with_meta("clip", config.clip)
        .with_meta("best_epoch", best_epoch)
        .with_meta(
            "best_valid_loss",
            best_loss.is_finite().then_some(best_loss),
        );
    Ok(PretrainOutcome {
        checkpoint,
        last: net,
        log,
    })
}

/// Fraction of machine steps whose teacher-forced argmax prediction is the
/// true token. Span models are scored at target position 0.
pub fn token_accuracy(net: &DuetNet<f32>, duets: &[Duet]) -> f64 {
    let view = net.kind.view();
    let mut hits = 0usize;
    let mut total = 0usize;
    for d in duets {
        let d = d.with_scheme(view.scheme()).expect("valid duet");
        for t in 0..d.len() {
            let out = net.reward_forward(&mask_context(&d, t, view, &net.config));
            hits += usize::from(out.argmax(0) == d.machine.ids[t]);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
