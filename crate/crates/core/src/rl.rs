//! Actor-critic fine-tuning with generalized advantage estimation.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::corpus::{make_training_duet, Chorale, Duet, DuetSource, SEED_STEPS};
use crate::generator::{legal_actions, policy_step, POLICY_SCHEME};
use crate::models::{DuetNet, ModelKind, StateWindow};
use crate::optim::{Adam, AdamConfig};
use crate::reward::{score_duet, Ensemble};
use crate::score::TokenSeq;
use crate::tensor::{Grads, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Training duets to roll out in total.
    pub budget: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    /// Episodes per update.
    pub batch: usize,
    pub clip: f64,
    /// Sampling temperature for rollouts.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            gamma: 0.5,
            lambda: 1.0,
            budget: 100_000,
            policy_lr: 1e-4,
            value_lr: 1e-3,
            batch: 8,
            clip: 5.0,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum RlError {
    #[error("length mismatch: {rewards} rewards, {values} values")]
    LengthMismatch { rewards: usize, values: usize },
    #[error("gamma and lambda must lie in [0, 1] (gamma {gamma}, lambda {lambda})")]
    Discount { gamma: f64, lambda: f64 },
    #[error("warm start must be a generation-shaped network, got {0}")]
    WarmStart(ModelKind),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite gradient in update")]
    NonFinite,
    #[error("episode {episode}: {reason}")]
    Episode { episode: usize, reason: String },
}

/// One rollout. Per-step arrays cover the generated steps `start..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub duet: Duet,
    pub start: usize,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Fills advantages and returns from the rewards and recorded values.
    pub fn estimate(&mut self, gamma: f64, lambda: f64) -> Result<(), RlError> {
        let (adv, ret) = compute_gae(&self.rewards, &self.values, 0.0, gamma, lambda)?;
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }
}

/// Picks an action from a policy step: greedy for `temperature <= 0`,
/// otherwise a draw from `p^(1/temperature)`.
pub fn choose<R: Rng + ?Sized>(probs: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature <= 0.0 {
        return crate::models::argmax(probs);
    }
    let weights: Vec<f64> = if temperature == 1.0 {
        probs.to_vec()
    } else {
        let logmax = probs.iter().cloned().fold(f64::MIN, f64::max).ln();
        probs
            .iter()
            .map(|p| ((p.ln() - logmax) / temperature).exp())
            .collect()
    };
    match WeightedIndex::new(&weights) {
        Ok(d) => d.sample(rng),
        Err(_) => crate::models::argmax(probs),
    }
}

/// Plays the policy against a fixed human part from a seeded machine part.
pub fn rollout<R: Rng + ?Sized>(
    policy: &DuetNet<f32>,
    human: &TokenSeq,
    seed: &[usize],
    source: DuetSource,
    temperature: f64,
    rng: &mut R,
) -> Episode {
    assert_eq!(human.scheme, POLICY_SCHEME, "human part must be multi-hold");
    let n = human.len();
    let start = seed.len().min(n);
    let mut machine = seed[..start].to_vec();
    let mut ep = Episode {
        duet: Duet::new(human.clone(), TokenSeq::rests(POLICY_SCHEME, n), source)
            .expect("equal lengths"),
        start,
        actions: Vec::with_capacity(n - start),
        log_probs: Vec::with_capacity(n - start),
        values: Vec::with_capacity(n - start),
        rewards: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    for t in start..n {
        let w = StateWindow::at(&human.ids, &machine, t, policy.config.window);
        let step = policy_step(policy, &w, machine.last().copied());
        let i = choose(&step.probs, temperature, rng);
        let a = step.actions[i];
        machine.push(a);
        ep.actions.push(a);
        ep.log_probs.push(step.probs[i].ln());
        ep.values.push(step.value);
    }
    ep.duet.machine = TokenSeq {
        scheme: POLICY_SCHEME,
        ids: machine,
    };
    ep.duet.seed_steps = start;
    ep
}

/// GAE advantages `A_t = sum_l (gamma lambda)^l delta_{t+l}` with
/// `delta_t = r_t + gamma V_{t+1} - V_t` (`V_n = terminal_value`), and
/// discounted returns `R_t = r_t + gamma R_{t+1}` with `R_n = 0`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    terminal_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), RlError> {
    if rewards.len() != values.len() {
        return Err(RlError::LengthMismatch {
            rewards: rewards.len(),
            values: values.len(),
        });
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(RlError::Discount { gamma, lambda });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut ret = vec![0.0; n];
    let (mut next_adv, mut next_ret, mut next_value) = (0.0, 0.0, terminal_value);
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        next_ret = rewards[t] + gamma * next_ret;
        adv[t] = next_adv;
        ret[t] = next_ret;
        next_value = values[t];
    }
    Ok((adv, ret))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub episodes: usize,
    pub steps: usize,
    pub mean_reward: f64,
    pub mean_advantage: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub grad_norm: f64,
}

/// Optimizer for policy and value parameters; value-head tensors use the
/// value learning rate.
pub fn optimizer(policy: &DuetNet<f32>, config: &RlConfig) -> Adam {
    let mut adam = Adam::new(&policy.params, AdamConfig::with_lr(config.policy_lr));
    for name in ["value.w", "value.b"] {
        if let Some(id) = policy.params.id(name) {
            adam.set_lr(id, config.value_lr);
        }
    }
    adam
}

/// Advantages scaled to mean 0 and standard deviation 1 over the batch. A
/// lone step keeps its raw advantage; a batch with no spread is only centred.
pub fn normalize(advantages: &mut [f64]) {
    let n = advantages.len();
    if n < 2 {
        return;
    }
    let mean = advantages.iter().sum::<f64>() / n as f64;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    for a in advantages.iter_mut() {
        *a -= mean;
        if std > 1e-8 {
            *a /= std;
        }
    }
}

/// Policy loss `-sum log pi(a_t|s_t) A_t` and value loss
/// `sum (V(s_t) - R_t)^2`, both averaged over the batch's steps, with
/// gradients.
pub fn loss_and_grads(policy: &DuetNet<f32>, episodes: &[Episode]) -> (f64, f64, Grads) {
    let steps: usize = episodes.iter().map(Episode::len).sum();
    let mut adv: Vec<f64> = episodes
        .iter()
        .flat_map(|e| e.advantages.iter().copied())
        .collect();
    normalize(&mut adv);
    let scale = 1.0 / steps.max(1) as f64;
    let mut grads = Grads::zeros_like(&policy.params);
    let (mut policy_loss, mut value_loss) = (0.0, 0.0);
    let mut k = 0;
    for ep in episodes {
        let (h, m) = (&ep.duet.human.ids, &ep.duet.machine.ids);
        for (i, &a) in ep.actions.iter().enumerate() {
            let t = ep.start + i;
            let w = StateWindow::at(h, m, t, policy.config.window);
            let actions = legal_actions(t.checked_sub(1).map(|p| m[p]));
            let col = actions
                .iter()
                .position(|&x| x == a)
                .expect("action was legal");
            let mut tape = Tape::new(&policy.params);
            let f = policy.window_features(&mut tape, &w);
            let logits = policy.logits(&mut tape, &f);
            let legal = tape.select_cols(logits, &actions);
            let logp = tape.log_softmax_rows(legal);
            let chosen = tape.pick_sum(logp, &[(0, col)]);
            let pl = tape.scale(chosen, -adv[k] * scale);
            let v = policy.value(&mut tape, &f);
            let target = tape.input_f64(1, 1, &[ep.returns[i]]);
            let err = tape.sub(v, target);
            let sq = tape.mul(err, err);
            let vl = tape.scale(sq, scale);
            let loss = tape.add(pl, vl);
            policy_loss += tape.scalar(pl);
            value_loss += tape.scalar(vl);
            grads.add_scaled(&tape.backward(loss).params, 1.0);
            k += 1;
        }
    }
    (policy_loss, value_loss, grads)
}

/// One gradient step over a batch of scored episodes.
pub fn update(
    policy: &mut DuetNet<f32>,
    adam: &mut Adam,
    episodes: &[Episode],
    config: &RlConfig,
) -> Result<UpdateStats, RlError> {
    let (policy_loss, value_loss, mut grads) = loss_and_grads(policy, episodes);
    if !grads.is_finite() || !policy_loss.is_finite() || !value_loss.is_finite() {
        return Err(RlError::NonFinite);
    }
    let grad_norm = grads.clip_norm(config.clip);
    adam.step(&mut policy.params, &grads);
    if !policy.params.is_finite() {
        return Err(RlError::NonFinite);
    }
    let steps: usize = episodes.iter().map(Episode::len).sum();
    let denom = steps.max(1) as f64;
    Ok(UpdateStats {
        episodes: episodes.len(),
        steps,
        mean_reward: episodes.iter().flat_map(|e| &e.rewards).sum::<f64>() / denom,
        mean_advantage: episodes.iter().flat_map(|e| &e.advantages).sum::<f64>() / denom,
        policy_loss,
        value_loss,
        grad_norm,
    })
}

/// Generation policy initialized from a view-(a) reward checkpoint.
pub fn warm_start(init: &Checkpoint) -> Result<DuetNet<f32>, RlError> {
    let kind = init.net.kind;
    if kind.view() != ModelKind::Gen.view() {
        return Err(RlError::WarmStart(kind));
    }
    DuetNet::from_params(ModelKind::Gen, init.net.config, init.net.params.clone())
        .map_err(|_| RlError::WarmStart(kind))
}

/// Progress record emitted after every update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub duets: usize,
    pub update: usize,
    #[serde(flatten)]
    pub stats: UpdateStats,
}

/// Scores a duet's generated steps and fills the episode's reward arrays.
pub fn score_episode(
    ep: &mut Episode,
    ensemble: &Ensemble,
    config: &RlConfig,
) -> Result<(), RlError> {
    ep.rewards = score_duet(ensemble, &ep.duet)
        .into_iter()
        .map(|b| b.total)
        .collect();
    ep.estimate(config.gamma, config.lambda)
}

/// Runs rollout, scoring, estimation and update until `config.budget` duets
/// have been played.
pub fn train(
    corpus: &[Chorale],
    ensemble: &Ensemble,
    init: &Checkpoint,
    config: &RlConfig,
    mut on_update: impl FnMut(&TrainEvent, &DuetNet<f32>),
) -> Result<Checkpoint, RlError> {
    let mut policy = warm_start(init)?;
    let usable: Vec<&Chorale> = corpus.iter().filter(|c| c.length > SEED_STEPS).collect();
    if usable.is_empty() && config.budget > 0 {
        return Err(RlError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = optimizer(&policy, config);
    let mut played = 0;
    let mut updates = 0;
    while played < config.budget {
        let n = config.batch.max(1).min(config.budget - played);
        let mut batch = Vec::with_capacity(n);
        for _ in 0..n {
            let id = played + batch.len();
            let chorale = usable[rng.random_range(0..usable.len())];
            let duet = make_training_duet(chorale, POLICY_SCHEME, &mut rng);
            let seed = &duet.machine.ids[..SEED_STEPS];
            let mut ep = rollout(
                &policy,
                &duet.human,
                seed,
                duet.source.clone(),
                config.temperature,
                &mut rng,
            );
            score_episode(&mut ep, ensemble, config).map_err(|e| RlError::Episode {
                episode: id,
                reason: e.to_string(),
            })?;
            batch.push(ep);
        }
        let stats =
            update(&mut policy, &mut adam, &batch, config).map_err(|e| RlError::Episode {
                episode: played,
                reason: e.to_string(),
            })?;
        played += n;
        updates += 1;
        on_update(
            &TrainEvent {
                duets: played,
                update: updates,
                stats,
            },
            &policy,
        );
    }
    Ok(Checkpoint::new(policy, config.seed)
        .with_meta("objective", "actor_critic")
        .with_meta("gamma", config.gamma)
        .with_meta("lambda", config.lambda)
        .with_meta("budget", config.budget)
        .with_meta("policy_lr", config.policy_lr)
        .with_meta("value_lr", config.value_lr)
        .with_meta("batch", config.batch)
        .with_meta("clip", config.clip)
        .with_meta("temperature", config.temperature)
        .with_meta("init_kind", init.net.kind)
        .with_meta("init_lr", init.header.training.get("lr").cloned()))
}

/// Mean per-step total reward of greedy accompaniments to the given duets'
/// human parts (each seeded with its own first two machine measures).
pub fn mean_greedy_reward(policy: &DuetNet<f32>, ensemble: &Ensemble, duets: &[Duet]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for d in duets {
        let d = d.with_scheme(POLICY_SCHEME).expect("valid duet");
        let seed = &d.machine.ids[..d.seed_steps.min(d.len())];
        let machine = crate::generator::generate_accompaniment(policy, &d.human, seed);
        let generated = Duet {
            machine,
            ..d.clone()
        };
        for b in score_duet(ensemble, &generated) {
            total += b.total;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// `samples` sampled accompaniments per duet. Sample `k` of duet `i` draws
/// from its own stream seeded `seed + i * samples + k`, so two policies can
/// be compared on common random numbers.
pub fn sample_accompaniments(
    policy: &DuetNet<f32>,
    duets: &[Duet],
    temperature: f64,
    seed: u64,
    samples: usize,
) -> Vec<Duet> {
    let mut out = Vec::with_capacity(duets.len() * samples);
    for (i, d) in duets.iter().enumerate() {
        let d = d.with_scheme(POLICY_SCHEME).expect("valid duet");
        let start = d.seed_steps.min(d.len());
        for k in 0..samples {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((i * samples + k) as u64));
            let ep = rollout(
                policy,
                &d.human,
                &d.machine.ids[..start],
                d.source.clone(),
                temperature,
                &mut rng,
            );
            out.push(ep.duet);
        }
    }
    out
}

/// Mean per-step total reward of sampled accompaniments: the quantity the
/// actor-critic update ascends, estimated on held-out human parts.
pub fn mean_sampled_reward(
    policy: &DuetNet<f32>,
    ensemble: &Ensemble,
    duets: &[Duet],
    temperature: f64,
    seed: u64,
    samples: usize,
) -> f64 {
    let rewards: Vec<f64> = sample_accompaniments(policy, duets, temperature, seed, samples)
        .iter()
        .flat_map(|d| score_duet(ensemble, d))
        .map(|b| b.total)
        .collect();
    if rewards.is_empty() {
        0.0
    } else {
        rewards.iter().sum::<f64>() / rewards.len() as f64
    }
}
