//! Per-step reward: a weighted ensemble of masked-context models plus a rule
//! penalty for excessive repetition.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::corpus::Duet;
use crate::models::{mask_context_ids, DuetNet, View};
use crate::score::{Scheme, Token, TokenSeq, STEPS_PER_MEASURE};

/// Longest run (in steps) a pitch may sound before it is penalized.
pub const REPETITION_LIMIT: usize = STEPS_PER_MEASURE;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("ensemble manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("invalid ensemble weights: {0}")]
    Weights(String),
    #[error("ensemble has no members")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub weight: Option<f64>,
}

/// Contents of `ensemble.json`. Missing weights default to uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: Vec<MemberSpec>,
}

#[derive(Debug, Clone)]
pub struct Member {
    pub name: String,
    pub net: DuetNet<f32>,
}

/// Reward models and their mixing weights.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Member>,
    weights: Vec<f64>,
}

impl Ensemble {
    /// Uniform weights.
    pub fn uniform(members: Vec<Member>) -> Result<Self, RewardError> {
        let n = members.len();
        Self::weighted(members, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn weighted(members: Vec<Member>, weights: Vec<f64>) -> Result<Self, RewardError> {
        if members.is_empty() {
            return Err(RewardError::Empty);
        }
        if weights.len() != members.len() {
            return Err(RewardError::Weights(format!(
                "{} weights for {} members",
                weights.len(),
                members.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RewardError::Weights(
                "weights must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(RewardError::Weights(format!("weights sum to {sum}, not 1")));
        }
        Ok(Ensemble { members, weights })
    }

    /// Loads `dir/ensemble.json` when present, otherwise every `*.ckpt` in
    /// the directory in name order with uniform weights.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, RewardError> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("ensemble.json");
        if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path)?;
            let manifest: EnsembleManifest =
                serde_json::from_str(&text).map_err(|e| RewardError::Manifest {
                    path: manifest_path.clone(),
                    reason: e.to_string(),
                })?;
            return Self::from_manifest(dir, &manifest);
        }
        if !dir.is_dir() {
            return Err(RewardError::MissingCheckpoint(dir.to_path_buf()));
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        paths.sort();
        let members = paths
            .iter()
            .map(|p| load_member(p))
            .collect::<Result<Vec<_>, _>>()?;
        Self::uniform(members)
    }

    /// Relative member paths resolve against `base`.
    pub fn from_manifest(base: &Path, manifest: &EnsembleManifest) -> Result<Self, RewardError> {
        let members = manifest
            .members
            .iter()
            .map(|m| load_member(&base.join(&m.path)))
            .collect::<Result<Vec<_>, _>>()?;
        if manifest.members.iter().all(|m| m.weight.is_none()) {
            return Self::uniform(members);
        }
        let weights = manifest
            .members
            .iter()
            .map(|m| {
                m.weight.ok_or_else(|| {
                    RewardError::Weights("either all or no members carry weights".into())
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::weighted(members, weights)
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn load_member(path: &Path) -> Result<Member, RewardError> {
    if !path.exists() {
        return Err(RewardError::MissingCheckpoint(path.to_path_buf()));
    }
    let ck = Checkpoint::load(path).map_err(|source| RewardError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Member { name, net: ck.net })
}

/// Reward for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub step: usize,
    /// Probability each member assigns to the machine token, in member order.
    pub probs: Vec<f64>,
    pub model_reward: f64,
    pub rule_penalty: f64,
    pub total: f64,
}

/// A duet's two parts in both schemes, so each member sees its own ids.
pub struct ScoredDuet {
    multi: (Vec<usize>, Vec<usize>),
    single: (Vec<usize>, Vec<usize>),
    machine_multi: TokenSeq,
}

impl ScoredDuet {
    pub fn new(duet: &Duet) -> Self {
        let conv = |s: &TokenSeq, to: Scheme| s.convert(to).expect("valid duet").ids;
        ScoredDuet {
            multi: (
                conv(&duet.human, Scheme::MultiHold),
                conv(&duet.machine, Scheme::MultiHold),
            ),
            single: (
                conv(&duet.human, Scheme::SingleHold),
                conv(&duet.machine, Scheme::SingleHold),
            ),
            machine_multi: duet.machine.convert(Scheme::MultiHold).expect("valid duet"),
        }
    }

    fn ids(&self, scheme: Scheme) -> &(Vec<usize>, Vec<usize>) {
        match scheme {
            Scheme::MultiHold => &self.multi,
            Scheme::SingleHold => &self.single,
        }
    }

    pub fn len(&self) -> usize {
        self.multi.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multi.0.is_empty()
    }
}

/// Probability a single model assigns to `m_t`. View (a) scores `m_t` given
/// `s_t`; span views score target position 0 of the window anchored at `t`.
pub fn member_probability(net: &DuetNet<f32>, duet: &ScoredDuet, t: usize) -> f64 {
    let view = net.kind.view();
    let (h, m) = duet.ids(view.scheme());
    let ctx = mask_context_ids(h, m, t, view, &net.config);
    let out = net.reward_forward(&ctx);
    out.probs[0][m[t]]
}

/// Per-member probabilities and their weighted mean. The returned breakdown
/// has no rule penalty applied.
pub fn model_reward(ensemble: &Ensemble, duet: &ScoredDuet, t: usize) -> RewardBreakdown {
    let probs: Vec<f64> = ensemble
        .members
        .iter()
        .map(|m| member_probability(&m.net, duet, t))
        .collect();
    let model_reward = mix(&probs, &ensemble.weights);
    RewardBreakdown {
        step: t,
        probs,
        model_reward,
        rule_penalty: 0.0,
        total: model_reward,
    }
}

/// Weighted mean, clamped against rounding to `[0, 1]`.
pub fn mix(probs: &[f64], weights: &[f64]) -> f64 {
    probs
        .iter()
        .zip(weights)
        .map(|(p, w)| p * w)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Pitch sounding at each step. Holds continue the previous pitch; a hold
/// with nothing to continue counts as silence.
pub fn sounding(machine: &TokenSeq) -> Vec<Option<u8>> {
    let mut out = Vec::with_capacity(machine.len());
    let mut current: Option<u8> = None;
    for &id in &machine.ids {
        current = match machine.scheme.token(id) {
            Some(Token::Pitch(p)) => Some(p),
            Some(Token::PitchHold(p)) if current == Some(p) => Some(p),
            Some(Token::Hold) => current,
            _ => None,
        };
        out.push(current);
    }
    out
}

/// `-1` when the same pitch has sounded (held or re-struck) at every step of
/// a run ending at `t` that is longer than [`REPETITION_LIMIT`] steps.
pub fn repetition_penalty(machine: &TokenSeq, t: usize) -> f64 {
    penalty_from_sounding(&sounding(machine), t)
}

fn penalty_from_sounding(sound: &[Option<u8>], t: usize) -> f64 {
    let Some(pitch) = sound[t] else {
        return 0.0;
    };
    let run = sound[..=t]
        .iter()
        .rev()
        .take_while(|&&s| s == Some(pitch))
        .count();
    if run > REPETITION_LIMIT {
        -1.0
    } else {
        0.0
    }
}

pub fn total_reward(ensemble: &Ensemble, duet: &ScoredDuet, t: usize) -> RewardBreakdown {
    let mut b = model_reward(ensemble, duet, t);
    b.rule_penalty = repetition_penalty(&duet.machine_multi, t);
    b.total = b.model_reward + b.rule_penalty;
    b
}

/// Breakdowns for every generated (non-seed) step.
pub fn score_duet(ensemble: &Ensemble, duet: &Duet) -> Vec<RewardBreakdown> {
    let scored = ScoredDuet::new(duet);
    let sound = sounding(&scored.machine_multi);
    (duet.seed_steps.min(duet.len())..duet.len())
        .map(|t| {
            let mut b = model_reward(ensemble, &scored, t);
            b.rule_penalty = penalty_from_sounding(&sound, t);
            b.total = b.model_reward + b.rule_penalty;
            b
        })
        .collect()
}

/// Ensemble members grouped by view, for reporting.
pub fn views(ensemble: &Ensemble) -> Vec<View> {
    ensemble.members.iter().map(|m| m.net.kind.view()).collect()
}
