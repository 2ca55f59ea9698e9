//! Online accompaniment: greedy generation over a whole human part, and the
//! step-by-step session with role switching.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SEED_STEPS;
use crate::models::{DuetNet, StateWindow};
use crate::score::{
    decode_part, Scheme, Token, TokenSeq, MAX_PITCH, MIN_PITCH, REST_ID, STEPS_PER_MEASURE,
};
use crate::tensor::Tape;

/// Policy tokens are multi-hold ids.
pub const POLICY_SCHEME: Scheme = Scheme::MultiHold;

/// Ids the policy may emit after `prev`: REST, every pitch onset, and the hold
/// of `prev`'s pitch when `prev` is that pitch's onset or hold. Ascending.
pub fn legal_actions(prev: Option<usize>) -> Vec<usize> {
    let scheme = POLICY_SCHEME;
    let sounding = prev.and_then(|id| match scheme.token(id) {
        Some(Token::Pitch(p) | Token::PitchHold(p)) => Some(p),
        _ => None,
    });
    let mut out = Vec::with_capacity(2 + 2 * (MAX_PITCH - MIN_PITCH + 1) as usize);
    out.push(REST_ID);
    for p in MIN_PITCH..=MAX_PITCH {
        out.push(scheme.id(Token::Pitch(p)).expect("in range"));
        if sounding == Some(p) {
            out.push(scheme.hold_id(p).expect("in range"));
        }
    }
    out
}

/// Policy distribution over [`legal_actions`] and the value estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStep {
    pub actions: Vec<usize>,
    pub probs: Vec<f64>,
    pub value: f64,
}

impl PolicyStep {
    /// Most probable action; ties go to the lowest id.
    pub fn greedy(&self) -> usize {
        self.actions[crate::models::argmax(&self.probs)]
    }

    pub fn prob_of(&self, action: usize) -> Option<f64> {
        self.actions
            .iter()
            .position(|&a| a == action)
            .map(|i| self.probs[i])
    }
}

/// Evaluates the policy on a state, renormalizing over legal actions.
pub fn policy_step(net: &DuetNet<f32>, window: &StateWindow, prev: Option<usize>) -> PolicyStep {
    let actions = legal_actions(prev);
    let mut tape = Tape::new(&net.params);
    let f = net.window_features(&mut tape, window);
    let logits = net.logits(&mut tape, &f);
    let legal = tape.select_cols(logits, &actions);
    let probs = tape.softmax_rows(legal);
    let value = if net.has_value_head() {
        let v = net.value(&mut tape, &f);
        tape.scalar(v)
    } else {
        0.0
    };
    PolicyStep {
        probs: tape.value_f64(probs),
        actions,
        value,
    }
}

/// Greedy accompaniment for a whole human part. The seed is copied verbatim
/// and every later step takes the most probable legal token.
pub fn generate_accompaniment(policy: &DuetNet<f32>, human: &TokenSeq, seed: &[usize]) -> TokenSeq {
    assert_eq!(human.scheme, POLICY_SCHEME, "human part must be multi-hold");
    let n = human.len();
    let start = seed.len().min(n);
    let mut machine: Vec<usize> = seed[..start].to_vec();
    for t in start..n {
        let w = StateWindow::at(&human.ids, &machine, t, policy.config.window);
        machine.push(policy_step(policy, &w, machine.last().copied()).greedy());
    }
    TokenSeq {
        scheme: POLICY_SCHEME,
        ids: machine,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("session has ended")]
    Ended,
    #[error("invalid token id {0}")]
    InvalidToken(usize),
    #[error("hold at step {0} does not continue a sounding pitch")]
    OrphanHold(usize),
    #[error("role switch at step {0} is not on a measure boundary")]
    MidMeasure(usize),
    #[error("seed must be {expected} steps per part, got {got}")]
    Seed { expected: usize, got: usize },
}

/// Which stream the policy fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Stream 0 is played by the human, stream 1 by the policy.
    Normal,
    /// Stream 1 is played by the human, stream 0 by the policy.
    Switched,
}

impl Role {
    pub fn flipped(self) -> Role {
        match self {
            Role::Normal => Role::Switched,
            Role::Switched => Role::Normal,
        }
    }

    /// `(human stream, policy stream)` indices.
    pub fn streams(self) -> (usize, usize) {
        match self {
            Role::Normal => (0, 1),
            Role::Switched => (1, 0),
        }
    }
}

/// Final transcript of a session: stream 0 is the part the human started
/// with, stream 1 the part the machine started with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuetTokens {
    pub scheme: Scheme,
    pub human: Vec<usize>,
    pub machine: Vec<usize>,
}

/// A live duet. Both streams start with the two-measure seed, so the first
/// generated step is 32.
#[derive(Debug, Clone)]
pub struct Session {
    policy: Arc<DuetNet<f32>>,
    streams: [Vec<usize>; 2],
    role: Role,
    ended: bool,
}

impl Session {
    pub fn new(
        policy: Arc<DuetNet<f32>>,
        human_seed: &[usize],
        machine_seed: &[usize],
    ) -> Result<Self, SessionError> {
        for seed in [human_seed, machine_seed] {
            if seed.len() != SEED_STEPS {
                return Err(SessionError::Seed {
                    expected: SEED_STEPS,
                    got: seed.len(),
                });
            }
            TokenSeq::from_ids(POLICY_SCHEME, seed.to_vec())
                .and_then(|s| s.validate())
                .map_err(|_| SessionError::InvalidToken(*seed.iter().max().unwrap_or(&0)))?;
        }
        Ok(Session {
            policy,
            streams: [human_seed.to_vec(), machine_seed.to_vec()],
            role: Role::Normal,
            ended: false,
        })
    }

    /// The step the next call to [`Session::step`] fills.
    pub fn t(&self) -> usize {
        self.streams[0].len()
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    pub fn policy(&self) -> &Arc<DuetNet<f32>> {
        &self.policy
    }

    pub fn streams(&self) -> &[Vec<usize>; 2] {
        &self.streams
    }

    /// State the policy sees for the current step, mapped through the role.
    pub fn window(&self) -> StateWindow {
        let (h, m) = self.role.streams();
        StateWindow::at(
            &self.streams[h],
            &self.streams[m],
            self.t(),
            self.policy.config.window,
        )
    }

    /// Checks a human token against the human stream without changing state.
    pub fn check_human_token(&self, token: usize) -> Result<(), SessionError> {
        let (h, _) = self.role.streams();
        match POLICY_SCHEME.token(token) {
            None | Some(Token::Pad) => Err(SessionError::InvalidToken(token)),
            Some(Token::PitchHold(p)) => {
                let prev = self.streams[h]
                    .last()
                    .and_then(|&id| POLICY_SCHEME.token(id));
                match prev {
                    Some(Token::Pitch(q) | Token::PitchHold(q)) if q == p => Ok(()),
                    _ => Err(SessionError::OrphanHold(self.t())),
                }
            }
            Some(_) => Ok(()),
        }
    }

    /// Emits the policy's token for step `t` from history through `t - 1`,
    /// then records the human token for step `t`.
    pub fn step(&mut self, human_token: usize) -> Result<usize, SessionError> {
        if self.ended {
            return Err(SessionError::Ended);
        }
        self.check_human_token(human_token)?;
        let (h, m) = self.role.streams();
        let prev = self.streams[m].last().copied();
        let action = policy_step(&self.policy, &self.window(), prev).greedy();
        self.streams[h].push(human_token);
        self.streams[m].push(action);
        Ok(action)
    }

    /// Swaps which stream the policy fills; only at a measure boundary.
    pub fn switch_roles(&mut self) -> Result<Role, SessionError> {
        if self.ended {
            return Err(SessionError::Ended);
        }
        if self.t() % STEPS_PER_MEASURE != 0 {
            return Err(SessionError::MidMeasure(self.t()));
        }
        self.role = self.role.flipped();
        Ok(self.role)
    }

    pub fn end(&mut self) -> Result<DuetTokens, SessionError> {
        if self.ended {
            return Err(SessionError::Ended);
        }
        self.ended = true;
        Ok(self.transcript())
    }

    pub fn transcript(&self) -> DuetTokens {
        DuetTokens {
            scheme: POLICY_SCHEME,
            human: self.streams[0].clone(),
            machine: self.streams[1].clone(),
        }
    }
}

/// A pitch-interval pattern heard more than once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Motif {
    /// Successive semitone steps between onsets.
    pub intervals: Vec<i32>,
    /// `(first onset step, end step)` of each non-overlapping occurrence.
    pub spans: Vec<(usize, usize)>,
}

/// Repeated interval patterns of at least `min_len` intervals, longest
/// first; shorter patterns contained in a reported one are dropped.
pub fn find_motifs(part: &TokenSeq, min_len: usize) -> Vec<Motif> {
    let Ok(notes) = decode_part(part) else {
        return Vec::new();
    };
    let pitches: Vec<i32> = notes
        .iter()
        .map(|n| n.pitch.midi().map_or(0, i32::from))
        .collect();
    let intervals: Vec<i32> = pitches.windows(2).map(|w| w[1] - w[0]).collect();
    let min_len = min_len.max(1);
    let mut found: Vec<Motif> = Vec::new();
    let mut covered = vec![false; intervals.len()];
    for len in (min_len..=intervals.len() / 2).rev() {
        let mut seen: std::collections::BTreeMap<&[i32], Vec<usize>> = Default::default();
        for i in 0..=intervals.len() - len {
            seen.entry(&intervals[i..i + len]).or_default().push(i);
        }
        for (pattern, starts) in seen {
            let mut chosen: Vec<usize> = Vec::new();
            for s in starts {
                if chosen.last().is_none_or(|&c| s >= c + len)
                    && !covered[s..s + len].iter().all(|&c| c)
                {
                    chosen.push(s);
                }
            }
            if chosen.len() < 2 {
                continue;
            }
            for &s in &chosen {
                covered[s..s + len].iter_mut().for_each(|c| *c = true);
            }
            found.push(Motif {
                intervals: pattern.to_vec(),
                spans: chosen
                    .iter()
                    .map(|&s| (notes[s].onset, notes[s + len].end()))
                    .collect(),
            });
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, ModelKind};
    use crate::score::{encode_part, Note, PAD_ID};

    fn policy() -> Arc<DuetNet<f32>> {
        Arc::new(DuetNet::new(ModelKind::Gen, ModelConfig::tiny(), 4))
    }

    fn human(len: usize) -> TokenSeq {
        let notes: Vec<Note> = (0..len / 4)
            .map(|i| Note::new(60 + (i * 5 % 12) as u8, i * 4, 4))
            .collect();
        encode_part(&notes, POLICY_SCHEME, len).unwrap()
    }

    fn seed() -> Vec<usize> {
        let notes: Vec<Note> = (0..4).map(|i| Note::new(48 + i as u8, i * 8, 8)).collect();
        encode_part(&notes, POLICY_SCHEME, 32).unwrap().ids
    }

    #[test]
    fn legal_actions_follow_the_hold_grammar() {
        let none = legal_actions(None);
        assert_eq!(none.len(), 47);
        assert!(!none.contains(&PAD_ID));
        assert!(none.iter().all(|&a| !POLICY_SCHEME.is_hold_id(a)));
        let p60 = POLICY_SCHEME.id(Token::Pitch(60)).unwrap();
        let h60 = POLICY_SCHEME.hold_id(60).unwrap();
        for prev in [p60, h60] {
            let acts = legal_actions(Some(prev));
            assert_eq!(acts.len(), 48);
            assert!(acts.contains(&h60));
            assert!(acts.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(legal_actions(Some(REST_ID)), none);
    }

    #[test]
    fn generation_is_deterministic_valid_and_keeps_the_seed() {
        let p = policy();
        let h = human(96);
        let a = generate_accompaniment(&p, &h, &seed());
        let b = generate_accompaniment(&p, &h, &seed());
        assert_eq!(a, b);
        assert_eq!(a.len(), 96);
        assert_eq!(&a.ids[..32], &seed()[..]);
        a.validate().unwrap();
    }

    #[test]
    fn session_matches_batch_generation() {
        let p = policy();
        let h = human(80);
        let batch = generate_accompaniment(&p, &h, &seed());
        let mut s = Session::new(p, &h.ids[..32], &seed()).unwrap();
        assert_eq!(s.t(), 32);
        for t in 32..80 {
            assert_eq!(s.step(h.ids[t]).unwrap(), batch.ids[t]);
        }
        let out = s.end().unwrap();
        assert_eq!(out.machine, batch.ids);
        assert_eq!(out.human, h.ids);
        assert_eq!(s.step(REST_ID), Err(SessionError::Ended));
    }

    #[test]
    fn first_step_context_is_the_seed() {
        let p = policy();
        let h = human(64);
        let s = Session::new(p, &h.ids[..32], &seed()).unwrap();
        let w = s.window();
        assert_eq!(w.human_ids.len(), 64);
        assert!(w.human_ids[..32].iter().all(|&id| id == PAD_ID));
        assert_eq!(&w.human_ids[32..], &h.ids[..32]);
        assert_eq!(&w.machine_ids[32..], &seed()[..]);
    }

    #[test]
    fn causality() {
        let p = policy();
        let h = human(96);
        let base = generate_accompaniment(&p, &h, &seed());
        let mut changed = h.clone();
        let t = 60;
        for id in changed.ids[t..].iter_mut() {
            *id = REST_ID;
        }
        let other = generate_accompaniment(&p, &changed, &seed());
        assert_eq!(&base.ids[..=t], &other.ids[..=t]);
    }

    #[test]
    fn role_switching() {
        let p = policy();
        let h = human(64);
        let mut s = Session::new(p, &h.ids[..32], &seed()).unwrap();
        assert_eq!(s.switch_roles(), Ok(Role::Switched));
        assert_eq!(s.switch_roles(), Ok(Role::Normal));
        for t in 32..39 {
            s.step(h.ids[t]).unwrap();
        }
        let before = s.clone();
        assert_eq!(s.switch_roles(), Err(SessionError::MidMeasure(39)));
        assert_eq!(s.role(), before.role());
        for t in 39..48 {
            s.step(h.ids[t]).unwrap();
        }
        s.switch_roles().unwrap();
        let w = s.window();
        assert_eq!(&w.human_ids[16..], &s.streams()[1][..48]);
        assert_eq!(&w.machine_ids[16..], &s.streams()[0][..48]);
        let m = s.step(REST_ID).unwrap();
        assert_eq!(s.streams()[0][48], m);
        assert_eq!(s.streams()[1][48], REST_ID);
    }

    #[test]
    fn invalid_human_tokens_leave_state() {
        let p = policy();
        let h = human(40);
        let mut s = Session::new(p, &h.ids[..32], &seed()).unwrap();
        let before = s.transcript();
        assert_eq!(s.step(PAD_ID), Err(SessionError::InvalidToken(PAD_ID)));
        assert_eq!(s.step(999), Err(SessionError::InvalidToken(999)));
        let far_hold = POLICY_SCHEME.hold_id(40).unwrap();
        assert_eq!(s.step(far_hold), Err(SessionError::OrphanHold(32)));
        assert_eq!(s.transcript(), before);
        assert!(Session::new(policy(), &h.ids[..31], &seed()).is_err());
    }

    #[test]
    fn motifs_found_in_repeated_figures() {
        let figure = [60u8, 62, 64, 60];
        let mut notes = Vec::new();
        for rep in 0..2 {
            for (i, &p) in figure.iter().enumerate() {
                notes.push(Note::new(p, rep * 32 + i * 4, 4));
            }
            notes.push(Note::new(70, rep * 32 + 16, 16));
        }
        let part = encode_part(&notes, POLICY_SCHEME, 64).unwrap();
        let motifs = find_motifs(&part, 3);
        assert!(!motifs.is_empty());
        let m = &motifs[0];
        assert!(m.intervals.starts_with(&[2, 2, -4]));
        assert_eq!(m.spans.len(), 2);
        assert!(m.spans.iter().all(|&(a, b)| a < b && b <= 64));
    }
}
