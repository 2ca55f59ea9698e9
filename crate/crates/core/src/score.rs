//! Note-level scores and their per-sixteenth-step token encodings.
//!
//! Time is quantized to sixteenth notes; a 4/4 measure is 16 steps. Two token
//! schemes are supported: multi-hold (a hold symbol per pitch) and single-hold
//! (one shared hold symbol). Rests never hold; a rest spanning several steps is
//! a repeated `REST` token.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Lowest MIDI pitch in the corpus range.
pub const MIN_PITCH: u8 = 36;
/// Highest MIDI pitch in the corpus range.
pub const MAX_PITCH: u8 = 81;
pub const NUM_PITCHES: usize = (MAX_PITCH - MIN_PITCH + 1) as usize;
pub const STEPS_PER_BEAT: usize = 4;
pub const STEPS_PER_MEASURE: usize = 16;

/// Id of `PAD` in every vocabulary.
pub const PAD_ID: usize = 0;
/// Id of `REST` in every vocabulary.
pub const REST_ID: usize = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("pitch {pitch} outside MIDI range {MIN_PITCH}..={MAX_PITCH}")]
    PitchOutOfRange { pitch: i32 },
    #[error("note at onset {onset} overlaps the previous note")]
    Overlap { onset: usize },
    #[error("note at onset {onset} has zero duration")]
    ZeroDuration { onset: usize },
    #[error("note at onset {onset} with duration {duration} exceeds part length {length}")]
    ExceedsLength {
        onset: usize,
        duration: usize,
        length: usize,
    },
    #[error("hold token at step {step} does not continue a sounding pitch")]
    OrphanHold { step: usize },
    #[error("token id {id} at step {step} is outside the {scheme} vocabulary")]
    UnknownId {
        id: usize,
        step: usize,
        scheme: Scheme,
    },
    #[error("unknown token label {0:?}")]
    UnknownLabel(String),
}

/// Pitch of a note: a MIDI number or a rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NotePitch {
    Rest,
    Midi(u8),
}

impl NotePitch {
    pub fn midi(self) -> Option<u8> {
        match self {
            NotePitch::Rest => None,
            NotePitch::Midi(p) => Some(p),
        }
    }
}

impl Serialize for NotePitch {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            NotePitch::Rest => s.serialize_str("REST"),
            NotePitch::Midi(p) => s.serialize_u8(*p),
        }
    }
}

impl<'de> Deserialize<'de> for NotePitch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => u8::try_from(n)
                .map(NotePitch::Midi)
                .map_err(|_| serde::de::Error::custom(format!("pitch {n} is not a MIDI number"))),
            Raw::Str(s) if s == "REST" => Ok(NotePitch::Rest),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "pitch must be an integer or \"REST\", got {s:?}"
            ))),
        }
    }
}

/// A note in sixteenth-step units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Note {
    pub pitch: NotePitch,
    pub onset: usize,
    #[serde(rename = "dur")]
    pub duration: usize,
}

impl Note {
    pub fn new(pitch: u8, onset: usize, duration: usize) -> Self {
        Note {
            pitch: NotePitch::Midi(pitch),
            onset,
            duration,
        }
    }

    pub fn end(&self) -> usize {
        self.onset + self.duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "MULTI_HOLD")]
    MultiHold,
    #[serde(rename = "SINGLE_HOLD")]
    SingleHold,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::MultiHold => "MULTI_HOLD",
            Scheme::SingleHold => "SINGLE_HOLD",
        })
    }
}

/// A decoded vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Rest,
    Pitch(u8),
    /// Multi-hold continuation of the given pitch.
    PitchHold(u8),
    /// Single-hold continuation of whatever pitch is sounding.
    Hold,
}

impl Token {
    pub fn label(&self) -> String {
        match self {
            Token::Pad => "PAD".to_string(),
            Token::Rest => "REST".to_string(),
            Token::Pitch(p) => format!("P{p}"),
            Token::PitchHold(p) => format!("P{p}_H"),
            Token::Hold => "HOLD".to_string(),
        }
    }

    /// Parses a canonical label from either scheme.
    pub fn parse(label: &str) -> Result<Token, ScoreError> {
        let unknown = || ScoreError::UnknownLabel(label.to_string());
        match label {
            "PAD" => return Ok(Token::Pad),
            "REST" => return Ok(Token::Rest),
            "HOLD" => return Ok(Token::Hold),
            _ => {}
        }
        let body = label.strip_prefix('P').ok_or_else(unknown)?;
        let (num, hold) = match body.strip_suffix("_H") {
            Some(n) => (n, true),
            None => (body, false),
        };
        if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) {
            return Err(unknown());
        }
        let pitch: u8 = num.parse().map_err(|_| unknown())?;
        if !(MIN_PITCH..=MAX_PITCH).contains(&pitch) {
            return Err(unknown());
        }
        Ok(if hold {
            Token::PitchHold(pitch)
        } else {
            Token::Pitch(pitch)
        })
    }

    pub fn is_hold(&self) -> bool {
        matches!(self, Token::Hold | Token::PitchHold(_))
    }
}

impl Scheme {
    pub fn vocab_size(self) -> usize {
        match self {
            Scheme::MultiHold => 2 + 2 * NUM_PITCHES,
            Scheme::SingleHold => 2 + NUM_PITCHES + 1,
        }
    }

    /// Id of a token in this scheme, or `None` if the token does not belong to it.
    pub fn id(self, token: Token) -> Option<usize> {
        let offset = |p: u8| {
            (MIN_PITCH..=MAX_PITCH)
                .contains(&p)
                .then(|| (p - MIN_PITCH) as usize)
        };
        match (self, token) {
            (_, Token::Pad) => Some(PAD_ID),
            (_, Token::Rest) => Some(REST_ID),
            (Scheme::MultiHold, Token::Pitch(p)) => offset(p).map(|o| 2 + 2 * o),
            (Scheme::MultiHold, Token::PitchHold(p)) => offset(p).map(|o| 3 + 2 * o),
            (Scheme::SingleHold, Token::Pitch(p)) => offset(p).map(|o| 2 + o),
            (Scheme::SingleHold, Token::Hold) => Some(2 + NUM_PITCHES),
            _ => None,
        }
    }

    pub fn token(self, id: usize) -> Option<Token> {
        match id {
            PAD_ID => Some(Token::Pad),
            REST_ID => Some(Token::Rest),
            _ if id >= self.vocab_size() => None,
            _ => Some(match self {
                Scheme::MultiHold => {
                    let pitch = MIN_PITCH + ((id - 2) / 2) as u8;
                    if (id - 2) % 2 == 0 {
                        Token::Pitch(pitch)
                    } else {
                        Token::PitchHold(pitch)
                    }
                }
                Scheme::SingleHold if id == 2 + NUM_PITCHES => Token::Hold,
                Scheme::SingleHold => Token::Pitch(MIN_PITCH + (id - 2) as u8),
            }),
        }
    }

    /// Id continuing `pitch` by one step.
    pub fn hold_id(self, pitch: u8) -> Option<usize> {
        match self {
            Scheme::MultiHold => self.id(Token::PitchHold(pitch)),
            Scheme::SingleHold => self.id(Token::Hold),
        }
    }

    pub fn is_hold_id(self, id: usize) -> bool {
        self.token(id).is_some_and(|t| t.is_hold())
    }
}

/// Dense label table for one scheme.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    scheme: Scheme,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary: `PAD`, `REST`, then pitches ascending (each pitch
    /// followed by its hold in multi-hold), then `HOLD` last in single-hold.
    pub fn new(scheme: Scheme) -> Self {
        let labels: Vec<String> = (0..scheme.vocab_size())
            .map(|id| scheme.token(id).expect("dense ids").label())
            .collect();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Vocabulary {
            scheme,
            labels,
            index,
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn id_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

/// Convenience wrapper for [`Vocabulary::new`].
pub fn build_vocabulary(scheme: Scheme) -> Vocabulary {
    Vocabulary::new(scheme)
}

/// One part as per-step vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub scheme: Scheme,
    pub ids: Vec<usize>,
}

impl TokenSeq {
    /// Wraps ids after checking they belong to the scheme. Hold grammar is
    /// checked separately by [`TokenSeq::validate`].
    pub fn from_ids(scheme: Scheme, ids: Vec<usize>) -> Result<Self, ScoreError> {
        if let Some((step, &id)) = ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id >= scheme.vocab_size())
        {
            return Err(ScoreError::UnknownId { id, step, scheme });
        }
        Ok(TokenSeq { scheme, ids })
    }

    pub fn rests(scheme: Scheme, length: usize) -> Self {
        TokenSeq {
            scheme,
            ids: vec![REST_ID; length],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn token(&self, step: usize) -> Option<Token> {
        self.ids.get(step).and_then(|&id| self.scheme.token(id))
    }

    /// Checks the hold grammar: every hold continues a sounding pitch.
    pub fn validate(&self) -> Result<(), ScoreError> {
        self.sounding_pitches().map(|_| ())
    }

    /// Pitch sounding at each step (`None` for rest and pad).
    pub fn sounding_pitches(&self) -> Result<Vec<Option<u8>>, ScoreError> {
        let mut out = Vec::with_capacity(self.ids.len());
        let mut current: Option<u8> = None;
        for (step, &id) in self.ids.iter().enumerate() {
            let token = self.scheme.token(id).ok_or(ScoreError::UnknownId {
                id,
                step,
                scheme: self.scheme,
            })?;
            current = match token {
                Token::Pad | Token::Rest => None,
                Token::Pitch(p) => Some(p),
                Token::PitchHold(p) if current == Some(p) => Some(p),
                Token::Hold if current.is_some() => current,
                Token::PitchHold(_) | Token::Hold => return Err(ScoreError::OrphanHold { step }),
            };
            out.push(current);
        }
        Ok(out)
    }

    /// Re-expresses the sequence in another scheme.
    pub fn convert(&self, target: Scheme) -> Result<TokenSeq, ScoreError> {
        if target == self.scheme {
            self.validate()?;
            return Ok(self.clone());
        }
        let sounding = self.sounding_pitches()?;
        let ids = self
            .ids
            .iter()
            .zip(&sounding)
            .map(|(&id, pitch)| {
                let token = self.scheme.token(id).expect("validated");
                let mapped = match token {
                    Token::Hold | Token::PitchHold(_) => {
                        let p = pitch.expect("validated hold has a pitch");
                        return target.hold_id(p).expect("pitch in range");
                    }
                    other => other,
                };
                target.id(mapped).expect("shared token")
            })
            .collect();
        Ok(TokenSeq {
            scheme: target,
            ids,
        })
    }

    pub fn labels(&self) -> Vec<String> {
        self.ids
            .iter()
            .map(|&id| {
                self.scheme
                    .token(id)
                    .map(|t| t.label())
                    .unwrap_or_else(|| format!("?{id}"))
            })
            .collect()
    }
}

/// Encodes a part into `length` steps. Notes with a `REST` pitch are treated as
/// gaps.
pub fn encode_part(notes: &[Note], scheme: Scheme, length: usize) -> Result<TokenSeq, ScoreError> {
    let mut sorted: Vec<&Note> = notes
        .iter()
        .filter(|n| n.pitch != NotePitch::Rest)
        .collect();
    sorted.sort_by_key(|n| n.onset);
    let mut ids = vec![REST_ID; length];
    let mut cursor = 0usize;
    for note in sorted {
        let NotePitch::Midi(pitch) = note.pitch else {
            unreachable!()
        };
        check_pitch(pitch as i32)?;
        if note.duration == 0 {
            return Err(ScoreError::ZeroDuration { onset: note.onset });
        }
        if note.onset < cursor {
            return Err(ScoreError::Overlap { onset: note.onset });
        }
        if note.end() > length {
            return Err(ScoreError::ExceedsLength {
                onset: note.onset,
                duration: note.duration,
                length,
            });
        }
        ids[note.onset] = scheme.id(Token::Pitch(pitch)).expect("pitch in range");
        let hold = scheme.hold_id(pitch).expect("pitch in range");
        ids[note.onset + 1..note.end()].fill(hold);
        cursor = note.end();
    }
    Ok(TokenSeq { scheme, ids })
}

/// Decodes tokens into pitched notes. Every non-hold pitch token starts a new
/// note, so re-struck pitches decode as separate notes.
pub fn decode_part(tokens: &TokenSeq) -> Result<Vec<Note>, ScoreError> {
    let sounding = tokens.sounding_pitches()?;
    let mut notes: Vec<Note> = Vec::new();
    for (step, (&id, pitch)) in tokens.ids.iter().zip(&sounding).enumerate() {
        match tokens.scheme.token(id).expect("validated") {
            Token::Pitch(p) => notes.push(Note::new(p, step, 1)),
            Token::Hold | Token::PitchHold(_) => {
                let last = notes.last_mut().expect("validated hold");
                debug_assert_eq!(last.pitch.midi(), *pitch);
                last.duration += 1;
            }
            Token::Pad | Token::Rest => {}
        }
    }
    Ok(notes)
}

/// Per-step subdivision indices `1,2,3,4,1,2,...`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatSeq(pub Vec<u8>);

impl BeatSeq {
    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Subdivision index of step `t` (1-based within the beat).
pub fn beat_at(t: usize) -> u8 {
    (t % STEPS_PER_BEAT) as u8 + 1
}

pub fn beat_subdivision(length: usize) -> BeatSeq {
    BeatSeq((0..length).map(beat_at).collect())
}

fn check_pitch(pitch: i32) -> Result<u8, ScoreError> {
    if (MIN_PITCH as i32..=MAX_PITCH as i32).contains(&pitch) {
        Ok(pitch as u8)
    } else {
        Err(ScoreError::PitchOutOfRange { pitch })
    }
}

/// Shifts every pitch by `semitones`; rests and rhythm are untouched.
pub fn transpose(notes: &[Note], semitones: i32) -> Result<Vec<Note>, ScoreError> {
    notes
        .iter()
        .map(|n| {
            let pitch = match n.pitch {
                NotePitch::Rest => NotePitch::Rest,
                NotePitch::Midi(p) => NotePitch::Midi(check_pitch(p as i32 + semitones)?),
            };
            Ok(Note { pitch, ..*n })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const C4: u8 = 60;

    fn labels(seq: &TokenSeq) -> Vec<String> {
        seq.labels()
    }

    #[test]
    fn vocabulary_sizes() {
        assert_eq!(build_vocabulary(Scheme::MultiHold).len(), 94);
        assert_eq!(build_vocabulary(Scheme::SingleHold).len(), 49);
        for s in [Scheme::MultiHold, Scheme::SingleHold] {
            let v = build_vocabulary(s);
            assert_eq!(v.id_of("PAD"), Some(0));
            assert_eq!(v.id_of("REST"), Some(1));
        }
    }

    #[test]
    fn vocabulary_ordering() {
        let multi = build_vocabulary(Scheme::MultiHold);
        assert_eq!(
            &multi.labels()[..6],
            ["PAD", "REST", "P36", "P36_H", "P37", "P37_H"]
        );
        assert_eq!(multi.label(93), Some("P81_H"));
        let single = build_vocabulary(Scheme::SingleHold);
        assert_eq!(&single.labels()[..4], ["PAD", "REST", "P36", "P37"]);
        assert_eq!(single.label(47), Some("P81"));
        assert_eq!(single.label(48), Some("HOLD"));
        for v in [multi, single] {
            for (id, label) in v.labels().iter().enumerate() {
                assert_eq!(v.id_of(label), Some(id));
                assert_eq!(Token::parse(label).unwrap().label(), *label);
            }
        }
    }

    #[test]
    fn encode_quarter_note() {
        let notes = [Note::new(C4, 0, 4)];
        let single = encode_part(&notes, Scheme::SingleHold, 4).unwrap();
        assert_eq!(labels(&single), ["P60", "HOLD", "HOLD", "HOLD"]);
        let multi = encode_part(&notes, Scheme::MultiHold, 4).unwrap();
        assert_eq!(labels(&multi), ["P60", "P60_H", "P60_H", "P60_H"]);
    }

    #[test]
    fn encode_empty_is_rest() {
        let seq = encode_part(&[], Scheme::SingleHold, 4).unwrap();
        assert_eq!(labels(&seq), ["REST"; 4]);
    }

    #[test]
    fn encode_errors() {
        let overlap = [Note::new(C4, 0, 4), Note::new(62, 2, 2)];
        assert_eq!(
            encode_part(&overlap, Scheme::MultiHold, 8),
            Err(ScoreError::Overlap { onset: 2 })
        );
        assert_eq!(
            encode_part(&[Note::new(82, 0, 1)], Scheme::MultiHold, 8),
            Err(ScoreError::PitchOutOfRange { pitch: 82 })
        );
        assert!(matches!(
            encode_part(&[Note::new(C4, 6, 4)], Scheme::MultiHold, 8),
            Err(ScoreError::ExceedsLength { .. })
        ));
    }

    #[test]
    fn decode_quarter_note() {
        let seq = encode_part(&[Note::new(C4, 0, 4)], Scheme::SingleHold, 4).unwrap();
        assert_eq!(decode_part(&seq).unwrap(), vec![Note::new(C4, 0, 4)]);
    }

    #[test]
    fn decode_restrike() {
        let s = Scheme::SingleHold;
        let c4 = s.id(Token::Pitch(C4)).unwrap();
        let hold = s.id(Token::Hold).unwrap();
        let seq = TokenSeq::from_ids(s, vec![c4, c4, hold, hold]).unwrap();
        assert_eq!(
            decode_part(&seq).unwrap(),
            vec![Note::new(C4, 0, 1), Note::new(C4, 1, 3)]
        );
    }

    #[test]
    fn decode_orphan_hold() {
        let s = Scheme::SingleHold;
        let seq = TokenSeq::from_ids(
            s,
            vec![s.id(Token::Hold).unwrap(), s.id(Token::Pitch(C4)).unwrap()],
        )
        .unwrap();
        assert_eq!(decode_part(&seq), Err(ScoreError::OrphanHold { step: 0 }));

        let m = Scheme::MultiHold;
        let wrong = TokenSeq::from_ids(
            m,
            vec![
                m.id(Token::Pitch(C4)).unwrap(),
                m.id(Token::PitchHold(62)).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(decode_part(&wrong), Err(ScoreError::OrphanHold { step: 1 }));

        let after_rest =
            TokenSeq::from_ids(m, vec![REST_ID, m.id(Token::PitchHold(C4)).unwrap()]).unwrap();
        assert_eq!(
            after_rest.validate(),
            Err(ScoreError::OrphanHold { step: 1 })
        );
    }

    #[test]
    fn from_ids_rejects_out_of_vocab() {
        assert!(matches!(
            TokenSeq::from_ids(Scheme::SingleHold, vec![0, 49]),
            Err(ScoreError::UnknownId {
                id: 49,
                step: 1,
                ..
            })
        ));
    }

    #[test]
    fn beats() {
        assert_eq!(beat_subdivision(8).0, vec![1, 2, 3, 4, 1, 2, 3, 4]);
        assert!(beat_subdivision(0).is_empty());
        assert_eq!(beat_subdivision(5).0, vec![1, 2, 3, 4, 1]);
    }

    #[test]
    fn transposition() {
        let n = [Note::new(60, 3, 2)];
        assert_eq!(transpose(&n, 2).unwrap(), vec![Note::new(62, 3, 2)]);
        assert_eq!(transpose(&n, 0).unwrap(), n.to_vec());
        assert_eq!(
            transpose(&[Note::new(81, 0, 1)], 1),
            Err(ScoreError::PitchOutOfRange { pitch: 82 })
        );
        let rest = Note {
            pitch: NotePitch::Rest,
            onset: 0,
            duration: 4,
        };
        assert_eq!(transpose(&[rest], 5).unwrap(), vec![rest]);
    }

    #[test]
    fn scheme_conversion() {
        let notes = [
            Note::new(C4, 0, 3),
            Note::new(C4, 3, 2),
            Note::new(64, 6, 2),
        ];
        let multi = encode_part(&notes, Scheme::MultiHold, 8).unwrap();
        let single = multi.convert(Scheme::SingleHold).unwrap();
        assert_eq!(single, encode_part(&notes, Scheme::SingleHold, 8).unwrap());
        assert_eq!(single.convert(Scheme::MultiHold).unwrap(), multi);
    }

    #[test]
    fn note_json() {
        let json = r#"[{"pitch":60,"onset":0,"dur":4},{"pitch":"REST","onset":4,"dur":2}]"#;
        let notes: Vec<Note> = serde_json::from_str(json).unwrap();
        assert_eq!(notes[0], Note::new(60, 0, 4));
        assert_eq!(notes[1].pitch, NotePitch::Rest);
        assert_eq!(serde_json::to_string(&notes).unwrap(), json);
        assert!(serde_json::from_str::<Note>(r#"{"pitch":"C4","onset":0,"dur":1}"#).is_err());
    }
}
