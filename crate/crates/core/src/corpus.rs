//! Chorale corpus ingestion, duet formation, splitting and augmentation.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::{
    beat_subdivision, encode_part, transpose, BeatSeq, Note, NotePitch, Scheme, ScoreError,
    TokenSeq, MAX_PITCH, MIN_PITCH, STEPS_PER_MEASURE,
};

pub const NUM_PARTS: usize = 4;
pub const PART_NAMES: [&str; NUM_PARTS] = ["soprano", "alto", "tenor", "bass"];
/// Machine steps given as ground truth before generation starts (two measures).
pub const SEED_STEPS: usize = 2 * STEPS_PER_MEASURE;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {reason}")]
    Invalid {
        file: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("split counts {train}+{valid}+{test} do not partition {total} chorales")]
    SplitMismatch {
        train: usize,
        valid: usize,
        test: usize,
        total: usize,
    },
    #[error("duet parts differ in length: human {human}, machine {machine}")]
    LengthMismatch { human: usize, machine: usize },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// One line of the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoraleRecord {
    pub id: String,
    pub parts: Vec<Vec<Note>>,
    /// Length in sixteenth steps; inferred from the notes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
}

/// A validated four-part chorale. Parts hold pitched notes only; gaps are rests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chorale {
    pub id: String,
    pub parts: [Vec<Note>; NUM_PARTS],
    pub length: usize,
    /// Semitone shift relative to the source chorale (0 for originals).
    pub transposition: i32,
}

impl Chorale {
    /// Validates a record. Without an explicit length the part is padded with
    /// rests to a whole number of measures.
    pub fn from_record(record: ChoraleRecord) -> Result<Self, String> {
        if record.parts.len() != NUM_PARTS {
            return Err(format!(
                "chorale {:?} has {} parts, expected {NUM_PARTS} (SATB)",
                record.id,
                record.parts.len()
            ));
        }
        let mut parts: [Vec<Note>; NUM_PARTS] = Default::default();
        for (slot, notes) in parts.iter_mut().zip(record.parts) {
            let mut pitched: Vec<Note> = notes
                .into_iter()
                .filter(|n| n.pitch != NotePitch::Rest)
                .collect();
            pitched.sort_by_key(|n| n.onset);
            *slot = pitched;
        }
        let end = parts
            .iter()
            .flat_map(|p| p.iter().map(Note::end))
            .max()
            .unwrap_or(0);
        let length = record
            .length
            .unwrap_or_else(|| end.div_ceil(STEPS_PER_MEASURE) * STEPS_PER_MEASURE);
        for (i, part) in parts.iter().enumerate() {
            encode_part(part, Scheme::SingleHold, length)
                .map_err(|e| format!("chorale {:?} {}: {e}", record.id, PART_NAMES[i]))?;
        }
        Ok(Chorale {
            id: record.id,
            parts,
            length,
            transposition: 0,
        })
    }

    pub fn to_record(&self) -> ChoraleRecord {
        ChoraleRecord {
            id: self.id.clone(),
            parts: self.parts.to_vec(),
            length: Some(self.length),
        }
    }

    pub fn part_tokens(&self, part: usize, scheme: Scheme) -> TokenSeq {
        encode_part(&self.parts[part], scheme, self.length).expect("validated chorale")
    }

    pub fn measures(&self) -> usize {
        self.length / STEPS_PER_MEASURE
    }

    /// Lowest and highest pitch over all parts.
    pub fn pitch_span(&self) -> Option<(u8, u8)> {
        let pitches = self.parts.iter().flatten().filter_map(|n| n.pitch.midi());
        let (lo, hi) = pitches.fold((u8::MAX, u8::MIN), |(lo, hi), p| (lo.min(p), hi.max(p)));
        (lo <= hi).then_some((lo, hi))
    }

    pub fn transposed(&self, semitones: i32) -> Result<Chorale, ScoreError> {
        let mut parts: [Vec<Note>; NUM_PARTS] = Default::default();
        for (dst, src) in parts.iter_mut().zip(&self.parts) {
            *dst = transpose(src, semitones)?;
        }
        Ok(Chorale {
            id: if semitones == 0 {
                self.id.clone()
            } else {
                format!("{}@{semitones:+}", self.id)
            },
            parts,
            length: self.length,
            transposition: self.transposition + semitones,
        })
    }

    /// Steps `start..` of every part, with notes clipped to the excerpt.
    pub fn excerpt(&self, start: usize) -> Chorale {
        let mut parts: [Vec<Note>; NUM_PARTS] = Default::default();
        for (dst, src) in parts.iter_mut().zip(&self.parts) {
            *dst = src
                .iter()
                .filter(|n| n.end() > start)
                .map(|n| {
                    let onset = n.onset.max(start);
                    Note {
                        pitch: n.pitch,
                        onset: onset - start,
                        duration: n.end() - onset,
                    }
                })
                .collect();
        }
        Chorale {
            id: format!("{}#{start}", self.id),
            parts,
            length: self.length.saturating_sub(start),
            transposition: self.transposition,
        }
    }
}

/// Where a duet came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuetSource {
    pub chorale: String,
    pub human_part: usize,
    pub machine_part: usize,
}

/// Aligned human and machine parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Duet {
    pub human: TokenSeq,
    pub machine: TokenSeq,
    pub beats: BeatSeq,
    pub source: DuetSource,
    /// Leading machine steps that are given rather than generated.
    pub seed_steps: usize,
}

impl Duet {
    pub fn new(
        human: TokenSeq,
        machine: TokenSeq,
        source: DuetSource,
    ) -> Result<Self, CorpusError> {
        if human.len() != machine.len() {
            return Err(CorpusError::LengthMismatch {
                human: human.len(),
                machine: machine.len(),
            });
        }
        let beats = beat_subdivision(human.len());
        Ok(Duet {
            human,
            machine,
            beats,
            source,
            seed_steps: SEED_STEPS,
        })
    }

    pub fn from_chorale(chorale: &Chorale, human: usize, machine: usize, scheme: Scheme) -> Duet {
        Duet::new(
            chorale.part_tokens(human, scheme),
            chorale.part_tokens(machine, scheme),
            DuetSource {
                chorale: chorale.id.clone(),
                human_part: human,
                machine_part: machine,
            },
        )
        .expect("chorale parts share a length")
    }

    pub fn len(&self) -> usize {
        self.human.len()
    }

    pub fn is_empty(&self) -> bool {
        self.human.is_empty()
    }

    /// Both parts re-expressed in `scheme`.
    pub fn with_scheme(&self, scheme: Scheme) -> Result<Duet, ScoreError> {
        Ok(Duet {
            human: self.human.convert(scheme)?,
            machine: self.machine.convert(scheme)?,
            ..self.clone()
        })
    }
}

fn read_records(file: &Path) -> Result<Vec<Chorale>, CorpusError> {
    let io = |source| CorpusError::Io {
        path: file.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(file).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |reason: String| CorpusError::Invalid {
            file: file.to_path_buf(),
            line: i + 1,
            reason,
        };
        let record: ChoraleRecord =
            serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        out.push(Chorale::from_record(record).map_err(invalid)?);
    }
    Ok(out)
}

/// Loads a corpus from a `.jsonl`/`.json` file or from every such file in a
/// directory (sorted by name). One chorale per line.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Chorale>, CorpusError> {
    let path = path.as_ref();
    let meta = fs::metadata(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if meta.is_file() {
        return read_records(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|ext| ext == "jsonl" || ext == "json")
        })
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_records(&f)?);
    }
    Ok(out)
}

/// Serializes chorales as one JSON record per line.
pub fn write_corpus(chorales: &[Chorale]) -> String {
    let mut out = String::new();
    for c in chorales {
        out.push_str(&serde_json::to_string(&c.to_record()).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Draws two distinct parts uniformly; the first drawn plays the human role.
pub fn draw_part_pair<R: Rng + ?Sized>(rng: &mut R) -> (usize, usize) {
    let human = rng.random_range(0..NUM_PARTS);
    let mut machine = rng.random_range(0..NUM_PARTS - 1);
    if machine >= human {
        machine += 1;
    }
    (human, machine)
}

pub fn make_training_duet<R: Rng + ?Sized>(chorale: &Chorale, scheme: Scheme, rng: &mut R) -> Duet {
    let (human, machine) = draw_part_pair(rng);
    Duet::from_chorale(chorale, human, machine, scheme)
}

/// Every transposition of each chorale that stays inside the MIDI range,
/// including the original.
pub fn augment(chorales: &[Chorale]) -> Vec<Chorale> {
    let mut out = Vec::new();
    for c in chorales {
        let Some((lo, hi)) = c.pitch_span() else {
            out.push(c.clone());
            continue;
        };
        let down = MIN_PITCH as i32 - lo as i32;
        let up = MAX_PITCH as i32 - hi as i32;
        for k in down..=up {
            out.push(c.transposed(k).expect("shift within slack"));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_count: usize,
    pub valid_count: usize,
    pub test_count: usize,
    pub rng_seed: u64,
}

impl SplitConfig {
    /// The 327/37/37 split of the full chorale corpus.
    pub fn bach(rng_seed: u64) -> Self {
        SplitConfig {
            train_count: 327,
            valid_count: 37,
            test_count: 37,
            rng_seed,
        }
    }

    /// The same proportions scaled to `total` chorales, with at least one
    /// validation and one test chorale when `total >= 3`.
    pub fn proportional(total: usize, rng_seed: u64) -> Self {
        if total == 401 {
            return Self::bach(rng_seed);
        }
        let held = |n: usize| {
            let share = ((total * 37) as f64 / 401.0).round() as usize;
            if total >= 3 {
                share.max(1)
            } else {
                share.min(n)
            }
        };
        let test_count = held(total);
        let valid_count = held(total - test_count);
        SplitConfig {
            train_count: total - test_count - valid_count,
            valid_count,
            test_count,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Chorale>,
    pub valid: Vec<Chorale>,
    pub test: Vec<Chorale>,
}

/// Disjoint seeded split; each subset keeps corpus order.
pub fn split_corpus(chorales: &[Chorale], config: &SplitConfig) -> Result<Split, CorpusError> {
    let total = config.train_count + config.valid_count + config.test_count;
    if total != chorales.len() {
        return Err(CorpusError::SplitMismatch {
            train: config.train_count,
            valid: config.valid_count,
            test: config.test_count,
            total: chorales.len(),
        });
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.rng_seed));
    let take = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter()
            .map(|i| chorales[i].clone())
            .collect::<Vec<_>>()
    };
    let a = config.train_count;
    let b = a + config.valid_count;
    Ok(Split {
        train: take(0..a),
        valid: take(a..b),
        test: take(b..total),
    })
}

/// All ordered (human, machine) part pairs, human-major.
pub const ORDERED_PAIRS: [(usize, usize); 12] = [
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 0),
    (1, 2),
    (1, 3),
    (2, 0),
    (2, 1),
    (2, 3),
    (3, 0),
    (3, 1),
    (3, 2),
];

/// Number of test duets formed from `n` chorales: the 12 ordered pairs of
/// each chorale plus `floor(16 n / 37)` second-half excerpts (460 for 37).
pub fn test_pair_count(n: usize) -> usize {
    12 * n + extra_pair_count(n)
}

fn extra_pair_count(n: usize) -> usize {
    16 * n / 37
}

/// Builds the deterministic test duets in multi-hold tokens.
///
/// Rule: every chorale contributes its 12 ordered part pairs in
/// [`ORDERED_PAIRS`] order. Then `floor(16 n / 37)` extra duets are taken from
/// the second half of the chorales (the excerpt starting at measure
/// `floor(M / 2)`, eligible when it spans at least three measures): extra duet
/// `k` uses eligible chorale `k mod E` and ordered pair `k mod 12`. The seed
/// region of every duet is its first 32 machine steps.
pub fn make_test_pairs(test: &[Chorale]) -> Vec<Duet> {
    let scheme = Scheme::MultiHold;
    let mut out = Vec::with_capacity(test_pair_count(test.len()));
    for c in test {
        for &(h, m) in &ORDERED_PAIRS {
            out.push(Duet::from_chorale(c, h, m, scheme));
        }
    }
    let eligible: Vec<Chorale> = test
        .iter()
        .map(|c| c.excerpt((c.measures() / 2) * STEPS_PER_MEASURE))
        .filter(|e| e.length >= SEED_STEPS + STEPS_PER_MEASURE)
        .collect();
    if !eligible.is_empty() {
        for k in 0..extra_pair_count(test.len()) {
            let (h, m) = ORDERED_PAIRS[k % ORDERED_PAIRS.len()];
            out.push(Duet::from_chorale(
                &eligible[k % eligible.len()],
                h,
                m,
                scheme,
            ));
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::score::decode_part;

    pub(crate) fn chorale(id: &str, lo: u8, hi: u8, measures: usize) -> Chorale {
        let len = measures * STEPS_PER_MEASURE;
        let part = |offset: u8| -> Vec<Note> {
            (0..len / 4)
                .map(|i| {
                    let p = lo + ((i as u8 * 3 + offset) % (hi - lo + 1));
                    Note::new(p, i * 4, 4)
                })
                .collect()
        };
        let mut parts = [part(0), part(1), part(2), part(3)];
        parts[0][0].pitch = NotePitch::Midi(hi);
        parts[3][0].pitch = NotePitch::Midi(lo);
        Chorale {
            id: id.to_string(),
            parts,
            length: len,
            transposition: 0,
        }
    }

    #[test]
    fn record_validation() {
        let ok = r#"{"id":"x","parts":[[{"pitch":60,"onset":0,"dur":4}],[],[],[{"pitch":"REST","onset":0,"dur":2}]]}"#;
        let c = Chorale::from_record(serde_json::from_str(ok).unwrap()).unwrap();
        assert_eq!(c.length, 16);
        assert!(c.parts[3].is_empty());

        let three = r#"{"id":"x","parts":[[],[],[]]}"#;
        let err = Chorale::from_record(serde_json::from_str(three).unwrap()).unwrap_err();
        assert!(err.contains("3 parts"), "{err}");

        let overlap = r#"{"id":"x","parts":[[{"pitch":60,"onset":0,"dur":4},{"pitch":62,"onset":2,"dur":4}],[],[],[]]}"#;
        let err = Chorale::from_record(serde_json::from_str(overlap).unwrap()).unwrap_err();
        assert!(err.contains("overlaps"), "{err}");

        let range = r#"{"id":"x","parts":[[{"pitch":90,"onset":0,"dur":4}],[],[],[]]}"#;
        assert!(Chorale::from_record(serde_json::from_str(range).unwrap()).is_err());
    }

    #[test]
    fn load_empty_dir_and_bad_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_corpus(dir.path()).unwrap().is_empty());
        fs::write(
            dir.path().join("a.jsonl"),
            "{\"id\":\"x\",\"parts\":[[],[],[]]}\n",
        )
        .unwrap();
        match load_corpus(dir.path()) {
            Err(CorpusError::Invalid { line, file, .. }) => {
                assert_eq!(line, 1);
                assert!(file.ends_with("a.jsonl"));
            }
            other => panic!("expected invalid, got {other:?}"),
        }
    }

    #[test]
    fn duet_draw_is_seeded_and_distinct() {
        let c = chorale("c", 50, 70, 4);
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let da = make_training_duet(&c, Scheme::MultiHold, &mut a);
            let db = make_training_duet(&c, Scheme::MultiHold, &mut b);
            assert_eq!(da.source, db.source);
            assert_ne!(da.source.human_part, da.source.machine_part);
        }
    }

    #[test]
    fn pair_frequencies_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [[0usize; 4]; 4];
        let n = 10_000;
        for _ in 0..n {
            let (h, m) = draw_part_pair(&mut rng);
            counts[h.min(m)][h.max(m)] += 1;
        }
        for i in 0..4 {
            for j in i + 1..4 {
                let f = counts[i][j] as f64 / n as f64;
                assert!(
                    (f - 1.0 / 6.0).abs() <= 0.02,
                    "pair ({i},{j}) frequency {f}"
                );
            }
        }
    }

    #[test]
    fn identical_parts_still_form_a_duet() {
        let mut c = chorale("c", 50, 70, 2);
        let first = c.parts[0].clone();
        c.parts = [first.clone(), first.clone(), first.clone(), first];
        let d = make_training_duet(&c, Scheme::SingleHold, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(d.human, d.machine);
    }

    #[test]
    fn augmentation_counts() {
        assert_eq!(augment(&[chorale("full", 36, 81, 2)]).len(), 1);
        let c = chorale("mid", 48, 69, 2);
        let out = augment(&[c.clone()]);
        assert_eq!(out.len(), 25);
        assert_eq!(out.first().unwrap().transposition, -12);
        assert_eq!(out.last().unwrap().transposition, 12);
        assert!(augment(&[]).is_empty());
        for a in &out {
            let back = a.transposed(-a.transposition).unwrap();
            assert_eq!(back.parts, c.parts);
            for p in 0..NUM_PARTS {
                assert_eq!(
                    decode_part(&a.part_tokens(p, Scheme::MultiHold)).unwrap(),
                    a.parts[p]
                );
            }
        }
    }

    #[test]
    fn split_is_disjoint_and_reproducible() {
        let cs: Vec<Chorale> = (0..20)
            .map(|i| chorale(&format!("c{i}"), 50, 70, 2))
            .collect();
        let cfg = SplitConfig::proportional(cs.len(), 3);
        let s1 = split_corpus(&cs, &cfg).unwrap();
        let s2 = split_corpus(&cs, &cfg).unwrap();
        assert_eq!(s1, s2);
        let mut ids: Vec<&str> = s1
            .train
            .iter()
            .chain(&s1.valid)
            .chain(&s1.test)
            .map(|c| c.id.as_str())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20);
        assert!(split_corpus(&cs[..5], &cfg).is_err());
        assert_eq!(SplitConfig::proportional(401, 0), SplitConfig::bach(0));
        let fixture = SplitConfig::proportional(4, 0);
        assert_eq!(
            (fixture.train_count, fixture.valid_count, fixture.test_count),
            (2, 1, 1)
        );
    }

    #[test]
    fn test_pairs_rule() {
        let one = make_test_pairs(&[chorale("a", 50, 70, 8)]);
        assert_eq!(one.len(), 12);
        assert!(one.iter().all(|d| d.seed_steps == 32));
        let many: Vec<Chorale> = (0..37)
            .map(|i| chorale(&format!("c{i}"), 50, 70, 6 + i % 5))
            .collect();
        let pairs = make_test_pairs(&many);
        assert_eq!(pairs.len(), 460);
        assert_eq!(test_pair_count(37), 460);
        assert!(pairs[444..].iter().all(|d| d.source.chorale.contains('#')));
        assert_eq!(pairs, make_test_pairs(&many));
    }
}
