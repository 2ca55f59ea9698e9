//! Objective style metrics: pitch count per bar, pitch interval,
//! inter-onset interval, pitch-class and note-length histograms, their
//! earth mover's distances, and per-measure evolution curves.
//!
//! All metrics read the pitched notes of a single part. Rests are ignored.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chorale, Duet};
use crate::score::{decode_part, Note, NotePitch, TokenSeq, STEPS_PER_MEASURE};

pub const REPORT_VERSION: u32 = 1;

/// Note-length classes in sixteenth steps; anything else lands in a final
/// "other" bin.
pub const NLH_CLASSES: [usize; 10] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32];
pub const NLH_BINS: usize = NLH_CLASSES.len() + 1;

/// Measures covered by an evolution curve, and the window width.
pub const EVOLUTION_MEASURES: usize = 20;
pub const EVOLUTION_WINDOW: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("histograms have {0} and {1} bins")]
    BinMismatch(usize, usize),
}

/// A part reduced to what the metrics need: pitched notes sorted by onset
/// and the part length in steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub notes: Vec<(u8, usize, usize)>,
    pub length: usize,
}

impl Part {
    pub fn new(notes: &[Note], length: usize) -> Self {
        let mut pitched: Vec<(u8, usize, usize)> = notes
            .iter()
            .filter_map(|n| match n.pitch {
                NotePitch::Midi(p) => Some((p, n.onset, n.duration)),
                NotePitch::Rest => None,
            })
            .collect();
        pitched.sort_by_key(|&(p, onset, _)| (onset, p));
        Part {
            notes: pitched,
            length,
        }
    }

    pub fn from_tokens(tokens: &TokenSeq) -> Self {
        let notes = decode_part(tokens).expect("token sequences are validated on construction");
        Part::new(&notes, tokens.ids.len())
    }

    /// The machine part of a duet.
    pub fn machine(duet: &Duet) -> Self {
        Part::from_tokens(&duet.machine)
    }

    pub fn bars(&self) -> usize {
        self.length.div_ceil(STEPS_PER_MEASURE)
    }

    /// Notes with onsets in measures `first..first + count` (0-based),
    /// shifted to start at step 0 and clipped at the window end.
    pub fn window(&self, first: usize, count: usize) -> Part {
        let lo = first * STEPS_PER_MEASURE;
        let hi = ((first + count) * STEPS_PER_MEASURE).min(self.length);
        let notes = self
            .notes
            .iter()
            .filter(|&&(_, onset, _)| onset >= lo && onset < hi)
            .map(|&(p, onset, dur)| (p, onset - lo, dur.min(hi - onset)))
            .collect();
        Part {
            notes,
            length: hi.saturating_sub(lo),
        }
    }
}

/// Mean number of distinct pitches per 16-step bar. Bars with no onsets
/// count as 0.
pub fn pitch_count_per_bar(part: &Part) -> f64 {
    let bars = part.bars();
    if bars == 0 {
        return 0.0;
    }
    let mut per_bar: Vec<Vec<u8>> = vec![Vec::new(); bars];
    for &(p, onset, _) in &part.notes {
        let bar = &mut per_bar[onset / STEPS_PER_MEASURE];
        if !bar.contains(&p) {
            bar.push(p);
        }
    }
    per_bar.iter().map(Vec::len).sum::<usize>() as f64 / bars as f64
}

/// Mean absolute semitone interval between successive onsets.
pub fn avg_pitch_interval(part: &Part) -> f64 {
    mean(
        part.notes
            .windows(2)
            .map(|w| (w[1].0 as f64 - w[0].0 as f64).abs()),
    )
}

/// Mean gap in sixteenth steps between successive onsets.
pub fn avg_ioi(part: &Part) -> f64 {
    mean(part.notes.windows(2).map(|w| (w[1].1 - w[0].1) as f64))
}

/// Onset-weighted pitch-class histogram.
pub fn pitch_class_histogram(part: &Part) -> [f64; 12] {
    let mut h = [0.0; 12];
    for &(p, _, _) in &part.notes {
        h[p as usize % 12] += 1.0;
    }
    normalize(&mut h);
    h
}

/// Index of a duration in the note-length histogram.
pub fn nlh_bin(duration: usize) -> usize {
    NLH_CLASSES
        .iter()
        .position(|&c| c == duration)
        .unwrap_or(NLH_CLASSES.len())
}

pub fn note_length_histogram(part: &Part) -> [f64; NLH_BINS] {
    let mut h = [0.0; NLH_BINS];
    for &(_, _, dur) in &part.notes {
        h[nlh_bin(dur)] += 1.0;
    }
    normalize(&mut h);
    h
}

pub fn histograms(part: &Part) -> ([f64; 12], [f64; NLH_BINS]) {
    (pitch_class_histogram(part), note_length_histogram(part))
}

/// Earth mover's distance between two histograms over the same bins with
/// ground distance `|i - j|`, via the cumulative-difference formula.
///
/// PCH uses the same linear distance; a cyclic distance on pitch classes
/// would be the alternative.
pub fn emd_1d(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::BinMismatch(p.len(), q.len()));
    }
    let mut carry = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q).take(p.len().saturating_sub(1)) {
        carry += a - b;
        total += carry.abs();
    }
    Ok(total)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn normalize(h: &mut [f64]) {
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
}

/// The scalar metrics that have evolution curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "pc_per_bar")]
    PitchCount,
    #[serde(rename = "pi")]
    PitchInterval,
    #[serde(rename = "ioi")]
    InterOnset,
}

impl Metric {
    pub const ALL: [Metric; 3] = [
        Metric::PitchCount,
        Metric::PitchInterval,
        Metric::InterOnset,
    ];

    pub fn eval(self, part: &Part) -> f64 {
        match self {
            Metric::PitchCount => pitch_count_per_bar(part),
            Metric::PitchInterval => avg_pitch_interval(part),
            Metric::InterOnset => avg_ioi(part),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::PitchCount => "PC/bar",
            Metric::PitchInterval => "PI",
            Metric::InterOnset => "IOI",
        }
    }
}

/// Metric value at each measure index 1..=20, where index `m` is computed
/// over measures `m..m+3` and averaged across the parts long enough to
/// contain that window. `None` where no part reaches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionCurve {
    pub metric: Metric,
    pub values: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl EvolutionCurve {
    /// Mean absolute deviation from `target` over the defined indices.
    pub fn drift_from(&self, target: f64) -> f64 {
        mean(self.values.iter().flatten().map(|v| (v - target).abs()))
    }
}

pub fn evolution(parts: &[Part], metric: Metric) -> EvolutionCurve {
    let mut values = Vec::with_capacity(EVOLUTION_MEASURES);
    let mut counts = Vec::with_capacity(EVOLUTION_MEASURES);
    for m in 0..EVOLUTION_MEASURES {
        let inside: Vec<f64> = parts
            .iter()
            .filter(|p| p.length >= (m + EVOLUTION_WINDOW) * STEPS_PER_MEASURE)
            .map(|p| metric.eval(&p.window(m, EVOLUTION_WINDOW)))
            .collect();
        counts.push(inside.len());
        values.push((!inside.is_empty()).then(|| mean(inside.into_iter())));
    }
    EvolutionCurve {
        metric,
        values,
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceMetrics {
    pub id: String,
    pub pc_per_bar: f64,
    pub pi: f64,
    pub ioi: f64,
    pub pch: [f64; 12],
    pub nlh: [f64; NLH_BINS],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pc_per_bar: f64,
    pub pi: f64,
    pub ioi: f64,
}

/// Metrics of a set of parts. Scalar means are over pieces; the histograms
/// pool every onset of every piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub pieces: Vec<PieceMetrics>,
    pub mean: Summary,
    pub pch: [f64; 12],
    pub nlh: [f64; NLH_BINS],
    pub evolution: Vec<EvolutionCurve>,
}

impl MetricReport {
    pub fn new(parts: &[(String, Part)]) -> Self {
        let mut pch = [0.0; 12];
        let mut nlh = [0.0; NLH_BINS];
        let pieces: Vec<PieceMetrics> = parts
            .iter()
            .map(|(id, part)| {
                for &(p, _, dur) in &part.notes {
                    pch[p as usize % 12] += 1.0;
                    nlh[nlh_bin(dur)] += 1.0;
                }
                let (piece_pch, piece_nlh) = histograms(part);
                PieceMetrics {
                    id: id.clone(),
                    pc_per_bar: pitch_count_per_bar(part),
                    pi: avg_pitch_interval(part),
                    ioi: avg_ioi(part),
                    pch: piece_pch,
                    nlh: piece_nlh,
                }
            })
            .collect();
        normalize(&mut pch);
        normalize(&mut nlh);
        let mean = Summary {
            pc_per_bar: mean(pieces.iter().map(|p| p.pc_per_bar)),
            pi: mean(pieces.iter().map(|p| p.pi)),
            ioi: mean(pieces.iter().map(|p| p.ioi)),
        };
        let only: Vec<Part> = parts.iter().map(|(_, p)| p.clone()).collect();
        MetricReport {
            version: REPORT_VERSION,
            pieces,
            mean,
            pch,
            nlh,
            evolution: Metric::ALL.iter().map(|&m| evolution(&only, m)).collect(),
        }
    }

    /// Machine parts of generated duets.
    pub fn of_duets(duets: &[Duet]) -> Self {
        let parts: Vec<(String, Part)> = duets
            .iter()
            .map(|d| {
                let s = &d.source;
                (
                    format!("{}:{}>{}", s.chorale, s.human_part, s.machine_part),
                    Part::machine(d),
                )
            })
            .collect();
        MetricReport::new(&parts)
    }

    /// Every voice of every chorale.
    pub fn of_chorales(chorales: &[Chorale]) -> Self {
        let parts: Vec<(String, Part)> = chorales
            .iter()
            .flat_map(|c| {
                c.parts
                    .iter()
                    .enumerate()
                    .map(move |(i, notes)| (format!("{}:{i}", c.id), Part::new(notes, c.length)))
            })
            .collect();
        MetricReport::new(&parts)
    }

    pub fn curve(&self, metric: Metric) -> Option<&EvolutionCurve> {
        self.evolution.iter().find(|c| c.metric == metric)
    }

    /// Summed drift of the evolution curves from `reference`'s means.
    pub fn evolution_drift(&self, reference: &Summary) -> f64 {
        self.evolution
            .iter()
            .map(|c| {
                let target = match c.metric {
                    Metric::PitchCount => reference.pc_per_bar,
                    Metric::PitchInterval => reference.pi,
                    Metric::InterOnset => reference.ioi,
                };
                c.drift_from(target) / target.abs().max(1e-9)
            })
            .sum()
    }
}

/// One system row: signed differences from the dataset and histogram EMDs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub name: String,
    pub d_pc_per_bar: f64,
    pub d_pi: f64,
    pub d_ioi: f64,
    pub pch_emd: f64,
    pub nlh_emd: f64,
}

impl SystemRow {
    pub fn compare(name: &str, system: &MetricReport, dataset: &MetricReport) -> Self {
        SystemRow {
            name: name.to_string(),
            d_pc_per_bar: system.mean.pc_per_bar - dataset.mean.pc_per_bar,
            d_pi: system.mean.pi - dataset.mean.pi,
            d_ioi: system.mean.ioi - dataset.mean.ioi,
            pch_emd: emd_1d(&system.pch, &dataset.pch).expect("fixed bins"),
            nlh_emd: emd_1d(&system.nlh, &dataset.nlh).expect("fixed bins"),
        }
    }
}

/// Dataset absolutes plus one row per system. Serialized as the eval
/// command's output; `Display` prints the familiar table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub version: u32,
    pub dataset: MetricReport,
    pub rows: Vec<SystemRow>,
    pub systems: Vec<MetricReport>,
}

impl Comparison {
    pub fn new(dataset: MetricReport, systems: Vec<(String, MetricReport)>) -> Self {
        let rows = systems
            .iter()
            .map(|(name, r)| SystemRow::compare(name, r, &dataset))
            .collect();
        Comparison {
            version: REPORT_VERSION,
            dataset,
            rows,
            systems: systems.into_iter().map(|(_, r)| r).collect(),
        }
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.dataset.mean;
        writeln!(
            f,
            "{:<10}|{:>8}|{:>8}|{:>8}|{:>8}|{:>8}",
            "", "PC/bar", "PI", "IOI", "PCH", "NLH"
        )?;
        writeln!(
            f,
            "{:<10}|{:>8.2}|{:>8.2}|{:>8.2}|{:>8}|{:>8}",
            "Dataset", m.pc_per_bar, m.pi, m.ioi, "-", "-"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10}|{:>+8.2}|{:>+8.2}|{:>+8.2}|{:>8.4}|{:>8.3}",
                r.name, r.d_pc_per_bar, r.d_pi, r.d_ioi, r.pch_emd, r.nlh_emd
            )?;
        }
        Ok(())
    }
}
