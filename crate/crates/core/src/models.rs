//! The generation network, the four reward-model views and their masked
//! input windows.
//!
//! Every network shares one trunk: human and machine token branches
//! (embedding followed by stacked bidirectional GRUs), a beat embedding branch,
//! a per-step projection, and the temporal context summarizer. The summary is
//! concatenated with the embedding of the beat being predicted and fed to a
//! token head (and, for the generation-shaped networks, a scalar value head).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Duet;
use crate::nn::{affine, bigru, summarize, GruParams};
use crate::score::{beat_at, Scheme, PAD_ID};
use crate::tensor::{Init, ParamId, Params, Real, Tape, Var};

/// Input-only id marking masked target positions in single-hold windows.
pub const MASK_ID: usize = 49;
/// Beat vocabulary: 0 is padding, 1..=4 the subdivision index.
pub const BEAT_VOCAB: usize = 5;

/// Which context a network conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    /// (a) human and machine pre-context.
    #[serde(rename = "a")]
    JointPre,
    /// (b) human and machine pre- and post-context around a masked span.
    #[serde(rename = "b")]
    JointPrePost,
    /// (c) machine pre- and post-context only.
    #[serde(rename = "c")]
    Horizontal,
    /// (d) the human window only, machine context outside the span removed.
    #[serde(rename = "d")]
    Vertical,
}

impl View {
    pub const ALL: [View; 4] = [
        View::JointPre,
        View::JointPrePost,
        View::Horizontal,
        View::Vertical,
    ];

    pub fn letter(self) -> char {
        match self {
            View::JointPre => 'a',
            View::JointPrePost => 'b',
            View::Horizontal => 'c',
            View::Vertical => 'd',
        }
    }

    pub fn from_letter(c: &str) -> Option<View> {
        View::ALL.into_iter().find(|v| v.letter().to_string() == c)
    }

    pub fn is_span(self) -> bool {
        self != View::JointPre
    }

    /// Token scheme the view's networks read and predict.
    pub fn scheme(self) -> Scheme {
        if self.is_span() {
            Scheme::SingleHold
        } else {
            Scheme::MultiHold
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "GEN")]
    Gen,
    #[serde(rename = "RWD_A")]
    RwdA,
    #[serde(rename = "RWD_B")]
    RwdB,
    #[serde(rename = "RWD_C")]
    RwdC,
    #[serde(rename = "RWD_D")]
    RwdD,
}

impl ModelKind {
    pub fn view(self) -> View {
        match self {
            ModelKind::Gen | ModelKind::RwdA => View::JointPre,
            ModelKind::RwdB => View::JointPrePost,
            ModelKind::RwdC => View::Horizontal,
            ModelKind::RwdD => View::Vertical,
        }
    }

    pub fn reward_for(view: View) -> ModelKind {
        match view {
            View::JointPre => ModelKind::RwdA,
            View::JointPrePost => ModelKind::RwdB,
            View::Horizontal => ModelKind::RwdC,
            View::Vertical => ModelKind::RwdD,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Gen => "GEN",
            ModelKind::RwdA => "RWD_A",
            ModelKind::RwdB => "RWD_B",
            ModelKind::RwdC => "RWD_C",
            ModelKind::RwdD => "RWD_D",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Layer sizes and window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub summary_width: usize,
    /// Pre-context length `L` of the generation state window.
    pub window: usize,
    pub pre_context: usize,
    /// Target span length `Delta` of the span views.
    pub span: usize,
    pub post_context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            hidden: 64,
            layers: 2,
            summary_width: 128,
            window: 64,
            pre_context: 32,
            span: 16,
            post_context: 32,
        }
    }
}

impl ModelConfig {
    /// Small layers with the standard window geometry, for quick experiments
    /// and tests on a single core.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 12,
            hidden: 16,
            layers: 1,
            summary_width: 24,
            ..ModelConfig::default()
        }
    }

    pub fn span_window(&self) -> usize {
        self.pre_context + self.span + self.post_context
    }
}

/// Generation state `s_t`: the last `L` tokens of each part before step `t`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateWindow {
    pub human_ids: Vec<usize>,
    pub machine_ids: Vec<usize>,
    /// Beat index of each window position (0 before the sequence start).
    pub beats: Vec<usize>,
    /// Beat index `b_t` of the step being predicted.
    pub beat: usize,
}

impl StateWindow {
    /// Window over steps `t - len .. t`; `human` and `machine` need at least
    /// `t` entries.
    pub fn at(human: &[usize], machine: &[usize], t: usize, len: usize) -> Self {
        let mut w = StateWindow {
            human_ids: vec![PAD_ID; len],
            machine_ids: vec![PAD_ID; len],
            beats: vec![0; len],
            beat: beat_at(t) as usize,
        };
        for i in 0..len {
            let abs = t as isize - len as isize + i as isize;
            if abs >= 0 {
                let abs = abs as usize;
                w.human_ids[i] = human[abs];
                w.machine_ids[i] = machine[abs];
                w.beats[i] = beat_at(abs) as usize;
            }
        }
        w
    }
}

/// Masked model input for one view anchored at step `t`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WindowedContext {
    pub view: View,
    pub human_ids: Vec<usize>,
    pub machine_ids: Vec<usize>,
    pub beats: Vec<usize>,
    pub beat: usize,
    pub target_start: usize,
    /// Target positions that fall inside the sequence.
    pub valid: usize,
}

/// Builds the view's input for anchor step `t`. `human` and `machine` must be
/// in the view's scheme (multi-hold for (a), single-hold otherwise).
pub fn mask_context_ids(
    human: &[usize],
    machine: &[usize],
    t: usize,
    view: View,
    config: &ModelConfig,
) -> WindowedContext {
    let len = human.len();
    if view == View::JointPre {
        let w = StateWindow::at(human, machine, t, config.window);
        return WindowedContext {
            view,
            human_ids: w.human_ids,
            machine_ids: w.machine_ids,
            beats: w.beats,
            beat: w.beat,
            target_start: t,
            valid: usize::from(t < len),
        };
    }
    let width = config.span_window();
    let target = config.pre_context..config.pre_context + config.span;
    let mut ctx = WindowedContext {
        view,
        human_ids: vec![PAD_ID; width],
        machine_ids: vec![PAD_ID; width],
        beats: vec![0; width],
        beat: beat_at(t) as usize,
        target_start: t,
        valid: len.saturating_sub(t).min(config.span),
    };
    for i in 0..width {
        let abs = t as isize - config.pre_context as isize + i as isize;
        let inside = abs >= 0 && (abs as usize) < len;
        if target.contains(&i) {
            ctx.machine_ids[i] = MASK_ID;
        }
        if !inside {
            continue;
        }
        let abs = abs as usize;
        ctx.beats[i] = beat_at(abs) as usize;
        if view != View::Horizontal {
            ctx.human_ids[i] = human[abs];
        }
        if !target.contains(&i) && view != View::Vertical {
            ctx.machine_ids[i] = machine[abs];
        }
    }
    ctx
}

/// Builds the view's input from a duet, converting its scheme as needed.
pub fn mask_context(duet: &Duet, t: usize, view: View, config: &ModelConfig) -> WindowedContext {
    let scheme = view.scheme();
    let (h, m) = if duet.human.scheme == scheme {
        (duet.human.ids.clone(), duet.machine.ids.clone())
    } else {
        (
            duet.human.convert(scheme).expect("valid duet").ids,
            duet.machine.convert(scheme).expect("valid duet").ids,
        )
    };
    mask_context_ids(&h, &m, t, view, config)
}

/// Per-position distributions over the output vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub probs: Vec<Vec<f64>>,
    /// Leading positions that lie inside the sequence.
    pub valid: usize,
}

impl ModelOutput {
    pub fn argmax(&self, position: usize) -> usize {
        argmax(&self.probs[position])
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
struct BranchIds {
    embed: ParamId,
    layers: Vec<(GruParams, GruParams)>,
}

#[derive(Debug, Clone, PartialEq)]
struct NetIds {
    human: BranchIds,
    machine: BranchIds,
    beat_embed: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    query: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    value: Option<(ParamId, ParamId)>,
}

/// A network of one [`ModelKind`] with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DuetNet<T: Real = f32> {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: Params<T>,
    ids: NetIds,
}

/// Trunk output on a tape.
pub struct Features {
    /// `[1, 3S + E]`: the summary, the projected state of the newest window
    /// step and the predicted beat's embedding.
    pub features: Var,
}

impl<T: Real> DuetNet<T> {
    pub fn input_vocab(kind: ModelKind) -> usize {
        let scheme = kind.view().scheme();
        scheme.vocab_size() + usize::from(kind.view().is_span())
    }

    pub fn output_vocab(kind: ModelKind) -> usize {
        kind.view().scheme().vocab_size()
    }

    pub fn positions(kind: ModelKind, config: &ModelConfig) -> usize {
        if kind.view().is_span() {
            config.span
        } else {
            1
        }
    }

    fn feature_width(config: &ModelConfig) -> usize {
        3 * config.summary_width + config.embed_dim
    }

    /// Freshly initialized network.
    pub fn new(kind: ModelKind, config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(kind, config, &mut rng)
    }

    pub fn init<R: Rng + ?Sized>(kind: ModelKind, config: ModelConfig, rng: &mut R) -> Self {
        let mut p = Params::new();
        let vin = Self::input_vocab(kind);
        let (e, h) = (config.embed_dim, config.hidden);
        let branch = |p: &mut Params<T>, name: &str, rng: &mut R| {
            let embed = p.add(&format!("{name}.embed"), &[vin, e], Init::Normal(0.02), rng);
            let layers = (0..config.layers)
                .map(|l| {
                    let input = if l == 0 { e } else { 2 * h };
                    let f = GruParams::register(p, &format!("{name}.gru{l}.fwd"), input, h, rng);
                    let b = GruParams::register(p, &format!("{name}.gru{l}.bwd"), input, h, rng);
                    (f, b)
                })
                .collect();
            BranchIds { embed, layers }
        };
        let human = branch(&mut p, "human", rng);
        let machine = branch(&mut p, "machine", rng);
        let beat_embed = p.add("beat.embed", &[BEAT_VOCAB, e], Init::Normal(0.02), rng);
        let step_width = 4 * h + e;
        let s = config.summary_width;
        let proj_w = p.add(
            "summary.proj.w",
            &[step_width, s],
            Init::FanIn(step_width),
            rng,
        );
        let proj_b = p.add("summary.proj.b", &[1, s], Init::FanIn(step_width), rng);
        let query = p.add("summary.query", &[s, 1], Init::FanIn(s), rng);
        let fw = Self::feature_width(&config);
        let out = Self::positions(kind, &config) * Self::output_vocab(kind);
        let head_w = p.add("head.w", &[fw, out], Init::FanIn(fw), rng);
        let head_b = p.add("head.b", &[1, out], Init::FanIn(fw), rng);
        let value = (!kind.view().is_span()).then(|| {
            (
                p.add("value.w", &[fw, 1], Init::FanIn(fw), rng),
                p.add("value.b", &[1, 1], Init::FanIn(fw), rng),
            )
        });
        DuetNet {
            kind,
            config,
            params: p,
            ids: NetIds {
                human,
                machine,
                beat_embed,
                proj_w,
                proj_b,
                query,
                head_w,
                head_b,
                value,
            },
        }
    }

    /// Rebuilds a network around loaded parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_params(
        kind: ModelKind,
        config: ModelConfig,
        params: Params<T>,
    ) -> Result<Self, String> {
        let template: DuetNet<T> = DuetNet::new(kind, config, 0);
        if template.params.len() != params.len() {
            return Err(format!(
                "{kind} expects {} tensors, found {}",
                template.params.len(),
                params.len()
            ));
        }
        for e in template.params.entries() {
            match params.by_name(&e.name) {
                Some(t) if t.shape() == e.tensor.shape() => {}
                Some(t) => {
                    return Err(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        e.name,
                        t.shape(),
                        e.tensor.shape()
                    ))
                }
                None => return Err(format!("missing tensor {}", e.name)),
            }
        }
        let mut ordered = Params::new();
        for e in template.params.entries() {
            ordered.insert(
                &e.name,
                params.by_name(&e.name).expect("checked").clone(),
                e.init,
            );
        }
        Ok(DuetNet {
            params: ordered,
            ..template
        })
    }

    pub fn cast<U: Real>(&self) -> DuetNet<U> {
        DuetNet {
            kind: self.kind,
            config: self.config,
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    pub fn has_value_head(&self) -> bool {
        self.ids.value.is_some()
    }

    fn branch(&self, tape: &mut Tape<'_, T>, ids: &[usize], b: &BranchIds) -> Var {
        let table = tape.param(b.embed);
        let mut x = tape.embed(table, ids);
        for (f, bw) in &b.layers {
            x = bigru(tape, x, f, bw);
        }
        x
    }

    /// Trunk features for arbitrary aligned windows.
    pub fn features(
        &self,
        tape: &mut Tape<'_, T>,
        human_ids: &[usize],
        machine_ids: &[usize],
        beats: &[usize],
        beat: usize,
    ) -> Features {
        assert_eq!(human_ids.len(), machine_ids.len(), "window lengths");
        assert_eq!(human_ids.len(), beats.len(), "window lengths");
        let h = self.branch(tape, human_ids, &self.ids.human);
        let m = self.branch(tape, machine_ids, &self.ids.machine);
        let beat_table = tape.param(self.ids.beat_embed);
        let b = tape.embed(beat_table, beats);
        let steps = tape.concat(&[h, m, b]);
        let proj = affine(tape, steps, self.ids.proj_w, self.ids.proj_b);
        let proj = tape.tanh(proj);
        let query = tape.param(self.ids.query);
        let summary = summarize(tape, proj, query);
        let newest = tape.row(proj, human_ids.len() - 1);
        let now = tape.embed(beat_table, &[beat]);
        Features {
            features: tape.concat(&[summary, newest, now]),
        }
    }

    /// Token logits `[positions, V]`.
    pub fn logits(&self, tape: &mut Tape<'_, T>, f: &Features) -> Var {
        let flat = affine(tape, f.features, self.ids.head_w, self.ids.head_b);
        let p = Self::positions(self.kind, &self.config);
        tape.reshape(flat, p, Self::output_vocab(self.kind))
    }

    /// Scalar value estimate; gradients do not reach the trunk.
    pub fn value(&self, tape: &mut Tape<'_, T>, f: &Features) -> Var {
        let (w, b) = self.ids.value.expect("network has a value head");
        let detached = tape.stop_grad(f.features);
        affine(tape, detached, w, b)
    }

    pub fn window_features(&self, tape: &mut Tape<'_, T>, w: &StateWindow) -> Features {
        self.features(tape, &w.human_ids, &w.machine_ids, &w.beats, w.beat)
    }

    pub fn context_features(&self, tape: &mut Tape<'_, T>, c: &WindowedContext) -> Features {
        self.features(tape, &c.human_ids, &c.machine_ids, &c.beats, c.beat)
    }

    /// `p(. | s_t)` from a generation-shaped network.
    pub fn generation_forward(&self, window: &StateWindow) -> ModelOutput {
        assert!(!self.kind.view().is_span(), "{} is a span model", self.kind);
        let mut tape = Tape::new(&self.params);
        let f = self.window_features(&mut tape, window);
        let logits = self.logits(&mut tape, &f);
        let probs = tape.softmax_rows(logits);
        ModelOutput {
            probs: vec![tape.value_f64(probs)],
            valid: 1,
        }
    }

    /// Distributions and value from one trunk evaluation.
    pub fn policy_and_value(&self, window: &StateWindow) -> (Vec<f64>, f64) {
        let mut tape = Tape::new(&self.params);
        let f = self.window_features(&mut tape, window);
        let logits = self.logits(&mut tape, &f);
        let probs = tape.softmax_rows(logits);
        let v = self.value(&mut tape, &f);
        (tape.value_f64(probs), tape.scalar(v))
    }

    pub fn value_forward(&self, window: &StateWindow) -> f64 {
        let mut tape = Tape::new(&self.params);
        let f = self.window_features(&mut tape, window);
        let v = self.value(&mut tape, &f);
        tape.scalar(v)
    }

    /// Per-position distributions for a masked context. For view (a) this is
    /// the single next-token distribution.
    pub fn reward_forward(&self, ctx: &WindowedContext) -> ModelOutput {
        assert_eq!(
            ctx.view,
            self.kind.view(),
            "context view does not match {}",
            self.kind
        );
        let mut tape = Tape::new(&self.params);
        let f = self.context_features(&mut tape, ctx);
        let logits = self.logits(&mut tape, &f);
        let probs = tape.softmax_rows(logits);
        let v = self.output_vocab_size();
        ModelOutput {
            probs: tape
                .value_f64(probs)
                .chunks(v)
                .map(<[f64]>::to_vec)
                .collect(),
            valid: ctx.valid,
        }
    }

    pub fn output_vocab_size(&self) -> usize {
        Self::output_vocab(self.kind)
    }
}
