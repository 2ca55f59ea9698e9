//! Layers built on the tape: gated recurrent units, the temporal context
//! summarizer and affine maps.

use rand::Rng;

use crate::tensor::{Init, ParamId, Params, Real, Tape, Var};

/// Weights of one gated recurrent direction.
///
/// Gate convention: `z = sigmoid(x Wz + h Uz + bz)`, `r = sigmoid(x Wr + h Ur + br)`,
/// `c = tanh(x Wn + (r * h) Un + bn)`, `h' = (1 - z) * h + z * c`, with `h0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub wz: ParamId,
    pub wr: ParamId,
    pub wn: ParamId,
    pub uz: ParamId,
    pub ur: ParamId,
    pub un: ParamId,
    pub bz: ParamId,
    pub br: ParamId,
    pub bn: ParamId,
    pub hidden: usize,
}

impl GruParams {
    pub fn register<T: Real, R: Rng + ?Sized>(
        params: &mut Params<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |name: &str, rows: usize| {
            params.add(
                &format!("{prefix}.{name}"),
                &[rows, hidden],
                Init::FanIn(rows),
                rng,
            )
        };
        let (wz, wr, wn) = (w("wz", input), w("wr", input), w("wn", input));
        let (uz, ur, un) = (w("uz", hidden), w("ur", hidden), w("un", hidden));
        let mut b = |name: &str| {
            params.add(
                &format!("{prefix}.{name}"),
                &[1, hidden],
                Init::FanIn(hidden),
                rng,
            )
        };
        let (bz, br, bn) = (b("bz"), b("br"), b("bn"));
        GruParams {
            wz,
            wr,
            wn,
            uz,
            ur,
            un,
            bz,
            br,
            bn,
            hidden,
        }
    }

    /// Looks the weights up by name in an existing parameter set.
    pub fn lookup<T: Real>(params: &Params<T>, prefix: &str) -> Option<Self> {
        let id = |name: &str| params.id(&format!("{prefix}.{name}"));
        let uz = id("uz")?;
        Some(GruParams {
            wz: id("wz")?,
            wr: id("wr")?,
            wn: id("wn")?,
            uz,
            ur: id("ur")?,
            un: id("un")?,
            bz: id("bz")?,
            br: id("br")?,
            bn: id("bn")?,
            hidden: params.get(uz).dims().0,
        })
    }
}

/// One recurrent pass over `x: [T, d]`; returns `[T, h]` in time order.
pub fn gru<T: Real>(tape: &mut Tape<'_, T>, x: Var, p: &GruParams, reverse: bool) -> Var {
    assert!(
        tape.dims(x).0 >= 1,
        "recurrent pass needs at least one step"
    );
    let w = [p.wz, p.wr, p.wn, p.uz, p.ur, p.un, p.bz, p.br, p.bn].map(|id| tape.param(id));
    tape.gru_seq(x, w, reverse)
}

/// The same pass as [`gru`] assembled from elementwise tape ops, one node per
/// gate per step. Slow; kept as a cross-check for the fused op.
pub fn gru_reference<T: Real>(tape: &mut Tape<'_, T>, x: Var, p: &GruParams, reverse: bool) -> Var {
    let (steps, _) = tape.dims(x);
    assert!(steps >= 1, "recurrent pass needs at least one step");
    let project = |tape: &mut Tape<'_, T>, w: ParamId, b: ParamId| {
        let (w, b) = (tape.param(w), tape.param(b));
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    };
    let xz = project(tape, p.wz, p.bz);
    let xr = project(tape, p.wr, p.br);
    let xn = project(tape, p.wn, p.bn);
    let (uz, ur, un) = (tape.param(p.uz), tape.param(p.ur), tape.param(p.un));
    let mut h = tape.input_f64(1, p.hidden, &vec![0.0; p.hidden]);
    let mut outputs = vec![h; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..steps).rev())
    } else {
        Box::new(0..steps)
    };
    for t in order {
        let xz_t = tape.row(xz, t);
        let hz = tape.matmul(h, uz);
        let z_in = tape.add(xz_t, hz);
        let z = tape.sigmoid(z_in);
        let xr_t = tape.row(xr, t);
        let hr = tape.matmul(h, ur);
        let r_in = tape.add(xr_t, hr);
        let r = tape.sigmoid(r_in);
        let rh = tape.mul(r, h);
        let hn = tape.matmul(rh, un);
        let xn_t = tape.row(xn, t);
        let c_in = tape.add(xn_t, hn);
        let c = tape.tanh(c_in);
        let diff = tape.sub(c, h);
        let step = tape.mul(z, diff);
        h = tape.add(h, step);
        outputs[t] = h;
    }
    tape.stack(&outputs)
}

/// Forward and backward passes concatenated per step: `[T, d] -> [T, 2h]`.
pub fn bigru<T: Real>(tape: &mut Tape<'_, T>, x: Var, fwd: &GruParams, bwd: &GruParams) -> Var {
    let f = gru(tape, x, fwd, false);
    let b = gru(tape, x, bwd, true);
    tape.concat(&[f, b])
}

/// `x W + b` for `x: [m, k]`, `W: [k, n]`, `b: [1, n]`.
pub fn affine<T: Real>(tape: &mut Tape<'_, T>, x: Var, w: ParamId, b: ParamId) -> Var {
    let (w, b) = (tape.param(w), tape.param(b));
    let xw = tape.matmul(x, w);
    tape.add_row(xw, b)
}

/// Temporal context summarizer: `[T, k] -> [1, 2k]`, the column-wise max over
/// time followed by an attention-weighted sum with weights
/// `softmax(x q / sqrt(k))` for a `[k, 1]` query.
pub fn summarize<T: Real>(tape: &mut Tape<'_, T>, x: Var, query: Var) -> Var {
    let (steps, k) = tape.dims(x);
    assert_eq!(tape.dims(query), (k, 1), "query shape");
    let pooled = tape.max_rows(x);
    let scores = tape.matmul(x, query);
    let scaled = tape.scale(scores, 1.0 / (k as f64).sqrt());
    let flat = tape.reshape(scaled, 1, steps);
    let weights = tape.softmax_rows(flat);
    let attended = tape.matmul(weights, x);
    tape.concat(&[pooled, attended])
}

/// Row-wise probabilities of `x W + b`.
pub fn affine_softmax<T: Real>(tape: &mut Tape<'_, T>, x: Var, w: ParamId, b: ParamId) -> Var {
    let logits = affine(tape, x, w, b);
    tape.softmax_rows(logits)
}
