//! Independent oracles shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use duet_core::corpus::Chorale;
use duet_core::metrics::{
    avg_ioi, avg_pitch_interval, histograms, pitch_count_per_bar, Part, NLH_BINS,
};
use duet_core::models::{DuetNet, ModelConfig, ModelKind, StateWindow};
use duet_core::nn::{self, GruParams};
use duet_core::score::{Note, Scheme, MAX_PITCH, MIN_PITCH};
use duet_core::tensor::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures");

pub const SEEDS: u64 = 50;
pub const OPS: [&str; 20] = [
    "matmul_left",
    "matmul_right",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "sigmoid",
    "tanh",
    "concat",
    "row",
    "stack",
    "embed",
    "max_rows",
    "softmax_rows",
    "log_softmax_rows",
    "select_cols",
    "reshape",
    "pick_sum",
    "cross_entropy",
];

pub fn tolerance<T: Real>() -> (f64, f64) {
    // (eps, bound)
    if std::mem::size_of::<T>() == 4 {
        (1e-3, 1e-3)
    } else {
        (1e-6, 1e-5)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Reduces any value to a scalar through fixed random weights so no
/// coordinate's gradient vanishes by symmetry.
fn weigh<T: Real>(t: &mut Tape<'_, T>, v: Var, seed: u64) -> Var {
    let (r, c) = t.dims(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = t.input_f64(r, c, &uniform(&mut rng, r * c));
    let p = t.mul(v, w);
    t.sum(p)
}

/// Worst relative error of one op on random small shapes.
pub fn op_error<T: Real>(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n, k) = (
        rng.random_range(1..5),
        rng.random_range(1..5),
        rng.random_range(1..5),
    );
    let other = uniform(&mut rng, 64);
    let (eps, _) = tolerance::<T>();
    let params: Params<T> = Params::new();
    let x = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        Tensor::<T>::from_f64(&[rows, cols], &uniform(rng, rows * cols))
    };
    let check = |x: &Tensor<T>, f: &dyn Fn(&mut Tape<'_, T>, Var) -> Var| {
        grad_check(&params, x, eps, |t, v| {
            let y = f(t, v);
            weigh(t, y, seed)
        })
    };
    match op {
        "matmul_left" => check(&x(m, k, &mut rng), &|t, v| {
            let b = t.input_f64(k, n, &other[..k * n]);
            t.matmul(v, b)
        }),
        "matmul_right" => check(&x(k, n, &mut rng), &|t, v| {
            let a = t.input_f64(m, k, &other[..m * k]);
            t.matmul(a, v)
        }),
        "add" | "sub" | "mul" => check(&x(m, n, &mut rng), &|t, v| {
            let b = t.input_f64(m, n, &other[..m * n]);
            match op {
                "add" => t.add(b, v),
                "sub" => t.sub(b, v),
                _ => t.mul(v, b),
            }
        }),
        "add_row" => {
            let a = check(&x(m, n, &mut rng), &|t, v| {
                let b = t.input_f64(1, n, &other[..n]);
                t.add_row(v, b)
            });
            let b = check(&x(1, n, &mut rng), &|t, v| {
                let a = t.input_f64(m, n, &other[..m * n]);
                t.add_row(a, v)
            });
            a.max(b)
        }
        "scale" => check(&x(m, n, &mut rng), &|t, v| t.scale(v, -1.7)),
        "sigmoid" => check(&x(m, n, &mut rng), &|t, v| t.sigmoid(v)),
        "tanh" => check(&x(m, n, &mut rng), &|t, v| t.tanh(v)),
        "concat" => check(&x(m, n, &mut rng), &|t, v| {
            let b = t.input_f64(m, k, &other[..m * k]);
            let sq = t.mul(v, v);
            t.concat(&[b, v, sq])
        }),
        "row" => check(&x(m, n, &mut rng), &|t, v| t.row(v, m - 1)),
        "stack" => check(&x(m, n, &mut rng), &|t, v| {
            let rows: Vec<Var> = (0..m).rev().map(|i| t.row(v, i)).collect();
            let first = t.row(v, 0);
            let mut all = rows;
            all.push(first);
            t.stack(&all)
        }),
        "embed" => {
            let ids: Vec<usize> = (0..k + 2).map(|_| rng.random_range(0..m)).collect();
            check(&x(m, n, &mut rng), &|t, v| t.embed(v, &ids))
        }
        "max_rows" => {
            // distinct values at least 0.1 apart keep the argmax away from kinks
            let mut vals: Vec<f64> = (0..m * n).map(|i| i as f64 * 0.1 - 0.5).collect();
            vals.shuffle(&mut rng);
            check(&Tensor::from_f64(&[m, n], &vals), &|t, v| t.max_rows(v))
        }
        "softmax_rows" => check(&x(m, n, &mut rng), &|t, v| t.softmax_rows(v)),
        "log_softmax_rows" => check(&x(m, n, &mut rng), &|t, v| t.log_softmax_rows(v)),
        "select_cols" => {
            let cols: Vec<usize> = (0..k + 1).map(|_| rng.random_range(0..n)).collect();
            check(&x(m, n, &mut rng), &|t, v| t.select_cols(v, &cols))
        }
        "reshape" => check(&x(m, n, &mut rng), &|t, v| t.reshape(v, 1, m * n)),
        "pick_sum" => {
            let at: Vec<(usize, usize)> = (0..k + 1)
                .map(|_| (rng.random_range(0..m), rng.random_range(0..n)))
                .collect();
            grad_check(&params, &x(m, n, &mut rng), eps, |t, v| t.pick_sum(v, &at))
        }
        "cross_entropy" => {
            let targets: Vec<(usize, usize)> =
                (0..m).map(|r| (r, rng.random_range(0..n))).collect();
            grad_check(&params, &x(m, n, &mut rng), eps, |t, v| {
                t.cross_entropy(v, &targets)
            })
        }
        _ => unreachable!("{op}"),
    }
}

/// The fused recurrent op, checked against inputs and every weight.
pub fn gru_error<T: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (steps, d, h) = (
        rng.random_range(1..5),
        rng.random_range(1..4),
        rng.random_range(1..4),
    );
    let mut params: Params<T> = Params::new();
    let p = GruParams::register(&mut params, "g", d, h, &mut rng);
    let reverse = seed % 2 == 1;
    let (eps, _) = tolerance::<T>();
    let x = Tensor::<T>::from_f64(&[steps, d], &uniform(&mut rng, steps * d));
    let wrt_x = grad_check(&params, &x, eps, |t, v| {
        let y = nn::gru(t, v, &p, reverse);
        weigh(t, y, seed)
    });
    let wrt_w = grad_check_params(&params, eps, None, |t| {
        let v = t.input(&x);
        let y = nn::gru(t, v, &p, reverse);
        weigh(t, y, seed)
    });
    wrt_x.max(wrt_w)
}

/// A small-window two-layer network so every parameter tensor is exercised
/// quickly.
fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        hidden: 3,
        layers: 2,
        summary_width: 5,
        window: 6,
        pre_context: 3,
        span: 2,
        post_context: 3,
    }
}

fn random_window(rng: &mut ChaCha8Rng, len: usize) -> StateWindow {
    let vocab = Scheme::MultiHold.vocab_size();
    let human: Vec<usize> = (0..len + 3).map(|_| rng.random_range(0..vocab)).collect();
    let machine: Vec<usize> = (0..len + 3).map(|_| rng.random_range(0..vocab)).collect();
    StateWindow::at(&human, &machine, len + 3, len)
}

/// One random coordinate per parameter tensor.
fn coords<T: Real>(
    params: &Params<T>,
    rng: &mut ChaCha8Rng,
    only: impl Fn(&str) -> bool,
) -> Vec<(ParamId, usize)> {
    params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| only(&e.name))
        .map(|(i, e)| (ParamId(i), rng.random_range(0..e.tensor.len())))
        .collect()
}

/// A scalar training loss evaluated on a network rebuilt from the tape's
/// parameters, so it can run at either precision.
trait Loss {
    fn eval<T: Real>(&self, t: &mut Tape<'_, T>, kind: ModelKind, config: ModelConfig) -> Var;
}

struct PolicyLoss {
    window: StateWindow,
    target: usize,
}

impl Loss for PolicyLoss {
    fn eval<T: Real>(&self, t: &mut Tape<'_, T>, kind: ModelKind, config: ModelConfig) -> Var {
        let net = DuetNet::from_params(kind, config, t.params().clone()).unwrap();
        let f = net.window_features(t, &self.window);
        let logits = net.logits(t, &f);
        t.cross_entropy(logits, &[(0, self.target)])
    }
}

struct ValueLoss {
    window: StateWindow,
    goal: f64,
}

impl Loss for ValueLoss {
    fn eval<T: Real>(&self, t: &mut Tape<'_, T>, kind: ModelKind, config: ModelConfig) -> Var {
        let net = DuetNet::from_params(kind, config, t.params().clone()).unwrap();
        let f = net.window_features(t, &self.window);
        let v = net.value(t, &f);
        let g = t.input_f64(1, 1, &[self.goal]);
        let d = t.sub(v, g);
        t.mul(d, d)
    }
}

struct SpanLoss {
    human: Vec<usize>,
    machine: Vec<usize>,
    beats: Vec<usize>,
    targets: Vec<(usize, usize)>,
}

impl Loss for SpanLoss {
    fn eval<T: Real>(&self, t: &mut Tape<'_, T>, kind: ModelKind, config: ModelConfig) -> Var {
        let net = DuetNet::from_params(kind, config, t.params().clone()).unwrap();
        let f = net.features(t, &self.human, &self.machine, &self.beats, 1);
        let logits = net.logits(t, &f);
        t.cross_entropy(logits, &self.targets)
    }
}

/// Tape gradient of the network at precision `T` against central
/// differences. At f64 the differences use the same precision. At f32 they
/// are taken on the same parameter values widened to f64: a float32 forward
/// pass cannot resolve a step small enough to stay clear of the max-pool
/// kinks in the summarizer.
fn network_check<T: Real>(
    net: &DuetNet<f64>,
    loss: &impl Loss,
    coords: &[(ParamId, usize)],
) -> f64 {
    let (kind, config) = (net.kind, net.config);
    let low: Params<T> = net.params.cast();
    let wide: Params<f64> = low.cast();
    if std::mem::size_of::<T>() == 8 {
        return grad_check_params(&wide, 1e-6, Some(coords), |t| loss.eval(t, kind, config));
    }
    let mut tape = Tape::new(&low);
    let out = loss.eval(&mut tape, kind, config);
    let analytic = tape.backward(out).params;
    let at = |p: &Params<f64>| {
        let mut t = Tape::new(p);
        let o = loss.eval(&mut t, kind, config);
        t.scalar(o)
    };
    let eps = 1e-6;
    let mut probe = wide.clone();
    let mut worst = 0.0f64;
    for &(pid, i) in coords {
        let base = wide.get(pid).data()[i];
        probe.get_mut(pid).data_mut()[i] = base + eps;
        let hi = at(&probe);
        probe.get_mut(pid).data_mut()[i] = base - eps;
        let lo = at(&probe);
        probe.get_mut(pid).data_mut()[i] = base;
        worst = worst.max(relative_error(
            analytic.values[pid.0][i],
            (hi - lo) / (2.0 * eps),
        ));
    }
    worst
}

/// Policy cross-entropy through the whole trunk, and squared value error
/// through the value head (the trunk is detached from the value loss).
pub fn network_error<T: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = small_config();
    let net = DuetNet::<f64>::new(ModelKind::Gen, config, seed);
    let window = random_window(&mut rng, config.window);
    let policy = PolicyLoss {
        window: window.clone(),
        target: rng.random_range(0..Scheme::MultiHold.vocab_size()),
    };
    let all = coords(&net.params, &mut rng, |_| true);
    let head = coords(&net.params, &mut rng, |n| n.starts_with("value."));
    let value = ValueLoss {
        window,
        goal: rng.random_range(-1.0..1.0),
    };
    network_check::<T>(&net, &policy, &all).max(network_check::<T>(&net, &value, &head))
}

/// Span reward network: per-position cross-entropy through the full trunk.
pub fn reward_network_error<T: Real>(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = small_config();
    let net = DuetNet::<f64>::new(ModelKind::RwdB, config, seed);
    let width = config.span_window();
    let vocab = DuetNet::<f64>::input_vocab(net.kind);
    let out = DuetNet::<f64>::output_vocab(net.kind);
    let mut ids = || {
        (0..width)
            .map(|_| rng.random_range(0..vocab))
            .collect::<Vec<_>>()
    };
    let (human, machine) = (ids(), ids());
    let loss = SpanLoss {
        human,
        machine,
        beats: (0..width).map(|i| i % 4 + 1).collect(),
        targets: (0..config.span)
            .map(|p| (p, rng.random_range(0..out)))
            .collect(),
    };
    let all = coords(&net.params, &mut rng, |_| true);
    network_check::<T>(&net, &loss, &all)
}

/// Minimal-cost transport between two histograms, solved as a min-cost
/// flow (successive shortest paths with Bellman-Ford on the residual
/// graph). Shares nothing with the prefix-sum formula.
pub fn transport_cost(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len();
    // nodes: 0 source, 1..=n supply bins, n+1..=2n demand bins, 2n+1 sink
    let (src, sink) = (0, 2 * n + 1);
    let mut edges: Vec<(usize, usize, f64, f64)> = Vec::new(); // to, rev, cap, cost
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); 2 * n + 2];
    let add = |adj: &mut Vec<Vec<usize>>,
               edges: &mut Vec<(usize, usize, f64, f64)>,
               a: usize,
               b: usize,
               cap: f64,
               cost: f64| {
        adj[a].push(edges.len());
        edges.push((b, edges.len() + 1, cap, cost));
        adj[b].push(edges.len());
        edges.push((a, edges.len() - 1, 0.0, -cost));
    };
    for i in 0..n {
        add(&mut adj, &mut edges, src, 1 + i, p[i], 0.0);
        add(&mut adj, &mut edges, 1 + n + i, sink, q[i], 0.0);
        for j in 0..n {
            add(
                &mut adj,
                &mut edges,
                1 + i,
                1 + n + j,
                f64::INFINITY,
                (i as f64 - j as f64).abs(),
            );
        }
    }
    let mut cost = 0.0;
    loop {
        let mut dist = vec![f64::INFINITY; 2 * n + 2];
        let mut via = vec![usize::MAX; 2 * n + 2];
        dist[src] = 0.0;
        for _ in 0..2 * n + 2 {
            let mut changed = false;
            for u in 0..2 * n + 2 {
                if dist[u].is_infinite() {
                    continue;
                }
                for &e in &adj[u] {
                    let (v, _, cap, c) = edges[e];
                    if cap > 1e-15 && dist[u] + c < dist[v] - 1e-15 {
                        dist[v] = dist[u] + c;
                        via[v] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink].is_infinite() {
            return cost;
        }
        let mut push = f64::INFINITY;
        let mut v = sink;
        while v != src {
            let e = via[v];
            push = push.min(edges[e].2);
            v = edges[edges[e].1].0;
        }
        let mut v = sink;
        while v != src {
            let e = via[v];
            edges[e].2 -= push;
            let r = edges[e].1;
            edges[r].2 += push;
            cost += push * edges[e].3;
            v = edges[r].0;
        }
    }
}

/// `A_t = sum_k (gamma lambda)^(k-t) delta_k`, `R_t = sum_k gamma^(k-t) r_k`,
/// summed term by term.
pub fn double_sum(
    r: &[f64],
    v: &[f64],
    terminal: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = r.len();
    let value = |t: usize| if t < n { v[t] } else { terminal };
    let delta: Vec<f64> = (0..n).map(|t| r[t] + gamma * value(t + 1) - v[t]).collect();
    let mut adv = vec![0.0; n];
    let mut ret = vec![0.0; n];
    for t in 0..n {
        let (mut w_adv, mut w_ret) = (1.0, 1.0);
        for k in t..n {
            adv[t] += w_adv * delta[k];
            ret[t] += w_ret * r[k];
            w_adv *= gamma * lambda;
            w_ret *= gamma;
        }
    }
    (adv, ret)
}

/// Independent reading of the hold grammar on labels: a hold is legal when
/// the nearest non-hold token before it is an onset of the same pitch
/// (multi-hold) or any onset (single-hold).
pub fn grammar_ok(labels: &[String]) -> bool {
    let mut open: Option<&str> = None;
    for l in labels {
        if l == "HOLD" {
            if open.is_none() {
                return false;
            }
        } else if let Some(p) = l.strip_suffix("_H") {
            if open != Some(p) {
                return false;
            }
        } else if l.starts_with('P') && l != "PAD" {
            open = Some(l);
        } else {
            open = None;
        }
    }
    true
}

/// Random non-overlapping notes and a part length that holds them.
pub fn random_notes(rng: &mut ChaCha8Rng) -> (Vec<Note>, usize) {
    let mut cursor = 0;
    let notes = (0..rng.random_range(0..40))
        .map(|_| {
            let n = Note::new(
                rng.random_range(MIN_PITCH..=MAX_PITCH),
                cursor + rng.random_range(0..6),
                rng.random_range(1..12),
            );
            cursor = n.end();
            n
        })
        .collect();
    (notes, cursor + rng.random_range(0..8))
}

/// (pc/bar, pi, ioi, pch counts, nlh counts) per voice of fixture-001,
/// tallied by hand.
pub const HAND_TALLY: [(f64, f64, f64, [u32; 12], [u32; NLH_BINS]); 4] = [
    (
        11.0 / 4.0,
        37.0 / 29.0,
        112.0 / 29.0,
        [0, 0, 1, 0, 3, 6, 0, 13, 1, 6, 0, 0],
        [1, 2, 1, 24, 0, 1, 0, 1, 0, 0, 0],
    ),
    (
        17.0 / 8.0,
        14.0 / 11.0,
        56.0 / 11.0,
        [12, 0, 6, 0, 1, 0, 0, 0, 0, 0, 0, 4],
        [0, 0, 0, 16, 0, 6, 0, 1, 0, 0, 0],
    ),
    (
        23.0 / 8.0,
        4.0 / 3.0,
        56.0 / 15.0,
        [1, 0, 2, 0, 10, 8, 2, 7, 0, 1, 0, 0],
        [0, 8, 0, 20, 0, 2, 0, 1, 0, 0, 0],
    ),
    (
        29.0 / 8.0,
        114.0 / 31.0,
        112.0 / 31.0,
        [9, 0, 4, 0, 2, 5, 0, 8, 0, 4, 0, 0],
        [0, 6, 0, 25, 0, 0, 0, 1, 0, 0, 0],
    ),
];

/// Every metric that disagrees with the hand tally, by voice.
pub fn tally_mismatches(fixture_001: &Chorale) -> Vec<String> {
    let mut bad = Vec::new();
    for (voice, (pc, pi, ioi, pch, nlh)) in HAND_TALLY.iter().enumerate() {
        let part = Part::new(&fixture_001.parts[voice], fixture_001.length);
        let n = part.notes.len() as f64;
        let (h_pc, h_nl) = histograms(&part);
        let want_pc: Vec<f64> = pch.iter().map(|&k| k as f64 / n).collect();
        let want_nl: Vec<f64> = nlh.iter().map(|&k| k as f64 / n).collect();
        let checks = [
            ("PC/bar", pitch_count_per_bar(&part) == *pc),
            ("PI", avg_pitch_interval(&part) == *pi),
            ("IOI", avg_ioi(&part) == *ioi),
            ("PCH", h_pc.to_vec() == want_pc),
            ("NLH", h_nl.to_vec() == want_nl),
        ];
        bad.extend(
            checks
                .iter()
                .filter(|c| !c.1)
                .map(|c| format!("voice {voice} {}", c.0)),
        );
    }
    bad
}

/// A random multi-hold part of exactly `len` steps.
pub fn random_part(rng: &mut ChaCha8Rng, len: usize) -> duet_core::score::TokenSeq {
    let mut notes = Vec::new();
    let mut cursor = 0;
    loop {
        let onset = cursor + rng.random_range(0..4);
        let dur = rng.random_range(1..9);
        if onset + dur > len {
            break;
        }
        notes.push(Note::new(
            rng.random_range(MIN_PITCH..=MAX_PITCH),
            onset,
            dur,
        ));
        cursor = onset + dur;
    }
    duet_core::score::encode_part(&notes, Scheme::MultiHold, len).unwrap()
}
