use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use duet_core::checkpoint::Checkpoint;
use duet_core::corpus::{
    augment, load_corpus, make_test_pairs, write_corpus, Chorale, Duet, DuetSource, SEED_STEPS,
};
use duet_core::generator::{generate_accompaniment, DuetTokens, POLICY_SCHEME};
use duet_core::metrics::{Comparison, MetricReport, Part};
use duet_core::models::{ModelConfig, ModelKind, View};
use duet_core::pretrain::{pretrain as run_pretrain, PretrainConfig};
use duet_core::reward::{score_duet, Ensemble, EnsembleManifest, MemberSpec};
use duet_core::rl::{self, RlConfig};
use duet_core::score::{Scheme, TokenSeq};
use duet_service::server::{bind, Timing};
use duet_service::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{usage, CliError, FileConfig, RuntimeContext};

pub struct Context {
    pub file: FileConfig,
    pub corpus: Option<PathBuf>,
    pub seed: u64,
}

impl Context {
    fn corpus(&self, flag: &str) -> Result<Vec<Chorale>, CliError> {
        let path = self
            .corpus
            .as_ref()
            .ok_or_else(|| usage(format!("missing required flag --{flag}")))?;
        read_corpus(path)
    }
}

fn read_corpus(path: &Path) -> Result<Vec<Chorale>, CliError> {
    load_corpus(path).invalid(&format!("corpus {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).invalid(&format!("checkpoint {}", path.display()))
}

fn load_ensemble(dir: &Path) -> Result<Ensemble, CliError> {
    Ensemble::load_dir(dir).invalid(&format!("ensemble {}", dir.display()))
}

fn emit(value: &impl Serialize) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).runtime(&format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").runtime(&format!("writing {}", path.display()))
}

/// `"tiny"`, `"default"`, or a full layer-size object in the config file.
fn model_config(file: &FileConfig, flag: Option<String>) -> Result<ModelConfig, CliError> {
    match file.maybe(flag.map(Value::String), "model")? {
        None => Ok(ModelConfig::default()),
        Some(Value::String(s)) if s == "default" => Ok(ModelConfig::default()),
        Some(Value::String(s)) if s == "tiny" => Ok(ModelConfig::tiny()),
        Some(v @ Value::Object(_)) => {
            serde_json::from_value(v).map_err(|e| usage(format!("model: {e}")))
        }
        Some(v) => Err(usage(format!(
            "model must be \"tiny\", \"default\" or an object, got {v}"
        ))),
    }
}

fn training_set(chorales: Vec<Chorale>, augmented: bool) -> Vec<Chorale> {
    if augmented {
        augment(&chorales)
    } else {
        chorales
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory (or file) of jsonl chorale records
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output corpus file
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn ingest(ctx: &Context, args: IngestArgs) -> Result<(), CliError> {
    let input: PathBuf = ctx.file.need(args.input, "in")?;
    let out: PathBuf = ctx.file.need(args.out, "out")?;
    let chorales = read_corpus(&input)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).runtime("creating output directory")?;
    }
    fs::write(&out, write_corpus(&chorales)).runtime(&format!("writing {}", out.display()))?;
    tracing::info!(chorales = chorales.len(), out = %out.display(), "corpus written");
    emit(&json!({
        "chorales": chorales.len(),
        "steps": chorales.iter().map(|c| c.length).sum::<usize>(),
        "out": out,
    }));
    Ok(())
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Context view: a, b, c or d
    #[arg(long)]
    view: Option<String>,
    /// Train all six reward recipes into the --out directory
    #[arg(long)]
    suite: Option<bool>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Gradient-norm clip
    #[arg(long)]
    clip: Option<f64>,
    /// Layer sizes: tiny or default
    #[arg(long)]
    model: Option<String>,
    /// Validation corpus for best-checkpoint selection
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Add every in-range transposition of the training chorales
    #[arg(long)]
    augment: Option<bool>,
    /// Checkpoint file, or directory with --suite
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_view(s: &str) -> Result<View, CliError> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| usage(format!("--view must be one of a, b, c, d; got {s:?}")))
}

pub fn pretrain(ctx: &Context, args: PretrainArgs) -> Result<(), CliError> {
    let f = &ctx.file;
    let suite = f.pick(args.suite, "suite", false)?;
    let out = f.ckpt_path(f.need(args.out, "out")?);
    let model = model_config(f, args.model)?;
    let mut recipes = if suite {
        PretrainConfig::reward_suite(ctx.seed, model)
    } else {
        let view = parse_view(&f.need::<String>(args.view, "view")?)?;
        let kind = ModelKind::reward_for(view);
        let default_lr = if view == View::JointPre { 0.01 } else { 0.05 };
        let mut c = PretrainConfig::new(kind, default_lr);
        c.seed = ctx.seed;
        c.model = model;
        vec![c]
    };
    for r in &mut recipes {
        if !suite {
            r.lr = f.pick(args.lr, "lr", r.lr)?;
        }
        r.epochs = f.pick(args.epochs, "epochs", r.epochs)?;
        r.batch_size = f.pick(args.batch_size, "batch-size", r.batch_size)?;
        r.clip = f.pick(args.clip, "clip", r.clip)?;
        if !(r.lr > 0.0 && r.lr.is_finite()) || r.batch_size == 0 {
            return Err(usage("--lr must be positive and --batch-size at least 1"));
        }
    }
    let train = training_set(
        ctx.corpus("corpus")?,
        f.pick(args.augment, "augment", true)?,
    );
    let valid = match f.maybe(args.valid, "valid")? {
        Some(p) => read_corpus(&p)?,
        None => Vec::new(),
    };
    let mut members = Vec::new();
    for recipe in &recipes {
        let stem = recipe.stem();
        tracing::info!(recipe = %stem, epochs = recipe.epochs, chorales = train.len(), "pretraining");
        let outcome = run_pretrain(&train, &valid, recipe, |e| {
            let mut line = serde_json::to_value(e).expect("serializable");
            line["recipe"] = Value::String(stem.clone());
            emit(&line);
        })
        .runtime(&format!("pretraining {stem}"))?;
        let path = if suite {
            out.join(format!("{stem}.ckpt"))
        } else {
            out.clone()
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).runtime("creating checkpoint directory")?;
        }
        outcome
            .checkpoint
            .save(&path)
            .runtime(&format!("writing {}", path.display()))?;
        emit(&json!({"event": "saved", "recipe": stem, "out": path}));
        members.push(MemberSpec {
            path: PathBuf::from(format!("{stem}.ckpt")),
            weight: None,
        });
    }
    if suite {
        write_json(&out.join("ensemble.json"), &EnsembleManifest { members })?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct RlTrainArgs {
    /// Reward ensemble directory
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Warm-start checkpoint (view a)
    #[arg(long)]
    init: Option<PathBuf>,
    /// Training duets to play
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lam: Option<f64>,
    #[arg(long = "policy-lr")]
    policy_lr: Option<f64>,
    #[arg(long = "value-lr")]
    value_lr: Option<f64>,
    /// Episodes per update
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    /// Rollout sampling temperature
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn rl_train(ctx: &Context, args: RlTrainArgs) -> Result<(), CliError> {
    let f = &ctx.file;
    let d = RlConfig::default();
    let config = RlConfig {
        gamma: f.pick(args.gamma, "gamma", d.gamma)?,
        lambda: f.pick(args.lam, "lam", d.lambda)?,
        budget: f.pick(args.budget, "budget", d.budget)?,
        policy_lr: f.pick(args.policy_lr, "policy-lr", d.policy_lr)?,
        value_lr: f.pick(args.value_lr, "value-lr", d.value_lr)?,
        batch: f.pick(args.batch, "batch", d.batch)?,
        clip: f.pick(args.clip, "clip", d.clip)?,
        temperature: f.pick(args.temperature, "temperature", d.temperature)?,
        seed: ctx.seed,
    };
    if !(0.0..=1.0).contains(&config.gamma) || !(0.0..=1.0).contains(&config.lambda) {
        return Err(usage("--gamma and --lam must lie in [0, 1]"));
    }
    if config.batch == 0 {
        return Err(usage("--batch must be at least 1"));
    }
    let ensemble = load_ensemble(&f.ckpt_path(f.need(args.ensemble, "ensemble")?))?;
    let init = load_ckpt(&f.ckpt_path(f.need(args.init, "init")?))?;
    let out = f.ckpt_path(f.need(args.out, "out")?);
    let corpus = training_set(
        ctx.corpus("corpus")?,
        f.pick(args.augment, "augment", true)?,
    );
    tracing::info!(
        budget = config.budget,
        members = ensemble.len(),
        "rl training"
    );
    let ckpt = rl::train(&corpus, &ensemble, &init, &config, |event, _| emit(event))
        .runtime("rl training")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).runtime("creating checkpoint directory")?;
    }
    ckpt.save(&out)
        .runtime(&format!("writing {}", out.display()))?;
    emit(&json!({"event": "saved", "out": out}));
    Ok(())
}

/// A human part to accompany, optionally with the machine seed.
#[derive(Debug, Deserialize)]
struct HumanFile {
    scheme: Scheme,
    human: Vec<usize>,
    #[serde(default)]
    machine: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Duet token file, or a corpus whose test pairs are all generated
    #[arg(long)]
    human: Option<PathBuf>,
    /// Policy checkpoint
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output duet file, or directory for a corpus
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sample instead of greedy decoding when above 0
    #[arg(long)]
    temperature: Option<f64>,
}

pub fn generate(ctx: &Context, args: GenerateArgs) -> Result<(), CliError> {
    let f = &ctx.file;
    let human_path: PathBuf = f.need(args.human, "human")?;
    let ckpt_path = f.ckpt_path(f.need(args.ckpt, "ckpt")?);
    let out: PathBuf = f.need(args.out, "out")?;
    let temperature = f.pick(args.temperature, "temperature", 0.0)?;
    let policy = rl::warm_start(&load_ckpt(&ckpt_path)?)
        .invalid(&format!("checkpoint {}", ckpt_path.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut run = |human: &TokenSeq, seed: &[usize], source: DuetSource| -> DuetTokens {
        let machine = if temperature > 0.0 {
            rl::rollout(&policy, human, seed, source, temperature, &mut rng)
                .duet
                .machine
                .ids
        } else {
            generate_accompaniment(&policy, human, seed).ids
        };
        DuetTokens {
            scheme: POLICY_SCHEME,
            human: human.ids.clone(),
            machine,
        }
    };

    let text =
        fs::read_to_string(&human_path).invalid(&format!("reading {}", human_path.display()))?;
    if let Ok(file) = serde_json::from_str::<HumanFile>(&text) {
        let human = TokenSeq::from_ids(file.scheme, file.human)
            .and_then(|s| s.convert(POLICY_SCHEME))
            .invalid("human part")?;
        if human.len() < SEED_STEPS {
            return Err(usage(format!(
                "human part needs at least {SEED_STEPS} steps"
            )));
        }
        let seed = if file.machine.len() >= SEED_STEPS {
            TokenSeq::from_ids(file.scheme, file.machine[..SEED_STEPS].to_vec())
                .and_then(|s| s.convert(POLICY_SCHEME))
                .invalid("machine seed")?
                .ids
        } else {
            TokenSeq::rests(POLICY_SCHEME, SEED_STEPS).ids
        };
        let source = DuetSource {
            chorale: human_path.display().to_string(),
            human_part: 0,
            machine_part: 1,
        };
        let duet = run(&human, &seed, source);
        write_json(&out, &duet)?;
        emit(&json!({"out": out, "steps": duet.machine.len()}));
        return Ok(());
    }
    let pairs = make_test_pairs(&read_corpus(&human_path)?);
    fs::create_dir_all(&out).runtime(&format!("creating {}", out.display()))?;
    for d in &pairs {
        let d = d.with_scheme(POLICY_SCHEME).runtime("converting duet")?;
        let s = &d.source;
        let name = format!("{}_{}-{}.json", s.chorale, s.human_part, s.machine_part);
        let duet = run(
            &d.human,
            &d.machine.ids[..d.seed_steps.min(d.len())],
            s.clone(),
        );
        let path = out.join(&name);
        write_json(&path, &duet)?;
        emit(&json!({"out": path, "steps": duet.machine.len()}));
    }
    tracing::info!(duets = pairs.len(), out = %out.display(), "generated");
    Ok(())
}

fn read_duet(path: &Path) -> Result<Duet, CliError> {
    let text = fs::read_to_string(path).invalid(&format!("reading {}", path.display()))?;
    let file: DuetTokens =
        serde_json::from_str(&text).invalid(&format!("duet file {}", path.display()))?;
    let human = TokenSeq::from_ids(file.scheme, file.human).invalid("human part")?;
    let machine = TokenSeq::from_ids(file.scheme, file.machine).invalid("machine part")?;
    human.validate().invalid("human part")?;
    machine.validate().invalid("machine part")?;
    let source = DuetSource {
        chorale: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        human_part: 0,
        machine_part: 1,
    };
    Duet::new(human, machine, source).invalid(&format!("duet file {}", path.display()))
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Duet token file
    #[arg(long)]
    duet: Option<PathBuf>,
    /// Reward ensemble directory
    #[arg(long)]
    ensemble: Option<PathBuf>,
}

pub fn score(ctx: &Context, args: ScoreArgs) -> Result<(), CliError> {
    let f = &ctx.file;
    let duet = read_duet(&f.need::<PathBuf>(args.duet, "duet")?)?;
    let ensemble = load_ensemble(&f.ckpt_path(f.need(args.ensemble, "ensemble")?))?;
    for b in score_duet(&ensemble, &duet) {
        emit(&b);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generated duet directory, optionally named: NAME=DIR (repeatable)
    #[arg(long)]
    generated: Vec<String>,
    /// Reference corpus
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Report file
    #[arg(long)]
    out: Option<PathBuf>,
}

fn system_report(dir: &Path) -> Result<MetricReport, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .invalid(&format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(usage(format!("no duet files in {}", dir.display())));
    }
    let parts = files
        .iter()
        .map(|p| {
            let d = read_duet(p)?;
            Ok((d.source.chorale.clone(), Part::machine(&d)))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(MetricReport::new(&parts))
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<(), CliError> {
    let f = &ctx.file;
    let generated: Vec<String> = if args.generated.is_empty() {
        f.need(None, "generated")?
    } else {
        args.generated
    };
    let reference = MetricReport::of_chorales(&read_corpus(
        &f.need::<PathBuf>(args.reference, "reference")?,
    )?);
    let out: PathBuf = f.need(args.out, "out")?;
    let mut systems = Vec::new();
    for g in &generated {
        let (name, dir) = match g.split_once('=') {
            Some((n, d)) => (n.to_string(), PathBuf::from(d)),
            None => {
                let dir = PathBuf::from(g);
                let name = dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| g.clone());
                (name, dir)
            }
        };
        systems.push((name, system_report(&dir)?));
    }
    let comparison = Comparison::new(reference, systems);
    write_json(&out, &comparison)?;
    eprint!("{comparison}");
    for row in &comparison.rows {
        emit(row);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Policy checkpoint
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Reward ensemble directory (checked at startup)
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Listen address
    #[arg(long)]
    addr: Option<String>,
    /// Static UI assets directory
    #[arg(long)]
    assets: Option<PathBuf>,
}

pub fn serve(ctx: &Context, args: ServeArgs) -> Result<(), CliError> {
    let f = &ctx.file;
    let ckpt_path = f.ckpt_path(f.need(args.ckpt, "ckpt")?);
    let addr = f.pick(args.addr, "addr", "127.0.0.1:8080".to_string())?;
    let assets: Option<PathBuf> = f.maybe(args.assets, "assets")?;
    if let Some(dir) = f.maybe::<PathBuf>(args.ensemble, "ensemble")? {
        let ensemble = load_ensemble(&f.ckpt_path(dir))?;
        tracing::info!(members = ensemble.len(), "ensemble loaded");
    }
    let name = ckpt_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "policy".into());
    let engine = Engine::from_checkpoint(&name, &load_ckpt(&ckpt_path)?).invalid("serve")?;
    let runtime = tokio::runtime::Runtime::new().runtime("starting runtime")?;
    runtime.block_on(async {
        let (local, server) = bind(&addr, engine, Timing::default(), assets)
            .await
            .map_err(|e| usage(format!("cannot listen on {addr}: {e}")))?;
        tracing::info!(addr = %local, "listening");
        emit(&json!({"listening": local.to_string()}));
        tokio::select! {
            r = server => r.runtime("server"),
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })
}
