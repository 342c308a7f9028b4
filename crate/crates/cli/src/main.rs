use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use natmotion::data::{
    generate_synthetic, load_dataset, load_sequence, save_sequence, windows_of, Dataset, LoadOptions, Repr,
    SyntheticSpec, WindowSpec,
};
use natmotion::eval::{argmax, dataset_fps, error_accumulation_experiment, evaluate, EvalOptions};
use natmotion::model::checkpoint::{file_sha256, Checkpoint};
use natmotion::model::{DecoderInput, Model, ModelConfig, ModelKind};
use natmotion::numerics::{AdamConfig, Tensor};
use natmotion::posenc::{write_table_csv, PosEncConfig};
use natmotion::skeleton::{EulerOrder, GraphType, MotionSequence};
use natmotion::training::{ar_from_nat, train, train_ar, TrainConfig, TrainLog};
use natmotion::{Error, Result};

#[derive(Parser)]
#[command(name = "natmotion", version, about = "Non-autoregressive human motion prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a labeled synthetic dataset as sequence files.
    GenSynthetic(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Predict future frames for one sequence file.
    Predict(PredictArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Dump the positional-encoding table as CSV.
    Posenc(PosencArgs),
    /// Experiments.
    #[command(subcommand)]
    Lab(LabCommand),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    joints: usize,
    #[arg(long, default_value_t = 60)]
    seqs_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the class definitions; datasets sharing it share classes.
    #[arg(long, default_value_t = 0)]
    prototype_seed: u64,
    #[arg(long, default_value_t = 120)]
    frames: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Nat,
    Ar,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderInputArg {
    Seed,
    Tiled,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 60)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.9995)]
    decay: f64,
    #[arg(long, default_value_t = 0.1)]
    clip: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda_pnlty: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda_cls: f64,
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    #[arg(long, default_value_t = 500.0)]
    beta: f64,
    #[arg(long, default_value_t = 9)]
    ks: usize,
    /// bidirectional, forward, backward, none, random or random:SEED.
    #[arg(long, default_value = "bidirectional")]
    graph: GraphType,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "nat")]
    kind: KindArg,
    /// Trained non-autoregressive checkpoint whose encoder an autoregressive model reuses.
    #[arg(long, required_if_eq("kind", "ar"))]
    encoder_from: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "seed")]
    decoder_input: DecoderInputArg,
    /// Comma-separated encoder channel schedule.
    #[arg(long, value_delimiter = ',')]
    encoder_channels: Option<Vec<usize>>,
    /// Comma-separated decoder channel schedule (must end in 4).
    #[arg(long, value_delimiter = ',')]
    decoder_channels: Option<Vec<usize>>,
    #[arg(long, default_value_t = 128)]
    ar_hidden: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "80,160,320,400,560,1000")]
    horizons: Vec<u32>,
    #[arg(long, default_value = "zyx")]
    euler: EulerOrder,
    /// Observed frames per window; defaults to the training value.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PosencArgs {
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    #[arg(long, default_value_t = 500.0)]
    beta: f64,
    #[arg(long, default_value_t = 256)]
    dmodel: usize,
    #[arg(long, default_value_t = 25)]
    len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum LabCommand {
    /// Perturb the first generated frame and track how far later frames move.
    ErrorAccum(AccumArgs),
}

#[derive(Args)]
struct AccumArgs {
    #[arg(long)]
    nat: PathBuf,
    #[arg(long)]
    ar: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 25)]
    m: usize,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Training metadata stored in the checkpoint manifest.
#[derive(Serialize, Deserialize)]
struct Meta {
    train: TrainConfig,
    actions: Vec<String>,
    fps: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))
}

fn meta_of(ck: &Checkpoint) -> Result<Meta> {
    serde_json::from_value(ck.hyperparameters.clone())
        .map_err(|e| Error::Data(format!("checkpoint lacks training metadata: {e}")))
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        classes: a.classes,
        joints: a.joints,
        seqs_per_class: a.seqs_per_class,
        frames: a.frames,
        fps: a.fps,
        noise: a.noise,
        seed: a.seed,
        prototype_seed: a.prototype_seed,
        ..Default::default()
    };
    let seqs = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Data(format!("{}: {e}", a.out.display())))?;
    for (i, s) in seqs.iter().enumerate() {
        save_sequence(s, a.out.join(format!("seq{i:04}.json")), Repr::Quat)?;
    }
    eprintln!("wrote {} sequences to {}", seqs.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data, &LoadOptions::default())?;
    let fps = dataset_fps(&dataset)?;
    let window = WindowSpec {
        n: a.n,
        m: a.m,
        stride: a.stride,
    };
    let cfg = TrainConfig {
        iterations: a.iters,
        batch: a.batch,
        adam: AdamConfig {
            base_lr: a.lr,
            decay_per_epoch: a.decay,
            ..Default::default()
        },
        clip: a.clip,
        lambda_pnlty: a.lambda_pnlty,
        lambda_cls: a.lambda_cls,
        seed: a.seed,
        window,
    };
    cfg.validate()?;
    let (mut model, actions) = match a.kind {
        KindArg::Nat => {
            let tree = dataset.sequences[0].tree.clone();
            let mut mc = ModelConfig::new(&tree, dataset.actions.len().max(1));
            mc.alpha = a.alpha;
            mc.beta = a.beta;
            mc.kernel = a.ks;
            mc.graph = a.graph;
            mc.init_seed = a.seed;
            mc.decoder_input = match a.decoder_input {
                DecoderInputArg::Seed => DecoderInput::SeedConcat,
                DecoderInputArg::Tiled => DecoderInput::Tiled,
            };
            if let Some(c) = a.encoder_channels {
                mc.encoder_channels = c;
            }
            if let Some(c) = a.decoder_channels {
                mc.decoder_channels = c;
            }
            (Model::new(mc)?, dataset.actions.clone())
        }
        KindArg::Ar => {
            let path = a.encoder_from.as_ref().expect("clap enforces --encoder-from");
            let nat = Checkpoint::load(path)?;
            let actions = meta_of(&nat).map(|m| m.actions).unwrap_or_default();
            (ar_from_nat(&nat.model, a.ar_hidden, a.seed)?, actions)
        }
    };
    let dataset = Dataset::with_actions(dataset.sequences, actions.clone())?;
    let windows = windows_of(&dataset.sequences, &window)?;
    if windows.is_empty() {
        return Err(Error::Data(format!("no sequence holds {} + {} frames", a.n, a.m)));
    }
    let every = (a.iters / 20).max(1);
    let progress = |r: &natmotion::training::LogRow| {
        if r.iteration.is_multiple_of(every) || r.iteration + 1 == a.iters {
            eprintln!(
                "iter {:>6}  recst {:.5}  pnlty {:.5}  cls1 {:.4}  cls2 {:.4}  lr {:.3e}",
                r.iteration, r.recst, r.pnlty, r.cls1, r.cls2, r.lr
            );
        }
    };
    let log: TrainLog = match a.kind {
        KindArg::Nat => train(&mut model, &windows, &cfg, progress)?,
        KindArg::Ar => train_ar(&mut model, &windows, &cfg, progress)?,
    };
    if let Some(path) = &a.log {
        log.write_csv(create(path)?)?;
    }
    let meta = Meta {
        train: cfg,
        actions,
        fps,
    };
    let mut ck = Checkpoint::new(model);
    ck.hyperparameters = serde_json::to_value(&meta)?;
    ck.save(&a.out)
}

fn stack_observed(seq: &MotionSequence, n: usize) -> Result<Tensor> {
    let start = seq.len().saturating_sub(n);
    let x = seq.frame_range(start, seq.len());
    let s = x.shape().to_vec();
    x.reshape([1, s[0], s[1], s[2]])
}

fn predict(a: PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let meta = meta_of(&ck).ok();
    let n = meta.as_ref().map_or(50, |m| m.train.window.n);
    let seq = load_sequence(&a.input, &LoadOptions::default())?;
    let x = stack_observed(&seq, n)?;
    let pred = ck.model.predict(&x, a.m)?;
    let frames = pred.frames.select_first(0);
    let action = match (&pred.probs, &meta) {
        (Some(p), Some(m)) => m.actions.get(argmax(p.select_first(0).data())).cloned(),
        _ => None,
    };
    let out = MotionSequence::new(frames, seq.fps, seq.tree.clone())?.with_action(None, action);
    save_sequence(&out, &a.out, Repr::Quat)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let meta = meta_of(&ck).ok();
    let sequences = natmotion::data::load_dir(&a.data, &LoadOptions::default())?;
    let dataset = match &meta {
        Some(m) => Dataset::with_actions(sequences, m.actions.clone())?,
        None => Dataset::from_sequences(sequences),
    };
    let opts = EvalOptions {
        horizons_ms: a.horizons,
        euler: a.euler,
        n: a.n.or(meta.as_ref().map(|m| m.train.window.n)).unwrap_or(50),
        stride: a.stride.or(meta.as_ref().map(|m| m.train.window.stride)).unwrap_or(5),
        checkpoint_sha256: Some(file_sha256(&a.ckpt)?),
    };
    let report = evaluate(&ck.model, &dataset, &opts)?;
    let json = report.to_json()?;
    std::fs::write(&a.out, json).map_err(|e| Error::Data(format!("cannot write {}: {e}", a.out.display())))?;
    for (h, e) in &report.mean_joint_error {
        eprintln!("{h:>5} ms  model {e:.4}  zero-velocity {:.4}", report.zero_velocity[h]);
    }
    Ok(())
}

fn posenc(a: PosencArgs) -> Result<()> {
    let cfg = PosEncConfig {
        d_model: a.dmodel,
        alpha: a.alpha,
        beta: a.beta,
        horizon: a.len,
    };
    write_table_csv(&cfg, create(&a.out)?)
}

fn error_accum(a: AccumArgs) -> Result<()> {
    let nat = Checkpoint::load(&a.nat)?;
    let ar = Checkpoint::load(&a.ar)?;
    if nat.model.config.kind != ModelKind::Nat || ar.model.config.kind != ModelKind::Ar {
        return Err(Error::InvalidArgument(
            "--nat and --ar must name checkpoints of those kinds".into(),
        ));
    }
    let meta = meta_of(&nat).ok();
    let n = a.n.or(meta.as_ref().map(|m| m.train.window.n)).unwrap_or(50);
    let stride = a.stride.or(meta.as_ref().map(|m| m.train.window.stride)).unwrap_or(5);
    let sequences = natmotion::data::load_dir(&a.data, &LoadOptions::default())?;
    let windows = windows_of(&sequences, &WindowSpec { n, m: a.m, stride })?;
    let curves = error_accumulation_experiment(&nat.model, &ar.model, &windows, a.m, a.delta)?;
    curves.write_csv(create(&a.out)?)?;
    let last = a.m - 1;
    eprintln!(
        "frame {}: nat {:.3e} ar {:.3e}; frame 2: nat {:.3e} ar {:.3e}",
        a.m,
        curves.nat[last],
        curves.ar[last],
        curves.nat.get(1).copied().unwrap_or(0.0),
        curves.ar.get(1).copied().unwrap_or(0.0)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Posenc(a) => posenc(a),
        Command::Lab(LabCommand::ErrorAccum(a)) => error_accum(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
