//! `avrnn`: data generation, training, evaluation, sampling and gradient
//! checking for the adversarially regularized variational RNN.
//!
//! Exit codes: 0 success, 1 I/O, 2 usage or configuration, 3 numerical
//! divergence, 4 gradient check failure.

mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use avrnn::adversarial::{Critic, CriticConfig};
use avrnn::autodiff::{set_backward_fault, UnaryKind};
use avrnn::data::{
    gen_lgssm, gen_sine, load_dataset, save_dataset, write_provenance, DataError, LgssmParams,
    SequenceDataset,
};
use avrnn::nn::{Checkpoint, CheckpointError};
use avrnn::training::{
    evaluate, gradcheck_suite, init_models, run_training, CsvMetrics, GradcheckSetup,
    IterationStats, MetricsSink, TrainError, METRICS_HEADER,
};
use avrnn::vrnn::ModelBundle;

const HISTORY_HEADER: &str = "iter,l_rec,l_dis,adv_loss,em_estimate";
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{split_overrides, RunConfig, KEYS};

#[derive(Parser, Debug)]
#[command(
    name = "avrnn",
    version,
    about = "Adversarially regularized variational RNN"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Family {
    Lgssm,
    Sine,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its provenance sidecar.
    Gendata {
        #[arg(long, value_enum)]
        family: Family,
        /// Number of sequences.
        #[arg(long)]
        n: usize,
        /// Sequence length.
        #[arg(long)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Observation width (lgssm only; sine is always 1).
        #[arg(long)]
        x_dim: Option<usize>,
        /// lgssm state decay.
        #[arg(long)]
        a: Option<f64>,
        /// lgssm state noise std.
        #[arg(long)]
        q: Option<f64>,
        /// lgssm emission scale.
        #[arg(long)]
        cobs: Option<f64>,
        /// lgssm observation noise std.
        #[arg(long)]
        r: Option<f64>,
        /// lgssm initial state std.
        #[arg(long)]
        s0: Option<f64>,
        /// sine observation noise std.
        #[arg(long)]
        noise_std: Option<f64>,
    },
    /// Train a model. Any config key may be overridden with `--key value`.
    #[command(after_help = config_help())]
    Train {
        /// Config file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset path; same as `--data.path`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Print each metrics row to stderr as it is written.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate checkpoints on a dataset and print one metrics row.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Critic checkpoint; without it the critic is all zeros and the
        /// discrimination terms are 0.
        #[arg(long)]
        critic: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        batches: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample sequences from a trained model.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// Sequence length (0 allowed).
        #[arg(long)]
        t: usize,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every gradient on a tiny model.
    Gradcheck {
        /// Use the tiny configuration (x_dim = z_dim = 2, h_dim = 4, T = 3, m = 2).
        #[arg(long)]
        tiny: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the backward rule of one unary op (testing aid).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn config_help() -> String {
    let mut s = String::from("Config keys:\n");
    for (k, doc) in KEYS {
        s.push_str(&format!("  {k:<20} {doc}\n"));
    }
    s
}

#[derive(Debug)]
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn io(err: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 1,
            err: err.into(),
        }
    }

    fn usage(err: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: 2,
            err: err.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(args: &[String]) -> CmdResult {
    let (rest, overrides) = split_overrides(args).map_err(Failure::usage)?;
    let cli = Cli::try_parse_from(&rest).unwrap_or_else(|e| e.exit());
    if !overrides.is_empty() && !matches!(cli.command, Command::Train { .. }) {
        let key = overrides.keys().next().cloned().unwrap_or_default();
        return Err(Failure::usage(anyhow!(
            "config override `--{key}` is only accepted by `train`"
        )));
    }
    match cli.command {
        Command::Gendata {
            family,
            n,
            t,
            seed,
            out,
            x_dim,
            a,
            q,
            cobs,
            r,
            s0,
            noise_std,
        } => {
            let gen = GenSpec {
                family,
                n,
                t,
                seed,
                x_dim,
                a,
                q,
                cobs,
                r,
                s0,
                noise_std,
            };
            cmd_gendata(&gen, &out)
        }
        Command::Train {
            config,
            data,
            verbose,
        } => {
            let mut overrides = overrides;
            if let Some(d) = data {
                overrides.insert("data.path".into(), d.display().to_string());
            }
            let cfg = RunConfig::load(config.as_deref(), &overrides).map_err(Failure::usage)?;
            cmd_train(&cfg, verbose)
        }
        Command::Eval {
            model,
            critic,
            data,
            batches,
            batch_size,
            seed,
        } => cmd_eval(&model, critic.as_deref(), &data, batches, batch_size, seed),
        Command::Generate {
            model,
            t,
            n,
            seed,
            out,
        } => cmd_generate(&model, t, n, seed, &out),
        Command::Gradcheck {
            tiny,
            seed,
            inject_fault,
        } => cmd_gradcheck(tiny, seed, inject_fault.as_deref()),
    }
}

fn data_failure(path: &Path, e: DataError) -> Failure {
    let code = match &e {
        DataError::Io(io) if io.kind() != io::ErrorKind::NotFound => 1,
        _ => 2,
    };
    Failure {
        code,
        err: anyhow::Error::new(e).context(format!("dataset {}", path.display())),
    }
}

fn checkpoint_failure(path: &Path, e: CheckpointError) -> Failure {
    let code = match &e {
        CheckpointError::Io(io) if io.kind() != io::ErrorKind::NotFound => 1,
        _ => 2,
    };
    Failure {
        code,
        err: anyhow::Error::new(e).context(format!("checkpoint {}", path.display())),
    }
}

fn write_failure(path: &Path, e: impl Into<anyhow::Error>) -> Failure {
    Failure::io(e.into().context(format!("writing {}", path.display())))
}

struct GenSpec {
    family: Family,
    n: usize,
    t: usize,
    seed: u64,
    x_dim: Option<usize>,
    a: Option<f64>,
    q: Option<f64>,
    cobs: Option<f64>,
    r: Option<f64>,
    s0: Option<f64>,
    noise_std: Option<f64>,
}

fn cmd_gendata(g: &GenSpec, out: &Path) -> CmdResult {
    let mut prov: Vec<(&str, String)> = vec![
        ("n", g.n.to_string()),
        ("t", g.t.to_string()),
        ("seed", g.seed.to_string()),
    ];
    let data = match g.family {
        Family::Lgssm => {
            if g.noise_std.is_some() {
                return Err(Failure::usage(anyhow!(
                    "--noise-std applies to the sine family only"
                )));
            }
            let d = LgssmParams::default();
            let p = LgssmParams {
                a: g.a.unwrap_or(d.a),
                q: g.q.unwrap_or(d.q),
                cobs: g.cobs.unwrap_or(d.cobs),
                r: g.r.unwrap_or(d.r),
                s0: g.s0.unwrap_or(d.s0),
                loading: Vec::new(),
            };
            let x_dim = g.x_dim.unwrap_or(4);
            prov.splice(
                0..0,
                [
                    ("family", "lgssm".to_string()),
                    ("x_dim", x_dim.to_string()),
                    ("a", p.a.to_string()),
                    ("q", p.q.to_string()),
                    ("cobs", p.cobs.to_string()),
                    ("r", p.r.to_string()),
                    ("s0", p.s0.to_string()),
                ],
            );
            gen_lgssm(&p, g.n, g.t, x_dim, g.seed).map_err(Failure::usage)?
        }
        Family::Sine => {
            if [g.a, g.q, g.cobs, g.r, g.s0].iter().any(Option::is_some) {
                return Err(Failure::usage(anyhow!(
                    "--a/--q/--cobs/--r/--s0 apply to the lgssm family only"
                )));
            }
            if g.x_dim.is_some_and(|d| d != 1) {
                return Err(Failure::usage(anyhow!("the sine family has x_dim = 1")));
            }
            let noise_std = g.noise_std.unwrap_or(0.1);
            prov.splice(
                0..0,
                [
                    ("family", "sine".to_string()),
                    ("x_dim", "1".to_string()),
                    ("noise_std", noise_std.to_string()),
                ],
            );
            gen_sine(g.n, g.t, g.seed, noise_std).map_err(Failure::usage)?
        }
    };
    if let Some(ll) = &data.loglik {
        prov.push((
            "kalman_loglik_mean",
            (ll.iter().sum::<f64>() / ll.len() as f64).to_string(),
        ));
    }
    save_dataset(&data, out).map_err(|e| write_failure(out, e))?;
    write_provenance(out, &prov).map_err(|e| write_failure(out, e))?;
    Ok(())
}

fn load_data(path: &Path) -> Result<SequenceDataset, Failure> {
    load_dataset(path).map_err(|e| data_failure(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| checkpoint_failure(path, e))
}

fn save_pair(cfg: &RunConfig, model: &ModelBundle, critic: &Critic) -> CmdResult {
    let (mp, cp) = (cfg.model_path(), cfg.critic_path());
    model
        .to_checkpoint()
        .save(&mp)
        .map_err(|e| write_failure(&mp, e))?;
    critic
        .to_checkpoint()
        .save(&cp)
        .map_err(|e| write_failure(&cp, e))?;
    Ok(())
}

/// Writes each row to the CSV and optionally echoes it to stderr.
struct Echo<W: Write> {
    csv: CsvMetrics<W>,
    verbose: bool,
}

impl<W: Write> MetricsSink for Echo<W> {
    fn record(&mut self, r: &avrnn::training::MetricsRecord) -> io::Result<()> {
        if self.verbose {
            eprintln!("{}", r.csv_row());
        }
        self.csv.record(r)
    }
}

fn cmd_train(cfg: &RunConfig, verbose: bool) -> CmdResult {
    let data = load_data(&cfg.data_path)?;
    let model_cfg = cfg.model_config(data.x_dim());
    let (model, critic) =
        init_models(&cfg.train, model_cfg, cfg.critic_config()).map_err(train_failure)?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| write_failure(&cfg.out_dir, e))?;
    let mp = cfg.metrics_path();
    let file = File::create(&mp).map_err(|e| write_failure(&mp, e))?;
    let csv = CsvMetrics::new(BufWriter::new(file)).map_err(|e| write_failure(&mp, e))?;
    let mut sink = Echo { csv, verbose };

    let result = run_training(&cfg.train, model, critic, &data, &mut sink);
    sink.csv
        .into_inner()
        .flush()
        .map_err(|e| write_failure(&mp, e))?;
    match result {
        Ok(outcome) => {
            if let Some(hp) = cfg.history_path() {
                write_history(&hp, &outcome.history).map_err(|e| write_failure(&hp, e))?;
            }
            save_pair(cfg, &outcome.model, &outcome.critic)
        }
        Err(TrainError::Diverged {
            iter,
            what,
            last_good,
        }) => {
            let (model, critic) = *last_good;
            save_pair(cfg, &model, &critic)?;
            Err(Failure {
                code: 3,
                err: anyhow!(
                    "numerical divergence at iteration {iter}: {what}; last good parameters written to {} and {}",
                    cfg.model_path().display(),
                    cfg.critic_path().display()
                ),
            })
        }
        Err(e) => Err(train_failure(e)),
    }
}

fn write_history(path: &Path, history: &[IterationStats]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{HISTORY_HEADER}")?;
    for s in history {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.iter, s.l_rec, s.l_dis, s.adv_loss, s.em_estimate
        )?;
    }
    w.flush()
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Io(io) => Failure::io(io),
        TrainError::Data(d) => Failure::usage(d),
        TrainError::Isolation { .. } => {
            Failure::io(anyhow::Error::new(e).context("internal error"))
        }
        TrainError::Diverged { .. } => Failure {
            code: 3,
            err: e.into(),
        },
        other => Failure::usage(other),
    }
}

fn cmd_eval(
    model_path: &Path,
    critic_path: Option<&Path>,
    data_path: &Path,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> CmdResult {
    let ck = load_checkpoint(model_path)?;
    let model = ModelBundle::from_checkpoint(&ck).map_err(|e| checkpoint_failure(model_path, e))?;
    let critic = match critic_path {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            Critic::from_checkpoint(&ck).map_err(|e| checkpoint_failure(p, e))?
        }
        None => Critic::new(CriticConfig::new(model.config.z_dim)).map_err(Failure::usage)?,
    };
    if critic.config.z_dim != model.config.z_dim {
        return Err(Failure::usage(anyhow!(
            "critic expects z_dim {}, model has {}",
            critic.config.z_dim,
            model.config.z_dim
        )));
    }
    let data = load_data(data_path)?;
    if data.x_dim() != model.config.x_dim {
        return Err(Failure::usage(anyhow!(
            "model expects x_dim {}, dataset {} has {}",
            model.config.x_dim,
            data_path.display(),
            data.x_dim()
        )));
    }
    let rec = evaluate(&model, &critic, &data, batches, batch_size, seed).map_err(train_failure)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{METRICS_HEADER}\n{}", rec.csv_row()).map_err(Failure::io)?;
    if !rec.is_finite() {
        return Err(Failure {
            code: 3,
            err: anyhow!("evaluation produced non-finite metrics"),
        });
    }
    Ok(())
}

fn cmd_generate(model_path: &Path, t: usize, n: usize, seed: u64, out: &Path) -> CmdResult {
    let ck = load_checkpoint(model_path)?;
    let model = ModelBundle::from_checkpoint(&ck).map_err(|e| checkpoint_failure(model_path, e))?;
    if n == 0 {
        return Err(Failure::usage(anyhow!("--n must be at least 1")));
    }
    let steps = model
        .generate(n, t, seed)
        .map_err(|e| Failure::usage(anyhow::Error::new(e)))?;
    let data =
        SequenceDataset::from_time_major(&steps, n, model.config.x_dim).map_err(Failure::usage)?;
    save_dataset(&data, out).map_err(|e| write_failure(out, e))?;
    let prov = [
        ("source", "generate".to_string()),
        ("model", model_path.display().to_string()),
        ("n", n.to_string()),
        ("t", t.to_string()),
        ("seed", seed.to_string()),
    ];
    write_provenance(out, &prov).map_err(|e| write_failure(out, e))?;
    Ok(())
}

fn cmd_gradcheck(tiny: bool, seed: u64, inject_fault: Option<&str>) -> CmdResult {
    if !tiny {
        return Err(Failure::usage(anyhow!(
            "only the tiny configuration is supported; pass --tiny"
        )));
    }
    if let Some(name) = inject_fault {
        let kind = UnaryKind::from_name(name)
            .ok_or_else(|| Failure::usage(anyhow!("unknown op {name:?}")))?;
        set_backward_fault(Some(kind));
    }
    let setup = GradcheckSetup {
        seed,
        ..GradcheckSetup::default()
    };
    let report = gradcheck_suite(&setup).map_err(train_failure);
    set_backward_fault(None);
    let report = report?;

    let mut out = io::stdout().lock();
    let mut print = || -> io::Result<()> {
        writeln!(out, "tag,max_rel_err")?;
        for (tag, worst) in report.per_tag() {
            writeln!(out, "{}({}),{worst:e}", tag.symbol(), tag.name())?;
        }
        Ok(())
    };
    print().context("writing report").map_err(Failure::io)?;
    if report.passed() {
        return Ok(());
    }
    let failures = report.failures();
    let mut msg = format!(
        "{} tensor(s) exceed tolerance {:e}:",
        failures.len(),
        report.tolerance
    );
    for f in &failures {
        msg.push_str(&format!(
            "\n  {} {} [{}] {:e}",
            f.objective,
            f.name,
            f.tag.symbol(),
            f.max_rel_err
        ));
    }
    Err(Failure {
        code: 4,
        err: anyhow!(msg),
    })
}
