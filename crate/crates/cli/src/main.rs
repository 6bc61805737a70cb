use std::io::IsTerminal;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use trajirl_client::{Client, ClientError};
use trajirl_core::api::{PredictPayload, PredictRequest};
use trajirl_core::bench::{self, BENCH_HEADER};
use trajirl_core::config::{parse_override, RunConfig};
use trajirl_core::model::{
    evaluate, predict, prepare, prepare_all, refiner_samples, train_irl, uniform_reward_ablation, Prepared,
    IRL_LOG_HEADER,
};
use trajirl_core::nn::ParamStore;
use trajirl_core::refiner::{train_refiner, REFINE_LOG_HEADER};
use trajirl_core::render::render_svg;
use trajirl_core::scene::{
    generate_scenario, load_corpus, load_scenario, save_scenario, to_target_frame, Scenario, ScenarioKind,
};

#[derive(Parser)]
#[command(name = "trajirl", version, about = "Grid MaxEnt IRL trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.horizon=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scenario corpus into `paths.corpus`.
    Gen {
        #[command(flatten)]
        common: Common,
        /// t_junction, crossing, straight, curve, or `mixed` (t_junction and crossing alternating).
        #[arg(long, default_value = "mixed")]
        kind: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Scenario `i` uses seed `seed + i`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        block_prob: Option<f64>,
        /// Corpus directory (`paths.corpus`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1: fit the reward network by MaxEnt IRL.
    TrainIrl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: TrainIo,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Stage 2: fit the trajectory refiner on frozen stage-1 proposals.
    TrainRefine {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: TrainIo,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train on proposals of the uniform-reward ablation instead.
        #[arg(long)]
        uniform_reward: bool,
    },
    /// Predict K trajectories per scenario and write `predictions.json`.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: Selection,
        #[command(flatten)]
        models: Models,
        #[command(flatten)]
        sample: SampleFlags,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Return every sampled plan rather than a decimated subset.
        #[arg(long)]
        full_plans: bool,
        /// Run through a what-if service instead of in-process.
        #[arg(long, value_name = "URL")]
        server: Option<String>,
        /// Session blocks applied before predicting (`r,c;r,c`), scenario grid.
        #[arg(long)]
        cells: Option<String>,
    },
    /// Metrics CSV over a corpus with ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        models: Models,
        #[command(flatten)]
        sample: SampleFlags,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Zero the reward head (ablation baseline).
        #[arg(long)]
        uniform_reward: bool,
    },
    /// Layered SVG of a scenario and, optionally, its prediction.
    Render {
        #[arg(long)]
        scenario: PathBuf,
        /// `predictions.json` written by `predict`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Copy a scenario with cells (`r,c;r,c`) made undrivable.
    Mask {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        cells: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the what-if HTTP service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        models: Models,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Allowed browser origin; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
    },
    /// Timing table for soft value iteration, visitation and sampling.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 25)]
        side: usize,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainIo {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Selection {
    #[arg(long, conflicts_with = "scenario")]
    corpus: Option<PathBuf>,
    /// A single scenario file.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

#[derive(Args)]
struct Models {
    #[arg(long)]
    stage1: Option<PathBuf>,
    #[arg(long)]
    stage2: Option<PathBuf>,
}

#[derive(Args)]
struct SampleFlags {
    #[arg(short = 'K', long = "modes")]
    k: Option<usize>,
    #[arg(short = 'L', long = "plans")]
    l: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] trajirl_core::Error),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{0}")]
    Usage(String),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        use trajirl_core::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::Config(_) => "config",
                E::Contract(_) => "contract",
                E::Parse { .. } => "parse",
                E::Refused(_) => "refused",
                E::Checkpoint(_) => "checkpoint",
                E::Divergence(_) => "divergence",
                E::Io { .. } => "io",
                E::Json(_) => "json",
            },
            CliError::Client(ClientError::Api { .. }) => "server",
            CliError::Client(_) => "http",
            CliError::Usage(_) => "usage",
            CliError::Io(..) => "io",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn fail(kind: &str, message: &str) -> ExitCode {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            return fail(
                "usage",
                text.lines()
                    .next()
                    .unwrap_or("invalid arguments")
                    .trim_start_matches("error: "),
            );
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}

/// File config, then `--set` overrides, then dedicated flags.
fn resolve(common: &Common, flags: Vec<(&str, Option<toml::Value>)>) -> Result<RunConfig> {
    let mut ov = Vec::new();
    for s in &common.sets {
        ov.push(parse_override(s)?);
    }
    for (k, v) in flags {
        if let Some(v) = v {
            ov.push((k.to_string(), v));
        }
    }
    Ok(RunConfig::load(common.config.as_deref(), &ov)?)
}

fn path_val(p: &Option<PathBuf>) -> Option<toml::Value> {
    p.as_ref().map(|p| toml::Value::String(p.display().to_string()))
}

fn int_val<T: TryInto<i64>>(v: Option<T>) -> Option<toml::Value> {
    v.and_then(|v| v.try_into().ok()).map(toml::Value::Integer)
}

fn float_val(v: Option<f64>) -> Option<toml::Value> {
    v.map(toml::Value::Float)
}

fn sample_flags(s: &SampleFlags) -> Vec<(&'static str, Option<toml::Value>)> {
    vec![
        ("sample.num_modes", int_val(s.k)),
        ("sample.num_plans", int_val(s.l)),
        ("sample.seed", int_val(s.seed)),
    ]
}

fn model_flags(m: &Models) -> Vec<(&'static str, Option<toml::Value>)> {
    vec![
        ("paths.stage1", path_val(&m.stage1)),
        ("paths.stage2", path_val(&m.stage2)),
    ]
}

/// Write, creating parent directories, and flush to disk before returning.
fn write_file(path: &Path, contents: &str) -> Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    f.write_all(contents.as_bytes())
        .and_then(|_| f.sync_all())
        .map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn save_config(cfg: &RunConfig, dir: &Path, name: &str) -> Result<()> {
    write_file(&dir.join(format!("{name}.config.toml")), &cfg.to_toml())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    Ok(RunConfig::require(&cfg.paths.out, "paths.out")?)
}

fn corpus(cfg: &RunConfig) -> Result<Vec<Scenario>> {
    let dir = RunConfig::require(&cfg.paths.corpus, "paths.corpus")?;
    let entries = load_corpus(&dir)?;
    if entries.is_empty() {
        return Err(CliError::Usage(format!(
            "corpus {} has no scenario files",
            dir.display()
        )));
    }
    Ok(entries.into_iter().map(|e| e.scenario).collect())
}

fn stage1_path(cfg: &RunConfig) -> Result<PathBuf> {
    match &cfg.paths.stage1 {
        Some(p) => Ok(p.clone()),
        None => Ok(out_dir(cfg)?.join("stage1.json")),
    }
}

fn load_stage1(cfg: &RunConfig) -> Result<ParamStore> {
    let p = RunConfig::require(&cfg.paths.stage1, "paths.stage1")?;
    Ok(cfg.model.load_checkpoint(&p, false)?)
}

fn load_stage2(cfg: &RunConfig) -> Result<Option<ParamStore>> {
    Ok(cfg
        .paths
        .stage2
        .as_deref()
        .map(|p| cfg.model.load_checkpoint(p, true))
        .transpose()?)
}

/// `r,c;r,c` into cells.
fn parse_cells(s: &str) -> Result<Vec<[usize; 2]>> {
    s.split(';')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let bad = || CliError::Usage(format!("cell `{t}` is not `row,col`"));
            let (r, c) = t.split_once(',').ok_or_else(bad)?;
            Ok([
                r.trim().parse().map_err(|_| bad())?,
                c.trim().parse().map_err(|_| bad())?,
            ])
        })
        .collect()
}

fn check_cells(cells: &[[usize; 2]], side: usize) -> Result<()> {
    match cells.iter().find(|c| c[0] >= side || c[1] >= side) {
        Some(c) => Err(CliError::Usage(format!(
            "cell [{}, {}] is outside the {side}x{side} grid",
            c[0], c[1]
        ))),
        None => Ok(()),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen {
            common,
            kind,
            count,
            seed,
            block_prob,
            out,
        } => {
            let cfg = resolve(
                &common,
                vec![
                    ("paths.corpus", path_val(&out)),
                    ("generator.block_prob", float_val(block_prob)),
                ],
            )?;
            let dir = RunConfig::require(&cfg.paths.corpus, "paths.corpus")?;
            let kinds: Vec<ScenarioKind> = if kind == "mixed" {
                vec![ScenarioKind::TJunction, ScenarioKind::Crossing]
            } else {
                vec![kind.parse()?]
            };
            for i in 0..count {
                let s = generate_scenario(kinds[i % kinds.len()], &cfg.generator, seed + i as u64)?;
                let path = dir.join(format!("{}.json", s.id));
                std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(dir.clone(), e))?;
                save_scenario(&s, &path)?;
            }
            save_config(&cfg, &dir, "gen")?;
            tracing::info!(count, dir = %dir.display(), "corpus written");
            Ok(())
        }
        Cmd::TrainIrl { common, io, epochs, lr } => {
            let cfg = resolve(
                &common,
                vec![
                    ("paths.corpus", path_val(&io.corpus)),
                    ("paths.out", path_val(&io.out)),
                    ("irl.seed", int_val(io.seed)),
                    ("irl.epochs", int_val(epochs)),
                    ("irl.lr", float_val(lr)),
                ],
            )?;
            let out = out_dir(&cfg)?;
            let preps = prepare_all(&corpus(&cfg)?, &cfg.model)?;
            let mut store = cfg.model.init_stage1(cfg.init_seed);
            let log = train_irl(&mut store, &preps, &cfg.model, &cfg.irl, cfg.timing, |r| {
                tracing::info!(epoch = r.epoch, nll = r.mean_nll, "irl epoch");
            })?;
            let mut csv = format!("{IRL_LOG_HEADER}\n");
            log.iter().for_each(|r| {
                csv.push_str(&r.csv());
                csv.push('\n');
            });
            save_config(&cfg, &out, "train-irl")?;
            write_file(&out.join("irl_log.csv"), &csv)?;
            cfg.model.save_checkpoint(&store, &out.join("stage1.json"))?;
            Ok(())
        }
        Cmd::TrainRefine {
            common,
            io,
            stage1,
            epochs,
            uniform_reward,
        } => {
            let cfg = resolve(
                &common,
                vec![
                    ("paths.corpus", path_val(&io.corpus)),
                    ("paths.out", path_val(&io.out)),
                    ("paths.stage1", path_val(&stage1)),
                    ("refine.seed", int_val(io.seed)),
                    ("refine.epochs", int_val(epochs)),
                ],
            )?;
            let out = out_dir(&cfg)?;
            let mut s1 = cfg.model.load_checkpoint(&stage1_path(&cfg)?, false)?;
            if uniform_reward {
                s1 = uniform_reward_ablation(&s1);
            }
            let preps = prepare_all(&corpus(&cfg)?, &cfg.model)?;
            let samples = refiner_samples(&s1, &preps, &cfg.model, &cfg.sample)?;
            let mut store = cfg.model.init_stage2(cfg.init_seed);
            let log = train_refiner(&mut store, &samples, &cfg.refine, |r| {
                tracing::info!(step = r.step, loss = r.total, "refine step");
            })?;
            let mut csv = format!("{REFINE_LOG_HEADER}\n");
            log.iter().for_each(|r| {
                csv.push_str(&r.csv());
                csv.push('\n');
            });
            save_config(&cfg, &out, "train-refine")?;
            write_file(&out.join("refine_log.csv"), &csv)?;
            cfg.model.save_checkpoint(&store, &out.join("stage2.json"))?;
            Ok(())
        }
        Cmd::Predict {
            common,
            sel,
            models,
            sample,
            out,
            full_plans,
            server,
            cells,
        } => {
            let mut flags = vec![("paths.corpus", path_val(&sel.corpus)), ("paths.out", path_val(&out))];
            flags.extend(model_flags(&models));
            flags.extend(sample_flags(&sample));
            let cfg = resolve(&common, flags)?;
            let out = out_dir(&cfg)?;
            let scenarios = match &sel.scenario {
                Some(p) => vec![load_scenario(p)?],
                None => corpus(&cfg)?,
            };
            let blocked = cells.as_deref().map(parse_cells).transpose()?.unwrap_or_default();
            for s in &scenarios {
                check_cells(&blocked, s.grid_side)?;
            }
            let req = PredictRequest {
                k: cfg.sample.num_modes,
                l: cfg.sample.num_plans,
                seed: cfg.sample.seed,
                full_plans,
            };
            let payloads = match server {
                Some(url) => predict_remote(&url, &scenarios, &blocked, &req, cfg.timing)?,
                None => predict_local(&cfg, &scenarios, &blocked, &req)?,
            };
            save_config(&cfg, &out, "predict")?;
            let text = serde_json::to_string_pretty(&payloads).map_err(trajirl_core::Error::from)?;
            write_file(&out.join("predictions.json"), &text)
        }
        Cmd::Eval {
            common,
            corpus: dir,
            models,
            sample,
            out,
            uniform_reward,
        } => {
            let mut flags = vec![("paths.corpus", path_val(&dir)), ("paths.out", path_val(&out))];
            flags.extend(model_flags(&models));
            flags.extend(sample_flags(&sample));
            let cfg = resolve(&common, flags)?;
            let out = out_dir(&cfg)?;
            let mut s1 = load_stage1(&cfg)?;
            if uniform_reward {
                s1 = uniform_reward_ablation(&s1);
            }
            let s2 = load_stage2(&cfg)?;
            let preps = prepare_all(&corpus(&cfg)?, &cfg.model)?;
            let report = evaluate(&s1, s2.as_ref(), &preps, &cfg.model, &cfg.sample, cfg.timing)?;
            if let Some(m) = &report.mean {
                tracing::info!(min_ade = m.min_ade, min_fde = m.min_fde, mr = m.mr, "evaluation");
            }
            save_config(&cfg, &out, "eval")?;
            write_file(&out.join("metrics.csv"), &report.to_csv())
        }
        Cmd::Render {
            scenario,
            predictions,
            out,
        } => {
            let s = load_scenario(&scenario)?;
            let payload = match predictions {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| CliError::Io(p.clone(), e))?;
                    let all: Vec<PredictPayload> = serde_json::from_str(&text).map_err(trajirl_core::Error::from)?;
                    let found = all.into_iter().find(|x| x.scenario_id == s.id).ok_or_else(|| {
                        CliError::Usage(format!("{} holds no prediction for `{}`", p.display(), s.id))
                    })?;
                    Some(found)
                }
                None => None,
            };
            let frame = to_target_frame(&s)?;
            let blocked = payload.as_ref().map(|p| p.blocked_cells.clone()).unwrap_or_default();
            write_file(&out, &render_svg(&frame.scenario, &blocked, payload.as_ref()))
        }
        Cmd::Mask { scenario, cells, out } => {
            let mut s = load_scenario(&scenario)?;
            let cells = parse_cells(&cells)?;
            check_cells(&cells, s.grid_side)?;
            for [r, c] in cells {
                s.drivable_mask.set(r, c, false);
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
            }
            Ok(save_scenario(&s, &out)?)
        }
        Cmd::Serve {
            common,
            corpus: dir,
            models,
            addr,
            cors_origin,
        } => {
            let mut flags = vec![("paths.corpus", path_val(&dir))];
            flags.extend(model_flags(&models));
            let cfg = resolve(&common, flags)?;
            let dir = RunConfig::require(&cfg.paths.corpus, "paths.corpus")?;
            let state = trajirl_service::AppState::load(
                &dir,
                cfg.model.clone(),
                cfg.paths.stage1.as_deref(),
                cfg.paths.stage2.as_deref(),
            )?;
            runtime()?
                .block_on(trajirl_service::serve(addr, Arc::new(state), cors_origin.as_deref()))
                .map_err(|e| CliError::Usage(format!("cannot serve on {addr}: {e}")))
        }
        Cmd::Bench {
            common,
            side,
            horizon,
            reps,
            out,
        } => {
            let cfg = resolve(&common, vec![])?;
            let rows = bench::run(
                side,
                horizon.unwrap_or(cfg.model.horizon),
                cfg.model.sweeps,
                cfg.sample.num_plans,
                reps,
                cfg.init_seed,
            )?;
            let mut csv = format!("{BENCH_HEADER}\n");
            rows.iter().for_each(|r| {
                csv.push_str(&r.csv());
                csv.push('\n');
            });
            match out {
                Some(p) => write_file(&p, &csv),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Runtime::new().map_err(|e| CliError::Usage(format!("cannot start async runtime: {e}")))
}

fn predict_local(
    cfg: &RunConfig,
    scenarios: &[Scenario],
    blocked: &[[usize; 2]],
    req: &PredictRequest,
) -> Result<Vec<PredictPayload>> {
    let s1 = load_stage1(cfg)?;
    let s2 = load_stage2(cfg)?;
    scenarios
        .iter()
        .map(|s| {
            let start = std::time::Instant::now();
            let prep: Prepared = prepare(s, blocked, &cfg.model)?;
            let pred = predict(&s1, s2.as_ref(), &prep, &cfg.model, &cfg.sample, cfg.timing)?;
            let ms = if cfg.timing {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            Ok(PredictPayload::new(&pred, &prep, req, s2.is_some(), ms))
        })
        .collect()
}

fn predict_remote(
    url: &str,
    scenarios: &[Scenario],
    blocked: &[[usize; 2]],
    req: &PredictRequest,
    timing: bool,
) -> Result<Vec<PredictPayload>> {
    let client = Client::new(url);
    let edit = trajirl_core::api::MaskEdit {
        blocked_cells: blocked.iter().map(|&[r, c]| [r as i64, c as i64]).collect(),
        revert: vec![],
    };
    runtime()?.block_on(async {
        let mut out = Vec::with_capacity(scenarios.len());
        for s in scenarios {
            let sid = client.create_session(&s.id).await?.session_id;
            if !edit.blocked_cells.is_empty() {
                client.edit_mask(&sid, &edit).await?;
            }
            let mut p = client.predict(&sid, req).await?;
            if !timing {
                p.timing_ms = 0.0;
            }
            out.push(p);
        }
        Ok(out)
    })
}
