use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use vesselreg::agents::ppo::{pretrain, write_curve, CheckpointConfig};
use vesselreg::agents::search::{cem_search, grid_oracle, CemConfig};
use vesselreg::agents::{register_online, register_pretrained, Checkpoint, HeadKind, TrainConfig};
use vesselreg::case::list_case_dirs;
use vesselreg::env::{EnvConfig, ObservationMode};
use vesselreg::eval::{pose_mae, render_table, run_experiment, write_records_csv, ExperimentConfig};
use vesselreg::geometry::Pose;
use vesselreg::io::{self, BitDepth, Record};
use vesselreg::phantom::{make_case_with, PhantomConfig};
use vesselreg::preprocess::{prepare_dsa_dir, resample_to_dsa, DsaPrepOptions, MagnificationConvention};
use vesselreg::reward::{overlap_reward, RewardOptions, RewardVariant};
use vesselreg::{Error, RegistrationCase, Result};

/// Rigid registration of a binary vessel volume to a DSA image.
#[derive(Debug, Parser)]
#[command(name = "vesselreg", version)]
struct Cli {
    /// Experiment config (TOML). Its phantom, env, train, cem and grid
    /// sections configure every subcommand.
    #[arg(long, global = true, env = "VESSELREG_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for phantoms, searches and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Progress on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic case directory.
    Phantom {
        #[arg(long)]
        out_dir: PathBuf,
        /// Noiseless, fully filled, artifact-free render.
        #[arg(long)]
        clean: bool,
    },
    /// Reduce a frame sequence to one DSA image.
    PreprocessDsa {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        border_threshold: Option<f64>,
        /// Divide the pixel spacing by the magnification instead of multiplying.
        #[arg(long)]
        divide_magnification: bool,
    },
    /// Resample a volume to isotropic DSA spacing.
    ResampleVolume {
        volume: PathBuf,
        #[arg(long)]
        dsa_spacing: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlap reward of a binary map against a DSA image.
    Reward {
        binary_map: PathBuf,
        dsa_image: PathBuf,
        /// Also write the values as a key = value record.
        #[arg(long)]
        record: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::MaskByP)]
        variant: VariantArg,
    },
    /// Register one case directory.
    Register {
        case_dir: PathBuf,
        #[arg(long, value_enum)]
        mode: RegisterMode,
        /// Policy checkpoint for pretrained mode.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Pose record to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Online mode: training budget, overriding the config.
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        #[arg(long, value_enum)]
        observation: Option<ObservationArg>,
        /// Online mode: reward curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Pretrain a policy over several cases.
    Train {
        /// Directory of case directories; defaults to the config's training phantoms.
        #[arg(long)]
        cases: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        #[arg(long, value_enum)]
        observation: Option<ObservationArg>,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Run the configured sweep and write records.csv and table.txt.
    Evaluate {
        #[arg(long)]
        out_dir: PathBuf,
        /// Evaluate these case directories instead of generated phantoms.
        #[arg(long)]
        cases: Option<PathBuf>,
    },
    /// HTTP API over a directory of cases.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        cases: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RegisterMode {
    Online,
    Pretrained,
    Cem,
    Grid,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    MaskByP,
    LiteralExclusion,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HeadArg {
    Cnn,
    Pcm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObservationArg {
    Concat,
    Fuse,
}

impl From<HeadArg> for HeadKind {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Cnn => HeadKind::Cnn,
            HeadArg::Pcm => HeadKind::Pcm,
        }
    }
}

impl From<ObservationArg> for ObservationMode {
    fn from(o: ObservationArg) -> Self {
        match o {
            ObservationArg::Concat => ObservationMode::Concat,
            ObservationArg::Fuse => ObservationMode::Fuse,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={:?}", e.kind(), e.to_string());
            ExitCode::from(match e {
                Error::NotFound(_) => 3,
                _ => 1,
            })
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::NotFound(path.to_path_buf()))
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => {
            require(p)?;
            ExperimentConfig::load(p)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    let seed = cli.seed.unwrap_or(0);
    let verbose = cli.verbose > 0;
    match cli.command {
        Command::Phantom { out_dir, clean } => {
            let pc = if clean {
                PhantomConfig {
                    noise_sigma: 0.0,
                    fill_fraction: 1.0,
                    streaks: 0,
                    ..cfg.phantom.clone()
                }
            } else {
                cfg.phantom.clone()
            };
            let case = make_case_with(seed, &pc)?.case;
            case.save(&out_dir)?;
            print!("{}", Record::render(&io::pose_entries(&case.truth.expect("phantoms carry a truth"))));
            Ok(())
        }
        Command::PreprocessDsa {
            dir,
            out,
            border_threshold,
            divide_magnification,
        } => {
            require(&dir)?;
            let convention = if divide_magnification {
                MagnificationConvention::Divide
            } else {
                MagnificationConvention::Multiply
            };
            let opts = DsaPrepOptions {
                border_threshold,
                convention,
            };
            let (img, _) = prepare_dsa_dir(&dir, &opts)?;
            io::write_image(&out, &img, BitDepth::Sixteen)?;
            print!(
                "{}",
                Record::render(&[
                    ("width", img.width().to_string()),
                    ("height", img.height().to_string()),
                    ("spacing_mm", img.spacing().to_string()),
                    ("magnification", convention.label().to_string()),
                ])
            );
            Ok(())
        }
        Command::ResampleVolume { volume, dsa_spacing, out } => {
            require(&volume)?;
            let v = io::read_volume(&volume)?;
            let r = resample_to_dsa(&v, dsa_spacing)?;
            io::write_volume(&out, &r)?;
            let d = r.dims();
            print!("{}", Record::render(&[("dims", format!("{} {} {}", d[0], d[1], d[2]))]));
            Ok(())
        }
        Command::Reward {
            binary_map,
            dsa_image,
            record,
            variant,
        } => {
            require(&binary_map)?;
            require(&dsa_image)?;
            let p = io::read_image(&binary_map)?;
            let f = io::read_image(&dsa_image)?;
            let opts = RewardOptions {
                variant: match variant {
                    VariantArg::MaskByP => RewardVariant::MaskByP,
                    VariantArg::LiteralExclusion => RewardVariant::LiteralExclusion,
                },
                i_max: None,
            };
            let r = overlap_reward(&p, &f, &opts)?;
            let entries = [
                ("value", r.value.to_string()),
                ("fg_mean", r.fg_mean.to_string()),
                ("bg_mean", r.bg_mean.to_string()),
            ];
            if let Some(path) = record {
                io::write_record(&path, &entries)?;
            }
            print!("{}", Record::render(&entries));
            Ok(())
        }
        Command::Register {
            case_dir,
            mode,
            policy,
            out,
            timesteps,
            head,
            observation,
            curve,
        } => {
            require(&case_dir)?;
            let case = Arc::new(RegistrationCase::load(&case_dir)?);
            let opts = RewardOptions::default();
            let t0 = Instant::now();
            let (pose, reward, label, work): (Pose<f64>, f64, &str, (&str, usize)) = match mode {
                RegisterMode::Grid => {
                    let r = grid_oracle(&case, &cfg.grid, &opts)?;
                    (r.pose, r.reward.value, "grid", ("evaluations", r.evaluations))
                }
                RegisterMode::Cem => {
                    let r = cem_search(&case, &CemConfig { seed, ..cfg.cem }, &opts, None)?;
                    (r.pose, r.reward.value, "cem", ("evaluations", r.evaluations))
                }
                RegisterMode::Online => {
                    let env = env_config(&cfg, observation);
                    let tcfg = TrainConfig {
                        total_timesteps: timesteps.unwrap_or(cfg.train.total_timesteps),
                        seed,
                        ..cfg.train.clone()
                    };
                    let head = head.map(HeadKind::from).unwrap_or(cfg.networks.first().copied().unwrap_or_default());
                    let (reg, report, _) = register_online(case.clone(), &env, &tcfg, head, opts)?;
                    if let Some(path) = curve {
                        write_curve(&path, &report.curve)?;
                    }
                    (reg.pose, reg.reward.value, "online", ("steps", tcfg.total_timesteps))
                }
                RegisterMode::Pretrained => {
                    let path = policy.ok_or_else(|| Error::InvalidArgument("pretrained mode needs --policy".into()))?;
                    require(&path)?;
                    let ckpt = Checkpoint::load(&path)?;
                    let net = ckpt.network::<f32>()?;
                    let reg = register_pretrained(case.clone(), &net, &ckpt.config.env, opts)?;
                    (reg.pose, reg.reward.value, "pretrained", ("steps", reg.steps))
                }
            };
            let secs = t0.elapsed().as_secs_f64();
            let mut entries = io::pose_entries(&pose);
            entries.push(("reward", reward.to_string()));
            entries.push(("mode", label.to_string()));
            entries.push((work.0, work.1.to_string()));
            if let Some(t) = &case.truth {
                let e = pose_mae(&pose, t, case.spacing())?;
                entries.push(("err_tx_mm", e.e_tx.to_string()));
                entries.push(("err_ty_mm", e.e_ty.to_string()));
                entries.push(("err_rz_deg", e.e_rz.to_string()));
                entries.push(("err_ry_deg", e.e_ry.to_string()));
            }
            if let Some(path) = out {
                io::write_record(&path, &entries)?;
            }
            print!("{}", Record::render(&entries));
            if verbose {
                eprintln!("registered {} in {secs:.2}s", case.id);
            }
            Ok(())
        }
        Command::Train {
            cases,
            out,
            timesteps,
            head,
            observation,
            curve,
        } => {
            let train_cases: Vec<Arc<RegistrationCase>> = match cases {
                Some(dir) => load_cases(&dir)?,
                None => cfg.phantom_cases()?.1,
            }
            .into_iter()
            .map(Arc::new)
            .collect();
            let env = env_config(&cfg, observation);
            let tcfg = TrainConfig {
                total_timesteps: timesteps.unwrap_or(cfg.train.total_timesteps),
                seed,
                ..cfg.train.clone()
            };
            let head = head.map(HeadKind::from).unwrap_or(cfg.networks.first().copied().unwrap_or_default());
            let t0 = Instant::now();
            let (net, report) = pretrain(&train_cases, &env, &tcfg, head, RewardOptions::default())?;
            let ckpt = Checkpoint::from_network(&net, seed, CheckpointConfig { train: tcfg, env });
            ckpt.save(&out)?;
            if let Some(path) = curve {
                write_curve(&path, &report.curve)?;
            }
            let best = report.curve.last().map_or(f64::NAN, |c| c.best_reward);
            print!(
                "{}",
                Record::render(&[
                    ("cases", train_cases.len().to_string()),
                    ("updates", report.updates.len().to_string()),
                    ("best_reward", best.to_string()),
                    ("architecture", net.architecture().descriptor()),
                ])
            );
            if verbose {
                eprintln!("trained in {:.2}s", t0.elapsed().as_secs_f64());
            }
            Ok(())
        }
        Command::Evaluate { out_dir, cases } => {
            let mut cfg = cfg;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            let (phantoms, train_cases) = cfg.phantom_cases()?;
            let eval_cases = match cases {
                Some(dir) => load_cases(&dir)?,
                None => phantoms,
            };
            let report = run_experiment(&cfg, &eval_cases, &train_cases)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
                path: out_dir.clone(),
                source: e,
            })?;
            write_records_csv(&out_dir.join("records.csv"), &report.records)?;
            let table = render_table(&report.rows);
            io::atomic_write(&out_dir.join("table.txt"), table.as_bytes())?;
            print!("{table}");
            Ok(())
        }
        Command::Serve { port, host, cases } => {
            require(&cases)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
                path: cases.clone(),
                source: e,
            })?;
            rt.block_on(async move {
                let addr = format!("{host}:{port}");
                let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| Error::Io {
                    path: PathBuf::from(&addr),
                    source: e,
                })?;
                eprintln!("listening on http://{addr}");
                vesselreg_service::serve(listener, cases.clone())
                    .await
                    .map_err(|e| Error::Io { path: cases, source: e })
            })
        }
    }
}

fn env_config(cfg: &ExperimentConfig, observation: Option<ObservationArg>) -> EnvConfig {
    let observation = observation
        .map(ObservationMode::from)
        .or(cfg.observations.first().copied())
        .unwrap_or(cfg.env.observation);
    EnvConfig { observation, ..cfg.env }
}

fn load_cases(root: &Path) -> Result<Vec<RegistrationCase>> {
    require(root)?;
    let cases = list_case_dirs(root)?
        .iter()
        .map(|d| RegistrationCase::load(d))
        .collect::<Result<Vec<_>>>()?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument(format!("no case directories under {}", root.display())));
    }
    Ok(cases)
}
