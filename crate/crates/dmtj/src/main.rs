use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dmtj::ablate::{ablate, load_matrix, to_tsv};
use dmtj::config::{Preset, RunConfig};
use dmtj::corpus::{read_corpus, write_atomic};
use dmtj::data::{probe_splits, train_images, Unlabeled};
use dmtj::evaluate::probe_with_baseline;
use dmtj::export::{export_attention, export_similarity};
use dmtj::train::{pretrain, thread_pool, Outputs, TrainState, CHECKPOINT_FILE};
use dmtj::{checkpoint, IoError};
use dmtj_core::model::{Model, ModelConfig};
use dmtj_core::probe::ProbeKind;
use dmtj_core::synthetic::generate_synthetic;
use dmtj_core::Rng;
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "dmtj", version, about = "Masked latent pre-training with neighbor-aggregated dense targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run config; defaults to the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tiny")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted override, e.g. `--set model.neighbors.k=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(self.preset),
        };
        cfg = cfg.with_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Knn,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Attn,
    Sim,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train and write metrics.log plus a checkpoint every epoch.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Probe frozen features next to a random-init baseline.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "knn")]
        kind: Kind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention or similarity maps for one image.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        /// Binary corpus holding the image; defaults to the probe-test split.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
        layer: isize,
        #[arg(long, default_value_t = 0)]
        query: usize,
        #[arg(long, default_value_t = 0.10)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Backward against finite differences on a forced small model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb this group's analytic gradient (fault injection).
        #[arg(long)]
        corrupt: Option<String>,
        /// Coordinates probed per tensor on the tiny preset.
        #[arg(long, default_value_t = 6)]
        coords: usize,
        /// Every coordinate of a D=8, depth-1 model instead.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Run a matrix of overrides and write ablation.tsv.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        matrix: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let pool = thread_pool()?;
    match cli.command {
        Command::Pretrain { config, resume } => {
            let cfg = config.resolve()?;
            let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
            let mut state = if resume {
                let s = checkpoint::load(&ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?;
                if s.config != cfg {
                    bail!("config differs from the checkpoint's; resume with the original config");
                }
                s
            } else {
                TrainState::new(cfg.clone())?
            };
            let images = train_images(&cfg.data)?;
            if images.is_empty() {
                bail!("no training images");
            }
            let outputs = Outputs {
                dir: Some(cfg.out_dir.clone()),
                max_epochs: None,
            };
            let metrics = pretrain(&mut state, Unlabeled::new(&images), &outputs, &pool)?;
            if let Some(m) = metrics.last() {
                log::info!("finished: {m}");
            }
            write_atomic(&cfg.out_dir.join("config.json"), cfg.to_json().as_bytes())?;
        }
        Command::Probe { checkpoint: path, kind, out } => {
            let state = checkpoint::load(&path)?;
            let (train, test) = probe_splits(&state.config.data)?;
            let kind = match kind {
                Kind::Knn => ProbeKind::Knn,
                Kind::Linear => ProbeKind::Linear,
            };
            let outcome = probe_with_baseline(
                &state.model,
                state.config.seed,
                &train,
                &test,
                &state.config.probe,
                kind,
                &pool,
            )?;
            let text = outcome.render();
            print!("{text}");
            let name = match kind {
                ProbeKind::Knn => "probe_knn.txt",
                ProbeKind::Linear => "probe_linear.txt",
            };
            let out = out.unwrap_or_else(|| state.config.out_dir.clone());
            std::fs::create_dir_all(&out)?;
            write_atomic(&out.join(name), text.as_bytes())?;
        }
        Command::Export {
            checkpoint: path,
            what,
            image,
            index,
            layer,
            query,
            fraction,
            out,
        } => {
            let state = checkpoint::load(&path)?;
            let images = match image {
                Some(p) => read_corpus(&p)?.1,
                None => probe_splits(&state.config.data)?.1.images,
            };
            let img = images
                .get(index)
                .ok_or_else(|| IoError::Format(format!("image index {index} out of {}", images.len())))?;
            let written = match what {
                What::Attn => export_attention(&state.model, img, layer, &out)?,
                What::Sim => export_similarity(&state.model, img, query, fraction, &out)?.1,
            };
            for f in written.files {
                println!("{}", f.display());
            }
        }
        Command::Gradcheck {
            seed,
            corrupt,
            coords,
            exhaustive,
        } => {
            let cfg = if exhaustive {
                ModelConfig::gradcheck()
            } else {
                ModelConfig::tiny()
            };
            let sample = (!exhaustive).then_some((coords.max(1), seed));
            let mut rng = Rng::seed_from_u64(seed);
            let model = Model::new(&cfg, &mut rng)?;
            let mut spec = dmtj_core::synthetic::SyntheticShapesSpec::benchmark();
            spec.seed = seed;
            let img = generate_synthetic(&spec, 1)?.images.remove(0);
            let plan = model.sample_plan(&mut rng)?;
            let report = model.check_gradients(&img, &plan, 1e-5, 1e-3, sample, corrupt.as_deref())?;
            for (name, status) in &report.groups {
                match status {
                    dmtj_core::model::GroupStatus::Checked(e) => println!("{name}\trel_err={e:.3e}"),
                    dmtj_core::model::GroupStatus::NoGradientExpected(ok) => {
                        println!("{name}\tno gradient expected ({})", if *ok { "none received" } else { "LEAKED" })
                    }
                }
            }
            println!("max_rel_err={:.3e}", report.max_error());
            if let Some(g) = report.first_failure() {
                bail!("gradcheck failed on {g}");
            }
            println!("pass");
        }
        Command::Ablate { config, matrix } => {
            let cfg = config.resolve()?;
            let m = load_matrix(&matrix)?;
            let results = ablate(&cfg, &m, &pool);
            let tsv = to_tsv(&m, &results);
            print!("{tsv}");
            std::fs::create_dir_all(&cfg.out_dir)?;
            write_atomic(&cfg.out_dir.join("ablation.tsv"), tsv.as_bytes())?;
        }
    }
    Ok(())
}
