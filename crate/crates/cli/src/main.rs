use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ultravar::checkpoint::Checkpoint;
use ultravar::config::RunConfig;
use ultravar::downstream::report_csv;
use ultravar::metrics::metrics_csv;
use ultravar::pipeline::{
    ablation_sweep, quality_metrics, train_var, train_vqvae, var_log_csv, vq_log_csv, GenArm, UltraVar,
};
use ultravar::synth::{self, make_dataset, write_dataset, ManifestEntry, Split};
use ultravar::Error;

#[derive(Parser)]
#[command(name = "ultravar", version, about = "Multi-scale VQ + next-scale generation for ultrasound-style images")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: train the tokenizer and refinement module.
    TrainVqvae {
        #[command(flatten)]
        common: Common,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        no_pem: bool,
    },
    /// Stage 2: train the transformer on a frozen tokenizer.
    TrainVar {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        no_scl: bool,
    },
    /// Stage 3: sample class-conditional images.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "class")]
        class_id: usize,
        #[arg(short = 'n', long, default_value_t = 1)]
        n: usize,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Image-quality metrics and paired downstream reports.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of full,wo_pem,wo_scl.
        #[arg(long, default_value = "full,wo_pem,wo_scl")]
        arms: String,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SamplerFlags {
    #[arg(long)]
    no_pem: bool,
    #[arg(long)]
    no_scl: bool,
    #[arg(long)]
    temp: Option<f32>,
    #[arg(long)]
    top_p: Option<f32>,
    #[arg(long = "cfg")]
    cfg_scale: Option<f32>,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NonFinite { .. } | Error::Numeric(_) => Failure::Numeric(msg),
            Error::Config(_) | Error::Index { .. } | Error::Dimension { .. } | Error::Contract(_) => Failure::Usage(msg),
            Error::State(_) | Error::Parse { .. } | Error::Checkpoint(_) | Error::Io { .. } => Failure::Data(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric failure: {m}");
            ExitCode::from(3)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Parse { .. } => Failure::Usage(e.to_string()),
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))
}

fn log_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    ckpt.with_file_name(format!("{stem}_loss.csv"))
}

fn save_ckpt(model_cfg: &RunConfig, store: &ultravar::nn::ParamStore, out: &Path) -> CliResult<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ck = Checkpoint { config: model_cfg.to_canonical_json(), params: store.clone() };
    Ok(ck.save(out)?)
}

fn train_split(data: &Path) -> CliResult<(Vec<ultravar::tensor::Tensor>, Vec<usize>)> {
    let ds = synth::load_dataset(data)?;
    let (x, y) = ds.arrays(Split::Train);
    if x.is_empty() {
        return Err(Failure::Data(format!("{} has no training samples", data.display())));
    }
    Ok((x, y))
}

fn apply_sampler_flags(arm: &mut GenArm, f: &SamplerFlags) {
    if let Some(t) = f.temp {
        arm.sampler.temperature = t;
    }
    if let Some(p) = f.top_p {
        arm.sampler.top_p = p;
    }
    if let Some(g) = f.cfg_scale {
        arm.sampler.cfg_scale = g;
    }
    arm.use_pem &= !f.no_pem;
    arm.use_ssl &= !f.no_scl;
}

fn load_model(ckpt: &Path) -> CliResult<UltraVar> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = RunConfig::from_json(&ck.config).map_err(|e| Failure::Data(format!("checkpoint config: {e}")))?;
    if !ck.params.has_prefix(ultravar::var::PREFIX) {
        return Err(Failure::Data(format!("{} holds no generator weights", ckpt.display())));
    }
    Ok(UltraVar::new(cfg, ck.params)?)
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::Synth { common } => {
            let mut cfg = load_config(common.config.as_deref(), None)?;
            if let Some(s) = common.seed {
                cfg.synth.seed = s;
            }
            let ds = make_dataset(&cfg.synth, cfg.dataset.train, cfg.dataset.test)?;
            let manifest = write_dataset(&ds, &common.out)?;
            eprintln!("wrote {} images, manifest {}", ds.len(), manifest.display());
        }
        Cmd::TrainVqvae { common, data, no_pem } => {
            let mut cfg = load_config(common.config.as_deref(), common.seed)?;
            cfg.ablation.disable_pem |= no_pem;
            let (x, _) = train_split(&data)?;
            let (store, log) = train_vqvae(&cfg, &x, |r| {
                eprintln!("epoch {} l_recon {:.6} l_quant {:.6}", r.epoch, r.l_recon, r.l_quant)
            })?;
            save_ckpt(&cfg, &store, &common.out)?;
            write(&log_path(&common.out), &vq_log_csv(&log))?;
        }
        Cmd::TrainVar { common, data, vqvae, no_scl } => {
            let stage1 = Checkpoint::load(&vqvae)?;
            let mut cfg = match common.config.as_deref() {
                Some(p) => load_config(Some(p), common.seed)?,
                None => {
                    let mut c = RunConfig::from_json(&stage1.config)?;
                    if let Some(s) = common.seed {
                        c.seed = s;
                    }
                    c
                }
            };
            cfg.ablation.disable_scl |= no_scl;
            let s1cfg = RunConfig::from_json(&stage1.config)?;
            if s1cfg.vqvae != cfg.vqvae || s1cfg.pem != cfg.pem {
                return Err(Failure::Usage("config tokenizer settings differ from the stage-1 checkpoint".into()));
            }
            let (x, y) = train_split(&data)?;
            let (store, log) = train_var(&cfg, &stage1.params, &x, &y, |r| eprintln!("epoch {} l_var {:.6}", r.epoch, r.l_var))?;
            save_ckpt(&cfg, &store, &common.out)?;
            write(&log_path(&common.out), &var_log_csv(&log))?;
        }
        Cmd::Generate { ckpt, class_id, n, sampler, seed, out } => {
            let model = load_model(&ckpt)?;
            if class_id >= model.cfg.var.num_classes {
                return Err(Failure::Usage(format!(
                    "class {class_id} is out of range for {} classes",
                    model.cfg.var.num_classes
                )));
            }
            let mut arm = GenArm::from_config(&model.cfg);
            apply_sampler_flags(&mut arm, &sampler);
            if let Some(s) = seed {
                arm.sampler.seed = s;
            }
            arm.sampler.validate()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut entries = Vec::with_capacity(n);
            for i in 0..n {
                let g = model.generate(class_id, i as u64, &arm)?;
                let name = format!("gen_c{class_id}_{i:04}.pgm");
                synth::write_pgm(&g.image, &out.join(&name))?;
                entries.push(ManifestEntry { path: name, label: class_id, split: Split::Train });
            }
            synth::write_manifest(&out.join(synth::MANIFEST_NAME), &entries)?;
            eprintln!("wrote {n} images to {}", out.display());
        }
        Cmd::Eval { ckpt, data, arms, sampler, out } => {
            let model = load_model(&ckpt)?;
            let table = GenArm::table(&model.cfg);
            let mut chosen = Vec::new();
            for name in arms.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let mut arm = table
                    .iter()
                    .find(|a| a.name == name)
                    .cloned()
                    .ok_or_else(|| Failure::Usage(format!("unknown arm `{name}`; expected full, wo_pem or wo_scl")))?;
                apply_sampler_flags(&mut arm, &sampler);
                arm.sampler.validate()?;
                chosen.push(arm);
            }
            if chosen.is_empty() {
                return Err(Failure::Usage("no arms selected".into()));
            }
            let ds = synth::load_dataset(&data)?;
            let metrics = quality_metrics(&model, &ds, &chosen)?;
            write(&out.join("metrics.csv"), &metrics_csv(&metrics))?;
            let rows = ablation_sweep(&model, &ds, &chosen)?;
            write(&out.join("downstream.csv"), &report_csv(&rows))?;
            eprintln!("wrote {} and {}", out.join("metrics.csv").display(), out.join("downstream.csv").display());
        }
    }
    Ok(())
}
