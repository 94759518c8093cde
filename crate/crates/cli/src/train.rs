use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use flowpost::condmodel::{DecoderKind, GenerativeConfig, Model, ModelConfig};
use flowpost::flows::ChainKind;
use flowpost::losses::{train, write_log_csv, LossKind, TrainConfig, TrainSetup};
use flowpost::toymc::Dataset;

use crate::failure::Failure;
use crate::manifest::{manifest_path, tmp_sibling, Recorder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Extended,
    Semi,
    Vae,
}

impl Mode {
    fn loss(self) -> LossKind {
        match self {
            Mode::Supervised => LossKind::Supervised,
            Mode::Extended => LossKind::Extended,
            Mode::Semi => LossKind::Semi,
            Mode::Vae => LossKind::Elbo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorArg {
    Gf,
    Affine,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderArg {
    Mlp,
    Physics,
}

/// Model options as they appear in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub posterior: PosteriorArg,
    pub layers: usize,
    pub kernels: usize,
    pub width: usize,
    pub decoder: DecoderArg,
    pub decoder_width: usize,
    pub time_components: usize,
    pub prior_layers: usize,
    pub prior_kernels: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            posterior: PosteriorArg::Gf,
            layers: 3,
            kernels: 6,
            width: 50,
            decoder: DecoderArg::Mlp,
            decoder_width: 100,
            time_components: 6,
            prior_layers: 3,
            prior_kernels: 6,
        }
    }
}

impl ModelOptions {
    fn posterior_kind(&self) -> ChainKind {
        match self.posterior {
            PosteriorArg::Gf => ChainKind::Gaussianization { layers: self.layers, kernels: self.kernels },
            PosteriorArg::Affine => ChainKind::Affine,
            PosteriorArg::Mse => ChainKind::Mse,
        }
    }

    fn generative(&self) -> GenerativeConfig {
        GenerativeConfig {
            prior: ChainKind::Gaussianization { layers: self.prior_layers, kernels: self.prior_kernels },
            decoder: match self.decoder {
                DecoderArg::Mlp => DecoderKind::Mlp { width: self.decoder_width, time_components: self.time_components },
                DecoderArg::Physics => DecoderKind::Physics,
            },
        }
    }
}

/// Contents of `--config`; missing entries fall back to the built-in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelOptions,
    pub train: TrainConfig,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Dataset file written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with `model` and `train` sections; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub posterior: Option<PosteriorArg>,
    /// Gaussianization layers of the posterior.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Kernels per dimension and layer.
    #[arg(long)]
    pub kernels: Option<usize>,
    /// Hidden width of the flow-parameter network.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long, value_enum)]
    pub decoder: Option<DecoderArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the learning rate constant.
    #[arg(long)]
    pub fixed_lr: bool,
    /// Start from this model; the posterior configuration is taken from it.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Only the generative part is updated.
    #[arg(long)]
    pub freeze_posterior: bool,
    /// Training log CSV (default: `<out>.log.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Flags over config file over defaults.
pub fn resolve(a: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut c = match &a.config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    let m = &mut c.model;
    if let Some(v) = a.posterior {
        m.posterior = v;
    }
    if let Some(v) = a.layers {
        m.layers = v;
    }
    if let Some(v) = a.kernels {
        m.kernels = v;
    }
    if let Some(v) = a.width {
        m.width = v;
    }
    if let Some(v) = a.decoder {
        m.decoder = v;
    }
    let t = &mut c.train;
    if let Some(v) = a.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if a.fixed_lr {
        t.fixed_lr = true;
    }
    t.validate()?;
    Ok(c)
}

fn build_model(a: &TrainArgs, cfg: &RunConfig, data: &Dataset) -> Result<Model, Failure> {
    let needs_gen = a.mode.loss().needs_generative();
    let Some(init) = &a.init else {
        let mut mc = ModelConfig::new(data.header.spec.clone(), cfg.model.posterior_kind(), cfg.model.width);
        if needs_gen {
            mc = mc.with_generative(cfg.model.generative());
        }
        return Ok(Model::new(mc, cfg.train.seed)?);
    };
    let start = Model::load(init)?;
    if start.config.spec != data.header.spec {
        return Err(Failure::Data(format!(
            "{} was trained for dataset {}, data file holds dataset {}",
            init.display(),
            start.config.spec.id,
            data.header.spec.id
        )));
    }
    let mut mc = start.config.clone();
    if needs_gen && mc.generative.is_none() {
        mc = mc.with_generative(cfg.model.generative());
    }
    if mc == start.config {
        return Ok(start);
    }
    let mut model = Model::new(mc, cfg.train.seed)?;
    model.copy_params_from(&start, "post.")?;
    Ok(model)
}

pub fn run(a: &TrainArgs, threads: usize) -> Result<(), Failure> {
    let cfg = resolve(a)?;
    if a.freeze_posterior && !matches!(a.mode, Mode::Extended | Mode::Vae | Mode::Semi) {
        return Err(Failure::Usage("--freeze-posterior leaves nothing to train in supervised mode".into()));
    }
    let mut rec = Recorder::new("train", threads);
    rec.seed(cfg.train.seed);
    let data = Dataset::load(&a.data)?;
    rec.input(&a.data);
    if let Some(p) = &a.init {
        rec.input(p);
    }
    let labeled: Vec<bool> = match a.mode {
        Mode::Vae => vec![false; data.events.len()],
        _ => data.events.iter().map(|e| e.label.is_some()).collect(),
    };
    let n_lab = labeled.iter().filter(|&&l| l).count();
    if matches!(a.mode, Mode::Supervised | Mode::Extended) && n_lab < labeled.len() {
        return Err(Failure::Data(format!(
            "{:?} training needs every label; {} of {} events are unlabeled",
            a.mode,
            labeled.len() - n_lab,
            labeled.len()
        )));
    }
    let mut model = build_model(a, &cfg, &data)?;
    let trainable = a
        .freeze_posterior
        .then(|| model.params.layout().flat_map(|(n, s)| std::iter::repeat_n(!n.starts_with("post."), s.range().len())).collect());
    let report = train(&mut model, &data.events, &TrainSetup { kind: a.mode.loss(), labeled: &labeled, trainable }, &cfg.train)?;
    let last = report.log.last().map(|l| l.train_loss).unwrap_or(f64::NAN);
    let score = if report.final_val_loss.is_nan() { last } else { report.final_val_loss };
    if !score.is_finite() {
        return Err(Failure::Numeric(format!("training diverged (final loss {score})")));
    }
    crate::ensure_parent(&a.out)?;
    model.save(&a.out)?;
    let log = a.log.clone().unwrap_or_else(|| {
        let mut n = a.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        n.push(".log.csv");
        a.out.with_file_name(n)
    });
    crate::ensure_parent(&log)?;
    let tmp = tmp_sibling(&log);
    write_log_csv(&tmp, &report.log)?;
    std::fs::rename(&tmp, &log).map_err(|e| Failure::io(&log, e))?;
    rec.config(&serde_json::json!({ "mode": a.mode, "resolved": cfg, "model": model.config }));
    rec.output(&a.out);
    rec.output(&log);
    rec.finish(&manifest_path(&a.out))?;
    let skipped: usize = report.log.iter().map(|l| l.skipped).sum();
    println!(
        "trained {:?} for {} epochs: final validation loss {:.6}, {} SWA snapshots, {} skipped event evaluations",
        a.mode,
        report.log.len(),
        score,
        report.n_snapshots,
        skipped
    );
    Ok(())
}
