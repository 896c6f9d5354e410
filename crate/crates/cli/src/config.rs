//! `key = value` run configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dmm_core::morphing::CANONICAL_ETAS;
use dmm_core::phantom::{PhantomParams, TRUTH_ETAS};
use dmm_core::supervision::PretrainConfig;
use dmm_core::training::{TrainConfig, DEFAULT_LAMBDA1_GRID, DEFAULT_LAMBDA2_GRID};

use crate::error::CliError;

/// How frames are produced: from each pair's own flow or from the stored
/// unified flow applied to unpaired sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowMode {
    Paired,
    SourceOnly,
}

impl FromStr for FlowMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paired" => Ok(Self::Paired),
            "source-only" => Ok(Self::SourceOnly),
            other => Err(format!("`{other}` is neither `paired` nor `source-only`")),
        }
    }
}

impl Display for FlowMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Paired => "paired",
            Self::SourceOnly => "source-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Paths left empty resolve to fixed names inside `out`.
    pub data_dir: Option<PathBuf>,
    pub supervisor: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub flow: Option<PathBuf>,
    pub sources: Option<PathBuf>,
    pub mode: FlowMode,
    pub resume: bool,
    /// Ends this invocation of `train` after this many total steps, as if
    /// it had been interrupted; 0 runs to the configured budget.
    pub stop_at_step: u64,
    pub n_pairs: usize,
    pub n_sources: usize,
    pub phantom: PhantomParams,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    /// Phantoms per severity class for supervisor pre-training.
    pub sup_samples: usize,
    pub etas: Vec<f64>,
    pub eval_etas: Vec<f64>,
    pub max_i: f64,
    pub sweep_lambda1: Vec<f64>,
    pub sweep_lambda2: Vec<f64>,
    pub sweep_steps: usize,
    pub sweep_tail: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("run"),
            data_dir: None,
            supervisor: None,
            model: None,
            flow: None,
            sources: None,
            mode: FlowMode::Paired,
            resume: false,
            stop_at_step: 0,
            n_pairs: 60,
            n_sources: 10,
            phantom: PhantomParams::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            sup_samples: 160,
            etas: CANONICAL_ETAS.to_vec(),
            eval_etas: TRUTH_ETAS.to_vec(),
            max_i: dmm_core::metrics::DEFAULT_MAX_I,
            sweep_lambda1: DEFAULT_LAMBDA1_GRID.to_vec(),
            sweep_lambda2: DEFAULT_LAMBDA2_GRID.to_vec(),
            sweep_steps: 150,
            sweep_tail: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn list<T: Display>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    /// Parses configuration text on top of the defaults. Each non-blank line
    /// is `key = value`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::Missing(path.to_path_buf())
            } else {
                CliError::Io(format!("{}: {e}", path.display()))
            }
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data_dir" => self.data_dir = parse_path(v),
            "supervisor" => self.supervisor = parse_path(v),
            "model" => self.model = parse_path(v),
            "flow" => self.flow = parse_path(v),
            "sources" => self.sources = parse_path(v),
            "mode" => self.mode = parse(key, v)?,
            "resume" => self.resume = parse(key, v)?,
            "stop_at_step" => self.stop_at_step = parse(key, v)?,
            "n_pairs" => self.n_pairs = parse(key, v)?,
            "n_sources" => self.n_sources = parse(key, v)?,
            "height" => self.phantom.height = parse(key, v)?,
            "width" => self.phantom.width = parse(key, v)?,
            "g0" => self.phantom.g0 = parse(key, v)?,
            "g1" => self.phantom.g1 = parse(key, v)?,
            "o_max" => self.phantom.o_max = parse(key, v)?,
            "noise_sigma" => self.phantom.noise_sigma = parse(key, v)?,
            "lambda1" => t.lambda1 = parse(key, v)?,
            "lambda2" => t.lambda2 = parse(key, v)?,
            "lr_denoiser" => t.lr_denoiser = parse(key, v)?,
            "lr_regnet" => t.lr_regnet = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "t_max" => t.t_max = parse(key, v)?,
            "beta_start" => t.beta_start = parse(key, v)?,
            "beta_end" => t.beta_end = parse(key, v)?,
            "flow_window" => t.flow_window = parse(key, v)?,
            "stop_supervision_grad" => t.stop_supervision_grad = parse(key, v)?,
            "resample_t_per_epoch" => t.resample_t_per_epoch = parse(key, v)?,
            "checkpoint_interval" => t.checkpoint_interval = parse(key, v)?,
            "denoiser_base_channels" => t.denoiser.base_channels = parse(key, v)?,
            "denoiser_channel_mults" => t.denoiser.channel_mults = parse_list(key, v)?,
            "denoiser_res_blocks" => t.denoiser.res_blocks = parse(key, v)?,
            "denoiser_attention" => t.denoiser.middle_attention = parse(key, v)?,
            "dropout" => t.denoiser.dropout = parse(key, v)?,
            "regnet_base_channels" => t.regnet.base_channels = parse(key, v)?,
            "regnet_levels" => t.regnet.levels = parse(key, v)?,
            "regnet_output_scale" => t.regnet.output_scale = parse(key, v)?,
            "sup_samples" => self.sup_samples = parse(key, v)?,
            "sup_epochs" => self.pretrain.epochs = parse(key, v)?,
            "sup_batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "sup_lr" => self.pretrain.lr = parse(key, v)?,
            "sup_val_fraction" => self.pretrain.val_fraction = parse(key, v)?,
            "sup_min_accuracy" => self.pretrain.min_accuracy = parse(key, v)?,
            "etas" => self.etas = parse_list(key, v)?,
            "eval_etas" => self.eval_etas = parse_list(key, v)?,
            "max_i" => self.max_i = parse(key, v)?,
            "sweep_lambda1" => self.sweep_lambda1 = parse_list(key, v)?,
            "sweep_lambda2" => self.sweep_lambda2 = parse_list(key, v)?,
            "sweep_steps" => self.sweep_steps = parse(key, v)?,
            "sweep_tail" => self.sweep_tail = parse(key, v)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let p = &self.phantom;
        let s = &self.pretrain;
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("data_dir", path(&self.data_dir)),
            ("supervisor", path(&self.supervisor)),
            ("model", path(&self.model)),
            ("flow", path(&self.flow)),
            ("sources", path(&self.sources)),
            ("mode", self.mode.to_string()),
            ("resume", self.resume.to_string()),
            ("stop_at_step", self.stop_at_step.to_string()),
            ("n_pairs", self.n_pairs.to_string()),
            ("n_sources", self.n_sources.to_string()),
            ("height", p.height.to_string()),
            ("width", p.width.to_string()),
            ("g0", p.g0.to_string()),
            ("g1", p.g1.to_string()),
            ("o_max", p.o_max.to_string()),
            ("noise_sigma", p.noise_sigma.to_string()),
            ("lambda1", t.lambda1.to_string()),
            ("lambda2", t.lambda2.to_string()),
            ("lr_denoiser", t.lr_denoiser.to_string()),
            ("lr_regnet", t.lr_regnet.to_string()),
            ("epochs", t.epochs.to_string()),
            ("steps", t.steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("t_max", t.t_max.to_string()),
            ("beta_start", t.beta_start.to_string()),
            ("beta_end", t.beta_end.to_string()),
            ("flow_window", t.flow_window.to_string()),
            ("stop_supervision_grad", t.stop_supervision_grad.to_string()),
            ("resample_t_per_epoch", t.resample_t_per_epoch.to_string()),
            ("checkpoint_interval", t.checkpoint_interval.to_string()),
            (
                "denoiser_base_channels",
                t.denoiser.base_channels.to_string(),
            ),
            ("denoiser_channel_mults", list(&t.denoiser.channel_mults)),
            ("denoiser_res_blocks", t.denoiser.res_blocks.to_string()),
            (
                "denoiser_attention",
                t.denoiser.middle_attention.to_string(),
            ),
            ("dropout", t.denoiser.dropout.to_string()),
            ("regnet_base_channels", t.regnet.base_channels.to_string()),
            ("regnet_levels", t.regnet.levels.to_string()),
            ("regnet_output_scale", t.regnet.output_scale.to_string()),
            ("sup_samples", self.sup_samples.to_string()),
            ("sup_epochs", s.epochs.to_string()),
            ("sup_batch_size", s.batch_size.to_string()),
            ("sup_lr", s.lr.to_string()),
            ("sup_val_fraction", s.val_fraction.to_string()),
            ("sup_min_accuracy", s.min_accuracy.to_string()),
            ("etas", list(&self.etas)),
            ("eval_etas", list(&self.eval_etas)),
            ("max_i", self.max_i.to_string()),
            ("sweep_lambda1", list(&self.sweep_lambda1)),
            ("sweep_lambda2", list(&self.sweep_lambda2)),
            ("sweep_steps", self.sweep_steps.to_string()),
            ("sweep_tail", self.sweep_tail.to_string()),
        ]
    }

    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Propagates the run seed into every component and checks the values
    /// that the library does not check on its own.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.phantom.validate()?;
        self.train.validate()?;
        if self.n_pairs == 0 {
            return Err(CliError::Config("`n_pairs` must be at least 1".into()));
        }
        if self.etas.is_empty() {
            return Err(CliError::Config(
                "`etas` must list at least one value".into(),
            ));
        }
        for &eta in self.etas.iter().chain(&self.eval_etas) {
            dmm_core::morphing::MorphScale::new(eta)?;
        }
        Ok(self)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.out.join("data"))
    }

    pub fn supervisor_path(&self) -> PathBuf {
        self.supervisor
            .clone()
            .unwrap_or_else(|| self.out.join("supervisor.dmmc"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model
            .clone()
            .unwrap_or_else(|| self.out.join("model.dmmc"))
    }

    pub fn flow_path(&self) -> PathBuf {
        self.flow
            .clone()
            .unwrap_or_else(|| self.out.join("unified_flow.dmmf"))
    }

    pub fn sources_dir(&self) -> PathBuf {
        self.sources
            .clone()
            .unwrap_or_else(|| self.data_dir().join("heldout"))
    }
}
