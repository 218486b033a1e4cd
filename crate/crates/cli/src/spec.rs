//! Experiment specification: a TOML file (or a previous manifest) merged
//! with command-line flags, flags winning.

use crate::error::{CliError, CliResult};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use tcct_core::data::{Mode, SynthKind, ECL_FRACTIONS, ETT_FRACTIONS};
use tcct_core::model::{ModelConfig, VariantPreset};
use tcct_core::train::TrainConfig;

pub const OUT_DIR_ENV: &str = "TCCT_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "tcct-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        target: Option<String>,
    },
    Synth {
        kind: SynthKind,
        length: usize,
        n_series: usize,
        seed: u64,
        noise: f64,
    },
}

impl DataSource {
    /// Short label used in metric rows.
    pub fn label(&self) -> String {
        match self {
            DataSource::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            DataSource::Synth { kind, .. } => format!(
                "synth_{}",
                match kind {
                    SynthKind::SineMix => "sine_mix",
                    SynthKind::ArNoise => "ar_noise",
                }
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Fractions([f64; 3]),
    Months([u32; 3]),
}

impl FromStr for Split {
    type Err = CliError;

    /// `ett`, `ecl`, `months:12,4,4` or three comma-separated fractions.
    fn from_str(s: &str) -> CliResult<Self> {
        let bad = || CliError::Config(format!("cannot parse split `{s}`"));
        match s.trim().to_ascii_lowercase().as_str() {
            "ett" => return Ok(Split::Fractions(ETT_FRACTIONS)),
            "ecl" => return Ok(Split::Fractions(ECL_FRACTIONS)),
            _ => {}
        }
        if let Some(rest) = s.trim().strip_prefix("months:") {
            let m: Vec<u32> = rest.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?;
            return <[u32; 3]>::try_from(m).map(Split::Months).map_err(|_| bad());
        }
        let f: Vec<f64> = s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?;
        <[f64; 3]>::try_from(f).map(Split::Fractions).map_err(|_| bad())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub patience: usize,
    pub clip: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch: t.batch,
            lr0: t.lr0,
            lr_decay: t.lr_decay,
            patience: t.patience,
            clip: t.clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub d_model: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_layers: usize,
    /// Defaults to the input length.
    pub token_len: Option<usize>,
    pub sampling_factor: f64,
    pub kernel: usize,
    pub time_marks: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(VariantPreset::Informer, 96, 24, 1);
        ModelSection {
            d_model: m.d_model,
            heads: m.heads,
            enc_blocks: m.enc_blocks,
            dec_layers: m.dec_layers,
            token_len: None,
            sampling_factor: m.sampling_factor,
            kernel: m.kernel,
            time_marks: false,
        }
    }
}

/// Everything that determines an experiment's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub variant: VariantPreset,
    pub data: DataSource,
    pub mode: Mode,
    pub input_len: usize,
    pub pred_len: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub split: Split,
    pub train: TrainSection,
    pub model: ModelSection,
}

impl ExperimentSpec {
    /// SHA-256 over the canonical JSON of the spec.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }

    pub fn train_config(&self, run_seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: self.train.lr0,
            lr_decay: self.train.lr_decay,
            epochs: self.train.epochs,
            batch: self.train.batch,
            patience: self.train.patience,
            repeats: self.repeats,
            seed: run_seed,
            clip: self.train.clip,
        }
    }

    pub fn model_config(&self, pred_len: usize, n_series: usize, run_seed: u64) -> ModelConfig {
        let m = &self.model;
        let mut c = ModelConfig::new(self.variant, self.input_len, pred_len, n_series)
            .with_dims(m.d_model, m.heads)
            .with_seed(run_seed);
        c.enc_blocks = m.enc_blocks;
        c.dec_layers = m.dec_layers;
        c.token_len = m.token_len.unwrap_or(self.input_len);
        c.sampling_factor = m.sampling_factor;
        c.kernel = m.kernel;
        c.time_marks = if m.time_marks { tcct_core::data::N_TIME_MARKS } else { 0 };
        c
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.pred_len.is_empty() || self.pred_len.contains(&0) {
            return Err(CliError::Config("pred_len needs at least one entry, all >= 1".into()));
        }
        if self.repeats == 0 {
            return Err(CliError::Config("repeats must be >= 1".into()));
        }
        for &t in &self.pred_len {
            // n_series does not affect validity
            self.model_config(t, 1, 0).validate()?;
        }
        self.train_config(0).validate()?;
        if let DataSource::Synth { length, n_series, noise, .. } = &self.data {
            if *length == 0 || *n_series == 0 || !(*noise >= 0.0) {
                return Err(CliError::Config("synthetic data needs length, n_series >= 1 and noise >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Optional-everything mirror of [`ExperimentSpec`] as written in TOML.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub variant: Option<String>,
    pub mode: Option<String>,
    pub input_len: Option<usize>,
    pub pred_len: Option<Vec<usize>>,
    pub repeats: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub split: Option<String>,
    #[serde(default)]
    pub data: RawData,
    pub train: Option<TrainPatch>,
    pub model: Option<ModelPatch>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawData {
    pub csv: Option<PathBuf>,
    pub target: Option<String>,
    pub synth: Option<String>,
    pub length: Option<usize>,
    pub n_series: Option<usize>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPatch {
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr0: Option<f64>,
    pub lr_decay: Option<f64>,
    pub patience: Option<usize>,
    pub clip: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPatch {
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub enc_blocks: Option<usize>,
    pub dec_layers: Option<usize>,
    pub token_len: Option<usize>,
    pub sampling_factor: Option<f64>,
    pub kernel: Option<usize>,
    pub time_marks: Option<bool>,
}

pub fn parse_variant(name: &str) -> CliResult<VariantPreset> {
    name.parse().map_err(|_| CliError::InvalidVariant(name.to_string()))
}

pub fn parse_mode(s: &str) -> CliResult<Mode> {
    s.parse().map_err(|e: tcct_core::Error| CliError::Config(e.to_string()))
}

/// `synth:sine_mix`, `synth:ar_noise`, or a CSV path.
pub fn apply_data_flag(data: &mut RawData, flag: &str) -> CliResult<()> {
    if let Some(kind) = flag.strip_prefix("synth:") {
        data.synth = Some(kind.to_string());
        data.csv = None;
    } else {
        data.csv = Some(PathBuf::from(flag));
        data.synth = None;
    }
    Ok(())
}

/// Reads a TOML config, or the `spec` of a JSON run manifest.
pub fn load_config(path: &Path) -> CliResult<Source> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        #[derive(Deserialize)]
        struct WithSpec {
            spec: ExperimentSpec,
        }
        let m: WithSpec = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        return Ok(Source::Spec(Box::new(m.spec)));
    }
    toml::from_str(&text)
        .map(Source::Raw)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub enum Source {
    Raw(RawConfig),
    Spec(Box<ExperimentSpec>),
}

impl RawConfig {
    /// Lossless inverse of [`RawConfig::resolve`], so a stored spec can take
    /// flag overrides the same way a TOML file does.
    pub fn from_spec(spec: &ExperimentSpec) -> Self {
        let data = match &spec.data {
            DataSource::Csv { path, target } => RawData {
                csv: Some(path.clone()),
                target: target.clone(),
                ..RawData::default()
            },
            DataSource::Synth { kind, length, n_series, seed, noise } => RawData {
                synth: Some(
                    match kind {
                        SynthKind::SineMix => "sine_mix",
                        SynthKind::ArNoise => "ar_noise",
                    }
                    .into(),
                ),
                length: Some(*length),
                n_series: Some(*n_series),
                noise: Some(*noise),
                seed: Some(*seed),
                ..RawData::default()
            },
        };
        let join = |v: Vec<String>| v.join(",");
        let split = match spec.split {
            Split::Fractions(f) => join(f.iter().map(|x| format!("{x}")).collect()),
            Split::Months(m) => format!("months:{}", join(m.iter().map(|x| x.to_string()).collect())),
        };
        let (t, m) = (&spec.train, &spec.model);
        RawConfig {
            variant: Some(spec.variant.name().into()),
            mode: Some(spec.mode.to_string()),
            input_len: Some(spec.input_len),
            pred_len: Some(spec.pred_len.clone()),
            repeats: Some(spec.repeats),
            seed: Some(spec.seed),
            out: Some(spec.out.clone()),
            split: Some(split),
            data,
            train: Some(TrainPatch {
                epochs: Some(t.epochs),
                batch: Some(t.batch),
                lr0: Some(t.lr0),
                lr_decay: Some(t.lr_decay),
                patience: Some(t.patience),
                clip: t.clip,
            }),
            model: Some(ModelPatch {
                d_model: Some(m.d_model),
                heads: Some(m.heads),
                enc_blocks: Some(m.enc_blocks),
                dec_layers: Some(m.dec_layers),
                token_len: m.token_len,
                sampling_factor: Some(m.sampling_factor),
                kernel: Some(m.kernel),
                time_marks: Some(m.time_marks),
            }),
        }
    }

    /// Fills every unset field with its default.
    pub fn resolve(self, default_out: PathBuf) -> CliResult<ExperimentSpec> {
        let variant = parse_variant(self.variant.as_deref().unwrap_or("TCCT_III"))?;
        let mode = parse_mode(self.mode.as_deref().unwrap_or("multi"))?;
        let seed = self.seed.unwrap_or(0);
        let d = self.data;
        let data = match (d.csv, d.synth) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config("data: give either `csv` or `synth`, not both".into()))
            }
            (Some(path), None) => DataSource::Csv {
                path,
                target: d.target,
            },
            (None, kind) => DataSource::Synth {
                kind: kind
                    .as_deref()
                    .unwrap_or("sine_mix")
                    .parse()
                    .map_err(|e: tcct_core::Error| CliError::Config(e.to_string()))?,
                length: d.length.unwrap_or(2000),
                n_series: d.n_series.unwrap_or(3),
                seed: d.seed.unwrap_or(seed),
                noise: d.noise.unwrap_or(0.05),
            },
        };
        let mut train = TrainSection::default();
        if let Some(p) = self.train {
            train.epochs = p.epochs.unwrap_or(train.epochs);
            train.batch = p.batch.unwrap_or(train.batch);
            train.lr0 = p.lr0.unwrap_or(train.lr0);
            train.lr_decay = p.lr_decay.unwrap_or(train.lr_decay);
            train.patience = p.patience.unwrap_or(train.patience);
            train.clip = p.clip.or(train.clip);
        }
        let mut model = ModelSection::default();
        if let Some(p) = self.model {
            model.d_model = p.d_model.unwrap_or(model.d_model);
            model.heads = p.heads.unwrap_or(model.heads);
            model.enc_blocks = p.enc_blocks.unwrap_or(model.enc_blocks);
            model.dec_layers = p.dec_layers.unwrap_or(model.dec_layers);
            model.token_len = p.token_len.or(model.token_len);
            model.sampling_factor = p.sampling_factor.unwrap_or(model.sampling_factor);
            model.kernel = p.kernel.unwrap_or(model.kernel);
            model.time_marks = p.time_marks.unwrap_or(model.time_marks);
        }
        let spec = ExperimentSpec {
            variant,
            data,
            mode,
            input_len: self.input_len.unwrap_or(96),
            pred_len: self.pred_len.unwrap_or_else(|| vec![24]),
            repeats: self.repeats.unwrap_or(TrainConfig::default().repeats),
            seed,
            out: self.out.unwrap_or(default_out),
            split: self.split.as_deref().unwrap_or("ett").parse()?,
            train,
            model,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `TCCT_OUT_DIR` when set, else `tcct-out`.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}
