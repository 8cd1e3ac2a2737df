//! Stage configuration files: one `key = value` per line, `#` comments.
//! Every [`TrainConfig`] field has a key; model hyper-parameters use a
//! `model.` prefix. Vocabulary size and input dimension come from the data.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::MaskConfig;
use crate::nnet::{ModelConfig, NormPlacement};
use crate::train::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Acoustic,
    Linguistic,
    Posttrain,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::Acoustic => 0,
            Stage::Linguistic => 1,
            Stage::Posttrain => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Stage::Acoustic),
            1 => Some(Stage::Linguistic),
            2 => Some(Stage::Posttrain),
            _ => None,
        }
    }

    pub fn is_supervised(self) -> bool {
        self != Stage::Acoustic
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Acoustic => "acoustic",
            Stage::Linguistic => "linguistic",
            Stage::Posttrain => "posttrain",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acoustic" => Ok(Stage::Acoustic),
            "linguistic" => Ok(Stage::Linguistic),
            "posttrain" => Ok(Stage::Posttrain),
            other => Err(Error::invalid(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub max_steps: usize,
    pub adam: AdamConfig,
    pub warmup_steps: usize,
    pub lr_scale: f64,
    pub label_smoothing: f64,
    pub mask: MaskConfig,
    pub avg_last_n: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Validation cadence in steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    /// Global-norm gradient clipping threshold; 0 disables clipping.
    pub grad_clip: f64,
    pub freeze_encoder: bool,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            batch_size: 16,
            max_steps: 1000,
            adam: AdamConfig::default(),
            warmup_steps: 400,
            lr_scale: 1.0,
            label_smoothing: 0.1,
            mask: MaskConfig::default(),
            avg_last_n: 20,
            seed: 0,
            checkpoint_every: 50,
            log_every: 10,
            eval_every: 0,
            grad_clip: 0.0,
            freeze_encoder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_steps", self.max_steps),
            ("warmup_steps", self.warmup_steps),
            ("avg_last_n", self.avg_last_n),
            ("checkpoint_every", self.checkpoint_every),
            ("log_every", self.log_every),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{k} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        self.mask.validate()
    }
}

/// Default model hyper-parameters for configuration files: a small
/// post-norm Transformer suitable for CPU runs.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model: 32,
        heads: 4,
        d_ff: 64,
        vocab_size: 1,
        input_dim: 1,
        dropout: 0.1,
        norm: NormPlacement::Post,
        positional: true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfigFile {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean {value:?} for {key}"))),
    }
}

impl StageConfigFile {
    pub fn new(stage: Stage) -> Self {
        Self { train: TrainConfig::new(stage), model: desk_model() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "stage" => t.stage = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "adam_beta1" => t.adam.beta1 = parse(key, value)?,
            "adam_beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "lr_scale" => t.lr_scale = parse(key, value)?,
            "label_smoothing" => t.label_smoothing = parse(key, value)?,
            "mask_k" => t.mask.k = parse(key, value)?,
            "mask_w" => t.mask.w = parse(key, value)?,
            "mask_zero_prob" => t.mask.zero_prob = parse(key, value)?,
            "avg_last_n" => t.avg_last_n = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "log_every" => t.log_every = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "freeze_encoder" => t.freeze_encoder = parse_bool(key, value)?,
            "model.enc_layers" => m.enc_layers = parse(key, value)?,
            "model.dec_layers" => m.dec_layers = parse(key, value)?,
            "model.d_model" => m.d_model = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.d_ff" => m.d_ff = parse(key, value)?,
            "model.dropout" => m.dropout = parse(key, value)?,
            "model.positional" => m.positional = parse_bool(key, value)?,
            "model.norm" => {
                m.norm = match value {
                    "post" => NormPlacement::Post,
                    "pre" => NormPlacement::Pre,
                    _ => return Err(Error::invalid(format!("model.norm must be post or pre, got {value:?}"))),
                }
            }
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: format!("{origin}:{}", i + 1),
                msg: "expected key = value".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Format {
                path: format!("{origin}:{}", i + 1),
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::new(Stage::Acoustic);
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let norm = match m.norm {
            NormPlacement::Post => "post",
            NormPlacement::Pre => "pre",
        };
        format!(
            "stage = {}\nbatch_size = {}\nmax_steps = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {:e}\n\
             warmup_steps = {}\nlr_scale = {}\nlabel_smoothing = {}\nmask_k = {}\nmask_w = {}\n\
             mask_zero_prob = {}\navg_last_n = {}\nseed = {}\ncheckpoint_every = {}\nlog_every = {}\n\
             eval_every = {}\ngrad_clip = {}\nfreeze_encoder = {}\nmodel.enc_layers = {}\n\
             model.dec_layers = {}\nmodel.d_model = {}\nmodel.heads = {}\nmodel.d_ff = {}\n\
             model.dropout = {}\nmodel.norm = {}\nmodel.positional = {}\n",
            t.stage,
            t.batch_size,
            t.max_steps,
            t.adam.beta1,
            t.adam.beta2,
            t.adam.eps,
            t.warmup_steps,
            t.lr_scale,
            t.label_smoothing,
            t.mask.k,
            t.mask.w,
            t.mask.zero_prob,
            t.avg_last_n,
            t.seed,
            t.checkpoint_every,
            t.log_every,
            t.eval_every,
            t.grad_clip,
            t.freeze_encoder,
            m.enc_layers,
            m.dec_layers,
            m.d_model,
            m.heads,
            m.d_ff,
            m.dropout,
            norm,
            m.positional,
        )
    }
}
