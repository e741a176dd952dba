use std::fmt::Write as _;
use std::path::Path;

use crate::model::{LossWeights, ModelConfig};

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    GeneGan,
    /// Double-swap training: crossbreeds are swapped back into grandchildren.
    Stacked,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::GeneGan => "genegan",
            Mode::Stacked => "stacked",
        }
    }
}

/// Run configuration. The text form is one `key = value` per line with `#`
/// comments; keys are the field names below.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr: f64,
    pub momentum: f64,
    pub rmsprop_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub image_size: usize,
    pub w_rec: f64,
    pub w_gan: f64,
    pub w_null: f64,
    pub w_par: f64,
    pub d_steps_per_g_step: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    pub parallelogram_enabled: bool,
    pub base_width: usize,
    pub code_background: usize,
    pub code_object: usize,
    pub leaky_slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        Self {
            mode: Mode::GeneGan,
            lr: 5e-5,
            momentum: 0.0,
            rmsprop_decay: 0.9,
            batch_size: 16,
            steps: 10_000,
            seed: 0,
            image_size: m.image_size,
            w_rec: w.rec,
            w_gan: w.gan,
            w_null: w.null,
            w_par: w.par,
            d_steps_per_g_step: 1,
            checkpoint_every: 0,
            parallelogram_enabled: true,
            base_width: m.base_width,
            code_background: m.code_background,
            code_object: m.code_object,
            leaky_slope: m.leaky_slope,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| TrainError::Config {
        line,
        msg: format!("invalid value {value:?} for {key}"),
    })
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            base_width: self.base_width,
            code_background: self.code_background,
            code_object: self.code_object,
            leaky_slope: self.leaky_slope,
        }
    }

    /// Loss weights in effect; a disabled parallelogram term has weight 0.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            rec: self.w_rec,
            gan: self.w_gan,
            null: self.w_null,
            par: if self.parallelogram_enabled { self.w_par } else { 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config { line: 0, msg });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return bad(format!("rmsprop_decay must lie in [0,1), got {}", self.rmsprop_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if self.d_steps_per_g_step == 0 {
            return bad("d_steps_per_g_step must be at least 1".into());
        }
        for (k, w) in [("w_rec", self.w_rec), ("w_gan", self.w_gan), ("w_null", self.w_null), ("w_par", self.w_par)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{k} must be non-negative, got {w}"));
            }
        }
        self.model().validate().map_err(|e| TrainError::Config {
            line: 0,
            msg: e.to_string(),
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| TrainError::Config {
                line,
                msg: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(TrainError::Config {
                    line,
                    msg: format!("duplicate key {key}"),
                });
            }
            self.set(key, value, line)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "mode" => {
                self.mode = match value {
                    "genegan" => Mode::GeneGan,
                    "stacked" => Mode::Stacked,
                    _ => {
                        return Err(TrainError::Config {
                            line,
                            msg: format!("mode must be genegan or stacked, got {value:?}"),
                        })
                    }
                }
            }
            "lr" => self.lr = parse_num(key, value, line)?,
            "momentum" => self.momentum = parse_num(key, value, line)?,
            "rmsprop_decay" => self.rmsprop_decay = parse_num(key, value, line)?,
            "batch_size" => self.batch_size = parse_num(key, value, line)?,
            "steps" => self.steps = parse_num(key, value, line)?,
            "seed" => self.seed = parse_num(key, value, line)?,
            "image_size" => self.image_size = parse_num(key, value, line)?,
            "w_rec" => self.w_rec = parse_num(key, value, line)?,
            "w_gan" => self.w_gan = parse_num(key, value, line)?,
            "w_null" => self.w_null = parse_num(key, value, line)?,
            "w_par" => self.w_par = parse_num(key, value, line)?,
            "d_steps_per_g_step" => self.d_steps_per_g_step = parse_num(key, value, line)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value, line)?,
            "parallelogram_enabled" => self.parallelogram_enabled = parse_num(key, value, line)?,
            "base_width" => self.base_width = parse_num(key, value, line)?,
            "code_background" => self.code_background = parse_num(key, value, line)?,
            "code_object" => self.code_object = parse_num(key, value, line)?,
            "leaky_slope" => self.leaky_slope = parse_num(key, value, line)?,
            _ => return Err(TrainError::UnknownKey { line, key: key.to_string() }),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", self.mode.name().into());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("rmsprop_decay", self.rmsprop_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("seed", self.seed.to_string());
        kv("image_size", self.image_size.to_string());
        kv("w_rec", self.w_rec.to_string());
        kv("w_gan", self.w_gan.to_string());
        kv("w_null", self.w_null.to_string());
        kv("w_par", self.w_par.to_string());
        kv("d_steps_per_g_step", self.d_steps_per_g_step.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("parallelogram_enabled", self.parallelogram_enabled.to_string());
        kv("base_width", self.base_width.to_string());
        kv("code_background", self.code_background.to_string());
        kv("code_object", self.code_object.to_string());
        kv("leaky_slope", self.leaky_slope.to_string());
        s
    }
}
