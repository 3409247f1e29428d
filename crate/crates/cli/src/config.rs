//! `key = value` run configuration shared by every subcommand.
//!
//! Keys absent from the file keep the defaults of [`RunConfig::default`].

use std::collections::HashMap;
use std::fmt::Write as _;

use ccn_core::synthcam::{GenConfig, MAX_ELEVATION_JITTER_DEG};
use ccn_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// Everything a run needs: the generator, the training schedule and the
/// number of seeds `compare-baseline` uses.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub compare_seeds: usize,
    /// Per-epoch log written next to the checkpoint.
    pub log: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { gen: GenConfig::default(), train: TrainConfig::default(), compare_seeds: 3, log: "train.log".into() }
    }
}

impl RunConfig {
    /// Cross-key checks; per-key ranges are enforced while parsing.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.gen.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.compare_seeds == 0 {
            return Err(ConfigError::Invalid("compare_seeds must be at least 1".into()));
        }
        Ok(())
    }

    /// Renders the configuration in the format [`parse_config`] reads.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let g = &self.gen;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("n_classes", t.arch.n_classes.to_string());
        kv("n_views", t.arch.n_views.to_string());
        kv("image_size", g.image_size.to_string());
        kv("samples_per_cell", g.samples_per_cell.to_string());
        kv("train_split", g.train_split.to_string());
        kv("strip_fraction", g.strip_fraction.to_string());
        kv("background_fraction", g.background_fraction.to_string());
        kv("noise_sigma", g.noise_sigma.to_string());
        kv("elevation_jitter_deg", g.elevation_jitter_deg.to_string());
        kv("data_seed", g.seed.to_string());
        kv("k", t.arch.k.to_string());
        kv("ch_in", t.arch.ch_in.to_string());
        kv("ch_out", t.arch.ch_out.to_string());
        kv("head_mode", t.arch.head_mode.to_string());
        kv("pad_mode", t.arch.pad_mode.as_str().to_string());
        kv("backbone_widths", join(&t.backbone_widths));
        kv("lr", t.lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr_decay_epochs", join(&t.lr_decay_epochs));
        kv("lr_decay_factor", t.lr_decay_factor.to_string());
        kv("w_cls", t.w_cls.to_string());
        kv("w_reg", t.w_reg.to_string());
        kv("w_view", t.w_view.to_string());
        kv("seed", t.seed.to_string());
        kv("compare_seeds", self.compare_seeds.to_string());
        kv("train_data", t.train_data.clone());
        kv("val_data", t.val_data.clone());
        kv("checkpoint", t.checkpoint.clone());
        kv("log", self.log.clone());
        out
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
}

/// Recognised keys, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "n_classes",
    "n_views",
    "image_size",
    "samples_per_cell",
    "train_split",
    "strip_fraction",
    "background_fraction",
    "noise_sigma",
    "elevation_jitter_deg",
    "data_seed",
    "k",
    "ch_in",
    "ch_out",
    "head_mode",
    "pad_mode",
    "backbone_widths",
    "lr",
    "momentum",
    "weight_decay",
    "epochs",
    "batch_size",
    "lr_decay_epochs",
    "lr_decay_factor",
    "w_cls",
    "w_reg",
    "w_view",
    "seed",
    "compare_seeds",
    "train_data",
    "val_data",
    "checkpoint",
    "log",
];

fn int(v: &str) -> Result<usize, String> {
    v.parse::<usize>().map_err(|_| format!("expected a non-negative integer, got {v:?}"))
}

fn positive(v: &str) -> Result<usize, String> {
    match int(v)? {
        0 => Err("must be at least 1".into()),
        n => Ok(n),
    }
}

// `str::parse` is locale-independent; reject the spellings it accepts
// that are not plain decimals
fn real(v: &str) -> Result<f64, String> {
    let ok = !v.is_empty() && v.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'));
    match v.parse::<f64>() {
        Ok(x) if ok && x.is_finite() => Ok(x),
        _ => Err(format!("expected a finite number, got {v:?}")),
    }
}

fn in_range(v: &str, lo: f64, hi: f64, hi_open: bool) -> Result<f64, String> {
    let x = real(v)?;
    let above = if hi_open { x >= hi } else { x > hi };
    if x < lo || above {
        let close = if hi_open { ")" } else { "]" };
        return Err(format!("must lie in [{lo}, {hi}{close}, got {x}"));
    }
    Ok(x)
}

fn list(v: &str) -> Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| int(s.trim())).collect()
}

fn apply(cfg: &mut RunConfig, key: &str, v: &str) -> Result<(), String> {
    let t = &mut cfg.train;
    let g = &mut cfg.gen;
    match key {
        "n_classes" => {
            let n = positive(v)?;
            if n >= usize::from(u16::MAX) {
                return Err(format!("must be below 65535, got {n}"));
            }
            t.arch.n_classes = n;
            g.n_classes = n;
        }
        "n_views" => {
            let n = positive(v)?;
            if n % 2 != 0 || n < 2 {
                return Err(format!("must be even and at least 2, got {n}"));
            }
            t.arch.n_views = n;
            g.n_views = n;
        }
        "image_size" => {
            let n = int(v)?;
            if !(4..=usize::from(u16::MAX)).contains(&n) {
                return Err(format!("must lie in [4, 65535], got {n}"));
            }
            g.image_size = n;
        }
        "samples_per_cell" => g.samples_per_cell = positive(v)?,
        "train_split" => g.train_split = in_range(v, 0.0, 1.0, false)?,
        "strip_fraction" => g.strip_fraction = in_range(v, 0.0, 1.0, false)?,
        "background_fraction" => g.background_fraction = in_range(v, 0.0, 1.0, true)?,
        "noise_sigma" => g.noise_sigma = in_range(v, 0.0, f64::MAX, false)?,
        "elevation_jitter_deg" => g.elevation_jitter_deg = in_range(v, 0.0, MAX_ELEVATION_JITTER_DEG, false)?,
        "data_seed" => g.seed = v.parse().map_err(|_| format!("expected an unsigned 64-bit seed, got {v:?}"))?,
        "k" => {
            let n = positive(v)?;
            if n % 2 == 0 {
                return Err(format!("must be odd, got {n}"));
            }
            t.arch.k = n;
        }
        "ch_in" => t.arch.ch_in = positive(v)?,
        "ch_out" => t.arch.ch_out = positive(v)?,
        "head_mode" => t.arch.head_mode = v.parse().map_err(|e: ccn_core::Error| e.to_string())?,
        "pad_mode" => t.arch.pad_mode = v.parse().map_err(|e: ccn_core::Error| e.to_string())?,
        "backbone_widths" => {
            let w = list(v)?;
            match <[usize; 3]>::try_from(w.as_slice()) {
                Ok(w) if !w.contains(&0) => t.backbone_widths = w,
                _ => return Err(format!("expected three positive widths, got {v:?}")),
            }
        }
        "lr" => {
            let x = real(v)?;
            if x <= 0.0 {
                return Err(format!("must be positive, got {x}"));
            }
            t.lr = x;
        }
        "momentum" => t.momentum = in_range(v, 0.0, 1.0, true)?,
        "weight_decay" => t.weight_decay = in_range(v, 0.0, f64::MAX, false)?,
        "epochs" => t.epochs = positive(v)?,
        "batch_size" => t.batch_size = positive(v)?,
        "lr_decay_epochs" => t.lr_decay_epochs = list(v)?,
        "lr_decay_factor" => {
            let x = real(v)?;
            if x <= 0.0 {
                return Err(format!("must be positive, got {x}"));
            }
            t.lr_decay_factor = x;
        }
        "w_cls" => t.w_cls = in_range(v, 0.0, f64::MAX, false)?,
        "w_reg" => t.w_reg = in_range(v, 0.0, f64::MAX, false)?,
        "w_view" => t.w_view = in_range(v, 0.0, f64::MAX, false)?,
        "seed" => t.seed = v.parse().map_err(|_| format!("expected an unsigned 64-bit seed, got {v:?}"))?,
        "compare_seeds" => cfg.compare_seeds = positive(v)?,
        "train_data" => t.train_data = v.into(),
        "val_data" => t.val_data = v.into(),
        "checkpoint" => t.checkpoint = v.into(),
        "log" => cfg.log = v.into(),
        other => return Err(format!("unknown key {other:?}")),
    }
    Ok(())
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// ignored; a key may appear once.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| ConfigError::Line { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(err(format!("expected `key = value`, got {content:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(err("missing key before `=`".into()));
        }
        if let Some(first) = seen.insert(key, line) {
            return Err(err(format!("{key} already set on line {first}")));
        }
        apply(&mut cfg, key, value).map_err(|m| err(format!("{key}: {m}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}
