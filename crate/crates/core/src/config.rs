//! Run configuration: plain-text `key = value` files with `[section]`
//! headers, strict unknown-key rejection, and a canonical serialization used
//! verbatim inside checkpoints.

use crate::error::{Error, Result};
use crate::layout::ModelVariant;
use crate::model::ModelConfig;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch: usize,
    /// stage-1 initial learning rate; stage 2 starts at a tenth of it
    pub lr: f64,
    pub weight_decay: f64,
    /// fraction of steps after which the rate drops by 10x
    pub decay_point: f64,
    pub sampling: SamplingMode,
    pub flip_p: f64,
    pub brightness_lo: f64,
    pub brightness_hi: f64,
    /// search-crop center jitter as a fraction of the crop side
    pub center_jitter: f64,
    /// log2 scale jitter half-range for the search crop
    pub scale_jitter: f64,
    pub clip_norm: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            stage1_steps: 8000,
            stage2_steps: 2000,
            batch: 16,
            lr: 4e-4,
            weight_decay: 1e-4,
            decay_point: 0.8,
            sampling: SamplingMode::Consecutive,
            flip_p: 0.5,
            brightness_lo: 0.8,
            brightness_hi: 1.2,
            center_jitter: 0.2,
            scale_jitter: 0.25,
            clip_norm: 0.1,
        }
    }
}

impl TrainSettings {
    pub fn stage2_lr(&self) -> f64 {
        self.lr / 10.0
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    Random,
    Consecutive,
}

impl SamplingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplingMode::Random),
            "consecutive" => Ok(SamplingMode::Consecutive),
            other => Err(Error::config(format!(
                "unknown sampling mode '{other}' (expected random|consecutive)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplingMode::Random => "random",
            SamplingMode::Consecutive => "consecutive",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub frames: usize,
    pub frame_size: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            train_sequences: 200,
            eval_sequences: 40,
            frames: 40,
            frame_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackSettings {
    pub template_factor: f64,
    pub search_factor: f64,
    pub window: bool,
}

impl Default for TrackSettings {
    fn default() -> Self {
        TrackSettings {
            template_factor: 2.0,
            search_factor: 4.0,
            window: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PathSettings {
    pub corpus: Option<String>,
    pub checkpoint: Option<String>,
    pub output: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
    pub track: TrackSettings,
    pub paths: PathSettings,
    pub seed: u64,
    pub workers: usize,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            data: DataSettings::default(),
            track: TrackSettings::default(),
            paths: PathSettings::default(),
            seed: 0,
            workers: 0,
            deterministic: false,
        }
    }
}

impl RunConfig {
    /// Named presets; "desk" is the default geometry, "paper-256" the
    /// full-scale published one.
    pub fn preset(name: &str) -> Result<RunConfig> {
        match name {
            "desk" => Ok(RunConfig::default()),
            "paper-256" => Ok(RunConfig {
                model: ModelConfig::paper_256(),
                ..RunConfig::default()
            }),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected desk|paper-256)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let c = |ok: bool, name: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("constraint violated: {name}")))
            }
        };
        c(self.train.batch >= 1, "train.batch >= 1")?;
        c(self.train.lr > 0.0, "train.lr > 0")?;
        c(
            (0.0..=1.0).contains(&self.train.decay_point),
            "train.decay_point in [0,1]",
        )?;
        c(
            self.train.brightness_lo > 0.0 && self.train.brightness_hi >= self.train.brightness_lo,
            "train.brightness range ordered",
        )?;
        c(self.data.frames >= 2, "data.frames >= 2")?;
        c(self.data.frame_size >= 16, "data.frame_size >= 16")?;
        c(self.track.template_factor > 0.0, "track.template_factor > 0")?;
        c(self.track.search_factor > 0.0, "track.search_factor > 0")?;
        Ok(())
    }

    /// Canonical text form: every key in fixed order. Floats use Rust's
    /// shortest round-trip formatting, so parse(to_text) is lossless.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let k = &self.track;
        let mut s = String::new();
        s.push_str("[model]\n");
        s.push_str(&format!("template_size = {}\n", m.template_size));
        s.push_str(&format!("search_size = {}\n", m.search_size));
        s.push_str(&format!("patch = {}\n", m.patch));
        s.push_str(&format!("dim = {}\n", m.dim));
        s.push_str(&format!("heads = {}\n", m.heads));
        s.push_str(&format!("depth = {}\n", m.depth));
        s.push_str(&format!("head_channels = {}\n", m.head_channels));
        s.push_str(&format!("variant = {}\n", m.variant));
        s.push_str(&format!("vt = {}\n", m.vt_enabled));
        s.push_str(&format!("ln_eps = {}\n", m.ln_eps));
        s.push_str(&format!("bn_eps = {}\n", m.bn_eps));
        s.push_str(&format!("bn_momentum = {}\n", m.bn_momentum));
        s.push_str(&format!("sigma_floor = {}\n", m.sigma_floor));
        s.push_str(&format!("sigma_divisor = {}\n", m.sigma_divisor));
        s.push_str(&format!(
            "norm_mean = {},{},{}\n",
            m.norm_mean[0], m.norm_mean[1], m.norm_mean[2]
        ));
        s.push_str(&format!(
            "norm_std = {},{},{}\n",
            m.norm_std[0], m.norm_std[1], m.norm_std[2]
        ));
        s.push_str("\n[train]\n");
        s.push_str(&format!("stage1_steps = {}\n", t.stage1_steps));
        s.push_str(&format!("stage2_steps = {}\n", t.stage2_steps));
        s.push_str(&format!("batch = {}\n", t.batch));
        s.push_str(&format!("lr = {}\n", t.lr));
        s.push_str(&format!("weight_decay = {}\n", t.weight_decay));
        s.push_str(&format!("decay_point = {}\n", t.decay_point));
        s.push_str(&format!("sampling = {}\n", t.sampling.name()));
        s.push_str(&format!("flip_p = {}\n", t.flip_p));
        s.push_str(&format!("brightness_lo = {}\n", t.brightness_lo));
        s.push_str(&format!("brightness_hi = {}\n", t.brightness_hi));
        s.push_str(&format!("center_jitter = {}\n", t.center_jitter));
        s.push_str(&format!("scale_jitter = {}\n", t.scale_jitter));
        s.push_str(&format!("clip_norm = {}\n", t.clip_norm));
        s.push_str("\n[data]\n");
        s.push_str(&format!("train_sequences = {}\n", d.train_sequences));
        s.push_str(&format!("eval_sequences = {}\n", d.eval_sequences));
        s.push_str(&format!("frames = {}\n", d.frames));
        s.push_str(&format!("frame_size = {}\n", d.frame_size));
        s.push_str("\n[track]\n");
        s.push_str(&format!("template_factor = {}\n", k.template_factor));
        s.push_str(&format!("search_factor = {}\n", k.search_factor));
        s.push_str(&format!("window = {}\n", k.window));
        s.push_str("\n[run]\n");
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("workers = {}\n", self.workers));
        s.push_str(&format!("deterministic = {}\n", self.deterministic));
        if self.paths != PathSettings::default() {
            s.push_str("\n[paths]\n");
            if let Some(p) = &self.paths.corpus {
                s.push_str(&format!("corpus = {p}\n"));
            }
            if let Some(p) = &self.paths.checkpoint {
                s.push_str(&format!("checkpoint = {p}\n"));
            }
            if let Some(p) = &self.paths.output {
                s.push_str(&format!("output = {p}\n"));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                match section.as_str() {
                    "model" | "train" | "data" | "track" | "run" | "paths" => {}
                    other => {
                        return Err(Error::config(format!(
                            "line {}: unknown section [{other}]",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value).map_err(|e| {
                Error::config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("cannot parse '{v}' for key {key}")))
        }
        fn triple(key: &str, v: &str) -> Result<[f64; 3]> {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::config(format!("{key} needs three comma values")));
            }
            Ok([
                num::<f64>(key, parts[0])?,
                num::<f64>(key, parts[1])?,
                num::<f64>(key, parts[2])?,
            ])
        }
        match (section, key) {
            ("model", "template_size") => self.model.template_size = num(key, value)?,
            ("model", "search_size") => self.model.search_size = num(key, value)?,
            ("model", "patch") => self.model.patch = num(key, value)?,
            ("model", "dim") => self.model.dim = num(key, value)?,
            ("model", "heads") => self.model.heads = num(key, value)?,
            ("model", "depth") => self.model.depth = num(key, value)?,
            ("model", "head_channels") => self.model.head_channels = num(key, value)?,
            ("model", "variant") => self.model.variant = ModelVariant::parse(value)?,
            ("model", "vt") => self.model.vt_enabled = num(key, value)?,
            ("model", "ln_eps") => self.model.ln_eps = num(key, value)?,
            ("model", "bn_eps") => self.model.bn_eps = num(key, value)?,
            ("model", "bn_momentum") => self.model.bn_momentum = num(key, value)?,
            ("model", "sigma_floor") => self.model.sigma_floor = num(key, value)?,
            ("model", "sigma_divisor") => self.model.sigma_divisor = num(key, value)?,
            ("model", "norm_mean") => self.model.norm_mean = triple(key, value)?,
            ("model", "norm_std") => self.model.norm_std = triple(key, value)?,
            ("train", "stage1_steps") => self.train.stage1_steps = num(key, value)?,
            ("train", "stage2_steps") => self.train.stage2_steps = num(key, value)?,
            ("train", "batch") => self.train.batch = num(key, value)?,
            ("train", "lr") => self.train.lr = num(key, value)?,
            ("train", "weight_decay") => self.train.weight_decay = num(key, value)?,
            ("train", "decay_point") => self.train.decay_point = num(key, value)?,
            ("train", "sampling") => self.train.sampling = SamplingMode::parse(value)?,
            ("train", "flip_p") => self.train.flip_p = num(key, value)?,
            ("train", "brightness_lo") => self.train.brightness_lo = num(key, value)?,
            ("train", "brightness_hi") => self.train.brightness_hi = num(key, value)?,
            ("train", "center_jitter") => self.train.center_jitter = num(key, value)?,
            ("train", "scale_jitter") => self.train.scale_jitter = num(key, value)?,
            ("train", "clip_norm") => self.train.clip_norm = num(key, value)?,
            ("data", "train_sequences") => self.data.train_sequences = num(key, value)?,
            ("data", "eval_sequences") => self.data.eval_sequences = num(key, value)?,
            ("data", "frames") => self.data.frames = num(key, value)?,
            ("data", "frame_size") => self.data.frame_size = num(key, value)?,
            ("track", "template_factor") => self.track.template_factor = num(key, value)?,
            ("track", "search_factor") => self.track.search_factor = num(key, value)?,
            ("track", "window") => self.track.window = num(key, value)?,
            ("run", "seed") => self.seed = num(key, value)?,
            ("run", "workers") => self.workers = num(key, value)?,
            ("run", "deterministic") => self.deterministic = num(key, value)?,
            ("paths", "corpus") => self.paths.corpus = Some(value.to_string()),
            ("paths", "checkpoint") => self.paths.checkpoint = Some(value.to_string()),
            ("paths", "output") => self.paths.output = Some(value.to_string()),
            (sec, k) => {
                return Err(Error::config(format!("unknown key '{k}' in section [{sec}]")))
            }
        }
        Ok(())
    }
}

/// Parse a config file; an empty file yields the full defaults.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::from_text("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.template_size, 32);
        assert_eq!(cfg.train.stage1_steps, 8000);
    }

    #[test]
    fn canonical_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.model.dim = 48;
        cfg.model.heads = 4;
        cfg.model.head_channels = 24;
        cfg.train.lr = 3.5e-4;
        cfg.seed = 99;
        cfg.paths.corpus = Some("/tmp/x".into());
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn paper_preset_by_name() {
        let cfg = RunConfig::preset("paper-256").unwrap();
        assert_eq!(cfg.model.template_size, 128);
        assert_eq!(cfg.model.search_size, 256);
        assert_eq!(cfg.model.patch, 16);
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_text("[model]\nnot_a_key = 3\n").unwrap_err();
        assert!(e.to_string().contains("unknown key"));
        let e2 = RunConfig::from_text("[nope]\n").unwrap_err();
        assert!(e2.to_string().contains("unknown section"));
    }

    #[test]
    fn geometry_violation_names_constraint() {
        let e = RunConfig::from_text("[model]\ntemplate_size = 33\n").unwrap_err();
        assert!(
            e.to_string().contains("template_size divisible by patch"),
            "got: {e}"
        );
    }

    #[test]
    fn stage2_lr_is_a_tenth() {
        let cfg = RunConfig::default();
        assert!((cfg.train.stage2_lr() - 4e-5).abs() < 1e-18);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::from_text("# hello\n\n[run]\nseed = 7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }
}
