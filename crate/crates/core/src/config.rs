//! Training configuration and its flat `key = value` file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Half-width `w` of the reference/target sampling window, in frames.
    pub window: usize,
    /// Frames per stage-2 training window.
    pub clip_frames: usize,
    pub drop_prob: f64,
    pub seed: u64,
    /// `0` disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub base_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 2000,
            batch_size: 1,
            lr: 1e-5,
            window: 12,
            clip_frames: 16,
            drop_prob: 0.05,
            seed: 0,
            checkpoint_every: 0,
            base_width: 64,
        }
    }
}

pub const KEYS: [&str; 10] = [
    "stage",
    "steps",
    "batch_size",
    "lr",
    "window",
    "clip_frames",
    "drop_prob",
    "seed",
    "checkpoint_every",
    "base_width",
];

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(format!("invalid value {v:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(bad(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.window < 1 {
            return Err(bad("window must be >= 1"));
        }
        if self.clip_frames < 2 {
            return Err(bad("clip_frames must be >= 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(bad(format!("drop_prob must be in [0, 1), got {}", self.drop_prob)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be >= 1"));
        }
        if self.base_width == 0 || self.base_width % 8 != 0 {
            return Err(bad(format!("base_width must be a positive multiple of 8, got {}", self.base_width)));
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(bad(format!("line {}: duplicate key {k}", n + 1)));
            }
            seen.push(k);
            match k {
                "stage" => cfg.stage = parse(k, v)?,
                "steps" => cfg.steps = parse(k, v)?,
                "batch_size" => cfg.batch_size = parse(k, v)?,
                "lr" => cfg.lr = parse(k, v)?,
                "window" => cfg.window = parse(k, v)?,
                "clip_frames" => cfg.clip_frames = parse(k, v)?,
                "drop_prob" => cfg.drop_prob = parse(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                "checkpoint_every" => cfg.checkpoint_every = parse(k, v)?,
                "base_width" => cfg.base_width = parse(k, v)?,
                _ => return Err(bad(format!("line {}: unknown key {k}", n + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "stage = {}\nsteps = {}\nbatch_size = {}\nlr = {}\nwindow = {}\nclip_frames = {}\ndrop_prob = {}\nseed = {}\ncheckpoint_every = {}\nbase_width = {}\n",
            self.stage,
            self.steps,
            self.batch_size,
            self.lr,
            self.window,
            self.clip_frames,
            self.drop_prob,
            self.seed,
            self.checkpoint_every,
            self.base_width
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            stage: 2,
            lr: 3e-4,
            seed: 9,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        for k in KEYS {
            assert!(cfg.to_text().contains(&format!("{k} = ")));
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("colour = 3").is_err());
        assert!(TrainConfig::parse("lr = -1").is_err());
        assert!(TrainConfig::parse("lr = 1e-3\nlr = 1e-4").is_err());
        assert!(TrainConfig::parse("window = 0").is_err());
        assert!(TrainConfig::parse("steps").is_err());
        let c = TrainConfig::parse("# comment\n\nsteps = 5 # trailing\n").unwrap();
        assert_eq!(c.steps, 5);
        assert_eq!(c.lr, 1e-5);
    }
}
