//! Plain-text `key=value` run configuration.
//!
//! One setting per line, `#` starts a comment, unknown keys are rejected.
//! The same keys are accepted as `--set key=value` overrides on the command
//! line. A single `seed` drives data generation, splits and training.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bagdata::SynthSpec;
use crate::error::{Error, Result};
use crate::model::HeadKind;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            repeats: 1,
        }
    }
}

pub const KEYS: &[&str] = &[
    "task",
    "seed",
    "repeats",
    "base_lr",
    "beta1",
    "beta2",
    "weight_decay",
    "epochs",
    "warmup_epochs",
    "patience",
    "batch_size",
    "drop_alpha",
    "shuffle",
    "cox_lambda",
    "cox_group",
    "grad_clip",
    "inner",
    "state",
    "n_slides",
    "scales",
    "ratio",
    "coarse_rows",
    "coarse_cols",
    "dim",
    "sigma",
    "amplitude",
    "coarse_signals",
    "fine_signals",
    "censoring",
    "gamma",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value for {key}: {v:?} (expected true or false)"))),
    }
}

impl RunConfig {
    pub fn task(&self) -> HeadKind {
        self.synth.task
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let s = &mut self.synth;
        match key.trim() {
            "task" => s.task = v.parse()?,
            "seed" => {
                t.seed = num(key, v)?;
                s.seed = t.seed;
            }
            "repeats" => self.repeats = num(key, v)?,
            "base_lr" => t.base_lr = num(key, v)?,
            "beta1" => t.beta1 = num(key, v)?,
            "beta2" => t.beta2 = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "warmup_epochs" => t.warmup_epochs = num(key, v)?,
            "patience" => t.patience = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "drop_alpha" => t.drop_alpha = num(key, v)?,
            "shuffle" => t.shuffle = boolean(key, v)?,
            "cox_lambda" => t.cox_lambda = num(key, v)?,
            "cox_group" => t.cox_group = num(key, v)?,
            "grad_clip" => t.grad_clip = num(key, v)?,
            "inner" => t.inner = if v == "auto" { None } else { Some(num(key, v)?) },
            "state" => t.state = num(key, v)?,
            "n_slides" => s.n_slides = num(key, v)?,
            "scales" => s.scales = num(key, v)?,
            "ratio" => s.ratio = num(key, v)?,
            "coarse_rows" => s.coarse_rows = num(key, v)?,
            "coarse_cols" => s.coarse_cols = num(key, v)?,
            "dim" => s.dim = num(key, v)?,
            "sigma" => s.sigma = num(key, v)?,
            "amplitude" => s.amplitude = num(key, v)?,
            "coarse_signals" => s.coarse_signals = num(key, v)?,
            "fine_signals" => s.fine_signals = num(key, v)?,
            "censoring" => s.censoring = num(key, v)?,
            "gamma" => s.gamma = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Parses config text on top of the defaults; `origin` names the source
    /// in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let located = |e: Error| Error::Config(format!("{origin}:{}: {e}", i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| located(Error::Config(format!("expected key=value, found {line:?}"))))?;
            cfg.set(k, v).map_err(located)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form [`RunConfig::parse`] reads back.
    pub fn resolved(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("task", s.task.name().into());
        put("seed", t.seed.to_string());
        put("repeats", self.repeats.to_string());
        put("base_lr", t.base_lr.to_string());
        put("beta1", t.beta1.to_string());
        put("beta2", t.beta2.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("epochs", t.epochs.to_string());
        put("warmup_epochs", t.warmup_epochs.to_string());
        put("patience", t.patience.to_string());
        put("batch_size", t.batch_size.to_string());
        put("drop_alpha", t.drop_alpha.to_string());
        put("shuffle", t.shuffle.to_string());
        put("cox_lambda", t.cox_lambda.to_string());
        put("cox_group", t.cox_group.to_string());
        put("grad_clip", t.grad_clip.to_string());
        put("inner", t.inner.map_or("auto".into(), |e| e.to_string()));
        put("state", t.state.to_string());
        put("n_slides", s.n_slides.to_string());
        put("scales", s.scales.to_string());
        put("ratio", s.ratio.to_string());
        put("coarse_rows", s.coarse_rows.to_string());
        put("coarse_cols", s.coarse_cols.to_string());
        put("dim", s.dim.to_string());
        put("sigma", s.sigma.to_string());
        put("amplitude", s.amplitude.to_string());
        put("coarse_signals", s.coarse_signals.to_string());
        put("fine_signals", s.fine_signals.to_string());
        put("censoring", s.censoring.to_string());
        put("gamma", s.gamma.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_with_comments_and_overrides() {
        let text = "# run\nbase_lr = 1e-3  # faster\n\nseed=4\ntask=survival\ninner=32\n";
        let mut cfg = RunConfig::parse(text, "c.txt").unwrap();
        assert_eq!(cfg.train.base_lr, 1e-3);
        assert_eq!(cfg.seed(), 4);
        assert_eq!(cfg.synth.seed, 4);
        assert_eq!(cfg.task(), HeadKind::Survival);
        assert_eq!(cfg.train.inner, Some(32));
        cfg.apply_override("epochs=7").unwrap();
        assert_eq!(cfg.train.epochs, 7);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        let e = RunConfig::parse("lr=1\n", "c.txt").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("c.txt:1")), "{e}");
        assert!(RunConfig::parse("epochs=many", "c").is_err());
        assert!(RunConfig::parse("just text", "c").is_err());
        assert!(RunConfig::default().apply_override("epochs").is_err());
        assert_eq!(RunConfig::default().validate().ok(), Some(()));
        let mut c = RunConfig::default();
        c.set("drop_alpha", "1.0").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("amplitude=2.5").unwrap();
        cfg.apply_override("shuffle=false").unwrap();
        let text = cfg.resolved();
        assert_eq!(RunConfig::parse(&text, "r").unwrap(), cfg);
        assert_eq!(text.lines().count(), KEYS.len());
        for (line, key) in text.lines().zip(KEYS) {
            assert!(line.starts_with(&format!("{key}=")));
        }
    }

    #[test]
    fn missing_file_names_path() {
        let e = RunConfig::load(Path::new("/nonexistent/run.cfg")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/run.cfg"));
        assert_eq!(e.exit_code(), 2);
    }
}
