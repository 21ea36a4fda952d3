use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::tasks::TaskSpec;
use crate::transformer::{AdamHyper, ModelConfig, OutputHead};

/// Everything needed to reproduce a run. Unset fields take the defaults
/// below; the resolved config is written verbatim into each run's
/// manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub mode: AttentionMode,
    pub scale_scores: bool,
    pub norm: bool,
    pub optimizer: AdamHyper,
    pub batch_size: usize,
    pub steps: u64,
    /// Evaluate every this many steps.
    pub eval_every: u64,
    pub eval_size: usize,
    /// Sample conditioning every this many steps; 0 disables sampling.
    pub instrument_every: u64,
    /// Leading evaluation instances used for conditioning samples.
    pub probe_size: usize,
    pub seed: u64,
    /// Number of consecutive seeds `compare` runs, starting at `seed`.
    pub seeds: usize,
    /// Fixed accuracy target for `compare`; by default each seed uses the
    /// standard run's final smoothed accuracy.
    pub target: Option<f64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSpec::Majority { n: 9, vocab: 4 },
            model_dim: 64,
            heads: 4,
            layers: 2,
            ff_dim: 128,
            mode: AttentionMode::PrecondOutput,
            scale_scores: true,
            norm: true,
            optimizer: AdamHyper::default(),
            batch_size: 8,
            steps: 2000,
            eval_every: 50,
            eval_size: 256,
            instrument_every: 10,
            probe_size: 8,
            seed: 0,
            seeds: 5,
            target: None,
            out: PathBuf::from("runs"),
        }
    }
}

/// Command-line overrides; `None` leaves the config value alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<AttentionMode>,
    pub steps: Option<u64>,
    pub out: Option<PathBuf>,
    pub no_norm: bool,
    pub no_scale: bool,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(mode) = o.mode {
            self.mode = mode;
        }
        if let Some(steps) = o.steps {
            self.steps = steps;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if o.no_norm {
            self.norm = false;
        }
        if o.no_scale {
            self.scale_scores = false;
        }
        self
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.task.vocab(),
            outputs: self.task.outputs(),
            max_len: self.task.max_len(),
            model_dim: self.model_dim,
            heads: self.heads,
            layers: self.layers,
            ff_dim: self.ff_dim,
            mode: self.mode,
            scale_scores: self.scale_scores,
            norm: self.norm,
            head: if self.task.per_position() {
                OutputHead::PerPosition
            } else {
                OutputHead::Pooled
            },
        }
    }

    /// Checks every field before any work starts. Errors name the field.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::Input(format!("{name}: {e}"));
        self.task.validate().map_err(|e| field("task", e))?;
        let positive: [(&str, u64); 8] = [
            ("model_dim", self.model_dim as u64),
            ("heads", self.heads as u64),
            ("layers", self.layers as u64),
            ("ff_dim", self.ff_dim as u64),
            ("batch_size", self.batch_size as u64),
            ("eval_every", self.eval_every),
            ("eval_size", self.eval_size as u64),
            ("seeds", self.seeds as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Input(format!("{name}: must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Input(format!(
                "heads: model_dim {} is not divisible by {}",
                self.model_dim, self.heads
            )));
        }
        if self.instrument_every > 0 && (self.probe_size == 0 || self.probe_size > self.eval_size) {
            return Err(Error::Input("probe_size: must be in 1..=eval_size".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Input("optimizer.lr: must be positive and finite".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Input("optimizer.beta1/beta2: must lie in [0, 1)".into()));
        }
        if o.eps.is_nan() || o.eps <= 0.0 || o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return Err(Error::Input(
                "optimizer.eps/weight_decay: eps must be positive, weight_decay non-negative".into(),
            ));
        }
        if let Some(t) = self.target {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Input("target: must lie in [0, 1]".into()));
            }
        }
        self.model().validate().map_err(|e| field("model", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"steps": 7, "task": {"name": "copy", "n": 5, "vocab": 3}}"#).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.heads, 4);
        assert_eq!(cfg.model().head, OutputHead::PerPosition);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"stepz": 7}"#).is_err());
    }

    #[test]
    fn overrides_win() {
        let cfg = ExperimentConfig::default().apply(&Overrides {
            seed: Some(9),
            mode: Some(AttentionMode::Standard),
            no_norm: true,
            ..Overrides::default()
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.mode, AttentionMode::Standard);
        assert!(!cfg.norm);
        assert!(cfg.scale_scores);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            c.validate().unwrap_err().to_string()
        };
        assert!(bad(|c| c.heads = 3).contains("heads"));
        assert!(bad(|c| c.batch_size = 0).contains("batch_size"));
        assert!(bad(|c| c.optimizer.lr = -1.0).contains("optimizer.lr"));
        assert!(bad(|c| c.task = TaskSpec::Majority { n: 8, vocab: 2 }).contains("task"));
        assert!(bad(|c| c.probe_size = 1000).contains("probe_size"));
    }
}
