//! Run configuration: a TOML file layered under `--set key=value` overrides.

use std::path::Path;

use ftmssm_core::denoiser::DenoiserConfig;
use ftmssm_core::diffusion::{SamplerConfig, ScheduleConfig};
use ftmssm_core::synthetic_motion::CorpusConfig;
use ftmssm_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub inference_steps: usize,
    pub guidance_scale: Option<f64>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { inference_steps: 50, guidance_scale: None }
    }
}

impl SamplerSection {
    pub fn with_seed(&self, seed: u64) -> SamplerConfig {
        SamplerConfig { inference_steps: self.inference_steps, guidance_scale: self.guidance_scale, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// R-Precision pool size P.
    pub pool_size: usize,
    /// Diversity subset size S.
    pub diversity_subset: usize,
    /// Distinct texts used for MModality.
    pub mmodality_texts: usize,
    /// Generations per MModality text.
    pub mmodality_repeats: usize,
    pub mmodality_pairs: usize,
    pub feature_seed: u64,
    /// Seed of the reference corpus the text-to-feature map is fitted on.
    pub evaluator_seed: u64,
    pub text_map_ridge: f64,
    pub metric_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pool_size: 8,
            diversity_subset: 32,
            mmodality_texts: 11,
            mmodality_repeats: 4,
            mmodality_pairs: 8,
            feature_seed: 7,
            evaluator_seed: 1_000_003,
            text_map_ridge: 1e-3,
            metric_seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { rel_tol: 1e-4, abs_tol: 1e-8, seed: 1 }
    }
}

/// Everything a command needs. `seed` is the root for whichever stochastic
/// step the command performs: corpus rendering, initialization and batch
/// draws, or sampling noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerSection,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerSection::default(),
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), CliError> {
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::usage(format!("empty key in `{path}`")))?;
    let mut cur = table;
    for k in keys {
        let slot = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot.as_table_mut().ok_or_else(|| CliError::usage(format!("`{k}` in `{path}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (if any), applies `KEY=VALUE` overrides in order, then `seed`.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, raw) =
                o.split_once('=').ok_or_else(|| CliError::usage(format!("override `{o}` is not KEY=VALUE")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        if let Some(s) = seed {
            let s = i64::try_from(s).map_err(|_| CliError::usage("seed must fit in a signed 64-bit integer"))?;
            table.insert("seed".into(), toml::Value::Integer(s));
        }
        let cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.train.validate()?;
        if self.model.timesteps != self.schedule.timesteps {
            return Err(CliError::usage(format!(
                "model.timesteps = {} but schedule.timesteps = {}",
                self.model.timesteps, self.schedule.timesteps
            )));
        }
        let e = &self.eval;
        if e.pool_size < 2 || e.diversity_subset == 0 || e.mmodality_repeats < 2 || e.mmodality_pairs == 0 {
            return Err(CliError::usage("eval needs pool_size >= 2, diversity_subset >= 1, mmodality_repeats >= 2, mmodality_pairs >= 1"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let set = vec![
            "train.steps=5".to_string(),
            "train.steps = 6".to_string(),
            "corpus.counts.walk=3".to_string(),
            "eval.pool_size=4".to_string(),
        ];
        let cfg = RunConfig::load(None, &set, Some(11)).unwrap();
        assert_eq!(cfg.train.steps, 6);
        assert_eq!(cfg.corpus.counts.get("walk"), Some(&3));
        assert_eq!(cfg.eval.pool_size, 4);
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        for bad in ["train.stepz=5", "train.steps=-1", "model", "model.channels=0"] {
            let err = RunConfig::load(None, &[bad.to_string()], None).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}: {err}");
        }
    }
}
