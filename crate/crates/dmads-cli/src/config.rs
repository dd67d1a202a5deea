//! Flat key=value run configuration for the `train` subcommand.
//!
//! Model keys are shared with the checkpoint's canonical config; the extra
//! keys here drive the training schedule and data paths. Unknown keys are
//! rejected. Every key has a default except `data_dir`.

use std::path::PathBuf;

use dmads_core::net::{apply_model_key, ModelConfig, MODEL_KEYS};
use dmads_core::train::TrainSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub schedule: TrainSchedule,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

const RUN_KEYS: [&str; 5] = ["lr", "batch_size", "max_epochs", "eval_every", "patience"];

impl RunConfig {
    /// Parse a config file body. `data_dir` must be present; everything else
    /// falls back to its default.
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let mut model = ModelConfig::default();
        let mut lr = 1e-3f64;
        let mut batch_size = 4usize;
        let mut schedule = TrainSchedule::default();
        let mut data_dir: Option<PathBuf> = None;
        let mut out_dir = PathBuf::from("out");

        for (key, value) in dmads_core::kv::parse_kv_lines(text)? {
            let bad = |what: &str| format!("invalid {what} '{value}'");
            match key.as_str() {
                "lr" => lr = value.parse().map_err(|_| bad("lr"))?,
                "batch_size" => batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "max_epochs" => {
                    schedule.max_epochs = value.parse().map_err(|_| bad("max_epochs"))?
                }
                "eval_every" => {
                    schedule.eval_every = value.parse().map_err(|_| bad("eval_every"))?
                }
                "patience" => schedule.patience = value.parse().map_err(|_| bad("patience"))?,
                "data_dir" => data_dir = Some(PathBuf::from(&value)),
                "out_dir" => out_dir = PathBuf::from(&value),
                _ if MODEL_KEYS.contains(&key.as_str()) => {
                    apply_model_key(&mut model, &key, &value)?
                }
                _ => return Err(format!("unknown key '{key}'")),
            }
        }

        if batch_size == 0 {
            return Err("batch_size must be >= 1".to_string());
        }
        if schedule.max_epochs == 0 || schedule.eval_every == 0 {
            return Err("max_epochs and eval_every must be >= 1".to_string());
        }
        let data_dir = data_dir.ok_or_else(|| "missing required key 'data_dir'".to_string())?;
        Ok(RunConfig {
            model,
            lr,
            batch_size,
            schedule,
            data_dir,
            out_dir,
        })
    }

    /// Every key the parser accepts (model keys plus the run-only ones).
    pub fn known_keys() -> Vec<&'static str> {
        let mut keys: Vec<&'static str> = MODEL_KEYS.to_vec();
        keys.extend(RUN_KEYS);
        keys.extend(["data_dir", "out_dir"]);
        keys
    }
}
