//! Flat JSON run configuration.
//!
//! One JSON object carries the model keys, the training keys and the
//! command options side by side:
//!
//! ```json
//! { "image_size": 32, "skip_connections": 1, "steps": 200, "reps": 5 }
//! ```
//!
//! Every unknown key and every invalid value is reported, not just the
//! first one.

use std::path::Path;

use daefusion_core::training::TrainConfig;
use daefusion_core::ModelConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bench::Kernel;
use crate::CliError;

/// Floating-point type for training and benchmarks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Options {
    pub precision: Precision,
    pub kernels: Vec<Kernel>,
    pub n_sweep: Vec<usize>,
    pub d: usize,
    pub reps: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            kernels: vec![Kernel::Standard, Kernel::Efficient, Kernel::Transpose],
            n_sweep: vec![256, 512, 1024, 2048, 4096],
            d: 64,
            reps: 5,
        }
    }
}

impl Options {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.kernels.is_empty() {
            out.push("kernels: at least one kernel is required".to_string());
        }
        if self.n_sweep.is_empty() || self.n_sweep.contains(&0) {
            out.push("n_sweep: token counts must be positive and non-empty".to_string());
        }
        if self.n_sweep.windows(2).any(|w| w[0] >= w[1]) {
            out.push(format!("n_sweep: must be strictly ascending, got {:?}", self.n_sweep));
        }
        if self.d == 0 {
            out.push("d: must be positive".to_string());
        }
        if self.reps < 3 {
            out.push(format!("reps: at least 3 repetitions are required, got {}", self.reps));
        }
        out
    }
}

/// Everything a command needs, validated.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub options: Options,
    /// Whether the document set `seed` explicitly.
    #[serde(skip)]
    pub explicit_seed: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::toy(), train: TrainConfig::default(), options: Options::default(), explicit_seed: false }
    }
}

fn object_of<T: Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value).expect("config types serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config types are structs"),
    }
}

/// Deserializes `keys` laid over the defaults in `base`, checking each key
/// on its own first so that every bad value is named.
fn section<T: DeserializeOwned>(base: &Map<String, Value>, keys: &Map<String, Value>, problems: &mut Vec<String>) -> Option<T> {
    let before = problems.len();
    for (k, v) in keys {
        let mut single = base.clone();
        single.insert(k.clone(), v.clone());
        if let Err(e) = serde_json::from_value::<T>(Value::Object(single)) {
            problems.push(format!("{k}: {e}"));
        }
    }
    if problems.len() > before {
        return None;
    }
    let mut merged = base.clone();
    merged.extend(keys.clone());
    match serde_json::from_value(Value::Object(merged)) {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(e.to_string());
            None
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| CliError::Config(vec![format!("invalid JSON: {e}")]))?;
        let Value::Object(doc) = doc else {
            return Err(CliError::Config(vec!["the configuration must be a JSON object".into()]));
        };
        let defaults = Self::default();
        let bases = [object_of(&defaults.model), object_of(&defaults.train), object_of(&defaults.options)];
        let mut parts = [Map::new(), Map::new(), Map::new()];
        let mut problems = Vec::new();
        for (k, v) in doc {
            match bases.iter().position(|b| b.contains_key(&k)) {
                Some(i) => {
                    parts[i].insert(k, v);
                }
                None => problems.push(format!("unknown key `{k}`")),
            }
        }
        let explicit_seed = parts[0].contains_key("seed");
        let model: Option<ModelConfig> = section(&bases[0], &parts[0], &mut problems);
        let train: Option<TrainConfig> = section(&bases[1], &parts[1], &mut problems);
        let options: Option<Options> = section(&bases[2], &parts[2], &mut problems);
        if let (Some(m), Some(t), Some(o)) = (&model, &train, &options) {
            problems.extend(m.problems());
            problems.extend(t.problems());
            problems.extend(o.problems());
        }
        match (model, train, options) {
            (Some(model), Some(train), Some(options)) if problems.is_empty() => {
                Ok(Self { model, train, options, explicit_seed })
            }
            _ => Err(CliError::Config(problems)),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    /// Flat JSON document equivalent to this configuration.
    pub fn to_json(&self) -> String {
        let mut flat = object_of(&self.model);
        flat.extend(object_of(&self.train));
        flat.extend(object_of(&self.options));
        serde_json::to_string_pretty(&Value::Object(flat)).expect("serializable")
    }

    /// Seed precedence: command-line flag, the document's `seed`, the
    /// `DAEFUSION_SEED` environment variable, then the default.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<(), CliError> {
        if let Some(s) = flag {
            self.model.seed = s;
        } else if !self.explicit_seed {
            if let Some(text) = env {
                self.model.seed = text
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(vec![format!("DAEFUSION_SEED: not an unsigned integer: {text:?}")]))?;
            }
        }
        Ok(())
    }
}
