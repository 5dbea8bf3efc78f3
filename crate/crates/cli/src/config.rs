//! Run configuration: a sectioned key = value file merged with
//! command-line overrides on top of a named preset. Precedence is
//! flag > file > preset. Unknown sections or keys are rejected and every
//! effective value is echoed to the run log.

use fvp_core::error::{Error, Result};
use fvp_core::eval::DecodeOptions;
use fvp_core::model::ModelConfig;
use fvp_core::train::{ScheduleConfig, TrainConfig};
use std::collections::BTreeMap;
use std::path::Path;

/// Parsed config file: section -> key -> value, last write wins.
#[derive(Debug, Default, Clone)]
pub struct IniFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl IniFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::usage(format!("config line {}: expected key = value", lineno + 1))
            })?;
            if current.is_empty() {
                return Err(Error::usage(format!(
                    "config line {}: key outside any [section]",
                    lineno + 1
                )));
            }
            sections
                .get_mut(&current)
                .expect("section exists")
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(IniFile { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("{}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|s| s.as_str())
    }

    /// Every (section, key) pair present in the file.
    fn keys(&self) -> Vec<(String, String)> {
        self.sections
            .iter()
            .flat_map(|(s, kv)| kv.keys().map(move |k| (s.clone(), k.clone())))
            .collect()
    }
}

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        Error::usage(format!(
            "config [{}] {} = {}: cannot parse as {}",
            section,
            key,
            raw,
            std::any::type_name::<T>()
        ))
    })
}

fn parse_opt<T: std::str::FromStr>(section: &str, key: &str, raw: &str) -> Result<Option<T>> {
    if raw.is_empty() || raw == "none" {
        return Ok(None);
    }
    parse_value(section, key, raw).map(Some)
}

const KNOWN_KEYS: &[(&str, &str)] = &[
    ("model", "preset"),
    ("model", "width"),
    ("model", "heads"),
    ("model", "layers"),
    ("model", "intra_depth"),
    ("model", "ffn_width"),
    ("model", "dropout"),
    ("model", "label_smoothing"),
    ("model", "local_tokens"),
    ("model", "vision_width"),
    ("model", "max_positions"),
    ("model", "no_vision"),
    ("schedule", "warmup_init"),
    ("schedule", "peak"),
    ("schedule", "warmup_steps"),
    ("train", "epochs"),
    ("train", "max_tokens"),
    ("train", "seed"),
    ("train", "clip_norm"),
    ("train", "max_steps"),
    ("train", "target_loss"),
    ("train", "use_mcot"),
    ("decode", "beam"),
    ("decode", "alpha"),
    ("decode", "max_len"),
    ("mcot", "url"),
    ("mcot", "model"),
    ("mcot", "concurrency"),
    ("mcot", "max_attempts"),
];

/// Effective configuration for a run. The model's vocab size is filled in
/// from the vocabulary file at command time.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeOptions,
    pub use_mcot: bool,
    pub mcot_url: Option<String>,
    pub mcot_model: Option<String>,
    pub mcot_concurrency: usize,
    pub mcot_max_attempts: u32,
}

/// Command-line overrides that take precedence over the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub max_steps: Option<u64>,
    pub target_loss: Option<f64>,
    pub use_mcot: Option<bool>,
    pub no_vision: Option<bool>,
    pub beam: Option<usize>,
    pub alpha: Option<f64>,
    pub max_len: Option<usize>,
}

fn preset_model(name: &str) -> Result<ModelConfig> {
    // vocab size is a placeholder until the vocabulary is loaded
    match name {
        "desk" => Ok(ModelConfig::desk(8)),
        "paper" => Ok(ModelConfig::paper(8)),
        other => Err(Error::usage(format!(
            "unknown preset {:?}, expected desk or paper",
            other
        ))),
    }
}

impl RunConfig {
    pub fn build(file: Option<&IniFile>, overrides: &Overrides) -> Result<RunConfig> {
        if let Some(ini) = file {
            for (section, key) in ini.keys() {
                if !KNOWN_KEYS.contains(&(section.as_str(), key.as_str())) {
                    return Err(Error::usage(format!(
                        "config: unknown key [{}] {}",
                        section, key
                    )));
                }
            }
        }
        let get = |section: &str, key: &str| file.and_then(|ini| ini.get(section, key));

        let preset = overrides
            .preset
            .clone()
            .or_else(|| get("model", "preset").map(|s| s.to_string()))
            .unwrap_or_else(|| "desk".to_string());
        let mut model = preset_model(&preset)?;
        macro_rules! override_field {
            ($section:literal, $key:literal, $slot:expr) => {
                if let Some(raw) = get($section, $key) {
                    $slot = parse_value($section, $key, raw)?;
                }
            };
        }
        override_field!("model", "width", model.width);
        override_field!("model", "heads", model.heads);
        override_field!("model", "layers", model.layers);
        override_field!("model", "intra_depth", model.intra_depth);
        override_field!("model", "ffn_width", model.ffn_width);
        override_field!("model", "dropout", model.dropout);
        override_field!("model", "label_smoothing", model.label_smoothing);
        override_field!("model", "local_tokens", model.local_tokens);
        override_field!("model", "vision_width", model.vision_width);
        override_field!("model", "max_positions", model.max_positions);
        override_field!("model", "no_vision", model.no_vision);
        if let Some(no_vision) = overrides.no_vision {
            model.no_vision = no_vision;
        }

        let mut schedule = ScheduleConfig::default();
        override_field!("schedule", "warmup_init", schedule.warmup_init);
        override_field!("schedule", "peak", schedule.peak);
        override_field!("schedule", "warmup_steps", schedule.warmup_steps);

        let mut train = TrainConfig {
            schedule,
            ..TrainConfig::default()
        };
        override_field!("train", "epochs", train.epochs);
        override_field!("train", "max_tokens", train.max_tokens);
        override_field!("train", "seed", train.seed);
        if let Some(raw) = get("train", "clip_norm") {
            train.clip_norm = parse_opt("train", "clip_norm", raw)?;
        }
        if let Some(raw) = get("train", "max_steps") {
            train.max_steps = parse_opt("train", "max_steps", raw)?;
        }
        if let Some(raw) = get("train", "target_loss") {
            train.target_loss = parse_opt("train", "target_loss", raw)?;
        }
        if let Some(seed) = overrides.seed {
            train.seed = seed;
        }
        if let Some(epochs) = overrides.epochs {
            train.epochs = epochs;
        }
        if let Some(max_steps) = overrides.max_steps {
            train.max_steps = Some(max_steps);
        }
        if let Some(target) = overrides.target_loss {
            train.target_loss = Some(target);
        }

        let mut use_mcot = false;
        if let Some(raw) = get("train", "use_mcot") {
            use_mcot = parse_value("train", "use_mcot", raw)?;
        }
        if let Some(flag) = overrides.use_mcot {
            use_mcot = flag;
        }

        let mut decode = DecodeOptions::default();
        override_field!("decode", "beam", decode.beam);
        override_field!("decode", "alpha", decode.alpha);
        override_field!("decode", "max_len", decode.max_len);
        if let Some(beam) = overrides.beam {
            decode.beam = beam;
        }
        if let Some(alpha) = overrides.alpha {
            decode.alpha = alpha;
        }
        if let Some(max_len) = overrides.max_len {
            decode.max_len = max_len;
        }

        let mcot_url = get("mcot", "url")
            .map(|s| s.to_string())
            .or_else(|| std::env::var("FVP_LLM_URL").ok());
        let mcot_model = get("mcot", "model")
            .map(|s| s.to_string())
            .or_else(|| std::env::var("FVP_LLM_MODEL").ok());
        let mut mcot_concurrency = 4usize;
        if let Some(raw) = get("mcot", "concurrency") {
            mcot_concurrency = parse_value("mcot", "concurrency", raw)?;
        }
        let mut mcot_max_attempts = 3u32;
        if let Some(raw) = get("mcot", "max_attempts") {
            mcot_max_attempts = parse_value("mcot", "max_attempts", raw)?;
        }

        Ok(RunConfig {
            preset,
            model,
            train,
            decode,
            use_mcot,
            mcot_url,
            mcot_model,
            mcot_concurrency,
            mcot_max_attempts,
        })
    }

    /// Every effective value, one `key = value` line per entry.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.decode;
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{} = {}\n", k, v));
        line("model.preset", self.preset.clone());
        line("model.width", m.width.to_string());
        line("model.heads", m.heads.to_string());
        line("model.layers", m.layers.to_string());
        line("model.intra_depth", m.intra_depth.to_string());
        line("model.ffn_width", m.ffn_width.to_string());
        line("model.dropout", m.dropout.to_string());
        line("model.label_smoothing", m.label_smoothing.to_string());
        line("model.local_tokens", m.local_tokens.to_string());
        line("model.vision_width", m.vision_width.to_string());
        line("model.max_positions", m.max_positions.to_string());
        line("model.no_vision", m.no_vision.to_string());
        line("schedule.warmup_init", t.schedule.warmup_init.to_string());
        line("schedule.peak", t.schedule.peak.to_string());
        line("schedule.warmup_steps", t.schedule.warmup_steps.to_string());
        line("train.epochs", t.epochs.to_string());
        line("train.max_tokens", t.max_tokens.to_string());
        line("train.seed", t.seed.to_string());
        line(
            "train.clip_norm",
            t.clip_norm
                .map(|v| v.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        line(
            "train.max_steps",
            t.max_steps
                .map(|v| v.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        line(
            "train.target_loss",
            t.target_loss
                .map(|v| v.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        line("train.use_mcot", self.use_mcot.to_string());
        line("decode.beam", d.beam.to_string());
        line("decode.alpha", d.alpha.to_string());
        line("decode.max_len", d.max_len.to_string());
        out
    }
}
