//! Service configuration.
//!
//! A TOML file with an `[adapters]` section (mock or remote endpoints plus a
//! latency profile for mocks) and a `[pipeline]` section. Any key can be
//! overridden with a dotted path, either from the command line
//! (`pipeline.chunk_ms=500`) or from the environment
//! (`PROXYME_PIPELINE__CHUNK_MS=500`).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::mock::{MockBackend, DEFAULT_WORDS_PER_MINUTE};
use crate::adapters::remote::{EndpointConfig, RemoteEndpoint, RemoteModifier, RemoteStt, RemoteTts};
use crate::adapters::{LatencyProfile, Stage};
use crate::pipeline::Backend;
use crate::scheduler::DEFAULT_BUFFER_DEPTH;

pub const ENV_PREFIX: &str = "PROXYME_";
pub const REQUIRED_SECTIONS: [&str; 1] = ["adapters"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: missing required section [{section}]")]
    MissingSection { path: String, section: &'static str },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("invalid value for `{field}`: {detail}")]
    Invalid { field: String, detail: String },
    #[error("override `{key}`: {detail}")]
    Override { key: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptersConfig {
    pub kind: AdapterKind,
    #[serde(default)]
    pub latency: LatencyProfile,
    #[serde(default = "default_wpm")]
    pub words_per_minute: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stt: Option<EndpointConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<EndpointConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tts: Option<EndpointConfig>,
}

fn default_wpm() -> u32 {
    DEFAULT_WORDS_PER_MINUTE
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub streaming: bool,
    pub chunk_ms: u64,
    pub buffer_depth: usize,
    pub masking_window_ms: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            streaming: true,
            chunk_ms: 1000,
            buffer_depth: DEFAULT_BUFFER_DEPTH,
            masking_window_ms: 0,
        }
    }
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8765
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("sessions")
}

fn default_scenarios() -> PathBuf {
    PathBuf::from("data/scenarios.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_scenarios")]
    pub scenarios: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub questionnaire: Option<PathBuf>,
    /// Seeds mock latency draws in the live service.
    #[serde(default)]
    pub seed: u64,
    pub adapters: AdaptersConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: default_host(),
            port: default_port(),
            data_dir: default_data_dir(),
            scenarios: default_scenarios(),
            questionnaire: None,
            seed: 0,
            adapters: AdaptersConfig {
                kind: AdapterKind::Mock,
                latency: LatencyProfile::default(),
                words_per_minute: DEFAULT_WORDS_PER_MINUTE,
                stt: None,
                llm: None,
                tts: None,
            },
            pipeline: PipelineConfig::default(),
        }
    }
}

/// A `key=value` override with a dotted key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Override {
    pub key: String,
    pub value: String,
}

impl std::str::FromStr for Override {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok(Override {
                key: k.trim().to_owned(),
                value: v.to_owned(),
            }),
            _ => Err(ConfigError::Override {
                key: s.to_owned(),
                detail: "expected key=value".into(),
            }),
        }
    }
}

/// Overrides from `PROXYME_`-prefixed variables. `__` separates path
/// components; keys are lowercased.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<Override> {
    let mut out: Vec<Override> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            if rest.is_empty() {
                return None;
            }
            Some(Override {
                key: rest.to_lowercase().replace("__", "."),
                value: v,
            })
        })
        .collect();
    out.sort_by(|a, b| a.key.cmp(&b.key));
    out
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn apply_override(table: &mut toml::Table, o: &Override) -> Result<(), ConfigError> {
    let parts: Vec<&str> = o.key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override {
            key: o.key.clone(),
            detail: "empty path component".into(),
        });
    }
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(ConfigError::Override {
                    key: o.key.clone(),
                    detail: format!("`{p}` is not a table"),
                })
            }
        };
    }
    cur.insert(last.to_string(), parse_scalar(&o.value));
    Ok(())
}

fn deserialize(table: toml::Table) -> Result<ServiceConfig, String> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| e.message().to_owned())
}

/// Attribute a deserialization failure to the first override that causes it,
/// or to the file itself.
fn blame(text: &str, origin: &str, overrides: &[Override], detail: String) -> ConfigError {
    if let Ok(mut table) = toml::from_str::<toml::Table>(text) {
        if deserialize(table.clone()).is_ok() {
            for o in overrides {
                if apply_override(&mut table, o).is_err() {
                    break;
                }
                if let Err(detail) = deserialize(table.clone()) {
                    return ConfigError::Override {
                        key: o.key.clone(),
                        detail,
                    };
                }
            }
        }
    }
    ConfigError::Parse {
        path: origin.to_owned(),
        detail,
    }
}

impl ServiceConfig {
    /// Parse TOML text, apply overrides in order, and validate.
    pub fn from_toml(text: &str, origin: &str, overrides: &[Override]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_owned(),
            detail: e.message().to_owned(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for section in REQUIRED_SECTIONS {
            if !table.contains_key(section) {
                return Err(ConfigError::MissingSection {
                    path: origin.to_owned(),
                    section,
                });
            }
        }
        let config = match deserialize(table) {
            Ok(c) => c,
            Err(detail) => return Err(blame(text, origin, overrides, detail)),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[Override]) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, detail: String| ConfigError::Invalid {
            field: field.to_owned(),
            detail,
        };
        self.adapters
            .latency
            .validate()
            .map_err(|d| invalid("adapters.latency", d))?;
        if self.adapters.words_per_minute == 0 {
            return Err(invalid("adapters.words_per_minute", "must be > 0".into()));
        }
        if self.pipeline.chunk_ms == 0 {
            return Err(invalid("pipeline.chunk_ms", "must be > 0".into()));
        }
        if self.pipeline.buffer_depth == 0 {
            return Err(invalid("pipeline.buffer_depth", "must be >= 1".into()));
        }
        if self.adapters.kind == AdapterKind::Remote {
            for (name, ep) in [
                ("adapters.stt", &self.adapters.stt),
                ("adapters.llm", &self.adapters.llm),
                ("adapters.tts", &self.adapters.tts),
            ] {
                match ep {
                    None => {
                        return Err(invalid(name, "required when adapters.kind = \"remote\"".into()))
                    }
                    Some(ep) if ep.timeout_ms == 0 => {
                        return Err(invalid(&format!("{name}.timeout_ms"), "must be > 0".into()))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    /// Build the stage backend this config describes.
    pub fn backend(&self) -> Backend {
        let a = &self.adapters;
        match a.kind {
            AdapterKind::Mock => Backend::mock(MockBackend::new(&a.latency, a.words_per_minute)),
            AdapterKind::Remote => {
                let ep = |stage, cfg: &Option<EndpointConfig>| {
                    RemoteEndpoint::new(stage, cfg.clone().expect("validated"))
                };
                Backend {
                    stt: Arc::new(RemoteStt(ep(Stage::Stt, &a.stt))),
                    modifier: Arc::new(RemoteModifier(ep(Stage::Llm, &a.llm))),
                    tts: Arc::new(RemoteTts(ep(Stage::Tts, &a.tts))),
                }
            }
        }
    }

    /// One-line description for startup logs.
    pub fn summary(&self) -> String {
        let profile = &self.adapters.latency;
        format!(
            "adapters={:?} profile(stt={:?}, llm={:?}, tts_total={:?}, tts_first_chunk={:?}) streaming={} chunk_ms={} buffer_depth={} masking_window_ms={} data_dir={}",
            self.adapters.kind,
            profile.stt_ms,
            profile.llm_ms,
            profile.tts_total_ms,
            profile.tts_first_chunk_ms,
            self.pipeline.streaming,
            self.pipeline.chunk_ms,
            self.pipeline.buffer_depth,
            self.pipeline.masking_window_ms,
            self.data_dir.display(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::LatencyDist;

    const SAMPLE: &str = r#"
port = 9000
data_dir = "out"

[adapters]
kind = "mock"

[adapters.latency]
stt_ms = { fixed = 1200 }
llm_ms = { fixed = 2900 }
tts_total_ms = { normal = { mean = 7500.0, stddev = 750.0 } }
tts_first_chunk_ms = { fixed = 1500 }

[pipeline]
chunk_ms = 500
"#;

    #[test]
    fn parses_sample() {
        let c = ServiceConfig::from_toml(SAMPLE, "sample.toml", &[]).unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.pipeline.chunk_ms, 500);
        assert_eq!(c.pipeline.buffer_depth, 1);
        assert!(c.pipeline.streaming);
        assert_eq!(
            c.adapters.latency.tts_total_ms,
            LatencyDist::Normal {
                mean: 7500.0,
                stddev: 750.0
            }
        );
    }

    #[test]
    fn missing_adapter_section_is_named() {
        let err = ServiceConfig::from_toml("port = 1\n", "c.toml", &[]).unwrap_err();
        assert!(matches!(err, ConfigError::MissingSection { section: "adapters", .. }));
        assert!(err.to_string().contains("[adapters]"));
    }

    #[test]
    fn unknown_field_is_reported() {
        let err = ServiceConfig::from_toml(
            "[adapters]\nkind = \"mock\"\n[pipeline]\nchunk_size = 3\n",
            "c.toml",
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("chunk_size"), "{err}");
    }

    #[test]
    fn remote_needs_endpoints() {
        let err = ServiceConfig::from_toml("[adapters]\nkind = \"remote\"\n", "c.toml", &[]).unwrap_err();
        assert!(err.to_string().contains("adapters.stt"), "{err}");
    }

    #[test]
    fn overrides_apply_in_order() {
        let overrides = vec![
            "pipeline.chunk_ms=250".parse().unwrap(),
            "pipeline.streaming=false".parse().unwrap(),
            "data_dir=elsewhere".parse().unwrap(),
            "adapters.latency.stt_ms={ fixed = 10 }".parse().unwrap(),
        ];
        let c = ServiceConfig::from_toml(SAMPLE, "sample.toml", &overrides).unwrap();
        assert_eq!(c.pipeline.chunk_ms, 250);
        assert!(!c.pipeline.streaming);
        assert_eq!(c.data_dir, PathBuf::from("elsewhere"));
        assert_eq!(c.adapters.latency.stt_ms, LatencyDist::Fixed(10));
    }

    #[test]
    fn override_can_supply_missing_section() {
        let o: Override = "adapters.kind=mock".parse().unwrap();
        let c = ServiceConfig::from_toml("", "c.toml", &[o]).unwrap();
        assert_eq!(c.adapters.kind, AdapterKind::Mock);
    }

    #[test]
    fn env_mapping() {
        let vars = vec![
            ("PROXYME_PIPELINE__MASKING_WINDOW_MS".to_owned(), "3000".to_owned()),
            ("PROXYME_PORT".to_owned(), "9100".to_owned()),
            ("HOME".to_owned(), "/root".to_owned()),
        ];
        let o = env_overrides(vars);
        assert_eq!(o.len(), 2);
        let c = ServiceConfig::from_toml(SAMPLE, "sample.toml", &o).unwrap();
        assert_eq!(c.pipeline.masking_window_ms, 3000);
        assert_eq!(c.port, 9100);
    }

    #[test]
    fn bad_override_syntax() {
        assert!("novalue".parse::<Override>().is_err());
    }

    #[test]
    fn zero_chunk_rejected() {
        let o: Override = "pipeline.chunk_ms=0".parse().unwrap();
        let err = ServiceConfig::from_toml(SAMPLE, "s", &[o]).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref field, .. } if field == "pipeline.chunk_ms"));
    }

    #[test]
    fn default_round_trips_through_toml() {
        let c = ServiceConfig::default();
        let back = ServiceConfig::from_toml(&c.to_toml(), "default", &[]).unwrap();
        assert_eq!(back, c);
    }
}
