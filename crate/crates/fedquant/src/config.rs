//! Federation configuration and its JSON document form.
//!
//! The JSON schema is closed: unknown keys are rejected everywhere. The
//! `clients` key accepts either an explicit array of client objects or a
//! named scenario preset; presets are expanded at load time, so a config
//! serializes back with the explicit client list.

use serde::{Deserialize, Serialize};

use crate::dist::{DistributionSpec, SamplingMode};
use crate::error::{Error, Result};
use crate::schedule::{CommSchedule, Horizon, Scale, StepSizePolicy, Strategy};
use crate::scenarios::{make_scenario, ScenarioSpec};

/// One client of the federation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSpec {
    pub id: u64,
    /// Aggregation weight p_k; weights sum to 1 across the federation.
    pub weight: f64,
    /// The level tau_k this client's data targets.
    pub quantile_level: f64,
    /// Truthful-response rate r_k in (0, 1].
    pub truthful_rate: f64,
    pub source: DistributionSpec,
}

impl ClientSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight > 0.0 && self.weight <= 1.0) {
            return Err(Error::config(format!(
                "client {}: weight must lie in (0, 1], got {}",
                self.id, self.weight
            )));
        }
        if !(self.quantile_level > 0.0 && self.quantile_level < 1.0) {
            return Err(Error::config(format!(
                "client {}: quantile level must lie in (0, 1), got {}",
                self.id, self.quantile_level
            )));
        }
        if !(self.truthful_rate > 0.0 && self.truthful_rate <= 1.0) {
            return Err(Error::config(format!(
                "client {}: truthful rate must lie in (0, 1], got {}",
                self.id, self.truthful_rate
            )));
        }
        self.source.validate()
    }
}

/// Complete, validated description of one federated run.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub clients: Vec<ClientSpec>,
    pub schedule: CommSchedule,
    pub policy: StepSizePolicy,
    pub alpha: f64,
    pub master_seed: u64,
    pub clamp_bounds: Option<(f64, f64)>,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::config("federation needs at least one client"));
        }
        let mut ids: Vec<u64> = self.clients.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("client ids must be unique"));
        }
        for c in &self.clients {
            c.validate()?;
        }
        let wsum: f64 = self.clients.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "client weights must sum to 1 (within 1e-12), got {wsum}"
            )));
        }
        self.policy.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if let Some((lo, hi)) = self.clamp_bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::config(format!(
                    "clamp bounds need finite lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        let tau = self.global_level();
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::config(format!(
                "weighted global quantile level {tau} falls outside (0, 1)"
            )));
        }
        Ok(())
    }

    /// Weighted global level sum p_k tau_k: the level every client's update
    /// rule targets under the main protocol.
    pub fn global_level(&self) -> f64 {
        self.clients
            .iter()
            .map(|c| c.weight * c.quantile_level)
            .sum()
    }

    /// Unweighted mean truthful rate; sets the automatic step scale.
    pub fn mean_rate(&self) -> f64 {
        let k = self.clients.len() as f64;
        self.clients.iter().map(|c| c.truthful_rate).sum::<f64>() / k
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: ConfigDoc = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config JSON: {e}")))?;
        doc.into_config()
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = ConfigDoc::from_config(self)?;
        serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::config(format!("config serialization: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    clients: serde_json::Value,
    schedule: ScheduleDoc,
    policy: PolicyDoc,
    alpha: f64,
    master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clamp_bounds: Option<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClientDoc {
    id: u64,
    weight: f64,
    tau: f64,
    rate: f64,
    source: SourceDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
enum SourceDoc {
    Normal {
        mu: f64,
        sigma: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    Cauchy {
        x0: f64,
        gamma: f64,
    },
    Empirical {
        values: Vec<f64>,
        #[serde(default)]
        mode: ModeDoc,
    },
}

#[derive(Serialize, Deserialize, Default, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum ModeDoc {
    #[default]
    WithReplacement,
    SinglePass,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetDoc {
    preset: String,
    count: usize,
    #[serde(default = "default_tau")]
    tau: f64,
    #[serde(default = "default_rate")]
    rate: f64,
    #[serde(default)]
    randomized: bool,
    #[serde(default)]
    scenario_seed: Option<u64>,
}

fn default_tau() -> f64 {
    0.5
}

fn default_rate() -> f64 {
    0.9
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleDoc {
    strategy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rounds: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    total_samples: Option<u64>,
    warmup_frac: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    scale: serde_json::Value,
    #[serde(default = "default_exponent")]
    exponent: f64,
    #[serde(default = "default_offset")]
    offset: f64,
}

fn default_exponent() -> f64 {
    0.51
}

fn default_offset() -> f64 {
    100.0
}

impl ConfigDoc {
    fn into_config(self) -> Result<FederationConfig> {
        let horizon = match (self.schedule.rounds, self.schedule.total_samples) {
            (Some(r), None) => Horizon::Rounds(r),
            (None, Some(s)) => Horizon::Samples(s),
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "schedule: give exactly one of rounds or total_samples, not both",
                ))
            }
            (None, None) => {
                return Err(Error::config(
                    "schedule: one of rounds or total_samples is required",
                ))
            }
        };
        let strategy = Strategy::from_name(&self.schedule.strategy)?;
        let schedule = CommSchedule::build(strategy, horizon, self.schedule.warmup_frac)?;

        let scale = match &self.policy.scale {
            serde_json::Value::String(s) if s == "auto" => Scale::Auto,
            serde_json::Value::Number(n) => Scale::Fixed(n.as_f64().ok_or_else(|| {
                Error::config("policy.scale: number out of f64 range".to_string())
            })?),
            other => {
                return Err(Error::config(format!(
                    "policy.scale must be a positive number or \"auto\", got {other}"
                )))
            }
        };
        let policy = StepSizePolicy {
            scale,
            exponent: self.policy.exponent,
            offset: self.policy.offset,
        };

        let clients = match &self.clients {
            serde_json::Value::Array(_) => {
                let docs: Vec<ClientDoc> = serde_json::from_value(self.clients.clone())
                    .map_err(|e| Error::config(format!("clients: {e}")))?;
                docs.into_iter().map(ClientDoc::into_spec).collect()
            }
            serde_json::Value::Object(_) => {
                let preset: PresetDoc = serde_json::from_value(self.clients.clone())
                    .map_err(|e| Error::config(format!("clients preset: {e}")))?;
                let spec = ScenarioSpec {
                    randomized: preset.randomized,
                    ..ScenarioSpec::preset(&preset.preset, preset.count, preset.tau, preset.rate)?
                };
                let seed = preset.scenario_seed.unwrap_or(self.master_seed);
                make_scenario(&spec, seed)?
            }
            _ => {
                return Err(Error::config(
                    "clients must be an array of client objects or a preset object",
                ))
            }
        };

        let config = FederationConfig {
            clients,
            schedule,
            policy,
            alpha: self.alpha,
            master_seed: self.master_seed,
            clamp_bounds: self.clamp_bounds.map(|[lo, hi]| (lo, hi)),
        };
        config.validate()?;
        Ok(config)
    }

    fn from_config(config: &FederationConfig) -> Result<Self> {
        config.validate()?;
        if config.schedule.strategy() == Strategy::Custom {
            return Err(Error::config(
                "custom block schedules have no JSON form; only named strategies serialize",
            ));
        }
        let (rounds, total_samples) = match config.schedule.horizon() {
            Horizon::Rounds(r) => (Some(r), None),
            Horizon::Samples(s) => (None, Some(s)),
        };
        let client_docs: Vec<ClientDoc> = config
            .clients
            .iter()
            .map(ClientDoc::from_spec)
            .collect();
        Ok(ConfigDoc {
            clients: serde_json::to_value(client_docs)
                .map_err(|e| Error::config(format!("config serialization: {e}")))?,
            schedule: ScheduleDoc {
                strategy: config.schedule.strategy().name().to_string(),
                rounds,
                total_samples,
                warmup_frac: config.schedule.warmup_frac(),
            },
            policy: PolicyDoc {
                scale: match config.policy.scale {
                    Scale::Auto => serde_json::Value::String("auto".to_string()),
                    Scale::Fixed(c) => serde_json::json!(c),
                },
                exponent: config.policy.exponent,
                offset: config.policy.offset,
            },
            alpha: config.alpha,
            master_seed: config.master_seed,
            clamp_bounds: config.clamp_bounds.map(|(lo, hi)| [lo, hi]),
        })
    }
}

impl ClientDoc {
    fn into_spec(self) -> ClientSpec {
        ClientSpec {
            id: self.id,
            weight: self.weight,
            quantile_level: self.tau,
            truthful_rate: self.rate,
            source: match self.source {
                SourceDoc::Normal { mu, sigma } => DistributionSpec::Normal { mu, sigma },
                SourceDoc::Uniform { lo, hi } => DistributionSpec::Uniform { lo, hi },
                SourceDoc::Cauchy { x0, gamma } => DistributionSpec::Cauchy { x0, gamma },
                SourceDoc::Empirical { values, mode } => DistributionSpec::Empirical {
                    values,
                    mode: match mode {
                        ModeDoc::WithReplacement => SamplingMode::WithReplacement,
                        ModeDoc::SinglePass => SamplingMode::SinglePass,
                    },
                },
            },
        }
    }

    fn from_spec(spec: &ClientSpec) -> Self {
        ClientDoc {
            id: spec.id,
            weight: spec.weight,
            tau: spec.quantile_level,
            rate: spec.truthful_rate,
            source: match &spec.source {
                DistributionSpec::Normal { mu, sigma } => SourceDoc::Normal {
                    mu: *mu,
                    sigma: *sigma,
                },
                DistributionSpec::Uniform { lo, hi } => SourceDoc::Uniform { lo: *lo, hi: *hi },
                DistributionSpec::Cauchy { x0, gamma } => SourceDoc::Cauchy {
                    x0: *x0,
                    gamma: *gamma,
                },
                DistributionSpec::Empirical { values, mode } => SourceDoc::Empirical {
                    values: values.clone(),
                    mode: match mode {
                        SamplingMode::WithReplacement => ModeDoc::WithReplacement,
                        SamplingMode::SinglePass => ModeDoc::SinglePass,
                    },
                },
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "clients": [
                {"id": 0, "weight": 0.5, "tau": 0.5, "rate": 0.9,
                 "source": {"family": "normal", "mu": 0.0, "sigma": 1.0}},
                {"id": 1, "weight": 0.5, "tau": 0.5, "rate": 0.25,
                 "source": {"family": "uniform", "lo": -1.0, "hi": 1.0}}
            ],
            "schedule": {"strategy": "C1", "total_samples": 100, "warmup_frac": 0.05},
            "policy": {"scale": "auto", "exponent": 0.51, "offset": 100.0},
            "alpha": 0.05,
            "master_seed": 7
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_and_validates() {
        let cfg = FederationConfig::from_json_str(&minimal_json()).unwrap();
        assert_eq!(cfg.clients.len(), 2);
        assert_eq!(cfg.schedule.total_samples(), 100);
        assert_eq!(cfg.policy.scale, Scale::Auto);
        assert!((cfg.global_level() - 0.5).abs() < 1e-15);
        assert!((cfg.mean_rate() - 0.575).abs() < 1e-15);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let bad = minimal_json().replace("\"alpha\": 0.05", "\"alpha\": 0.05, \"weight_decay\": 0.1");
        let err = FederationConfig::from_json_str(&bad).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("weight_decay"), "{err}");
    }

    #[test]
    fn unknown_nested_keys_are_rejected() {
        let bad = minimal_json().replace("\"id\": 0,", "\"id\": 0, \"momentum\": 0.9,");
        assert!(FederationConfig::from_json_str(&bad).is_err());
        let bad = minimal_json().replace("\"strategy\": \"C1\",", "\"strategy\": \"C1\", \"jitter\": 1,");
        assert!(FederationConfig::from_json_str(&bad).is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let bad = minimal_json().replace("\"weight\": 0.5", "\"weight\": 0.6");
        let err = FederationConfig::from_json_str(&bad).unwrap_err();
        assert!(err.to_string().contains("sum to 1"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let bad = minimal_json().replace("\"id\": 1", "\"id\": 0");
        let err = FederationConfig::from_json_str(&bad).unwrap_err();
        assert!(err.to_string().contains("unique"), "{err}");
    }

    #[test]
    fn schedule_requires_exactly_one_horizon() {
        let bad = minimal_json().replace(
            "\"total_samples\": 100,",
            "\"total_samples\": 100, \"rounds\": 10,",
        );
        assert!(FederationConfig::from_json_str(&bad).is_err());
        let bad = minimal_json().replace("\"total_samples\": 100,", "");
        assert!(FederationConfig::from_json_str(&bad).is_err());
    }

    #[test]
    fn policy_scale_accepts_auto_or_number_only() {
        let fixed = minimal_json().replace("\"auto\"", "2.5");
        let cfg = FederationConfig::from_json_str(&fixed).unwrap();
        assert_eq!(cfg.policy.scale, Scale::Fixed(2.5));
        let bad = minimal_json().replace("\"auto\"", "\"big\"");
        assert!(FederationConfig::from_json_str(&bad).is_err());
    }

    #[test]
    fn preset_clients_expand_at_load() {
        let json = r#"{
            "clients": {"preset": "hetero_rates", "count": 10, "tau": 0.5},
            "schedule": {"strategy": "Log", "rounds": 50, "warmup_frac": 0.0},
            "policy": {"scale": "auto"},
            "alpha": 0.05,
            "master_seed": 3
        }"#;
        let cfg = FederationConfig::from_json_str(json).unwrap();
        assert_eq!(cfg.clients.len(), 10);
        assert_eq!(cfg.clients[0].truthful_rate, 0.25);
        assert_eq!(cfg.clients[9].truthful_rate, 0.9);
        // Serializes back with the expanded list.
        let out = cfg.to_json_string().unwrap();
        assert!(out.contains("\"rate\": 0.25"));
    }

    #[test]
    fn json_round_trip_preserves_the_config() {
        let cfg = FederationConfig::from_json_str(&minimal_json()).unwrap();
        let text = cfg.to_json_string().unwrap();
        let back = FederationConfig::from_json_str(&text).unwrap();
        assert_eq!(back.clients, cfg.clients);
        assert_eq!(back.schedule.blocks(), cfg.schedule.blocks());
        assert_eq!(back.schedule.strategy(), cfg.schedule.strategy());
        assert_eq!(back.policy, cfg.policy);
        assert_eq!(back.alpha, cfg.alpha);
        assert_eq!(back.master_seed, cfg.master_seed);
        // And the re-serialization is stable.
        assert_eq!(back.to_json_string().unwrap(), text);
    }

    #[test]
    fn clamp_bounds_parse_and_validate() {
        let with = minimal_json().replace(
            "\"master_seed\": 7",
            "\"master_seed\": 7, \"clamp_bounds\": [-5.0, 5.0]",
        );
        let cfg = FederationConfig::from_json_str(&with).unwrap();
        assert_eq!(cfg.clamp_bounds, Some((-5.0, 5.0)));
        let bad = minimal_json().replace(
            "\"master_seed\": 7",
            "\"master_seed\": 7, \"clamp_bounds\": [5.0, -5.0]",
        );
        assert!(FederationConfig::from_json_str(&bad).is_err());
    }

    #[test]
    fn empirical_source_round_trips() {
        let json = r#"{
            "clients": [
                {"id": 0, "weight": 1.0, "tau": 0.5, "rate": 0.9,
                 "source": {"family": "empirical", "values": [1.0, 2.0, 3.0], "mode": "single_pass"}}
            ],
            "schedule": {"strategy": "C1", "total_samples": 3, "warmup_frac": 0.0},
            "policy": {"scale": 1.0},
            "alpha": 0.05,
            "master_seed": 1
        }"#;
        let cfg = FederationConfig::from_json_str(json).unwrap();
        match &cfg.clients[0].source {
            DistributionSpec::Empirical { values, mode } => {
                assert_eq!(values, &vec![1.0, 2.0, 3.0]);
                assert_eq!(*mode, SamplingMode::SinglePass);
            }
            other => panic!("wrong source {other:?}"),
        }
        let back = FederationConfig::from_json_str(&cfg.to_json_string().unwrap()).unwrap();
        assert_eq!(back.clients, cfg.clients);
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        for (needle, replacement) in [
            ("\"tau\": 0.5, \"rate\": 0.9", "\"tau\": 1.5, \"rate\": 0.9"),
            ("\"tau\": 0.5, \"rate\": 0.9", "\"tau\": 0.5, \"rate\": 0.0"),
            ("\"alpha\": 0.05", "\"alpha\": 1.0"),
        ] {
            let bad = minimal_json().replacen(needle, replacement, 1);
            assert!(
                FederationConfig::from_json_str(&bad).is_err(),
                "accepted: {replacement}"
            );
        }
    }
}
