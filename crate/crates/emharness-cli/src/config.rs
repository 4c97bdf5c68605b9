//! Experiment manifests: TOML files merged with command-line overrides, then
//! validated into a fully resolved configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use emharness::promptkit::design_catalog;

use crate::CliError;

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const ALLOWED_SHOTS: [usize; 5] = [2, 4, 6, 8, 10];

/// On-disk manifest shape. Every field is optional so a manifest can be
/// partial and flags can fill the gaps; validation happens in `resolve`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: Option<String>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub execution: ExecutionSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub dir: Option<PathBuf>,
    pub domain_noun: Option<String>,
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub id: Option<String>,
    /// "scripted" or "hosted".
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    /// Design names, or the single entry "all".
    pub designs: Option<Vec<String>>,
    /// "related", "random", or "handpicked".
    pub strategy: Option<String>,
    pub shots: Option<usize>,
    pub seed: Option<u64>,
    pub handpicked: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub learn_rules_from: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionSection {
    pub parallelism: Option<usize>,
    pub rate_limit_per_sec: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub cache: Option<PathBuf>,
    pub runs_root: Option<PathBuf>,
    pub prices: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::Internal(format!("cannot serialize config: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Scripted { script: PathBuf },
    Hosted { endpoint: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StrategySpec {
    Related,
    Random { seed: u64 },
    Handpicked { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuleSource {
    Handwritten { path: PathBuf },
    Learned { examples: PathBuf },
}

/// Validated configuration with every default filled in and every path made
/// absolute, so a copy stored in the run directory replays from any working
/// directory.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub run_id: String,
    pub dataset_dir: PathBuf,
    pub domain_noun: String,
    pub schema: Option<PathBuf>,
    pub model_id: String,
    pub backend: BackendSpec,
    pub designs: Vec<String>,
    pub strategy: Option<(StrategySpec, usize)>,
    pub rules: Option<RuleSource>,
    pub parallelism: usize,
    pub rate_limit_per_sec: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub cache: PathBuf,
    pub runs_root: PathBuf,
    pub prices: Option<PathBuf>,
}

fn absolute(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|cwd| cwd.join(path))
            .unwrap_or_else(|_| path.to_path_buf())
    }
}

fn sanitize_for_filename(raw: &str) -> String {
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '-' })
        .collect()
}

pub fn resolve(config: &ExperimentConfig) -> Result<ResolvedConfig, CliError> {
    let err = |message: String| Err(CliError::Config(message));

    let run_id = match &config.run_id {
        Some(id) if !id.is_empty() => id.clone(),
        _ => return err("run_id is required".into()),
    };
    if run_id.contains('/') || run_id.contains('\\') || run_id.contains("..") {
        return err(format!("run_id '{run_id}' must not contain path separators"));
    }

    let dataset_dir = match &config.dataset.dir {
        Some(dir) => absolute(dir),
        None => return err("dataset.dir is required".into()),
    };
    let domain_noun = config
        .dataset
        .domain_noun
        .clone()
        .unwrap_or_else(|| "entity descriptions".to_string());
    let schema = config.dataset.schema.as_deref().map(absolute);

    let model_id = match &config.model.id {
        Some(id) if !id.is_empty() => id.clone(),
        _ => return err("model.id is required".into()),
    };
    let backend = match config.model.backend.as_deref() {
        Some("scripted") => match &config.model.script {
            Some(script) => BackendSpec::Scripted { script: absolute(script) },
            None => return err("model.script is required for the scripted backend".into()),
        },
        Some("hosted") => BackendSpec::Hosted {
            endpoint: config
                .model
                .endpoint
                .clone()
                .unwrap_or_else(|| DEFAULT_ENDPOINT.to_string()),
        },
        Some(other) => {
            return err(format!("unknown backend '{other}', expected scripted or hosted"))
        }
        None => return err("model.backend is required (scripted or hosted)".into()),
    };

    let canonical: Vec<String> = design_catalog(&domain_noun)
        .into_iter()
        .map(|d| d.name)
        .collect();
    let designs = match &config.prompt.designs {
        None => canonical.clone(),
        Some(names) if names.len() == 1 && names[0] == "all" => canonical.clone(),
        Some(names) => {
            if names.is_empty() {
                return err("prompt.designs must not be empty".into());
            }
            for name in names {
                if !canonical.contains(name) {
                    return err(format!(
                        "unknown design '{name}'; expected one of: {}",
                        canonical.join(", ")
                    ));
                }
            }
            names.clone()
        }
    };

    let strategy = match config.prompt.strategy.as_deref() {
        None => {
            for (set, what) in [
                (config.prompt.shots.is_some(), "shots"),
                (config.prompt.seed.is_some(), "seed"),
                (config.prompt.handpicked.is_some(), "handpicked"),
            ] {
                if set {
                    return err(format!("prompt.{what} is only valid with a strategy"));
                }
            }
            None
        }
        Some(name) => {
            let shots = match config.prompt.shots {
                Some(shots) if ALLOWED_SHOTS.contains(&shots) => shots,
                Some(shots) => {
                    return err(format!(
                        "shots must be one of {ALLOWED_SHOTS:?}, got {shots}"
                    ))
                }
                None => return err("prompt.shots is required when a strategy is set".into()),
            };
            let spec = match name {
                "related" => StrategySpec::Related,
                "random" => StrategySpec::Random {
                    seed: config.prompt.seed.unwrap_or(0),
                },
                "handpicked" => match &config.prompt.handpicked {
                    Some(path) => StrategySpec::Handpicked { path: absolute(path) },
                    None => {
                        return err(
                            "prompt.handpicked file is required for the handpicked strategy"
                                .into(),
                        )
                    }
                },
                other => {
                    return err(format!(
                        "unknown strategy '{other}', expected related, random, or handpicked"
                    ))
                }
            };
            Some((spec, shots))
        }
    };

    let rules = match (&config.prompt.rules, &config.prompt.learn_rules_from) {
        (Some(_), Some(_)) => {
            return err("prompt.rules and prompt.learn_rules_from are mutually exclusive".into())
        }
        (Some(path), None) => Some(RuleSource::Handwritten { path: absolute(path) }),
        (None, Some(path)) => Some(RuleSource::Learned { examples: absolute(path) }),
        (None, None) => None,
    };
    if strategy.is_some() && rules.is_some() {
        return err("in-context demonstrations and rules are mutually exclusive".into());
    }

    let parallelism = config.execution.parallelism.unwrap_or(1);
    if parallelism == 0 {
        return err("execution.parallelism must be at least 1".into());
    }
    let rate_limit_per_sec = match config.execution.rate_limit_per_sec {
        Some(rate) if rate <= 0.0 => {
            return err("execution.rate_limit_per_sec must be positive".into())
        }
        other => other,
    };

    let runs_root = absolute(
        config
            .execution
            .runs_root
            .as_deref()
            .unwrap_or(Path::new("runs")),
    );
    let cache = match &config.execution.cache {
        Some(path) => absolute(path),
        None => runs_root
            .join("cache")
            .join(format!("{}.jsonl", sanitize_for_filename(&model_id))),
    };
    let prices = config.execution.prices.as_deref().map(absolute);

    Ok(ResolvedConfig {
        run_id,
        dataset_dir,
        domain_noun,
        schema,
        model_id,
        backend,
        designs,
        strategy,
        rules,
        parallelism,
        rate_limit_per_sec,
        max_output_tokens: config.execution.max_output_tokens,
        cache,
        runs_root,
        prices,
    })
}

/// The manifest written into a run directory: the resolved view re-expressed
/// as a complete config file, so later commands replay the exact experiment.
pub fn materialize(resolved: &ResolvedConfig) -> ExperimentConfig {
    let (backend, endpoint, script) = match &resolved.backend {
        BackendSpec::Scripted { script } => ("scripted", None, Some(script.clone())),
        BackendSpec::Hosted { endpoint } => ("hosted", Some(endpoint.clone()), None),
    };
    let (strategy, shots, seed, handpicked) = match &resolved.strategy {
        None => (None, None, None, None),
        Some((spec, shots)) => {
            let (name, seed, handpicked) = match spec {
                StrategySpec::Related => ("related", None, None),
                StrategySpec::Random { seed } => ("random", Some(*seed), None),
                StrategySpec::Handpicked { path } => ("handpicked", None, Some(path.clone())),
            };
            (Some(name.to_string()), Some(*shots), seed, handpicked)
        }
    };
    let (rules, learn_rules_from) = match &resolved.rules {
        None => (None, None),
        Some(RuleSource::Handwritten { path }) => (Some(path.clone()), None),
        Some(RuleSource::Learned { examples }) => (None, Some(examples.clone())),
    };
    ExperimentConfig {
        run_id: Some(resolved.run_id.clone()),
        dataset: DatasetSection {
            dir: Some(resolved.dataset_dir.clone()),
            domain_noun: Some(resolved.domain_noun.clone()),
            schema: resolved.schema.clone(),
        },
        model: ModelSection {
            id: Some(resolved.model_id.clone()),
            backend: Some(backend.to_string()),
            endpoint,
            script,
        },
        prompt: PromptSection {
            designs: Some(resolved.designs.clone()),
            strategy,
            shots,
            seed,
            handpicked,
            rules,
            learn_rules_from,
        },
        execution: ExecutionSection {
            parallelism: Some(resolved.parallelism),
            rate_limit_per_sec: resolved.rate_limit_per_sec,
            max_output_tokens: resolved.max_output_tokens,
            cache: Some(resolved.cache.clone()),
            runs_root: Some(resolved.runs_root.clone()),
            prices: resolved.prices.clone(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig {
            run_id: Some("t1".into()),
            dataset: DatasetSection {
                dir: Some(PathBuf::from("data/fixture")),
                ..Default::default()
            },
            model: ModelSection {
                id: Some("m".into()),
                backend: Some("scripted".into()),
                script: Some(PathBuf::from("script.json")),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let resolved = resolve(&minimal()).unwrap();
        assert_eq!(resolved.designs.len(), 10);
        assert_eq!(resolved.domain_noun, "entity descriptions");
        assert_eq!(resolved.parallelism, 1);
        assert!(resolved.dataset_dir.is_absolute());
        assert!(resolved.cache.is_absolute());
        assert!(resolved.cache.ends_with("cache/m.jsonl"));
    }

    #[test]
    fn strategy_and_rules_are_mutually_exclusive() {
        let mut config = minimal();
        config.prompt.strategy = Some("related".into());
        config.prompt.shots = Some(6);
        config.prompt.rules = Some(PathBuf::from("rules.txt"));
        let message = match resolve(&config) {
            Err(CliError::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        };
        assert!(message.contains("mutually exclusive"));
    }

    #[test]
    fn shots_outside_the_ladder_are_rejected() {
        let mut config = minimal();
        config.prompt.strategy = Some("random".into());
        for shots in [1, 3, 5, 12] {
            config.prompt.shots = Some(shots);
            assert!(matches!(resolve(&config), Err(CliError::Config(_))), "shots {shots}");
        }
        config.prompt.shots = Some(8);
        assert!(resolve(&config).is_ok());
    }

    #[test]
    fn unknown_design_names_are_rejected() {
        let mut config = minimal();
        config.prompt.designs = Some(vec!["domain-complex-force".into(), "bogus".into()]);
        let message = match resolve(&config) {
            Err(CliError::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        };
        assert!(message.contains("bogus"));
    }

    #[test]
    fn materialized_config_round_trips_through_toml() {
        let mut config = minimal();
        config.prompt.strategy = Some("random".into());
        config.prompt.shots = Some(6);
        config.prompt.seed = Some(7);
        let resolved = resolve(&config).unwrap();
        let text = materialize(&resolved).to_toml_string().unwrap();
        let reparsed: ExperimentConfig = toml::from_str(&text).unwrap();
        let resolved_again = resolve(&reparsed).unwrap();
        assert_eq!(resolved.designs, resolved_again.designs);
        assert_eq!(resolved.strategy, resolved_again.strategy);
        assert_eq!(resolved.cache, resolved_again.cache);
    }
}
