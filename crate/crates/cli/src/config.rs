use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xmutest::fusion::LlmClientConfig;
use xmutest::predictor::{DEFAULT_DIM, DEFAULT_MASK};
use xmutest::{Explainer, Language, NgramWeights, ProbeMode, TrainingConfig};

use crate::failure::{Context, Failure, Kind, ResultExt};

pub const API_KEY_ENV: &str = "XMUTEST_LLM_API_KEY";

/// The flat key-value file as written by users; every key is optional and
/// an empty `llm_endpoint` or `llm_fixture` counts as unset.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    corpus: Option<PathBuf>,
    language: Option<String>,
    seed: Option<u64>,
    test_fraction: Option<f64>,
    output_dir: Option<PathBuf>,
    mask_token: Option<String>,
    dim: Option<usize>,
    alpha_stage1: Option<f64>,
    alpha_stage2: Option<f64>,
    epochs_stage1: Option<usize>,
    epochs_stage2: Option<usize>,
    learning_rate: Option<f64>,
    ngram_weights: Option<[f64; 3]>,
    probe: Option<String>,
    llm_endpoint: Option<String>,
    llm_fixture: Option<PathBuf>,
    llm_model: Option<String>,
    llm_timeout_secs: Option<u64>,
    llm_max_retries: Option<u32>,
    llm_prompt_template: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub language: Language,
    pub seed: u64,
    pub test_fraction: f64,
    pub output_dir: PathBuf,
    pub mask_token: String,
    pub dim: usize,
    pub training: TrainingConfig,
    pub explainer: Explainer,
    pub llm: LlmClientConfig,
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides in order, and
    /// validates. Override values are parsed as TOML, falling back to a bare
    /// string.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, Failure> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))
                    .kind(Kind::Config)?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))
                    .kind(Kind::Config)?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            table.insert(key.clone(), parse_value(value));
        }
        let raw: RawConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")
            .kind(Kind::Config)?;
        let cfg = Self::resolve(raw).kind(Kind::Config)?;
        Ok(cfg)
    }

    fn resolve(raw: RawConfig) -> anyhow::Result<Self> {
        let language = match &raw.language {
            Some(s) => s.parse()?,
            None => Language::Other,
        };
        let seed = raw.seed.unwrap_or(0);
        let defaults = TrainingConfig::for_language(language);
        let training = TrainingConfig {
            alpha_stage1: raw.alpha_stage1.unwrap_or(defaults.alpha_stage1),
            alpha_stage2: raw.alpha_stage2.unwrap_or(defaults.alpha_stage2),
            epochs_stage1: raw.epochs_stage1.unwrap_or(defaults.epochs_stage1),
            epochs_stage2: raw.epochs_stage2.unwrap_or(defaults.epochs_stage2),
            learning_rate: raw.learning_rate.unwrap_or(defaults.learning_rate),
            seed,
        };
        training.validate()?;
        let weights = match raw.ngram_weights {
            Some([a, b, c]) => NgramWeights::new(a, b, c)?,
            None => NgramWeights::default(),
        };
        let probe = match &raw.probe {
            Some(s) => s.parse()?,
            None => ProbeMode::default(),
        };
        let test_fraction = raw.test_fraction.unwrap_or(0.15);
        if !(0.0..1.0).contains(&test_fraction) {
            anyhow::bail!("test_fraction = {test_fraction} must lie in [0, 1)");
        }
        let dim = raw.dim.unwrap_or(DEFAULT_DIM);
        if dim == 0 {
            anyhow::bail!("dim must be positive");
        }
        let mask_token = raw.mask_token.unwrap_or_else(|| DEFAULT_MASK.to_string());
        if mask_token.is_empty() || mask_token.chars().any(char::is_whitespace) {
            anyhow::bail!("mask_token {mask_token:?} must be a single nonempty token");
        }
        let base = LlmClientConfig::default();
        let llm = LlmClientConfig {
            endpoint: raw.llm_endpoint.filter(|e| !e.is_empty()),
            model: raw.llm_model.unwrap_or(base.model),
            timeout_secs: raw.llm_timeout_secs.unwrap_or(base.timeout_secs),
            max_retries: raw.llm_max_retries.unwrap_or(base.max_retries),
            prompt_template: raw.llm_prompt_template.unwrap_or(base.prompt_template),
            fixture: raw.llm_fixture.filter(|p| !p.as_os_str().is_empty()),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        };
        Ok(RunConfig {
            corpus: raw.corpus,
            language,
            seed,
            test_fraction,
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("run")),
            mask_token,
            dim,
            training,
            explainer: Explainer::new(weights, probe),
            llm,
        })
    }

    pub fn corpus_path(&self) -> Result<&Path, Failure> {
        self.corpus.as_deref().ok_or_else(|| {
            Failure::new(
                Kind::Config,
                anyhow::anyhow!("no corpus configured (set `corpus` or pass --corpus)"),
            )
        })
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_follow_language() {
        let cfg = RunConfig::load(None, &ov(&[("language", "hindi")])).unwrap();
        assert_eq!(cfg.training.alpha_stage2, 0.7);
        assert_eq!(cfg.training.alpha_stage1, 0.3);
        let cfg = RunConfig::load(None, &ov(&[("language", "en"), ("alpha_stage2", "0.4")])).unwrap();
        assert_eq!(cfg.training.alpha_stage2, 0.4);
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "seed = 3\ncorpus = \"a.jsonl\"\nngram_weights = [1.0, 0.0, 0.0]\n",
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&path), &ov(&[("seed", "9"), ("corpus", "b.jsonl")])).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.training.seed, 9);
        assert_eq!(cfg.corpus.unwrap(), PathBuf::from("b.jsonl"));
        assert_eq!(cfg.explainer.weights.as_array(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for pairs in [
            vec![("ngram_weights", "[0.5, 0.5, 0.5]")],
            vec![("learning_rate", "-1")],
            vec![("test_fraction", "1.0")],
            vec![("probe", "sideways")],
            vec![("no_such_key", "1")],
            vec![("seed", "\"x\"")],
        ] {
            let err = RunConfig::load(None, &ov(&pairs)).unwrap_err();
            assert_eq!(err.kind, Kind::Config, "{pairs:?}");
        }
    }

    #[test]
    fn override_syntax() {
        assert_eq!(parse_override("a = 1").unwrap(), ("a".into(), "1".into()));
        assert!(parse_override("a").is_err());
        assert!(parse_override("=1").is_err());
        assert_eq!(parse_value("x/y.jsonl"), toml::Value::String("x/y.jsonl".into()));
    }
}
