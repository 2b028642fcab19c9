use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use fairembed_core::arl::ArlTrainConfig;
use fairembed_core::eval::ProbeConfig;
use fairembed_core::metrics::SkewConfig;
use fairembed_core::pac::PacTrainConfig;
use fairembed_core::store::{Format, SplitFractions};
use fairembed_core::synth::{SynthSpec, ZeroShotSpec};
use fairembed_core::{Attribute, Split};

/// Environment variable that replaces `paths.reports`.
pub const REPORT_DIR_ENV: &str = "FAIREMBED_REPORT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One multi-head classifier and one learner for all attributes.
    Joint,
    /// One classifier and one learner stage per attribute.
    Sequential,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::Sequential => "sequential",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Image embedding files. Empty means the three split files in `data`.
    pub embeddings: Vec<PathBuf>,
    /// Caption manifest. Defaults to `data/captions.jsonl`.
    pub captions: Option<PathBuf>,
    /// Where `synth` writes and `debias` puts the debiased set.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    /// Label prompt vectors for the `labels` probe: caption records whose
    /// `text` is a label name of `probe.attribute`.
    pub label_prompts: Option<PathBuf>,
    /// Zero-shot task files (`{"task": .., "records": [..]}`). Empty means a
    /// task generated from the synthetic oracle.
    pub zeroshot_tasks: Vec<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            embeddings: Vec::new(),
            captions: None,
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
            label_prompts: None,
            zeroshot_tasks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeSource {
    Linear,
    Noise,
    Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub source: ProbeSource,
    pub attribute: Attribute,
    pub d: usize,
    pub fit: ProbeConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { source: ProbeSource::Linear, attribute: Attribute::Gender, d: 64, fit: ProbeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub format: Format,
    /// Applied to loaded records that carry no split.
    pub split: SplitFractions,
    /// Images audited; all records when absent.
    pub audit_split: Option<Split>,
    pub skew: SkewConfig,
    pub pac: PacTrainConfig,
    pub arl: ArlTrainConfig,
    pub synth: Option<SynthSpec>,
    pub zeroshot: ZeroShotSpec,
    pub probe: ProbeSettings,
    pub mode: Mode,
    /// Stage order for sequential mode; every vocabulary of the set when empty.
    pub order: Vec<Attribute>,
    /// The one seed of the run. Copied into every component.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            format: Format::Jsonl,
            split: SplitFractions::default(),
            audit_split: None,
            skew: SkewConfig::default(),
            pac: PacTrainConfig::default(),
            arl: ArlTrainConfig::default(),
            synth: None,
            zeroshot: ZeroShotSpec::default(),
            probe: ProbeSettings::default(),
            mode: Mode::Joint,
            order: Vec::new(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key.path=value`
    /// overrides and the report-directory variable, then propagates the seed.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
        if let Some(dir) = std::env::var_os(REPORT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.paths.reports = dir.into();
        }
        cfg.pac.seed = cfg.seed;
        cfg.arl.seed = cfg.seed;
        if let Some(s) = cfg.synth.as_mut() {
            s.seed = cfg.seed;
        }
        cfg.split.validate().context("invalid split fractions")?;
        cfg.skew.validate()?;
        cfg.pac.validate()?;
        cfg.arl.validate()?;
        cfg.probe.fit.validate()?;
        Ok(cfg)
    }

    pub fn captions_path(&self) -> PathBuf {
        self.paths.captions.clone().unwrap_or_else(|| self.paths.data.join("captions.jsonl"))
    }

    pub fn split_file(&self, split: Split) -> PathBuf {
        self.paths.data.join(format!("{}.{}", split.name(), self.format.extension()))
    }

    pub fn embedding_paths(&self) -> Vec<PathBuf> {
        if self.paths.embeddings.is_empty() {
            Split::ALL.iter().map(|&s| self.split_file(s)).collect()
        } else {
            self.paths.embeddings.clone()
        }
    }

    /// Debiased set of the current mode.
    pub fn debiased_path(&self) -> PathBuf {
        self.paths.data.join(format!("debiased-{}.{}", self.mode.name(), self.format.extension()))
    }

    pub fn residuals_path(&self) -> PathBuf {
        self.paths.data.join(format!("residuals-{}.packed", self.mode.name()))
    }

    pub fn oracle_path(&self) -> PathBuf {
        self.paths.data.join("oracle.json")
    }

    pub fn joint_pac_path(&self) -> PathBuf {
        self.paths.checkpoints.join("pac.bin")
    }

    pub fn stage_pac_path(&self, attribute: Attribute) -> PathBuf {
        self.paths.checkpoints.join(format!("pac-{}.bin", attribute.name()))
    }

    pub fn arl_path(&self) -> PathBuf {
        match self.mode {
            Mode::Joint => self.paths.checkpoints.join("arl.bin"),
            Mode::Sequential => self.paths.checkpoints.join("arl-chain.bin"),
        }
    }

    /// Canonical JSON of the effective configuration, the input to the
    /// config hash.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }
}

/// Sets `a.b.c=value` in a JSON tree. The value is parsed as JSON and taken
/// as a plain string when that fails. Missing objects along the path are
/// created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key.path=value");
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let Value::Object(map) = node else {
            bail!("override `{key}`: `{part}` is not inside an object");
        };
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Default::default());
    }
    let Value::Object(map) = node else {
        bail!("override `{key}`: parent is not an object");
    };
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
