use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{DistractorCorpus, Family, FamilyTable, EntityTable, FactsTable, ToyTaskSpec};
use crate::interventions::{InterpretationConfig, NoisePlan, SearchKind};
use crate::metrics::ScoreMode;
use crate::model::AblationMode;
use crate::trainer::ToyTrainConfig;

use super::HarnessError;

/// Overrides the external scorer endpoint.
pub const SCORER_URL_ENV: &str = "RACEPROBE_SCORER_URL";

/// Inclusive distractor-count range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistractorRange {
    pub min: usize,
    pub max: usize,
}

impl Default for DistractorRange {
    fn default() -> Self {
        Self { min: 0, max: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Entity or facts table; the bundled table for the family otherwise.
    pub table: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub facts_alternatives: usize,
    pub facts_seed: u64,
    /// Pairs per toy slice and seed.
    pub toy_pairs: usize,
    pub toy: ToyTaskSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            table: None,
            corpus: None,
            facts_alternatives: 2,
            facts_seed: 0,
            toy_pairs: 200,
            toy: ToyTaskSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Consecutive layers per block; the last block takes the remainder.
    pub block_size: usize,
    /// Explicit `[start, end)` blocks, replacing `block_size` when present.
    pub blocks: Option<Vec<[usize; 2]>>,
    pub mode: AblationMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            block_size: 5,
            blocks: None,
            mode: AblationMode::Renormalize,
        }
    }
}

impl AblationConfig {
    pub fn resolve_blocks(&self, n_layers: usize) -> Result<Vec<std::ops::Range<usize>>, HarnessError> {
        if let Some(blocks) = &self.blocks {
            return blocks
                .iter()
                .map(|&[a, b]| {
                    if a < b && b <= n_layers {
                        Ok(a..b)
                    } else {
                        Err(HarnessError::Config(format!("ablation block [{a}, {b}) outside 0..{n_layers}")))
                    }
                })
                .collect();
        }
        if self.block_size == 0 {
            return Err(HarnessError::Config("ablation.block_size must be at least 1".into()));
        }
        Ok((0..n_layers)
            .step_by(self.block_size)
            .map(|a| a..(a + self.block_size).min(n_layers))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchingConfig {
    pub kinds: Vec<SearchKind>,
    pub noise: NoisePlan,
}

impl Default for PatchingConfig {
    fn default() -> Self {
        Self {
            kinds: vec![
                SearchKind::CrossPatch,
                SearchKind::Backpatch,
                SearchKind::FrozenBackpatch,
                SearchKind::Noise,
            ],
            noise: NoisePlan::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSettings {
    #[serde(flatten)]
    pub target: InterpretationConfig,
    pub case_sensitive: bool,
    /// Pairs interpreted from the slice; all when absent.
    pub max_pairs: Option<usize>,
}

impl Default for InterpretSettings {
    fn default() -> Self {
        Self {
            target: InterpretationConfig::default(),
            case_sensitive: false,
            max_pairs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScorerConfig {
    Offline,
    External {
        url: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        retries: u32,
    },
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    3
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self::Offline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Checkpoint to load.
    pub model: Option<PathBuf>,
    /// Token table; the byte tokenizer otherwise.
    pub tokens: Option<PathBuf>,
    pub family: Family,
    pub distractors: DistractorRange,
    /// Cue positions to sweep; every valid position when absent.
    pub cue_positions: Option<Vec<usize>>,
    /// Distractor sample seeds; each yields one pair per entity-cue.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    pub score_mode: ScoreMode,
    /// Slice for ablation, patching and interpretation, e.g. `d1c0`. Picked
    /// from behavioral records when absent.
    pub slice: Option<String>,
    /// Normalize attention mass by the head count.
    pub attn_mass_mean_over_heads: bool,
    /// Fraction of the terminal separation that marks the identifiable layer.
    pub lens_fraction: f64,
    pub data: DataConfig,
    pub ablation: AblationConfig,
    pub patching: PatchingConfig,
    pub interpret: InterpretSettings,
    pub scorer: ScorerConfig,
    pub train: ToyTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: None,
            tokens: None,
            family: Family::Toy,
            distractors: DistractorRange::default(),
            cue_positions: None,
            seeds: vec![0, 1, 2],
            out: PathBuf::from("runs"),
            workers: 1,
            score_mode: ScoreMode::Logit,
            slice: None,
            attn_mass_mean_over_heads: false,
            lens_fraction: 0.5,
            data: DataConfig::default(),
            ablation: AblationConfig::default(),
            patching: PatchingConfig::default(),
            interpret: InterpretSettings::default(),
            scorer: ScorerConfig::Offline,
            train: ToyTrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a TOML config. Relative paths inside it resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.model, &mut cfg.tokens, &mut cfg.data.table, &mut cfg.data.corpus]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        Ok(cfg)
    }

    /// Applies `RACEPROBE_SCORER_URL` when set.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(SCORER_URL_ENV) {
            if !url.is_empty() {
                self.scorer = match &self.scorer {
                    ScorerConfig::External { timeout_ms, retries, .. } => ScorerConfig::External {
                        url,
                        timeout_ms: *timeout_ms,
                        retries: *retries,
                    },
                    ScorerConfig::Offline => ScorerConfig::External {
                        url,
                        timeout_ms: default_timeout_ms(),
                        retries: default_retries(),
                    },
                };
            }
        }
    }

    /// Checks ranges and that referenced input files exist. The model
    /// checkpoint is checked when first loaded, since `train-toy` creates it.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let DistractorRange { min, max } = self.distractors;
        if min > max {
            return Err(HarnessError::Config(format!("distractor range {min}..={max} is empty")));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if let Some(cues) = &self.cue_positions {
            if let Some(c) = cues.iter().find(|&&c| c > max) {
                return Err(HarnessError::Config(format!(
                    "cue position {c} is invalid for at most {max} distractors"
                )));
            }
        }
        for p in [&self.tokens, &self.data.table, &self.data.corpus].into_iter().flatten() {
            if !p.exists() {
                return Err(HarnessError::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        if !(0.0..=1.0).contains(&self.lens_fraction) {
            return Err(HarnessError::Config("lens_fraction must lie in [0, 1]".into()));
        }
        if let ScorerConfig::External { url, .. } = &self.scorer {
            if url.is_empty() {
                return Err(HarnessError::Config("external scorer needs a url".into()));
            }
        }
        if let Some(s) = &self.slice {
            parse_slice_key(s)?;
        }
        Ok(())
    }

    /// Every `(distractor count, cue position)` in the sweep.
    pub fn slice_plan(&self) -> Vec<(usize, usize)> {
        let DistractorRange { min, max } = self.distractors;
        (min..=max)
            .flat_map(|n| {
                let cues: Vec<usize> = match &self.cue_positions {
                    Some(c) => c.iter().copied().filter(|&c| c <= n).collect(),
                    None => (0..=n).collect(),
                };
                cues.into_iter().map(move |c| (n, c))
            })
            .collect()
    }

    pub fn family_table(&self) -> Result<FamilyTable, HarnessError> {
        Ok(match (&self.data.table, self.family) {
            (_, Family::Toy) => return Err(HarnessError::Config("the toy family has no table".into())),
            (None, f) => FamilyTable::bundled(f)?,
            (Some(p), Family::Facts) => {
                FamilyTable::Facts(FactsTable::load(p, self.data.facts_alternatives, self.data.facts_seed)?)
            }
            (Some(p), _) => FamilyTable::Entity(EntityTable::load(p)?),
        })
    }

    pub fn corpus(&self) -> Result<DistractorCorpus, HarnessError> {
        Ok(match &self.data.corpus {
            Some(p) => DistractorCorpus::load(p)?,
            None => DistractorCorpus::bundled(),
        })
    }
}

/// Parses `d{n}c{c}`, optionally prefixed by `{family}/`.
pub fn parse_slice_key(key: &str) -> Result<(usize, usize), HarnessError> {
    let tail = key.rsplit('/').next().unwrap_or(key);
    let bad = || HarnessError::Config(format!("slice `{key}` is not of the form d<count>c<cue>"));
    let rest = tail.strip_prefix('d').ok_or_else(bad)?;
    let (n, c) = rest.split_once('c').ok_or_else(bad)?;
    let (n, c): (usize, usize) = (n.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?);
    if c > n {
        return Err(HarnessError::Config(format!("slice `{key}` has cue position beyond its distractors")));
    }
    Ok((n, c))
}
