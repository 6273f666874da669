use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{Family, SliceAccuracy, Which};
use crate::interventions::SearchKind;
use crate::metrics::Verdict;
use crate::model::AblationMode;

use super::config::parse_slice_key;
use super::HarnessError;

/// Which prompt role an ablation removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblatedRole {
    Cue,
    Distractors,
}

impl AblatedRole {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cue => "cue",
            Self::Distractors => "distractors",
        }
    }
}

/// What was done to a run, as a compact descriptor such as `ablate:cue:0..2`
/// or `patch:cross`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Intervention {
    None,
    Ablate {
        role: AblatedRole,
        layers: Range<usize>,
        mode: AblationMode,
    },
    Patch(SearchKind),
    Interpret {
        target_layer: usize,
    },
}

impl fmt::Display for Intervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Ablate { role, layers, mode } => {
                write!(f, "ablate:{}:{}..{}", role.as_str(), layers.start, layers.end)?;
                if *mode == AblationMode::PreSoftmaxMask {
                    f.write_str(":mask")?;
                }
                Ok(())
            }
            Self::Patch(kind) => f.write_str(match kind {
                SearchKind::CrossPatch => "patch:cross",
                SearchKind::Backpatch => "patch:back",
                SearchKind::FrozenBackpatch => "patch:frozen",
                SearchKind::Noise => "patch:noise",
            }),
            Self::Interpret { target_layer } => write!(f, "interpret:l{target_layer}"),
        }
    }
}

impl FromStr for Intervention {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || HarnessError::Config(format!("unknown intervention descriptor `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        Ok(match parts.as_slice() {
            ["none"] => Self::None,
            ["patch", k] => Self::Patch(match *k {
                "cross" => SearchKind::CrossPatch,
                "back" => SearchKind::Backpatch,
                "frozen" => SearchKind::FrozenBackpatch,
                "noise" => SearchKind::Noise,
                _ => return Err(bad()),
            }),
            ["interpret", l] => Self::Interpret {
                target_layer: l.strip_prefix('l').and_then(|l| l.parse().ok()).ok_or_else(bad)?,
            },
            ["ablate", role, range, rest @ ..] => {
                let role = match *role {
                    "cue" => AblatedRole::Cue,
                    "distractors" => AblatedRole::Distractors,
                    _ => return Err(bad()),
                };
                let (a, b) = range.split_once("..").ok_or_else(bad)?;
                let layers = a.parse().map_err(|_| bad())?..b.parse().map_err(|_| bad())?;
                let mode = match rest {
                    [] => AblationMode::Renormalize,
                    ["mask"] => AblationMode::PreSoftmaxMask,
                    _ => return Err(bad()),
                };
                Self::Ablate { role, layers, mode }
            }
            _ => return Err(bad()),
        })
    }
}

impl From<Intervention> for String {
    fn from(i: Intervention) -> String {
        i.to_string()
    }
}

impl TryFrom<String> for Intervention {
    type Error = HarnessError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// One grid cell of a patch search, without its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCell {
    pub source_layer: usize,
    pub target_layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample: Option<usize>,
}

/// Per-record measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    /// Log-odds of the answer-position state at layers `0..=L`.
    Lens { log_odds: Vec<f64> },
    /// Attention mass on the subject token at layers `0..L`.
    AttnMass { subject: usize, mass: Vec<f64> },
    /// This question's correctness in every search cell.
    Patch {
        cells: Vec<PatchCell>,
        cell_correct: Vec<bool>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        position_offset: Option<i64>,
    },
    /// Open-ended interpretation of the subject state per source layer.
    Interpretation {
        sense: String,
        layers: Vec<usize>,
        texts: Vec<String>,
        token_counts: Vec<usize>,
        verdicts: Vec<Verdict>,
    },
}

/// One scored question. Wall-clock times live in the run manifest so that
/// record files replay byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub prompt_id: String,
    pub family: Family,
    pub slice: String,
    pub which: Which,
    /// `Some(true)` when the model answered yes.
    pub answer: Option<bool>,
    pub correct: bool,
    pub pair_id: String,
    pub intervention: Intervention,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Payload>,
}

impl ExperimentRecord {
    /// `(n_distractors, cue_position)` of the record's slice.
    pub fn slice_key(&self) -> Result<(usize, usize), HarnessError> {
        parse_slice_key(&self.slice)
    }

    /// Command line that regenerates this record.
    pub fn replay_command(&self, config: &Path) -> String {
        let seeds: String = self.seeds.iter().map(|s| format!(" --seed {s}")).collect();
        format!(
            "raceprobe {} --config {}{seeds} --pair {}",
            self.run_id.split('/').next().unwrap_or_default(),
            config.display(),
            self.pair_id
        )
    }
}

pub fn question_id(pair_id: &str, which: Which) -> String {
    format!("{pair_id}#{}", which.as_str())
}

/// Serializes records as one JSON object per line.
pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let file = std::fs::File::open(path)
        .map_err(|e| HarnessError::Config(format!("cannot open records {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| HarnessError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Checks that every `(intervention, pair id)` holds exactly one yes-record
/// and one no-record.
pub fn check_pairing(records: &[ExperimentRecord]) -> Result<(), HarnessError> {
    let mut seen: BTreeMap<(String, &str), [usize; 2]> = BTreeMap::new();
    for r in records {
        let slot = seen.entry((r.intervention.to_string(), r.pair_id.as_str())).or_default();
        slot[(r.which == Which::No) as usize] += 1;
    }
    match seen.iter().find(|(_, c)| **c != [1, 1]) {
        Some(((i, p), c)) => Err(HarnessError::Data(format!(
            "pair `{p}` under `{i}` has {} yes and {} no records",
            c[0], c[1]
        ))),
        None => Ok(()),
    }
}

/// Pairs correct under each `(intervention, slice)`, in first-seen order.
/// A pure fold over the records.
pub fn pair_tallies(records: &[ExperimentRecord]) -> Result<Vec<PairTally>, HarnessError> {
    check_pairing(records)?;
    let mut order: Vec<(String, String)> = Vec::new();
    let mut pairs: BTreeMap<(String, String), BTreeMap<&str, bool>> = BTreeMap::new();
    for r in records {
        let key = (r.intervention.to_string(), r.slice.clone());
        if !pairs.contains_key(&key) {
            order.push(key.clone());
        }
        let ok = pairs.entry(key).or_default().entry(r.pair_id.as_str()).or_insert(true);
        *ok &= r.correct;
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let p = &pairs[&key];
            PairTally {
                intervention: key.0.clone(),
                slice: key.1.clone(),
                pairs: p.len(),
                correct: p.values().filter(|&&c| c).count(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTally {
    pub intervention: String,
    pub slice: String,
    pub pairs: usize,
    pub correct: usize,
}

impl PairTally {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.pairs.max(1) as f64
    }
}

/// Unintervened pair accuracy per slice, recomputed from records.
pub fn accuracy_table(records: &[ExperimentRecord]) -> Result<Vec<SliceAccuracy>, HarnessError> {
    let family = |slice: &str| -> Result<Family, HarnessError> {
        records
            .iter()
            .find(|r| r.slice == slice)
            .map(|r| r.family)
            .ok_or_else(|| HarnessError::Data(format!("no records for slice {slice}")))
    };
    pair_tallies(records)?
        .into_iter()
        .filter(|t| t.intervention == "none")
        .map(|t| {
            let (n, c) = parse_slice_key(&t.slice)?;
            Ok(SliceAccuracy {
                family: family(&t.slice)?,
                n_distractors: n,
                cue_position: c,
                accuracy: t.accuracy(),
                pairs: t.pairs,
            })
        })
        .collect()
}

/// Timing and provenance of each command run in an output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub run_id: String,
    pub version: String,
    pub config: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub started_unix: u64,
    pub wall_seconds: f64,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn load_or_default(out: &Path) -> Self {
        std::fs::read_to_string(Self::path(out))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    pub fn record(out: &Path, command: &str, entry: ManifestEntry) -> Result<(), HarnessError> {
        let mut m = Self::load_or_default(out);
        m.runs.insert(command.to_string(), entry);
        std::fs::create_dir_all(out)?;
        std::fs::write(Self::path(out), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(pair: &str, which: Which, correct: bool, intervention: Intervention) -> ExperimentRecord {
        ExperimentRecord {
            run_id: "r".into(),
            prompt_id: question_id(pair, which),
            family: Family::Toy,
            slice: "toy/d1c0".into(),
            which,
            answer: Some(correct == which.gold_is_yes()),
            correct,
            pair_id: pair.into(),
            intervention,
            seeds: vec![0],
            payload: None,
        }
    }

    #[test]
    fn descriptors_round_trip() {
        let all = [
            Intervention::None,
            Intervention::Ablate {
                role: AblatedRole::Cue,
                layers: 0..2,
                mode: AblationMode::Renormalize,
            },
            Intervention::Ablate {
                role: AblatedRole::Distractors,
                layers: 5..10,
                mode: AblationMode::PreSoftmaxMask,
            },
            Intervention::Patch(SearchKind::CrossPatch),
            Intervention::Patch(SearchKind::Backpatch),
            Intervention::Patch(SearchKind::FrozenBackpatch),
            Intervention::Patch(SearchKind::Noise),
            Intervention::Interpret { target_layer: 3 },
        ];
        for i in all {
            assert_eq!(i.to_string().parse::<Intervention>().unwrap(), i);
        }
        assert!("ablate:cue:2".parse::<Intervention>().is_err());
        assert!("patch:sideways".parse::<Intervention>().is_err());
    }

    #[test]
    fn records_serialize_one_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let rs = vec![
            rec("p", Which::Yes, true, Intervention::None),
            rec("p", Which::No, false, Intervention::None),
        ];
        write_records(&path, &rs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"intervention\":\"none\""));
        assert_eq!(read_records(&path).unwrap(), rs);
    }

    #[test]
    fn pairing_is_enforced() {
        let rs = vec![rec("p", Which::Yes, true, Intervention::None)];
        assert!(check_pairing(&rs).is_err());
        let rs = vec![
            rec("p", Which::Yes, true, Intervention::None),
            rec("p", Which::Yes, true, Intervention::None),
        ];
        assert!(check_pairing(&rs).is_err());
    }

    proptest! {
        #[test]
        fn accuracy_table_is_a_pure_fold(outcomes in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
            let mut rs = Vec::new();
            for (i, (y, n)) in outcomes.iter().enumerate() {
                rs.push(rec(&format!("p{i}"), Which::Yes, *y, Intervention::None));
                rs.push(rec(&format!("p{i}"), Which::No, *n, Intervention::None));
            }
            let t = accuracy_table(&rs).unwrap();
            prop_assert_eq!(t.len(), 1);
            let want = outcomes.iter().filter(|(y, n)| *y && *n).count();
            prop_assert_eq!(t[0].accuracy, want as f64 / outcomes.len() as f64);
            prop_assert_eq!(t[0].pairs, outcomes.len());
            // order of records does not matter
            rs.reverse();
            prop_assert_eq!(accuracy_table(&rs).unwrap(), t);
        }
    }
}
