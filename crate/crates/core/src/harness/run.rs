use std::collections::BTreeMap;
use std::fs::File;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use statrs::statistics::{Data, OrderStatistics};

use crate::datasets::{
    gen_family, gen_toy_slice, select_partition, slice_id, DatasetSlice, DistractorCorpus, Family, FamilyTable,
    PromptSpec, SliceAccuracy, Which,
};
use crate::interventions::{
    ablate_attention, backpatch_search, cross_patch_search, even_layers, noise_baseline, open_ended_interpret,
    score_pair_with, AblationPlan, PatchMode, PreparedPair, SearchKind, SearchResult,
};
use crate::metrics::{
    attention_mass, autoscore_interpretation, cumulative_accuracy, lens_separation, lens_trajectory,
    identifiable_layer, EvalPartition, LensTrajectory, PairOutcome, QuestionOutcome, Scorer, SenseKeywords,
};
use crate::model::{answer_logit_pair, forward, load_weights, Capture, HookSet, ModelParams, TokenTable, Tokenizer};
use crate::tensor::{stream_label, RngStream};
use crate::trainer;

use super::config::{parse_slice_key, ExperimentConfig, ScorerConfig};
use super::records::{
    accuracy_table, pair_tallies, question_id, read_records, write_records, AblatedRole, ExperimentRecord,
    Intervention, PatchCell, Payload,
};
use super::scorer::HttpScorer;
use super::stats::sign_test;
use super::HarnessError;

type Result<T> = std::result::Result<T, HarnessError>;

/// A configured experiment context: model, tokenizer, tables and worker pool.
pub struct Harness {
    pub config: ExperimentConfig,
    pub config_path: Option<PathBuf>,
    pub tokenizer: Tokenizer,
    /// Restricts pair-level commands to one pair id. Records then go to
    /// `<out>/replay/` so full runs are not overwritten.
    pub pair: Option<String>,
    params: OnceLock<ModelParams>,
    table: Option<FamilyTable>,
    corpus: Option<DistractorCorpus>,
    pool: rayon::ThreadPool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenDataSummary {
    pub slices: Vec<(String, usize)>,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub eval_accuracy: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BehavioralSummary {
    pub table: Vec<SliceAccuracy>,
    pub partition: Option<SliceAccuracy>,
    pub records: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct LensSummary {
    pub slices: Vec<String>,
    /// Per slice, `diff_y` at layers `0..=L`.
    pub diff_y: Vec<Vec<Option<f64>>>,
    pub diff_n: Vec<Vec<Option<f64>>>,
    pub identifiable: Vec<(Option<usize>, Option<usize>)>,
    pub records: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttnMassSummary {
    pub slices: Vec<String>,
    /// Per slice, mean mass over both questions at layers `0..L`.
    pub mean: Vec<Vec<f64>>,
    pub records: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationBlock {
    pub layers: Range<usize>,
    pub cue_accuracy: f64,
    pub distractor_accuracy: f64,
    /// One-sided sign test that cue ablation lowers pair accuracy.
    pub cue_drop_p: f64,
    /// One-sided sign test that distractor ablation lowers pair accuracy.
    pub distractor_drop_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub slice: String,
    pub pairs: usize,
    pub baseline: f64,
    pub blocks: Vec<AblationBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindSummary {
    pub kind: SearchKind,
    pub pairs: usize,
    pub baseline: f64,
    pub success: f64,
    pub lift: f64,
    /// Largest possible lift, `1 - baseline`.
    pub bound: f64,
    /// Pairs wrong at baseline that some cell fixed.
    pub fixed: usize,
    /// One-sided paired sign test of this search's success against the
    /// noise search's success; absent without a noise search.
    pub p_vs_noise: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchingSummary {
    pub slice: String,
    pub kinds: Vec<KindSummary>,
}

impl PatchingSummary {
    pub fn kind(&self, kind: SearchKind) -> Option<&KindSummary> {
        self.kinds.iter().find(|k| k.kind == kind)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpretSummary {
    pub layers: Vec<usize>,
    /// `(split, cumulative accuracy per layer)`.
    pub curves: Vec<(String, Vec<f64>)>,
    pub fallbacks: usize,
    pub transcripts: PathBuf,
}

impl Harness {
    /// Validates the config and loads tables. The model loads on first use.
    pub fn new(config: ExperimentConfig, config_path: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let tokenizer = match &config.tokens {
            Some(p) => Tokenizer::Table(TokenTable::load(p)?),
            None => Tokenizer::Byte,
        };
        let (table, corpus) = if config.family == Family::Toy {
            (None, None)
        } else {
            (Some(config.family_table()?), Some(config.corpus()?))
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
        Ok(Self {
            config,
            config_path,
            tokenizer,
            pair: None,
            params: OnceLock::new(),
            table,
            corpus,
            pool,
        })
    }

    /// Uses `params` instead of loading the configured checkpoint.
    pub fn with_params(self, params: ModelParams) -> Self {
        let _ = self.params.set(params);
        self
    }

    pub fn with_pair(mut self, pair: Option<String>) -> Self {
        self.pair = pair;
        self
    }

    pub fn params(&self) -> Result<&ModelParams> {
        if let Some(p) = self.params.get() {
            return Ok(p);
        }
        let path = self
            .config
            .model
            .as_ref()
            .ok_or_else(|| HarnessError::Config("no model checkpoint configured (--model)".into()))?;
        if !path.exists() {
            return Err(HarnessError::Config(format!("model checkpoint {} does not exist", path.display())));
        }
        let params = load_weights(path)?;
        Ok(self.params.get_or_init(|| params))
    }

    pub fn run_id(&self, command: &str) -> String {
        let seeds: Vec<String> = self.config.seeds.iter().map(u64::to_string).collect();
        format!("{command}/s{}", seeds.join("-"))
    }

    pub fn records_dir(&self) -> PathBuf {
        self.config
            .out
            .join(if self.pair.is_some() { "replay" } else { "records" })
    }

    fn family(&self) -> Family {
        self.config.family
    }

    /// All prompts of one slice, restricted to the pair filter.
    pub fn slice(&self, n: usize, c: usize) -> Result<DatasetSlice> {
        let seeds = &self.config.seeds;
        let mut slice = match (&self.table, &self.corpus) {
            (Some(table), Some(corpus)) => gen_family(self.family(), table, n, c, corpus, seeds)?,
            _ => {
                let mut prompts = Vec::new();
                for (k, &seed) in seeds.iter().enumerate() {
                    let s = gen_toy_slice(&self.config.data.toy, n, c, self.config.data.toy_pairs, seed)?;
                    prompts.extend(s.prompts.into_iter().map(|mut p| {
                        if seeds.len() > 1 {
                            p.id = format!("{}/s{k}", p.id);
                        }
                        p
                    }));
                }
                DatasetSlice {
                    family: Family::Toy,
                    n_distractors: n,
                    cue_position: c,
                    sample_seeds: seeds.clone(),
                    prompts,
                }
            }
        };
        if let Some(pair) = &self.pair {
            slice.prompts.retain(|p| &p.id == pair);
        }
        Ok(slice)
    }

    fn par_map<T, F>(&self, prompts: &[PromptSpec], f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&PromptSpec) -> Result<T> + Sync + Send,
    {
        self.pool.install(|| prompts.par_iter().map(&f).collect())
    }

    fn record(&self, command: &str, spec: &PromptSpec, slice: &str, which: Which, intervention: Intervention) -> ExperimentRecord {
        ExperimentRecord {
            run_id: self.run_id(command),
            prompt_id: question_id(&spec.id, which),
            family: spec.family,
            slice: slice.to_string(),
            which,
            answer: None,
            correct: false,
            pair_id: spec.id.clone(),
            intervention,
            seeds: self.config.seeds.clone(),
            payload: None,
        }
    }

    fn scored(&self, command: &str, spec: &PromptSpec, slice: &str, o: &PairOutcome, intervention: Intervention) -> [ExperimentRecord; 2] {
        let one = |q: &QuestionOutcome| {
            let mut r = self.record(command, spec, slice, q.which, intervention.clone());
            r.answer = q.answered_yes;
            r.correct = q.correct;
            r
        };
        [one(&o.yes), one(&o.no)]
    }

    fn baseline(&self, pair: &PreparedPair) -> Result<PairOutcome> {
        let none = HookSet::new();
        Ok(score_pair_with(self.params()?, &self.tokenizer, pair, &none, &none, self.config.score_mode)?)
    }

    /// Writes each slice as one prompt spec per line under `<out>/slices/`.
    pub fn gen_data(&self) -> Result<GenDataSummary> {
        let dir = self.config.out.join("slices").join(self.family().as_str());
        std::fs::create_dir_all(&dir)?;
        let mut slices = Vec::new();
        for (n, c) in self.config.slice_plan() {
            let s = self.slice(n, c)?;
            let mut text = String::new();
            for p in &s.prompts {
                text.push_str(&serde_json::to_string(p)?);
                text.push('\n');
            }
            std::fs::write(dir.join(format!("d{n}c{c}.jsonl")), text)?;
            slices.push((s.id(), s.pair_count()));
        }
        Ok(GenDataSummary { slices, dir })
    }

    /// Trains the toy model. The checkpoint goes to the configured model path
    /// or `<out>/toy.rctm`.
    pub fn train_toy(&self) -> Result<TrainSummary> {
        let mut cfg = self.config.train.clone();
        let checkpoint = self.config.model.clone().unwrap_or_else(|| self.config.out.join("toy.rctm"));
        let curve = self.config.out.join("train_curve.csv");
        if let Some(dir) = checkpoint.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::create_dir_all(&self.config.out)?;
        cfg.train.checkpoint = Some(checkpoint.clone());
        cfg.train.curve = Some(curve.clone());
        let start = Instant::now();
        let outcome = self.pool.install(|| trainer::train_toy(&cfg))?;
        let _ = self.params.set(outcome.params);
        Ok(TrainSummary {
            checkpoint,
            curve,
            eval_accuracy: outcome.eval_accuracy,
            steps: cfg.train.steps,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Pair accuracy for every slice of the sweep, then partition selection.
    pub fn run_behavioral(&self) -> Result<BehavioralSummary> {
        let command = "run-behavioral";
        let mut records = Vec::new();
        for (n, c) in self.config.slice_plan() {
            let slice = self.slice(n, c)?;
            let sid = slice.id();
            let per_pair = self.par_map(&slice.prompts, |spec| {
                let pair = PreparedPair::new(spec, &self.tokenizer)?;
                Ok(self.scored(command, spec, &sid, &self.baseline(&pair)?, Intervention::None))
            })?;
            records.extend(per_pair.into_iter().flatten());
        }
        let path = self.records_dir().join("behavioral.jsonl");
        write_records(&path, &records)?;

        let table = accuracy_table(&records)?;
        let mut w = long_csv(&self.config.out.join("behavioral.csv"))?;
        for t in &table {
            let sid = t.slice_id();
            row(&mut w, None, "pair_accuracy", t.family, &sid, "all", Some(t.accuracy))?;
            for which in Which::BOTH {
                let qs: Vec<&ExperimentRecord> = records.iter().filter(|r| r.slice == sid && r.which == which).collect();
                let acc = qs.iter().filter(|r| r.correct).count() as f64 / qs.len().max(1) as f64;
                row(&mut w, None, "question_accuracy", t.family, &sid, which.as_str(), Some(acc))?;
            }
        }
        w.flush()?;

        let partition = select_partition(&table).ok().cloned();
        let mut w = csv::Writer::from_path(self.config.out.join("partition.csv"))?;
        w.write_record(["model", "dataset", "count", "cue_index", "accuracy"])?;
        if let Some(p) = &partition {
            let model = self
                .config
                .model
                .as_ref()
                .and_then(|m| m.file_stem())
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "model".into());
            w.write_record([
                model,
                p.family.to_string(),
                p.n_distractors.to_string(),
                p.cue_position.to_string(),
                p.accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(BehavioralSummary {
            table,
            partition,
            records: path,
        })
    }

    fn behavioral_records(&self) -> Result<Vec<ExperimentRecord>> {
        let path = self.config.out.join("records").join("behavioral.jsonl");
        if !path.exists() {
            return Err(HarnessError::Config(format!(
                "{} is missing; run run-behavioral first",
                path.display()
            )));
        }
        read_records(&path)
    }

    /// Logit-lens trajectories of every behavioral record, split by gold
    /// answer and correctness.
    pub fn run_lens(&self) -> Result<LensSummary> {
        let command = "run-lens";
        let behavioral = self.behavioral_records()?;
        let by_prompt: BTreeMap<&str, &ExperimentRecord> = behavioral
            .iter()
            .filter(|r| r.intervention == Intervention::None)
            .map(|r| (r.prompt_id.as_str(), r))
            .collect();
        let mut slices: Vec<String> = Vec::new();
        for r in &behavioral {
            if !slices.contains(&r.slice) {
                slices.push(r.slice.clone());
            }
        }
        let params = self.params()?;
        let mut records = Vec::new();
        for sid in &slices {
            let (n, c) = parse_slice_key(sid)?;
            let slice = self.slice(n, c)?;
            let per_pair = self.par_map(&slice.prompts, |spec| {
                let pair = PreparedPair::new(spec, &self.tokenizer)?;
                Which::BOTH
                    .iter()
                    .map(|&which| {
                        let q = pair.question(which);
                        let trace = forward(params, &q.ids, &HookSet::new(), Capture::RESID)?;
                        let log_odds = lens_trajectory(&trace, params, &q.answers)?;
                        let id = question_id(&spec.id, which);
                        let b = by_prompt
                            .get(id.as_str())
                            .ok_or_else(|| HarnessError::Data(format!("no behavioral record for {id}")))?;
                        let mut r = self.record(command, spec, sid, which, Intervention::None);
                        r.answer = b.answer;
                        r.correct = b.correct;
                        r.payload = Some(Payload::Lens { log_odds });
                        Ok(r)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            records.extend(per_pair.into_iter().flatten());
        }
        let path = self.records_dir().join("lens.jsonl");
        write_records(&path, &records)?;

        let n_layers = params.config.n_layers;
        let mut w = long_csv(&self.config.out.join("lens.csv"))?;
        let mut summary = LensSummary {
            slices: Vec::new(),
            diff_y: Vec::new(),
            diff_n: Vec::new(),
            identifiable: Vec::new(),
            records: path,
        };
        let all = format!("{}/all", self.family());
        for sid in slices.iter().chain(std::iter::once(&all)) {
            let part = EvalPartition::new(
                records
                    .iter()
                    .filter(|r| sid == &all || &r.slice == sid)
                    .filter_map(|r| match &r.payload {
                        Some(Payload::Lens { log_odds }) => Some(LensTrajectory {
                            question_id: r.prompt_id.clone(),
                            which: r.which,
                            correct: r.correct,
                            values: log_odds.clone(),
                        }),
                        _ => None,
                    })
                    .collect(),
            );
            let (mut dy, mut dn) = (Vec::new(), Vec::new());
            for l in 0..=n_layers {
                let (y, n) = lens_separation(&part, l);
                dy.push(y);
                dn.push(n);
                row(&mut w, Some(l), "diff", self.family(), sid, "yes", y)?;
                row(&mut w, Some(l), "diff", self.family(), sid, "no", n)?;
                for (split, set) in [
                    ("yes_correct", &part.yes_correct),
                    ("yes_incorrect", &part.yes_incorrect),
                    ("no_correct", &part.no_correct),
                    ("no_incorrect", &part.no_incorrect),
                ] {
                    let vals: Vec<f64> = set.iter().map(|t| t.values[l]).collect();
                    let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                    row(&mut w, Some(l), "log_odds_mean", self.family(), sid, split, mean)?;
                }
            }
            let fraction = self.config.lens_fraction;
            summary
                .identifiable
                .push((identifiable_layer(&dy, fraction), identifiable_layer(&dn, fraction)));
            summary.slices.push(sid.clone());
            summary.diff_y.push(dy);
            summary.diff_n.push(dn);
        }
        w.flush()?;
        Ok(summary)
    }

    /// Attention mass on the subject token per layer.
    pub fn run_attn_mass(&self) -> Result<AttnMassSummary> {
        let command = "run-attn-mass";
        let params = self.params()?;
        let normalize = self.config.attn_mass_mean_over_heads;
        let capture = Capture {
            attn: true,
            ..Capture::NONE
        };
        let mut records = Vec::new();
        let mut slices = Vec::new();
        for (n, c) in self.config.slice_plan() {
            let slice = self.slice(n, c)?;
            let sid = slice.id();
            let per_pair = self.par_map(&slice.prompts, |spec| {
                let pair = PreparedPair::new(spec, &self.tokenizer)?;
                Which::BOTH
                    .iter()
                    .map(|&which| {
                        let q = pair.question(which);
                        let trace = forward(params, &q.ids, &HookSet::new(), capture)?;
                        let s = q.roles.subject;
                        let mass = (0..params.config.n_layers)
                            .map(|l| attention_mass(&trace, s, l, normalize))
                            .collect::<std::result::Result<Vec<_>, _>>()?;
                        let (y, n) = answer_logit_pair(&trace, &q.answers);
                        let mut r = self.record(command, spec, &sid, which, Intervention::None);
                        r.answer = Some(y > n);
                        r.correct = (y > n) == which.gold_is_yes();
                        r.payload = Some(Payload::AttnMass { subject: s, mass });
                        Ok(r)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            records.extend(per_pair.into_iter().flatten());
            slices.push(sid);
        }
        let path = self.records_dir().join("attn_mass.jsonl");
        write_records(&path, &records)?;

        let mut w = long_csv(&self.config.out.join("attn_mass.csv"))?;
        let mut means = Vec::new();
        for sid in &slices {
            let masses = |which: Option<Which>| -> Vec<&Vec<f64>> {
                records
                    .iter()
                    .filter(|r| &r.slice == sid && which.is_none_or(|w| r.which == w))
                    .filter_map(|r| match &r.payload {
                        Some(Payload::AttnMass { mass, .. }) => Some(mass),
                        _ => None,
                    })
                    .collect()
            };
            for which in Which::BOTH {
                let ms = masses(Some(which));
                for l in 0..params.config.n_layers {
                    let vals: Vec<f64> = ms.iter().map(|m| m[l]).collect();
                    if vals.is_empty() {
                        continue;
                    }
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    row(&mut w, Some(l), "attn_mass_mean", self.family(), sid, which.as_str(), Some(mean))?;
                    let mut data = Data::new(vals);
                    for (name, q) in [("attn_mass_p25", 0.25), ("attn_mass_p50", 0.5), ("attn_mass_p75", 0.75)] {
                        row(&mut w, Some(l), name, self.family(), sid, which.as_str(), Some(data.quantile(q)))?;
                    }
                }
            }
            let all = masses(None);
            means.push(
                (0..params.config.n_layers)
                    .map(|l| all.iter().map(|m| m[l]).sum::<f64>() / all.len().max(1) as f64)
                    .collect(),
            );
        }
        w.flush()?;
        Ok(AttnMassSummary {
            slices,
            mean: means,
            records: path,
        })
    }

    /// The slice analysed by ablation, patching and interpretation: the
    /// configured one, the one named by the pair filter, or the partition
    /// chosen from behavioral records.
    pub fn target_slice(&self) -> Result<(usize, usize)> {
        if let Some(s) = &self.config.slice {
            return parse_slice_key(s);
        }
        if let Some(p) = &self.pair {
            let key = p
                .split('/')
                .nth(1)
                .ok_or_else(|| HarnessError::Config(format!("pair id `{p}` names no slice")))?;
            return parse_slice_key(key);
        }
        let table = accuracy_table(&self.behavioral_records()?)?;
        let p = select_partition(&table)?;
        Ok((p.n_distractors, p.cue_position))
    }

    /// Pair accuracy with cue or distractor tokens hidden from every other
    /// position, block by block.
    pub fn run_ablation(&self) -> Result<AblationSummary> {
        let command = "run-ablation";
        let params = self.params()?;
        let blocks = self.config.ablation.resolve_blocks(params.config.n_layers)?;
        let (n, c) = self.target_slice()?;
        let slice = self.slice(n, c)?;
        let sid = slice.id();
        let prepared = self.par_map(&slice.prompts, |spec| Ok(PreparedPair::new(spec, &self.tokenizer)?))?;
        let unresolved: Vec<&str> = prepared
            .iter()
            .filter(|p| {
                [&p.yes, &p.no]
                    .iter()
                    .any(|q| q.roles.cue.is_empty() || (n > 0 && q.roles.distractors.is_empty()))
            })
            .map(|p| p.pair_id.as_str())
            .collect();
        if !unresolved.is_empty() {
            return Err(HarnessError::Data(format!(
                "role spans resolve to no tokens for: {}",
                unresolved.join(", ")
            )));
        }
        let mode = self.config.ablation.mode;
        let per_pair = self.par_map(&slice.prompts, |spec| {
            let pair = PreparedPair::new(spec, &self.tokenizer)?;
            let mut out = self.scored(command, spec, &sid, &self.baseline(&pair)?, Intervention::None).to_vec();
            for block in &blocks {
                for role in [AblatedRole::Cue, AblatedRole::Distractors] {
                    let hooks = |which: Which| {
                        let q = pair.question(which);
                        let ablate = match role {
                            AblatedRole::Cue => q.roles.cue.clone(),
                            AblatedRole::Distractors => q.roles.distractors.clone(),
                        };
                        ablate_attention(
                            &AblationPlan {
                                ablate,
                                n_tokens: q.ids.len(),
                                layers: block.clone(),
                                mode,
                            },
                            &params.config,
                        )
                    };
                    let o = score_pair_with(
                        params,
                        &self.tokenizer,
                        &pair,
                        &hooks(Which::Yes)?,
                        &hooks(Which::No)?,
                        self.config.score_mode,
                    )?;
                    let i = Intervention::Ablate {
                        role,
                        layers: block.clone(),
                        mode,
                    };
                    out.extend(self.scored(command, spec, &sid, &o, i));
                }
            }
            Ok(out)
        })?;
        let records: Vec<ExperimentRecord> = per_pair.into_iter().flatten().collect();
        write_records(&self.records_dir().join("ablation.jsonl"), &records)?;
        let summary = summarize_ablation(&records)?;

        let mut w = long_csv(&self.config.out.join("ablation.csv"))?;
        row(&mut w, None, "pair_accuracy", self.family(), &sid, "baseline", Some(summary.baseline))?;
        for b in &summary.blocks {
            let start = Some(b.layers.start);
            row(&mut w, start, "block_end", self.family(), &sid, "all", Some(b.layers.end as f64))?;
            row(&mut w, start, "pair_accuracy", self.family(), &sid, "cue", Some(b.cue_accuracy))?;
            row(&mut w, start, "pair_accuracy", self.family(), &sid, "distractors", Some(b.distractor_accuracy))?;
        }
        w.flush()?;
        Ok(summary)
    }

    /// Cross-patching, backpatching, frozen backpatching and the noise
    /// control on the target slice.
    pub fn run_patching(&self) -> Result<PatchingSummary> {
        let command = "run-patching";
        let params = self.params()?;
        let (n, c) = self.target_slice()?;
        let slice = self.slice(n, c)?;
        let sid = slice.id();
        let mode = self.config.score_mode;
        let kinds = self.config.patching.kinds.clone();
        let noise = self.config.patching.noise.clone();
        let seed = self.config.seeds[0];
        let per_pair = self.par_map(&slice.prompts, |spec| {
            let pair = PreparedPair::new(spec, &self.tokenizer)?;
            let base = self.baseline(&pair)?;
            let mut out = Vec::new();
            for &kind in &kinds {
                let tok = &self.tokenizer;
                let result: SearchResult = match kind {
                    SearchKind::CrossPatch => cross_patch_search(params, tok, &spec.without_distractors()?, spec, mode)?,
                    SearchKind::Backpatch => backpatch_search(params, tok, spec, PatchMode::Single, mode)?,
                    SearchKind::FrozenBackpatch => backpatch_search(params, tok, spec, PatchMode::Frozen, mode)?,
                    SearchKind::Noise => {
                        let mut rng = RngStream::new(seed, stream_label(&format!("noise/{}", spec.id)));
                        noise_baseline(params, tok, spec, &noise, &mut rng, mode)?
                    }
                };
                let cells: Vec<PatchCell> = result
                    .cells
                    .iter()
                    .map(|c| PatchCell {
                        source_layer: c.source_layer,
                        target_layer: c.target_layer,
                        noise_factor: c.noise_factor,
                        resample: c.resample,
                    })
                    .collect();
                for mut r in self.scored(command, spec, &sid, &base, Intervention::Patch(kind)) {
                    let cell_correct = result
                        .cells
                        .iter()
                        .map(|c| if r.which == Which::Yes { c.yes_correct } else { c.no_correct })
                        .collect();
                    r.payload = Some(Payload::Patch {
                        cells: cells.clone(),
                        cell_correct,
                        position_offset: result.position_offset,
                    });
                    out.push(r);
                }
            }
            Ok(out)
        })?;
        let records: Vec<ExperimentRecord> = per_pair.into_iter().flatten().collect();
        write_records(&self.records_dir().join("patching.jsonl"), &records)?;
        let summary = summarize_patching(&records)?;

        let mut w = long_csv(&self.config.out.join("patching.csv"))?;
        for k in &summary.kinds {
            let split = Intervention::Patch(k.kind).to_string();
            let split = split.trim_start_matches("patch:");
            for (metric, v) in [
                ("baseline", k.baseline),
                ("success", k.success),
                ("lift", k.lift),
                ("bound", k.bound),
            ] {
                row(&mut w, None, metric, self.family(), &sid, split, Some(v))?;
            }
        }
        w.flush()?;
        write_patch_grid(&self.config.out.join("patch_grid.csv"), &records)?;
        Ok(summary)
    }

    /// Decodes the subject state of each target-slice pair (and of its
    /// no-distractor counterpart) through the interpretation prompt.
    pub fn run_interpret(&self) -> Result<InterpretSummary> {
        let params = self.params()?;
        let settings = &self.config.interpret;
        let (n, c) = self.target_slice()?;
        let mut slice = self.slice(n, c)?;
        if let Some(m) = settings.max_pairs {
            slice.prompts.truncate(m);
        }
        let external = match &self.config.scorer {
            ScorerConfig::Offline => None,
            ScorerConfig::External {
                url,
                timeout_ms,
                retries,
            } => Some(HttpScorer::new(url, std::time::Duration::from_millis(*timeout_ms), *retries)),
        };
        let sid = slice.id();
        let clean_sid = slice_id(self.family(), 0, 0);
        let per_pair = self.par_map(&slice.prompts, |spec| {
            let mut out = self.interpret_pair(spec, &sid, external.as_ref())?;
            if n > 0 {
                out.extend(self.interpret_pair(&spec.without_distractors()?, &clean_sid, external.as_ref())?);
            }
            Ok(out)
        })?;
        let records: Vec<ExperimentRecord> = per_pair.into_iter().flatten().collect();
        write_records(&self.records_dir().join("interpret.jsonl"), &records)?;

        let transcripts = self.config.out.join("transcripts.csv");
        let mut t = csv::Writer::from_path(&transcripts)?;
        t.write_record(["pair_id", "which", "word", "sense", "layer", "interpretation", "verdict", "provenance"])?;
        let mut fallbacks = 0;
        for r in &records {
            if let Some(Payload::Interpretation {
                sense,
                layers,
                texts,
                verdicts,
                ..
            }) = &r.payload
            {
                let word = r.pair_id.split('/').nth(2).unwrap_or_default();
                for ((l, text), v) in layers.iter().zip(texts).zip(verdicts) {
                    if v.provenance == crate::metrics::Provenance::FallbackOffline {
                        fallbacks += 1;
                    }
                    let provenance = serde_json::to_value(v.provenance)?;
                    t.write_record([
                        r.pair_id.as_str(),
                        r.which.as_str(),
                        word,
                        sense.as_str(),
                        &l.to_string(),
                        text.as_str(),
                        if v.correct { "correct" } else { "incorrect" },
                        provenance.as_str().unwrap_or_default(),
                    ])?;
                }
            }
        }
        t.flush()?;
        if fallbacks > 0 {
            eprintln!("warning: external scorer failed on {fallbacks} verdicts; offline scoring used");
        }

        let layers = even_layers(params.config.n_layers);
        let curves = interpretation_curves(&records, &sid, &clean_sid);
        let mut w = long_csv(&self.config.out.join("interpret.csv"))?;
        for (split, curve) in &curves {
            for (l, v) in layers.iter().zip(curve) {
                row(&mut w, Some(*l), "cumulative_accuracy", self.family(), &sid, split, Some(*v))?;
            }
        }
        w.flush()?;
        Ok(InterpretSummary {
            layers,
            curves,
            fallbacks,
            transcripts,
        })
    }

    fn interpret_pair(&self, spec: &PromptSpec, sid: &str, scorer: Option<&HttpScorer>) -> Result<Vec<ExperimentRecord>> {
        let params = self.params()?;
        let settings = &self.config.interpret;
        let (correct, incorrect) = spec
            .senses
            .clone()
            .ok_or_else(|| HarnessError::Data(format!("`{}` carries no sense labels", spec.id)))?;
        let keywords = SenseKeywords {
            case_sensitive: settings.case_sensitive,
            ..SenseKeywords::from_senses(&correct, &incorrect)
        };
        let pair = PreparedPair::new(spec, &self.tokenizer)?;
        let base = self.baseline(&pair)?;
        let intervention = Intervention::Interpret {
            target_layer: settings.target.target_layer,
        };
        let mut out = self.scored("interpret", spec, sid, &base, intervention);
        for r in &mut out {
            let interps = open_ended_interpret(params, &self.tokenizer, spec, r.which, &settings.target)?;
            let verdicts = interps
                .iter()
                .map(|i| {
                    autoscore_interpretation(&i.text, &correct, &incorrect, &keywords, scorer.map(|s| s as &dyn Scorer))
                })
                .collect();
            r.payload = Some(Payload::Interpretation {
                sense: correct.clone(),
                layers: interps.iter().map(|i| i.layer).collect(),
                texts: interps.iter().map(|i| i.text.clone()).collect(),
                token_counts: interps.iter().map(|i| i.tokens.len()).collect(),
                verdicts,
            });
        }
        Ok(out.to_vec())
    }

    /// Recomputes summaries from whatever records exist and writes
    /// `<out>/report.txt`.
    pub fn report(&self) -> Result<String> {
        let dir = self.config.out.join("records");
        let mut text = String::new();
        let load = |name: &str| -> Result<Option<Vec<ExperimentRecord>>> {
            let p = dir.join(name);
            if p.exists() {
                Ok(Some(read_records(&p)?))
            } else {
                Ok(None)
            }
        };
        if let Some(rs) = load("behavioral.jsonl")? {
            let table = accuracy_table(&rs)?;
            text.push_str("behavioral pair accuracy\n");
            for t in &table {
                text.push_str(&format!("  {:<24} {:>5} pairs  {:.3}\n", t.slice_id(), t.pairs, t.accuracy));
            }
            if let Ok(p) = select_partition(&table) {
                text.push_str(&format!("partition: {} ({:.3})\n", p.slice_id(), p.accuracy));
            }
        }
        if let Some(rs) = load("ablation.jsonl")? {
            let s = summarize_ablation(&rs)?;
            text.push_str(&format!("ablation on {} ({} pairs), baseline {:.3}\n", s.slice, s.pairs, s.baseline));
            for b in &s.blocks {
                text.push_str(&format!(
                    "  layers {:?}: cue {:.3} (p {:.2e})  distractors {:.3}\n",
                    b.layers, b.cue_accuracy, b.cue_drop_p, b.distractor_accuracy
                ));
            }
        }
        if let Some(rs) = load("patching.jsonl")? {
            let s = summarize_patching(&rs)?;
            text.push_str(&format!("patching on {}\n", s.slice));
            for k in &s.kinds {
                let p = k.p_vs_noise.map(|p| format!("{p:.2e}")).unwrap_or_else(|| "-".into());
                text.push_str(&format!(
                    "  {:<8} baseline {:.3}  success {:.3}  lift {:.3} of at most {:.3}  p vs noise {p}\n",
                    Intervention::Patch(k.kind).to_string().trim_start_matches("patch:"),
                    k.baseline,
                    k.success,
                    k.lift,
                    k.bound
                ));
            }
        }
        std::fs::create_dir_all(&self.config.out)?;
        std::fs::write(self.config.out.join("report.txt"), &text)?;
        Ok(text)
    }
}

/// Per-pair correctness under each intervention descriptor.
fn pair_outcomes(records: &[ExperimentRecord]) -> BTreeMap<(String, String), bool> {
    let mut out: BTreeMap<(String, String), bool> = BTreeMap::new();
    for r in records {
        *out.entry((r.intervention.to_string(), r.pair_id.clone())).or_insert(true) &= r.correct;
    }
    out
}

/// Ablation accuracies and paired tests, folded from ablation records.
pub fn summarize_ablation(records: &[ExperimentRecord]) -> Result<AblationSummary> {
    let tallies = pair_tallies(records)?;
    let base = tallies
        .iter()
        .find(|t| t.intervention == "none")
        .ok_or_else(|| HarnessError::Data("ablation records lack a baseline".into()))?;
    let outcomes = pair_outcomes(records);
    let acc = |i: &Intervention| {
        tallies
            .iter()
            .find(|t| t.intervention == i.to_string())
            .map(|t| t.accuracy())
            .unwrap_or(f64::NAN)
    };
    let drop_p = |i: &Intervention| {
        let key = i.to_string();
        let (mut worse, mut better) = (0, 0);
        for ((int, pair), &ok) in &outcomes {
            if int == &key {
                let b = outcomes[&("none".to_string(), pair.clone())];
                worse += (b && !ok) as u64;
                better += (!b && ok) as u64;
            }
        }
        sign_test(worse, better)
    };
    let mut blocks: Vec<AblationBlock> = Vec::new();
    for r in records {
        if let Intervention::Ablate {
            role: AblatedRole::Cue,
            layers,
            mode,
        } = &r.intervention
        {
            if blocks.iter().any(|b| &b.layers == layers) {
                continue;
            }
            let cue = r.intervention.clone();
            let dis = Intervention::Ablate {
                role: AblatedRole::Distractors,
                layers: layers.clone(),
                mode: *mode,
            };
            blocks.push(AblationBlock {
                layers: layers.clone(),
                cue_accuracy: acc(&cue),
                distractor_accuracy: acc(&dis),
                cue_drop_p: drop_p(&cue),
                distractor_drop_p: drop_p(&dis),
            });
        }
    }
    Ok(AblationSummary {
        slice: base.slice.clone(),
        pairs: base.pairs,
        baseline: base.accuracy(),
        blocks,
    })
}

/// Pair-level success per search: the baseline pair was correct or some cell
/// made both questions correct.
fn search_success(records: &[ExperimentRecord]) -> Result<BTreeMap<(SearchKind, String), (bool, bool)>> {
    let mut by: BTreeMap<(String, String), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        by.entry((r.intervention.to_string(), r.pair_id.clone())).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for ((_, pair), rs) in by {
        let (Some(y), Some(n)) = (
            rs.iter().find(|r| r.which == Which::Yes),
            rs.iter().find(|r| r.which == Which::No),
        ) else {
            return Err(HarnessError::Data(format!("pair `{pair}` is missing a question")));
        };
        let Intervention::Patch(kind) = y.intervention else {
            return Err(HarnessError::Data(format!("`{}` is not a patch record", y.prompt_id)));
        };
        let cells = |r: &ExperimentRecord| match &r.payload {
            Some(Payload::Patch { cell_correct, .. }) => Ok(cell_correct.clone()),
            _ => Err(HarnessError::Data(format!("`{}` lacks patch cells", r.prompt_id))),
        };
        let (cy, cn) = (cells(y)?, cells(n)?);
        let baseline = y.correct && n.correct;
        let patched = cy.iter().zip(&cn).any(|(a, b)| *a && *b);
        out.insert((kind, pair), (baseline, baseline || patched));
    }
    Ok(out)
}

/// Lifts over baseline per search kind, folded from patching records.
pub fn summarize_patching(records: &[ExperimentRecord]) -> Result<PatchingSummary> {
    let success = search_success(records)?;
    let mut kinds: Vec<SearchKind> = Vec::new();
    for r in records {
        if let Intervention::Patch(k) = r.intervention {
            if !kinds.contains(&k) {
                kinds.push(k);
            }
        }
    }
    let summaries = kinds
        .iter()
        .map(|&kind| {
            let rows: Vec<(&String, &(bool, bool))> =
                success.iter().filter(|((k, _), _)| *k == kind).map(|((_, p), v)| (p, v)).collect();
            let pairs = rows.len();
            let base = rows.iter().filter(|(_, (b, _))| *b).count();
            let ok = rows.iter().filter(|(_, (_, s))| *s).count();
            let frac = |k: usize| k as f64 / pairs.max(1) as f64;
            let p_vs_noise = (kind != SearchKind::Noise && kinds.contains(&SearchKind::Noise)).then(|| {
                let (mut wins, mut losses) = (0, 0);
                for (pair, (_, s)) in &rows {
                    let noise = success[&(SearchKind::Noise, (*pair).clone())].1;
                    wins += (*s && !noise) as u64;
                    losses += (!*s && noise) as u64;
                }
                sign_test(wins, losses)
            });
            KindSummary {
                kind,
                pairs,
                baseline: frac(base),
                success: frac(ok),
                lift: frac(ok) - frac(base),
                bound: 1.0 - frac(base),
                fixed: ok - base,
                p_vs_noise,
            }
        })
        .collect();
    let slice = records.first().map(|r| r.slice.clone()).unwrap_or_default();
    Ok(PatchingSummary { slice, kinds: summaries })
}

/// One row per grid cell: pairs whose both questions were correct in that
/// cell. Noise resamples of one `(layer, factor)` merge into a cell that
/// succeeds when any resample does.
fn write_patch_grid(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    type CellKey = (String, usize, usize, String);
    let mut cells: BTreeMap<CellKey, BTreeMap<String, (bool, bool)>> = BTreeMap::new();
    let mut order: Vec<CellKey> = Vec::new();
    for r in records {
        let Some(Payload::Patch { cells: grid, cell_correct, .. }) = &r.payload else {
            continue;
        };
        let kind = r.intervention.to_string().trim_start_matches("patch:").to_string();
        for (cell, &ok) in grid.iter().zip(cell_correct) {
            let factor = cell.noise_factor.map(|f| f.to_string()).unwrap_or_default();
            let key = (kind.clone(), cell.source_layer, cell.target_layer, factor);
            if !cells.contains_key(&key) {
                order.push(key.clone());
            }
            let slot = cells.entry(key).or_default().entry(r.pair_id.clone()).or_default();
            // (yes, no) hit in any resample of this cell
            if r.which == Which::Yes {
                slot.0 |= ok;
            } else {
                slot.1 |= ok;
            }
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kind", "source_layer", "target_layer", "noise_factor", "pairs", "correct_pairs", "accuracy"])?;
    for key in order {
        let pairs = &cells[&key];
        let correct = pairs.values().filter(|(y, n)| *y && *n).count();
        w.write_record([
            key.0.clone(),
            key.1.to_string(),
            key.2.to_string(),
            key.3.clone(),
            pairs.len().to_string(),
            correct.to_string(),
            (correct as f64 / pairs.len().max(1) as f64).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Cumulative interpretation accuracy for the distractor slice, its
/// no-distractor counterpart, and the distractor slice split by whether the
/// model answers the pair correctly.
fn interpretation_curves(records: &[ExperimentRecord], sid: &str, clean_sid: &str) -> Vec<(String, Vec<f64>)> {
    let verdicts = |r: &ExperimentRecord| -> Vec<bool> {
        match &r.payload {
            Some(Payload::Interpretation { verdicts, .. }) => verdicts.iter().map(|v| v.correct).collect(),
            _ => Vec::new(),
        }
    };
    let items = |slice: &str, filter: Option<bool>| -> Vec<Vec<Vec<bool>>> {
        let mut by: BTreeMap<&str, (Vec<Vec<bool>>, bool)> = BTreeMap::new();
        let mut order = Vec::new();
        for r in records.iter().filter(|r| r.slice == slice) {
            if !by.contains_key(r.pair_id.as_str()) {
                order.push(r.pair_id.as_str());
            }
            let e = by.entry(&r.pair_id).or_insert((Vec::new(), true));
            e.0.push(verdicts(r));
            e.1 &= r.correct;
        }
        order
            .into_iter()
            .filter_map(|p| {
                let (parts, ok) = by.remove(p)?;
                filter.is_none_or(|f| f == ok).then_some(parts)
            })
            .collect()
    };
    let mut curves = vec![("distractors".to_string(), cumulative_accuracy(&items(sid, None)))];
    if sid != clean_sid {
        curves.push(("no_distractors".into(), cumulative_accuracy(&items(clean_sid, None))));
    }
    curves.push(("model_correct".into(), cumulative_accuracy(&items(sid, Some(true)))));
    curves.push(("model_incorrect".into(), cumulative_accuracy(&items(sid, Some(false)))));
    curves
}

fn long_csv(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "metric", "family", "slice", "split", "value"])?;
    Ok(w)
}

fn row(
    w: &mut csv::Writer<File>,
    layer: Option<usize>,
    metric: &str,
    family: Family,
    slice: &str,
    split: &str,
    value: Option<f64>,
) -> Result<()> {
    w.write_record([
        layer.map(|l| l.to_string()).unwrap_or_default().as_str(),
        metric,
        family.as_str(),
        slice,
        split,
        value.map(|v| v.to_string()).unwrap_or_default().as_str(),
    ])?;
    Ok(())
}
