//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails. The toy model is trained once and shared
//! by the behavioral, ablation, patching and replay checks.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use raceprobe::datasets::{gen_family, DistractorCorpus, Family, FamilyTable, SliceAccuracy};
use raceprobe::harness::stats::fisher_greater;
use raceprobe::harness::{ExperimentConfig, Harness, PatchingSummary, AblationSummary};
use raceprobe::interventions::{
    ablate_attention, run_patch, AblationPlan, PatchMode, PatchPlan, SearchKind, SourceLocator, TargetLocator,
};
use raceprobe::metrics::{attention_mass, chance_pair_accuracy, lens_trajectory};
use raceprobe::model::{
    forward, AblationMode, AnswerTokens, Capture, HookSet, ModelConfig, ModelParams, Params,
    Positional, Tokenizer,
};
use raceprobe::tensor::{RngStream, Tensor};
use raceprobe::trainer::{loss, loss_and_grad, Example, ForwardCache};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn small_config(layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        n_heads: heads,
        d_model: 16,
        d_head: 16 / heads,
        d_mlp: 32,
        vocab_size: 260,
        max_seq: 96,
        rope_base: 10_000,
        positional: Positional::Rotary,
    }
}

/// Random byte strings of printable ASCII, 1 to 40 characters.
fn random_prompts(count: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = RngStream::new(seed, 0);
    (0..count)
        .map(|_| {
            let len = 1 + rng.below(40);
            let text: String = (0..len).map(|_| (b' ' + rng.below(95) as u8) as char).collect();
            Tokenizer::Byte.tokenize(&text).unwrap().ids
        })
        .collect()
}

/// Random weights scaled up so attention is far from uniform.
fn sharp_model(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init_random(config, seed).unwrap();
    for t in p.tensors_mut() {
        if t.rank() == 2 {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
    }
    p
}

fn oracle_equivalence() -> Outcome {
    let p = ModelParams::init_random(&ModelConfig::toy(), 11).unwrap();
    let prompts = random_prompts(50, 1);
    let mut mismatched = 0;
    for ids in &prompts {
        let hooked = forward(&p, ids, &HookSet::new(), Capture::RESID).unwrap();
        let reference = ForwardCache::run(&p, ids).unwrap();
        let same_logits = hooked.logits.data().iter().zip(&reference.logits).all(|(a, b)| a.to_bits() == b.to_bits());
        let same_resid = (0..=p.config.n_layers).all(|l| {
            hooked.resid[l].data().iter().zip(reference.resid(l)).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        mismatched += !(same_logits && same_resid) as usize;
    }
    check(mismatched == 0, format!("{} prompts, {mismatched} differ from the reference forward", prompts.len()))
}

fn attention_contract() -> Outcome {
    let p = sharp_model(&small_config(4, 2), 2);
    let mut rng = RngStream::new(3, 0);
    let mut worst: f64 = 0.0;
    let mut causal_violations = 0;
    let mut empty_changes = 0;
    for ids in random_prompts(30, 2) {
        let n = ids.len();
        let ablate: Vec<usize> = (1..n).filter(|_| rng.below(3) == 0).collect();
        let start = rng.below(4);
        let mode = if rng.below(2) == 0 { AblationMode::Renormalize } else { AblationMode::PreSoftmaxMask };
        let plan = AblationPlan { ablate, n_tokens: n, layers: start..4, mode };
        let hooks = ablate_attention(&plan, &p.config).unwrap();
        for hs in [HookSet::new(), hooks] {
            let t = forward(&p, &ids, &hs, Capture::ALL).unwrap();
            for l in 0..4 {
                for h in 0..2 {
                    for dest in 0..n {
                        let sum: f64 = (0..n).map(|s| t.attn_at(l, h, dest, s) as f64).sum();
                        worst = worst.max((sum - 1.0).abs());
                        causal_violations += (dest + 1..n).filter(|&s| t.attn_at(l, h, dest, s) != 0.0).count();
                    }
                }
            }
        }
        let empty = AblationPlan { ablate: vec![], n_tokens: n, layers: 0..4, mode };
        let a = forward(&p, &ids, &ablate_attention(&empty, &p.config).unwrap(), Capture::ALL).unwrap();
        let b = forward(&p, &ids, &HookSet::new(), Capture::ALL).unwrap();
        empty_changes += (a != b) as usize;
    }
    check(
        worst <= 1e-6 && causal_violations == 0 && empty_changes == 0,
        format!("max |row sum - 1| {worst:.2e}, {causal_violations} causal violations, {empty_changes} empty-ablation changes"),
    )
}

fn patch_identities() -> Outcome {
    let p = sharp_model(&small_config(4, 2), 4);
    let mut worst: f64 = 0.0;
    let mut frozen_drift = 0;
    for ids in random_prompts(10, 3) {
        let n = ids.len();
        let trace = forward(&p, &ids, &HookSet::new(), Capture::RESID).unwrap();
        for l in 0..=4 {
            for i in [0, n / 2, n - 1] {
                let plan = PatchPlan {
                    source: SourceLocator { position: i, layer: l },
                    target: TargetLocator { positions: vec![i], layer: l },
                    mode: PatchMode::Single,
                };
                let patched = forward(&p, &ids, &run_patch(&plan, &trace).unwrap(), Capture::NONE).unwrap();
                for (a, b) in patched.logits.data().iter().zip(trace.logits.data()) {
                    worst = worst.max((a - b).abs() as f64);
                }
            }
        }
        let i = n - 1;
        for (target, source) in [(0, 4), (1, 3), (2, 4)] {
            let plan = PatchPlan {
                source: SourceLocator { position: i, layer: source },
                target: TargetLocator { positions: vec![i], layer: target },
                mode: PatchMode::Frozen,
            };
            let patched = forward(&p, &ids, &run_patch(&plan, &trace).unwrap(), Capture::RESID).unwrap();
            let h = trace.resid_at(source, i).unwrap();
            frozen_drift += (target..=source).filter(|&l| patched.resid_at(l, i).unwrap() != h).count();
        }
    }
    check(
        worst <= 1e-6 && frozen_drift == 0,
        format!("max identity-patch logit change {worst:.2e}, {frozen_drift} frozen layers drifted"),
    )
}

fn lens_identity() -> Outcome {
    let p = sharp_model(&small_config(4, 2), 5);
    let mut mismatched = 0;
    let prompts = random_prompts(100, 4);
    for ids in &prompts {
        let t = forward(&p, ids, &HookSet::new(), Capture::RESID).unwrap();
        let a = AnswerTokens::new(257, 258, ids.len() - 1, 260).unwrap();
        let traj = lens_trajectory(&t, &p, &a).unwrap();
        let last = t.last_logits();
        mismatched += (traj[4] != (last[257] - last[258]) as f64) as usize;
    }
    check(mismatched == 0, format!("{} final states, {mismatched} differ from the logit difference", prompts.len()))
}

fn gradient_check() -> Outcome {
    let config = ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_head: 4, d_mlp: 16, max_seq: 16, ..small_config(2, 2) };
    let mut params: Params<f64> = ModelParams::init_random(&config, 7).unwrap().cast::<f64>();
    let mut rng = RngStream::new(7, 1);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        for v in t.data_mut() {
            *v = if name.ends_with("norm") { 1.0 + 0.3 * rng.standard_normal() } else { *v * 15.0 };
        }
    }
    let tok = Tokenizer::Byte;
    let examples = vec![
        Example { tokens: tok.tokenize("aQ,bR,aQ?").unwrap().ids, targets: vec![(7, 81), (9, 257)] },
        Example { tokens: tok.tokenize("cZ,cY?").unwrap().ids, targets: vec![(6, 258), (2, 90)] },
    ];
    let (_, grads) = loss_and_grad(&params, &examples).unwrap();
    let h = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    for (ti, name) in names.iter().enumerate() {
        let analytic = grads.tensors()[ti].data().to_vec();
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|i| {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[i] -= h;
                (loss(&plus, &examples).unwrap() - loss(&minus, &examples).unwrap()) / (2.0 * h)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-300);
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    check(
        worst.0 < 1e-3,
        format!("{} tensors, worst relative error {:.2e} ({})", names.len(), worst.0, worst.1),
    )
}

fn attention_mass_oracle() -> Outcome {
    let mut p = ModelParams::init_random(&small_config(2, 1), 1).unwrap();
    for l in &mut p.layers {
        l.wq = Tensor::zeros(l.wq.shape());
        l.wk = Tensor::zeros(l.wk.shape());
    }
    let mut worst: f64 = 0.0;
    let mut first = f64::NAN;
    for n in 2..12 {
        let ids: Vec<u32> = (0..n as u32).map(|i| 97 + i).collect();
        let t = forward(&p, &ids, &HookSet::new(), Capture::ALL).unwrap();
        for s in 0..n {
            // uniform causal rows: position i spreads 1/(i+1) over its prefix
            let expected: f64 = (s + 1..n).map(|i| 1.0 / (i + 1) as f64).sum();
            for l in 0..2 {
                let m = attention_mass(&t, s, l, false).unwrap();
                worst = worst.max((m - expected).abs());
                if n == 4 && s == 0 && l == 0 {
                    first = m;
                }
            }
        }
    }
    check(
        worst <= 1e-6 && (first - 13.0 / 12.0).abs() <= 1e-6,
        format!("four tokens, first token: {first:.7} (13/12 = {:.7}); max error {worst:.2e}", 13.0 / 12.0),
    )
}

fn dataset_counts() -> Outcome {
    let corpus = DistractorCorpus::bundled();
    let mut counts = Vec::new();
    let mut ok = true;
    for (family, want) in [(Family::Polysemous, 120), (Family::Gender, 240)] {
        let table = FamilyTable::bundled(family).unwrap();
        for (n, c) in [(0, 0), (2, 1), (5, 5)] {
            let got = gen_family(family, &table, n, c, &corpus, &[0, 1, 2]).unwrap().pair_count();
            ok &= got == want;
            counts.push(format!("{family}/d{n}c{c}={got}"));
        }
    }
    let chance = chance_pair_accuracy(20_000, &mut RngStream::new(0, 0));
    ok &= (chance - 0.25).abs() <= 0.02;
    check(ok, format!("{}; chance pair accuracy {chance:.4}", counts.join(" ")))
}

/// Trained toy model plus everything the harness computed with it.
struct Toy {
    dir: tempfile::TempDir,
    train_seconds: f64,
    behavioral_seconds: f64,
    table: Result<Vec<SliceAccuracy>, String>,
    ablation: Result<AblationSummary, String>,
    patching: Result<PatchingSummary, String>,
}

fn toy_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn train_toy() -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::load(&toy_config_path()).unwrap();
    config.out = dir.path().to_path_buf();
    config.model = Some(dir.path().join("toy.rctm"));
    let h = Harness::new(config, None).unwrap();
    let start = Instant::now();
    let trained = h.train_toy();
    let train_seconds = start.elapsed().as_secs_f64();
    if let Err(e) = &trained {
        let msg = format!("training failed: {e}");
        return Toy {
            dir,
            train_seconds,
            behavioral_seconds: 0.0,
            table: Err(msg.clone()),
            ablation: Err(msg.clone()),
            patching: Err(msg),
        };
    }
    let start = Instant::now();
    let table = h.run_behavioral().map(|b| b.table).map_err(|e| e.to_string());
    let behavioral_seconds = start.elapsed().as_secs_f64();
    let ablation = h.run_ablation().map_err(|e| e.to_string());
    let patching = h.run_patching().map_err(|e| e.to_string());
    Toy { dir, train_seconds, behavioral_seconds, table, ablation, patching }
}

fn toy_behavioral(toy: &Toy) -> Outcome {
    let table = toy.table.as_ref().map_err(Clone::clone)?;
    let pool = |n: usize| {
        let rows: Vec<&SliceAccuracy> = table.iter().filter(|t| t.n_distractors == n).collect();
        let pairs: usize = rows.iter().map(|t| t.pairs).sum();
        let correct: usize = rows.iter().map(|t| (t.accuracy * t.pairs as f64).round() as usize).sum();
        (correct, pairs)
    };
    let (k0, n0) = pool(0);
    let (k4, n4) = pool(4);
    let (a0, a4) = (k0 as f64 / n0 as f64, k4 as f64 / n4 as f64);
    let p = fisher_greater(k0 as u64, n0 as u64, k4 as u64, n4 as u64);
    let runtime = toy.train_seconds + toy.behavioral_seconds;
    check(
        a0 >= 0.95 && a0 - a4 >= 0.10 && p < 0.05 && n0 >= 200 && n4 >= 200 && runtime <= 900.0,
        format!(
            "0 distractors {a0:.3} ({k0}/{n0}), 4 distractors {a4:.3} ({k4}/{n4}), Fisher p {p:.2e}, \
             train {:.0}s + eval {:.0}s",
            toy.train_seconds, toy.behavioral_seconds
        ),
    )
}

fn toy_ablation(toy: &Toy) -> Outcome {
    let s = toy.ablation.as_ref().map_err(Clone::clone)?;
    let early = s.blocks.first().ok_or("no ablation blocks")?;
    let cue_drop = s.baseline - early.cue_accuracy;
    let distractor_drop = s.baseline - early.distractor_accuracy;
    check(
        cue_drop >= 0.10 && distractor_drop <= 0.02 && early.cue_drop_p < 0.05,
        format!(
            "{} ({} pairs), layers {:?}: baseline {:.3}, cue ablated {:.3} (p {:.2e}), distractors ablated {:.3}",
            s.slice, s.pairs, early.layers, s.baseline, early.cue_accuracy, early.cue_drop_p, early.distractor_accuracy
        ),
    )
}

fn toy_patching(toy: &Toy) -> Outcome {
    let s = toy.patching.as_ref().map_err(Clone::clone)?;
    let cross = s.kind(SearchKind::CrossPatch).ok_or("no cross-patch results")?;
    let noise = s.kind(SearchKind::Noise).ok_or("no noise results")?;
    let p = cross.p_vs_noise.unwrap_or(f64::NAN);
    check(
        cross.lift > noise.lift && p < 0.05,
        format!(
            "{} ({} pairs): cross lift {:.3}, noise lift {:.3}, bound {:.3}, p {p:.2e}",
            s.slice, cross.pairs, cross.lift, noise.lift, cross.bound
        ),
    )
}

fn raceprobe(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_raceprobe")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("raceprobe {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn reproducibility(toy: &Toy) -> Outcome {
    let model = toy.dir.path().join("toy.rctm");
    if !model.exists() {
        return Err("no trained model".into());
    }
    let config = toy_config_path();
    let pair = {
        let text = std::fs::read_to_string(toy.dir.path().join("records/patching.jsonl")).map_err(|e| e.to_string())?;
        let first: serde_json::Value = serde_json::from_str(text.lines().next().ok_or("no patching records")?)
            .map_err(|e| e.to_string())?;
        first["pair_id"].as_str().ok_or("record without pair id")?.to_string()
    };
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for (k, run) in runs.iter().enumerate() {
        let out = run.path().to_str().unwrap();
        let workers = if k == 0 { "1" } else { "3" };
        let base = ["--config", config.to_str().unwrap(), "--out", out, "--model", model.to_str().unwrap(), "--workers", workers];
        for cmd in ["gen-data", "run-behavioral", "run-ablation"] {
            raceprobe(&[&[cmd][..], &base].concat())?;
        }
        raceprobe(&[&["run-patching", "--pair", &pair][..], &base].concat())?;
    }
    let mut files = Vec::new();
    for entry in walk(runs[0].path()) {
        let rel = entry.strip_prefix(runs[0].path()).unwrap().to_path_buf();
        if rel == Path::new("manifest.json") {
            continue;
        }
        let a = std::fs::read(&entry).unwrap();
        let b = std::fs::read(runs[1].path().join(&rel)).map_err(|e| format!("{}: {e}", rel.display()))?;
        if a != b {
            return Err(format!("{} differs between replays", rel.display()));
        }
        files.push(rel);
    }
    // the single-pair replay reproduces the full run's records for that pair
    let full = std::fs::read_to_string(toy.dir.path().join("records/patching.jsonl")).unwrap();
    let want: Vec<&str> = full.lines().filter(|l| l.contains(&format!("\"pair_id\":\"{pair}\""))).collect();
    let replay = std::fs::read_to_string(runs[0].path().join("replay/patching.jsonl")).map_err(|e| e.to_string())?;
    let got: Vec<&str> = replay.lines().collect();
    check(
        !want.is_empty() && want == got,
        format!("{} output files byte-identical across replays; pair {pair} replays its {} records", files.len(), got.len()),
    )
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn main() {
    let mut failures = 0;
    let mut report = |name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failures += 1;
                println!("FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    };
    report("oracle equivalence", &oracle_equivalence);
    report("attention contract", &attention_contract);
    report("patch identities", &patch_identities);
    report("lens identity", &lens_identity);
    report("gradient check", &gradient_check);
    report("attention-mass oracle", &attention_mass_oracle);
    report("dataset counts", &dataset_counts);
    let toy = train_toy();
    report("toy behavioral reproduction", &|| toy_behavioral(&toy));
    report("toy ablation reproduction", &|| toy_ablation(&toy));
    report("toy patching reproduction", &|| toy_patching(&toy));
    report("reproducibility", &|| reproducibility(&toy));
    println!("{} criteria failed", failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
