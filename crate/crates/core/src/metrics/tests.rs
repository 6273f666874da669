use proptest::prelude::*;

use super::*;
use crate::model::{forward, Capture, HookSet, ModelConfig, ModelParams, Positional, Tokenizer};
use crate::tensor::{RngStream, Tensor};

fn config(heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: heads,
        d_model: 16,
        d_head: 16 / heads,
        d_mlp: 32,
        vocab_size: 260,
        max_seq: 32,
        rope_base: 10_000,
        positional: Positional::Rotary,
    }
}

fn uniform_attention_model(heads: usize) -> ModelParams {
    let mut p = ModelParams::init_random(&config(heads), 1).unwrap();
    for l in &mut p.layers {
        l.wq = Tensor::zeros(l.wq.shape());
        l.wk = Tensor::zeros(l.wk.shape());
    }
    p
}

fn trace_of(p: &ModelParams, text: &str) -> crate::model::ForwardTrace {
    let ids = Tokenizer::Byte.tokenize(text).unwrap().ids;
    forward(p, &ids, &HookSet::new(), Capture::ALL).unwrap()
}

#[test]
fn uniform_attention_mass_matches_harmonic_tail() {
    let p = uniform_attention_model(1);
    let t = trace_of(&p, "abc");
    assert_eq!(t.n_tokens(), 4);
    for l in 0..2 {
        let m = attention_mass(&t, 0, l, false).unwrap();
        assert!((m - 13.0 / 12.0).abs() < 1e-6, "{m}");
        assert_eq!(attention_mass(&t, 3, l, false).unwrap(), 0.0);
    }
}

#[test]
fn mass_sums_heads_unless_normalized() {
    let p = uniform_attention_model(4);
    let t = trace_of(&p, "abc");
    let sum = attention_mass(&t, 0, 1, false).unwrap();
    let mean = attention_mass(&t, 0, 1, true).unwrap();
    assert!((sum - 4.0 * 13.0 / 12.0).abs() < 1e-5);
    assert!((mean - 13.0 / 12.0).abs() < 1e-6);
}

#[test]
fn mass_upper_bound_attained_by_full_attention() {
    let (h, n, s) = (2, 5, 1);
    let mut attn = Tensor::<f32>::zeros(&[h, n, n]);
    for head in 0..h {
        for dest in 0..n {
            let src = if dest > s { s } else { dest };
            attn.data_mut()[(head * n + dest) * n + src] = 1.0;
        }
    }
    let trace = crate::model::ForwardTrace {
        resid: vec![],
        attn: vec![attn],
        attn_out: vec![],
        mlp_out: vec![],
        logits: Tensor::zeros(&[n, 260]),
        degenerate: vec![],
    };
    assert_eq!(attention_mass(&trace, s, 0, false).unwrap(), (h * (n - s - 1)) as f64);
    assert!(attention_mass(&trace, n, 0, false).is_err());
}

fn answers() -> AnswerTokens {
    AnswerTokens::new(257, 258, 0, 260).unwrap()
}

#[test]
fn terminal_log_odds_equals_output_logit_difference() {
    let p = ModelParams::init_random(&config(2), 3).unwrap();
    let t = trace_of(&p, "terminal");
    let n = t.n_tokens();
    let a = AnswerTokens::new(257, 258, n - 1, 260).unwrap();
    let traj = lens_trajectory(&t, &p, &a).unwrap();
    assert_eq!(traj.len(), 3);
    let last = t.last_logits();
    assert_eq!(traj[2], (last[257] - last[258]) as f64);
}

#[test]
fn swapping_answers_negates_log_odds() {
    let p = ModelParams::init_random(&config(2), 3).unwrap();
    let mut rng = RngStream::new(2, 0);
    let h: Vec<f32> = (0..16).map(|_| rng.standard_normal() as f32).collect();
    let swapped = AnswerTokens::new(258, 257, 0, 260).unwrap();
    assert_eq!(log_odds(&h, &p, &answers()), -log_odds(&h, &p, &swapped));
}

#[test]
fn log_odds_matches_f64_oracle() {
    let p = ModelParams::init_random(&config(2), 4).unwrap();
    let mut rng = RngStream::new(3, 0);
    for _ in 0..20 {
        let h: Vec<f32> = (0..16).map(|_| rng.standard_normal() as f32).collect();
        // independent recompute: rms norm then two dot products in f64
        let ms = h.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / 16.0;
        let inv = 1.0 / (ms + crate::model::config::NORM_EPS).sqrt();
        let u = p.unembed.data();
        let mut diff = 0.0;
        for i in 0..16 {
            let normed = h[i] as f64 * inv * p.final_norm.data()[i] as f64;
            diff += normed * (u[i * 260 + 257] as f64 - u[i * 260 + 258] as f64);
        }
        assert!((log_odds(&h, &p, &answers()) - diff).abs() < 1e-5);
    }
}

fn traj(which: Which, correct: bool, values: Vec<f64>) -> LensTrajectory {
    LensTrajectory {
        question_id: "q".into(),
        which,
        correct,
        values,
    }
}

#[test]
fn separation_of_constants_and_identical_sets() {
    let mut all = vec![];
    for _ in 0..3 {
        all.push(traj(Which::Yes, true, vec![2.0, 2.0]));
        all.push(traj(Which::Yes, false, vec![0.5, 0.5]));
        all.push(traj(Which::No, true, vec![1.0, -3.0]));
        all.push(traj(Which::No, false, vec![1.0, 4.0]));
    }
    let p = EvalPartition::new(all);
    assert_eq!(lens_separation(&p, 0), (Some(1.5), Some(0.0)));
    assert_eq!(lens_separation(&p, 1), (Some(1.5), Some(-7.0)));
}

#[test]
fn empty_subset_is_undefined() {
    let p = EvalPartition::new(vec![traj(Which::Yes, true, vec![1.0]), traj(Which::No, true, vec![1.0])]);
    assert_eq!(lens_separation(&p, 0), (None, None));
}

#[test]
fn identifiable_layer_heuristic() {
    let d = [Some(0.1), None, Some(0.4), Some(0.9), Some(1.0)];
    assert_eq!(identifiable_layer(&d, 0.5), Some(3));
    assert_eq!(identifiable_layer(&[Some(0.1), None], 0.5), None);
}

#[test]
fn logit_scoring() {
    let o = score_logits("p", Which::Yes, 2.0, 1.0);
    assert!(o.correct);
    assert!(!score_logits("p", Which::No, 2.0, 1.0).correct);
    assert!(score_logits("p", Which::No, 1.0, 1.0).correct);
}

#[test]
fn generated_text_scoring() {
    let tok = Tokenizer::Byte;
    let ids = |s: &str| s.bytes().map(u32::from).collect::<Vec<_>>();
    assert!(!score_generated("p", Which::Yes, &ids("No."), &tok).correct);
    assert!(score_generated("p", Which::Yes, &ids(" Yes, it is"), &tok).correct);
    assert!(score_generated("p", Which::No, &[258, 257], &tok).correct);
    let abstain = score_generated("p", Which::Yes, &ids("nothing"), &tok);
    assert!(abstain.abstained() && !abstain.correct);
}

#[test]
fn pair_is_conjunction_and_checks_ids() {
    let y = score_logits("a", Which::Yes, 1.0, 0.0);
    let n_ok = score_logits("a", Which::No, 0.0, 1.0);
    let n_bad = score_logits("a", Which::No, 1.0, 0.0);
    assert!(score_pair(y.clone(), n_ok.clone()).unwrap().pair_correct);
    assert!(!score_pair(y.clone(), n_bad).unwrap().pair_correct);
    let other = score_logits("b", Which::No, 0.0, 1.0);
    assert!(matches!(score_pair(y.clone(), other), Err(MetricError::Pairing(_))));
    assert!(matches!(score_pair(n_ok, y), Err(MetricError::Pairing(_))));
}

#[test]
fn chance_pair_accuracy_is_a_quarter() {
    let acc = chance_pair_accuracy(10_000, &mut RngStream::new(12, 0));
    assert!((acc - 0.25).abs() < 0.02, "{acc}");
}

#[test]
fn cumulative_step_and_zero_cases() {
    assert_eq!(cumulative_accuracy(&[vec![vec![false; 4]]]), vec![0.0; 4]);
    let mut v = vec![false; 10];
    v[6] = true;
    let curve = cumulative_accuracy(&[vec![v]]);
    assert_eq!(curve[..6], [0.0; 6]);
    assert_eq!(curve[6..], [1.0; 4]);
}

proptest! {
    #[test]
    fn cumulative_matches_prefix_or_oracle(items in prop::collection::vec(
        prop::collection::vec(prop::collection::vec(any::<bool>(), 6), 2), 1..20)) {
        let curve = cumulative_accuracy(&items);
        for m in 0..6 {
            let hits = items
                .iter()
                .filter(|parts| parts.iter().all(|v| v[..=m].iter().any(|&b| b)))
                .count();
            prop_assert!((curve[m] - hits as f64 / items.len() as f64).abs() < 1e-12);
            if m > 0 {
                prop_assert!(curve[m] >= curve[m - 1]);
            }
        }
    }

    #[test]
    fn separation_matches_flat_oracle(vals in prop::collection::vec((any::<bool>(), any::<bool>(), -5.0f64..5.0), 4..40)) {
        let ts: Vec<LensTrajectory> = vals
            .iter()
            .map(|&(y, c, v)| traj(if y { Which::Yes } else { Which::No }, c, vec![v]))
            .collect();
        let flat = |y: bool, c: bool| {
            let xs: Vec<f64> = vals.iter().filter(|t| t.0 == y && t.1 == c).map(|t| t.2).collect();
            (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
        };
        let (dy, dn) = lens_separation(&EvalPartition::new(ts), 0);
        let oy = flat(true, true).zip(flat(true, false)).map(|(a, b)| a - b);
        let on = flat(false, true).zip(flat(false, false)).map(|(a, b)| a - b);
        prop_assert_eq!(dy.is_some(), oy.is_some());
        prop_assert_eq!(dn.is_some(), on.is_some());
        if let (Some(a), Some(b)) = (dy, oy) { prop_assert!((a - b).abs() < 1e-6); }
        if let (Some(a), Some(b)) = (dn, on) { prop_assert!((a - b).abs() < 1e-6); }
    }

    #[test]
    fn mass_within_bounds(seed in 0u64..50, s in 0usize..6) {
        let mut p = ModelParams::init_random(&config(2), seed).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
        let t = trace_of(&p, "bounds");
        let n = t.n_tokens();
        for l in 0..2 {
            let m = attention_mass(&t, s, l, false).unwrap();
            prop_assert!(m >= 0.0 && m <= (2 * (n - s - 1)) as f64 + 1e-5);
        }
    }
}

#[test]
fn template_renders_exactly() {
    assert_eq!(
        autoscore_prompt("a river bank", "geographical feature"),
        "Consider the following description: a river bank\n\
         Is this description referring to geographical feature?\n\
         Please answer with yes or no:"
    );
}

#[test]
fn keyword_verdicts() {
    let k = SenseKeywords::from_senses("river", "money");
    let v = autoscore_interpretation("the side of a river", "river", "money", &k, None);
    assert!(v.correct && v.provenance == Provenance::Offline);
    let v = autoscore_interpretation("river money", "river", "money", &k, None);
    assert!(!v.correct && v.yes_on_correct && v.yes_on_incorrect);
}

struct Fixed(&'static str, &'static str);

impl Scorer for Fixed {
    fn ask(&self, prompt: &str) -> Result<String, ScorerError> {
        Ok(if prompt.contains("referring to river?") { self.0 } else { self.1 }.to_string())
    }
}

struct Down;

impl Scorer for Down {
    fn ask(&self, _: &str) -> Result<String, ScorerError> {
        Err(ScorerError::Unreachable("connection refused".into()))
    }
}

#[test]
fn external_scorer_and_fallback() {
    let k = SenseKeywords::from_senses("river", "money");
    let v = autoscore_interpretation("anything", "river", "money", &k, Some(&Fixed("Yes.", "no")));
    assert!(v.correct && v.provenance == Provenance::External);
    let v = autoscore_interpretation("anything", "river", "money", &k, Some(&Fixed("yes", "Yes")));
    assert!(!v.correct);
    let v = autoscore_interpretation("by the river", "river", "money", &k, Some(&Down));
    assert!(v.correct && v.provenance == Provenance::FallbackOffline);
    assert_eq!(parse_yes_no("  No, it is not"), Some(false));
    assert_eq!(parse_yes_no("maybe"), None);
}
