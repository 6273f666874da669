use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use raceprobe::harness::{ExperimentConfig, Harness, HarnessError, Manifest, ManifestEntry};

#[derive(Parser)]
#[command(name = "raceprobe", version, about = "Contextualization probes for small decoder-only transformers")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sample seed; repeat to pool several seeds.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Model checkpoint to load (or to write, for train-toy).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Run a single pair (as printed in records) and write to `<out>/replay/`.
    #[arg(long, global = true)]
    pair: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write every slice of the sweep as JSONL prompt specs.
    GenData,
    /// Train the bundled toy model.
    TrainToy,
    /// Pair accuracy per slice and partition selection.
    RunBehavioral,
    /// Logit-lens trajectories split by answer and correctness.
    RunLens,
    /// Attention mass on the subject token per layer.
    RunAttnMass,
    /// Cue and distractor attention ablation by layer block.
    RunAblation,
    /// Cross-patching, backpatching and the noise control.
    RunPatching,
    /// Open-ended interpretation of the subject state.
    Interpret,
    /// Summaries recomputed from existing records.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::TrainToy => "train-toy",
            Self::RunBehavioral => "run-behavioral",
            Self::RunLens => "run-lens",
            Self::RunAttnMass => "run-attn-mass",
            Self::RunAblation => "run-ablation",
            Self::RunPatching => "run-patching",
            Self::Interpret => "interpret",
            Self::Report => "report",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if !cli.seeds.is_empty() {
        config.seeds = cli.seeds.clone();
        config.train.train.seed = cli.seeds[0];
    }
    if let Some(o) = &cli.out {
        config.out = o.clone();
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    if let Some(m) = &cli.model {
        config.model = Some(m.clone());
    }
    config.apply_env();

    let out = config.out.clone();
    let h = Harness::new(config, cli.config.clone())?.with_pair(cli.pair.clone());
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let records = h.records_dir();
    let mut outputs: Vec<PathBuf> = Vec::new();

    match cli.command {
        Command::GenData => {
            let s = h.gen_data()?;
            for (id, pairs) in &s.slices {
                println!("{id}\t{pairs} pairs");
            }
            outputs.push(s.dir);
        }
        Command::TrainToy => {
            let s = h.train_toy()?;
            println!(
                "trained {} steps in {:.1}s; 0-distractor pair accuracy {:.3}; checkpoint {}",
                s.steps,
                s.seconds,
                s.eval_accuracy,
                s.checkpoint.display()
            );
            outputs.extend([s.checkpoint, s.curve]);
        }
        Command::RunBehavioral => {
            let s = h.run_behavioral()?;
            for t in &s.table {
                println!("{}\t{}\t{:.3}", t.slice_id(), t.pairs, t.accuracy);
            }
            match &s.partition {
                Some(p) => println!("partition: {} ({:.3})", p.slice_id(), p.accuracy),
                None => println!("partition: none"),
            }
            outputs.extend([s.records, out.join("behavioral.csv"), out.join("partition.csv")]);
        }
        Command::RunLens => {
            let s = h.run_lens()?;
            for (slice, (y, n)) in s.slices.iter().zip(&s.identifiable) {
                let show = |l: &Option<usize>| l.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
                println!("{slice}\tidentifiable layer: yes {} no {}", show(y), show(n));
            }
            outputs.extend([s.records, out.join("lens.csv")]);
        }
        Command::RunAttnMass => {
            let s = h.run_attn_mass()?;
            for (slice, m) in s.slices.iter().zip(&s.mean) {
                let m: Vec<String> = m.iter().map(|v| format!("{v:.3}")).collect();
                println!("{slice}\t{}", m.join(" "));
            }
            outputs.extend([s.records, out.join("attn_mass.csv")]);
        }
        Command::RunAblation => {
            let s = h.run_ablation()?;
            println!("{} ({} pairs) baseline {:.3}", s.slice, s.pairs, s.baseline);
            for b in &s.blocks {
                println!(
                    "layers {}..{}\tcue {:.3} (p {:.2e})\tdistractors {:.3} (p {:.2e})",
                    b.layers.start, b.layers.end, b.cue_accuracy, b.cue_drop_p, b.distractor_accuracy, b.distractor_drop_p
                );
            }
            outputs.extend([records.join("ablation.jsonl"), out.join("ablation.csv")]);
        }
        Command::RunPatching => {
            let s = h.run_patching()?;
            println!("{}", s.slice);
            for k in &s.kinds {
                let p = k.p_vs_noise.map(|p| format!("{p:.2e}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:?}\tbaseline {:.3}\tsuccess {:.3}\tlift {:.3} / {:.3}\tp vs noise {p}",
                    k.kind, k.baseline, k.success, k.lift, k.bound
                );
            }
            outputs.extend([
                records.join("patching.jsonl"),
                out.join("patching.csv"),
                out.join("patch_grid.csv"),
            ]);
        }
        Command::Interpret => {
            let s = h.run_interpret()?;
            for (split, curve) in &s.curves {
                let c: Vec<String> = curve.iter().map(|v| format!("{v:.3}")).collect();
                println!("{split}\t{}", c.join(" "));
            }
            outputs.extend([records.join("interpret.jsonl"), s.transcripts, out.join("interpret.csv")]);
        }
        Command::Report => {
            print!("{}", h.report()?);
            outputs.push(out.join("report.txt"));
        }
    }

    let entry = ManifestEntry {
        run_id: h.run_id(cli.command.name()),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cli.config.clone(),
        seeds: h.config.seeds.clone(),
        workers: h.config.workers,
        started_unix,
        wall_seconds: started.elapsed().as_secs_f64(),
        outputs,
    };
    Manifest::record(&out, cli.command.name(), entry)
}
