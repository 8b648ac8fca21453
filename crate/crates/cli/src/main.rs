use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use apex_core::harness::{
    evaluate, export_activations, load_bench_dir, load_checkpoint, mean_std, predict, run_ablation, save_bench_dir,
    save_checkpoint, setup, slot_sweep, test_samples, train, TrainConfig,
};
use apex_core::spectral::{write_pnm, Image};
use apex_core::synth::{backbone_calibrate, build_benchmark, Benchmark, FrozenBackbone, Split};
use apex_core::Exec;

#[derive(Parser)]
#[command(name = "apex", version, about = "Low-frequency amplitude prompting for a frozen segmenter")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Seen,
    Unseen,
    Source,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain benchmark.
    GenBench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per configured seed and evaluate it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, value_enum)]
        split: EvalSplit,
        /// Skip prompting: images go to the backbone unmodified.
        #[arg(long)]
        source_only: bool,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Memory on/off by contrastive loss on/off, for every seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train across slot counts.
    SweepSlots {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated slot counts; defaults to the configured sweep.
        #[arg(long, value_delimiter = ',')]
        j_list: Option<Vec<usize>>,
        /// Existing benchmark; otherwise one is generated with --seed.
        #[arg(long)]
        bench: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Export memory-slot activations and image dumps for a checkpoint.
    VizMem {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

/// Loads a benchmark and adopts its generation settings into `config`.
fn load_bench(dir: &Path, config: &mut TrainConfig, exec: Exec) -> Result<(Benchmark, FrozenBackbone)> {
    let (bench, bench_cfg) = load_bench_dir(dir).with_context(|| format!("loading benchmark {}", dir.display()))?;
    if bench_cfg.bench != config.bench {
        eprintln!("note: using the benchmark settings stored in {}", dir.display());
    }
    config.bench = bench_cfg.bench;
    config.validate()?;
    let bb = backbone_calibrate(&bench.split(Split::SourceTrain), exec)?;
    Ok((bench, bb))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::GenBench { config, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let bench = build_benchmark(&cfg.bench, seed, exec)?;
            save_bench_dir(&bench, &cfg, &out)?;
            println!("wrote {} samples to {}", bench.samples.len(), out.display());
        }
        Command::Train { config, bench, out } => {
            let mut cfg = load_config(config.as_deref())?;
            let (bench, bb) = load_bench(&bench, &mut cfg, exec)?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            let tests = test_samples(&bench);
            let mut summary = String::from("seed,seen_dice,seen_iou,unseen_dice,unseen_iou,total_dice,total_iou\n");
            let mut totals = Vec::new();
            for &seed in &cfg.seeds {
                let run = train(&cfg.with_seed(seed), &bench, &bb, exec)?;
                let dir = out.join(format!("seed_{seed}"));
                save_checkpoint(&run.state, &dir)?;
                write(&dir.join("steps.csv"), &run.log_csv())?;
                let report = evaluate(Some(&run.state.model), &bb, &tests, exec)?;
                write(&dir.join("metrics.csv"), &report.to_csv())?;
                let (s, u) = (report.seen.unwrap_or_default(), report.unseen.unwrap_or_default());
                summary.push_str(&format!(
                    "{seed},{},{},{},{},{},{}\n",
                    s.dice, s.iou, u.dice, u.iou, report.total.dice, report.total.iou
                ));
                totals.push(report.total.dice);
                println!("seed {seed}: total Dice {:.2}", report.total.dice);
            }
            let (m, sd) = mean_std(&totals);
            summary.push_str(&format!("mean_total_dice,{m}\nstd_total_dice,{sd}\n"));
            write(&out.join("summary.csv"), &summary)?;
        }
        Command::Eval {
            ckpt,
            bench,
            split,
            source_only,
            out,
        } => {
            let state = load_checkpoint(&ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let (bench, _) = load_bench_dir(&bench)?;
            let split = match split {
                EvalSplit::Seen => Split::TestSeen,
                EvalSplit::Unseen => Split::TestUnseen,
                EvalSplit::Source => Split::SourceTest,
            };
            let samples = bench.split(split);
            if samples.is_empty() {
                bail!("split {} is empty", split.as_str());
            }
            let model = (!source_only).then_some(&state.model);
            let csv = evaluate(model, &state.backbone, &samples, exec)?.to_csv();
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Ablate { config, bench, out } => {
            let mut cfg = load_config(config.as_deref())?;
            let dir = bench.clone();
            let (bench, bb) = load_bench(&bench, &mut cfg, exec)?;
            let table = run_ablation(&cfg, &bench, &bb, exec)?;
            let out = out.unwrap_or_else(|| dir.join("ablation"));
            write(&out.join("config.txt"), &cfg.to_text())?;
            write(&out.join("ablation.csv"), &table.to_csv())?;
            for (mem, lfc) in [(true, true), (true, false), (false, true), (false, false)] {
                println!(
                    "memory {:<3} lfc {:<3} mean total Dice {:.2}",
                    if mem { "on" } else { "off" },
                    if lfc { "on" } else { "off" },
                    table.mean_total_dice(mem, lfc)
                );
            }
        }
        Command::SweepSlots {
            config,
            j_list,
            bench,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let (bench, bb) = match bench {
                Some(dir) => load_bench(&dir, &mut cfg, exec)?,
                None => setup(&cfg, seed, exec)?,
            };
            let js = j_list.unwrap_or_else(|| cfg.slot_sweep.clone());
            let sweep = slot_sweep(&cfg, &bench, &bb, &js, exec)?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            write(&out.join("slot_sweep.csv"), &sweep.to_csv())?;
            for j in sweep.slot_counts() {
                println!("J={j:<4} mean total Dice {:.2}", sweep.mean_total(j));
            }
        }
        Command::VizMem { ckpt, bench, out } => {
            let state = load_checkpoint(&ckpt)?;
            let (bench, _) = load_bench_dir(&bench)?;
            let samples = test_samples(&bench);
            let out = out.unwrap_or_else(|| ckpt.join("viz"));
            let export = export_activations(&state.model, &samples, exec)?;
            export.write(&out)?;
            println!(
                "within-domain Jaccard {:.4}, cross-domain {:.4}",
                export.within_domain(),
                export.cross_domain()
            );
            dump_examples(&state, &bench, &out.join("images"))?;
        }
    }
    Ok(())
}

/// Input, prompted input, prediction and mask for the first test sample of
/// each domain.
fn dump_examples(state: &apex_core::harness::TrainState, bench: &Benchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut done = Vec::new();
    for s in test_samples(bench) {
        if done.contains(&s.domain_id) {
            continue;
        }
        done.push(s.domain_id.clone());
        let img = &s.image;
        let (h, w) = (img.height(), img.width());
        let prompted = apex_core::apex::apex_forward(&state.model, img)?.image;
        let clipped = Image::new(h, w, img.channels(), prompted.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
        let pred = predict(Some(&state.model), &state.backbone, s)?;
        let id = &s.domain_id;
        write_pnm(dir.join(format!("{id}_input.pgm")), img)?;
        write_pnm(dir.join(format!("{id}_prompted.pgm")), &clipped)?;
        write_pnm(dir.join(format!("{id}_pred.pgm")), &Image::new(h, w, 1, pred)?)?;
        write_pnm(dir.join(format!("{id}_mask.pgm")), &Image::new(h, w, 1, s.mask.clone())?)?;
    }
    Ok(())
}
