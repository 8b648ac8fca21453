use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::apex::ApexModel;
use crate::error::{ApexError, Result};
use crate::exec::Exec;
use crate::spectral::write_heatmap_pgm;
use crate::synth::{backbone_calibrate, build_benchmark, Benchmark, DomainSample, FrozenBackbone, Split};

use super::config::TrainConfig;
use super::eval::{evaluate, mean_std, MetricReport, Score};
use super::train::{train, TrainRun};

/// Builds the benchmark and calibrates the backbone on the source training split.
pub fn setup(config: &TrainConfig, bench_seed: u64, exec: Exec) -> Result<(Benchmark, FrozenBackbone)> {
    let bench = build_benchmark(&config.bench, bench_seed, exec)?;
    let bb = backbone_calibrate(&bench.split(Split::SourceTrain), exec)?;
    Ok((bench, bb))
}

/// Seen and unseen test samples.
pub fn test_samples(bench: &Benchmark) -> Vec<&DomainSample> {
    let mut v = bench.split(Split::TestSeen);
    v.extend(bench.split(Split::TestUnseen));
    v
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub run: TrainRun,
    pub report: MetricReport,
}

/// Trains one model per configured seed and evaluates it on the test splits.
/// Seeds run through `outer`; each run is sequential inside.
pub fn run_seeds(config: &TrainConfig, bench: &Benchmark, bb: &FrozenBackbone, outer: Exec) -> Result<Vec<SeedRun>> {
    let tests = test_samples(bench);
    outer
        .map(&config.seeds, |&seed| -> Result<SeedRun> {
            let cfg = config.with_seed(seed);
            let run = train(&cfg, bench, bb, Exec::Sequential)?;
            let report = evaluate(Some(&run.state.model), bb, &tests, Exec::Sequential)?;
            Ok(SeedRun { seed, run, report })
        })
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub use_memory: bool,
    pub use_lfc: bool,
    pub seed: u64,
    pub seen: Score,
    pub unseen: Score,
    pub total: Score,
    pub memory_fingerprint_before: String,
    pub memory_fingerprint_after: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub source_only: MetricReport,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str = "memory,lfc,seed,seen_dice,seen_iou,unseen_dice,unseen_iou,total_dice,total_iou";

    /// Mean total Dice over seeds for one switch setting.
    pub fn mean_total_dice(&self, use_memory: bool, use_lfc: bool) -> f64 {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.use_memory == use_memory && c.use_lfc == use_lfc)
            .map(|c| c.total.dice)
            .collect();
        mean_std(&v).0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        let so = &self.source_only;
        let seen = so.seen.unwrap_or_default();
        let unseen = so.unseen.unwrap_or_default();
        writeln!(
            s,
            "source_only,source_only,,{},{},{},{},{},{}",
            seen.dice, seen.iou, unseen.dice, unseen.iou, so.total.dice, so.total.iou
        )
        .expect("write to string");
        let onoff = |b: bool| if b { "on" } else { "off" };
        for c in &self.cells {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                onoff(c.use_memory),
                onoff(c.use_lfc),
                c.seed,
                c.seen.dice,
                c.seen.iou,
                c.unseen.dice,
                c.unseen.iou,
                c.total.dice,
                c.total.iou
            )
            .expect("write to string");
        }
        for mem in [true, false] {
            for lfc in [true, false] {
                let cells: Vec<&AblationCell> = self.cells.iter().filter(|c| c.use_memory == mem && c.use_lfc == lfc).collect();
                if cells.is_empty() {
                    continue;
                }
                let col = |f: &dyn Fn(&AblationCell) -> f64| mean_std(&cells.iter().map(|c| f(c)).collect::<Vec<_>>());
                let stats = [
                    col(&|c| c.seen.dice),
                    col(&|c| c.seen.iou),
                    col(&|c| c.unseen.dice),
                    col(&|c| c.unseen.iou),
                    col(&|c| c.total.dice),
                    col(&|c| c.total.iou),
                ];
                for (label, pick) in [("mean", 0), ("std", 1)] {
                    let vals: Vec<String> = stats.iter().map(|&(m, sd)| if pick == 0 { m } else { sd }.to_string()).collect();
                    writeln!(s, "{},{},{label},{}", onoff(mem), onoff(lfc), vals.join(",")).expect("write to string");
                }
            }
        }
        s
    }
}

/// `{memory on/off} × {lfc on/off}` for every seed.
pub fn run_ablation(config: &TrainConfig, bench: &Benchmark, bb: &FrozenBackbone, outer: Exec) -> Result<AblationTable> {
    config.validate()?;
    let tests = test_samples(bench);
    let source_only = evaluate(None, bb, &tests, outer)?;
    let mut jobs = Vec::new();
    for mem in [true, false] {
        for lfc in [true, false] {
            for &seed in &config.seeds {
                jobs.push((mem, lfc, seed));
            }
        }
    }
    let cells = outer.map(&jobs, |&(mem, lfc, seed)| -> Result<AblationCell> {
        let mut cfg = config.with_seed(seed);
        cfg.apex.use_memory = mem;
        cfg.use_lfc = lfc;
        let h = &cfg.bench;
        let before = ApexModel::init(cfg.apex.clone(), h.height, h.width, 1)?.memory.fingerprint();
        let run = train(&cfg, bench, bb, Exec::Sequential)?;
        let r = evaluate(Some(&run.state.model), bb, &tests, Exec::Sequential)?;
        Ok(AblationCell {
            use_memory: mem,
            use_lfc: lfc,
            seed,
            seen: r.seen.unwrap_or_default(),
            unseen: r.unseen.unwrap_or_default(),
            total: r.total,
            memory_fingerprint_before: before,
            memory_fingerprint_after: run.state.model.memory.fingerprint(),
        })
    });
    Ok(AblationTable {
        source_only,
        cells: cells.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub slots: usize,
    pub seed: u64,
    pub seen: f64,
    pub unseen: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotSweep {
    pub points: Vec<SweepPoint>,
}

impl SlotSweep {
    pub const CSV_HEADER: &'static str = "slots,seed,seen_dice,unseen_dice,total_dice";

    /// Seed-mean total Dice for `j` slots.
    pub fn mean_total(&self, j: usize) -> f64 {
        mean_std(&self.points.iter().filter(|p| p.slots == j).map(|p| p.total).collect::<Vec<_>>()).0
    }

    pub fn slot_counts(&self) -> Vec<usize> {
        let mut v: Vec<usize> = Vec::new();
        for p in &self.points {
            if !v.contains(&p.slots) {
                v.push(p.slots);
            }
        }
        v
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for p in &self.points {
            writeln!(s, "{},{},{},{},{}", p.slots, p.seed, p.seen, p.unseen, p.total).expect("write to string");
        }
        for j in self.slot_counts() {
            let (m, sd) = mean_std(&self.points.iter().filter(|p| p.slots == j).map(|p| p.total).collect::<Vec<_>>());
            writeln!(s, "{j},mean,,,{m}\n{j},std,,,{sd}").expect("write to string");
        }
        s
    }
}

/// One trained run per slot count and seed. Counts above the feature
/// dimension switch on block-orthogonal initialization.
pub fn slot_sweep(
    config: &TrainConfig,
    bench: &Benchmark,
    bb: &FrozenBackbone,
    slots: &[usize],
    outer: Exec,
) -> Result<SlotSweep> {
    if slots.is_empty() {
        return Err(ApexError::invalid("slot list is empty"));
    }
    let tests = test_samples(bench);
    let jobs: Vec<(usize, u64)> = slots.iter().flat_map(|&j| config.seeds.iter().map(move |&s| (j, s))).collect();
    let points = outer.map(&jobs, |&(j, seed)| -> Result<SweepPoint> {
        let mut cfg = config.with_seed(seed);
        cfg.apex.use_memory = true;
        cfg.apex.slots = j;
        cfg.apex.orthogonal_blocks |= j > cfg.apex.feature_dim;
        let run = train(&cfg, bench, bb, Exec::Sequential)?;
        let r = evaluate(Some(&run.state.model), bb, &tests, Exec::Sequential)?;
        Ok(SweepPoint {
            slots: j,
            seed,
            seen: r.seen.map_or(f64::NAN, |s| s.dice),
            unseen: r.unseen.map_or(f64::NAN, |s| s.dice),
            total: r.total.dice,
        })
    });
    Ok(SlotSweep {
        points: points.into_iter().collect::<Result<_>>()?,
    })
}

/// Indices of the `max(1, round(fraction·J))` largest entries, ascending.
/// Ties go to the lower index.
pub fn top_slots(a: &[f64], fraction: f64) -> Vec<usize> {
    let k = ((fraction * a.len() as f64).round() as usize).clamp(1, a.len().max(1));
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
    let mut top: Vec<usize> = idx.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: BTreeSet<_> = a.iter().collect();
    let sb: BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

pub const TOP_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationExport {
    pub sample_ids: Vec<usize>,
    pub sample_domains: Vec<String>,
    pub addressing: Vec<Vec<f64>>,
    pub top: Vec<Vec<usize>>,
    pub domains: Vec<String>,
    /// Mean pairwise Jaccard of top-slot sets, `[domain × domain]`; the
    /// diagonal excludes self-pairs.
    pub jaccard: Vec<Vec<f64>>,
}

impl ActivationExport {
    pub fn within_domain(&self) -> f64 {
        let n = self.domains.len();
        (0..n).map(|i| self.jaccard[i][i]).sum::<f64>() / n as f64
    }

    pub fn cross_domain(&self) -> f64 {
        let n = self.domains.len();
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.jaccard[i][j])
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut act = String::from("sample_id,domain,top_slots");
        let j = self.addressing.first().map_or(0, Vec::len);
        for k in 0..j {
            write!(act, ",a{k}").expect("write to string");
        }
        act.push('\n');
        for i in 0..self.sample_ids.len() {
            let top: Vec<String> = self.top[i].iter().map(usize::to_string).collect();
            write!(act, "{},{},{}", self.sample_ids[i], self.sample_domains[i], top.join(" ")).expect("write to string");
            for v in &self.addressing[i] {
                write!(act, ",{v}").expect("write to string");
            }
            act.push('\n');
        }
        fs::write(dir.join("activations.csv"), act)?;

        let mut jac = format!("domain,{}\n", self.domains.join(","));
        for (d, row) in self.domains.iter().zip(&self.jaccard) {
            let vals: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(jac, "{d},{}", vals.join(",")).expect("write to string");
        }
        writeln!(jac, "within_mean,{}\ncross_mean,{}", self.within_domain(), self.cross_domain()).expect("write to string");
        fs::write(dir.join("jaccard.csv"), jac)?;

        let flat: Vec<f64> = self.addressing.iter().flatten().copied().collect();
        if !flat.is_empty() {
            write_heatmap_pgm(dir.join("addressing.pgm"), self.addressing.len(), j, &flat)?;
        }
        let n = self.domains.len();
        let jflat: Vec<f64> = self.jaccard.iter().flatten().copied().collect();
        write_heatmap_pgm(dir.join("jaccard.pgm"), n, n, &jflat)?;
        Ok(())
    }
}

/// Addressing vectors, top-10% slot sets and the domain-pair Jaccard matrix.
pub fn export_activations(model: &ApexModel, samples: &[&DomainSample], exec: Exec) -> Result<ActivationExport> {
    if !model.config.use_memory {
        return Err(ApexError::invalid("activation export needs a model with prompt memory"));
    }
    let addressing = exec.map(samples, |s| -> Result<Vec<f64>> {
        let (_, a, _) = model.infer(&model.prepare(&s.image)?)?;
        a.ok_or_else(|| ApexError::invalid("model produced no addressing vector"))
    });
    let addressing: Vec<Vec<f64>> = addressing.into_iter().collect::<Result<_>>()?;
    let top: Vec<Vec<usize>> = addressing.iter().map(|a| top_slots(a, TOP_FRACTION)).collect();
    let mut domains: Vec<String> = Vec::new();
    for s in samples {
        if !domains.contains(&s.domain_id) {
            domains.push(s.domain_id.clone());
        }
    }
    let members: Vec<Vec<usize>> = domains
        .iter()
        .map(|d| (0..samples.len()).filter(|&i| &samples[i].domain_id == d).collect())
        .collect();
    let jaccard = members
        .iter()
        .map(|mi| {
            members
                .iter()
                .map(|mj| {
                    let (mut sum, mut n) = (0.0, 0usize);
                    for &a in mi {
                        for &b in mj {
                            if a != b {
                                sum += jaccard(&top[a], &top[b]);
                                n += 1;
                            }
                        }
                    }
                    if n == 0 { f64::NAN } else { sum / n as f64 }
                })
                .collect()
        })
        .collect();
    Ok(ActivationExport {
        sample_ids: samples.iter().map(|s| s.sample_id).collect(),
        sample_domains: samples.iter().map(|s| s.domain_id.clone()).collect(),
        addressing,
        top,
        domains,
        jaccard,
    })
}
