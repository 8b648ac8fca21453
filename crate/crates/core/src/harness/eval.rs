use std::fmt::Write as _;

use crate::apex::ApexModel;
use crate::error::Result;
use crate::exec::Exec;
use crate::synth::{binary_dice_iou, DomainSample, FrozenBackbone, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Source,
    Seen,
    Unseen,
}

impl Group {
    pub fn of(split: Split) -> Self {
        match split {
            Split::SourceTrain | Split::SourceTest => Group::Source,
            Split::TrainSeen | Split::TestSeen => Group::Seen,
            Split::TestUnseen => Group::Unseen,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Source => "source",
            Group::Seen => "seen",
            Group::Unseen => "unseen",
        }
    }
}

/// Dice and IoU in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Score {
    pub dice: f64,
    pub iou: f64,
}

impl Score {
    fn mean(xs: impl IntoIterator<Item = Score>) -> Option<Score> {
        let (mut d, mut i, mut n) = (0.0, 0.0, 0usize);
        for s in xs {
            d += s.dice;
            i += s.iou;
            n += 1;
        }
        (n > 0).then(|| Score {
            dice: d / n as f64,
            iou: i / n as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainScore {
    pub domain: String,
    pub group: Group,
    pub samples: usize,
    pub score: Score,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub domains: Vec<DomainScore>,
    pub seen: Option<Score>,
    pub unseen: Option<Score>,
    /// Mean over every domain in the report.
    pub total: Score,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "domain,group,samples,dice,iou";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for d in &self.domains {
            writeln!(s, "{},{},{},{},{}", d.domain, d.group.as_str(), d.samples, d.score.dice, d.score.iou)
                .expect("write to string");
        }
        for (name, sc) in [("mean_seen", self.seen), ("mean_unseen", self.unseen), ("mean_total", Some(self.total))] {
            if let Some(sc) = sc {
                writeln!(s, "{name},,,{},{}", sc.dice, sc.iou).expect("write to string");
            }
        }
        s
    }

    pub fn domain(&self, id: &str) -> Option<&DomainScore> {
        self.domains.iter().find(|d| d.domain == id)
    }
}

/// Backbone probabilities for one sample, optionally after prompting.
pub fn predict(model: Option<&ApexModel>, bb: &FrozenBackbone, sample: &DomainSample) -> Result<Vec<f64>> {
    let img = &sample.image;
    match model {
        Some(m) => {
            let (pixels, _, _) = m.infer(&m.prepare(img)?)?;
            Ok(bb.forward_pixels(&pixels, img.height(), img.width(), img.channels()))
        }
        None => Ok(bb.forward_pixels(img.data(), img.height(), img.width(), img.channels())),
    }
}

/// Per-domain Dice/IoU at threshold 0.5. `model = None` is source-only
/// evaluation: images reach the backbone unprompted.
pub fn evaluate(
    model: Option<&ApexModel>,
    bb: &FrozenBackbone,
    samples: &[&DomainSample],
    exec: Exec,
) -> Result<MetricReport> {
    let scores = exec.map(samples, |s| -> Result<Score> {
        let (d, i) = binary_dice_iou(&predict(model, bb, s)?, &s.mask);
        Ok(Score {
            dice: 100.0 * d,
            iou: 100.0 * i,
        })
    });
    let mut domains: Vec<(DomainScore, Vec<Score>)> = Vec::new();
    for (s, sc) in samples.iter().zip(scores) {
        let sc = sc?;
        match domains.iter_mut().find(|(d, _)| d.domain == s.domain_id) {
            Some((_, v)) => v.push(sc),
            None => domains.push((
                DomainScore {
                    domain: s.domain_id.clone(),
                    group: Group::of(s.split),
                    samples: 0,
                    score: Score::default(),
                },
                vec![sc],
            )),
        }
    }
    let domains: Vec<DomainScore> = domains
        .into_iter()
        .map(|(mut d, v)| {
            d.samples = v.len();
            d.score = Score::mean(v).unwrap_or_default();
            d
        })
        .collect();
    let by_group = |g: Group| Score::mean(domains.iter().filter(|d| d.group == g).map(|d| d.score));
    Ok(MetricReport {
        seen: by_group(Group::Seen),
        unseen: by_group(Group::Unseen),
        total: Score::mean(domains.iter().map(|d| d.score)).unwrap_or_default(),
        domains,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}
