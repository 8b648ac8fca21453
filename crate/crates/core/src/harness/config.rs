//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors. [`TrainConfig::to_text`] writes every key, defaults
//! included, so an output directory always records the full configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::apex::{ApexConfig, MemoryGrad};
use crate::error::{ApexError, Result};
use crate::losses::BatchPlan;
use crate::synth::{BenchmarkConfig, DomainSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Optimizer {
    /// Plain gradient descent, the same rule used for memory slots.
    #[default]
    Sgd,
    /// Adam for the encoder, decoder and head; memory keeps plain SGD.
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub apex: ApexConfig,
    pub epochs: usize,
    pub plan: BatchPlan,
    pub optimizer: Optimizer,
    pub use_lfc: bool,
    pub positive_in_denominator: bool,
    pub memory_grad: MemoryGrad,
    /// Standardize encoder inputs with seen-training statistics.
    pub standardize_features: bool,
    pub seeds: Vec<u64>,
    pub slot_sweep: Vec<usize>,
    pub bench: BenchmarkConfig,
}

/// Training step size and contrastive temperature. With plain SGD the
/// model-level defaults either barely move the prompt (η) or let the
/// contrastive term swamp the segmentation loss (τ).
pub const DEFAULT_TRAIN_LR: f64 = 0.05;
pub const DEFAULT_TRAIN_TAU: f64 = 1.0;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            apex: ApexConfig {
                lr: DEFAULT_TRAIN_LR,
                tau: DEFAULT_TRAIN_TAU,
                ..ApexConfig::default()
            },
            epochs: 40,
            plan: BatchPlan {
                domains: 2,
                per_domain: 4,
            },
            optimizer: Optimizer::Sgd,
            use_lfc: true,
            positive_in_denominator: false,
            memory_grad: MemoryGrad::AttentionOnly,
            standardize_features: true,
            seeds: vec![0, 1, 2],
            slot_sweep: vec![1, 5, 25, 75, 150, 300],
            bench: BenchmarkConfig::default(),
        }
    }
}

/// Parsed `key = value` pairs in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    pub entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ApexError::Config {
                line: i + 1,
                detail: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ApexError::Config {
                    line: i + 1,
                    detail: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(ApexError::Config {
                    line: i + 1,
                    detail: format!("duplicate key {key}"),
                });
            }
        }
        Ok(Self { entries })
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| ApexError::Config {
        line,
        detail: format!("{key}: cannot parse {v:?}"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_value(line, key, x.trim())).collect()
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(ApexError::Config {
            line,
            detail: format!("{key}: expected true/false, got {v:?}"),
        }),
    }
}

/// `id:gain:bias:shading:noise_sigma`, several separated by `;`.
fn parse_domains(line: usize, key: &str, v: &str) -> Result<Vec<DomainSpec>> {
    v.split(';')
        .map(|d| {
            let f: Vec<&str> = d.trim().split(':').map(str::trim).collect();
            if f.len() != 5 {
                return Err(ApexError::Config {
                    line,
                    detail: format!("{key}: expected id:gain:bias:shading:noise, got {d:?}"),
                });
            }
            Ok(DomainSpec::new(
                f[0],
                parse_value(line, key, f[1])?,
                parse_value(line, key, f[2])?,
                parse_value(line, key, f[3])?,
                parse_value(line, key, f[4])?,
            ))
        })
        .collect()
}

fn format_domains(ds: &[DomainSpec]) -> String {
    ds.iter()
        .map(|d| format!("{}:{}:{}:{}:{}", d.id, d.gain, d.bias, d.shading, d.noise_sigma))
        .collect::<Vec<_>>()
        .join(";")
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut c = Self::default();
        for (key, (line, v)) in &kv.entries {
            let (line, v) = (*line, v.as_str());
            match key.as_str() {
                "feature_dim" => c.apex.feature_dim = parse_value(line, key, v)?,
                "slots" => c.apex.slots = parse_value(line, key, v)?,
                "encoder_hidden" => c.apex.encoder_hidden = parse_list(line, key, v)?,
                "decoder_hidden" => c.apex.decoder_hidden = parse_list(line, key, v)?,
                "aux_hidden" => c.apex.aux_hidden = parse_value(line, key, v)?,
                "aux_dim" => c.apex.aux_dim = parse_value(line, key, v)?,
                "beta" => c.apex.beta = parse_value(line, key, v)?,
                "tau" => c.apex.tau = parse_value(line, key, v)?,
                "lr" => c.apex.lr = parse_value(line, key, v)?,
                "use_memory" => c.apex.use_memory = parse_bool(line, key, v)?,
                "softmax_addressing" => c.apex.softmax_addressing = parse_bool(line, key, v)?,
                "orthogonal_blocks" => c.apex.orthogonal_blocks = parse_bool(line, key, v)?,
                "epochs" => c.epochs = parse_value(line, key, v)?,
                "domains_per_batch" => c.plan.domains = parse_value(line, key, v)?,
                "samples_per_domain" => c.plan.per_domain = parse_value(line, key, v)?,
                "optimizer" => {
                    c.optimizer = match v {
                        "sgd" => Optimizer::Sgd,
                        "adam" => Optimizer::Adam,
                        _ => {
                            return Err(ApexError::Config {
                                line,
                                detail: format!("optimizer: expected sgd or adam, got {v:?}"),
                            })
                        }
                    }
                }
                "use_lfc" => c.use_lfc = parse_bool(line, key, v)?,
                "positive_in_denominator" => c.positive_in_denominator = parse_bool(line, key, v)?,
                "memory_grad" => {
                    c.memory_grad = match v {
                        "attention" => MemoryGrad::AttentionOnly,
                        "full" => MemoryGrad::FullGraph,
                        _ => {
                            return Err(ApexError::Config {
                                line,
                                detail: format!("memory_grad: expected attention or full, got {v:?}"),
                            })
                        }
                    }
                }
                "standardize_features" => c.standardize_features = parse_bool(line, key, v)?,
                "seeds" => c.seeds = parse_list(line, key, v)?,
                "slot_sweep" => c.slot_sweep = parse_list(line, key, v)?,
                "height" => c.bench.height = parse_value(line, key, v)?,
                "width" => c.bench.width = parse_value(line, key, v)?,
                "train_per_domain" => c.bench.train_per_domain = parse_value(line, key, v)?,
                "test_per_domain" => c.bench.test_per_domain = parse_value(line, key, v)?,
                "source_domain" => {
                    let mut d = parse_domains(line, key, v)?;
                    if d.len() != 1 {
                        return Err(ApexError::Config {
                            line,
                            detail: "source_domain takes exactly one domain".into(),
                        });
                    }
                    c.bench.source = d.remove(0);
                }
                "seen_domains" => c.bench.seen = parse_domains(line, key, v)?,
                "unseen_domains" => c.bench.unseen = parse_domains(line, key, v)?,
                _ => {
                    return Err(ApexError::Config {
                        line,
                        detail: format!("unknown key {key}"),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.apex.validate()?;
        self.plan.validate()?;
        self.bench.validate()?;
        if self.seeds.is_empty() {
            return Err(ApexError::invalid("seeds must be nonempty"));
        }
        if self.plan.domains > self.bench.seen.len() {
            return Err(ApexError::invalid(format!(
                "batch draws {} domains but only {} are seen",
                self.plan.domains,
                self.bench.seen.len()
            )));
        }
        if self.use_lfc && self.plan.per_domain < 2 {
            return Err(ApexError::invalid("the contrastive loss needs >= 2 samples per domain"));
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let a = &self.apex;
        let b = &self.bench;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        put("feature_dim", a.feature_dim.to_string());
        put("slots", a.slots.to_string());
        put("encoder_hidden", join(&a.encoder_hidden));
        put("decoder_hidden", join(&a.decoder_hidden));
        put("aux_hidden", a.aux_hidden.to_string());
        put("aux_dim", a.aux_dim.to_string());
        put("beta", a.beta.to_string());
        put("tau", a.tau.to_string());
        put("lr", a.lr.to_string());
        put("use_memory", a.use_memory.to_string());
        put("softmax_addressing", a.softmax_addressing.to_string());
        put("orthogonal_blocks", a.orthogonal_blocks.to_string());
        put("epochs", self.epochs.to_string());
        put("domains_per_batch", self.plan.domains.to_string());
        put("samples_per_domain", self.plan.per_domain.to_string());
        put(
            "optimizer",
            match self.optimizer {
                Optimizer::Sgd => "sgd",
                Optimizer::Adam => "adam",
            }
            .into(),
        );
        put("use_lfc", self.use_lfc.to_string());
        put("positive_in_denominator", self.positive_in_denominator.to_string());
        put(
            "memory_grad",
            match self.memory_grad {
                MemoryGrad::AttentionOnly => "attention",
                MemoryGrad::FullGraph => "full",
            }
            .into(),
        );
        put("standardize_features", self.standardize_features.to_string());
        put("seeds", join(&self.seeds));
        put("slot_sweep", join(&self.slot_sweep));
        put("height", b.height.to_string());
        put("width", b.width.to_string());
        put("train_per_domain", b.train_per_domain.to_string());
        put("test_per_domain", b.test_per_domain.to_string());
        put("source_domain", format_domains(std::slice::from_ref(&b.source)));
        put("seen_domains", format_domains(&b.seen));
        put("unseen_domains", format_domains(&b.unseen));
        s
    }

    /// Copy with the model seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.apex.seed = seed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let c = TrainConfig::default();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.bench, c.bench);
    }

    #[test]
    fn overrides_and_comments() {
        let c = TrainConfig::from_text("# comment\n\nslots = 25\nuse_lfc = off\nseeds = 4, 5\noptimizer = adam\n").unwrap();
        assert_eq!(c.apex.slots, 25);
        assert!(!c.use_lfc);
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.optimizer, Optimizer::Adam);
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["slots 3", "nope = 1", "slots = x", "slots = 1\nslots = 2", "seeds = ", "use_lfc = maybe"] {
            assert!(TrainConfig::from_text(text).is_err(), "{text}");
        }
        match TrainConfig::from_text("\nslots = x") {
            Err(ApexError::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
