//! Segmentation loss (Dice + binary cross-entropy) and the low-frequency
//! feature contrastive loss with its batch sampler.
//!
//! The contrastive loss for anchor `i` with positive `p(i)` and negatives
//! `N(i)` (every batch member from another domain) is
//!
//! ```text
//! ℓ_i = −log( exp(s_ip/τ) / Σ_{n∈N(i)} exp(s_in/τ) )
//! ```
//!
//! with `s` the cosine similarity. The positive is not part of the
//! denominator unless [`LfcOptions::positive_in_denominator`] is set, so the
//! loss can be negative. The batch loss is the mean over anchors.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;

use crate::error::{ApexError, Result};
use crate::exec::Exec;
use crate::graph::{cosine_matrix, CustomOp, Graph, Var};
use crate::rng::rng;
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1.0;
pub const PROB_CLAMP: f64 = 1e-7;

fn check_pair(op: &'static str, pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(ApexError::shape(op, format!("prediction of {} vs mask of {}", pred.len(), gt.len())));
    }
    Ok(())
}

/// `1 − (2Σpg + ε)/(Σp + Σg + ε)` with `ε = 1`.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("dice_loss", pred, gt)?;
    let (i, p, g) = dice_sums(pred, gt);
    Ok(1.0 - (2.0 * i + DICE_SMOOTH) / (p + g + DICE_SMOOTH))
}

fn dice_sums(pred: &[f64], gt: &[f64]) -> (f64, f64, f64) {
    pred.iter().zip(gt).fold((0.0, 0.0, 0.0), |(i, p, g), (&a, &b)| (i + a * b, p + a, g + b))
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn ce_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_pair("ce_loss", pred, gt)?;
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegLoss {
    pub dice: f64,
    pub ce: f64,
    pub total: f64,
}

/// Dice + cross-entropy, unweighted.
pub fn seg_loss(pred: &[f64], gt: &[f64]) -> Result<SegLoss> {
    let dice = dice_loss(pred, gt)?;
    let ce = ce_loss(pred, gt)?;
    Ok(SegLoss {
        dice,
        ce,
        total: dice + ce,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SegTerm {
    Dice,
    CrossEntropy,
}

/// Batch-mean Dice or cross-entropy over `[n × pixels]` predictions.
struct SegTermOp {
    term: SegTerm,
    masks: Vec<Arc<Vec<f64>>>,
}

impl SegTermOp {
    fn value(&self, pred: &Tensor) -> Result<f64> {
        let (n, _) = pred.dims2()?;
        let mut acc = 0.0;
        for s in 0..n {
            acc += match self.term {
                SegTerm::Dice => dice_loss(pred.row(s), &self.masks[s])?,
                SegTerm::CrossEntropy => ce_loss(pred.row(s), &self.masks[s])?,
            };
        }
        Ok(acc / n as f64)
    }
}

impl CustomOp for SegTermOp {
    fn name(&self) -> &'static str {
        match self.term {
            SegTerm::Dice => "dice_loss",
            SegTerm::CrossEntropy => "ce_loss",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let pred = inputs[0];
        let (n, m) = (pred.shape()[0], pred.shape()[1]);
        let up = grad_out.item() / n as f64;
        let mut d = Vec::with_capacity(n * m);
        for s in 0..n {
            let (p, g) = (pred.row(s), &self.masks[s][..]);
            match self.term {
                SegTerm::Dice => {
                    let (i, sp, sg) = dice_sums(p, g);
                    let den = sp + sg + DICE_SMOOTH;
                    let num = 2.0 * i + DICE_SMOOTH;
                    d.extend(g.iter().map(|&gv| -up * (2.0 * gv * den - num) / (den * den)));
                }
                SegTerm::CrossEntropy => {
                    let scale = up / m as f64;
                    d.extend(p.iter().zip(g).map(|(&pv, &gv)| {
                        if pv <= PROB_CLAMP || pv >= 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            scale * (-gv / pv + (1.0 - gv) / (1.0 - pv))
                        }
                    }));
                }
            }
        }
        vec![Tensor::from_parts(vec![n, m], d)]
    }
}

/// Graph handles of the batch segmentation loss.
#[derive(Clone, Copy, Debug)]
pub struct SegVars {
    pub dice: Var,
    pub ce: Var,
    pub total: Var,
}

/// Records batch-mean Dice, cross-entropy and their sum for `pred` `[n × pixels]`.
pub fn seg_loss_graph(g: &mut Graph, pred: Var, masks: Vec<Arc<Vec<f64>>>) -> Result<SegVars> {
    let (n, m) = g.value(pred).dims2()?;
    if masks.len() != n || masks.iter().any(|k| k.len() != m) {
        return Err(ApexError::shape("seg_loss", "masks do not match predictions"));
    }
    let mut term = |t: SegTerm| -> Result<Var> {
        let op = SegTermOp {
            term: t,
            masks: masks.clone(),
        };
        let v = op.value(g.value(pred))?;
        Ok(g.custom(vec![pred], Tensor::scalar(v), Arc::new(op)))
    };
    let dice = term(SegTerm::Dice)?;
    let ce = term(SegTerm::CrossEntropy)?;
    let total = g.add(dice, ce)?;
    Ok(SegVars { dice, ce, total })
}

/// Domains per batch (`P`) and samples per domain (`S`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub domains: usize,
    pub per_domain: usize,
}

impl BatchPlan {
    pub fn new(domains: usize, per_domain: usize) -> Result<Self> {
        let p = Self { domains, per_domain };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains < 2 {
            return Err(ApexError::invalid("a batch needs at least 2 domains for negatives"));
        }
        if self.per_domain < 2 {
            return Err(ApexError::invalid("a batch needs at least 2 samples per domain for positives"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.domains * self.per_domain
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchMember {
    /// Index into the domain pool passed to [`sample_batch`].
    pub domain: usize,
    /// Sample identifier taken from that pool.
    pub sample: usize,
}

/// Sampled batch: members grouped by domain, plus the batch position of
/// each member's positive partner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub members: Vec<BatchMember>,
    pub positives: Vec<usize>,
}

impl Batch {
    pub fn labels(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.domain).collect()
    }
}

/// Draws `P` distinct domains, `S` distinct samples from each, and one
/// uniformly chosen same-domain positive per anchor.
pub fn sample_batch(pools: &[Vec<usize>], plan: BatchPlan, seed: u64) -> Result<Batch> {
    plan.validate()?;
    if pools.len() < plan.domains {
        return Err(ApexError::InsufficientSamples(format!(
            "{} domains available, plan needs {}",
            pools.len(),
            plan.domains
        )));
    }
    if let Some((d, p)) = pools.iter().enumerate().find(|(_, p)| p.len() < plan.per_domain) {
        return Err(ApexError::InsufficientSamples(format!(
            "domain {d} has {} samples, plan needs {}",
            p.len(),
            plan.per_domain
        )));
    }
    let mut r = rng(seed);
    let mut domains = sample_indices(&mut r, pools.len(), plan.domains).into_vec();
    domains.sort_unstable();
    let mut members = Vec::with_capacity(plan.batch_size());
    for &d in &domains {
        let mut picks = sample_indices(&mut r, pools[d].len(), plan.per_domain).into_vec();
        picks.sort_unstable();
        members.extend(picks.into_iter().map(|i| BatchMember {
            domain: d,
            sample: pools[d][i],
        }));
    }
    let s = plan.per_domain;
    let positives = (0..members.len())
        .map(|i| {
            let base = i / s * s;
            let off = r.random_range(0..s - 1);
            
            if base + off >= i { base + off + 1 } else { base + off }
        })
        .collect();
    Ok(Batch { members, positives })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LfcOptions {
    pub tau: f64,
    pub positive_in_denominator: bool,
}

impl LfcOptions {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            positive_in_denominator: false,
        }
    }
}

/// Anchor-mean contrastive loss from precomputed similarities:
/// `pos[i]` is anchor `i`'s positive similarity, `negs[i]` its negatives.
pub fn lfc_from_similarities(pos: &[f64], negs: &[Vec<f64>], opts: LfcOptions) -> Result<f64> {
    if pos.is_empty() || pos.len() != negs.len() {
        return Err(ApexError::shape("lfc_loss", "one negative set per anchor required"));
    }
    if !(opts.tau > 0.0) {
        return Err(ApexError::invalid(format!("temperature must be > 0, got {}", opts.tau)));
    }
    let mut total = 0.0;
    for (&sp, ns) in pos.iter().zip(negs) {
        if ns.is_empty() {
            return Err(ApexError::InsufficientSamples("anchor without negatives".into()));
        }
        let mut logits: Vec<f64> = ns.iter().map(|s| s / opts.tau).collect();
        if opts.positive_in_denominator {
            logits.push(sp / opts.tau);
        }
        total += log_sum_exp(&logits) - sp / opts.tau;
    }
    Ok(total / pos.len() as f64)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_lfc_batch(labels: &[usize], positives: &[usize]) -> Result<()> {
    if labels.len() != positives.len() {
        return Err(ApexError::shape("lfc_loss", "one positive per anchor required"));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(ApexError::InsufficientSamples("contrastive loss needs at least 2 domains".into()));
    }
    if let Some((d, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(ApexError::InsufficientSamples(format!("domain {d} has a single sample in the batch")));
    }
    for (i, &p) in positives.iter().enumerate() {
        if p >= labels.len() || p == i || labels[p] != labels[i] {
            return Err(ApexError::invalid(format!("positive {p} for anchor {i} is not a same-domain partner")));
        }
    }
    Ok(())
}

/// Contrastive loss over embedding rows `[n × d]` with domain `labels`.
pub fn lfc_loss(embeddings: &Tensor, labels: &[usize], positives: &[usize], opts: LfcOptions) -> Result<f64> {
    let (n, d) = embeddings.dims2()?;
    if labels.len() != n {
        return Err(ApexError::shape("lfc_loss", "one label per embedding required"));
    }
    check_lfc_batch(labels, positives)?;
    let sims = cosine_matrix(embeddings.data(), embeddings.data(), n, n, d);
    let (pos, negs) = split_similarities(&sims, n, labels, positives);
    lfc_from_similarities(&pos, &negs, opts)
}

fn split_similarities(sims: &[f64], n: usize, labels: &[usize], positives: &[usize]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let pos = (0..n).map(|i| sims[i * n + positives[i]]).collect();
    let negs = (0..n)
        .map(|i| (0..n).filter(|&j| labels[j] != labels[i]).map(|j| sims[i * n + j]).collect())
        .collect();
    (pos, negs)
}

/// Contrastive loss over a similarity matrix `[n × n]`.
struct LfcOp {
    labels: Vec<usize>,
    positives: Vec<usize>,
    opts: LfcOptions,
}

impl CustomOp for LfcOp {
    fn name(&self) -> &'static str {
        "lfc_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let s = inputs[0].data();
        let n = self.labels.len();
        let tau = self.opts.tau;
        let up = grad_out.item() / n as f64;
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            let p = self.positives[i];
            let mut cols: Vec<usize> = (0..n).filter(|&j| self.labels[j] != self.labels[i]).collect();
            if self.opts.positive_in_denominator {
                cols.push(p);
            }
            let logits: Vec<f64> = cols.iter().map(|&j| s[i * n + j] / tau).collect();
            let lse = log_sum_exp(&logits);
            for (&j, l) in cols.iter().zip(&logits) {
                d[i * n + j] += up * (l - lse).exp() / tau;
            }
            d[i * n + p] -= up / tau;
        }
        vec![Tensor::from_parts(vec![n, n], d)]
    }
}

/// Records the contrastive loss over embedding rows `emb` `[n × d]`.
pub fn lfc_loss_graph(
    g: &mut Graph,
    emb: Var,
    labels: &[usize],
    positives: &[usize],
    opts: LfcOptions,
) -> Result<Var> {
    let (n, _) = g.value(emb).dims2()?;
    if labels.len() != n {
        return Err(ApexError::shape("lfc_loss", "one label per embedding required"));
    }
    check_lfc_batch(labels, positives)?;
    let sims = g.cosine_rows(emb, emb)?;
    let (pos, negs) = split_similarities(g.value(sims).data(), n, labels, positives);
    let v = lfc_from_similarities(&pos, &negs, opts)?;
    let op = LfcOp {
        labels: labels.to_vec(),
        positives: positives.to_vec(),
        opts,
    };
    Ok(g.custom(vec![sims], Tensor::scalar(v), Arc::new(op)))
}

/// Per-step loss values; `total == seg + lfc` exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub seg: f64,
    pub dice_part: f64,
    pub ce_part: f64,
    pub lfc: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,seg,dice,ce,lfc,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:e},{:e},{:e},{:e},{:e}",
            self.seg, self.dice_part, self.ce_part, self.lfc, self.total
        )
    }
}

/// Batch-mean segmentation losses evaluated outside a graph, in parallel.
pub fn seg_loss_batch(preds: &[Vec<f64>], masks: &[&[f64]], exec: Exec) -> Result<SegLoss> {
    if preds.len() != masks.len() || preds.is_empty() {
        return Err(ApexError::shape("seg_loss_batch", "one mask per prediction"));
    }
    let idx: Vec<usize> = (0..preds.len()).collect();
    let parts = exec.map(&idx, |&i| seg_loss(&preds[i], masks[i]));
    let n = preds.len() as f64;
    let (mut dice, mut ce) = (0.0, 0.0);
    for p in parts {
        let p = p?;
        dice += p.dice;
        ce += p.ce;
    }
    let (dice, ce) = (dice / n, ce / n);
    Ok(SegLoss {
        dice,
        ce,
        total: dice + ce,
    })
}
