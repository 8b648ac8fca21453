use std::sync::Arc;

use crate::apex::{FeatureNorm, memory_gradient, update_memory, ApexModel, ForwardOptions, MemoryGrad, PreparedImage};
use crate::error::{ApexError, Result};
use crate::exec::Exec;
use crate::graph::Graph;
use crate::losses::{lfc_loss_graph, sample_batch, seg_loss_graph, LfcOptions, LossReport};
use crate::nn::{sgd_step, Adam, MlpParams};
use crate::rng::derive_seed;
use crate::spectral::Image;
use crate::synth::{Benchmark, FrozenBackbone, Split};
use crate::tensor::Tensor;

use super::config::{Optimizer, TrainConfig};

const BATCH_STREAM: u64 = 0xBA7C;

/// Model plus the frozen backbone it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ApexModel,
    pub backbone: FrozenBackbone,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub state: TrainState,
    pub log: Vec<LossReport>,
}

impl TrainRun {
    pub fn log_csv(&self) -> String {
        let mut s = String::from(LossReport::CSV_HEADER);
        s.push('\n');
        for (i, r) in self.log.iter().enumerate() {
            s.push_str(&r.csv_row(i));
            s.push('\n');
        }
        s
    }
}

struct Optimizers {
    encoder: Option<Adam>,
    decoder: Option<Adam>,
    head: Option<Adam>,
}

fn adam_for(p: &MlpParams) -> Adam {
    Adam::new(&p.tensors().iter().map(|t| t.len()).collect::<Vec<_>>())
}

fn step_mlp(p: &mut MlpParams, grads: &[Tensor], adam: Option<&mut Adam>, eta: f64) -> Result<()> {
    let mut params = p.tensors_mut();
    match adam {
        Some(a) => a.step(&mut params, grads, eta),
        None => sgd_step(&mut params, grads, eta),
    }
}

/// Steps per epoch: enough batches to cover the seen training pool once.
pub fn steps_per_epoch(config: &TrainConfig, bench: &Benchmark) -> usize {
    let n = bench.split(Split::TrainSeen).len();
    n.div_ceil(config.plan.batch_size()).max(1)
}

/// Model initialization for `config.apex.seed`. Encoder inputs are optionally
/// standardized with statistics of the seen training pool, and the head is
/// kept only when the contrastive loss is active.
pub fn init_state(config: &TrainConfig, bench: &Benchmark, backbone: FrozenBackbone) -> Result<TrainState> {
    let first = bench
        .samples
        .first()
        .ok_or_else(|| ApexError::InsufficientSamples("empty benchmark".into()))?;
    let img: &Image = &first.image;
    let mut model = ApexModel::init(config.apex.clone(), img.height(), img.width(), img.channels())?;
    if config.standardize_features {
        let train_seen = bench.split(Split::TrainSeen);
        let features: Vec<Vec<f64>> = train_seen
        .iter()
        .map(|s| model.prepare(&s.image).map(|p| p.features))
        .collect::<Result<_>>()?;
        model.input_norm = FeatureNorm::fit(&features.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    }
    if !config.use_lfc {
        model = model.without_head();
    }
    Ok(TrainState {
        config: config.clone(),
        model,
        backbone,
        steps: 0,
    })
}

/// Optimizes the prompt extractor on the seen-domain training split with
/// `seg + lfc`. The backbone enters the graph only as a fixed function.
pub fn train(config: &TrainConfig, bench: &Benchmark, backbone: &FrozenBackbone, exec: Exec) -> Result<TrainRun> {
    config.validate()?;
    let mut state = init_state(config, bench, *backbone)?;
    let model = &mut state.model;
    let (h, w) = (model.geometry.height, model.geometry.width);

    let groups = bench.by_domain(Split::TrainSeen);
    let mut prepared: Vec<Vec<PreparedImage>> = Vec::new();
    let mut masks: Vec<Vec<Arc<Vec<f64>>>> = Vec::new();
    for (_, samples) in &groups {
        let p = exec.map(samples, |s| model.prepare(&s.image));
        prepared.push(p.into_iter().collect::<Result<_>>()?);
        masks.push(samples.iter().map(|s| Arc::new(s.mask.clone())).collect());
    }
    let pools: Vec<Vec<usize>> = prepared.iter().map(|p| (0..p.len()).collect()).collect();

    let adam = config.optimizer == Optimizer::Adam;
    let mut opt = Optimizers {
        encoder: adam.then(|| adam_for(&model.encoder)),
        decoder: adam.then(|| adam_for(&model.decoder)),
        head: model.head.as_ref().filter(|_| adam).map(adam_for),
    };
    let lfc_opts = LfcOptions {
        tau: config.apex.tau,
        positive_in_denominator: config.positive_in_denominator,
    };
    let eta = config.apex.lr;
    let total_steps = config.epochs * steps_per_epoch(config, bench);
    let mut log = Vec::with_capacity(total_steps);

    for step in 0..total_steps {
        let batch = sample_batch(&pools, config.plan, derive_seed(config.apex.seed, &[BATCH_STREAM, step as u64]))?;
        let imgs: Vec<&PreparedImage> = batch.members.iter().map(|m| &prepared[m.domain][m.sample]).collect();
        let gts: Vec<Arc<Vec<f64>>> = batch
            .members
            .iter()
            .map(|m| Arc::clone(&masks[m.domain][m.sample]))
            .collect();

        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let opts = ForwardOptions {
            memory_grad: config.memory_grad,
            with_aux: config.use_lfc,
            exec,
        };
        let fv = model.forward_graph(&mut g, &vars, &imgs, opts)?;
        let pred = backbone.forward_graph(&mut g, fv.prompted, h, w, exec)?;
        let seg = seg_loss_graph(&mut g, pred, gts)?;
        let (total, lfc) = match fv.aux {
            Some(aux) => {
                let l = lfc_loss_graph(&mut g, aux, &batch.labels(), &batch.positives, lfc_opts)?;
                (g.add(seg.total, l)?, Some(l))
            }
            None => (seg.total, None),
        };
        let report = LossReport {
            seg: g.value(seg.total).item(),
            dice_part: g.value(seg.dice).item(),
            ce_part: g.value(seg.ce).item(),
            lfc: lfc.map_or(0.0, |l| g.value(l).item()),
            total: g.value(total).item(),
        };
        if !report.total.is_finite() {
            return Err(ApexError::TrainingDiverged(format!(
                "non-finite loss at step {step}: seg {} lfc {}",
                report.seg, report.lfc
            )));
        }
        g.backward(total)?;

        let enc_grads = vars.encoder.grads(&g);
        let dec_grads = vars.decoder.grads(&g);
        let head_grads = vars.head.as_ref().filter(|_| config.use_lfc).map(|h| h.grads(&g));
        let mem_grad = match (vars.memory, fv.addressing, config.memory_grad) {
            (Some(_), Some(a), MemoryGrad::AttentionOnly) => {
                Some(memory_gradient(g.value(a), &g.grad(fv.prompt_feature))?)
            }
            (Some(mem), _, MemoryGrad::FullGraph) => Some(g.grad(mem)),
            _ => None,
        };
        let all_finite = enc_grads
            .iter()
            .chain(&dec_grads)
            .chain(head_grads.iter().flatten())
            .chain(mem_grad.iter())
            .all(Tensor::is_finite);
        if !all_finite {
            return Err(ApexError::TrainingDiverged(format!("non-finite gradient at step {step}")));
        }

        step_mlp(&mut model.encoder, &enc_grads, opt.encoder.as_mut(), eta)?;
        step_mlp(&mut model.decoder, &dec_grads, opt.decoder.as_mut(), eta)?;
        if let (Some(head), Some(grads)) = (model.head.as_mut(), head_grads.as_ref()) {
            step_mlp(head, grads, opt.head.as_mut(), eta)?;
        }
        if let Some(grad) = &mem_grad {
            update_memory(&mut model.memory, grad, eta)?;
        }
        log.push(report);
    }
    state.steps = total_steps;
    Ok(TrainRun { state, log })
}
