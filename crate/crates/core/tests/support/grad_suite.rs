//! Gradient checks against central differences, shared by the per-op tests
//! and the acceptance run.

use std::sync::Arc;

use apex_core::apex::{decode_graph, ApexConfig, ApexModel, ForwardOptions, MemoryGrad};
use apex_core::gradcheck::graph_gradient_error;
use apex_core::graph::{BinaryOp, ReduceOp, UnaryOp};
use apex_core::losses::{lfc_loss_graph, seg_loss_graph, LfcOptions};
use apex_core::nn::{mlp_forward, MlpParams};
use apex_core::rng::{rng, Rng};
use apex_core::spectral::{Image, RegionGeometry, SpectralPromptOp};
use apex_core::synth::FrozenBackbone;
use apex_core::{Exec, Graph, Result, Tensor, Var};
use rand::Rng as _;

pub const TRIALS: usize = 100;
pub const TOL: f64 = 1e-4;

/// Op name and worst relative error over its trials.
pub type Checks = Vec<(String, f64)>;

fn rand_tensor(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values whose magnitudes stay clear of 0 so kinks are never straddled.
fn away_from_zero(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..2.0);
            if r.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values with gaps well above the difference step.
fn distinct(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn dims(r: &mut Rng) -> (usize, usize, usize) {
    (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5))
}

fn run<G, F>(out: &mut Checks, name: &str, seed: u64, gen: G, f: F)
where
    G: Fn(&mut Rng) -> Vec<Tensor>,
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let inputs = gen(&mut r);
        let mut probe = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
        let out = f(&mut probe, &vars).unwrap();
        let weights = rand_tensor(&mut r, probe.value(out).shape(), -1.0, 1.0);
        let err = graph_gradient_error(&inputs, Some(&weights), &f).unwrap_or(f64::INFINITY);
        worst = worst.max(err);
    }
    out.push((name.to_string(), worst));
}

pub fn matmul_and_transpose(out: &mut Checks) {
    run(
        out,
        "matmul",
        1,
        |r| {
            let (m, k, n) = dims(r);
            vec![rand_tensor(r, &[m, k], -1.0, 1.0), rand_tensor(r, &[k, n], -1.0, 1.0)]
        },
        |g, v| g.matmul(v[0], v[1]),
    );
    run(
        out,
        "transpose",
        2,
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_tensor(r, &[m, n], -1.0, 1.0)]
        },
        |g, v| g.transpose(v[0]),
    );
}

pub fn binary_ops(out: &mut Checks) {
    for (i, op) in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul].into_iter().enumerate() {
        run(
        out,
            &format!("{op:?}"),
            10 + i as u64,
            |r| {
                let (m, n, _) = dims(r);
                vec![rand_tensor(r, &[m, n], -2.0, 2.0), rand_tensor(r, &[m, n], -2.0, 2.0)]
            },
            |g, v| g.binary(op, v[0], v[1]),
        );
    }
}

pub fn unary_ops(out: &mut Checks) {
    run(out, "exp", 20, |r| vec![rand_tensor(r, &[3, 4], -2.0, 2.0)], |g, v| Ok(g.exp(v[0])));
    run(
        out,
        "log",
        21,
        |r| vec![rand_tensor(r, &[3, 4], 0.2, 3.0)],
        |g, v| g.unary(UnaryOp::Log, v[0]),
    );
    run(out, "sigmoid", 22, |r| vec![rand_tensor(r, &[3, 4], -4.0, 4.0)], |g, v| Ok(g.sigmoid(v[0])));
    run(out, "relu", 23, |r| vec![away_from_zero(r, &[3, 4])], |g, v| Ok(g.relu(v[0])));
    run(
        out,
        "softplus",
        24,
        |r| vec![rand_tensor(r, &[3, 4], -4.0, 4.0)],
        |g, v| g.unary(UnaryOp::Softplus, v[0]),
    );
}

pub fn affine_helpers(out: &mut Checks) {
    run(
        out,
        "add_bias",
        30,
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_tensor(r, &[m, n], -1.0, 1.0), rand_tensor(r, &[n], -1.0, 1.0)]
        },
        |g, v| g.add_bias(v[0], v[1]),
    );
    run(out, "scale", 31, |r| vec![rand_tensor(r, &[2, 5], -1.0, 1.0)], |g, v| Ok(g.scale(v[0], -1.7)));
    run(
        out,
        "add_scalar",
        32,
        |r| vec![rand_tensor(r, &[2, 5], -1.0, 1.0)],
        |g, v| Ok(g.add_scalar(v[0], 0.3)),
    );
}

pub fn reductions(out: &mut Checks) {
    for (i, op) in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Max].into_iter().enumerate() {
        for axis in [None, Some(0), Some(1)] {
            run(
        out,
                &format!("{op:?} axis {axis:?}"),
                40 + 3 * i as u64 + axis.map_or(0, |a| a as u64 + 1),
                |r| {
                    let (m, n, _) = dims(r);
                    vec![distinct(r, &[m, n])]
                },
                |g, v| g.reduce(op, v[0], axis),
            );
        }
    }
}

pub fn indexing_and_shape(out: &mut Checks) {
    run(
        out,
        "gather",
        50,
        |r| vec![rand_tensor(r, &[4, 3], -1.0, 1.0)],
        |g, v| g.gather(v[0], Arc::from(vec![0usize, 5, 5, 11, 2, 7]), vec![2, 3]),
    );
    run(
        out,
        "reshape",
        51,
        |r| vec![rand_tensor(r, &[2, 6], -1.0, 1.0)],
        |g, v| g.reshape(v[0], vec![3, 4]),
    );
    // A barrier is not differentiable in the finite-difference sense, so the
    // reference is the gradient with the blocked branch held constant.
    let mut r = rng(52);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let x = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.stop_gradient(v);
        let p = g.mul(s, v).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        worst = worst.max(g.grad(v).max_abs_diff(&x));
    }
    out.push(("stop_gradient".to_string(), worst));
}

pub fn cosine_and_softmax(out: &mut Checks) {
    run(
        out,
        "cosine_rows",
        60,
        |r| {
            let (m, n, k) = dims(r);
            vec![away_from_zero(r, &[m, k + 1]), away_from_zero(r, &[n, k + 1])]
        },
        |g, v| g.cosine_rows(v[0], v[1]),
    );
    run(
        out,
        "cosine_similarity",
        61,
        |r| vec![away_from_zero(r, &[5]), away_from_zero(r, &[5])],
        |g, v| g.cosine_similarity(v[0], v[1]),
    );
    run(
        out,
        "softmax_rows",
        62,
        |r| {
            let (m, n, _) = dims(r);
            vec![rand_tensor(r, &[m, n], -2.0, 2.0)]
        },
        |g, v| g.softmax_rows(v[0]),
    );
}

pub fn mlp_forward_gradients(out: &mut Checks) {
    let mut r = rng(70);
    let params = MlpParams::init(&[4, 6, 3], false, &mut r).unwrap();
    run(
        out,
        "mlp input",
        71,
        |r| vec![rand_tensor(r, &[2, 4], -1.0, 1.0)],
        |g, v| Ok(mlp_forward(g, &params, v[0])?.0),
    );
}

fn random_image(r: &mut Rng, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn spectral_prompt_op(out: &mut Checks) {
    let mut r = rng(80);
    let geom = RegionGeometry::new(8, 8, 1, 0.5).unwrap();
    let imgs: Vec<Image> = (0..2).map(|_| random_image(&mut r, 8, 8, 1)).collect();
    let spectra: Vec<_> = imgs
        .iter()
        .map(|i| apex_core::apex::PreparedImage::new(i, &geom).unwrap().spectrum)
        .collect();
    run(
        out,
        "spectral prompt",
        81,
        |r| vec![rand_tensor(r, &[2, geom.len()], 0.5, 1.5)],
        |g, v| SpectralPromptOp::new(geom, spectra.clone(), Exec::Sequential)?.apply(g, v[0]),
    );
    run(
        out,
        "decode to multiplier",
        82,
        |r| vec![rand_tensor(r, &[2, 5], -0.5, 0.5)],
        |g, v| {
            let dec = MlpParams::init(&[5, geom.len()], false, &mut rng(83))?.bind_frozen(g);
            decode_graph(g, &dec, v[0], &geom)
        },
    );
}

pub fn backbone_op(out: &mut Checks) {
    let bb = FrozenBackbone {
        threshold: 0.5,
        slope: 0.2,
        blur_radius: 1,
    };
    run(
        out,
        "backbone",
        90,
        |r| vec![rand_tensor(r, &[2, 2 * 36], 0.0, 1.0)],
        |g, v| bb.forward_graph(g, v[0], 6, 6, Exec::Sequential),
    );
}

pub fn segmentation_loss(out: &mut Checks) {
    let mut r = rng(100);
    let masks: Vec<Arc<Vec<f64>>> = (0..3)
        .map(|_| Arc::new((0..10).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect()))
        .collect();
    for (name, pick) in [("seg dice", 0), ("seg ce", 1), ("seg total", 2)] {
        run(
        out,
            name,
            101 + pick as u64,
            |r| vec![rand_tensor(r, &[3, 10], 0.05, 0.95)],
            |g, v| {
                let s = seg_loss_graph(g, v[0], masks.clone())?;
                Ok([s.dice, s.ce, s.total][pick])
            },
        );
    }
}

pub fn contrastive_loss(out: &mut Checks) {
    let labels = [0usize, 0, 0, 1, 1, 1];
    let positives = [1usize, 2, 0, 4, 5, 3];
    for (seed, with_pos) in [(110u64, false), (111, true)] {
        let opts = LfcOptions {
            tau: 0.5,
            positive_in_denominator: with_pos,
        };
        run(
        out,
            &format!("lfc (positive in denominator: {with_pos})"),
            seed,
            |r| vec![away_from_zero(r, &[6, 4])],
            |g, v| lfc_loss_graph(g, v[0], &labels, &positives, opts),
        );
    }
}

pub fn full_pipeline_memory_gradient(out: &mut Checks) {
    // Gradient of the prompted pixels w.r.t. the memory under full-graph
    // semantics, checked through the public model API.
    let config = ApexConfig {
        feature_dim: 6,
        slots: 4,
        encoder_hidden: vec![5],
        decoder_hidden: vec![5],
        aux_hidden: 4,
        aux_dim: 3,
        beta: 0.5,
        ..ApexConfig::default()
    };
    let mut model = ApexModel::init(config, 8, 8, 1).unwrap();
    let mut r = rng(120);
    for l in model.decoder.tensors_mut() {
        for v in l.data_mut() {
            *v = r.random_range(-0.3..0.3);
        }
    }
    let img = random_image(&mut r, 8, 8, 1);
    let prepared = model.prepare(&img).unwrap();
    run(
        out,
        "apex forward (memory)",
        121,
        |_| vec![model.memory.slots.clone()],
        |g, v| {
            let mut m = model.clone();
            m.config.use_memory = true;
            let mut vars = m.bind(g, false);
            vars.memory = Some(v[0]);
            let opts = ForwardOptions {
                memory_grad: MemoryGrad::FullGraph,
                with_aux: false,
                exec: Exec::Sequential,
            };
            Ok(m.forward_graph(g, &vars, &[&prepared], opts)?.prompted)
        },
    );
}

pub const GROUPS: [fn(&mut Checks); 13] = [
    matmul_and_transpose,
    binary_ops,
    unary_ops,
    affine_helpers,
    reductions,
    indexing_and_shape,
    cosine_and_softmax,
    mlp_forward_gradients,
    spectral_prompt_op,
    backbone_op,
    segmentation_loss,
    contrastive_loss,
    full_pipeline_memory_gradient,
];
