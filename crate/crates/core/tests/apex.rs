use apex_core::apex::{
    address, apex_forward, memory_gradient, retrieve, update_memory, AddressingVector, ApexConfig, ApexModel,
    DomainFeature, ForwardOptions, MemoryGrad, PromptMemory,
};
use apex_core::graph::ReduceOp;
use apex_core::nn::orthogonal_rows;
use apex_core::rng::rng;
use apex_core::spectral::Image;
use apex_core::{Exec, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

fn small_config(seed: u64) -> ApexConfig {
    ApexConfig {
        feature_dim: 16,
        slots: 6,
        encoder_hidden: vec![12, 12, 12],
        decoder_hidden: vec![12, 12, 12],
        aux_hidden: 8,
        aux_dim: 4,
        seed,
        ..ApexConfig::default()
    }
}

fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut r = rng(seed);
    Image::new(h, w, 1, (0..h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

fn memory(j: usize, k: usize, seed: u64) -> PromptMemory {
    let mut r = rng(seed);
    PromptMemory::from_rows(Tensor::new(vec![j, k], (0..j * k).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
        .unwrap()
}

fn feature(v: Vec<f64>) -> DomainFeature {
    DomainFeature(Tensor::vector(v))
}

#[test]
fn identity_at_initialization() {
    for seed in 0..5 {
        let model = ApexModel::init(small_config(seed), 16, 16, 1).unwrap();
        let img = random_image(seed, 16, 16);
        let out = apex_forward(&model, &img).unwrap();
        assert!(out.image.max_abs_diff(&img) < 1e-9);
    }
}

#[test]
fn memory_starts_orthonormal() {
    let b = orthogonal_rows(150, 256, 3, false).unwrap();
    let mut worst = 0.0f64;
    for i in 0..150 {
        for j in 0..150 {
            let dot: f64 = b.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    assert!(worst < 1e-10, "{worst:e}");
    assert!(orthogonal_rows(300, 256, 3, false).is_err());
    assert!(orthogonal_rows(300, 256, 3, true).is_ok());
}

#[test]
fn retrieval_identities() {
    let mem = memory(4, 3, 1);
    for j in 0..4 {
        let mut a = vec![0.0; 4];
        a[j] = 1.0;
        let z = retrieve(&mem, &AddressingVector(Tensor::vector(a))).unwrap();
        assert_eq!(z.0.data(), mem.slots.row(j));
    }
    let zero = retrieve(&mem, &AddressingVector(Tensor::vector(vec![0.0; 4]))).unwrap();
    assert!(zero.0.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_feature_is_rejected() {
    let mem = memory(3, 4, 2);
    assert!(address(&mem, &feature(vec![0.0; 4])).is_err());
}

/// `∂L/∂B` for `L = Σ w ⊙ (a B)` with `a = cos(z, B)`, under both routings.
fn memory_grads(z: &[f64], b: &Tensor, w: &[f64]) -> (Tensor, Tensor, Tensor) {
    let run = |mode: MemoryGrad| {
        let mut g = Graph::new();
        let zv = g.param(Tensor::new(vec![1, z.len()], z.to_vec()).unwrap());
        let bv = g.param(b.clone());
        let addr_mem = match mode {
            MemoryGrad::AttentionOnly => g.stop_gradient(bv),
            MemoryGrad::FullGraph => bv,
        };
        let a = apex_core::apex::address_graph(&mut g, zv, addr_mem, false).unwrap();
        let zp = g.matmul(a, bv).unwrap();
        let wv = g.constant(Tensor::new(vec![1, w.len()], w.to_vec()).unwrap());
        let prod = g.mul(zp, wv).unwrap();
        let loss = g.reduce(ReduceOp::Sum, prod, None).unwrap();
        g.backward(loss).unwrap();
        let explicit = memory_gradient(g.value(a), &g.grad(zp)).unwrap();
        (g.grad(bv), explicit)
    };
    let (barrier, explicit) = run(MemoryGrad::AttentionOnly);
    let (full, _) = run(MemoryGrad::FullGraph);
    (barrier, explicit, full)
}

#[test]
fn explicit_memory_gradient_matches_barrier_autodiff() {
    let mut r = rng(9);
    let mut differs = false;
    for _ in 0..50 {
        let b = memory(5, 4, r.random()).slots;
        let z: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let (barrier, explicit, full) = memory_grads(&z, &b, &w);
        assert!(barrier.max_abs_diff(&explicit) < 1e-10);
        differs |= full.max_abs_diff(&barrier) > 1e-6;
    }
    assert!(differs);
}

#[test]
fn training_forward_uses_requested_routing() {
    let model = ApexModel::init(small_config(4), 8, 8, 1).unwrap();
    let img = random_image(5, 8, 8);
    let p = model.prepare(&img).unwrap();
    let mut mut_model = model.clone();
    // A non-zero decoder so the loss depends on the memory.
    for t in mut_model.decoder.tensors_mut() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = 0.01 * ((i % 7) as f64 - 3.0);
        }
    }
    let grads = |mode| {
        let mut g = Graph::new();
        let vars = mut_model.bind(&mut g, true);
        let opts = ForwardOptions {
            memory_grad: mode,
            with_aux: false,
            exec: Exec::Sequential,
        };
        let f = mut_model.forward_graph(&mut g, &vars, &[&p], opts).unwrap();
        let loss = g.sum(f.prompted);
        g.backward(loss).unwrap();
        let explicit = memory_gradient(g.value(f.addressing.unwrap()), &g.grad(f.prompt_feature)).unwrap();
        (g.grad(vars.memory.unwrap()), explicit)
    };
    let (barrier, explicit) = grads(MemoryGrad::AttentionOnly);
    assert!(barrier.max_abs_diff(&explicit) < 1e-10);
    let (full, _) = grads(MemoryGrad::FullGraph);
    assert!(full.max_abs_diff(&barrier) > 0.0);
}

#[test]
fn memory_update_rule() {
    let mut mem = memory(3, 2, 6);
    let before = mem.clone();
    update_memory(&mut mem, &Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap(), 0.0).unwrap();
    assert_eq!(mem, before);
    let a = Tensor::vector(vec![1.0, 0.0, 0.0]);
    let g = Tensor::vector(mem.slots.row(0).to_vec());
    let grad = memory_gradient(&a, &g).unwrap();
    update_memory(&mut mem, &grad, 1.0).unwrap();
    assert!(mem.slots.row(0).iter().all(|&v| v == 0.0));
    assert_eq!(mem.slots.row(1), before.slots.row(1));
    assert_eq!(mem.slots.row(2), before.slots.row(2));
}

#[test]
fn memory_stays_finite_under_default_rate() {
    let mut mem = PromptMemory::orthogonal(150, 256, 1, false).unwrap();
    let mut r = rng(2);
    let eta = ApexConfig::default().lr;
    for _ in 0..100 {
        let a = Tensor::new(vec![4, 150], (0..600).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let g = Tensor::new(vec![4, 256], (0..1024).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        update_memory(&mut mem, &memory_gradient(&a, &g).unwrap(), eta).unwrap();
    }
    assert!(mem.slots.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn addressing_is_a_bounded_scale_invariant_cosine(
        seed in any::<u64>(),
        z in prop::collection::vec(-5.0f64..5.0, 6),
        c in 0.01f64..100.0,
    ) {
        // The cosine epsilon bounds the deviation by about eps/‖c·z‖.
        prop_assume!(z.iter().map(|v| v * v).sum::<f64>() > 0.01);
        let mem = memory(7, 6, seed);
        let a = address(&mem, &feature(z.clone())).unwrap();
        prop_assert!(a.0.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let scaled = address(&mem, &feature(z.iter().map(|v| v * c).collect())).unwrap();
        for (x, y) in a.0.data().iter().zip(scaled.0.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let argmax = |t: &Tensor| t.data().iter().enumerate().max_by(|p, q| p.1.total_cmp(q.1)).map(|p| p.0);
        prop_assert_eq!(argmax(&a.0), argmax(&scaled.0));
    }

    #[test]
    fn retrieval_is_linear_and_bounded(
        seed in any::<u64>(),
        a1 in prop::collection::vec(-1.0f64..1.0, 5),
        a2 in prop::collection::vec(-1.0f64..1.0, 5),
    ) {
        let mem = memory(5, 3, seed);
        let r = |a: &[f64]| retrieve(&mem, &AddressingVector(Tensor::vector(a.to_vec()))).unwrap().0;
        let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let lhs = r(&sum);
        let (p, q) = (r(&a1), r(&a2));
        for i in 0..3 {
            prop_assert!((lhs.data()[i] - p.data()[i] - q.data()[i]).abs() < 1e-12);
        }
        let bound: f64 = (0..5)
            .map(|j| a1[j].abs() * mem.slots.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum();
        prop_assert!(p.norm() <= bound + 1e-12);
    }
}
