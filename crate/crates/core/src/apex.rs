//! Adaptive prompt extraction: domain encoder, cosine-addressed prompt
//! memory, prompt decoder and the auxiliary projection head.
//!
//! Forward chain for one image:
//! `fft2 → low-frequency amplitudes → log1p → standardize → encoder → z → a = cos(z, B) →
//! z′ = aᵀB → decoder → exp → symmetrize → scale amplitudes → ifft2`.

use std::sync::Arc;

use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::error::{ApexError, Result};
use crate::exec::Exec;
use crate::graph::{Graph, Var};
use crate::nn::{orthogonal_rows, sgd_step, BoundMlp, MlpParams};
use crate::rng::{derive_seed, rng};
use crate::spectral::{
    dft_unshifted, extract_low_freq, fft2, Image, LowFreqRegion, PromptMultiplier, RegionGeometry,
    SpectralPromptOp,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ApexConfig {
    /// K, the domain-feature and slot dimension.
    pub feature_dim: usize,
    /// J, the number of memory slots.
    pub slots: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub aux_hidden: usize,
    pub aux_dim: usize,
    pub beta: f64,
    pub tau: f64,
    pub lr: f64,
    pub seed: u64,
    /// `false` bypasses the memory with `z′ = z`.
    pub use_memory: bool,
    pub softmax_addressing: bool,
    /// Allows `slots > feature_dim` with block-orthogonal initialization.
    pub orthogonal_blocks: bool,
}

impl Default for ApexConfig {
    fn default() -> Self {
        Self {
            feature_dim: 256,
            slots: 150,
            encoder_hidden: vec![128, 128, 128],
            decoder_hidden: vec![128, 128, 128],
            aux_hidden: 128,
            aux_dim: 64,
            beta: crate::spectral::DEFAULT_BETA,
            tau: 0.1,
            lr: 1e-3,
            seed: 0,
            use_memory: true,
            softmax_addressing: false,
            orthogonal_blocks: false,
        }
    }
}

impl ApexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.slots == 0 || self.aux_dim == 0 || self.aux_hidden == 0 {
            return Err(ApexError::invalid("feature_dim, slots, aux sizes must be >= 1"));
        }
        if self.slots > self.feature_dim && !self.orthogonal_blocks {
            return Err(ApexError::invalid(format!(
                "slots ({}) > feature_dim ({}) requires orthogonal_blocks",
                self.slots, self.feature_dim
            )));
        }
        if !(self.tau > 0.0) || !(self.lr >= 0.0) {
            return Err(ApexError::invalid("tau must be > 0 and lr >= 0"));
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(ApexError::invalid("hidden widths must be >= 1"));
        }
        Ok(())
    }
}

/// `z`, the encoder's K-dimensional domain feature.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainFeature(pub Tensor);

/// `a`, cosine similarity of `z` to each slot; entries lie in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AddressingVector(pub Tensor);

/// `z′ = Σ_j a_j b_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptFeature(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct AuxEmbedding(pub Tensor);

/// `J × K` slot matrix `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMemory {
    pub slots: Tensor,
}

impl PromptMemory {
    pub fn orthogonal(j: usize, k: usize, seed: u64, allow_blocks: bool) -> Result<Self> {
        Ok(Self {
            slots: orthogonal_rows(j, k, seed, allow_blocks)?,
        })
    }

    pub fn from_rows(slots: Tensor) -> Result<Self> {
        slots.dims2()?;
        Ok(Self { slots })
    }

    pub fn len(&self) -> usize {
        self.slots.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.slots.shape()[1]
    }

    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(self.slots.to_le_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One image reduced to what the prompt pipeline needs: its unshifted DFT
/// and the log-amplitude features of the low-frequency region.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub spectrum: Arc<Vec<Complex64>>,
    pub features: Vec<f64>,
}

impl PreparedImage {
    pub fn new(img: &Image, geometry: &RegionGeometry) -> Result<Self> {
        if (img.height(), img.width(), img.channels()) != (geometry.height, geometry.width, geometry.channels) {
            return Err(ApexError::shape(
                "PreparedImage::new",
                format!(
                    "image {}x{}x{} for region of {}x{}x{}",
                    img.height(),
                    img.width(),
                    img.channels(),
                    geometry.height,
                    geometry.width,
                    geometry.channels
                ),
            ));
        }
        let spectrum = dft_unshifted(img);
        let features = geometry
            .unshifted_indices()
            .into_iter()
            .map(|k| spectrum[k].norm().ln_1p())
            .collect();
        Ok(Self {
            spectrum: Arc::new(spectrum),
            features,
        })
    }
}

/// Fixed per-feature affine map `(f − mean)·scale` applied to encoder inputs.
/// Identity unless fitted; never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Standardizes each feature over `rows`; near-constant features keep scale 1.
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| ApexError::InsufficientSamples("feature statistics need samples".into()))?;
        let n = first.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(ApexError::shape("FeatureNorm::fit", "rows differ in length"));
        }
        let m = rows.len() as f64;
        let mean: Vec<f64> = (0..n).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / m).collect();
        let scale = (0..n)
            .map(|i| {
                let sd = (rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / m).sqrt();
                if sd > 1e-6 { 1.0 / sd } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) * s)
            .collect()
    }
}

/// How the memory receives gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MemoryGrad {
    /// `∂L/∂B = Σ a gᵀ`; the addressing path sees `B` through a barrier.
    #[default]
    AttentionOnly,
    /// Plain autodiff through both addressing and retrieval.
    FullGraph,
}

#[derive(Clone, Debug)]
pub struct ApexVars {
    pub encoder: BoundMlp,
    pub memory: Option<Var>,
    pub decoder: BoundMlp,
    pub head: Option<BoundMlp>,
}

/// Graph handles produced by one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub z: Var,
    pub addressing: Option<Var>,
    pub prompt_feature: Var,
    pub multiplier: Var,
    pub prompted: Var,
    pub aux: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub memory_grad: MemoryGrad,
    pub with_aux: bool,
    pub exec: Exec,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            memory_grad: MemoryGrad::AttentionOnly,
            with_aux: false,
            exec: Exec::Sequential,
        }
    }
}

/// The learnable prompt extractor. The auxiliary head is training-only and
/// may be dropped with [`ApexModel::without_head`].
#[derive(Clone, Debug, PartialEq)]
pub struct ApexModel {
    pub config: ApexConfig,
    pub geometry: RegionGeometry,
    pub input_norm: FeatureNorm,
    pub encoder: MlpParams,
    pub memory: PromptMemory,
    pub decoder: MlpParams,
    pub head: Option<MlpParams>,
}

impl ApexModel {
    pub fn init(config: ApexConfig, height: usize, width: usize, channels: usize) -> Result<Self> {
        config.validate()?;
        let geometry = RegionGeometry::new(height, width, channels, config.beta)?;
        let r = geometry.len();
        let k = config.feature_dim;
        let seed = |stream| derive_seed(config.seed, &[stream]);

        let mut enc_sizes = vec![r];
        enc_sizes.extend(&config.encoder_hidden);
        enc_sizes.push(k);
        let mut dec_sizes = vec![k];
        dec_sizes.extend(&config.decoder_hidden);
        dec_sizes.push(r);

        let encoder = MlpParams::init(&enc_sizes, false, &mut rng(seed(1)))?;
        let memory = PromptMemory::orthogonal(config.slots, k, seed(2), config.orthogonal_blocks)?;
        let decoder = MlpParams::init(&dec_sizes, true, &mut rng(seed(3)))?;
        let head = MlpParams::init(&[k, config.aux_hidden, config.aux_dim], false, &mut rng(seed(4)))?;
        Ok(Self {
            config,
            geometry,
            input_norm: FeatureNorm::identity(r),
            encoder,
            memory,
            decoder,
            head: Some(head),
        })
    }

    pub fn without_head(mut self) -> Self {
        self.head = None;
        self
    }

    pub fn prepare(&self, img: &Image) -> Result<PreparedImage> {
        PreparedImage::new(img, &self.geometry)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ApexVars {
        let bind = |p: &MlpParams, g: &mut Graph| if trainable { p.bind(g) } else { p.bind_frozen(g) };
        let encoder = bind(&self.encoder, g);
        let memory = self.config.use_memory.then(|| {
            if trainable {
                g.param(self.memory.slots.clone())
            } else {
                g.constant(self.memory.slots.clone())
            }
        });
        let decoder = bind(&self.decoder, g);
        let head = self.head.as_ref().map(|h| bind(h, g));
        ApexVars {
            encoder,
            memory,
            decoder,
            head,
        }
    }

    /// Batched forward pass over prepared images.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &ApexVars,
        batch: &[&PreparedImage],
        opts: ForwardOptions,
    ) -> Result<ForwardVars> {
        let n = batch.len();
        let r = self.geometry.len();
        let mut x = Vec::with_capacity(n * r);
        for p in batch {
            if p.features.len() != r {
                return Err(ApexError::shape("encode_domain", "feature length"));
            }
            x.extend(self.input_norm.apply(&p.features));
        }
        let x = g.constant(Tensor::from_parts(vec![n, r], x));
        let z = vars.encoder.forward(g, x)?;

        let (addressing, prompt_feature) = match vars.memory {
            Some(mem) => {
                let addr_mem = match opts.memory_grad {
                    MemoryGrad::AttentionOnly => g.stop_gradient(mem),
                    MemoryGrad::FullGraph => mem,
                };
                let a = address_graph(g, z, addr_mem, self.config.softmax_addressing)?;
                let zp = g.matmul(a, mem)?;
                (Some(a), zp)
            }
            None => (None, z),
        };

        let multiplier = decode_graph(g, &vars.decoder, prompt_feature, &self.geometry)?;
        let spectra = batch.iter().map(|p| Arc::clone(&p.spectrum)).collect();
        let prompted = SpectralPromptOp::new(self.geometry, spectra, opts.exec)?.apply(g, multiplier)?;

        let aux = match (&vars.head, opts.with_aux) {
            (Some(h), true) => Some(h.forward(g, z)?),
            (None, true) => return Err(ApexError::invalid("auxiliary head requested but absent")),
            _ => None,
        };
        Ok(ForwardVars {
            z,
            addressing,
            prompt_feature,
            multiplier,
            prompted,
            aux,
        })
    }

    /// Inference on prepared images; the head is never evaluated.
    pub fn infer(&self, p: &PreparedImage) -> Result<(Vec<f64>, Option<Vec<f64>>, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let f = self.forward_graph(&mut g, &vars, &[p], ForwardOptions::default())?;
        Ok((
            g.value(f.prompted).data().to_vec(),
            f.addressing.map(|a| g.value(a).data().to_vec()),
            g.value(f.z).data().to_vec(),
        ))
    }

    /// Hash of the input statistics and every learnable tensor.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.input_norm.mean.iter().chain(&self.input_norm.scale) {
            h.update(v.to_le_bytes());
        }
        for t in self.encoder.tensors().into_iter().chain([&self.memory.slots]).chain(self.decoder.tensors()) {
            h.update(t.to_le_bytes());
        }
        if let Some(head) = &self.head {
            for t in head.tensors() {
                h.update(t.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

/// `a[n×J]`: cosine of each row of `z` with each slot (softmax optional).
pub fn address_graph(g: &mut Graph, z: Var, memory: Var, softmax: bool) -> Result<Var> {
    let a = g.cosine_rows(z, memory)?;
    if softmax {
        g.softmax_rows(a)
    } else {
        Ok(a)
    }
}

/// Decoder output → `exp` → negation-symmetric average, `[n × region]`.
pub fn decode_graph(g: &mut Graph, dec: &BoundMlp, zp: Var, geometry: &RegionGeometry) -> Result<Var> {
    let raw = dec.forward(g, zp)?;
    let shape = g.value(raw).shape().to_vec();
    let r = geometry.len();
    if shape.last() != Some(&r) {
        return Err(ApexError::shape(
            "decode_prompt",
            format!("decoder emits {:?} for a region of {r}", shape),
        ));
    }
    let n = g.value(raw).len() / r;
    let partner = geometry.partner_indices();
    let idx: Arc<[usize]> = (0..n)
        .flat_map(|s| partner.iter().map(move |&p| s * r + p))
        .collect();
    let p = g.exp(raw);
    let flipped = g.gather(p, idx, shape)?;
    let sum = g.add(p, flipped)?;
    Ok(g.scale(sum, 0.5))
}

/// `z = E(log(1 + low-frequency amplitudes))`.
pub fn encode_domain(enc: &MlpParams, low: &LowFreqRegion) -> Result<DomainFeature> {
    let feats = low.log_features();
    if feats.len() != enc.input_dim() {
        return Err(ApexError::shape(
            "encode_domain",
            format!("{} region values for an encoder of {} inputs", feats.len(), enc.input_dim()),
        ));
    }
    Ok(DomainFeature(Tensor::vector(enc.forward_vec(&feats)?)))
}

pub fn address(mem: &PromptMemory, z: &DomainFeature) -> Result<AddressingVector> {
    if z.0.len() != mem.dim() {
        return Err(ApexError::shape(
            "address",
            format!("feature of {} for slots of {}", z.0.len(), mem.dim()),
        ));
    }
    if z.0.data().iter().all(|&v| v == 0.0) {
        return Err(ApexError::DegenerateInput("address"));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.0.clone().reshape(vec![1, mem.dim()])?);
    let b = g.constant(mem.slots.clone());
    let a = address_graph(&mut g, zv, b, false)?;
    Ok(AddressingVector(Tensor::vector(g.value(a).data().to_vec())))
}

pub fn retrieve(mem: &PromptMemory, a: &AddressingVector) -> Result<PromptFeature> {
    if a.0.len() != mem.len() {
        return Err(ApexError::shape(
            "retrieve",
            format!("{} weights for {} slots", a.0.len(), mem.len()),
        ));
    }
    let k = mem.dim();
    let mut out = vec![0.0; k];
    for (j, &w) in a.0.data().iter().enumerate() {
        for (o, b) in out.iter_mut().zip(mem.slots.row(j)) {
            *o += w * b;
        }
    }
    Ok(PromptFeature(Tensor::vector(out)))
}

pub fn decode_prompt(dec: &MlpParams, zp: &PromptFeature, geometry: &RegionGeometry) -> Result<PromptMultiplier> {
    if dec.output_dim() != geometry.len() {
        return Err(ApexError::shape(
            "decode_prompt",
            format!("decoder emits {} for a region of {}", dec.output_dim(), geometry.len()),
        ));
    }
    let raw = dec.forward_vec(zp.0.data())?;
    let exp: Vec<f64> = raw.iter().map(|v| v.exp()).collect();
    PromptMultiplier::symmetrized(*geometry, &exp)
}

pub fn project_aux(head: &MlpParams, z: &DomainFeature) -> Result<AuxEmbedding> {
    Ok(AuxEmbedding(Tensor::vector(head.forward_vec(z.0.data())?)))
}

/// Result of [`apex_forward`]. `addressing` is `None` when the memory is bypassed.
#[derive(Clone, Debug, PartialEq)]
pub struct ApexOutput {
    pub image: Image,
    pub addressing: Option<AddressingVector>,
    pub feature: DomainFeature,
}

pub fn apex_forward(model: &ApexModel, img: &Image) -> Result<ApexOutput> {
    let spec = fft2(img)?;
    // Validates the cutoff against this image before the batched path runs.
    extract_low_freq(&spec, model.config.beta)?;
    let prepared = model.prepare(img)?;
    let (pixels, a, z) = model.infer(&prepared)?;
    Ok(ApexOutput {
        image: Image::new(img.height(), img.width(), img.channels(), pixels)?,
        addressing: a.map(|v| AddressingVector(Tensor::vector(v))),
        feature: DomainFeature(Tensor::vector(z)),
    })
}

/// `∂L/∂B = Σ_samples a gᵀ`, for `a` `[J]` / `[n×J]` and `g` `[K]` / `[n×K]`.
pub fn memory_gradient(a: &Tensor, g: &Tensor) -> Result<Tensor> {
    let as2 = |t: &Tensor| -> Result<(usize, usize)> {
        match *t.shape() {
            [len] => Ok((1, len)),
            [n, len] => Ok((n, len)),
            _ => Err(ApexError::shape("memory_gradient", format!("rank of {:?}", t.shape()))),
        }
    };
    let (na, j) = as2(a)?;
    let (ng, k) = as2(g)?;
    if na != ng {
        return Err(ApexError::shape(
            "memory_gradient",
            format!("{na} addressing vectors, {ng} feature gradients"),
        ));
    }
    let data = crate::graph::matmul_tn(a.data(), g.data(), na, j, k);
    Ok(Tensor::from_parts(vec![j, k], data))
}

/// Per-slot SGD step `b_j ← b_j − η ∂L/∂b_j`.
pub fn update_memory(mem: &mut PromptMemory, grad: &Tensor, eta: f64) -> Result<()> {
    sgd_step(&mut [&mut mem.slots], std::slice::from_ref(grad), eta)
}
