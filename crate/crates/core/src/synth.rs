//! Deterministic multi-domain segmentation benchmark and a frozen,
//! differentiable intensity-threshold segmenter.
//!
//! Scenes are textured backgrounds (~0.3) with 1–3 elliptical lesions
//! (~0.7). A domain applies `clamp(gain · shading · x + bias + noise, 0, 1)`
//! where `shading` is a smooth field built from the lowest non-zero
//! frequency cosine modes, so every domain shift lives in the low
//! frequencies of the spectrum.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::apex::hex;
use crate::error::{ApexError, Result};
use crate::exec::Exec;
use crate::graph::{sigmoid, CustomOp, Graph, Var};
use crate::rng::{derive_seed, rng};
use crate::spectral::Image;
use crate::tensor::Tensor;

pub const BACKGROUND_LEVEL: f64 = 0.3;
pub const LESION_LEVEL: f64 = 0.7;
pub const TEXTURE_AMPLITUDE: f64 = 0.04;
pub const MIN_LESION_FRACTION: f64 = 0.02;
pub const MAX_LESION_FRACTION: f64 = 0.20;
/// Lowest non-zero spatial frequencies used by shading fields.
const SHADING_MODES: [(f64, f64); 3] = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];

/// Binary mask as 0/1 values, row-major `[h × w]`.
pub type Mask = Vec<f64>;

/// Generates one base scene and its lesion mask. Sides must be even and >= 32.
pub fn gen_base_scene(seed: u64, height: usize, width: usize) -> Result<(Image, Mask)> {
    if height < 32 || width < 32 || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(ApexError::invalid(format!(
            "scene sides must be even and >= 32, got {height}x{width}"
        )));
    }
    let mut r = rng(seed);
    let n = height * width;
    let (hf, wf) = (height as f64, width as f64);
    let mask = loop {
        let count = r.random_range(1..=3);
        let ellipses: Vec<[f64; 5]> = (0..count)
            .map(|_| {
                let a = r.random_range(0.08..0.2) * hf.min(wf);
                let b = r.random_range(0.08..0.2) * hf.min(wf);
                let cy = r.random_range(0.2..0.8) * hf;
                let cx = r.random_range(0.2..0.8) * wf;
                [cy, cx, a, b, r.random_range(0.0..PI)]
            })
            .collect();
        let mask: Mask = (0..n)
            .map(|i| {
                let (y, x) = ((i / width) as f64 + 0.5, (i % width) as f64 + 0.5);
                let inside = ellipses.iter().any(|&[cy, cx, a, b, th]| {
                    let (dy, dx) = (y - cy, x - cx);
                    let u = dx * th.cos() + dy * th.sin();
                    let v = -dx * th.sin() + dy * th.cos();
                    (u / a).powi(2) + (v / b).powi(2) <= 1.0
                });
                if inside { 1.0 } else { 0.0 }
            })
            .collect();
        let frac = mask.iter().sum::<f64>() / n as f64;
        if (MIN_LESION_FRACTION..=MAX_LESION_FRACTION).contains(&frac) {
            break mask;
        }
    };
    let data = mask
        .iter()
        .map(|&m| {
            let base = if m > 0.5 { LESION_LEVEL } else { BACKGROUND_LEVEL };
            base + r.random_range(-TEXTURE_AMPLITUDE..TEXTURE_AMPLITUDE)
        })
        .collect();
    Ok((Image::new(height, width, 1, data)?, mask))
}

/// Appearance of one imaging domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: String,
    pub gain: f64,
    pub bias: f64,
    /// Peak relative amplitude of the multiplicative shading field.
    pub shading: f64,
    /// Number of cosine modes in the shading field (at most 3).
    pub shading_modes: usize,
    /// Seeds the mode phases and weights. The field is a property of the
    /// domain, shared by all of its samples.
    pub shading_seed: u64,
    pub noise_sigma: f64,
}

impl DomainSpec {
    pub fn new(id: &str, gain: f64, bias: f64, shading: f64, noise_sigma: f64) -> Self {
        Self {
            id: id.to_string(),
            gain,
            bias,
            shading,
            shading_modes: 3,
            shading_seed: id_seed(id),
            noise_sigma,
        }
    }

    pub fn identity(id: &str) -> Self {
        Self {
            shading_modes: 0,
            ..Self::new(id, 1.0, 0.0, 0.0, 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0) || !self.bias.is_finite() {
            return Err(ApexError::invalid(format!("domain {}: gain must be > 0", self.id)));
        }
        if !(self.shading >= 0.0 && self.shading < 1.0) || self.shading_modes > SHADING_MODES.len() {
            return Err(ApexError::invalid(format!(
                "domain {}: shading must lie in [0, 1) with at most 3 modes",
                self.id
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(ApexError::invalid(format!("domain {}: noise_sigma must be >= 0", self.id)));
        }
        Ok(())
    }
}

fn id_seed(id: &str) -> u64 {
    let labels: Vec<u64> = id.bytes().map(u64::from).collect();
    derive_seed(0x5AAD, &labels)
}

/// Smooth multiplicative field `1 + shading · Σ w_m cos(2π(f·x) + φ_m)`,
/// with weights summing to 1 so the field stays within `1 ± shading`.
pub fn shading_field(spec: &DomainSpec, seed: u64, height: usize, width: usize) -> Vec<f64> {
    let modes = spec.shading_modes.min(SHADING_MODES.len());
    if modes == 0 || spec.shading == 0.0 {
        return vec![1.0; height * width];
    }
    let mut r = rng(derive_seed(seed, &[0x5AAD]));
    let params: Vec<(f64, f64, f64, f64)> = SHADING_MODES[..modes]
        .iter()
        .map(|&(fy, fx)| (fy, fx, r.random_range(0.5..1.0), r.random_range(0.0..2.0 * PI)))
        .collect();
    let wsum: f64 = params.iter().map(|p| p.2).sum();
    (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            let s: f64 = params
                .iter()
                .map(|&(fy, fx, w, ph)| w * (2.0 * PI * (fy * y / height as f64 + fx * x / width as f64) + ph).cos())
                .sum();
            1.0 + spec.shading * s / wsum
        })
        .collect()
}

/// Applies a domain's gain, shading, bias and noise, then clamps to `[0, 1]`.
/// `seed` drives the per-sample noise; the shading field comes from the domain.
pub fn apply_domain(img: &Image, spec: &DomainSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let (h, w) = (img.height(), img.width());
    let field = shading_field(spec, spec.shading_seed, h, w);
    let mut r = rng(derive_seed(seed, &[0x0015E]));
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma > 0"));
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let eps = noise.as_ref().map_or(0.0, |d| d.sample(&mut r));
            (spec.gain * field[i % (h * w)] * v + spec.bias + eps).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(h, w, img.channels(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    SourceTrain,
    SourceTest,
    TrainSeen,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::SourceTrain,
        Split::SourceTest,
        Split::TrainSeen,
        Split::TestSeen,
        Split::TestUnseen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::SourceTest => "source_test",
            Split::TrainSeen => "train_seen",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub sample_id: usize,
    pub image: Image,
    pub mask: Mask,
    pub domain_id: String,
    pub split: Split,
    pub scene_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub height: usize,
    pub width: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub source: DomainSpec,
    pub seen: Vec<DomainSpec>,
    pub unseen: Vec<DomainSpec>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            train_per_domain: 200,
            test_per_domain: 50,
            source: DomainSpec::new("S", 1.0, 0.0, 0.0, 0.02),
            seen: vec![
                DomainSpec::new("A", 0.9, 0.25, 0.15, 0.02),
                DomainSpec::new("B", 0.55, 0.0, 0.15, 0.02),
            ],
            unseen: vec![
                DomainSpec::new("C", 1.2, 0.15, 0.15, 0.02),
                DomainSpec::new("D", 0.7, -0.05, 0.15, 0.02),
            ],
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seen.len() < 2 || self.unseen.len() < 2 {
            return Err(ApexError::invalid("need at least 2 seen and 2 unseen domains"));
        }
        if self.train_per_domain < 2 || self.test_per_domain < 1 {
            return Err(ApexError::invalid("need >= 2 train and >= 1 test samples per domain"));
        }
        let mut ids = HashSet::new();
        for d in self.all_domains() {
            d.validate()?;
            if !ids.insert(d.id.as_str()) || d.id.contains(',') || d.id.is_empty() {
                return Err(ApexError::invalid(format!("domain id {:?} is empty, repeated or has a comma", d.id)));
            }
        }
        let hull: Vec<(f64, f64)> = self.seen.iter().map(|d| (d.gain, d.bias)).collect();
        for u in &self.unseen {
            if in_convex_hull(&hull, (u.gain, u.bias)) {
                return Err(ApexError::OverlappingDomains(format!(
                    "unseen domain {} (gain {}, bias {}) lies inside the seen-domain hull",
                    u.id, u.gain, u.bias
                )));
            }
        }
        Ok(())
    }

    pub fn all_domains(&self) -> impl Iterator<Item = &DomainSpec> {
        std::iter::once(&self.source).chain(&self.seen).chain(&self.unseen)
    }

    pub fn domain(&self, id: &str) -> Option<&DomainSpec> {
        self.all_domains().find(|d| d.id == id)
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Whether `q` lies in the closed convex hull of `points` (2-D).
pub fn in_convex_hull(points: &[(f64, f64)], q: (f64, f64)) -> bool {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    pts.dedup();
    let on_segment = |a: (f64, f64), b: (f64, f64)| {
        cross(a, b, q).abs() <= 1e-12
            && q.0 >= a.0.min(b.0) - 1e-12
            && q.0 <= a.0.max(b.0) + 1e-12
            && q.1 >= a.1.min(b.1) - 1e-12
            && q.1 <= a.1.max(b.1) + 1e-12
    };
    match pts.len() {
        0 => return false,
        1 => return pts[0] == q,
        _ => {}
    }
    // Andrew's monotone chain.
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    if hull.len() < 3 {
        return on_segment(pts[0], pts[pts.len() - 1]);
    }
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], q) >= -1e-12)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub seed: u64,
    pub samples: Vec<DomainSample>,
}

/// Generates every split. Scene seeds are unique across the whole benchmark,
/// so no base scene is shared between train and test.
pub fn build_benchmark(config: &BenchmarkConfig, seed: u64, exec: Exec) -> Result<Benchmark> {
    config.validate()?;
    let mut jobs: Vec<(Split, DomainSpec, u64, u64)> = Vec::new();
    let mut push = |split: Split, dom_idx: u64, spec: &DomainSpec, count: usize| {
        for i in 0..count as u64 {
            let scene = derive_seed(seed, &[split.tag(), dom_idx, i, 0]);
            let domain = derive_seed(seed, &[split.tag(), dom_idx, i, 1]);
            jobs.push((split, spec.clone(), scene, domain));
        }
    };
    push(Split::SourceTrain, 0, &config.source, config.train_per_domain);
    push(Split::SourceTest, 0, &config.source, config.test_per_domain);
    for (d, spec) in config.seen.iter().enumerate() {
        push(Split::TrainSeen, d as u64 + 1, spec, config.train_per_domain);
    }
    for (d, spec) in config.seen.iter().enumerate() {
        push(Split::TestSeen, d as u64 + 1, spec, config.test_per_domain);
    }
    for (d, spec) in config.unseen.iter().enumerate() {
        push(Split::TestUnseen, (config.seen.len() + d) as u64 + 1, spec, config.test_per_domain);
    }
    let mut seen_seeds = HashSet::new();
    if !jobs.iter().all(|j| seen_seeds.insert(j.2)) {
        return Err(ApexError::invalid("scene seed collision; choose another benchmark seed"));
    }
    let built = exec.map(&jobs, |(split, spec, scene, dseed)| -> Result<DomainSample> {
        let (base, mask) = gen_base_scene(*scene, config.height, config.width)?;
        let image = apply_domain(&base, spec, *dseed)?;
        Ok(DomainSample {
            sample_id: 0,
            image,
            mask,
            domain_id: spec.id.clone(),
            split: *split,
            scene_seed: *scene,
        })
    });
    let mut samples = Vec::with_capacity(built.len());
    for (i, s) in built.into_iter().enumerate() {
        let mut s = s?;
        s.sample_id = i;
        samples.push(s);
    }
    Ok(Benchmark {
        config: config.clone(),
        seed,
        samples,
    })
}

impl Benchmark {
    pub fn split(&self, split: Split) -> Vec<&DomainSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Samples of `split` grouped by domain id, in configuration order.
    pub fn by_domain(&self, split: Split) -> Vec<(String, Vec<&DomainSample>)> {
        let mut groups: Vec<(String, Vec<&DomainSample>)> = Vec::new();
        for s in self.split(split) {
            match groups.iter_mut().find(|(id, _)| *id == s.domain_id) {
                Some((_, v)) => v.push(s),
                None => groups.push((s.domain_id.clone(), vec![s])),
            }
        }
        groups
    }

    pub const MANIFEST_HEADER: &'static str = "sample_id,domain_id,split,scene_seed,gain,bias,shading,shading_modes,shading_seed,noise_sigma";

    pub fn manifest_csv(&self) -> String {
        let mut s = String::from(Self::MANIFEST_HEADER);
        s.push('\n');
        for smp in &self.samples {
            let d = self.config.domain(&smp.domain_id).expect("sample domain is configured");
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                smp.sample_id,
                smp.domain_id,
                smp.split.as_str(),
                smp.scene_seed,
                d.gain,
                d.bias,
                d.shading,
                d.shading_modes,
                d.shading_seed,
                d.noise_sigma
            )
            .expect("write to string");
        }
        s
    }

    pub fn image_path(dir: &Path, id: usize) -> std::path::PathBuf {
        dir.join("samples").join(format!("{id:05}_image.apxt"))
    }

    pub fn mask_path(dir: &Path, id: usize) -> std::path::PathBuf {
        dir.join("samples").join(format!("{id:05}_mask.apxt"))
    }

    /// Writes `manifest.csv` and one image/mask tensor pair per sample.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("samples"))?;
        fs::write(dir.join("manifest.csv"), self.manifest_csv())?;
        for s in &self.samples {
            s.image.to_tensor().save(Self::image_path(dir, s.sample_id))?;
            let (h, w) = (s.image.height(), s.image.width());
            Tensor::from_parts(vec![h, w], s.mask.clone()).save(Self::mask_path(dir, s.sample_id))?;
        }
        Ok(())
    }

    /// Reloads samples written by [`Benchmark::save`]; `config` must be the
    /// configuration the benchmark was generated with.
    pub fn load(dir: &Path, config: &BenchmarkConfig, seed: u64) -> Result<Self> {
        let path = dir.join("manifest.csv");
        let text = fs::read_to_string(&path)?;
        let bad = |detail: String| ApexError::Format {
            path: path.clone(),
            detail,
        };
        let mut lines = text.lines();
        if lines.next() != Some(Self::MANIFEST_HEADER) {
            return Err(bad("unexpected manifest header".into()));
        }
        let mut samples = Vec::new();
        for (ln, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(format!("line {}: expected 10 fields", ln + 2)));
            }
            let sample_id: usize = f[0].parse().map_err(|_| bad(format!("line {}: sample_id", ln + 2)))?;
            let split = Split::parse(f[2]).ok_or_else(|| bad(format!("line {}: split {}", ln + 2, f[2])))?;
            let scene_seed: u64 = f[3].parse().map_err(|_| bad(format!("line {}: scene_seed", ln + 2)))?;
            if config.domain(f[1]).is_none() {
                return Err(bad(format!("line {}: unknown domain {}", ln + 2, f[1])));
            }
            let image = Image::from_tensor(&Tensor::load(Self::image_path(dir, sample_id))?)?;
            let mask = Tensor::load(Self::mask_path(dir, sample_id))?.into_data();
            samples.push(DomainSample {
                sample_id,
                image,
                mask,
                domain_id: f[1].to_string(),
                split,
                scene_seed,
            });
        }
        Ok(Self {
            config: config.clone(),
            seed,
            samples,
        })
    }
}

/// `pred = sigmoid((blur_r(gray(x)) − t)/s)`, with `gray` the channel mean
/// and `blur_r` a box average over the valid `(2r+1)²` neighbourhood.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrozenBackbone {
    pub threshold: f64,
    pub slope: f64,
    pub blur_radius: usize,
}

pub const DEFAULT_BLUR_RADIUS: usize = 1;
pub const THRESHOLD_GRID_STEP: f64 = 0.01;
pub const SLOPE_GRID: [f64; 4] = [0.05, 0.1, 0.15, 0.2];

impl FrozenBackbone {
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.threshold.to_le_bytes());
        h.update(self.slope.to_le_bytes());
        h.update((self.blur_radius as u64).to_le_bytes());
        hex(&h.finalize())
    }

    fn blurred_gray(&self, pixels: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
        let n = h * w;
        let gray: Vec<f64> = (0..n)
            .map(|i| (0..c).map(|ch| pixels[ch * n + i]).sum::<f64>() / c as f64)
            .collect();
        box_blur(&gray, h, w, self.blur_radius, false)
    }

    /// Probability map `[h × w]` for raw pixels laid out `[c][h][w]`.
    pub fn forward_pixels(&self, pixels: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
        self.blurred_gray(pixels, h, w, c)
            .into_iter()
            .map(|b| sigmoid((b - self.threshold) / self.slope))
            .collect()
    }

    /// Records the segmenter on `x` `[n × (c·h·w)]`, producing `[n × (h·w)]`.
    /// The parameters are constants of the op and never receive gradient.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, height: usize, width: usize, exec: Exec) -> Result<Var> {
        let (n, len) = g.value(x).dims2()?;
        if len % (height * width) != 0 {
            return Err(ApexError::shape("backbone_forward", "row length is not a multiple of h*w"));
        }
        let c = len / (height * width);
        let xv = g.value(x);
        let rows = exec.map_range(n, |s| self.forward_pixels(xv.row(s), height, width, c));
        let out = Tensor::from_parts(vec![n, height * width], rows.concat());
        let op = BackboneOp {
            bb: *self,
            h: height,
            w: width,
            c,
            exec,
        };
        Ok(g.custom(vec![x], out, Arc::new(op)))
    }
}

pub fn backbone_forward(bb: &FrozenBackbone, img: &Image) -> Vec<f64> {
    bb.forward_pixels(img.data(), img.height(), img.width(), img.channels())
}

struct BackboneOp {
    bb: FrozenBackbone,
    h: usize,
    w: usize,
    c: usize,
    exec: Exec,
}

impl CustomOp for BackboneOp {
    fn name(&self) -> &'static str {
        "backbone"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let (n, len) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let (h, w, c) = (self.h, self.w, self.c);
        let rows = self.exec.map_range(n, |s| {
            let dblur: Vec<f64> = output
                .row(s)
                .iter()
                .zip(grad_out.row(s))
                .map(|(&p, &g)| g * p * (1.0 - p) / self.bb.slope)
                .collect();
            let dgray = box_blur(&dblur, h, w, self.bb.blur_radius, true);
            let mut dx = Vec::with_capacity(len);
            for _ in 0..c {
                dx.extend(dgray.iter().map(|v| v / c as f64));
            }
            dx
        });
        vec![Tensor::from_parts(vec![n, len], rows.concat())]
    }
}

/// Separable normalized box average; `adjoint` applies the transpose map.
fn box_blur(x: &[f64], h: usize, w: usize, r: usize, adjoint: bool) -> Vec<f64> {
    if r == 0 {
        return x.to_vec();
    }
    let pass = |input: &[f64], len: usize, stride: usize, lines: usize, line_stride: usize| {
        let mut out = vec![0.0; input.len()];
        for l in 0..lines {
            let base = l * line_stride;
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(len - 1);
                let count = (hi - lo + 1) as f64;
                if adjoint {
                    let v = input[base + i * stride] / count;
                    for j in lo..=hi {
                        out[base + j * stride] += v;
                    }
                } else {
                    let s: f64 = (lo..=hi).map(|j| input[base + j * stride]).sum();
                    out[base + i * stride] = s / count;
                }
            }
        }
        out
    };
    let rows = pass(x, w, 1, h, w);
    pass(&rows, h, w, w, 1)
}

/// Dice and IoU (fractions) of `prob >= 0.5` against a binary mask.
/// Two empty masks score 1.
pub fn binary_dice_iou(prob: &[f64], mask: &[f64]) -> (f64, f64) {
    let (mut inter, mut p, mut g) = (0.0, 0.0, 0.0);
    for (&pr, &m) in prob.iter().zip(mask) {
        let pb = if pr >= 0.5 { 1.0 } else { 0.0 };
        let gb = if m > 0.5 { 1.0 } else { 0.0 };
        inter += pb * gb;
        p += pb;
        g += gb;
    }
    if p + g == 0.0 {
        return (1.0, 1.0);
    }
    (2.0 * inter / (p + g), inter / (p + g - inter))
}

/// Mean Dice (fraction) of the backbone over `samples` without prompting.
pub fn mean_dice(bb: &FrozenBackbone, samples: &[&DomainSample], exec: Exec) -> f64 {
    let scores = exec.map(samples, |s| binary_dice_iou(&backbone_forward(bb, &s.image), &s.mask).0);
    scores.iter().sum::<f64>() / scores.len().max(1) as f64
}

/// Grid-searches the threshold for source Dice (center of the best plateau),
/// then the slope for soft Dice. `blur_radius` is fixed.
pub fn backbone_calibrate(source: &[&DomainSample], exec: Exec) -> Result<FrozenBackbone> {
    if source.is_empty() {
        return Err(ApexError::InsufficientSamples("calibration needs source samples".into()));
    }
    if source.iter().all(|s| s.mask.iter().all(|&m| m == 0.0)) {
        return Err(ApexError::InsufficientSamples("source masks are all empty".into()));
    }
    let probe = FrozenBackbone {
        threshold: 0.5,
        slope: 1.0,
        blur_radius: DEFAULT_BLUR_RADIUS,
    };
    let blurred: Vec<Vec<f64>> = exec.map(source, |s| {
        probe.blurred_gray(s.image.data(), s.image.height(), s.image.width(), s.image.channels())
    });
    let steps = (1.0 / THRESHOLD_GRID_STEP).round() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| i as f64 * THRESHOLD_GRID_STEP).collect();
    let scores: Vec<f64> = exec.map(&grid, |&t| {
        let total: f64 = blurred
            .iter()
            .zip(source)
            .map(|(b, s)| {
                let hard: Vec<f64> = b.iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect();
                binary_dice_iou(&hard, &s.mask).0
            })
            .sum();
        total / source.len() as f64
    });
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return Err(ApexError::InsufficientSamples("no threshold separates the source masks".into()));
    }
    let winners: Vec<usize> = (0..grid.len()).filter(|&i| scores[i] == best).collect();
    let threshold = grid[winners[winners.len() / 2]];

    let soft = |slope: f64| -> f64 {
        blurred
            .iter()
            .zip(source)
            .map(|(b, s)| {
                let p: Vec<f64> = b.iter().map(|&v| sigmoid((v - threshold) / slope)).collect();
                let (i, sp, sg) = p.iter().zip(&s.mask).fold((0.0, 0.0, 0.0), |(i, a, c), (&x, &y)| (i + x * y, a + x, c + y));
                2.0 * i / (sp + sg)
            })
            .sum::<f64>()
    };
    let mut slope = SLOPE_GRID[0];
    let mut best_soft = f64::NEG_INFINITY;
    for &s in &SLOPE_GRID {
        let v = soft(s);
        if v > best_soft {
            best_soft = v;
            slope = s;
        }
    }
    Ok(FrozenBackbone {
        threshold,
        slope,
        blur_radius: DEFAULT_BLUR_RADIUS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_brighter_inside() {
        let (a, ma) = gen_base_scene(7, 32, 32).unwrap();
        let (b, mb) = gen_base_scene(7, 32, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for (v, m) in a.data().iter().zip(&ma) {
            if *m > 0.5 {
                fg += v;
                nf += 1.0;
            } else {
                bg += v;
                nb += 1.0;
            }
        }
        assert!(fg / nf > bg / nb);
        assert!(gen_base_scene(1, 30, 32).is_err());
        assert!(gen_base_scene(1, 33, 32).is_err());
    }

    #[test]
    fn domain_identity_and_bias() {
        let (img, _) = gen_base_scene(3, 32, 32).unwrap();
        let same = apply_domain(&img, &DomainSpec::identity("I"), 11).unwrap();
        assert_eq!(same, img);
        let mut bias = DomainSpec::identity("b");
        bias.bias = 0.2;
        let shifted = apply_domain(&img, &bias, 11).unwrap();
        for (a, b) in shifted.data().iter().zip(img.data()) {
            assert!((a - b - 0.2).abs() < 1e-12);
        }
        let mut bad = DomainSpec::identity("x");
        bad.gain = 0.0;
        assert!(apply_domain(&img, &bad, 0).is_err());
    }

    #[test]
    fn hull_membership() {
        let seg = [(0.0, 0.0), (1.0, 1.0)];
        assert!(in_convex_hull(&seg, (0.5, 0.5)));
        assert!(!in_convex_hull(&seg, (0.5, 0.6)));
        assert!(!in_convex_hull(&seg, (1.5, 1.5)));
        let tri = [(0.0, 0.0), (2.0, 0.0), (0.0, 2.0)];
        assert!(in_convex_hull(&tri, (0.5, 0.5)));
        assert!(in_convex_hull(&tri, (1.0, 1.0)));
        assert!(!in_convex_hull(&tri, (1.5, 1.5)));
    }

    #[test]
    fn config_rejects_overlap() {
        let mut c = BenchmarkConfig::default();
        assert!(c.validate().is_ok());
        let (a, b) = (c.seen[0].clone(), c.seen[1].clone());
        c.unseen[0].gain = 0.5 * (a.gain + b.gain);
        c.unseen[0].bias = 0.5 * (a.bias + b.bias);
        assert!(matches!(c.validate(), Err(ApexError::OverlappingDomains(_))));
        let mut d = BenchmarkConfig::default();
        d.unseen.pop();
        assert!(d.validate().is_err());
    }

    #[test]
    fn backbone_basics() {
        let bb = FrozenBackbone {
            threshold: 0.4,
            slope: 0.1,
            blur_radius: 1,
        };
        let flat = Image::constant(8, 8, 1, 0.4).unwrap();
        assert!(backbone_forward(&bb, &flat).iter().all(|&p| (p - 0.5).abs() < 1e-12));
        let bright = Image::constant(8, 8, 1, 10.0).unwrap();
        assert!(backbone_forward(&bb, &bright).iter().all(|&p| p > 1.0 - 1e-12));
    }

    #[test]
    fn blur_adjoint_is_transpose() {
        let (h, w) = (6, 8);
        let mut r = rng(1);
        let x: Vec<f64> = (0..h * w).map(|_| r.random::<f64>()).collect();
        let y: Vec<f64> = (0..h * w).map(|_| r.random::<f64>()).collect();
        let bx = box_blur(&x, h, w, 2, false);
        let aty = box_blur(&y, h, w, 2, true);
        let lhs: f64 = bx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dice_iou_identities() {
        let m = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(binary_dice_iou(&m, &m), (1.0, 1.0));
        let (d, i) = binary_dice_iou(&[1.0, 1.0, 0.0, 0.0], &m);
        assert!((d - 0.4).abs() < 1e-12 && (i - 0.25).abs() < 1e-12);
        assert_eq!(binary_dice_iou(&[0.0; 4], &[0.0; 4]), (1.0, 1.0));
    }

    #[test]
    fn calibrate_errors() {
        assert!(backbone_calibrate(&[], Exec::Sequential).is_err());
        let s = DomainSample {
            sample_id: 0,
            image: Image::constant(8, 8, 1, 0.3).unwrap(),
            mask: vec![0.0; 64],
            domain_id: "S".into(),
            split: Split::SourceTrain,
            scene_seed: 0,
        };
        assert!(backbone_calibrate(&[&s], Exec::Sequential).is_err());
    }

    #[test]
    fn split_names_roundtrip() {
        for s in Split::ALL {
            assert_eq!(Split::parse(s.as_str()), Some(s));
        }
    }
}
