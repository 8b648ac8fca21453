//! 2-D Fourier analysis of images and multiplicative prompting of the
//! low-frequency amplitude.
//!
//! All spectra are stored in the *centered* layout: the DC coefficient of an
//! `h × w` plane sits at `(h/2, w/2)` and centered index `i` holds signed
//! frequency `i − h/2`. The frequency-negation partner of centered `(i, j)`
//! is `((h − i) mod h, (w − j) mod w)`.
//!
//! The low-frequency region is the square of signed frequencies
//! `|u|, |v| ≤ r` with `r = ⌊l/2⌋`, `l = max(1, round(β·min(h, w)))`. It is
//! closed under negation, so a multiplier that is symmetric on the region
//! keeps the reconstructed image real.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{ApexError, Result};
use crate::exec::Exec;
use crate::graph::{CustomOp, Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_BETA: f64 = 0.25;
/// Relative tolerance of the Hermitian-symmetry check in [`ifft2`].
pub const HERMITIAN_TOL: f64 = 1e-6;

/// Real multi-channel image, stored channel-planar (`[c][h][w]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if channels == 0 {
            return Err(ApexError::invalid("image needs at least one channel"));
        }
        if data.len() != height * width * channels {
            return Err(ApexError::shape(
                "Image::new",
                format!("{height}x{width}x{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ApexError::Domain {
                op: "Image::new",
                detail: "non-finite pixel".into(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `[c, h, w]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.channels, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(h, w, c, t.data().to_vec()),
            _ => Err(ApexError::shape("Image::from_tensor", format!("expected [c,h,w], got {:?}", t.shape()))),
        }
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h < 4 || w < 4 || !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(ApexError::invalid(format!(
            "image sides must be even and >= 4, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Amplitude/phase decomposition of an image's 2-D DFT in centered layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    channels: usize,
    amplitude: Vec<f64>,
    phase: Vec<f64>,
}

impl Spectrum {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        amplitude: Vec<f64>,
        phase: Vec<f64>,
    ) -> Result<Self> {
        check_dims(height, width)?;
        let n = height * width * channels;
        if amplitude.len() != n || phase.len() != n {
            return Err(ApexError::shape("Spectrum::new", "amplitude/phase length"));
        }
        if amplitude.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) || phase.iter().any(|p| !p.is_finite()) {
            return Err(ApexError::Domain {
                op: "Spectrum::new",
                detail: "amplitude must be finite and non-negative, phase finite".into(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            amplitude,
            phase,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn amplitude(&self) -> &[f64] {
        &self.amplitude
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    pub fn amplitude_mut(&mut self) -> &mut [f64] {
        &mut self.amplitude
    }

    pub fn index(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.height + row) * self.width + col
    }

    /// Complex coefficients in the unshifted (DC at 0,0) layout.
    pub fn to_complex_unshifted(&self) -> Vec<Complex64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![Complex64::new(0.0, 0.0); self.amplitude.len()];
        for c in 0..self.channels {
            for row in 0..h {
                let ur = (row + h / 2) % h;
                for col in 0..w {
                    let uc = (col + w / 2) % w;
                    let i = self.index(c, row, col);
                    out[(c * h + ur) * w + uc] = Complex64::from_polar(self.amplitude[i], self.phase[i]);
                }
            }
        }
        out
    }

    fn from_complex_unshifted(h: usize, w: usize, channels: usize, buf: &[Complex64]) -> Self {
        let n = h * w * channels;
        let mut amplitude = vec![0.0; n];
        let mut phase = vec![0.0; n];
        for c in 0..channels {
            for row in 0..h {
                let ur = (row + h / 2) % h;
                for col in 0..w {
                    let uc = (col + w / 2) % w;
                    let z = buf[(c * h + ur) * w + uc];
                    let i = (c * h + row) * w + col;
                    amplitude[i] = z.norm();
                    let mut p = z.arg();
                    if p <= -PI {
                        p = PI;
                    }
                    phase[i] = p;
                }
            }
        }
        Self {
            height: h,
            width: w,
            channels,
            amplitude,
            phase,
        }
    }

    /// Largest `|X(k) − conj X(−k)|` over all coefficients.
    pub fn hermitian_deviation(&self) -> f64 {
        let (h, w) = (self.height, self.width);
        let z = self.to_complex_unshifted();
        let mut worst = 0.0f64;
        for c in 0..self.channels {
            for r in 0..h {
                for q in 0..w {
                    let a = z[(c * h + r) * w + q];
                    let b = z[(c * h + (h - r) % h) * w + (w - q) % w];
                    worst = worst.max((a - b.conj()).norm());
                }
            }
        }
        worst
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry((len, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// In-place unnormalized 2-D DFT of each `h × w` plane in `buf`.
pub(crate) fn fft2_planes(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let row_fft = plan(w, inverse);
    let col_fft = plan(h, inverse);
    let mut scratch = vec![Complex64::new(0.0, 0.0); h * w];
    for plane in buf.chunks_exact_mut(h * w) {
        row_fft.process(plane);
        for r in 0..h {
            for c in 0..w {
                scratch[c * h + r] = plane[r * w + c];
            }
        }
        col_fft.process(&mut scratch);
        for c in 0..w {
            for r in 0..h {
                plane[r * w + c] = scratch[c * h + r];
            }
        }
    }
}

/// Per-channel 2-D DFT in unshifted layout.
pub(crate) fn dft_unshifted(img: &Image) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = img.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_planes(&mut buf, img.height, img.width, false);
    buf
}

pub fn fft2(img: &Image) -> Result<Spectrum> {
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(ApexError::Domain {
            op: "fft2",
            detail: "non-finite pixel".into(),
        });
    }
    let buf = dft_unshifted(img);
    Ok(Spectrum::from_complex_unshifted(img.height, img.width, img.channels, &buf))
}

/// Inverse transform; the imaginary residual is returned alongside the image.
pub fn ifft2_with_residual(spec: &Spectrum) -> Result<(Image, f64)> {
    let scale = spec.amplitude.iter().copied().fold(1.0, f64::max);
    let dev = spec.hermitian_deviation();
    if dev > HERMITIAN_TOL * scale {
        return Err(ApexError::AsymmetricSpectrum(dev));
    }
    let (h, w) = (spec.height, spec.width);
    let mut buf = spec.to_complex_unshifted();
    fft2_planes(&mut buf, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    let residual = buf.iter().map(|z| (z.im * norm).abs()).fold(0.0, f64::max);
    let data = buf.iter().map(|z| z.re * norm).collect();
    Ok((Image::new(h, w, spec.channels, data)?, residual))
}

pub fn ifft2(spec: &Spectrum) -> Result<Image> {
    ifft2_with_residual(spec).map(|(img, _)| img)
}

/// Position of the low-frequency square inside the centered spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub row0: usize,
    pub rows: usize,
    pub col0: usize,
    pub cols: usize,
}

impl RegionGeometry {
    pub fn new(height: usize, width: usize, channels: usize, beta: f64) -> Result<Self> {
        check_dims(height, width)?;
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(ApexError::invalid(format!("beta must lie in (0, 1], got {beta}")));
        }
        let side = ((beta * height.min(width) as f64).round() as usize).max(1);
        let half = side / 2;
        let span = |n: usize| {
            let len = (2 * half + 1).min(n);
            let start = if len == n { 0 } else { n / 2 - half };
            (start, len)
        };
        let (row0, rows) = span(height);
        let (col0, cols) = span(width);
        Ok(Self {
            height,
            width,
            channels,
            row0,
            rows,
            col0,
            cols,
        })
    }

    /// Number of region entries over all channels.
    pub fn len(&self) -> usize {
        self.channels * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row0 + self.rows).contains(&row) && (self.col0..self.col0 + self.cols).contains(&col)
    }

    /// Binary `[h × w]` mask, row-major.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.height * self.width)
            .map(|i| self.contains(i / self.width, i % self.width))
            .collect()
    }

    /// Centered `(channel, row, col)` of each region entry, in region order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.channels).flat_map(move |c| {
            (0..self.rows).flat_map(move |r| (0..self.cols).map(move |q| (c, self.row0 + r, self.col0 + q)))
        })
    }

    /// Flat index into a centered `[c][h][w]` plane for each region entry.
    pub fn centered_indices(&self) -> Vec<usize> {
        self.positions()
            .map(|(c, r, q)| (c * self.height + r) * self.width + q)
            .collect()
    }

    /// Flat index into an unshifted `[c][h][w]` plane for each region entry.
    pub fn unshifted_indices(&self) -> Vec<usize> {
        let (h, w) = (self.height, self.width);
        self.positions()
            .map(|(c, r, q)| (c * h + (r + h / 2) % h) * w + (q + w / 2) % w)
            .collect()
    }

    /// Region index of the frequency-negated entry, for each region entry.
    pub fn partner_indices(&self) -> Vec<usize> {
        let (h, w) = (self.height, self.width);
        self.positions()
            .map(|(c, r, q)| {
                let pr = (h - r) % h - self.row0;
                let pq = (w - q) % w - self.col0;
                (c * self.rows + pr) * self.cols + pq
            })
            .collect()
    }

    /// Region index of the DC coefficient for channel `c`.
    pub fn dc_index(&self, c: usize) -> usize {
        (c * self.rows + self.height / 2 - self.row0) * self.cols + self.width / 2 - self.col0
    }
}

/// Amplitude values under the centered low-frequency mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LowFreqRegion {
    pub beta: f64,
    pub geometry: RegionGeometry,
    /// `[c][rows][cols]`
    pub values: Vec<f64>,
}

impl LowFreqRegion {
    /// `ln(1 + amplitude)` of each entry, the encoder's input features.
    pub fn log_features(&self) -> Vec<f64> {
        self.values.iter().map(|a| a.ln_1p()).collect()
    }
}

pub fn extract_low_freq(spec: &Spectrum, beta: f64) -> Result<LowFreqRegion> {
    let geometry = RegionGeometry::new(spec.height, spec.width, spec.channels, beta)?;
    let values = geometry
        .centered_indices()
        .into_iter()
        .map(|i| spec.amplitude[i])
        .collect();
    Ok(LowFreqRegion {
        beta,
        geometry,
        values,
    })
}

/// Positive, negation-symmetric multiplier over the low-frequency region
/// (implicitly 1 elsewhere).
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMultiplier {
    geometry: RegionGeometry,
    values: Vec<f64>,
}

impl PromptMultiplier {
    pub fn new(geometry: RegionGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(ApexError::shape(
                "PromptMultiplier::new",
                format!("{} values for a region of {}", values.len(), geometry.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(ApexError::InvalidPrompt(format!("non-positive or non-finite entry {v}")));
        }
        for (i, p) in geometry.partner_indices().into_iter().enumerate() {
            let (a, b) = (values[i], values[p]);
            if (a - b).abs() > 1e-12 * a.max(b) {
                return Err(ApexError::InvalidPrompt(format!(
                    "asymmetric entries {a} vs {b} at region index {i}"
                )));
            }
        }
        Ok(Self { geometry, values })
    }

    pub fn identity(geometry: RegionGeometry) -> Self {
        Self {
            geometry,
            values: vec![1.0; geometry.len()],
        }
    }

    /// Averages `raw` with its frequency-negated counterpart, then validates.
    pub fn symmetrized(geometry: RegionGeometry, raw: &[f64]) -> Result<Self> {
        if raw.len() != geometry.len() {
            return Err(ApexError::shape("PromptMultiplier::symmetrized", "length"));
        }
        let values = geometry
            .partner_indices()
            .into_iter()
            .enumerate()
            .map(|(i, p)| 0.5 * (raw[i] + raw[p]))
            .collect();
        Self::new(geometry, values)
    }

    pub fn geometry(&self) -> &RegionGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn apply_prompt(spec: &Spectrum, p: &PromptMultiplier) -> Result<Spectrum> {
    let g = p.geometry;
    if (g.height, g.width, g.channels) != (spec.height, spec.width, spec.channels) {
        return Err(ApexError::shape(
            "apply_prompt",
            "prompt region does not match spectrum dimensions",
        ));
    }
    let mut out = spec.clone();
    for (idx, m) in g.centered_indices().into_iter().zip(&p.values) {
        out.amplitude[idx] *= m;
    }
    Ok(out)
}

/// `ifft2(apply_prompt(fft2(img), p))`.
pub fn prompted_image(img: &Image, p: &PromptMultiplier, beta: f64) -> Result<Image> {
    let expected = RegionGeometry::new(img.height, img.width, img.channels, beta)?;
    if expected != p.geometry {
        return Err(ApexError::shape(
            "prompted_image",
            "prompt region does not match the beta cutoff",
        ));
    }
    let spec = fft2(img)?;
    ifft2(&apply_prompt(&spec, p)?)
}

/// Differentiable batch prompting: maps multipliers `[n × region]` to
/// prompted images `[n × (c·h·w)]` for fixed per-sample spectra.
///
/// For a multiplier `m_k` on unshifted coefficient `X_k`, the output is
/// `x' = Re IDFT(X ⊙ m)` and `∂L/∂m_k = Re(X_k · conj(G_k)) / (h·w)` with
/// `G = DFT(∂L/∂x')`.
pub struct SpectralPromptOp {
    geometry: RegionGeometry,
    spectra: Vec<Arc<Vec<Complex64>>>,
    unshifted: Vec<usize>,
    exec: Exec,
}

impl SpectralPromptOp {
    pub fn new(geometry: RegionGeometry, spectra: Vec<Arc<Vec<Complex64>>>, exec: Exec) -> Result<Self> {
        let n = geometry.height * geometry.width * geometry.channels;
        if spectra.iter().any(|s| s.len() != n) {
            return Err(ApexError::shape("SpectralPromptOp", "spectrum size"));
        }
        Ok(Self {
            unshifted: geometry.unshifted_indices(),
            geometry,
            spectra,
            exec,
        })
    }

    fn forward(&self, p: &Tensor) -> Result<Tensor> {
        let (n, r) = p.dims2()?;
        if n != self.spectra.len() || r != self.geometry.len() {
            return Err(ApexError::shape(
                "spectral_prompt",
                format!("multipliers [{n}x{r}] for {} spectra of region {}", self.spectra.len(), self.geometry.len()),
            ));
        }
        let (h, w) = (self.geometry.height, self.geometry.width);
        let norm = 1.0 / (h * w) as f64;
        let rows = self.exec.map_range(n, |s| {
            let mut buf = self.spectra[s].as_ref().clone();
            for (&k, &m) in self.unshifted.iter().zip(p.row(s)) {
                buf[k] *= m;
            }
            fft2_planes(&mut buf, h, w, true);
            buf.into_iter().map(|z| z.re * norm).collect::<Vec<_>>()
        });
        let width = h * w * self.geometry.channels;
        Ok(Tensor::from_parts(vec![n, width], rows.concat()))
    }

    /// Records the op on `g` with multipliers `p` (`[n × region]`).
    pub fn apply(self, g: &mut Graph, p: Var) -> Result<Var> {
        let out = self.forward(g.value(p))?;
        Ok(g.custom(vec![p], out, Arc::new(self)))
    }
}

impl CustomOp for SpectralPromptOp {
    fn name(&self) -> &'static str {
        "spectral_prompt"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
        let (n, r) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let (h, w) = (self.geometry.height, self.geometry.width);
        let norm = 1.0 / (h * w) as f64;
        let rows = self.exec.map_range(n, |s| {
            let mut buf: Vec<Complex64> = grad_out.row(s).iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft2_planes(&mut buf, h, w, false);
            let x = &self.spectra[s];
            self.unshifted
                .iter()
                .map(|&k| (x[k] * buf[k].conj()).re * norm)
                .collect::<Vec<_>>()
        });
        vec![Tensor::from_parts(vec![n, r], rows.concat())]
    }
}

/// Writes an image as plain PGM (1 channel) or PPM (3 channels), clamping
/// values from `[0, 1]` to `[0, 255]`.
pub fn write_pnm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let (h, w, c) = (img.height, img.width, img.channels);
    let magic = match c {
        1 => "P2",
        3 => "P3",
        _ => return Err(ApexError::invalid(format!("PNM dump supports 1 or 3 channels, got {c}"))),
    };
    let mut s = format!("{magic}\n{w} {h}\n255\n");
    for y in 0..h {
        let line: Vec<String> = (0..w)
            .flat_map(|x| (0..c).map(move |ch| (ch, x)))
            .map(|(ch, x)| to_byte(img.get(ch, y, x)).to_string())
            .collect();
        writeln!(s, "{}", line.join(" ")).expect("write to string");
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Plain PGM of an arbitrary `rows × cols` grid, min-max normalized.
pub fn write_heatmap_pgm(path: impl AsRef<Path>, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(ApexError::shape("write_heatmap_pgm", "grid size"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = values[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| to_byte((v - lo) / span).to_string())
            .collect();
        writeln!(s, "{}", line.join(" ")).expect("write to string");
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
