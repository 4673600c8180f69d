//! Off-axis interferogram synthesis and Fourier-filtering phase retrieval.
//!
//! Images are row-major `width × height` arrays. Fourier-plane quantities (magnitude
//! images, detection masks) are stored with the zero frequency moved to the centre
//! pixel (`width / 2`, `height / 2`). Fringe wavevectors are in rad/pixel.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{self, KerrFit};

/// A camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interferogram {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    /// Pixel pitch (m).
    pub pixel_pitch: f64,
    pub exposure: Option<f64>,
    pub frame_id: u64,
}

impl Interferogram {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, pixel_pitch: f64) -> Result<Self> {
        check_shape(width, height, pixels.len())?;
        if let Some(p) = pixels.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::arg(format!("pixel value {p} is not finite and non-negative")));
        }
        Ok(Interferogram {
            width,
            height,
            pixels,
            pixel_pitch,
            exposure: None,
            frame_id: 0,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

fn check_shape(width: usize, height: usize, len: usize) -> Result<()> {
    if width < 4 || height < 4 || width * height != len {
        return Err(Error::arg(format!(
            "array of {len} values does not match a {width}×{height} image (min 4×4)"
        )));
    }
    Ok(())
}

/// Unwrapped phase on a valid region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMap {
    pub width: usize,
    pub height: usize,
    /// Phase (rad); 0 outside the mask.
    pub phase: Vec<f64>,
    pub mask: Vec<bool>,
    /// Detected fringe wavevector (rad/pixel).
    pub k_perp: [f64; 2],
}

impl PhaseMap {
    /// Largest |Δφ| between 4-neighbours inside the mask.
    pub fn max_step(&self) -> f64 {
        let (w, h) = (self.width, self.height);
        let mut m: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !self.mask[i] {
                    continue;
                }
                if x + 1 < w && self.mask[i + 1] {
                    m = m.max((self.phase[i + 1] - self.phase[i]).abs());
                }
                if y + 1 < h && self.mask[i + w] {
                    m = m.max((self.phase[i + w] - self.phase[i]).abs());
                }
            }
        }
        m
    }

    /// The continuity invariant: every neighbour step is below π.
    pub fn is_continuous(&self) -> bool {
        self.max_step() < PI
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// The selected satellite peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakDetection {
    pub width: usize,
    pub height: usize,
    /// Intensity-weighted centroid as a frequency offset from DC (bins, x then y).
    pub centroid: [f64; 2],
    /// Component mask in centred Fourier coordinates.
    pub mask: Vec<bool>,
    pub area: usize,
}

impl PeakDetection {
    /// Fringe wavevector 2π·centroid/N (rad/pixel).
    pub fn k_perp(&self) -> [f64; 2] {
        [
            2.0 * PI * self.centroid[0] / self.width as f64,
            2.0 * PI * self.centroid[1] / self.height as f64,
        ]
    }

    /// The mirror-image satellite, which carries the conjugate field.
    pub fn conjugate(&self) -> PeakDetection {
        let (w, h) = (self.width, self.height);
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if self.mask[y * w + x] {
                    let (mx, my) = (2 * (w / 2) as isize - x as isize, 2 * (h / 2) as isize - y as isize);
                    if mx >= 0 && my >= 0 && (mx as usize) < w && (my as usize) < h {
                        mask[my as usize * w + mx as usize] = true;
                    }
                }
            }
        }
        let area = mask.iter().filter(|m| **m).count();
        PeakDetection {
            width: w,
            height: h,
            centroid: [-self.centroid[0], -self.centroid[1]],
            mask,
            area,
        }
    }
}

/// In-place 2D FFT of a row-major array. The inverse is normalised by 1/(w·h).
pub fn fft2(data: &mut [Complex64], width: usize, height: usize, inverse: bool) {
    assert_eq!(data.len(), width * height);
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    row.process(data);
    let mut t = vec![Complex64::new(0.0, 0.0); width * height];
    transpose(data, &mut t, width, height);
    col.process(&mut t);
    transpose(&t, data, height, width);
    if inverse {
        let s = 1.0 / (width * height) as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], width: usize, height: usize) {
    const B: usize = 32;
    for by in (0..height).step_by(B) {
        for bx in (0..width).step_by(B) {
            for y in by..(by + B).min(height) {
                for x in bx..(bx + B).min(width) {
                    dst[x * height + y] = src[y * width + x];
                }
            }
        }
    }
}

/// Signed frequency of FFT index `u` on an axis of length `n`.
fn freq(u: usize, n: usize) -> isize {
    if u < n.div_ceil(2) {
        u as isize
    } else {
        u as isize - n as isize
    }
}

/// Index in the centred layout of FFT index `u`.
fn centred(u: usize, n: usize) -> usize {
    (u + n / 2) % n
}

/// Spectrum of a frame.
pub fn spectrum(frame: &Interferogram) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = frame.pixels.iter().map(|&p| Complex64::new(p, 0.0)).collect();
    fft2(&mut data, frame.width, frame.height, false);
    data
}

/// |FFT| in centred layout.
pub fn fourier_magnitude(spec: &[Complex64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    for v in 0..height {
        for u in 0..width {
            out[centred(v, height) * width + centred(u, width)] = spec[v * width + u].norm();
        }
    }
    out
}

/// Noise added to synthetic frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Noise {
    None,
    /// Additive Gaussian noise with σ = max(I)/10^(snr_db/20).
    Gaussian { snr_db: f64, seed: u64 },
}

/// Gaussian beam amplitude e^{−r²/w²} (w in pixels) centred at (cx, cy).
pub fn gaussian_field(width: usize, height: usize, center: [f64; 2], waist: f64, amplitude: f64) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 - center[0];
            let dy = y as f64 - center[1];
            out.push(Complex64::new(amplitude * (-(dx * dx + dy * dy) / (waist * waist)).exp(), 0.0));
        }
    }
    out
}

/// Fraction of the peak signal intensity above which a signal reaching the frame
/// border triggers a warning.
pub const BORDER_WARNING_LEVEL: f64 = 1e-3;

/// Camera intensity |𝓔_s e^{iφ} + 𝓔_r e^{−ik⊥·r}|², whose fringe term is
/// 2𝓔_s𝓔_r cos(φ + k⊥·r). Returns the frame and an optional
/// warning when the signal is not negligible at the frame border.
pub fn synthesize(
    width: usize,
    height: usize,
    signal: &[Complex64],
    reference: &[Complex64],
    k_perp: [f64; 2],
    phi_nl: &[f64],
    noise: Noise,
) -> Result<(Interferogram, Option<String>)> {
    let n = width * height;
    check_shape(width, height, n)?;
    if signal.len() != n || reference.len() != n || phi_nl.len() != n {
        return Err(Error::arg("signal, reference and phase must match the frame size"));
    }
    let mut pixels = Vec::with_capacity(n);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let s = signal[i] * Complex64::from_polar(1.0, phi_nl[i]);
            let r = reference[i] * Complex64::from_polar(1.0, -(k_perp[0] * x as f64 + k_perp[1] * y as f64));
            pixels.push((s + r).norm_sqr());
        }
    }
    if let Noise::Gaussian { snr_db, seed } = noise {
        let peak = pixels.iter().cloned().fold(0.0, f64::max);
        let sigma = peak / 10f64.powf(snr_db / 20.0);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::arg(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in pixels.iter_mut() {
                *p = (*p + normal.sample(&mut rng)).max(0.0);
            }
        }
    }
    let peak_s = signal.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
    let mut edge: f64 = 0.0;
    for x in 0..width {
        edge = edge.max(signal[x].norm_sqr()).max(signal[(height - 1) * width + x].norm_sqr());
    }
    for y in 0..height {
        edge = edge.max(signal[y * width].norm_sqr()).max(signal[y * width + width - 1].norm_sqr());
    }
    let warning = (peak_s > 0.0 && edge > BORDER_WARNING_LEVEL * peak_s).then(|| {
        format!(
            "signal reaches the frame border at {:.1e} of its peak intensity; the zero-phase border reference is compromised",
            edge / peak_s
        )
    });
    Ok((Interferogram::new(width, height, pixels, 1.0)?, warning))
}

/// Tunables of the retrieval pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOptions {
    /// Radius of the DC disk filled before detection (pixels).
    pub dc_radius: f64,
    /// Fraction of max(I_log) below which values are discarded.
    pub log_floor: f64,
    /// Half-width of the box filter applied to |FFT| before the gradient (pixels).
    pub smoothing: usize,
    /// Minimum object and hole area at 1024² (scaled with frame area).
    pub min_area_1024: usize,
    /// Dilation of the selected component (pixels). A tight mask clips the spectral
    /// tails of strongly modulated fields and biases the steep flanks of the phase.
    pub dilation: usize,
    /// Shift by the rounded centroid only.
    pub integer_shift: bool,
    /// Demodulated amplitude, relative to its maximum, below which pixels are invalid.
    pub mask_fraction: f64,
    /// Width of the reference border inside the valid region (pixels).
    pub border_width: usize,
    pub reference: BorderReference,
    /// Residues per valid pixel above which unwrapping is refused.
    pub residue_limit: f64,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        RetrievalOptions {
            dc_radius: 5.0,
            log_floor: 0.6,
            smoothing: 2,
            min_area_1024: 50,
            dilation: 6,
            integer_shift: false,
            mask_fraction: 0.05,
            border_width: 8,
            reference: BorderReference::Plane,
            residue_limit: 1e-3,
        }
    }
}

/// How the unwrapped phase is referenced to the low-intensity border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BorderReference {
    /// Subtract the border mean.
    Mean,
    /// Subtract the least-squares plane through the border (also removes any residual
    /// tilt left by the centroid estimate); the border mean becomes 0.
    Plane,
    /// Leave the phase as unwrapped from the seed.
    None,
}

/// Locates the satellite peak in a centred |FFT| image.
pub fn detect_satellite(
    magnitude: &[f64],
    width: usize,
    height: usize,
    opts: &RetrievalOptions,
) -> Result<PeakDetection> {
    check_shape(width, height, magnitude.len())?;
    let (cx, cy) = ((width / 2) as f64, (height / 2) as f64);
    let in_dc = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        dx * dx + dy * dy <= opts.dc_radius * opts.dc_radius
    };

    // DC fill with the image mean.
    let mean = magnitude.iter().sum::<f64>() / magnitude.len() as f64;
    let mut img = magnitude.to_vec();
    for y in 0..height {
        for x in 0..width {
            if in_dc(x, y) {
                img[y * width + x] = mean;
            }
        }
    }

    let img = box_blur(&img, width, height, opts.smoothing);

    // Log of the gradient magnitude |∂x| + |∂y| (central differences, one-sided at edges).
    let grad = |x: usize, y: usize| {
        let at = |x: usize, y: usize| img[y * width + x];
        let gx = if x == 0 {
            at(1, y) - at(0, y)
        } else if x == width - 1 {
            at(x, y) - at(x - 1, y)
        } else {
            0.5 * (at(x + 1, y) - at(x - 1, y))
        };
        let gy = if y == 0 {
            at(x, 1) - at(x, 0)
        } else if y == height - 1 {
            at(x, y) - at(x, y - 1)
        } else {
            0.5 * (at(x, y + 1) - at(x, y - 1))
        };
        gx.abs() + gy.abs()
    };
    let mut g = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            g[y * width + x] = grad(x, y);
        }
    }
    // The log is taken relative to the median gradient (the background level), which
    // makes the floor independent of the camera's intensity units.
    let mut sorted = g.clone();
    let mid = sorted.len() / 2;
    let median = *sorted.select_nth_unstable_by(mid, f64::total_cmp).1;
    let g_ref = if median > 0.0 {
        median
    } else {
        g.iter().cloned().fold(0.0, f64::max) * 1e-12
    };
    let ilog: Vec<f64> = g.iter().map(|&v| (v / g_ref).max(1.0).ln()).collect();
    let max = ilog.iter().cloned().fold(0.0, f64::max);
    let floor = opts.log_floor * max;
    if !(max > 0.0) {
        return Err(Error::Detection("flat log-gradient image".into()));
    }

    // 8-bit image with the floor at 0.
    let img8: Vec<u8> = ilog
        .iter()
        .map(|&v| if v < floor { 0 } else { (255.0 * (v - floor) / (max - floor)).round() as u8 })
        .collect();
    let t = otsu(&img8);
    let mut binary: Vec<bool> = img8.iter().map(|&v| v > t).collect();

    let min_area = ((opts.min_area_1024 as f64) * (width * height) as f64 / (1024.0 * 1024.0)).round().max(1.0) as usize;
    remove_small(&mut binary, width, height, min_area, true);
    remove_small(&mut binary, width, height, min_area, false);

    // 8-connected components; those touching the DC disk (or adjacent to it) are not
    // satellites.
    let (labels, n_labels) = label(&binary, width, height, true);
    let mut area = vec![0usize; n_labels + 1];
    let mut touches_dc = vec![false; n_labels + 1];
    let mut sx = vec![0.0; n_labels + 1];
    for y in 0..height {
        for x in 0..width {
            let l = labels[y * width + x];
            if l == 0 {
                continue;
            }
            area[l] += 1;
            sx[l] += x as f64 - cx;
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let r = opts.dc_radius + 1.5;
            if dx * dx + dy * dy <= r * r {
                touches_dc[l] = true;
            }
        }
    }
    let mut best: Option<usize> = None;
    for l in 1..=n_labels {
        if touches_dc[l] {
            continue;
        }
        best = match best {
            None => Some(l),
            Some(b) => {
                // Larger area wins; on a tie, the component on the positive-kx side.
                let better = area[l] > area[b] || (area[l] == area[b] && sx[l] / area[l] as f64 > sx[b] / area[b] as f64);
                Some(if better { l } else { b })
            }
        };
    }
    let Some(sel) = best else {
        return Err(Error::Detection("no satellite component found; fringe contrast too low".into()));
    };

    let mut mask: Vec<bool> = labels.iter().map(|&l| l == sel).collect();
    fill_enclosed(&mut mask, width, height);
    let (mut wsum, mut mx, mut my) = (0.0, 0.0, 0.0);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if mask[i] {
                let w = magnitude[i] * magnitude[i];
                wsum += w;
                mx += w * (x as f64 - cx);
                my += w * (y as f64 - cy);
            }
        }
    }
    if !(wsum > 0.0) {
        return Err(Error::Detection("selected component carries no spectral weight".into()));
    }
    let area = mask.iter().filter(|m| **m).count();
    Ok(PeakDetection {
        width,
        height,
        centroid: [mx / wsum, my / wsum],
        mask,
        area,
    })
}

/// Mean over a (2r+1)² window, truncated at the edges.
fn box_blur(img: &[f64], width: usize, height: usize, r: usize) -> Vec<f64> {
    if r == 0 {
        return img.to_vec();
    }
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        let (outer, inner) = if horizontal { (height, width) } else { (width, height) };
        for o in 0..outer {
            let at = |i: usize| if horizontal { o * width + i } else { i * width + o };
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for i in 0..r.min(inner) {
                acc += src[at(i)];
                cnt += 1;
            }
            for i in 0..inner {
                if i + r < inner {
                    acc += src[at(i + r)];
                    cnt += 1;
                }
                if i > r {
                    acc -= src[at(i - r - 1)];
                    cnt -= 1;
                }
                out[at(i)] = acc / cnt as f64;
            }
        }
        out
    };
    let h = pass(img, true);
    pass(&h, false)
}

/// Otsu threshold of an 8-bit image: pixels strictly above the result are foreground.
pub fn otsu(img: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in img {
        hist[v as usize] += 1;
    }
    let total = img.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0u8, -1.0);
    for t in 0..255 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = t as u8;
        }
    }
    best
}

/// Connected-component labelling; labels start at 1, 0 is background.
pub fn label(binary: &[bool], width: usize, height: usize, eight: bool) -> (Vec<usize>, usize) {
    let mut labels = vec![0usize; width * height];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..binary.len() {
        if !binary[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for (dx, dy) in neighbours(eight) {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if binary[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, next)
}

fn neighbours(eight: bool) -> &'static [(isize, isize)] {
    const N4: [(isize, isize); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    const N8: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    if eight { &N8 } else { &N4 }
}

/// Removes 4-connected foreground objects (or fills background holes) smaller than
/// `min_area`.
fn remove_small(binary: &mut [bool], width: usize, height: usize, min_area: usize, objects: bool) {
    let target: Vec<bool> = binary.iter().map(|&b| b == objects).collect();
    let (labels, n) = label(&target, width, height, false);
    let mut area = vec![0usize; n + 1];
    for &l in &labels {
        area[l] += 1;
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 && area[l] < min_area {
            binary[i] = !objects;
        }
    }
}

/// Fills background regions not connected to the image border.
fn fill_enclosed(mask: &mut [bool], width: usize, height: usize) {
    let bg: Vec<bool> = mask.iter().map(|m| !m).collect();
    let (labels, n) = label(&bg, width, height, false);
    let mut outer = vec![false; n + 1];
    for x in 0..width {
        outer[labels[x]] = true;
        outer[labels[(height - 1) * width + x]] = true;
    }
    for y in 0..height {
        outer[labels[y * width]] = true;
        outer[labels[y * width + width - 1]] = true;
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 && !outer[l] {
            mask[i] = true;
        }
    }
}

fn dilate(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for _ in 0..radius {
        let prev = cur.clone();
        for y in 0..height {
            for x in 0..width {
                if prev[y * width + x] {
                    continue;
                }
                let hit = neighbours(true).iter().any(|&(dx, dy)| {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    nx >= 0 && ny >= 0 && nx < width as isize && ny < height as isize && prev[ny as usize * width + nx as usize]
                });
                if hit {
                    cur[y * width + x] = true;
                }
            }
        }
    }
    cur
}

fn erode(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let inv: Vec<bool> = mask.iter().map(|m| !m).collect();
    let grown = dilate_with_border(&inv, width, height, radius);
    grown.iter().map(|g| !g).collect()
}

/// Dilation that treats everything outside the frame as set.
fn dilate_with_border(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for _ in 0..radius {
        let prev = cur.clone();
        for y in 0..height {
            for x in 0..width {
                if prev[y * width + x] {
                    continue;
                }
                let hit = neighbours(true).iter().any(|&(dx, dy)| {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize || prev[ny as usize * width + nx as usize]
                });
                if hit {
                    cur[y * width + x] = true;
                }
            }
        }
    }
    cur
}

/// Keeps the satellite (dilated), moves it to DC and transforms back. The result is
/// ∝ 𝓔_s𝓔_r*·e^{iφ}; the shift is applied as a spatial phase ramp, which is exact for
/// sub-pixel centroids. Returns the field and the carrier actually removed (bins).
pub fn demodulate(
    spec: &[Complex64],
    detection: &PeakDetection,
    opts: &RetrievalOptions,
) -> Result<(Vec<Complex64>, [f64; 2])> {
    let (w, h) = (detection.width, detection.height);
    check_shape(w, h, spec.len())?;
    let mask = dilate(&detection.mask, w, h, opts.dilation);
    let (cx, cy) = ((w / 2) as f64, (h / 2) as f64);
    let r2 = opts.dc_radius * opts.dc_radius;
    let mut field = vec![Complex64::new(0.0, 0.0); w * h];
    for v in 0..h {
        for u in 0..w {
            let (su, sv) = (centred(u, w), centred(v, h));
            if mask[sv * w + su] {
                let (dx, dy) = (su as f64 - cx, sv as f64 - cy);
                if dx * dx + dy * dy <= r2 {
                    // the dilation margin may graze the DC disk; the component may not
                    if detection.mask[sv * w + su] {
                        return Err(Error::Detection("satellite mask overlaps the DC region".into()));
                    }
                    continue;
                }
                field[v * w + u] = spec[v * w + u];
            }
        }
    }
    debug_assert_eq!(freq(0, w), 0);
    fft2(&mut field, w, h, true);
    let [fx, fy] = if opts.integer_shift {
        [detection.centroid[0].round(), detection.centroid[1].round()]
    } else {
        detection.centroid
    };
    apply_ramp(&mut field, w, h, [fx, fy]);
    if opts.integer_shift {
        return Ok((field, [fx, fy]));
    }
    // A linear phase is indistinguishable from a carrier offset: fold the weighted mean
    // phase gradient back into the carrier.
    let [gx, gy] = mean_gradient(&field, w, h);
    let delta = [gx * w as f64 / (2.0 * PI), gy * h as f64 / (2.0 * PI)];
    apply_ramp(&mut field, w, h, delta);
    Ok((field, [fx + delta[0], fy + delta[1]]))
}

fn apply_ramp(field: &mut [Complex64], w: usize, h: usize, f: [f64; 2]) {
    let (kx, ky) = (2.0 * PI * f[0] / w as f64, 2.0 * PI * f[1] / h as f64);
    for y in 0..h {
        let ry = Complex64::from_polar(1.0, -ky * y as f64);
        for x in 0..w {
            field[y * w + x] *= ry * Complex64::from_polar(1.0, -kx * x as f64);
        }
    }
}

/// |field|²-weighted mean of the neighbour phase differences (rad/pixel).
fn mean_gradient(field: &[Complex64], w: usize, h: usize) -> [f64; 2] {
    let (mut sx, mut wx, mut sy, mut wy) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let a = field[y * w + x];
            if x + 1 < w {
                let p = field[y * w + x + 1] * a.conj();
                sx += p.norm() * p.arg();
                wx += p.norm();
            }
            if y + 1 < h {
                let p = field[(y + 1) * w + x] * a.conj();
                sy += p.norm() * p.arg();
                wy += p.norm();
            }
        }
    }
    [if wx > 0.0 { sx / wx } else { 0.0 }, if wy > 0.0 { sy / wy } else { 0.0 }]
}

/// Valid region: demodulated amplitude above `fraction` of its maximum, restricted to
/// the connected part containing the maximum.
pub fn valid_mask(field: &[Complex64], width: usize, height: usize, fraction: f64) -> Vec<bool> {
    let amp: Vec<f64> = field.iter().map(|z| z.norm()).collect();
    let (imax, max) = amp
        .iter()
        .enumerate()
        .fold((0, 0.0), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let raw: Vec<bool> = amp.iter().map(|&a| a > fraction * max && max > 0.0).collect();
    let (labels, _) = label(&raw, width, height, false);
    let keep = labels[imax];
    labels.iter().map(|&l| l != 0 && l == keep).collect()
}

fn wrap(p: f64) -> f64 {
    p - 2.0 * PI * ((p + PI) / (2.0 * PI)).floor()
}

#[derive(PartialEq)]
struct Queued(f64, usize);
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

/// Residues (non-zero wrapped circulation around 2×2 loops) fully inside the mask.
pub fn count_residues(wrapped: &[f64], mask: &[bool], width: usize, height: usize) -> usize {
    let mut n = 0;
    for y in 0..height.saturating_sub(1) {
        for x in 0..width.saturating_sub(1) {
            let i = y * width + x;
            let q = [i, i + 1, i + 1 + width, i + width];
            if q.iter().any(|&k| !mask[k]) {
                continue;
            }
            let c: f64 = (0..4).map(|k| wrap(wrapped[q[(k + 1) % 4]] - wrapped[q[k]])).sum();
            if c.abs() > PI {
                n += 1;
            }
        }
    }
    n
}

/// Quality-guided unwrapping seeded at the highest-quality pixel, followed by
/// referencing to the border of the valid region.
pub fn unwrap(
    wrapped: &[f64],
    quality: &[f64],
    mask: &[bool],
    width: usize,
    height: usize,
    opts: &RetrievalOptions,
) -> Result<PhaseMap> {
    let n = width * height;
    check_shape(width, height, wrapped.len())?;
    if quality.len() != n || mask.len() != n {
        return Err(Error::arg("quality and mask must match the phase size"));
    }
    let valid = mask.iter().filter(|m| **m).count();
    if valid == 0 {
        return Err(Error::arg("empty valid region"));
    }
    let residues = count_residues(wrapped, mask, width, height);
    let density = residues as f64 / valid as f64;
    if density > opts.residue_limit {
        return Err(Error::UnwrapQuality {
            density,
            limit: opts.residue_limit,
        });
    }

    let seed = (0..n)
        .filter(|&i| mask[i])
        .max_by(|&a, &b| quality[a].total_cmp(&quality[b]).then(b.cmp(&a)))
        .expect("non-empty");
    let mut phase = vec![0.0; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    phase[seed] = wrapped[seed];
    done[seed] = true;
    heap.push(Queued(quality[seed], seed));
    while let Some(Queued(_, i)) = heap.pop() {
        let (x, y) = ((i % width) as isize, (i / width) as isize);
        for &(dx, dy) in neighbours(false) {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                continue;
            }
            let j = ny as usize * width + nx as usize;
            if !mask[j] || done[j] {
                continue;
            }
            phase[j] = phase[i] + wrap(wrapped[j] - wrapped[i]);
            done[j] = true;
            heap.push(Queued(quality[j], j));
        }
    }
    // Pixels of the mask not reached from the seed are dropped.
    let mask: Vec<bool> = done;
    for (p, m) in phase.iter_mut().zip(&mask) {
        if !m {
            *p = 0.0;
        }
    }
    let mut map = PhaseMap {
        width,
        height,
        phase,
        mask,
        k_perp: [0.0, 0.0],
    };
    reference_to_border(&mut map, opts)?;
    Ok(map)
}

/// Mask pixels within `border_width` of the edge of the valid region.
pub fn border_region(mask: &[bool], width: usize, height: usize, border_width: usize) -> Vec<bool> {
    let inner = erode(mask, width, height, border_width);
    mask.iter().zip(&inner).map(|(&m, &i)| m && !i).collect()
}

fn reference_to_border(map: &mut PhaseMap, opts: &RetrievalOptions) -> Result<()> {
    if opts.reference == BorderReference::None {
        return Ok(());
    }
    let (w, h) = (map.width, map.height);
    let border = border_region(&map.mask, w, h, opts.border_width.max(1));
    let pts: Vec<(f64, f64, f64)> = (0..w * h)
        .filter(|&i| border[i])
        .map(|i| ((i % w) as f64, (i / w) as f64, map.phase[i]))
        .collect();
    if pts.is_empty() {
        return Err(Error::arg("valid region has no border"));
    }
    let plane = match opts.reference {
        BorderReference::Plane if pts.len() >= 3 => fit_plane(&pts),
        _ => None,
    };
    let (a, bx, by) = plane.unwrap_or_else(|| (pts.iter().map(|p| p.2).sum::<f64>() / pts.len() as f64, 0.0, 0.0));
    for i in 0..w * h {
        if map.mask[i] {
            map.phase[i] -= a + bx * (i % w) as f64 + by * (i / w) as f64;
        }
    }
    Ok(())
}

/// Least-squares plane z = a + bx·x + by·y (coordinates centred for conditioning).
fn fit_plane(pts: &[(f64, f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mz = pts.iter().map(|p| p.2).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y, z) in pts {
        let (dx, dy, dz) = (x - mx, y - my, z - mz);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
        sxz += dx * dz;
        syz += dy * dz;
    }
    let det = sxx * syy - sxy * sxy;
    if !(det.abs() > 1e-12 * (sxx * syy).max(1e-300)) {
        return None;
    }
    let bx = (sxz * syy - syz * sxy) / det;
    let by = (syz * sxx - sxz * sxy) / det;
    Some((mz - bx * mx - by * my, bx, by))
}

/// Fits φ(I) = n₂·I/(1 + I/I_S) + b over the valid pixels and subtracts b.
///
/// Neighbouring pixels of a Fourier-filtered map are strongly correlated: the map has
/// roughly as many independent samples as the satellite mask has pixels. When
/// `independent_samples` is given, the parameter uncertainties are inflated by
/// √(pixels / independent_samples).
pub fn remove_offsets(
    phase: &PhaseMap,
    intensity: &[f64],
    independent_samples: Option<usize>,
) -> Result<(PhaseMap, KerrFit)> {
    if intensity.len() != phase.phase.len() {
        return Err(Error::arg("intensity map must match the phase map"));
    }
    let pts: Vec<(f64, f64)> = (0..phase.phase.len())
        .filter(|&i| phase.mask[i])
        .map(|i| (intensity[i], phase.phase[i]))
        .collect();
    let mut fit = fitting::fit_saturated(&pts, None)?;
    if let Some(k) = independent_samples {
        let scale = (pts.len() as f64 / k.max(1) as f64).max(1.0).sqrt();
        fit.sigma.n2 *= scale;
        fit.sigma.offset *= scale;
        if fit.saturation_resolved {
            fit.sigma.i_sat *= scale;
        }
    }
    let mut out = phase.clone();
    for (p, m) in out.phase.iter_mut().zip(&out.mask) {
        if *m {
            *p -= fit.offset;
        }
    }
    Ok((out, fit))
}

/// Output of [`retrieve`].
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub detection: PeakDetection,
    pub field: Vec<Complex64>,
    /// Referenced total phase (off-axis contribution removed).
    pub phase: PhaseMap,
    pub phi_nl: PhaseMap,
    pub fit: KerrFit,
}

/// Intensity map (W/cm²) estimated from the demodulated amplitude, |𝓔_s| ∝ |field|,
/// scaled so that its maximum equals `peak_intensity`. Assumes a reference much wider
/// than the signal.
pub fn intensity_from_field(field: &[Complex64], peak_intensity: f64) -> Vec<f64> {
    let max = field.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
    field
        .iter()
        .map(|z| if max > 0.0 { peak_intensity * z.norm_sqr() / max } else { 0.0 })
        .collect()
}

/// Full pipeline on one frame. `intensity` is the co-registered signal intensity in
/// W/cm²; `conjugate` selects the mirror satellite (negated phase).
pub fn retrieve(
    frame: &Interferogram,
    intensity: &[f64],
    opts: &RetrievalOptions,
    conjugate: bool,
) -> Result<Retrieval> {
    let (w, h) = (frame.width, frame.height);
    let spec = spectrum(frame);
    let mag = fourier_magnitude(&spec, w, h);
    let mut detection = detect_satellite(&mag, w, h, opts)?;
    if conjugate {
        detection = detection.conjugate();
    }
    let (field, carrier) = demodulate(&spec, &detection, opts)?;
    let mask = valid_mask(&field, w, h, opts.mask_fraction);
    let wrapped: Vec<f64> = field.iter().map(|z| z.arg()).collect();
    let quality: Vec<f64> = field.iter().map(|z| z.norm()).collect();
    let mut phase = unwrap(&wrapped, &quality, &mask, w, h, opts)?;
    phase.k_perp = [2.0 * PI * carrier[0] / w as f64, 2.0 * PI * carrier[1] / h as f64];
    let (mut phi_nl, fit) = remove_offsets(&phase, intensity, Some(detection.area))?;
    phi_nl.k_perp = phase.k_perp;
    Ok(Retrieval {
        detection,
        field,
        phase,
        phi_nl,
        fit,
    })
}


/// Synthetic off-axis setup: Gaussian signal and wide reference beams with a saturated
/// Kerr phase imprinted on the signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KerrScene {
    pub size: usize,
    /// Signal 1/e² intensity radius (pixels).
    pub waist_px: f64,
    pub reference_waist_px: f64,
    /// Fringe wavevector (rad/pixel).
    pub k_perp: [f64; 2],
    /// Phase per intensity at low intensity (rad per W/cm²).
    pub n2_phase: f64,
    /// W/cm².
    pub i_sat: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for KerrScene {
    fn default() -> Self {
        KerrScene {
            size: 1024,
            waist_px: 180.0,
            reference_waist_px: 720.0,
            k_perp: [0.6, 0.25],
            n2_phase: -0.5,
            i_sat: 40.0,
            snr_db: 30.0,
            seed: 1,
        }
    }
}

impl KerrScene {
    /// n₂ such that the peak phase at `peak_intensity` is `peak_phase`.
    pub fn with_peak_phase(mut self, peak_phase: f64, peak_intensity: f64) -> Self {
        self.n2_phase = peak_phase * (1.0 + peak_intensity / self.i_sat) / peak_intensity;
        self
    }

    pub fn phase_at(&self, i: f64) -> f64 {
        self.n2_phase * i / (1.0 + i / self.i_sat)
    }

    /// Signal intensity map (W/cm²).
    pub fn intensity_map(&self, peak_intensity: f64) -> Vec<f64> {
        let n = self.size;
        let c = n as f64 / 2.0;
        let w2 = self.waist_px * self.waist_px;
        (0..n * n)
            .map(|i| {
                let (dx, dy) = ((i % n) as f64 - c, (i / n) as f64 - c);
                peak_intensity * (-2.0 * (dx * dx + dy * dy) / w2).exp()
            })
            .collect()
    }

    /// Camera frame at the given peak intensity. The signal field amplitude is
    /// √(I/I_ref) with the reference peak at unit amplitude and `ref_intensity` W/cm².
    pub fn frame(&self, peak_intensity: f64, ref_intensity: f64, frame_id: u64) -> Result<(Interferogram, Option<String>)> {
        let n = self.size;
        let c = n as f64 / 2.0;
        let intensity = self.intensity_map(peak_intensity);
        let phi: Vec<f64> = intensity.iter().map(|&i| self.phase_at(i)).collect();
        let signal: Vec<Complex64> = intensity.iter().map(|&i| Complex64::new((i / ref_intensity).sqrt(), 0.0)).collect();
        let reference = gaussian_field(n, n, [c, c], self.reference_waist_px, 1.0);
        let noise = if self.snr_db.is_finite() {
            Noise::Gaussian {
                snr_db: self.snr_db,
                seed: self.seed ^ frame_id.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            }
        } else {
            Noise::None
        };
        let (mut f, warn) = synthesize(n, n, &signal, &reference, self.k_perp, &phi, noise)?;
        f.frame_id = frame_id;
        Ok((f, warn))
    }
}
