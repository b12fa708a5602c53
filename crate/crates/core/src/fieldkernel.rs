//! Energy point-spread function and 2-D convolution.
//!
//! The PSF is the normalized double Gaussian
//!
//! ```text
//! f(r) = 1/(pi (1 + eta)) * [ exp(-r^2/alpha^2)/alpha^2 + eta * exp(-r^2/beta^2)/beta^2 ]
//! ```
//!
//! with forward range `alpha`, backscatter range `beta` and back-to-forward
//! energy ratio `eta`. Kernels are sampled at pixel centers, truncated at
//! radius `3 beta` and renormalized to unit sum.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{GridFrame, RasterGrid};

/// Kernel truncation radius in units of the longest Gaussian range.
pub const TRUNCATION_RANGES: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsfParams {
    /// Forward-scattering range, nm.
    pub alpha: f64,
    /// Backscattering range, nm.
    pub beta: f64,
    /// Backscattered-to-forward deposited energy ratio.
    pub eta: f64,
}

impl Default for PsfParams {
    fn default() -> Self {
        PsfParams {
            alpha: 30.0,
            beta: 300.0,
            eta: 5.0,
        }
    }
}

impl PsfParams {
    pub fn new(alpha: f64, beta: f64, eta: f64) -> Result<Self> {
        let p = PsfParams { alpha, beta, eta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "psf alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.beta > self.alpha && self.beta.is_finite()) {
            return Err(Error::invalid(format!(
                "psf beta ({}) must exceed alpha ({})",
                self.beta, self.alpha
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!(
                "psf eta must be >= 0, got {}",
                self.eta
            )));
        }
        Ok(())
    }

    pub fn with_eta(self, eta: f64) -> Result<Self> {
        PsfParams::new(self.alpha, self.beta, eta)
    }

    /// Continuous PSF value at radius `r` (nm), per nm^2.
    pub fn density(&self, r: f64) -> f64 {
        let (a2, b2) = (self.alpha * self.alpha, self.beta * self.beta);
        let r2 = r * r;
        ((-r2 / a2).exp() / a2 + self.eta * (-r2 / b2).exp() / b2)
            / (std::f64::consts::PI * (1.0 + self.eta))
    }
}

/// Square convolution kernel of side `2 radius + 1`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub pixel_size: f64,
    pub radius: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Weight at offset `(dx, dy)` pixels from the center.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        self.weights[((dy + r) as usize) * self.side() + (dx + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Build from a radial profile sampled at pixel centers, truncated at
    /// `cutoff` nm and normalized to unit sum.
    fn from_profile(pixel_size: f64, cutoff: f64, profile: impl Fn(f64) -> f64) -> Kernel {
        let radius = (cutoff / pixel_size).floor() as usize;
        let side = 2 * radius + 1;
        let r = radius as isize;
        let mut weights = vec![0.0; side * side];
        for dy in -r..=r {
            for dx in -r..=r {
                let dist = pixel_size * ((dx * dx + dy * dy) as f64).sqrt();
                if dist <= cutoff {
                    weights[((dy + r) as usize) * side + (dx + r) as usize] = profile(dist);
                }
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Kernel {
            pixel_size,
            radius,
            weights,
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in self.weights.chunks(self.side()) {
            let line: Vec<String> = row.iter().map(|&v| crate::fmt::g17(v)).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

fn check_pixel(pixel_size: f64) -> Result<()> {
    if !(pixel_size > 0.0 && pixel_size.is_finite()) {
        return Err(Error::invalid(format!(
            "pixel size must be positive, got {pixel_size}"
        )));
    }
    Ok(())
}

/// Discretized double-Gaussian PSF.
pub fn make_psf_kernel(params: &PsfParams, pixel_size: f64) -> Result<Kernel> {
    params.validate()?;
    check_pixel(pixel_size)?;
    if pixel_size > params.alpha {
        return Err(Error::invalid(format!(
            "pixel size {pixel_size} nm undersamples the forward range alpha = {} nm",
            params.alpha
        )));
    }
    Ok(Kernel::from_profile(
        pixel_size,
        TRUNCATION_RANGES * params.beta,
        |r| params.density(r),
    ))
}

/// Normalized single Gaussian `exp(-r^2/range^2)` truncated at `3 range`.
pub fn gaussian_kernel(range: f64, pixel_size: f64) -> Result<Kernel> {
    check_pixel(pixel_size)?;
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::invalid(format!(
            "gaussian range must be positive, got {range}"
        )));
    }
    Ok(Kernel::from_profile(
        pixel_size,
        TRUNCATION_RANGES * range,
        |r| (-(r * r) / (range * range)).exp(),
    ))
}

/// Sampled mass of the forward and backscatter terms before truncation and
/// renormalization. Analytically these are `1/(1+eta)` and `eta/(1+eta)`.
pub fn sampled_term_masses(params: &PsfParams, pixel_size: f64) -> Result<(f64, f64)> {
    params.validate()?;
    check_pixel(pixel_size)?;
    let area = pixel_size * pixel_size;
    let norm = std::f64::consts::PI * (1.0 + params.eta);
    let term_mass = |range: f64, scale: f64| {
        // sample out to 8 ranges; the tail beyond is below 1e-27
        let r = (8.0 * range / pixel_size).ceil() as isize;
        let mut s = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let r2 = ((dx * dx + dy * dy) as f64) * area;
                s += (-r2 / (range * range)).exp();
            }
        }
        s * area * scale / (range * range * norm)
    };
    Ok((
        term_mass(params.alpha, 1.0),
        term_mass(params.beta, params.eta),
    ))
}

/// Pick an FFT length >= `n` with only small prime factors.
fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut k = m;
        for p in [2, 3, 5, 7] {
            while k.is_multiple_of(p) {
                k /= p;
            }
        }
        if k == 1 {
            return m;
        }
        m += 1;
    }
}

fn transpose(src: &[Complex<f64>], rows: usize, cols: usize, dst: &mut [Complex<f64>]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// FFT convolution of fields on a fixed frame with one kernel.
///
/// The kernel spectrum is computed once, so repeated convolutions on the
/// same frame (dose refinement) cost two transforms each. Boundaries are
/// zero-padded and the output has the input's dimensions, centered on the
/// kernel origin.
pub struct Convolver {
    frame: GridFrame,
    nx: usize,
    ny: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    /// Kernel spectrum in transposed (column-major) layout.
    kernel_hat: Vec<Complex<f64>>,
}

impl std::fmt::Debug for Convolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Convolver")
            .field("frame", &self.frame)
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .finish()
    }
}

impl Convolver {
    pub fn new(kernel: &Kernel, frame: &GridFrame) -> Result<Self> {
        if (kernel.pixel_size - frame.pixel_size).abs() > 1e-12 * frame.pixel_size {
            return Err(Error::GridMismatch(format!(
                "kernel pixel size {} nm vs field pixel size {} nm",
                kernel.pixel_size, frame.pixel_size
            )));
        }
        let r = kernel.radius;
        let nx = fast_len(frame.width + r);
        let ny = fast_len(frame.height + r);
        let mut planner = FftPlanner::new();
        let mut conv = Convolver {
            frame: *frame,
            nx,
            ny,
            row_fwd: planner.plan_fft_forward(nx),
            row_inv: planner.plan_fft_inverse(nx),
            col_fwd: planner.plan_fft_forward(ny),
            col_inv: planner.plan_fft_inverse(ny),
            kernel_hat: Vec::new(),
        };
        let mut buf = vec![Complex::new(0.0, 0.0); nx * ny];
        let ri = r as isize;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let w = kernel.at(dx, dy);
                if w != 0.0 {
                    let y = dy.rem_euclid(ny as isize) as usize;
                    let x = dx.rem_euclid(nx as isize) as usize;
                    buf[y * nx + x].re += w;
                }
            }
        }
        conv.kernel_hat = conv.forward(buf);
        Ok(conv)
    }

    pub fn frame(&self) -> &GridFrame {
        &self.frame
    }

    fn forward(&self, mut buf: Vec<Complex<f64>>) -> Vec<Complex<f64>> {
        self.row_fwd.process(&mut buf);
        let mut t = vec![Complex::new(0.0, 0.0); buf.len()];
        transpose(&buf, self.ny, self.nx, &mut t);
        self.col_fwd.process(&mut t);
        t
    }

    /// Convolve raw row-major values laid out on this convolver's frame.
    pub fn apply_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        let (w, h) = (self.frame.width, self.frame.height);
        if values.len() != w * h {
            return Err(Error::GridMismatch(format!(
                "{} values for a {w}x{h} convolver",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "convolution input contains non-finite values",
            ));
        }
        let (nx, ny) = (self.nx, self.ny);
        let mut buf = vec![Complex::new(0.0, 0.0); nx * ny];
        for y in 0..h {
            for x in 0..w {
                buf[y * nx + x].re = values[y * w + x];
            }
        }
        let mut t = self.forward(buf);
        for (a, k) in t.iter_mut().zip(&self.kernel_hat) {
            *a *= k;
        }
        self.col_inv.process(&mut t);
        let mut buf = vec![Complex::new(0.0, 0.0); nx * ny];
        transpose(&t, nx, ny, &mut buf);
        self.row_inv.process(&mut buf);
        let scale = 1.0 / (nx * ny) as f64;
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = buf[y * nx + x].re * scale;
            }
        }
        Ok(out)
    }

    pub fn apply(&self, field: &RasterGrid) -> Result<RasterGrid> {
        if field.frame() != &self.frame {
            return Err(Error::GridMismatch(
                "field frame differs from the convolver frame".into(),
            ));
        }
        RasterGrid::from_values(self.frame, self.apply_values(field.values())?)
    }
}

/// Linear, zero-padded 2-D convolution; output has the input's frame.
pub fn convolve(field: &RasterGrid, kernel: &Kernel) -> Result<RasterGrid> {
    Convolver::new(kernel, field.frame())?.apply(field)
}

/// Pattern convolved with the normalized backscatter Gaussian (range `beta`):
/// the fraction of area exposed within a backscatter range of each pixel.
pub fn local_density(pattern: &RasterGrid, params: &PsfParams) -> Result<RasterGrid> {
    pattern.ensure_binary()?;
    params.validate()?;
    let kernel = gaussian_kernel(params.beta, pattern.pixel_size())?;
    Ok(convolve(pattern, &kernel)?.map(|v| v.clamp(0.0, 1.0)))
}
