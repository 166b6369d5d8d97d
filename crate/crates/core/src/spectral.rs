//! Periodic grid fields and FFT-based differential operators.
//!
//! Boxes are `[origin, origin + L)^d` with a power-of-two node count per axis.
//! Odd derivatives drop the Nyquist mode so that gradient, divergence,
//! Leray projection and Biot-Savart all share one symbol and compose exactly.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{cos, exp, floor, pow, sin, sqrt};
use num_complex::Complex64;

use crate::error::{arg, Error, Result};
use crate::par;

/// In-place radix-2 FFT; the inverse is normalised by `1/n`.
pub fn fft(data: &mut [Complex64], inverse: bool) {
    let n = data.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            data.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let twiddles: Vec<Complex64> = (0..n / 2)
        .map(|j| {
            let a = sign * 2.0 * PI * j as f64 / n as f64;
            Complex64::new(cos(a), sin(a))
        })
        .collect();
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddles[k * stride];
                let a = data[start + k];
                let b = data[start + k + half] * w;
                data[start + k] = a + b;
                data[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
    if inverse {
        let s = 1.0 / n as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Multi-dimensional FFT over a row-major array of the given shape.
pub fn fft_nd(data: &mut [Complex64], shape: &[usize], inverse: bool) {
    let total: usize = shape.iter().product();
    debug_assert_eq!(total, data.len());
    let mut stride = 1;
    let mut buf = Vec::new();
    for axis in (0..shape.len()).rev() {
        let n = shape[axis];
        buf.resize(n, Complex64::new(0.0, 0.0));
        let block = stride * n;
        for outer in (0..total).step_by(block) {
            for inner in 0..stride {
                for j in 0..n {
                    buf[j] = data[outer + inner + j * stride];
                }
                fft(&mut buf, inverse);
                for j in 0..n {
                    data[outer + inner + j * stride] = buf[j];
                }
            }
        }
        stride = block;
    }
}

/// Periodic box `[origin, origin + L)^d` with `shape[a]` nodes per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicGrid {
    origin: Vec<f64>,
    length: f64,
    shape: Vec<usize>,
}

impl PeriodicGrid {
    pub fn new(origin: Vec<f64>, length: f64, shape: Vec<usize>) -> Result<Self> {
        if origin.len() != shape.len() || shape.is_empty() || shape.len() > 3 {
            return arg("periodic grids support 1 to 3 dimensions");
        }
        if !(length > 0.0) {
            return arg("box length must be positive");
        }
        if shape.iter().any(|&n| n < 2 || !n.is_power_of_two()) {
            return arg("grid sizes must be powers of two >= 2");
        }
        Ok(Self {
            origin,
            length,
            shape,
        })
    }

    /// `[0, L)^d` with `n` nodes per axis.
    pub fn cube(d: usize, length: f64, n: usize) -> Result<Self> {
        Self::new(vec![0.0; d], length, vec![n; d])
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn length(&self) -> f64 {
        self.length
    }
    pub fn origin(&self) -> &[f64] {
        &self.origin
    }
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn spacing(&self, axis: usize) -> f64 {
        self.length / self.shape[axis] as f64
    }
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn multi_index(&self, mut idx: usize, out: &mut [usize]) {
        for a in (0..self.dim()).rev() {
            out[a] = idx % self.shape[a];
            idx /= self.shape[a];
        }
    }

    pub fn position(&self, idx: usize, out: &mut [f64]) {
        let mut mi = [0usize; 3];
        self.multi_index(idx, &mut mi);
        for a in 0..self.dim() {
            out[a] = self.origin[a] + mi[a] as f64 * self.spacing(a);
        }
    }

    /// Signed wavenumber of index `j` along `axis`.
    pub fn wavenumber(&self, axis: usize, j: usize) -> f64 {
        let n = self.shape[axis];
        let m = if j < n / 2 {
            j as i64
        } else {
            j as i64 - n as i64
        };
        2.0 * PI * m as f64 / self.length
    }

    /// Wavenumber used by odd derivatives (zero at Nyquist).
    pub fn derivative_wavenumber(&self, axis: usize, j: usize) -> f64 {
        if j == self.shape[axis] / 2 {
            0.0
        } else {
            self.wavenumber(axis, j)
        }
    }

    pub(crate) fn for_each_mode(&self, mut f: impl FnMut(usize, &[f64; 3], &[f64; 3])) {
        let mut mi = [0usize; 3];
        let mut k = [0.0; 3];
        let mut kd = [0.0; 3];
        for idx in 0..self.len() {
            self.multi_index(idx, &mut mi);
            for a in 0..self.dim() {
                k[a] = self.wavenumber(a, mi[a]);
                kd[a] = self.derivative_wavenumber(a, mi[a]);
            }
            f(idx, &k, &kd);
        }
    }
}

/// Vector-valued field on a [`PeriodicGrid`], stored component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: PeriodicGrid,
    components: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: PeriodicGrid, components: usize, values: Vec<f64>) -> Result<Self> {
        if components == 0 || values.len() != components * grid.len() {
            return arg("field values do not match grid size x components");
        }
        Ok(Self {
            grid,
            components,
            values,
        })
    }

    pub fn zeros(grid: &PeriodicGrid, components: usize) -> Self {
        Self {
            values: vec![0.0; components * grid.len()],
            grid: grid.clone(),
            components,
        }
    }

    pub fn from_fn(grid: &PeriodicGrid, components: usize, f: impl Fn(&[f64], &mut [f64])) -> Self {
        let n = grid.len();
        let d = grid.dim();
        let mut values = vec![0.0; components * n];
        let mut x = [0.0; 3];
        let mut v = vec![0.0; components];
        for idx in 0..n {
            grid.position(idx, &mut x);
            f(&x[..d], &mut v);
            for c in 0..components {
                values[c * n + idx] = v[c];
            }
        }
        Self {
            grid: grid.clone(),
            components,
            values,
        }
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }
    pub fn components(&self) -> usize {
        self.components
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[c * n..(c + 1) * n]
    }

    /// Value at node `idx`.
    pub fn node(&self, idx: usize, out: &mut [f64]) {
        let n = self.grid.len();
        for c in 0..self.components {
            out[c] = self.values[c * n + idx];
        }
    }

    pub(crate) fn spectrum(&self, c: usize) -> Vec<Complex64> {
        let mut s: Vec<Complex64> = self
            .component(c)
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        fft_nd(&mut s, self.grid.shape(), false);
        s
    }

    pub(crate) fn spectra(&self) -> Vec<Vec<Complex64>> {
        par::map_indexed(self.components, |c| self.spectrum(c))
    }

    pub(crate) fn from_spectra(grid: &PeriodicGrid, mut specs: Vec<Vec<Complex64>>) -> Self {
        let shape = grid.shape().to_vec();
        specs.iter_mut().for_each(|s| fft_nd(s, &shape, true));
        let values = specs.iter().flat_map(|s| s.iter().map(|z| z.re)).collect();
        Self {
            grid: grid.clone(),
            components: specs.len(),
            values,
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= a);
        out
    }

    /// `self - other`.
    pub fn sub(&self, other: &GridField) -> Result<Self> {
        if self.grid != other.grid || self.components != other.components {
            return arg("fields live on different grids");
        }
        let mut out = self.clone();
        out.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a -= b);
        Ok(out)
    }

    /// `(Σ |v(x)|^p h^d)^{1/p}` with `|·|` Euclidean over components.
    pub fn norm_lp(&self, p: f64) -> f64 {
        let n = self.grid.len();
        let mut acc = 0.0;
        for idx in 0..n {
            let m2: f64 = (0..self.components)
                .map(|c| {
                    let v = self.values[c * n + idx];
                    v * v
                })
                .sum();
            acc += pow(sqrt(m2), p);
        }
        pow(acc * self.grid.cell_volume(), 1.0 / p)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `∫ v` per component.
    pub fn integral(&self, c: usize) -> f64 {
        self.component(c).iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Spectral gradient; component `i*d + m` holds `∂_m v_i`.
    pub fn gradient(&self) -> Self {
        let d = self.grid.dim();
        let specs = self.spectra();
        let mut out = Vec::with_capacity(self.components * d);
        for s in &specs {
            for m in 0..d {
                let mut g = s.clone();
                self.grid
                    .for_each_mode(|idx, _, kd| g[idx] *= Complex64::new(0.0, kd[m]));
                out.push(g);
            }
        }
        Self::from_spectra(&self.grid, out)
    }

    /// Spectral divergence of a `d`-component field.
    pub fn divergence(&self) -> Result<Self> {
        let d = self.grid.dim();
        if self.components != d {
            return arg("divergence needs a d-component field");
        }
        let specs = self.spectra();
        let mut div = vec![Complex64::new(0.0, 0.0); self.grid.len()];
        self.grid.for_each_mode(|idx, _, kd| {
            for a in 0..d {
                div[idx] += Complex64::new(0.0, kd[a]) * specs[a][idx];
            }
        });
        Ok(Self::from_spectra(&self.grid, vec![div]))
    }

    /// Largest nodal `|div v|`.
    pub fn max_divergence(&self) -> Result<f64> {
        Ok(self.divergence()?.max_abs())
    }

    /// Scalar curl in 2-D, vector curl in 3-D.
    pub fn curl(&self) -> Result<Self> {
        let d = self.grid.dim();
        if self.components != d || d < 2 {
            return arg("curl needs a 2-D or 3-D vector field");
        }
        let s = self.spectra();
        let i = Complex64::new(0.0, 1.0);
        if d == 2 {
            let mut w = vec![Complex64::new(0.0, 0.0); self.grid.len()];
            self.grid
                .for_each_mode(|idx, _, kd| w[idx] = i * (kd[0] * s[1][idx] - kd[1] * s[0][idx]));
            Ok(Self::from_spectra(&self.grid, vec![w]))
        } else {
            let mut w = vec![vec![Complex64::new(0.0, 0.0); self.grid.len()]; 3];
            self.grid.for_each_mode(|idx, _, kd| {
                w[0][idx] = i * (kd[1] * s[2][idx] - kd[2] * s[1][idx]);
                w[1][idx] = i * (kd[2] * s[0][idx] - kd[0] * s[2][idx]);
                w[2][idx] = i * (kd[0] * s[1][idx] - kd[1] * s[0][idx]);
            });
            Ok(Self::from_spectra(&self.grid, w))
        }
    }

    /// `P v = v - ∇(-Δ)^{-1} div v`, mode by mode.
    pub fn leray_project(&self) -> Result<Self> {
        let d = self.grid.dim();
        if self.components != d {
            return arg("Leray projection needs a d-component field");
        }
        let mut s = self.spectra();
        self.grid.for_each_mode(|idx, _, kd| {
            let k2: f64 = kd[..d].iter().map(|k| k * k).sum();
            if k2 == 0.0 {
                return;
            }
            let mut kv = Complex64::new(0.0, 0.0);
            for a in 0..d {
                kv += s[a][idx] * kd[a];
            }
            for a in 0..d {
                s[a][idx] -= kv * (kd[a] / k2);
            }
        });
        Ok(Self::from_spectra(&self.grid, s))
    }

    /// Velocity with the given vorticity on the torus: `u = curl (-Δ)^{-1} ω`.
    /// 2-D takes a scalar `ω`, 3-D a divergence-free vector `ω`.
    pub fn biot_savart(&self) -> Result<Self> {
        let d = self.grid.dim();
        let expect = if d == 2 { 1 } else { 3 };
        if d < 2 || self.components != expect {
            return arg("Biot-Savart needs scalar vorticity in 2-D or vector vorticity in 3-D");
        }
        let s = self.spectra();
        let scale = (0..self.components)
            .map(|c| {
                self.component(c)
                    .iter()
                    .map(|v| v.abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
            .max(1.0);
        for spec in &s {
            let mean = spec[0].norm() / self.grid.len() as f64;
            if mean > 1e-10 * scale {
                return Err(Error::NotMeanZero(mean));
            }
        }
        let i = Complex64::new(0.0, 1.0);
        let n = self.grid.len();
        if d == 2 {
            let mut u = vec![vec![Complex64::new(0.0, 0.0); n]; 2];
            self.grid.for_each_mode(|idx, _, kd| {
                let k2 = kd[0] * kd[0] + kd[1] * kd[1];
                if k2 > 0.0 {
                    u[0][idx] = i * kd[1] * s[0][idx] / k2;
                    u[1][idx] = -i * kd[0] * s[0][idx] / k2;
                }
            });
            Ok(Self::from_spectra(&self.grid, u))
        } else {
            let mut u = vec![vec![Complex64::new(0.0, 0.0); n]; 3];
            self.grid.for_each_mode(|idx, _, kd| {
                let k2 = kd[0] * kd[0] + kd[1] * kd[1] + kd[2] * kd[2];
                if k2 > 0.0 {
                    u[0][idx] = i * (kd[1] * s[2][idx] - kd[2] * s[1][idx]) / k2;
                    u[1][idx] = i * (kd[2] * s[0][idx] - kd[0] * s[2][idx]) / k2;
                    u[2][idx] = i * (kd[0] * s[1][idx] - kd[1] * s[0][idx]) / k2;
                }
            });
            Ok(Self::from_spectra(&self.grid, u))
        }
    }

    /// Multiplies every mode by `exp(-½ kᵀ A k)`: convolution with the
    /// centred Gaussian of covariance `A` on the torus.
    pub fn gaussian_filter(&self, cov: &[f64]) -> Result<Self> {
        let d = self.grid.dim();
        if cov.len() != d * d {
            return arg("covariance must be d x d");
        }
        let mut s = self.spectra();
        self.grid.for_each_mode(|idx, k, _| {
            let mut q = 0.0;
            for a in 0..d {
                for b in 0..d {
                    q += k[a] * cov[a * d + b] * k[b];
                }
            }
            let m = exp(-0.5 * q);
            s.iter_mut().for_each(|c| c[idx] *= m);
        });
        Ok(Self::from_spectra(&self.grid, s))
    }

    /// Heat semigroup `e^{ν τ Δ}`.
    pub fn heat_decay(&self, nu: f64, tau: f64) -> Self {
        let d = self.grid.dim();
        let mut cov = vec![0.0; d * d];
        for a in 0..d {
            cov[a * d + a] = 2.0 * nu * tau;
        }
        self.gaussian_filter(&cov)
            .expect("covariance shape matches")
    }

    /// Locates `x` in the periodic lattice: base indices and fractions.
    #[inline]
    fn locate(&self, x: &[f64], base: &mut [usize; 3], frac: &mut [f64; 3]) {
        for a in 0..self.grid.dim() {
            let n = self.grid.shape[a];
            let s = (x[a] - self.grid.origin[a]) / self.grid.spacing(a);
            let f = floor(s);
            let i = (f as i64).rem_euclid(n as i64) as usize;
            base[a] = i;
            frac[a] = s - f;
        }
    }

    /// Periodic multilinear interpolation.
    pub fn interpolate_linear(&self, x: &[f64], out: &mut [f64]) {
        let d = self.grid.dim();
        let n = self.grid.len();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        self.locate(x, &mut base, &mut frac);
        out[..self.components].iter_mut().for_each(|v| *v = 0.0);
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..d {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                idx = idx * self.grid.shape[a] + (base[a] + bit) % self.grid.shape[a];
            }
            for c in 0..self.components {
                out[c] += w * self.values[c * n + idx];
            }
        }
    }

    /// Periodic tensor-product cubic convolution (Keys, a = -1/2).
    pub fn interpolate_cubic(&self, x: &[f64], out: &mut [f64]) {
        let d = self.grid.dim();
        let n = self.grid.len();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        self.locate(x, &mut base, &mut frac);
        // per-axis tap weights and flat offsets; unused axes get one unit tap
        let mut w = [[1.0, 0.0, 0.0, 0.0]; 3];
        let mut off = [[0usize; 4]; 3];
        let mut taps = [1usize; 3];
        let mut stride = 1;
        for a in (0..d).rev() {
            let m = self.grid.shape[a];
            w[a] = keys_weights(frac[a]);
            for o in 0..4 {
                off[a][o] = ((base[a] + m + o - 1) & (m - 1)) * stride;
            }
            taps[a] = 4;
            stride *= m;
        }
        out[..self.components].iter_mut().for_each(|v| *v = 0.0);
        for o0 in 0..taps[0] {
            for o1 in 0..taps[1] {
                let w01 = w[0][o0] * w[1][o1];
                let i01 = off[0][o0] + off[1][o1];
                for o2 in 0..taps[2] {
                    let weight = w01 * w[2][o2];
                    let idx = i01 + off[2][o2];
                    for c in 0..self.components {
                        out[c] += weight * self.values[c * n + idx];
                    }
                }
            }
        }
    }

    /// Exact trigonometric interpolant at an arbitrary point (O(N) per call).
    pub fn evaluate_trigonometric(&self, x: &[f64], out: &mut [f64]) {
        let d = self.grid.dim();
        let n = self.grid.len();
        let specs = self.spectra();
        out[..self.components].iter_mut().for_each(|v| *v = 0.0);
        let mut mi = [0usize; 3];
        for idx in 0..n {
            self.grid.multi_index(idx, &mut mi);
            let mut phase = 0.0;
            let mut weight = 1.0;
            for a in 0..d {
                let m = self.grid.shape[a];
                // split the Nyquist mode symmetrically so real data stays real
                if mi[a] == m / 2 {
                    let k = self.grid.wavenumber(a, mi[a]);
                    weight *= cos(k * (x[a] - self.grid.origin[a]));
                    continue;
                }
                phase += self.grid.wavenumber(a, mi[a]) * (x[a] - self.grid.origin[a]);
            }
            let e = Complex64::new(cos(phase), sin(phase)) * weight;
            for c in 0..self.components {
                out[c] += (specs[c][idx] * e).re / n as f64;
            }
        }
    }
}

#[inline]
fn keys_weights(t: f64) -> [f64; 4] {
    let a = -0.5;
    let k = |s: f64| {
        let s = s.abs();
        if s <= 1.0 {
            (a + 2.0) * s * s * s - (a + 3.0) * s * s + 1.0
        } else if s < 2.0 {
            a * s * s * s - 5.0 * a * s * s + 8.0 * a * s - 4.0 * a
        } else {
            0.0
        }
    };
    [k(1.0 + t), k(t), k(1.0 - t), k(2.0 - t)]
}
