//! Coefficient fields: drifts, diffusions, mollification and mixed
//! `L^q_t L^p_x` norms.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use libm::{exp, pow};

use crate::error::{arg, Error, Result};
use crate::linalg;
use crate::par;

/// `(t, x, out)`: writes a vector (or flattened matrix) value into `out`.
pub type FieldFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, out)`: a matrix that depends on time only.
pub type TimeMatrixFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// Relative step for central finite differences of coefficient fields.
pub const FD_STEP: f64 = 1e-5;

/// Integrability exponents `(p, q)` of a drift: `b ∈ L^q([T,S]; L^p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integrability {
    p: f64,
    q: f64,
}

impl Integrability {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        if !(p > 1.0) || !(q > 1.0) {
            return arg("integrability exponents must lie in (1, inf]");
        }
        Ok(Self { p, q })
    }

    /// `p = q = inf`, the default for bounded drifts.
    pub const fn bounded() -> Self {
        Self {
            p: f64::INFINITY,
            q: f64::INFINITY,
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// The subcritical condition `d/p + 2/q < 1`.
    pub fn is_subcritical(&self, d: usize) -> bool {
        d as f64 / self.p + 2.0 / self.q < 1.0
    }
}

/// Axis-aligned box in space crossed with a time interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeBox {
    pub t_start: f64,
    pub t_end: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SpaceTimeBox {
    pub fn new(t_start: f64, t_end: f64, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return arg("box bounds must have equal, nonzero length");
        }
        Ok(Self {
            t_start,
            t_end,
            lower,
            upper,
        })
    }

    pub fn cube(t_start: f64, t_end: f64, d: usize, lo: f64, hi: f64) -> Self {
        Self {
            t_start,
            t_end,
            lower: vec![lo; d],
            upper: vec![hi; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn validate(&self) -> Result<()> {
        let zero_time = !(self.t_end > self.t_start);
        let zero_space = self.lower.iter().zip(&self.upper).any(|(l, u)| !(u > l));
        if zero_time || zero_space {
            return arg("space-time box has zero volume");
        }
        Ok(())
    }
}

/// Resolution of the composite midpoint rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quadrature {
    pub space_nodes: usize,
    pub time_nodes: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            space_nodes: crate::defaults::QUADRATURE_NODES,
            time_nodes: crate::defaults::QUADRATURE_NODES,
        }
    }
}

/// Midpoint-rule nodes of a box, `n` per axis, visited in row-major order.
pub(crate) fn for_each_midpoint(lower: &[f64], upper: &[f64], n: usize, mut f: impl FnMut(&[f64])) {
    let d = lower.len();
    let h: Vec<f64> = (0..d).map(|a| (upper[a] - lower[a]) / n as f64).collect();
    let total = n.pow(d as u32);
    let mut x = vec![0.0; d];
    for idx in 0..total {
        let mut rem = idx;
        for a in (0..d).rev() {
            let j = rem % n;
            rem /= n;
            x[a] = lower[a] + (j as f64 + 0.5) * h[a];
        }
        f(&x);
    }
}

/// Mixed norm `( ∫ ( ∫ |f(t,x)|^p dx )^{q/p} dt )^{1/q}` by tensor-product
/// midpoint quadrature over `domain`.
pub fn lq_lp_norm<F>(f: F, p: f64, q: f64, domain: &SpaceTimeBox, quad: Quadrature) -> Result<f64>
where
    F: Fn(f64, &[f64]) -> f64 + Sync + Send,
{
    if !p.is_finite() || !q.is_finite() || p < 1.0 || q < 1.0 {
        return arg("lq_lp_norm needs finite exponents p, q >= 1");
    }
    if quad.space_nodes == 0 || quad.time_nodes == 0 {
        return arg("quadrature needs at least one node per axis");
    }
    domain.validate()?;
    let n = quad.space_nodes;
    let cell: f64 = domain
        .lower
        .iter()
        .zip(&domain.upper)
        .map(|(l, u)| (u - l) / n as f64)
        .product();
    let dt = (domain.t_end - domain.t_start) / quad.time_nodes as f64;
    let slices = par::map_indexed(quad.time_nodes, |k| {
        let t = domain.t_start + (k as f64 + 0.5) * dt;
        let mut acc = 0.0;
        let mut bad = false;
        for_each_midpoint(&domain.lower, &domain.upper, n, |x| {
            let v = f(t, x);
            if !v.is_finite() {
                bad = true;
            }
            acc += pow(v.abs(), p);
        });
        if bad {
            Err(Error::NonFinite {
                what: "field in lq_lp_norm".to_string(),
                t,
            })
        } else {
            Ok(pow(acc * cell, q / p))
        }
    });
    let mut total = 0.0;
    for s in slices {
        total += s?;
    }
    Ok(pow(total * dt, 1.0 / q))
}

/// Node-based sampled field on a box: multilinear between nodes, zero outside.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSampled {
    lower: Vec<f64>,
    upper: Vec<f64>,
    shape: Vec<usize>,
    components: usize,
    /// Row-major over nodes, components innermost.
    values: Vec<f64>,
}

impl GridSampled {
    pub fn new(
        lower: Vec<f64>,
        upper: Vec<f64>,
        shape: Vec<usize>,
        components: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let d = lower.len();
        if d == 0 || upper.len() != d || shape.len() != d {
            return arg("grid bounds and shape must share a nonzero dimension");
        }
        if shape.iter().any(|&m| m < 2) {
            return arg("grid needs at least two nodes per axis");
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(u > l)) {
            return arg("grid box has zero volume");
        }
        let nodes: usize = shape.iter().product();
        if components == 0 || values.len() != nodes * components {
            return arg("grid value count does not match shape x components");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return arg("grid values must be finite");
        }
        Ok(Self {
            lower,
            upper,
            shape,
            components,
            values,
        })
    }

    /// Samples `f` at the nodes of the box.
    pub fn sample(
        lower: Vec<f64>,
        upper: Vec<f64>,
        shape: Vec<usize>,
        components: usize,
        f: impl Fn(&[f64], &mut [f64]),
    ) -> Result<Self> {
        let d = lower.len();
        let nodes: usize = shape.iter().product();
        let mut values = vec![0.0; nodes * components];
        let mut x = vec![0.0; d];
        for node in 0..nodes {
            let mut rem = node;
            for a in (0..d).rev() {
                let j = rem % shape[a];
                rem /= shape[a];
                x[a] = lower[a] + (upper[a] - lower[a]) * j as f64 / (shape[a] - 1) as f64;
            }
            f(&x, &mut values[node * components..(node + 1) * components]);
        }
        Self::new(lower, upper, shape, components, values)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
    pub fn components(&self) -> usize {
        self.components
    }
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out[..self.components].iter_mut().for_each(|v| *v = 0.0);
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        debug_assert!(d <= 8);
        for a in 0..d {
            let m = self.shape[a];
            let s = (x[a] - self.lower[a]) / (self.upper[a] - self.lower[a]) * (m - 1) as f64;
            if !(s >= 0.0 && s <= (m - 1) as f64) {
                return;
            }
            let i = (s as usize).min(m - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut node = 0usize;
            for a in 0..d {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                node = node * self.shape[a] + base[a] + bit;
            }
            if w == 0.0 {
                continue;
            }
            let row = &self.values[node * self.components..(node + 1) * self.components];
            for c in 0..self.components {
                out[c] += w * row[c];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftKind {
    ClosedForm,
    GridSampled,
    Mollified,
    Combination,
}

#[derive(Clone)]
enum DriftRepr {
    Closed(FieldFn),
    Grid(Arc<GridSampled>),
    Mollified {
        base: Arc<DriftSpec>,
        stencil: Arc<Stencil>,
    },
    Combination(Vec<(f64, DriftSpec)>),
}

/// A time-dependent vector field `b: [T,S] x R^d -> R^d`.
#[derive(Clone)]
pub struct DriftSpec {
    dim: usize,
    integrability: Integrability,
    label: String,
    repr: DriftRepr,
    gradient: Option<FieldFn>,
}

impl fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftSpec")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("kind", &self.kind())
            .field("integrability", &self.integrability)
            .finish()
    }
}

impl DriftSpec {
    pub fn closed<F>(dim: usize, label: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            dim,
            integrability: Integrability::bounded(),
            label: label.into(),
            repr: DriftRepr::Closed(Arc::new(f)),
            gradient: None,
        }
    }

    /// Attach a closed-form gradient, `out[i*d + m] = ∂_m b_i`.
    pub fn with_gradient<G>(mut self, g: G) -> Self
    where
        G: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn with_integrability(mut self, integrability: Integrability) -> Self {
        self.integrability = integrability;
        self
    }

    pub fn zero(dim: usize) -> Self {
        Self::closed(dim, "zero", |_, _, out: &mut [f64]| {
            out.iter_mut().for_each(|v| *v = 0.0)
        })
        .with_gradient(|_, _, out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0))
    }

    pub fn constant(c: Vec<f64>) -> Self {
        let d = c.len();
        Self::closed(d, "constant", move |_, _, out: &mut [f64]| {
            out[..d].copy_from_slice(&c)
        })
        .with_gradient(|_, _, out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0))
    }

    /// `b(x) = A x` with `A` row-major `d x d`.
    pub fn linear(a: Vec<f64>, dim: usize) -> Result<Self> {
        if a.len() != dim * dim {
            return arg("linear drift needs a d x d matrix");
        }
        let a2 = a.clone();
        Ok(Self::closed(dim, "linear", move |_, x, out: &mut [f64]| {
            linalg::mat_vec(&a, x, dim, out)
        })
        .with_gradient(move |_, _, out: &mut [f64]| out[..dim * dim].copy_from_slice(&a2)))
    }

    pub fn grid(field: GridSampled, label: impl Into<String>) -> Result<Self> {
        if field.components() != field.dim() {
            return arg("grid drift must have d components");
        }
        Ok(Self {
            dim: field.dim(),
            integrability: Integrability::bounded(),
            label: label.into(),
            repr: DriftRepr::Grid(Arc::new(field)),
            gradient: None,
        })
    }

    /// `Σ a_k b_k`. All terms must share the dimension.
    pub fn combination(terms: Vec<(f64, DriftSpec)>) -> Result<Self> {
        let Some(first) = terms.first() else {
            return arg("empty drift combination");
        };
        let dim = first.1.dim;
        if terms.iter().any(|(_, b)| b.dim != dim) {
            return arg("drift combination mixes dimensions");
        }
        let integrability = first.1.integrability;
        let label = terms
            .iter()
            .map(|(a, b)| alloc::format!("{a}*{}", b.label))
            .collect::<Vec<_>>()
            .join("+");
        Ok(Self {
            dim,
            integrability,
            label,
            repr: DriftRepr::Combination(terms),
            gradient: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn label(&self) -> &str {
        &self.label
    }
    pub fn integrability(&self) -> Integrability {
        self.integrability
    }

    pub fn kind(&self) -> DriftKind {
        match self.repr {
            DriftRepr::Closed(_) => DriftKind::ClosedForm,
            DriftRepr::Grid(_) => DriftKind::GridSampled,
            DriftRepr::Mollified { .. } => DriftKind::Mollified,
            DriftRepr::Combination(_) => DriftKind::Combination,
        }
    }

    /// Whether `gradient` is exact (closed form, kernel derivative, or a
    /// combination of exact gradients) rather than a finite difference.
    pub fn has_exact_gradient(&self) -> bool {
        if self.gradient.is_some() {
            return true;
        }
        match &self.repr {
            DriftRepr::Mollified { .. } => true,
            DriftRepr::Combination(terms) => terms.iter().all(|(_, b)| b.has_exact_gradient()),
            _ => false,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.repr {
            DriftRepr::Closed(f) => f(t, x, out),
            DriftRepr::Grid(g) => g.eval(x, out),
            DriftRepr::Mollified { base, stencil } => stencil.convolve(base, t, x, out),
            DriftRepr::Combination(terms) => {
                let d = self.dim;
                out[..d].iter_mut().for_each(|v| *v = 0.0);
                let mut tmp = [0.0f64; 8];
                for (a, b) in terms {
                    b.eval(t, x, &mut tmp[..d]);
                    for i in 0..d {
                        out[i] += a * tmp[i];
                    }
                }
            }
        }
    }

    pub fn eval_checked(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.eval(t, x, out);
        if out[..self.dim].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: self.label.clone(),
                t,
            })
        }
    }

    /// Jacobian `out[i*d + m] = ∂_m b_i(t, x)`; central differences when no
    /// exact form is available.
    pub fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        if let Some(g) = &self.gradient {
            g(t, x, out);
            return;
        }
        match &self.repr {
            DriftRepr::Mollified { base, stencil } => stencil.convolve_gradient(base, t, x, out),
            DriftRepr::Combination(terms) => {
                out[..d * d].iter_mut().for_each(|v| *v = 0.0);
                let mut tmp = [0.0f64; 64];
                for (a, b) in terms {
                    b.gradient(t, x, &mut tmp[..d * d]);
                    for k in 0..d * d {
                        out[k] += a * tmp[k];
                    }
                }
            }
            _ => central_difference(|y, o| self.eval(t, y, o), x, d, out),
        }
    }

    /// Mixed norm of `|b|` using this drift's exponents.
    pub fn lq_lp_norm(&self, domain: &SpaceTimeBox, quad: Quadrature) -> Result<f64> {
        if domain.dim() != self.dim {
            return arg("norm domain dimension differs from drift dimension");
        }
        let d = self.dim;
        lq_lp_norm(
            |t, x| {
                let mut v = [0.0f64; 8];
                self.eval(t, x, &mut v[..d]);
                linalg::norm(&v[..d])
            },
            self.integrability.p,
            self.integrability.q,
            domain,
            quad,
        )
    }

    /// Finite-difference divergence at a point.
    pub fn divergence(&self, t: f64, x: &[f64]) -> f64 {
        let d = self.dim;
        let mut g = [0.0f64; 64];
        central_difference(|y, o| self.eval(t, y, o), x, d, &mut g[..d * d]);
        (0..d).map(|i| g[i * d + i]).sum()
    }
}

/// Central differences of `f: R^d -> R^n`, `out[i*d + m] = ∂_m f_i`, with step
/// `FD_STEP * max(1, |x_m|)`.
pub fn central_difference(f: impl Fn(&[f64], &mut [f64]), x: &[f64], n: usize, out: &mut [f64]) {
    let d = x.len();
    let mut y = [0.0f64; 8];
    y[..d].copy_from_slice(x);
    let mut fp = [0.0f64; 64];
    let mut fm = [0.0f64; 64];
    for m in 0..d {
        let h = FD_STEP * x[m].abs().max(1.0);
        y[m] = x[m] + h;
        f(&y[..d], &mut fp[..n]);
        y[m] = x[m] - h;
        f(&y[..d], &mut fm[..n]);
        y[m] = x[m];
        for i in 0..n {
            out[i * d + m] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
}

#[derive(Clone)]
enum DiffusionRepr {
    Constant(Vec<f64>),
    TimeOnly(TimeMatrixFn),
    General(FieldFn),
}

/// Matrix field `σ: [T,S] x R^d -> R^{d x d}` with ellipticity constant `K`
/// and Hölder exponent `α`.
#[derive(Clone)]
pub struct DiffusionSpec {
    dim: usize,
    label: String,
    repr: DiffusionRepr,
    gradient: Option<FieldFn>,
    ellipticity: f64,
    hoelder: f64,
}

impl fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionSpec")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("ellipticity", &self.ellipticity)
            .field("constant_in_x", &self.constant_in_x())
            .finish()
    }
}

fn ellipticity_of(m: &[f64], d: usize) -> Result<f64> {
    let sv = linalg::singular_values(m, d);
    let smax = sv[0];
    let smin = sv[d - 1];
    if !(smin > 0.0) {
        return arg("diffusion matrix is singular");
    }
    Ok(smax.max(1.0 / smin).max(1.0))
}

impl DiffusionSpec {
    pub fn constant(matrix: Vec<f64>, dim: usize) -> Result<Self> {
        if matrix.len() != dim * dim {
            return arg("diffusion matrix must be d x d");
        }
        let k = ellipticity_of(&matrix, dim)?;
        Ok(Self {
            dim,
            label: "constant".into(),
            repr: DiffusionRepr::Constant(matrix),
            gradient: None,
            ellipticity: k,
            hoelder: 0.5,
        })
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        let mut m = linalg::identity(dim);
        m.iter_mut().for_each(|v| *v *= scale);
        let mut s = Self::constant(m, dim)?;
        s.label = alloc::format!("{scale}*I");
        Ok(s)
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0).expect("identity is elliptic")
    }

    /// `σ_t` independent of `x`.
    pub fn time_only<F>(dim: usize, ellipticity: f64, f: F) -> Result<Self>
    where
        F: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        if !(ellipticity >= 1.0) {
            return arg("ellipticity constant K must be >= 1");
        }
        Ok(Self {
            dim,
            label: "time-only".into(),
            repr: DiffusionRepr::TimeOnly(Arc::new(f)),
            gradient: None,
            ellipticity,
            hoelder: 0.5,
        })
    }

    pub fn general<F>(
        dim: usize,
        label: impl Into<String>,
        ellipticity: f64,
        hoelder: f64,
        f: F,
    ) -> Result<Self>
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if !(ellipticity >= 1.0) {
            return arg("ellipticity constant K must be >= 1");
        }
        if !(hoelder > 0.0 && hoelder < 1.0) {
            return arg("Hoelder exponent must lie in (0, 1)");
        }
        Ok(Self {
            dim,
            label: label.into(),
            repr: DiffusionRepr::General(Arc::new(f)),
            gradient: None,
            ellipticity,
            hoelder,
        })
    }

    /// Closed-form spatial gradient, `out[(i*d + j)*d + m] = ∂_m σ_ij`.
    pub fn with_gradient<G>(mut self, g: G) -> Self
    where
        G: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn label(&self) -> &str {
        &self.label
    }
    pub fn ellipticity(&self) -> f64 {
        self.ellipticity
    }
    pub fn hoelder(&self) -> f64 {
        self.hoelder
    }
    pub fn constant_in_x(&self) -> bool {
        !matches!(self.repr, DiffusionRepr::General(_))
    }

    /// The matrix if `σ` is constant in both time and space.
    pub fn as_constant(&self) -> Option<&[f64]> {
        match &self.repr {
            DiffusionRepr::Constant(m) => Some(m),
            _ => None,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.repr {
            DiffusionRepr::Constant(m) => out[..m.len()].copy_from_slice(m),
            DiffusionRepr::TimeOnly(f) => f(t, out),
            DiffusionRepr::General(f) => f(t, x, out),
        }
    }

    /// `out[(i*d + j)*d + m] = ∂_m σ_ij(t, x)`.
    pub fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        if self.constant_in_x() {
            out[..d * d * d].iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        if let Some(g) = &self.gradient {
            g(t, x, out);
            return;
        }
        central_difference(|y, o| self.eval(t, y, o), x, d * d, out);
    }

    pub fn has_exact_gradient(&self) -> bool {
        self.constant_in_x() || self.gradient.is_some()
    }

    /// `∫_t^s σ_r σ_r^T dr`; exact for constant `σ`, midpoint rule otherwise.
    pub fn covariance_integral(&self, t: f64, s: f64) -> Result<Vec<f64>> {
        if !self.constant_in_x() {
            return arg("covariance integral needs σ constant in x");
        }
        let d = self.dim;
        let mut acc = vec![0.0; d * d];
        let mut m = vec![0.0; d * d];
        let n = if self.as_constant().is_some() { 1 } else { 256 };
        let h = (s - t) / n as f64;
        let x = vec![0.0; d];
        for k in 0..n {
            self.eval(t + (k as f64 + 0.5) * h, &x, &mut m);
            for i in 0..d {
                for j in 0..d {
                    let mut v = 0.0;
                    for l in 0..d {
                        v += m[i * d + l] * m[j * d + l];
                    }
                    acc[i * d + j] += v * h;
                }
            }
        }
        Ok(acc)
    }

    /// Spot-check `K^{-1} <= s_min, s_max <= K` at the given `(t, x)` samples;
    /// returns the extreme singular values seen.
    pub fn check_ellipticity(&self, samples: &[(f64, Vec<f64>)]) -> (f64, f64, bool) {
        let d = self.dim;
        let mut m = vec![0.0; d * d];
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for (t, x) in samples {
            self.eval(*t, x, &mut m);
            let sv = linalg::singular_values(&m, d);
            hi = hi.max(sv[0]);
            lo = lo.min(sv[d - 1]);
        }
        let k = self.ellipticity;
        (lo, hi, lo >= 1.0 / k - 1e-12 && hi <= k + 1e-12)
    }
}

/// Smooth bump `exp(-1/(1-|x|^2))` on the open unit ball.
#[inline]
pub fn bump(r2: f64) -> f64 {
    if r2 < 1.0 {
        exp(-1.0 / (1.0 - r2))
    } else {
        0.0
    }
}

/// `1 / ∫ bump` over the unit ball of `R^d`, by a radial midpoint rule.
pub fn bump_normalization(d: usize) -> f64 {
    const N: usize = 200_000;
    let h = 1.0 / N as f64;
    let mut radial = 0.0;
    for k in 0..N {
        let r = (k as f64 + 0.5) * h;
        radial += pow(r, (d - 1) as f64) * bump(r * r) * h;
    }
    1.0 / (unit_sphere_area(d) * radial)
}

/// Surface area of the unit sphere in `R^d`.
pub fn unit_sphere_area(d: usize) -> f64 {
    // A_d = 2 π^{d/2} / Γ(d/2)
    2.0 * pow(core::f64::consts::PI, d as f64 / 2.0) / libm::tgamma(d as f64 / 2.0)
}

/// Mollifier family `ϱ_n(x) = n^d c ϱ(n x)`, discretised by a midpoint
/// stencil with `resolution` nodes per axis of the kernel support.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MollifierSpec {
    level: u32,
    resolution: usize,
}

impl MollifierSpec {
    pub fn new(level: u32, resolution: usize) -> Result<Self> {
        if level == 0 {
            return arg("mollifier level must be positive");
        }
        if resolution < 2 {
            return arg("mollifier stencil needs at least 2 nodes per axis");
        }
        Ok(Self { level, resolution })
    }

    pub fn with_level(level: u32) -> Result<Self> {
        Self::new(level, crate::defaults::QUADRATURE_NODES)
    }

    pub fn level(&self) -> u32 {
        self.level
    }
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Continuous density `ϱ_n(x)` with the normalising constant for `R^d`.
    /// Recomputes the constant on every call; see [`Self::density_fn`].
    pub fn density(&self, x: &[f64]) -> f64 {
        self.density_fn(x.len())(x)
    }

    /// `ϱ_n` on `R^d` with the normalising constant computed once.
    pub fn density_fn(&self, d: usize) -> impl Fn(&[f64]) -> f64 {
        let n = self.level as f64;
        let c = pow(n, d as f64) * bump_normalization(d);
        move |x: &[f64]| {
            let r2: f64 = x.iter().map(|v| (n * v) * (n * v)).sum();
            c * bump(r2)
        }
    }
}

/// Discrete convolution weights: `b_n(x) = Σ w_j b(x - o_j)`.
#[derive(Debug, Clone)]
struct Stencil {
    dim: usize,
    offsets: Vec<f64>,
    weights: Vec<f64>,
    /// `∂_m` of the kernel weights, `dim` per node.
    grad_weights: Vec<f64>,
}

impl Stencil {
    fn build(m: MollifierSpec, d: usize) -> Self {
        let n = m.level as f64;
        let lower = vec![-1.0; d];
        let upper = vec![1.0; d];
        let mut offsets = Vec::new();
        let mut raw = Vec::new();
        let mut grad_raw = Vec::new();
        for_each_midpoint(&lower, &upper, m.resolution, |z| {
            let r2: f64 = z.iter().map(|v| v * v).sum();
            let w = bump(r2);
            if w > 0.0 {
                offsets.extend(z.iter().map(|v| v / n));
                raw.push(w);
                let s = 1.0 - r2;
                grad_raw.extend(z.iter().map(|v| -2.0 * v * w / (s * s)));
            }
        });
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        let grad_weights = grad_raw.iter().map(|g| n * g / total).collect();
        Self {
            dim: d,
            offsets,
            weights,
            grad_weights,
        }
    }

    #[inline]
    fn convolve(&self, base: &DriftSpec, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out[..d].iter_mut().for_each(|v| *v = 0.0);
        let mut y = [0.0f64; 8];
        let mut v = [0.0f64; 8];
        for (j, w) in self.weights.iter().enumerate() {
            let o = &self.offsets[j * d..(j + 1) * d];
            for a in 0..d {
                y[a] = x[a] - o[a];
            }
            base.eval(t, &y[..d], &mut v[..d]);
            for a in 0..d {
                out[a] += w * v[a];
            }
        }
    }

    fn convolve_gradient(&self, base: &DriftSpec, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        out[..d * d].iter_mut().for_each(|v| *v = 0.0);
        let mut y = [0.0f64; 8];
        let mut v = [0.0f64; 8];
        for j in 0..self.weights.len() {
            let o = &self.offsets[j * d..(j + 1) * d];
            for a in 0..d {
                y[a] = x[a] - o[a];
            }
            base.eval(t, &y[..d], &mut v[..d]);
            let g = &self.grad_weights[j * d..(j + 1) * d];
            for i in 0..d {
                for m in 0..d {
                    out[i * d + m] += g[m] * v[i];
                }
            }
        }
    }
}

/// `ϱ_n * b(t, ·)` evaluated lazily by a fixed stencil over the kernel support.
/// The result keeps the exponents of `b` and carries an exact gradient.
pub fn mollify(b: &DriftSpec, m: MollifierSpec) -> Result<DriftSpec> {
    let d = b.dim;
    if d == 0 || d > 8 {
        return arg("mollify supports 1 <= d <= 8");
    }
    let stencil = Stencil::build(m, d);
    Ok(DriftSpec {
        dim: d,
        integrability: b.integrability,
        label: alloc::format!("mollify({}, n={})", b.label, m.level),
        repr: DriftRepr::Mollified {
            base: Arc::new(b.clone()),
            stencil: Arc::new(stencil),
        },
        gradient: None,
    })
}

/// Indicator of the open unit ball times a fixed direction, a prototypical
/// singular (discontinuous) drift in every `L^q_p`.
pub fn ball_indicator(direction: Vec<f64>, radius: f64) -> DriftSpec {
    let d = direction.len();
    let r2 = radius * radius;
    DriftSpec::closed(d, "ball_indicator", move |_, x, out: &mut [f64]| {
        let inside = x.iter().map(|v| v * v).sum::<f64>() < r2;
        for i in 0..d {
            out[i] = if inside { direction[i] } else { 0.0 };
        }
    })
}
