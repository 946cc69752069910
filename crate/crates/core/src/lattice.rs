//! Discrete torus geometry and the pseudo-spectral machinery built on it.
//!
//! Conventions (used everywhere in the crate):
//!
//! * the torus is `[0, 2π)^d` with the normalized measure, so the characters
//!   `e^{ik·x}`, `k ∈ Z^d`, are orthonormal;
//! * a field is `u(x) = Σ_k û(k) e^{ik·x}` over the retained modes
//!   `|k|_∞ ≤ K`, and `û(k) = n^{-d} Σ_x u(x) e^{-ik·x}` on the grid
//!   `x_j = 2π j / n`;
//! * the Laplacian symbol is `-|k|²`, so the free operator `m - Δ` has
//!   symbol `ω_k = |k|² + m`.

use std::fmt;
use std::sync::{Arc, OnceLock};

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Forward/inverse FFT engine for one physical resolution `n` and one
/// spectral cutoff `K`.
///
/// Only the lines that can carry non-zero data are transformed: on the way
/// to physical space the spectrum is supported on `(2K+1)^d` modes, and on
/// the way back only the retained output modes are needed.
pub struct Transform {
    dim: usize,
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// flat physical-array index of every retained mode, in mode order
    mode_offsets: Vec<usize>,
    inv_lines: Vec<(usize, Vec<usize>)>,
    fwd_lines: Vec<(usize, Vec<usize>)>,
}

impl Transform {
    fn new(dim: usize, n: usize, cutoff: usize, modes: &[[i32; 3]]) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let wrap = |k: i32| -> usize { k.rem_euclid(n as i32) as usize };
        let mode_offsets = modes
            .iter()
            .map(|k| (0..dim).fold(0usize, |acc, a| acc * n + wrap(k[a])))
            .collect();

        let retained: Vec<usize> = (-(cutoff as i32)..=cutoff as i32).map(wrap).collect();
        let full: Vec<usize> = (0..n).collect();
        let lines_for = |axis: usize| -> Vec<usize> {
            // coordinates on axes before `axis` are still (or already) spectral
            let lists: Vec<&[usize]> = (0..dim)
                .map(|b| if b < axis { retained.as_slice() } else { full.as_slice() })
                .collect();
            let mut starts = vec![0usize];
            for (b, list) in lists.iter().enumerate() {
                let stride = n.pow((dim - 1 - b) as u32);
                if b == axis {
                    continue;
                }
                starts = starts
                    .iter()
                    .flat_map(|s| list.iter().map(move |c| s + c * stride))
                    .collect();
            }
            starts
        };
        let inv_lines = (0..dim).rev().map(|a| (a, lines_for(a))).collect();
        let fwd_lines = (0..dim).map(|a| (a, lines_for(a))).collect();
        Self { dim, n, fwd, inv, mode_offsets, inv_lines, fwd_lines }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of physical grid points, `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn run_lines(&self, buf: &mut [C64], lines: &[(usize, Vec<usize>)], fft: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        let mut scratch = vec![ZERO; fft.get_inplace_scratch_len()];
        let mut line = vec![ZERO; n];
        for (axis, starts) in lines {
            let stride = n.pow((self.dim - 1 - axis) as u32);
            if stride == 1 {
                for &s in starts {
                    fft.process_with_scratch(&mut buf[s..s + n], &mut scratch);
                }
            } else {
                for &s in starts {
                    for (j, v) in line.iter_mut().enumerate() {
                        *v = buf[s + j * stride];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (j, v) in line.iter().enumerate() {
                        buf[s + j * stride] = *v;
                    }
                }
            }
        }
    }

    /// Evaluates one or two Hermitian spectra on the grid with a single
    /// complex transform (`û + i v̂` maps to `u + i v`).
    pub fn to_physical_pair(&self, a: &[C64], b: Option<&[C64]>) -> (Vec<f64>, Option<Vec<f64>>) {
        let mut buf = vec![ZERO; self.len()];
        match b {
            Some(b) => {
                for ((&off, x), y) in self.mode_offsets.iter().zip(a).zip(b) {
                    buf[off] = C64::new(x.re - y.im, x.im + y.re);
                }
            }
            None => {
                for (&off, x) in self.mode_offsets.iter().zip(a) {
                    buf[off] = *x;
                }
            }
        }
        self.run_lines(&mut buf, &self.inv_lines, &self.inv);
        let u = buf.iter().map(|c| c.re).collect();
        let v = b.map(|_| buf.iter().map(|c| c.im).collect());
        (u, v)
    }

    /// Spectral coefficients on the retained modes of one or two real grid
    /// arrays. The output is exactly Hermitian.
    pub fn to_spectral_pair(&self, u: &[f64], v: Option<&[f64]>) -> (Vec<C64>, Option<Vec<C64>>) {
        let mut buf: Vec<C64> = match v {
            Some(v) => u.iter().zip(v).map(|(&x, &y)| C64::new(x, y)).collect(),
            None => u.iter().map(|&x| C64::new(x, 0.0)).collect(),
        };
        self.run_lines(&mut buf, &self.fwd_lines, &self.fwd);
        let scale = 1.0 / self.len() as f64;
        let count = self.mode_offsets.len();
        let raw: Vec<C64> = self.mode_offsets.iter().map(|&off| buf[off] * scale).collect();
        // mode order is symmetric: the partner of index i is count - 1 - i
        let mut a = Vec::with_capacity(count);
        let mut b = v.map(|_| Vec::with_capacity(count));
        for i in 0..count {
            let p = raw[i];
            let q = raw[count - 1 - i].conj();
            a.push(C64::new(0.5 * (p.re + q.re), 0.5 * (p.im + q.im)));
            if let Some(b) = b.as_mut() {
                // (p - q) / (2i)
                b.push(C64::new(0.5 * (p.im - q.im), -0.5 * (p.re - q.re)));
            }
        }
        (a, b)
    }
}

/// Discrete torus `T^d` with `n` points per side, Fourier cutoff `K`,
/// mass `m` and coupling `λ`.
pub struct TorusGrid {
    dim: usize,
    n: usize,
    cutoff: usize,
    mass: f64,
    coupling: f64,
    modes: Vec<[i32; 3]>,
    k_squared: Vec<f64>,
    transform: Transform,
    fine: OnceLock<Transform>,
}

impl fmt::Debug for TorusGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TorusGrid")
            .field("dim", &self.dim)
            .field("n", &self.n)
            .field("cutoff", &self.cutoff)
            .field("mass", &self.mass)
            .field("coupling", &self.coupling)
            .finish()
    }
}

impl TorusGrid {
    pub fn new(dim: usize, n: usize, cutoff: usize, mass: f64, coupling: f64) -> Result<Arc<Self>> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension d = {dim} must be 1, 2 or 3")));
        }
        if n < 2 || n % 2 != 0 {
            return Err(Error::InvalidGrid(format!("n = {n} must be even and at least 2")));
        }
        if cutoff + 1 > n / 2 {
            return Err(Error::InvalidGrid(format!(
                "cutoff K = {cutoff} must satisfy K <= n/2 - 1 = {}",
                n / 2 - 1
            )));
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidGrid(format!("mass m = {mass} must be strictly positive")));
        }
        if !(coupling >= 0.0 && coupling.is_finite()) {
            return Err(Error::InvalidGrid(format!("coupling λ = {coupling} must be nonnegative")));
        }
        let modes = enumerate_modes(dim, cutoff);
        let k_squared = modes
            .iter()
            .map(|k| k.iter().map(|&c| (c as f64) * (c as f64)).sum())
            .collect();
        let transform = Transform::new(dim, n, cutoff, &modes);
        Ok(Arc::new(Self {
            dim,
            n,
            cutoff,
            mass,
            coupling,
            modes,
            k_squared,
            transform,
            fine: OnceLock::new(),
        }))
    }

    /// Same geometry with different mass and coupling.
    pub fn with_parameters(&self, mass: f64, coupling: f64) -> Result<Arc<Self>> {
        Self::new(self.dim, self.n, self.cutoff, mass, coupling)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    /// Number of retained modes, `(2K+1)^d`.
    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[[i32; 3]] {
        &self.modes
    }

    pub fn mode(&self, idx: usize) -> [i32; 3] {
        self.modes[idx]
    }

    /// Index of the zero mode.
    pub fn zero_index(&self) -> usize {
        self.modes.len() / 2
    }

    /// Index of `-k` given the index of `k`.
    pub fn conj_index(&self, idx: usize) -> usize {
        self.modes.len() - 1 - idx
    }

    /// Mode index of `k` (missing trailing components are zero), or `None`
    /// outside the retained set.
    pub fn mode_index(&self, k: &[i32]) -> Option<usize> {
        let kk = self.cutoff as i32;
        let mut idx = 0usize;
        for a in 0..self.dim {
            let c = k.get(a).copied().unwrap_or(0);
            if c.abs() > kk {
                return None;
            }
            idx = idx * (2 * self.cutoff + 1) + (c + kk) as usize;
        }
        if k.iter().skip(self.dim).any(|&c| c != 0) {
            return None;
        }
        Some(idx)
    }

    pub fn k_squared(&self, idx: usize) -> f64 {
        self.k_squared[idx]
    }

    /// `ω_k = |k|² + m`, the symbol of `m - Δ`.
    pub fn omega(&self, idx: usize) -> f64 {
        self.k_squared[idx] + self.mass
    }

    /// Indices whose mode is the canonical representative of its pair
    /// `{k, -k}` (first non-zero component positive), zero mode excluded.
    pub fn half_modes(&self) -> std::ops::Range<usize> {
        self.zero_index() + 1..self.mode_count()
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    /// Transform on a grid fine enough that quartic polynomials of cutoff
    /// fields are alias-free on the retained modes (`n ≥ 5K + 1`).
    pub fn fine_transform(&self) -> &Transform {
        self.fine.get_or_init(|| {
            let mut n = (5 * self.cutoff + 2).max(self.n);
            n += n % 2;
            Transform::new(self.dim, n, self.cutoff, &self.modes)
        })
    }

    /// Cubic products of cutoff fields are exact on retained modes only if
    /// `n ≥ 4K + 2`.
    pub fn require_alias_free_cubic(&self) -> Result<()> {
        if self.n < 4 * self.cutoff + 2 {
            return Err(Error::InvalidGrid(format!(
                "n = {} is too small for cubic drift with K = {}: the 4K+2 rule requires n >= {}",
                self.n,
                self.cutoff,
                4 * self.cutoff + 2
            )));
        }
        Ok(())
    }

    pub fn same_as(&self, other: &TorusGrid) -> bool {
        self.dim == other.dim
            && self.n == other.n
            && self.cutoff == other.cutoff
            && self.mass.to_bits() == other.mass.to_bits()
            && self.coupling.to_bits() == other.coupling.to_bits()
    }

    /// Physical coordinates of grid point `flat` as multi-index.
    pub fn point(&self, flat: usize) -> [usize; 3] {
        let mut out = [0usize; 3];
        let mut rem = flat;
        for a in (0..self.dim).rev() {
            out[a] = rem % self.n;
            rem /= self.n;
        }
        out
    }

    pub fn point_count(&self) -> usize {
        self.transform.len()
    }

    /// Spectral coefficients of a real grid array.
    pub fn to_spectral(self: &Arc<Self>, u: &[f64]) -> Field {
        let (c, _) = self.transform.to_spectral_pair(u, None);
        Field { grid: Arc::clone(self), coeffs: c }
    }

    /// Transforms a batch of grid arrays, two at a time.
    pub fn to_spectral_many(self: &Arc<Self>, arrays: &[Vec<f64>]) -> Vec<Field> {
        let chunks: Vec<Vec<Vec<C64>>> = arrays
            .par_chunks(2)
            .map(|pair| {
                let (a, b) = self.transform.to_spectral_pair(&pair[0], pair.get(1).map(|v| v.as_slice()));
                let mut out = vec![a];
                out.extend(b);
                out
            })
            .collect();
        chunks
            .into_iter()
            .flatten()
            .map(|coeffs| Field { grid: Arc::clone(self), coeffs })
            .collect()
    }
}

fn enumerate_modes(dim: usize, cutoff: usize) -> Vec<[i32; 3]> {
    let kk = cutoff as i32;
    let mut modes = vec![[0i32; 3]];
    for a in 0..dim {
        modes = modes
            .into_iter()
            .flat_map(|m| {
                (-kk..=kk).map(move |c| {
                    let mut k = m;
                    k[a] = c;
                    k
                })
            })
            .collect();
    }
    modes
}

/// Physical values of a batch of fields, two per complex transform.
pub fn to_physical_many(fields: &[&Field]) -> Vec<Vec<f64>> {
    if fields.is_empty() {
        return Vec::new();
    }
    let transform = fields[0].grid.transform();
    let chunks: Vec<Vec<Vec<f64>>> = fields
        .par_chunks(2)
        .map(|pair| {
            let (u, v) = transform.to_physical_pair(&pair[0].coeffs, pair.get(1).map(|f| f.coeffs.as_slice()));
            let mut out = vec![u];
            out.extend(v);
            out
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// A real scalar field stored as Hermitian-symmetric Fourier coefficients on
/// the retained modes of its grid.
#[derive(Clone)]
pub struct Field {
    grid: Arc<TorusGrid>,
    coeffs: Vec<C64>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field").field("grid", &self.grid).field("coeffs", &self.coeffs).finish()
    }
}

impl PartialEq for Field {
    fn eq(&self, other: &Self) -> bool {
        self.grid.same_as(&other.grid) && self.coeffs == other.coeffs
    }
}

impl Field {
    pub fn zeros(grid: &Arc<TorusGrid>) -> Self {
        Self { grid: Arc::clone(grid), coeffs: vec![ZERO; grid.mode_count()] }
    }

    pub fn constant(grid: &Arc<TorusGrid>, c: f64) -> Self {
        let mut f = Self::zeros(grid);
        f.coeffs[grid.zero_index()] = C64::new(c, 0.0);
        f
    }

    /// Builds a field from raw coefficients, projecting onto the Hermitian
    /// subspace.
    pub fn from_coeffs(grid: &Arc<TorusGrid>, coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() != grid.mode_count() {
            return Err(Error::GridMismatch(format!(
                "{} coefficients for a grid with {} retained modes",
                coeffs.len(),
                grid.mode_count()
            )));
        }
        let mut f = Self { grid: Arc::clone(grid), coeffs };
        f.symmetrize();
        Ok(f)
    }

    /// Wraps coefficients that are already Hermitian (internal fast path).
    pub(crate) fn from_hermitian(grid: &Arc<TorusGrid>, coeffs: Vec<C64>) -> Self {
        debug_assert_eq!(coeffs.len(), grid.mode_count());
        Self { grid: Arc::clone(grid), coeffs }
    }

    /// Field with `û(k) = value` and `û(-k) = conj(value)`.
    pub fn single_mode(grid: &Arc<TorusGrid>, k: &[i32], value: C64) -> Result<Self> {
        let mut f = Self::zeros(grid);
        f.set_mode(k, value)?;
        Ok(f)
    }

    pub fn set_mode(&mut self, k: &[i32], value: C64) -> Result<()> {
        let idx = self
            .grid
            .mode_index(k)
            .ok_or_else(|| Error::InvalidParameter(format!("mode {k:?} is not retained")))?;
        let c = self.grid.conj_index(idx);
        if c == idx {
            self.coeffs[idx] = C64::new(value.re, 0.0);
        } else {
            self.coeffs[idx] = value;
            self.coeffs[c] = value.conj();
        }
        Ok(())
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub(crate) fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<C64> {
        self.coeffs
    }

    pub fn coeff(&self, k: &[i32]) -> Option<C64> {
        self.grid.mode_index(k).map(|i| self.coeffs[i])
    }

    /// Spatial mean, i.e. the zero-mode coefficient.
    pub fn mean(&self) -> f64 {
        self.coeffs[self.grid.zero_index()].re
    }

    fn symmetrize(&mut self) {
        let count = self.coeffs.len();
        for i in self.grid.half_modes() {
            let p = self.coeffs[i];
            let q = self.coeffs[count - 1 - i].conj();
            let v = C64::new(0.5 * (p.re + q.re), 0.5 * (p.im + q.im));
            self.coeffs[i] = v;
            self.coeffs[count - 1 - i] = v.conj();
        }
        let z = self.grid.zero_index();
        self.coeffs[z].im = 0.0;
    }

    /// Exact Hermitian symmetry check.
    pub fn is_hermitian(&self) -> bool {
        let count = self.coeffs.len();
        self.coeffs[self.grid.zero_index()].im == 0.0
            && self
                .grid
                .half_modes()
                .all(|i| self.coeffs[count - 1 - i] == self.coeffs[i].conj())
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// `u(x_j) = Σ_k û(k) e^{ik·x_j}` on the `n^d` grid, row-major.
    pub fn to_physical(&self) -> Vec<f64> {
        self.grid.transform.to_physical_pair(&self.coeffs, None).0
    }

    pub fn ensure_same_grid(&self, other: &Field) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{:?} vs {:?}", self.grid, other.grid)))
        }
    }

    pub fn scaled(&self, s: f64) -> Field {
        Field::from_hermitian(&self.grid, self.coeffs.iter().map(|c| c * s).collect())
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.ensure_same_grid(other)?;
        Ok(Field::from_hermitian(
            &self.grid,
            self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.ensure_same_grid(other)?;
        Ok(Field::from_hermitian(
            &self.grid,
            self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a - b).collect(),
        ))
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Field) -> Result<()> {
        self.ensure_same_grid(other)?;
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b * s;
        }
        Ok(())
    }

    /// Adds a constant to the field (zero-mode shift).
    pub fn shift(&self, c: f64) -> Field {
        let mut out = self.clone();
        out.coeffs[self.grid.zero_index()].re += c;
        out
    }

    /// `(Σ_k (1+|k|²)^s |û(k)|²)^{1/2}`; `s = 0` is the L² norm for the
    /// normalized measure.
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        self.sobolev_norm_sq(s).sqrt()
    }

    pub fn sobolev_norm_sq(&self, s: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let w = if s == 0.0 { 1.0 } else { (1.0 + self.grid.k_squared[i]).powf(s) };
                w * c.norm_sqr()
            })
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sobolev_norm(0.0)
    }
}

/// Spectral truncation of the exact pointwise product `f·g`.
///
/// The product is formed on the physical grid when `n ≥ 3K + 1` (no aliased
/// mode lands on the retained set), on the padded grid otherwise.
pub fn dealiased_product(f: &Field, g: &Field) -> Result<Field> {
    f.ensure_same_grid(g)?;
    let grid = &f.grid;
    let t = if grid.n >= 3 * grid.cutoff + 1 { grid.transform() } else { grid.fine_transform() };
    let (u, v) = t.to_physical_pair(&f.coeffs, Some(&g.coeffs));
    let v = v.expect("pair transform");
    let prod: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a * b).collect();
    let (c, _) = t.to_spectral_pair(&prod, None);
    Ok(Field { grid: Arc::clone(grid), coeffs: c })
}
