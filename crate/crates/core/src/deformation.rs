//! Deformation families and the deformed design matrix.
//!
//! A [`DeformationModel`] bundles the template dictionary `{φ_ℓ}`, the
//! deformation map `β ↦ D(·, β)` and the design grid `Ω`, and builds
//! `[Φ_β]_{s,ℓ} = φ_ℓ(D(u_s, β))`.
//!
//! Two deformation families are provided besides the identity:
//!
//! * [`CurveWarpModel`]: monotone time warp
//!   `D(u, β) = u_i + (u_f − u_i) H(u, β)` where `H` is the normalized
//!   integral of `exp(Σ_k β_k ψ_k)` over an extended interval.
//! * [`ImageDeformModel`]: rigid map `R_φ(ϱu + t − c) + c` plus a smooth
//!   displacement field `Σ_k δ_k ψ_k(u)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Gaussian radial kernel `exp(−‖u − center‖² / bandwidth2)`.
pub fn gaussian_kernel(center: &[f64], bandwidth2: f64, u: &[f64]) -> f64 {
    let d2: f64 = center.iter().zip(u).map(|(c, x)| (x - c) * (x - c)).sum();
    (-d2 / bandwidth2).exp()
}

/// Design points `Ω = {u_1, …, u_|Ω|}` in one or two dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignGrid {
    dim: usize,
    coords: Vec<f64>,
}

impl DesignGrid {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::invalid(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if coords.is_empty() || !coords.len().is_multiple_of(dim) {
            return Err(Error::invalid("grid needs at least one complete point"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("grid coordinates must be finite"));
        }
        let grid = Self { dim, coords };
        for a in 0..grid.len() {
            for b in 0..a {
                if grid.point(a) == grid.point(b) {
                    return Err(Error::invalid(format!("grid points {b} and {a} coincide")));
                }
            }
        }
        Ok(grid)
    }

    pub fn line(points: Vec<f64>) -> Result<Self> {
        Self::new(1, points)
    }

    /// `count` evenly spaced points on `[lo, hi]`, endpoints included.
    pub fn regular_line(lo: f64, hi: f64, count: usize) -> Result<Self> {
        Self::line(linspace(lo, hi, count))
    }

    /// Pixel centers of a `side × side` raster covering `(−1, 1)²`, row-major
    /// with row index along the second coordinate.
    pub fn pixel_grid(side: usize) -> Result<Self> {
        let step = 2.0 / side as f64;
        let mut coords = Vec::with_capacity(2 * side * side);
        for row in 0..side {
            for col in 0..side {
                coords.push(-1.0 + step * (col as f64 + 0.5));
                coords.push(-1.0 + step * (row as f64 + 0.5));
            }
        }
        Self::new(2, coords)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, s: usize) -> &[f64] {
        &self.coords[s * self.dim..(s + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.coords.iter().all(|&c| c >= lo && c <= hi)
    }
}

pub(crate) fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Gaussian kernel dictionary: landmark centers with per-kernel variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDictionary {
    dim: usize,
    centers: Vec<f64>,
    bandwidths: Vec<f64>,
}

impl KernelDictionary {
    pub fn new(dim: usize, centers: Vec<f64>, bandwidths: Vec<f64>) -> Result<Self> {
        if dim == 0 || !centers.len().is_multiple_of(dim) {
            return Err(Error::invalid("kernel centers do not match the dimension"));
        }
        check_dim("kernel bandwidths", centers.len() / dim, bandwidths.len())?;
        if bandwidths.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::invalid("kernel bandwidths must be positive"));
        }
        Ok(Self {
            dim,
            centers,
            bandwidths,
        })
    }

    /// Regularly spaced centers on `[lo, hi]` (endpoints included) with a
    /// common variance.
    pub fn regular_line(lo: f64, hi: f64, count: usize, bandwidth2: f64) -> Result<Self> {
        Self::new(1, linspace(lo, hi, count), vec![bandwidth2; count])
    }

    /// Centers on the vertices of a `side × side` grid over `[lo, hi]²`,
    /// row-major, with a common variance.
    pub fn regular_square(lo: f64, hi: f64, side: usize, bandwidth2: f64) -> Result<Self> {
        let ticks = linspace(lo, hi, side);
        let mut centers = Vec::with_capacity(2 * side * side);
        for &y in &ticks {
            for &x in &ticks {
                centers.push(x);
                centers.push(y);
            }
        }
        Self::new(2, centers, vec![bandwidth2; side * side])
    }

    /// Regularly spaced 1-d centers whose variance is chosen so each kernel
    /// takes the value `epsilon` at its nearest design point:
    /// `ν_ℓ² = −min_u ‖r_ℓ − u‖² / log ε`. Design points closer than `1e-9`
    /// to a center are skipped, otherwise the variance would vanish.
    pub fn nearest_point_line(
        lo: f64,
        hi: f64,
        count: usize,
        grid: &DesignGrid,
        epsilon: f64,
    ) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::invalid("epsilon must lie in (0, 1)"));
        }
        check_dim("grid dimension", 1, grid.dim())?;
        let centers = linspace(lo, hi, count);
        let bandwidths = centers
            .iter()
            .map(|&r| {
                let d2 = (0..grid.len())
                    .map(|s| (grid.point(s)[0] - r).powi(2))
                    .filter(|&d2| d2 > 1e-18)
                    .fold(f64::INFINITY, f64::min);
                -d2 / epsilon.ln()
            })
            .collect();
        Self::new(1, centers, bandwidths)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bandwidths.is_empty()
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn bandwidth(&self, k: usize) -> f64 {
        self.bandwidths[k]
    }

    pub fn eval(&self, k: usize, u: &[f64]) -> f64 {
        gaussian_kernel(self.center(k), self.bandwidths[k], u)
    }

    /// `Σ_k coef_k φ_k(u)` for scalar coefficients.
    pub fn combine(&self, coef: &[f64], u: &[f64]) -> f64 {
        coef.iter()
            .enumerate()
            .map(|(k, c)| c * self.eval(k, u))
            .sum()
    }
}

/// Monotone time warp on `[u_i, u_f]` built on an extended interval
/// `[u'_i, u'_f]`.
#[derive(Debug, Clone)]
pub struct CurveWarpModel {
    domain: (f64, f64),
    extended: (f64, f64),
    kernels: KernelDictionary,
    nodes: usize,
    // ψ_k and ψ_k' tabulated on the quadrature nodes, node-major.
    psi: Vec<f64>,
    dpsi: Vec<f64>,
}

pub const DEFAULT_QUADRATURE_NODES: usize = 1024;

impl CurveWarpModel {
    pub fn new(
        domain: (f64, f64),
        extended: (f64, f64),
        kernels: KernelDictionary,
        nodes: usize,
    ) -> Result<Self> {
        let (ui, uf) = domain;
        let (ei, ef) = extended;
        if !(ei <= ui && ui < uf && uf <= ef) {
            return Err(Error::invalid(format!(
                "warp domain ({ui}, {uf}) must sit inside the extended domain ({ei}, {ef})"
            )));
        }
        check_dim("warp kernel dimension", 1, kernels.dim())?;
        if nodes < 2 {
            return Err(Error::invalid("quadrature needs at least two nodes"));
        }
        let d = kernels.len();
        let h = (ef - ei) / (nodes - 1) as f64;
        let mut psi = Vec::with_capacity(nodes * d);
        let mut dpsi = Vec::with_capacity(nodes * d);
        for i in 0..nodes {
            let v = ei + h * i as f64;
            for k in 0..d {
                let c = kernels.center(k)[0];
                let bw = kernels.bandwidth(k);
                let val = gaussian_kernel(&[c], bw, &[v]);
                psi.push(val);
                dpsi.push(-2.0 * (v - c) / bw * val);
            }
        }
        Ok(Self {
            domain,
            extended,
            kernels,
            nodes,
            psi,
            dpsi,
        })
    }

    /// `d_β` regularly spaced warp kernels on the extended interval with a
    /// common variance.
    pub fn regular(
        domain: (f64, f64),
        extended: (f64, f64),
        beta_dim: usize,
        bandwidth2: f64,
        nodes: usize,
    ) -> Result<Self> {
        let kernels = KernelDictionary::regular_line(extended.0, extended.1, beta_dim, bandwidth2)?;
        Self::new(domain, extended, kernels, nodes)
    }

    pub fn beta_dim(&self) -> usize {
        self.kernels.len()
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn extended(&self) -> (f64, f64) {
        self.extended
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn with_nodes(&self, nodes: usize) -> Result<Self> {
        Self::new(self.domain, self.extended, self.kernels.clone(), nodes)
    }

    /// Tabulates the normalized integrand for one `β`.
    pub fn profile(&self, beta: &[f64]) -> Result<WarpProfile> {
        let d = self.beta_dim();
        check_dim("warp beta", d, beta.len())?;
        let n = self.nodes;
        let mut g = Vec::with_capacity(n);
        let mut dg = Vec::with_capacity(n);
        for i in 0..n {
            let row = &self.psi[i * d..(i + 1) * d];
            let drow = &self.dpsi[i * d..(i + 1) * d];
            g.push(row.iter().zip(beta).map(|(p, b)| p * b).sum::<f64>());
            dg.push(drow.iter().zip(beta).map(|(p, b)| p * b).sum::<f64>());
        }
        let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let gmin = g.iter().copied().fold(f64::INFINITY, f64::min);
        if !gmax.is_finite() || !gmin.is_finite() {
            let bad = g.iter().copied().find(|v| !v.is_finite()).unwrap_or(f64::NAN);
            return Err(Error::Quadrature { exponent: bad });
        }
        if gmax - gmin > 700.0 {
            return Err(Error::Quadrature {
                exponent: gmax - gmin,
            });
        }
        // Log-domain shift: the max cancels in the ratio.
        let f: Vec<f64> = g.iter().map(|v| (v - gmax).exp()).collect();
        let fp: Vec<f64> = f.iter().zip(&dg).map(|(f, dg)| f * dg).collect();
        let h = (self.extended.1 - self.extended.0) / (n - 1) as f64;
        let mut prefix = Vec::with_capacity(n);
        prefix.push(0.0);
        for i in 1..n {
            let cell = 0.5 * h * (f[i - 1] + f[i]) + h * h / 12.0 * (fp[i - 1] - fp[i]);
            prefix.push(prefix[i - 1] + cell);
        }
        Ok(WarpProfile {
            start: self.extended.0,
            h,
            f,
            fp,
            prefix,
            domain: self.domain,
        })
    }

    /// `D(u, β)`
    pub fn warp(&self, beta: &[f64], u: f64) -> Result<f64> {
        Ok(self.profile(beta)?.warp(u))
    }
}

/// Cumulative integral of `exp(Σ β_k ψ_k)` for a fixed `β`.
///
/// Cells use the Hermite-corrected trapezoid rule (integrand values and
/// analytic derivatives at the nodes). Points between nodes integrate the
/// cubic Hermite interpolant over the partial cell.
#[derive(Debug, Clone)]
pub struct WarpProfile {
    start: f64,
    h: f64,
    f: Vec<f64>,
    fp: Vec<f64>,
    prefix: Vec<f64>,
    domain: (f64, f64),
}

impl WarpProfile {
    fn integral_to(&self, v: f64) -> f64 {
        let n = self.f.len();
        let pos = ((v - self.start) / self.h).max(0.0);
        let k = (pos.floor() as usize).min(n - 2);
        let t = (pos - k as f64).clamp(0.0, 1.0);
        let (f0, f1) = (self.f[k], self.f[k + 1]);
        let (d0, d1) = (self.fp[k] * self.h, self.fp[k + 1] * self.h);
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let partial = f0 * (0.5 * t4 - t3 + t)
            + d0 * (0.25 * t4 - 2.0 / 3.0 * t3 + 0.5 * t2)
            + f1 * (-0.5 * t4 + t3)
            + d1 * (0.25 * t4 - t3 / 3.0);
        self.prefix[k] + self.h * partial
    }

    /// `H(v, β)` for `v` in the extended interval.
    pub fn normalized(&self, v: f64) -> f64 {
        let total = *self.prefix.last().expect("profile has nodes");
        self.integral_to(v) / total
    }

    pub fn warp(&self, u: f64) -> f64 {
        let (ui, uf) = self.domain;
        ui + (uf - ui) * self.normalized(u)
    }
}

/// Rigid map `A(u, υ) = R_φ(ϱu + t − c) + c` with
/// `υ = (φ, ϱ, c_1, c_2, t_1, t_2)`.
pub fn rigid_transform(upsilon: &[f64], u: &[f64]) -> [f64; 2] {
    let (phi, ratio) = (upsilon[0], upsilon[1]);
    let (c1, c2) = (upsilon[2], upsilon[3]);
    let (t1, t2) = (upsilon[4], upsilon[5]);
    let x = ratio * u[0] + t1 - c1;
    let y = ratio * u[1] + t2 - c2;
    let (s, c) = phi.sin_cos();
    [c * x - s * y + c1, s * x + c * y + c2]
}

pub const RIGID_DIM: usize = 6;

/// Rigid-plus-local image deformation. `β = (υ, δ)` with `υ` the six rigid
/// coordinates and `δ = (δ_1x, δ_1y, δ_2x, …)` the field coefficients.
#[derive(Debug, Clone)]
pub struct ImageDeformModel {
    local: KernelDictionary,
}

impl ImageDeformModel {
    pub fn new(local: KernelDictionary) -> Result<Self> {
        check_dim("local field kernel dimension", 2, local.dim())?;
        Ok(Self { local })
    }

    /// `side × side` field landmarks on `[−0.5, 0.5]²`.
    pub fn regular(side: usize, bandwidth2: f64) -> Result<Self> {
        Self::new(KernelDictionary::regular_square(-0.5, 0.5, side, bandwidth2)?)
    }

    pub fn local_dim(&self) -> usize {
        self.local.len()
    }

    pub fn beta_dim(&self) -> usize {
        RIGID_DIM + 2 * self.local.len()
    }

    pub fn local_dictionary(&self) -> &KernelDictionary {
        &self.local
    }

    /// Identity deformation: no rotation, unit ratio, zero shifts and field.
    pub fn identity_beta(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.beta_dim());
        b[1] = 1.0;
        b
    }

    /// `Z(u, δ) = Σ_k δ_k ψ_k(u)`
    pub fn local_field(&self, delta: &[f64], u: &[f64]) -> [f64; 2] {
        let mut out = [0.0, 0.0];
        for k in 0..self.local.len() {
            let w = self.local.eval(k, u);
            out[0] += delta[2 * k] * w;
            out[1] += delta[2 * k + 1] * w;
        }
        out
    }

    pub fn deform(&self, beta: &[f64], u: &[f64]) -> [f64; 2] {
        let a = rigid_transform(&beta[..RIGID_DIM], u);
        let z = self.local_field(&beta[RIGID_DIM..], u);
        [a[0] + z[0], a[1] + z[1]]
    }
}

#[derive(Debug, Clone)]
pub enum Warp {
    /// `D(u, β) = u`; `β` is carried but inert.
    Identity { beta_dim: usize },
    Curve(CurveWarpModel),
    Image(ImageDeformModel),
}

impl Warp {
    pub fn beta_dim(&self) -> usize {
        match self {
            Warp::Identity { beta_dim } => *beta_dim,
            Warp::Curve(m) => m.beta_dim(),
            Warp::Image(m) => m.beta_dim(),
        }
    }

    /// Deformed coordinates of every grid point, flattened like the grid.
    pub fn deform_grid(&self, beta: &[f64], grid: &DesignGrid) -> Result<Vec<f64>> {
        check_dim("beta", self.beta_dim(), beta.len())?;
        match self {
            Warp::Identity { .. } => Ok(grid.coords().to_vec()),
            Warp::Curve(m) => {
                check_dim("curve grid dimension", 1, grid.dim())?;
                let profile = m.profile(beta)?;
                Ok(grid.coords().iter().map(|&u| profile.warp(u)).collect())
            }
            Warp::Image(m) => {
                check_dim("image grid dimension", 2, grid.dim())?;
                let mut out = Vec::with_capacity(grid.coords().len());
                for s in 0..grid.len() {
                    out.extend_from_slice(&m.deform(beta, grid.point(s)));
                }
                Ok(out)
            }
        }
    }
}

/// Template dictionary, deformation map and design grid.
#[derive(Debug, Clone)]
pub struct DeformationModel {
    pub templates: KernelDictionary,
    pub warp: Warp,
    pub grid: DesignGrid,
}

impl DeformationModel {
    pub fn new(templates: KernelDictionary, warp: Warp, grid: DesignGrid) -> Result<Self> {
        check_dim("template dictionary dimension", grid.dim(), templates.dim())?;
        let want = match &warp {
            Warp::Identity { .. } => grid.dim(),
            Warp::Curve(_) => 1,
            Warp::Image(_) => 2,
        };
        check_dim("grid dimension for this warp", want, grid.dim())?;
        Ok(Self {
            templates,
            warp,
            grid,
        })
    }

    pub fn num_basis(&self) -> usize {
        self.templates.len()
    }

    pub fn beta_dim(&self) -> usize {
        self.warp.beta_dim()
    }

    pub fn grid_len(&self) -> usize {
        self.grid.len()
    }

    /// `Φ_β`, an `|Ω| × m` matrix.
    pub fn design_matrix(&self, beta: &[f64]) -> Result<DMatrix<f64>> {
        let points = self.warp.deform_grid(beta, &self.grid)?;
        Ok(design_matrix_at(&self.templates, &points, self.grid.len()))
    }

    /// `β = 0` for warps and the identity map for images.
    pub fn reference_beta(&self) -> DVector<f64> {
        match &self.warp {
            Warp::Image(m) => m.identity_beta(),
            w => DVector::zeros(w.beta_dim()),
        }
    }

    /// `Φ` at [`reference_beta`](Self::reference_beta).
    pub fn reference_design_matrix(&self) -> Result<DMatrix<f64>> {
        self.design_matrix(self.reference_beta().as_slice())
    }

    /// Design matrix at the undeformed grid.
    pub fn base_design_matrix(&self) -> DMatrix<f64> {
        design_matrix_at(&self.templates, self.grid.coords(), self.grid.len())
    }
}

/// Evaluates every dictionary kernel at `count` points stored flat in `points`.
pub fn design_matrix_at(dict: &KernelDictionary, points: &[f64], count: usize) -> DMatrix<f64> {
    let dim = dict.dim();
    let m = dict.len();
    let mut phi = DMatrix::zeros(count, m);
    for l in 0..m {
        let center = dict.center(l);
        let bw = dict.bandwidth(l);
        let col = phi.column_mut(l);
        for (s, out) in col.into_iter().enumerate() {
            *out = gaussian_kernel(center, bw, &points[s * dim..(s + 1) * dim]);
        }
    }
    phi
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_warp(beta_dim: usize, nodes: usize) -> CurveWarpModel {
        CurveWarpModel::regular((2.0, 18.0), (0.0, 20.0), beta_dim, 1.0, nodes).unwrap()
    }

    #[test]
    fn kernel_at_center_and_one_bandwidth() {
        assert_eq!(gaussian_kernel(&[0.3, -0.2], 0.7, &[0.3, -0.2]), 1.0);
        let v = gaussian_kernel(&[1.0], 4.0, &[3.0]);
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn nearest_point_rule_hits_epsilon() {
        let grid = DesignGrid::line(vec![2.0, 2.7, 4.1, 6.0, 9.5, 13.0, 18.0]).unwrap();
        let dict = KernelDictionary::nearest_point_line(2.5, 17.5, 5, &grid, 0.1).unwrap();
        for k in 0..dict.len() {
            let r = dict.center(k)[0];
            let nearest = (0..grid.len())
                .map(|s| grid.point(s)[0])
                .min_by(|a, b| (a - r).abs().total_cmp(&(b - r).abs()))
                .unwrap();
            assert!((dict.eval(k, &[nearest]) - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_beta_warp_is_affine() {
        let m = default_warp(20, DEFAULT_QUADRATURE_NODES);
        let beta = vec![0.0; 20];
        assert!((m.warp(&beta, 10.0).unwrap() - 10.0).abs() < 1e-12);
        for &u in &[2.0, 3.3, 7.77, 18.0] {
            let want = 2.0 + 16.0 * u / 20.0;
            assert!((m.warp(&beta, u).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_profile_boundaries() {
        let m = default_warp(5, DEFAULT_QUADRATURE_NODES);
        let p = m.profile(&[0.4, -1.2, 0.8, 2.0, -0.3]).unwrap();
        assert_eq!(p.normalized(0.0), 0.0);
        assert!((p.normalized(20.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn quadrature_refinement_is_stable() {
        let beta = [0.9, -1.4, 0.6];
        let coarse = default_warp(3, 512);
        let fine = default_warp(3, 4096);
        for i in 0..=32 {
            let u = 2.0 + 16.0 * i as f64 / 32.0;
            let d = (coarse.warp(&beta, u).unwrap() - fine.warp(&beta, u).unwrap()).abs();
            assert!(d < 1e-6, "u={u} diff={d}");
        }
    }

    #[test]
    fn huge_exponent_is_reported() {
        let m = default_warp(3, 64);
        match m.profile(&[900.0, 0.0, 0.0]) {
            Err(Error::Quadrature { exponent }) => assert!(exponent > 700.0),
            other => panic!("expected quadrature error, got {other:?}"),
        }
    }

    #[test]
    fn rigid_examples() {
        let id = [0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(rigid_transform(&id, &[0.3, -0.7]), [0.3, -0.7]);
        let quarter = [std::f64::consts::FRAC_PI_2, 1.0, 0.0, 0.0, 0.0, 0.0];
        let r = rigid_transform(&quarter, &[1.0, 0.0]);
        assert!(r[0].abs() < 1e-15 && (r[1] - 1.0).abs() < 1e-15);
        let scaled = [0.0, 2.0, 0.0, 0.0, 0.1, 0.0];
        let r = rigid_transform(&scaled, &[0.2, 0.3]);
        assert!((r[0] - 0.5).abs() < 1e-15 && (r[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn local_field_matches_naive_sum() {
        let model = ImageDeformModel::regular(6, 0.16).unwrap();
        assert_eq!(model.beta_dim(), 78);
        let delta: Vec<f64> = (0..72).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.01).collect();
        assert_eq!(model.local_field(&vec![0.0; 72], &[0.1, 0.2]), [0.0, 0.0]);
        let pts = [[0.1, -0.3], [0.45, 0.45], [-0.9, 0.2], [0.0, 0.0], [0.33, -0.61]];
        for u in pts {
            let got = model.local_field(&delta, &u);
            let mut want = [0.0, 0.0];
            let ticks = linspace(-0.5, 0.5, 6);
            let mut k = 0;
            for &qy in &ticks {
                for &qx in &ticks {
                    let w = (-((u[0] - qx).powi(2) + (u[1] - qy).powi(2)) / 0.16).exp();
                    want[0] += delta[2 * k] * w;
                    want[1] += delta[2 * k + 1] * w;
                    k += 1;
                }
            }
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn image_deform_decomposes() {
        let model = ImageDeformModel::regular(3, 0.16).unwrap();
        let mut beta = model.identity_beta();
        assert_eq!(model.deform(beta.as_slice(), &[0.2, -0.4]), [0.2, -0.4]);
        beta[4] = 0.3;
        let r = model.deform(beta.as_slice(), &[0.2, -0.4]);
        assert!((r[0] - 0.5).abs() < 1e-15 && (r[1] + 0.4).abs() < 1e-15);
        let b: Vec<f64> = (0..model.beta_dim()).map(|i| 0.05 * i as f64).collect();
        let u = [0.1, 0.7];
        let a = rigid_transform(&b[..6], &u);
        let z = model.local_field(&b[6..], &u);
        assert_eq!(model.deform(&b, &u), [a[0] + z[0], a[1] + z[1]]);
    }

    #[test]
    fn design_matrix_shape_and_unit_entry() {
        let grid = DesignGrid::regular_line(2.0, 18.0, 31).unwrap();
        let dict = KernelDictionary::regular_line(2.0, 18.0, 35, 0.2).unwrap();
        let warp = Warp::Curve(default_warp(20, 256));
        let model = DeformationModel::new(dict.clone(), warp, grid.clone()).unwrap();
        let phi = model.design_matrix(&[0.0; 20]).unwrap();
        assert_eq!(phi.shape(), (31, 35));
        assert!(phi.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let ident = DeformationModel::new(dict, Warp::Identity { beta_dim: 1 }, grid).unwrap();
        let phi = ident.design_matrix(&[0.0]).unwrap();
        // grid point 0 and center 0 are both at u = 2
        assert_eq!(phi[(0, 0)], 1.0);
    }

    #[test]
    fn far_rows_decay() {
        let dict = KernelDictionary::regular_line(0.0, 1.0, 3, 0.01).unwrap();
        let phi = design_matrix_at(&dict, &[1.5 + 0.0001], 1);
        // 1.5 is at least 0.5 = 5 bandwidths (sd 0.1) from every center
        assert!(phi.iter().all(|&v| v < (-25.0f64).exp()));
    }

    #[test]
    fn image_columns_peak_at_nearest_pixel() {
        let grid = DesignGrid::pixel_grid(8).unwrap();
        let dict = KernelDictionary::regular_square(-1.0, 1.0, 5, 0.04).unwrap();
        let warp = Warp::Image(ImageDeformModel::regular(3, 0.16).unwrap());
        let model = DeformationModel::new(dict.clone(), warp, grid.clone()).unwrap();
        let beta = match &model.warp {
            Warp::Image(m) => m.identity_beta(),
            _ => unreachable!(),
        };
        let phi = model.design_matrix(beta.as_slice()).unwrap();
        for l in 0..dict.len() {
            let c = dict.center(l);
            let nearest = (0..grid.len())
                .min_by(|&a, &b| {
                    let da = gaussian_kernel(c, 1.0, grid.point(a));
                    let db = gaussian_kernel(c, 1.0, grid.point(b));
                    db.total_cmp(&da)
                })
                .unwrap();
            let col = phi.column(l);
            let best = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(col[nearest], best);
        }
    }

    #[test]
    fn grid_rejects_duplicates() {
        assert!(DesignGrid::line(vec![1.0, 2.0, 1.0]).is_err());
        assert!(DesignGrid::line(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn warp_is_strictly_increasing(
            beta in proptest::collection::vec(-2.0f64..2.0, 6),
            a in 2.0f64..18.0,
            b in 2.0f64..18.0,
        ) {
            prop_assume!((a - b).abs() > 1e-9);
            let m = default_warp(6, 256);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let p = m.profile(&beta).unwrap();
            prop_assert!(p.warp(lo) < p.warp(hi));
            prop_assert!(p.warp(lo) >= 2.0 && p.warp(hi) <= 18.0);
        }

        #[test]
        fn identity_image_deform_is_exact(x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let model = ImageDeformModel::regular(6, 0.16).unwrap();
            let beta = model.identity_beta();
            prop_assert_eq!(model.deform(beta.as_slice(), &[x, y]), [x, y]);
        }
    }
}
