//! Superquadric primitives and robust fitting.
//!
//! A superquadric with exponents `(ε₁, ε₂)` and semi-axes `(a_x, a_y, a_z)`
//! is the level set `F = 1` of
//!
//! ```text
//! F(x, y, z) = ((x/a_x)^(2/ε₂) + (y/a_y)^(2/ε₂))^(ε₂/ε₁) + (z/a_z)^(2/ε₁)
//! ```
//!
//! Surface integrals and sampling use a cube-face parameterization: a point
//! `q` on the unit cube (in axis-normalized coordinates) is scaled along its
//! ray until it hits the surface. The resulting map is Lipschitz for every
//! exponent in `(0, 2]`, so its area element stays bounded even when the
//! classical angular parameterization blows up near the poles.

mod cloud;
mod ems;

pub use cloud::PointCloud;
pub use ems::{e_step, ems_fit, EStep, EmsConfig, FitResult};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Five shape parameters of a superquadric centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Superquadric {
    pub eps1: f64,
    pub eps2: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

// 3-point Gauss-Legendre on [0, 1].
const GL3_NODES: [f64; 3] = [0.112_701_665_379_258_3, 0.5, 0.887_298_334_620_741_7];
const GL3_WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

impl Superquadric {
    pub fn new(eps1: f64, eps2: f64, ax: f64, ay: f64, az: f64) -> Result<Self> {
        let sq = Self {
            eps1,
            eps2,
            ax,
            ay,
            az,
        };
        sq.validate()?;
        Ok(sq)
    }

    pub fn sphere(radius: f64) -> Self {
        Self {
            eps1: 1.0,
            eps2: 1.0,
            ax: radius,
            ay: radius,
            az: radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, e) in [("eps1", self.eps1), ("eps2", self.eps2)] {
            if !(e > 0.0 && e <= 2.0) {
                return Err(Error::InvalidParameter(format!("{name} = {e} outside (0, 2]")));
            }
        }
        for (name, a) in [("ax", self.ax), ("ay", self.ay), ("az", self.az)] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {a} must be positive")));
            }
        }
        Ok(())
    }

    pub fn semi_axes(&self) -> Vector3<f64> {
        Vector3::new(self.ax, self.ay, self.az)
    }

    /// `[ε₁, ε₂, a_x, a_y, a_z]`, the layout used by the cross-modal GP.
    pub fn to_array(&self) -> [f64; 5] {
        [self.eps1, self.eps2, self.ax, self.ay, self.az]
    }

    pub fn from_array(v: [f64; 5]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            ax: self.ax * k,
            ay: self.ay * k,
            az: self.az * k,
            ..*self
        }
    }

    /// The same solid described with the first two axes exchanged; it is
    /// the identical shape rotated by a quarter turn about z.
    pub fn swapped_xy(&self) -> Self {
        Self {
            ax: self.ay,
            ay: self.ax,
            ..*self
        }
    }

    /// Representative with `a_x ≥ a_y`. Returns the shape and whether the
    /// axes were exchanged.
    pub fn canonical(&self) -> (Self, bool) {
        if self.ay > self.ax {
            (self.swapped_xy(), true)
        } else {
            (*self, false)
        }
    }

    /// Evaluates the implicit function at a body-frame point.
    pub fn implicit_value(&self, p: &Vector3<f64>) -> Result<f64> {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("query point"));
        }
        Ok(self.implicit_unchecked(p))
    }

    pub(crate) fn implicit_unchecked(&self, p: &Vector3<f64>) -> f64 {
        let q = self.normalize(p);
        let s = q.amax();
        if s == 0.0 {
            return 0.0;
        }
        self.unit_g(&(q / s)) * s.powf(2.0 / self.eps1)
    }

    fn normalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(p.x / self.ax, p.y / self.ay, p.z / self.az)
    }

    /// Implicit function in axis-normalized coordinates with `|q|∞ ≤ 1`.
    fn unit_g(&self, q: &Vector3<f64>) -> f64 {
        let a = q.x.abs().powf(2.0 / self.eps2) + q.y.abs().powf(2.0 / self.eps2);
        a.powf(self.eps2 / self.eps1) + q.z.abs().powf(2.0 / self.eps1)
    }

    /// Gradient of the normalized implicit function with respect to `q`
    /// (valid for `|q|∞ ≤ 1`).
    fn unit_g_grad(&self, q: &Vector3<f64>) -> Vector3<f64> {
        let (e1, e2) = (self.eps1, self.eps2);
        let a = q.x.abs().powf(2.0 / e2) + q.y.abs().powf(2.0 / e2);
        let planar = |c: f64| -> f64 {
            if c == 0.0 || a == 0.0 {
                return 0.0;
            }
            let mag = ((e2 / e1 - 1.0) * a.ln() + (2.0 / e2 - 1.0) * c.abs().ln()).exp();
            (2.0 / e1) * mag * c.signum()
        };
        let dz = if q.z == 0.0 {
            0.0
        } else {
            (2.0 / e1) * q.z.abs().powf(2.0 / e1 - 1.0) * q.z.signum()
        };
        Vector3::new(planar(q.x), planar(q.y), dz)
    }

    /// Direction of the implicit-function gradient at `p` (body frame). The
    /// gradient direction is constant along rays, so this is well defined
    /// for any non-zero point.
    fn gradient_direction(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let q = self.normalize(p);
        let s = q.amax();
        if s == 0.0 {
            return None;
        }
        let g = self.unit_g_grad(&(q / s));
        let g = Vector3::new(g.x / self.ax, g.y / self.ay, g.z / self.az);
        let n = g.norm();
        if n > 0.0 && n.is_finite() {
            Some(g / n)
        } else {
            None
        }
    }

    /// Scales `p` along its ray from the origin onto the surface.
    pub fn radial_projection(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let q = self.normalize(p);
        let s = q.amax();
        if s == 0.0 || !s.is_finite() {
            return None;
        }
        let scale = self.unit_g(&(q / s)).powf(-self.eps1 / 2.0) / s;
        Some(p * scale)
    }

    /// Distance from `p` to the surface measured along the ray through the
    /// origin. An upper bound on the Euclidean distance, exact on spheres.
    pub fn radial_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = self.normalize(p);
        let s = q.amax();
        if s == 0.0 {
            return self.ax.min(self.ay).min(self.az);
        }
        let scale = self.unit_g(&(q / s)).powf(-self.eps1 / 2.0) / s;
        p.norm() * (1.0 - scale).abs()
    }

    /// Unit outward normal at a surface point.
    pub fn outward_normal(&self, surface_point: &Vector3<f64>) -> Result<Vector3<f64>> {
        if !surface_point.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("surface point"));
        }
        let on_surface = self
            .radial_projection(surface_point)
            .map(|r| (r - surface_point).norm() <= 1e-4)
            .unwrap_or(false);
        if !on_surface {
            return Err(Error::InvalidParameter(
                "normal requested for a point off the surface".into(),
            ));
        }
        self.gradient_direction(surface_point)
            .ok_or(Error::DegeneratePoint((*surface_point).into()))
    }

    /// Closest point on the surface to a body-frame point.
    pub fn closest_surface_point(&self, p: &Vector3<f64>) -> Result<Vector3<f64>> {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("query point"));
        }
        Ok(self.closest_point_hinted(p, None))
    }

    /// Closest-point search seeded by ray scaling, axis-parallel projections
    /// and an optional previous answer, refined by tangent-plane steps with
    /// ray re-projection and backtracking.
    pub(crate) fn closest_point_hinted(
        &self,
        p: &Vector3<f64>,
        hint: Option<&Vector3<f64>>,
    ) -> Vector3<f64> {
        let mut best: Option<(Vector3<f64>, f64)> = None;
        let mut consider = |c: Vector3<f64>| {
            let d2 = (p - c).norm_squared();
            if d2.is_finite() && best.is_none_or(|(_, b)| d2 < b) {
                best = Some((c, d2));
            }
        };
        if let Some(r) = self.radial_projection(p) {
            consider(r);
        }
        for c in self.axis_projections(p) {
            consider(c);
        }
        if let Some(h) = hint.and_then(|h| self.radial_projection(h)) {
            consider(h);
        }
        let (mut s, mut d2) = best.unwrap_or((Vector3::new(0.0, 0.0, self.az), self.az * self.az));
        let tiny = 1e-14 * self.ax.max(self.ay).max(self.az).powi(2);

        for _ in 0..60 {
            let Some(n) = self.gradient_direction(&s) else {
                break;
            };
            let r = p - s;
            let t = r - n * r.dot(&n);
            if t.norm_squared() < 1e-24 {
                break;
            }
            let mut step = 1.0;
            let mut gain = 0.0;
            for _ in 0..30 {
                if let Some(c) = self.radial_projection(&(s + t * step)) {
                    let cd2 = (p - c).norm_squared();
                    if cd2 < d2 {
                        gain = d2 - cd2;
                        s = c;
                        d2 = cd2;
                        break;
                    }
                }
                step *= 0.5;
            }
            if gain <= tiny {
                break;
            }
        }
        s
    }

    /// Points reached by moving `p` parallel to one coordinate axis until
    /// it meets the surface (when such a point exists).
    fn axis_projections(&self, p: &Vector3<f64>) -> Vec<Vector3<f64>> {
        let (e1, e2) = (self.eps1, self.eps2);
        let q = self.normalize(p);
        let mut out = Vec::with_capacity(3);
        let sign = |c: f64| if c < 0.0 { -1.0 } else { 1.0 };

        let planar = q.x.abs().powf(2.0 / e2) + q.y.abs().powf(2.0 / e2);
        let rest = 1.0 - planar.powf(e2 / e1);
        if rest > 0.0 && rest.is_finite() {
            let z = sign(q.z) * rest.powf(e1 / 2.0);
            out.push(Vector3::new(p.x, p.y, z * self.az));
        }
        let zterm = 1.0 - q.z.abs().powf(2.0 / e1);
        if zterm > 0.0 && zterm.is_finite() {
            let budget = zterm.powf(e1 / e2);
            let rx = budget - q.y.abs().powf(2.0 / e2);
            if rx > 0.0 {
                out.push(Vector3::new(sign(q.x) * rx.powf(e2 / 2.0) * self.ax, p.y, p.z));
            }
            let ry = budget - q.x.abs().powf(2.0 / e2);
            if ry > 0.0 {
                out.push(Vector3::new(p.x, sign(q.y) * ry.powf(e2 / 2.0) * self.ay, p.z));
            }
        }
        out
    }

    /// Surface point, tangent derivatives and position for the quarter face
    /// `axis` at normalized coordinates `(u, v) ∈ [0, 1]²`.
    fn face_map(&self, axis: usize, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let (iu, iv) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut q = Vector3::zeros();
        q[axis] = 1.0;
        q[iu] = u;
        q[iv] = v;
        let g = self.unit_g(&q);
        let rho = g.powf(-self.eps1 / 2.0);
        let dg = self.unit_g_grad(&q);
        let drho = -(self.eps1 / 2.0) * g.powf(-self.eps1 / 2.0 - 1.0);
        let a = self.semi_axes();
        let mut du = q * (drho * dg[iu]);
        du[iu] += rho;
        let mut dv = q * (drho * dg[iv]);
        dv[iv] += rho;
        (
            (q * rho).component_mul(&a),
            du.component_mul(&a),
            dv.component_mul(&a),
        )
    }

    fn area_element(&self, axis: usize, u: f64, v: f64) -> f64 {
        let (_, du, dv) = self.face_map(axis, u, v);
        du.cross(&dv).norm()
    }

    /// Gauss-Legendre estimate of `f` over a square cell on one quarter face.
    fn cell_integral<F: Fn(usize, f64, f64) -> f64>(
        f: &F,
        axis: usize,
        u0: f64,
        v0: f64,
        h: f64,
    ) -> f64 {
        let mut acc = 0.0;
        for (i, &ni) in GL3_NODES.iter().enumerate() {
            for (j, &nj) in GL3_NODES.iter().enumerate() {
                acc += GL3_WEIGHTS[i] * GL3_WEIGHTS[j] * f(axis, u0 + ni * h, v0 + nj * h);
            }
        }
        acc * h * h
    }

    fn adaptive_cell<F: Fn(usize, f64, f64) -> f64>(
        f: &F,
        axis: usize,
        u0: f64,
        v0: f64,
        h: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let hh = h / 2.0;
        let parts = [
            Self::cell_integral(f, axis, u0, v0, hh),
            Self::cell_integral(f, axis, u0 + hh, v0, hh),
            Self::cell_integral(f, axis, u0, v0 + hh, hh),
            Self::cell_integral(f, axis, u0 + hh, v0 + hh, hh),
        ];
        let sum: f64 = parts.iter().sum();
        if depth == 0 || (sum - whole).abs() <= tol {
            return sum;
        }
        let offsets = [(0.0, 0.0), (hh, 0.0), (0.0, hh), (hh, hh)];
        parts
            .iter()
            .zip(offsets)
            .map(|(&part, (du, dv))| {
                Self::adaptive_cell(f, axis, u0 + du, v0 + dv, hh, part, tol / 4.0, depth - 1)
            })
            .sum()
    }

    /// Integrates `f` over the positive-octant quarter faces and multiplies
    /// by the eight-fold symmetry.
    fn integrate_octant<F: Fn(usize, f64, f64) -> f64>(&self, f: F, rel_tol: f64, grid: usize, depth: u32) -> f64 {
        let h = 1.0 / grid as f64;
        let mut coarse = Vec::with_capacity(3 * grid * grid);
        for axis in 0..3 {
            for i in 0..grid {
                for j in 0..grid {
                    let (u0, v0) = (i as f64 * h, j as f64 * h);
                    coarse.push((axis, u0, v0, Self::cell_integral(&f, axis, u0, v0, h)));
                }
            }
        }
        let rough: f64 = coarse.iter().map(|c| c.3).sum();
        if depth == 0 {
            return 8.0 * rough;
        }
        let tol = rel_tol * rough.abs() / coarse.len() as f64;
        let total: f64 = coarse
            .iter()
            .map(|&(axis, u0, v0, whole)| Self::adaptive_cell(&f, axis, u0, v0, h, whole, tol, depth))
            .sum();
        8.0 * total
    }

    /// Surface area by adaptive quadrature over the cube-face
    /// parameterization.
    pub fn surface_area(&self) -> f64 {
        self.integrate_octant(|axis, u, v| self.area_element(axis, u, v), 1e-6, 4, 8)
    }

    /// Fixed-grid area estimate used inside the fitting loop, where it is
    /// evaluated many times per iteration.
    pub(crate) fn surface_area_fast(&self) -> f64 {
        self.integrate_octant(|axis, u, v| self.area_element(axis, u, v), 0.0, 4, 0)
    }

    /// Enclosed volume via the divergence theorem, `V = ⅓∮ p·n dA`.
    pub fn volume(&self) -> f64 {
        self.integrate_octant(
            |axis, u, v| {
                let (p, du, dv) = self.face_map(axis, u, v);
                p.dot(&du.cross(&dv)).abs() / 3.0
            },
            1e-6,
            4,
            8,
        )
    }

    /// Draws `count` points uniformly (per unit area) from the surface.
    pub fn sample_surface(&self, count: usize, rng_seed: u64) -> Result<PointCloud> {
        self.validate()?;
        if count == 0 {
            return Err(Error::InvalidParameter("sample count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        PointCloud::new(self.sample_surface_with(count, &mut rng))
    }

    /// Rejection sampling on the six cube faces: a face and a point on it are
    /// proposed uniformly and accepted with probability proportional to the
    /// local area element.
    pub fn sample_surface_with<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vector3<f64>> {
        const GRID: usize = 48;
        let mut envelope = 0.0f64;
        for axis in 0..3 {
            for i in 0..=GRID {
                for j in 0..=GRID {
                    let (u, v) = (i as f64 / GRID as f64, j as f64 / GRID as f64);
                    envelope = envelope.max(self.area_element(axis, u, v));
                }
            }
        }
        envelope *= 1.25;

        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let face: usize = rng.random_range(0..6);
            let (axis, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
            let u: f64 = rng.random_range(-1.0..=1.0);
            let v: f64 = rng.random_range(-1.0..=1.0);
            let j = self.area_element(axis, u.abs(), v.abs());
            if rng.random::<f64>() * envelope >= j {
                continue;
            }
            let (p, _, _) = self.face_map(axis, u.abs(), v.abs());
            let (iu, iv) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let mut p = p;
            p[axis] *= sign;
            p[iu] *= u.signum();
            p[iv] *= v.signum();
            out.push(p);
        }
        out
    }

    /// Mid-height cross-section: the planar superellipse
    /// `|x/a_x|^(2/ε₂) + |y/a_y|^(2/ε₂) = 1`.
    pub fn silhouette(&self) -> Superellipse {
        Superellipse {
            eps: self.eps2,
            ax: self.ax,
            ay: self.ay,
        }
    }
}

/// Planar superellipse used for push contact geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Superellipse {
    pub eps: f64,
    pub ax: f64,
    pub ay: f64,
}

impl Superellipse {
    /// Boundary point at parameter `t ∈ [0, 2π)`.
    pub fn point(&self, t: f64) -> Vector2<f64> {
        let (s, c) = t.sin_cos();
        Vector2::new(
            self.ax * c.signum() * c.abs().powf(self.eps),
            self.ay * s.signum() * s.abs().powf(self.eps),
        )
    }

    pub fn implicit(&self, p: &Vector2<f64>) -> f64 {
        (p.x / self.ax).abs().powf(2.0 / self.eps) + (p.y / self.ay).abs().powf(2.0 / self.eps)
    }

    /// Unit outward normal at a boundary point.
    pub fn normal(&self, p: &Vector2<f64>) -> Option<Vector2<f64>> {
        let e = self.eps;
        let comp = |c: f64, a: f64| {
            let q = c / a;
            if q == 0.0 {
                0.0
            } else {
                q.abs().powf(2.0 / e - 1.0) * q.signum() / a
            }
        };
        let g = Vector2::new(comp(p.x, self.ax), comp(p.y, self.ay));
        let n = g.norm();
        (n > 0.0 && n.is_finite()).then(|| g / n)
    }

    /// Scales `p` along its ray onto the boundary.
    pub fn radial_projection(&self, p: &Vector2<f64>) -> Option<Vector2<f64>> {
        let s = (p.x / self.ax).abs().max((p.y / self.ay).abs());
        if s == 0.0 || !s.is_finite() {
            return None;
        }
        let g = self.implicit(&(p / s));
        Some(p * (g.powf(-self.eps / 2.0) / s))
    }

    /// Closest boundary point: dense parameter scan followed by golden
    /// section refinement of the bracketing interval.
    pub fn closest_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        const SCAN: usize = 256;
        let dist = |t: f64| (self.point(t) - p).norm_squared();
        let step = std::f64::consts::TAU / SCAN as f64;
        let (mut best_t, mut best_d) = (0.0, f64::INFINITY);
        for k in 0..SCAN {
            let t = k as f64 * step;
            let d = dist(t);
            if d < best_d {
                best_d = d;
                best_t = t;
            }
        }
        let (mut lo, mut hi) = (best_t - step, best_t + step);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = hi - phi * (hi - lo);
        let mut x2 = lo + phi * (hi - lo);
        let (mut f1, mut f2) = (dist(x1), dist(x2));
        for _ in 0..60 {
            if f1 < f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - phi * (hi - lo);
                f1 = dist(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + phi * (hi - lo);
                f2 = dist(x2);
            }
        }
        self.point(0.5 * (lo + hi))
    }

    /// Perimeter by arc-length summation over a fine parameter grid.
    pub fn perimeter(&self) -> f64 {
        let n = 4096;
        let mut prev = self.point(0.0);
        let mut acc = 0.0;
        for k in 1..=n {
            let p = self.point(k as f64 / n as f64 * std::f64::consts::TAU);
            acc += (p - prev).norm();
            prev = p;
        }
        acc
    }

    /// Mean distance from the centre to the boundary, averaged over arc
    /// length.
    pub fn mean_radius(&self) -> f64 {
        let n = 4096;
        let mut prev = self.point(0.0);
        let (mut acc, mut len) = (0.0, 0.0);
        for k in 1..=n {
            let p = self.point(k as f64 / n as f64 * std::f64::consts::TAU);
            let dl = (p - prev).norm();
            acc += 0.5 * (p.norm() + prev.norm()) * dl;
            len += dl;
            prev = p;
        }
        acc / len
    }
}
