//! Lorentz-model primitives and exterior angles.
//!
//! Points on the hyperboloid of curvature `c` are parametrized by their space
//! component; the time component is always derived from it as
//! `sqrt(1/c + |space|^2)`. Embeddings live in the tangent space at the
//! origin and are lifted with the exponential map.
//!
//! Exterior angles are the only comparison used between embeddings. The
//! hyperbolic form is singular at the origin and when the two points
//! coincide, so every `acos` argument is clamped to `[-1, 1]` and square
//! roots are floored at [`EPS`].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor used under square roots and for degeneracy checks.
pub const EPS: f64 = 1e-8;

/// Tangent norms are capped at `MAX_TANGENT_NORM_SCALED / sqrt(c)` before lifting.
pub const MAX_TANGENT_NORM_SCALED: f64 = 10.0;

/// Curvature magnitude of the hyperbolic space.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::invalid(format!(
                "curvature must be positive and finite, got {c}"
            )));
        }
        Ok(Curvature(c))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// Largest tangent-vector norm passed to the exponential map.
    #[inline]
    pub fn max_tangent_norm(self) -> f64 {
        MAX_TANGENT_NORM_SCALED / self.0.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature(1.0)
    }
}

/// Which space embeddings are compared in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Hyperbolic,
    Euclidean,
}

impl SpaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SpaceKind::Hyperbolic => "hyperbolic",
            SpaceKind::Euclidean => "euclidean",
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hyp" | "hyperbolic" | "lorentz" => Ok(SpaceKind::Hyperbolic),
            "euc" | "euclidean" => Ok(SpaceKind::Euclidean),
            other => Err(Error::invalid(format!("unknown space kind {other:?}"))),
        }
    }
}

/// A point on the hyperboloid, stored as space component plus derived time.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperbolicPoint {
    space: Vec<f64>,
    time: f64,
}

impl HyperbolicPoint {
    /// Builds the on-manifold point with the given space component.
    pub fn from_space(space: Vec<f64>, c: Curvature) -> Result<Self> {
        let time = time_component(&space, c)?;
        Ok(HyperbolicPoint { space, time })
    }

    pub fn origin(dim: usize, c: Curvature) -> Self {
        HyperbolicPoint {
            space: vec![0.0; dim],
            time: 1.0 / c.value().sqrt(),
        }
    }

    pub fn space(&self) -> &[f64] {
        &self.space
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dim(&self) -> usize {
        self.space.len()
    }
}

/// Entailment angles of a parent/child pair; both are maximized during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnglePair {
    /// `pi - ext(parent, child)`
    pub beta1: f64,
    /// `ext(child, parent)`
    pub alpha2: f64,
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} has non-finite entries")))
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Time component of the on-manifold point with the given space component.
pub fn time_component(space: &[f64], c: Curvature) -> Result<f64> {
    check_finite(space, "space component")?;
    Ok((1.0 / c.value() + dot(space, space)).sqrt())
}

/// Lorentzian inner product `-x0*y0 + sum(xi*yi)`.
pub fn lorentz_inner(x: &HyperbolicPoint, y: &HyperbolicPoint) -> Result<f64> {
    check_dims(&x.space, &y.space)?;
    Ok(-x.time * y.time + dot(&x.space, &y.space))
}

/// `sinh(t)/t`, continuous at zero.
fn sinhc(t: f64) -> f64 {
    if t.abs() < 1e-4 {
        1.0 + t * t / 6.0
    } else {
        t.sinh() / t
    }
}

/// Exponential map at the origin, with the tangent norm capped at `10/sqrt(c)`.
pub fn exp_map_origin(v: &[f64], c: Curvature) -> Result<HyperbolicPoint> {
    check_finite(v, "tangent vector")?;
    let lift = ExpLift::new(v, c);
    if lift.capped {
        log::debug!(
            "tangent norm {:.4} capped at {:.4} before exponential map",
            norm(v),
            c.max_tangent_norm()
        );
    }
    Ok(lift.point)
}

/// Exponential-map lift of one tangent vector, kept around for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ExpLift {
    pub point: HyperbolicPoint,
    /// Tangent vector after norm capping.
    effective: Vec<f64>,
    raw_norm: f64,
    capped: bool,
}

impl ExpLift {
    pub fn new(v: &[f64], c: Curvature) -> Self {
        let raw_norm = norm(v);
        let cap = c.max_tangent_norm();
        let capped = raw_norm > cap;
        let effective: Vec<f64> = if capped {
            v.iter().map(|x| x * cap / raw_norm).collect()
        } else {
            v.to_vec()
        };
        let s = c.value().sqrt();
        let r = if capped { cap } else { raw_norm };
        let t = s * r;
        // space = sinh(s r) / (s r) * u
        let scale = sinhc(t);
        let space: Vec<f64> = effective.iter().map(|x| x * scale).collect();
        let time = (1.0 / c.value() + dot(&space, &space)).sqrt();
        ExpLift {
            point: HyperbolicPoint { space, time },
            effective,
            raw_norm,
            capped,
        }
    }

    /// Pulls a gradient with respect to the space component back to the raw
    /// tangent vector. Returns the tangent gradient and the curvature gradient.
    pub fn backprop(&self, grad_space: &[f64], c: Curvature) -> (Vec<f64>, f64) {
        let cv = c.value();
        let s = cv.sqrt();
        let u = &self.effective;
        let r = norm(u);
        let t = s * r;

        let (mut g_u, mut g_c) = if r < 1e-12 {
            (grad_space.to_vec(), 0.0)
        } else {
            let radial = dot(u, grad_space) / r;
            let phi_over_r = sinhc(t);
            let phi_r = t.cosh();
            let g_u: Vec<f64> = u
                .iter()
                .zip(grad_space)
                .map(|(ui, gi)| {
                    let uh = ui / r;
                    phi_over_r * (gi - uh * radial) + phi_r * uh * radial
                })
                .collect();
            // d/ds of sinh(s r)/s
            let phi_s = (t * t.cosh() - t.sinh()) / (s * s);
            (g_u, radial * phi_s / (2.0 * s))
        };

        if self.capped {
            let cap = c.max_tangent_norm();
            let rn = self.raw_norm;
            // effective = cap * v/|v|; only the cap depends on c
            let radial: f64 = u.iter().zip(&g_u).map(|(ui, gi)| ui / cap * gi).sum();
            g_c += radial * (-cap / (2.0 * cv));
            g_u = u
                .iter()
                .zip(&g_u)
                .map(|(ui, gi)| (cap / rn) * (gi - (ui / cap) * radial))
                .collect();
        }
        (g_u, g_c)
    }
}

/// Value and partial derivatives of one exterior angle.
#[derive(Debug, Clone)]
pub(crate) struct ExtGrad {
    pub value: f64,
    /// The acos argument reached the clamp; derivatives are zero.
    pub clamped: bool,
    /// The square-root floor was hit.
    pub floored: bool,
    pub d_x: Vec<f64>,
    pub d_y: Vec<f64>,
    pub d_c: f64,
}

impl ExtGrad {
    fn zero_grad(value: f64, dim: usize, floored: bool) -> Self {
        ExtGrad {
            value,
            clamped: true,
            floored,
            d_x: vec![0.0; dim],
            d_y: vec![0.0; dim],
            d_c: 0.0,
        }
    }
}

/// Hyperbolic exterior angle at `x` between the outward extension of the
/// origin-to-`x` geodesic and the geodesic from `x` to `y`.
pub fn exterior_angle_hyp(x: &HyperbolicPoint, y: &HyperbolicPoint, c: Curvature) -> Result<f64> {
    check_dims(&x.space, &y.space)?;
    let g = ext_hyp_grad(&x.space, &y.space, c, false)?;
    if g.floored {
        log::debug!("exterior angle: near-coincident points, sqrt floor applied");
    }
    Ok(g.value)
}

/// Hyperbolic exterior angle as a function of the two space components.
/// Derivatives are only filled in when `want_grad` is set.
pub(crate) fn ext_hyp_grad(xs: &[f64], ys: &[f64], c: Curvature, want_grad: bool) -> Result<ExtGrad> {
    let cv = c.value();
    let x_norm = norm(xs);
    if x_norm <= EPS {
        return Err(Error::DegenerateGeometry(
            "exterior angle undefined at the hyperboloid origin".into(),
        ));
    }
    let xt = (1.0 / cv + x_norm * x_norm).sqrt();
    let yt = (1.0 / cv + dot(ys, ys)).sqrt();
    let p = -xt * yt + dot(xs, ys);
    let q = cv * p;
    let disc = q * q - 1.0;
    let floored = disc <= EPS;
    let root = if floored { EPS.sqrt() } else { disc.sqrt() };

    let num = yt + xt * q;
    let den = x_norm * root;
    let arg = num / den;
    let clamped_arg = arg.clamp(-1.0, 1.0);
    let value = clamped_arg.acos();

    let dim = xs.len();
    if !want_grad {
        return Ok(ExtGrad {
            value,
            clamped: arg.abs() >= 1.0,
            floored,
            d_x: Vec::new(),
            d_y: Vec::new(),
            d_c: 0.0,
        });
    }
    if !(arg.abs() < 1.0) {
        return Ok(ExtGrad::zero_grad(value, dim, floored));
    }

    // reverse pass
    let g_arg = -1.0 / (1.0 - arg * arg).sqrt();
    let g_num = g_arg / den;
    let g_den = -g_arg * num / (den * den);

    let mut g_q = g_num * xt;
    if !floored {
        g_q += g_den * x_norm * q / root;
    }
    let mut g_xt = g_num * q;
    let mut g_yt = g_num;
    let g_xnorm = g_den * root;

    let mut g_c = g_q * p;
    let g_p = g_q * cv;
    g_xt += g_p * -yt;
    g_yt += g_p * -xt;

    let mut d_x: Vec<f64> = ys.iter().map(|v| g_p * v).collect();
    let mut d_y: Vec<f64> = xs.iter().map(|v| g_p * v).collect();
    for (dx, xi) in d_x.iter_mut().zip(xs) {
        *dx += g_xnorm * xi / x_norm + g_xt * xi / xt;
    }
    for (dy, yi) in d_y.iter_mut().zip(ys) {
        *dy += g_yt * yi / yt;
    }
    let inv_c2 = 1.0 / (2.0 * cv * cv);
    g_c -= g_xt * inv_c2 / xt + g_yt * inv_c2 / yt;

    Ok(ExtGrad {
        value,
        clamped: false,
        floored,
        d_x,
        d_y,
        d_c: g_c,
    })
}

/// Euclidean exterior angle: the angle at `x` between the ray from the
/// origin through `x` and the segment from `x` to `y`.
pub fn exterior_angle_euc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    Ok(ext_euc_grad(x, y, false)?.value)
}

pub(crate) fn ext_euc_grad(x: &[f64], y: &[f64], want_grad: bool) -> Result<ExtGrad> {
    let x_norm = norm(x);
    let diff: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    let diff_norm = norm(&diff);
    if x_norm <= EPS || diff_norm <= EPS {
        return Err(Error::DegenerateGeometry(format!(
            "euclidean exterior angle needs |x| > eps and |x - y| > eps (got {x_norm:e}, {diff_norm:e})"
        )));
    }
    let y_sq = dot(y, y);
    let arg = (y_sq - x_norm * x_norm - diff_norm * diff_norm) / (2.0 * x_norm * diff_norm);
    let value = arg.clamp(-1.0, 1.0).acos();
    let dim = x.len();
    if !want_grad {
        return Ok(ExtGrad {
            value,
            clamped: arg.abs() >= 1.0,
            floored: false,
            d_x: Vec::new(),
            d_y: Vec::new(),
            d_c: 0.0,
        });
    }
    if !(arg.abs() < 1.0) {
        return Ok(ExtGrad::zero_grad(value, dim, false));
    }
    // The argument simplifies to cos(x, y - x).
    let g_arg = -1.0 / (1.0 - arg * arg).sqrt();
    let inv = 1.0 / (x_norm * diff_norm);
    let mut d_x = Vec::with_capacity(dim);
    let mut d_y = Vec::with_capacity(dim);
    for (xi, di) in x.iter().zip(&diff) {
        let da_dx = di * inv - arg * xi / (x_norm * x_norm);
        let da_dd = xi * inv - arg * di / (diff_norm * diff_norm);
        d_x.push(g_arg * (da_dx - da_dd));
        d_y.push(g_arg * da_dd);
    }
    Ok(ExtGrad {
        value,
        clamped: false,
        floored: false,
        d_x,
        d_y,
        d_c: 0.0,
    })
}

/// Exterior angle between two embeddings given in tangent coordinates.
/// Hyperbolic embeddings are lifted with the exponential map first.
pub fn exterior_angle(x: &[f64], y: &[f64], kind: SpaceKind, c: Curvature) -> Result<f64> {
    check_dims(x, y)?;
    match kind {
        SpaceKind::Euclidean => exterior_angle_euc(x, y),
        SpaceKind::Hyperbolic => {
            let px = exp_map_origin(x, c)?;
            let py = exp_map_origin(y, c)?;
            exterior_angle_hyp(&px, &py, c)
        }
    }
}

/// `beta1 = pi - ext(parent, child)` and `alpha2 = ext(child, parent)`.
pub fn entailment_angles(
    parent: &[f64],
    child: &[f64],
    kind: SpaceKind,
    c: Curvature,
) -> Result<AnglePair> {
    let forward = exterior_angle(parent, child, kind, c)?;
    let backward = exterior_angle(child, parent, kind, c)?;
    Ok(AnglePair {
        beta1: PI - forward,
        alpha2: backward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c1() -> Curvature {
        Curvature::new(1.0).unwrap()
    }

    #[test]
    fn curvature_rejects_nonpositive() {
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(-1.0).is_err());
        assert!(Curvature::new(f64::NAN).is_err());
        assert!(Curvature::new(f64::INFINITY).is_err());
    }

    #[test]
    fn time_component_examples() {
        assert_eq!(time_component(&[0.0, 0.0], c1()).unwrap(), 1.0);
        assert_eq!(
            time_component(&[0.0, 0.0], Curvature::new(4.0).unwrap()).unwrap(),
            0.5
        );
        let t = time_component(&[3.0, 4.0], c1()).unwrap();
        assert!((t - 26f64.sqrt()).abs() < 1e-12);
        assert!((t - 5.0990195).abs() < 1e-7);
        assert!(time_component(&[f64::NAN, 0.0], c1()).is_err());
    }

    #[test]
    fn lorentz_inner_examples() {
        let o = HyperbolicPoint::origin(2, c1());
        assert_eq!(lorentz_inner(&o, &o).unwrap(), -1.0);
        let y = HyperbolicPoint::from_space(vec![1.0, 0.0], c1()).unwrap();
        assert!((y.time() - 2f64.sqrt()).abs() < 1e-15);
        let v = lorentz_inner(&o, &y).unwrap();
        assert!((v + 1.4142136).abs() < 1e-7);
        assert_eq!(v, lorentz_inner(&y, &o).unwrap());
        let z = HyperbolicPoint::from_space(vec![1.0, 0.0, 0.0], c1()).unwrap();
        assert!(matches!(
            lorentz_inner(&o, &z),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exp_map_examples() {
        let o = exp_map_origin(&[0.0, 0.0], c1()).unwrap();
        assert_eq!(o.time(), 1.0);
        assert_eq!(o.space(), &[0.0, 0.0]);

        let p = exp_map_origin(&[1.0, 0.0], c1()).unwrap();
        assert!((p.space()[0] - 1.1752012).abs() < 1e-7);
        assert_eq!(p.space()[1], 0.0);
        assert!((p.time() - 1.5430806).abs() < 1e-7);
        assert!((lorentz_inner(&p, &p).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn exp_map_caps_large_norms() {
        let c = Curvature::new(4.0).unwrap();
        let p = exp_map_origin(&[100.0, 0.0], c).unwrap();
        let q = exp_map_origin(&[5.0, 0.0], c).unwrap();
        assert_eq!(p, q);
        assert!(p.time().is_finite());
    }

    #[test]
    fn hyperbolic_radial_examples() {
        let u = [0.6, -0.8];
        let u2 = [1.2, -1.6];
        let x = exp_map_origin(&u, c1()).unwrap();
        let y = exp_map_origin(&u2, c1()).unwrap();
        assert!(exterior_angle_hyp(&x, &y, c1()).unwrap().abs() < 1e-6);
        assert!((exterior_angle_hyp(&y, &x, c1()).unwrap() - PI).abs() < 1e-6);
    }

    #[test]
    fn hyperbolic_origin_is_degenerate() {
        let o = HyperbolicPoint::origin(2, c1());
        let y = exp_map_origin(&[1.0, 0.0], c1()).unwrap();
        assert!(matches!(
            exterior_angle_hyp(&o, &y, c1()),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn hyperbolic_coincident_points_are_floored() {
        let x = exp_map_origin(&[0.3, 0.4], c1()).unwrap();
        let v = exterior_angle_hyp(&x, &x, c1()).unwrap();
        assert!((0.0..=PI).contains(&v));
    }

    #[test]
    fn euclidean_examples() {
        assert!(exterior_angle_euc(&[1.0, 0.0], &[2.0, 0.0]).unwrap().abs() < 1e-12);
        assert!((exterior_angle_euc(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - PI / 2.0).abs() < 1e-12);
        assert!((exterior_angle_euc(&[1.0, 0.0], &[0.5, 0.0]).unwrap() - PI).abs() < 1e-12);
        assert!(exterior_angle_euc(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(exterior_angle_euc(&[1.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn entailment_angle_examples() {
        let a = entailment_angles(&[1.0, 0.0], &[2.0, 0.0], SpaceKind::Euclidean, c1()).unwrap();
        assert!((a.beta1 - PI).abs() < 1e-12);
        assert!((a.alpha2 - PI).abs() < 1e-12);
        let b = entailment_angles(&[1.0, 0.0], &[0.5, 0.0], SpaceKind::Euclidean, c1()).unwrap();
        assert!(b.beta1.abs() < 1e-12);
        assert!(b.alpha2.abs() < 1e-12);
    }

    #[test]
    fn space_kind_parsing() {
        assert_eq!("hyp".parse::<SpaceKind>().unwrap(), SpaceKind::Hyperbolic);
        assert_eq!("Euclidean".parse::<SpaceKind>().unwrap(), SpaceKind::Euclidean);
        assert!("poincare".parse::<SpaceKind>().is_err());
    }
}
