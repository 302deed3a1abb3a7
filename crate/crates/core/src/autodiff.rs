//! Forward-mode automatic differentiation.
//!
//! Two number types are provided:
//!
//! * [`Dual`] carries a value and one directional derivative. It is generic
//!   over its component type, so `Dual<Dual<f64>>` nests for higher order.
//! * [`Dual2`] carries a value together with the first and second derivative
//!   along a single direction, which is all the geodesic equation needs:
//!   the quadratic form `Σ_ij ∂²f/∂z_i∂z_j v_i v_j` without ever forming a
//!   Hessian.
//!
//! Functions that should be differentiable are written once against the
//! [`Scalar`] trait. The trait is the closed set of elementary operations the
//! crate supports; every one of them is C^∞ on its domain.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("non-finite value produced by {op} (output {index})")]
    NonFinite { op: &'static str, index: usize },
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Real-valued scalar supporting the elementary operations used by flows and
/// analytic charts.
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    /// Primal value with all derivative parts dropped.
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    /// True when every component (value and derivatives) is finite.
    fn all_finite(&self) -> bool;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

/// First-order dual number `re + eps·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<T = f64> {
    pub re: T,
    pub eps: T,
}

impl<T: Scalar> Dual<T> {
    #[inline]
    pub fn new(re: T, eps: T) -> Self {
        Dual { re, eps }
    }

    /// A constant (zero tangent).
    #[inline]
    pub fn constant(re: T) -> Self {
        Dual { re, eps: T::zero() }
    }

    #[inline]
    fn chain(self, f: T, df: T) -> Self {
        Dual {
            re: f,
            eps: df * self.eps,
        }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.eps * o.re + self.re * o.eps)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = T::from_f64(1.0) / o.re;
        let re = self.re * inv;
        Dual::new(re, (self.eps - re * o.eps) * inv)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}

impl<T: Scalar> Add<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: f64) -> Self {
        Dual::new(self.re + o, self.eps)
    }
}

impl<T: Scalar> Sub<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: f64) -> Self {
        Dual::new(self.re - o, self.eps)
    }
}

impl<T: Scalar> Mul<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        Dual::new(self.re * o, self.eps * o)
    }
}

impl<T: Scalar> Div<f64> for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, o: f64) -> Self {
        Dual::new(self.re / o, self.eps / o)
    }
}

impl<T: Scalar> AddAssign for Dual<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Scalar> SubAssign for Dual<T> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Scalar> MulAssign for Dual<T> {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::constant(T::from_f64(v))
    }
    #[inline]
    fn value(&self) -> f64 {
        self.re.value()
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.chain(self.re.ln(), T::from_f64(1.0) / self.re)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, -(t * t) + 1.0)
    }
    #[inline]
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, T::from_f64(0.5) / s)
    }
    #[inline]
    fn all_finite(&self) -> bool {
        self.re.all_finite() && self.eps.all_finite()
    }
}

/// Value plus first and second derivative along one fixed direction.
///
/// For `f(z + τ v)` evaluated at `τ = 0`, `d1 = ∇f·v` and `d2 = vᵀ∇²f v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual2 {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Dual2 {
    #[inline]
    pub fn new(v: f64, d1: f64, d2: f64) -> Self {
        Dual2 { v, d1, d2 }
    }

    #[inline]
    pub fn constant(v: f64) -> Self {
        Dual2 {
            v,
            d1: 0.0,
            d2: 0.0,
        }
    }

    /// Apply a scalar function given its value and first two derivatives.
    #[inline]
    fn chain(self, f: f64, df: f64, ddf: f64) -> Self {
        Dual2 {
            v: f,
            d1: df * self.d1,
            d2: ddf * self.d1 * self.d1 + df * self.d2,
        }
    }
}

impl Add for Dual2 {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual2::new(self.v + o.v, self.d1 + o.d1, self.d2 + o.d2)
    }
}

impl Sub for Dual2 {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual2::new(self.v - o.v, self.d1 - o.d1, self.d2 - o.d2)
    }
}

impl Mul for Dual2 {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual2::new(
            self.v * o.v,
            self.d1 * o.v + self.v * o.d1,
            self.d2 * o.v + 2.0 * self.d1 * o.d1 + self.v * o.d2,
        )
    }
}

impl Div for Dual2 {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        // 1/x: f' = -1/x², f'' = 2/x³
        let recip = o.chain(inv, -inv * inv, 2.0 * inv * inv * inv);
        self * recip
    }
}

impl Neg for Dual2 {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual2::new(-self.v, -self.d1, -self.d2)
    }
}

impl Add<f64> for Dual2 {
    type Output = Self;
    #[inline]
    fn add(self, o: f64) -> Self {
        Dual2::new(self.v + o, self.d1, self.d2)
    }
}

impl Sub<f64> for Dual2 {
    type Output = Self;
    #[inline]
    fn sub(self, o: f64) -> Self {
        Dual2::new(self.v - o, self.d1, self.d2)
    }
}

impl Mul<f64> for Dual2 {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        Dual2::new(self.v * o, self.d1 * o, self.d2 * o)
    }
}

impl Div<f64> for Dual2 {
    type Output = Self;
    #[inline]
    fn div(self, o: f64) -> Self {
        Dual2::new(self.v / o, self.d1 / o, self.d2 / o)
    }
}

impl AddAssign for Dual2 {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for Dual2 {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl MulAssign for Dual2 {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl Scalar for Dual2 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual2::constant(v)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        let inv = 1.0 / self.v;
        self.chain(self.v.ln(), inv, -inv * inv)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        let dt = 1.0 - t * t;
        self.chain(t, dt, -2.0 * t * dt)
    }
    #[inline]
    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    #[inline]
    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }
    #[inline]
    fn all_finite(&self) -> bool {
        self.v.is_finite() && self.d1.is_finite() && self.d2.is_finite()
    }
}

/// A smooth map `R^n -> R^m` written against [`Scalar`].
pub trait SmoothFn {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S>;
}

fn check_dim(op: &'static str, expected: usize, got: usize) -> Result<(), AdError> {
    if expected != got {
        return Err(AdError::Dimension { op, expected, got });
    }
    Ok(())
}

fn check_finite<S: Scalar>(op: &'static str, out: &[S]) -> Result<(), AdError> {
    match out.iter().position(|s| !s.all_finite()) {
        Some(index) => Err(AdError::NonFinite { op, index }),
        None => Ok(()),
    }
}

/// Value and Jacobian-vector product `(f(z), J_f(z)·v)` from one forward pass.
pub fn value_and_jvp<F: SmoothFn>(
    f: &F,
    z: &[f64],
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), AdError> {
    check_dim("jvp", f.input_dim(), z.len())?;
    check_dim("jvp", f.input_dim(), v.len())?;
    let seeded: Vec<Dual> = z.iter().zip(v).map(|(&a, &b)| Dual::new(a, b)).collect();
    let out = f.eval(&seeded);
    check_finite("jvp", &out)?;
    Ok(out.iter().map(|d| (d.re, d.eps)).unzip())
}

/// Jacobian-vector product `J_f(z)·v`.
pub fn jvp<F: SmoothFn>(f: &F, z: &[f64], v: &[f64]) -> Result<Vec<f64>, AdError> {
    value_and_jvp(f, z, v).map(|(_, t)| t)
}

/// Full `m×n` Jacobian, one forward pass per input coordinate.
pub fn jacobian<F: SmoothFn>(f: &F, z: &[f64]) -> Result<DMatrix<f64>, AdError> {
    value_and_jacobian(f, z).map(|(_, j)| j)
}

/// `f(z)` together with its Jacobian.
pub fn value_and_jacobian<F: SmoothFn>(
    f: &F,
    z: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>), AdError> {
    let n = f.input_dim();
    check_dim("jacobian", n, z.len())?;
    let m = f.output_dim();
    let mut jac = DMatrix::zeros(m, n);
    let mut value = Vec::new();
    if n == 0 {
        value = f.eval(z);
        check_finite("jacobian", &value)?;
    }
    let mut seeded: Vec<Dual> = z.iter().map(|&a| Dual::constant(a)).collect();
    for j in 0..n {
        seeded[j].eps = 1.0;
        let out = f.eval(&seeded);
        seeded[j].eps = 0.0;
        check_finite("jacobian", &out)?;
        check_dim("jacobian", m, out.len())?;
        for (i, d) in out.iter().enumerate() {
            jac[(i, j)] = d.eps;
        }
        if j == 0 {
            value = out.iter().map(|d| d.re).collect();
        }
    }
    Ok((value, jac))
}

/// Second directional derivative `Σ_ij ∂²f_m/∂z_i∂z_j v_i v_j` for every
/// output `m`, from a single [`Dual2`] pass.
pub fn quadratic_form<F: SmoothFn>(f: &F, z: &[f64], v: &[f64]) -> Result<Vec<f64>, AdError> {
    check_dim("quadratic_form", f.input_dim(), z.len())?;
    check_dim("quadratic_form", f.input_dim(), v.len())?;
    let seeded: Vec<Dual2> = z
        .iter()
        .zip(v)
        .map(|(&a, &b)| Dual2::new(a, b, 0.0))
        .collect();
    let out = f.eval(&seeded);
    check_finite("quadratic_form", &out)?;
    Ok(out.iter().map(|d| d.d2).collect())
}

/// Convenience conversion used by the geometry code.
pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ProdSum;
    impl SmoothFn for ProdSum {
        fn input_dim(&self) -> usize {
            2
        }
        fn output_dim(&self) -> usize {
            2
        }
        fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
            vec![z[0] * z[1], z[0] + z[1]]
        }
    }

    struct Identity(usize);
    impl SmoothFn for Identity {
        fn input_dim(&self) -> usize {
            self.0
        }
        fn output_dim(&self) -> usize {
            self.0
        }
        fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
            z.to_vec()
        }
    }

    struct Tanh;
    impl SmoothFn for Tanh {
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
            vec![z[0].tanh()]
        }
    }

    struct Square;
    impl SmoothFn for Square {
        fn input_dim(&self) -> usize {
            2
        }
        fn output_dim(&self) -> usize {
            2
        }
        fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
            z.iter().map(|&a| a * a).collect()
        }
    }

    struct SinProd;
    impl SmoothFn for SinProd {
        fn input_dim(&self) -> usize {
            2
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
            vec![z[0].sin() * z[1]]
        }
    }

    struct Overflow;
    impl SmoothFn for Overflow {
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
            vec![z[0].exp().exp()]
        }
    }

    #[test]
    fn jvp_of_product_sum() {
        let out = jvp(&ProdSum, &[2.0, 3.0], &[1.0, 0.0]).unwrap();
        assert_eq!(out, vec![3.0, 1.0]);
    }

    #[test]
    fn jvp_of_identity() {
        let out = jvp(&Identity(3), &[0.3, -4.0, 9.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn jvp_of_tanh_matches_central_difference() {
        let out = jvp(&Tanh, &[0.5], &[1.0]).unwrap()[0];
        let h = 1e-6;
        let fd = ((0.5f64 + h).tanh() - (0.5f64 - h).tanh()) / (2.0 * h);
        assert!((out - fd).abs() < 1e-8);
        assert!((out - 0.786448).abs() < 1e-6);
    }

    #[test]
    fn jacobian_of_product_sum() {
        let j = jacobian(&ProdSum, &[2.0, 3.0]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[3.0, 2.0, 1.0, 1.0]));
    }

    #[test]
    fn quadratic_form_of_square() {
        let q = quadratic_form(&Square, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(q, vec![18.0, 32.0]);
    }

    #[test]
    fn quadratic_form_of_linear_map_vanishes() {
        let q = quadratic_form(&ProdSum, &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(q, vec![0.0, 0.0]);
        let q = quadratic_form(&Identity(2), &[1.0, 2.0], &[5.0, -1.0]).unwrap();
        assert_eq!(q, vec![0.0, 0.0]);
    }

    #[test]
    fn quadratic_form_sin_product_matches_second_differences() {
        let z = [0.3, 1.1];
        let v = [1.0, 1.0];
        let q = quadratic_form(&SinProd, &z, &v).unwrap()[0];
        let f = |t: f64| (z[0] + t * v[0]).sin() * (z[1] + t * v[1]);
        let h = 1e-4;
        let fd = (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
        assert!((q - fd).abs() < 1e-5, "{q} vs {fd}");
    }

    #[test]
    fn overflow_is_reported() {
        let err = jvp(&Overflow, &[10.0], &[1.0]).unwrap_err();
        assert_eq!(
            err,
            AdError::NonFinite {
                op: "jvp",
                index: 0
            }
        );
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(matches!(
            jvp(&ProdSum, &[1.0], &[1.0]),
            Err(AdError::Dimension { .. })
        ));
    }

    #[test]
    fn dual2_matches_nested_dual() {
        // x ↦ ln(tanh(x)·exp(x)/ (1 + x)) + sqrt(x)·cos(x)
        fn g<S: Scalar>(x: S) -> S {
            (x.tanh() * x.exp() / (x + 1.0)).ln() + x.sqrt() * x.cos() - x.sin()
        }
        let x = 0.7;
        let d2 = g(Dual2::new(x, 1.0, 0.0));
        let nested = g(Dual::new(Dual::new(x, 1.0), Dual::new(1.0, 0.0)));
        assert!((d2.v - nested.re.re).abs() < 1e-14);
        assert!((d2.d1 - nested.re.eps).abs() < 1e-13);
        assert!((d2.d1 - nested.eps.re).abs() < 1e-13);
        assert!((d2.d2 - nested.eps.eps).abs() < 1e-12);
    }

    #[test]
    fn zero_tangent_dual_behaves_like_real() {
        fn g<S: Scalar>(x: S) -> S {
            (x * x + 1.0).ln() / x.exp() - x.tanh() * 3.0
        }
        let x = -1.3;
        let d = g(Dual::constant(x));
        assert_eq!(d.re, g(x));
        assert_eq!(d.eps, 0.0);
    }
}
