//! Dense-array math shared by every other module: shaped f64 tensors,
//! parameterized linear maps, stable softmax, l2 normalization, an Adam
//! optimizer, and a finite-difference gradient checker.
//!
//! Everything trains in f64; the retrieval scan has its own f32 fast mode.

mod adam;
mod gradcheck;
mod linear;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::finite_diff_check;
pub use linear::{LinearGrads, LinearLayer};

use crate::error::{Error, Result};

/// Epsilon added to l2 denominators so zero vectors normalize to zero
/// instead of NaN.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense array with explicit shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor holds {bad}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    /// 1-D convenience constructor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let len = data.len();
        Self::new(vec![len], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().find(|v| !v.is_finite()) {
            Some(bad) => Err(Error::NonFinite(format!("{what}: {bad}"))),
            None => Ok(()),
        }
    }
}

/// Softmax of `scale * v` with max-subtraction for overflow safety.
///
/// Output entries are positive and sum to 1 (within 1e-12 round-off).
pub fn softmax_scaled(v: &[f64], scale: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of empty vector".into()));
    }
    if !scale.is_finite() {
        return Err(Error::Param(format!("softmax scale {scale}")));
    }
    let mx = v
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
    if !mx.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (scale * (x - mx)).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(out)
}

/// Backward of `p = softmax_scaled(v, scale)` given upstream `dp`.
pub fn softmax_scaled_backward(p: &[f64], dp: &[f64], scale: f64) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(&pi, &di)| pi * di).sum();
    p.iter()
        .zip(dp)
        .map(|(&pi, &di)| scale * pi * (di - dot))
        .collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `v / (||v||_2 + eps)`; zero vectors map to zero.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let denom = l2_norm(v) + NORM_EPS;
    v.iter().map(|&x| x / denom).collect()
}

/// Backward of `u = v / (||v||_2 + eps)` given upstream `du`.
pub fn l2_normalize_backward(v: &[f64], du: &[f64]) -> Vec<f64> {
    let norm = l2_norm(v);
    let denom = norm + NORM_EPS;
    let vdu = dot(v, du);
    if norm == 0.0 {
        return du.iter().map(|&d| d / denom).collect();
    }
    let coeff = vdu / (norm * denom * denom);
    v.iter()
        .zip(du)
        .map(|(&vi, &di)| di / denom - vi * coeff)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn tensor_rejects_bad_shape_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let p = softmax_scaled(&[4.2, 4.2, 4.2], 7.0).unwrap();
        for &x in &p {
            assert_close(x, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_hand_case() {
        let p = softmax_scaled(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_close(p[0], e / (e + 1.0), 1e-12);
        assert_close(p[1], 1.0 / (e + 1.0), 1e-12);
    }

    #[test]
    fn softmax_survives_huge_inputs() {
        let p = softmax_scaled(&[1000.0, 0.0], 1.0).unwrap();
        assert_close(p[0], 1.0, 1e-15);
        assert_close(p[1], 0.0, 1e-15);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(softmax_scaled(&[], 1.0).is_err());
    }

    #[test]
    fn softmax_scale_pulls_inside() {
        let v = [0.3, -1.2, 0.9, 0.0];
        let a = 3.7;
        let scaled: Vec<f64> = v.iter().map(|x| x * a).collect();
        let p1 = softmax_scaled(&v, a).unwrap();
        let p2 = softmax_scaled(&scaled, 1.0).unwrap();
        for (x, y) in p1.iter().zip(&p2) {
            assert_close(*x, *y, 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let v = vec![0.4, -0.3, 1.1];
        let dp = vec![0.7, -0.2, 0.5];
        let scale = 2.5;
        let loss = |x: &[f64]| {
            let p = softmax_scaled(x, scale).unwrap();
            dot(&p, &dp)
        };
        let p = softmax_scaled(&v, scale).unwrap();
        let analytic = softmax_scaled_backward(&p, &dp, scale);
        let err = finite_diff_check(&mut |x| Ok(loss(x)), &v, &analytic, 1e-6).unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let u = l2_normalize(&[3.0, 4.0]);
        assert_close(u[0], 0.6, 1e-12);
        assert_close(u[1], 0.8, 1e-12);
    }

    #[test]
    fn l2_normalize_zero_vector_stays_zero() {
        let u = l2_normalize(&[0.0, 0.0]);
        assert_eq!(u, vec![0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_idempotent_and_scale_invariant() {
        let v = [0.3, -2.0, 1.5];
        let once = l2_normalize(&v);
        let twice = l2_normalize(&once);
        for (a, b) in once.iter().zip(&twice) {
            assert_close(*a, *b, 1e-12);
        }
        let scaled: Vec<f64> = v.iter().map(|x| x * 17.0).collect();
        let u2 = l2_normalize(&scaled);
        for (a, b) in once.iter().zip(&u2) {
            assert_close(*a, *b, 1e-12);
        }
    }

    #[test]
    fn l2_normalize_backward_matches_finite_differences() {
        let v = vec![0.8, -0.5, 0.1, 2.0];
        let du = vec![0.3, 0.9, -1.1, 0.2];
        let loss = |x: &[f64]| dot(&l2_normalize(x), &du);
        let analytic = l2_normalize_backward(&v, &du);
        let err = finite_diff_check(&mut |x| Ok(loss(x)), &v, &analytic, 1e-6).unwrap();
        assert!(err < 1e-8, "err {err}");
    }
}
