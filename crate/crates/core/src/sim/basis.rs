//! Smooth random functions used by the semi-synthetic generator: clamped cubic
//! B-splines, Matérn-5/2 Gaussian-process paths and random Fourier features.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng::normal;
use crate::{CoreError, Result};

/// Clamped cubic B-spline basis with uniform interior knots on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicBasis {
    knots: Vec<f64>,
    n: usize,
}

impl CubicBasis {
    /// `n` basis functions; needs `n >= 4`.
    pub fn new(n: usize, lo: f64, hi: f64) -> Result<Self> {
        if n < 4 || !(lo < hi) {
            return Err(CoreError::Config(format!(
                "cubic basis needs at least 4 functions on a proper interval, got {n} on [{lo}, {hi}]"
            )));
        }
        let interior = n - 4;
        let mut knots = vec![lo; 4];
        for i in 1..=interior {
            knots.push(lo + (hi - lo) * i as f64 / (interior + 1) as f64);
        }
        knots.extend([hi; 4]);
        Ok(Self { knots, n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Values of all basis functions at `x` (clamped into the domain).
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let k = &self.knots;
        let (lo, hi) = (k[0], k[k.len() - 1]);
        let x = x.clamp(lo, hi);
        // Degree-0 functions, with the right endpoint assigned to the last span.
        let spans = k.len() - 1;
        let mut b: Vec<f64> = (0..spans)
            .map(|i| {
                let inside = (k[i] <= x && x < k[i + 1]) || (x == hi && k[i] < hi && k[i + 1] == hi);
                f64::from(u8::from(inside))
            })
            .collect();
        for p in 1..=3 {
            let mut next = vec![0.0; spans - p];
            for (i, slot) in next.iter_mut().enumerate() {
                let mut v = 0.0;
                let d1 = k[i + p] - k[i];
                if d1 > 0.0 {
                    v += (x - k[i]) / d1 * b[i];
                }
                let d2 = k[i + p + 1] - k[i + 1];
                if d2 > 0.0 {
                    v += (k[i + p + 1] - x) / d2 * b[i + 1];
                }
                *slot = v;
            }
            b = next;
        }
        b
    }

    pub fn curve(&self, coefficients: &[f64], x: f64) -> f64 {
        self.eval(x).iter().zip(coefficients).map(|(b, c)| b * c).sum()
    }
}

/// Global trend shapes for untreated outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trend {
    Stable,
    FastDecline,
    SlowDecline,
    FastIncrease,
    SlowIncrease,
}

impl Trend {
    pub const ALL: [Trend; 5] = [
        Trend::Stable,
        Trend::FastDecline,
        Trend::SlowDecline,
        Trend::FastIncrease,
        Trend::SlowIncrease,
    ];

    /// Control points of the six-function clamped cubic basis on `[0, 100]`.
    pub fn control_points(self) -> [f64; 6] {
        const FAST: [f64; 6] = [1.0, 0.4, -0.3, -0.8, -1.0, -1.0];
        const SLOW: [f64; 6] = [0.5, 0.3, 0.1, -0.1, -0.3, -0.5];
        match self {
            Trend::Stable => [0.0; 6],
            Trend::FastDecline => FAST,
            Trend::SlowDecline => SLOW,
            Trend::FastIncrease => FAST.map(|v| -v),
            Trend::SlowIncrease => SLOW.map(|v| -v),
        }
    }
}

/// Evaluates trend templates; templates share one basis on `[0, 100]`.
#[derive(Debug, Clone)]
pub struct TrendCurves {
    basis: CubicBasis,
}

impl TrendCurves {
    pub fn new() -> Self {
        Self {
            basis: CubicBasis::new(6, 0.0, 100.0).expect("static basis"),
        }
    }

    pub fn value(&self, trend: Trend, t: f64) -> f64 {
        self.basis.curve(&trend.control_points(), t)
    }
}

impl Default for TrendCurves {
    fn default() -> Self {
        Self::new()
    }
}

pub fn matern52(r: f64, lengthscale: f64) -> f64 {
    let s = 5f64.sqrt() * r.abs() / lengthscale;
    (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Unit-variance Matérn-5/2 process on the integer grid `0..len`. The Cholesky
/// factor is computed once; its leading block serves shorter paths.
#[derive(Debug, Clone)]
pub struct GpSampler {
    chol: DMatrix<f64>,
    len: usize,
}

impl GpSampler {
    pub fn new(len: usize, lengthscale: f64) -> Result<Self> {
        if len == 0 || !(lengthscale > 0.0) {
            return Err(CoreError::Config(format!(
                "gp grid needs positive length and lengthscale, got {len}, {lengthscale}"
            )));
        }
        let mut jitter = 1e-10;
        let cov = DMatrix::from_fn(len, len, |i, j| matern52(i as f64 - j as f64, lengthscale));
        loop {
            let m = &cov + DMatrix::identity(len, len) * jitter;
            if let Some(c) = m.cholesky() {
                return Ok(Self { chol: c.l(), len });
            }
            jitter *= 10.0;
            if jitter > 1e-3 {
                return Err(CoreError::Numeric("gp covariance not positive definite".into()));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, t: usize) -> Result<Vec<f64>> {
        if t > self.len {
            return Err(CoreError::Input(format!(
                "gp path of length {t} exceeds grid of {}",
                self.len
            )));
        }
        let z: Vec<f64> = (0..t).map(|_| normal(rng)).collect();
        Ok((0..t)
            .map(|i| (0..=i).map(|j| self.chol[(i, j)] * z[j]).sum())
            .collect())
    }
}

/// `f(x) = phi(x)^T w` with `phi(x) = sqrt(2/D) cos(Omega x + b)`, approximating a
/// draw from a GP with RBF kernel of the given lengthscale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomFourierFeatures {
    pub omega: Vec<Vec<f64>>,
    pub phase: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RandomFourierFeatures {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        dim: usize,
        features: usize,
        lengthscale: f64,
        sigma_w: f64,
    ) -> Result<Self> {
        if dim == 0 || features == 0 || !(lengthscale > 0.0) || !(sigma_w >= 0.0) {
            return Err(CoreError::Config("invalid random feature settings".into()));
        }
        let omega = (0..features)
            .map(|_| (0..dim).map(|_| normal(rng) / lengthscale).collect())
            .collect();
        let phase = (0..features)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        let weights = (0..features).map(|_| sigma_w * normal(rng)).collect();
        Ok(Self {
            omega,
            phase,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.omega.first().map_or(0, Vec::len)
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(CoreError::Input(format!(
                "feature map expects dimension {}, got {}",
                self.dim(),
                x.len()
            )));
        }
        let scale = (2.0 / self.omega.len() as f64).sqrt();
        Ok(self
            .omega
            .iter()
            .zip(&self.phase)
            .map(|(w, b)| {
                let dot: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                scale * (dot + b).cos()
            })
            .collect())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .features(x)?
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| p * w)
            .sum())
    }
}
