use nalgebra::{DMatrix, DVector};

/// Axis-aligned box of admissible parameter vectors.
///
/// The box is the concrete form of the compact, convex admissible set the
/// estimator and the robust terms project onto.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBox {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl ParameterBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(hi.iter()).all(|(l, h)| l <= h));
        Self { lo, hi }
    }

    /// Symmetric box [-bound, bound]^p.
    pub fn symmetric(p: usize, bound: f64) -> Self {
        assert!(bound >= 0.0);
        Self {
            lo: DVector::from_element(p, -bound),
            hi: DVector::from_element(p, bound),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, theta: &DVector<f64>) -> bool {
        theta
            .iter()
            .zip(self.lo.iter().zip(self.hi.iter()))
            .all(|(t, (l, h))| *t >= *l && *t <= *h)
    }

    /// Componentwise clamp onto the box.
    pub fn project(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| theta[i].clamp(self.lo[i], self.hi[i]))
    }

    /// Clamp of a single component.
    pub fn clamp_component(&self, i: usize, v: f64) -> f64 {
        v.clamp(self.lo[i], self.hi[i])
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lo + &self.hi) * 0.5
    }

    /// Largest pairwise infinity-distance between admissible vectors,
    /// i.e. the widest component span of the box.
    pub fn vartheta(&self) -> f64 {
        (&self.hi - &self.lo)
            .iter()
            .cloned()
            .fold(0.0f64, f64::max)
    }
}

/// Smallest eigenvalue of a small symmetric matrix.
///
/// Closed-form for 1x1 and 2x2 (the parameter dimensions used by the
/// shipped scenarios), eigen-solve otherwise.
pub fn lambda_min_sym(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        0 => 0.0,
        1 => m[(0, 0)],
        2 => {
            let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
            let mid = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            mid - rad
        }
        _ => m
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min),
    }
}

/// Largest eigenvalue, same dispatch as [`lambda_min_sym`].
pub fn lambda_max_sym(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        0 => 0.0,
        1 => m[(0, 0)],
        2 => {
            let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
            let mid = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            mid + rad
        }
        _ => m
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Sign-preserving power, used by the fixed-time decrease condition when the
/// certificate can take negative values inside the goal set.
pub fn signed_pow(v: f64, gamma: f64) -> f64 {
    v.signum() * v.abs().powf(gamma)
}
