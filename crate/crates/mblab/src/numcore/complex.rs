//! Complex vectors for beamforming weights and channel responses.

use num_complex::Complex64;

use super::NumError;

/// Fixed-length vector of complex values. Houses beam-steering weights,
/// per-subcarrier channel vectors, and received-signal samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVector(Vec<Complex64>);

impl ComplexVector {
    pub fn new(values: Vec<Complex64>) -> Self {
        ComplexVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ComplexVector(vec![Complex64::new(0.0, 0.0); len])
    }

    /// Builds from separate real/imaginary parts, which must match in length.
    pub fn from_re_im(re: &[f64], im: &[f64]) -> Result<Self, NumError> {
        if re.len() != im.len() {
            return Err(NumError::ComplexLength { re: re.len(), im: im.len() });
        }
        Ok(ComplexVector(
            re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[Complex64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.0
    }

    pub fn re(&self) -> Vec<f64> {
        self.0.iter().map(|c| c.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.0.iter().map(|c| c.im).collect()
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Plain transpose product `sum_i a_i * b_i` (no conjugation).
    pub fn dot_t(&self, other: &ComplexVector) -> Complex64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn add_assign(&mut self, other: &ComplexVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scaled(&self, c: Complex64) -> ComplexVector {
        ComplexVector(self.0.iter().map(|v| v * c).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatched_parts_are_rejected() {
        let err = ComplexVector::from_re_im(&[1.0, 2.0], &[0.0]).unwrap_err();
        assert!(matches!(err, NumError::ComplexLength { re: 2, im: 1 }));
    }

    #[test]
    fn dot_t_does_not_conjugate() {
        let a = ComplexVector::new(vec![Complex64::new(0.0, 1.0)]);
        let b = ComplexVector::new(vec![Complex64::new(0.0, 1.0)]);
        // j * j = -1; a conjugated product would give +1.
        assert_eq!(a.dot_t(&b), Complex64::new(-1.0, 0.0));
    }
}
