//! Orthonormal DCT-II and its inverse (DCT-III), via a cached cosine basis.

use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct Dct {
    len: usize,
    // basis[k * len + n] = c_k · cos(π (2n + 1) k / 2L)
    basis: Vec<f64>,
}

impl Dct {
    pub fn new(len: usize) -> Self {
        assert!(len >= 1, "DCT length must be positive");
        let l = len as f64;
        let mut basis = Vec::with_capacity(len * len);
        for k in 0..len {
            let c = if k == 0 {
                (1.0 / l).sqrt()
            } else {
                (2.0 / l).sqrt()
            };
            for n in 0..len {
                basis.push(c * (PI * (2 * n + 1) as f64 * k as f64 / (2.0 * l)).cos());
            }
        }
        Dct { len, basis }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.len);
        self.basis
            .chunks(self.len)
            .map(|row| row.iter().zip(x).map(|(b, v)| b * v).sum())
            .collect()
    }

    pub fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.len);
        let mut out = vec![0.0; self.len];
        for (row, c) in self.basis.chunks(self.len).zip(coeffs) {
            for (o, b) in out.iter_mut().zip(row) {
                *o += c * b;
            }
        }
        out
    }
}

pub fn dct(x: &[f64]) -> Vec<f64> {
    Dct::new(x.len()).forward(x)
}

pub fn idct(coeffs: &[f64]) -> Vec<f64> {
    Dct::new(coeffs.len()).inverse(coeffs)
}
