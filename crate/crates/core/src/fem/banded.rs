//! Symmetric positive-definite band storage with an in-place Cholesky factor.

use crate::error::{Error, Result};

/// Lower band of a symmetric matrix: entry `(i, j)` with `j <= i` and
/// `i - j <= bandwidth` is kept, everything outside the band is zero.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bandwidth);
        i * (self.bandwidth + 1) + self.bandwidth - (i - j)
    }

    /// Value at `(i, j)`, either triangle.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if i - j > self.bandwidth {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    /// Accumulate into `(i, j)`; entries of the strict upper triangle are
    /// ignored so that symmetric element matrices can be scattered whole.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        if j > i {
            return;
        }
        assert!(i - j <= self.bandwidth, "entry ({i}, {j}) outside band");
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bandwidth);
            for j in lo..=i {
                let a = self.data[self.slot(i, j)];
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// Cholesky factorization `A = L L^T`. A pivot that drops below
    /// `1e-12` of the largest diagonal entry is reported as singular.
    pub fn cholesky(mut self) -> Result<BandedCholesky> {
        let bw = self.bandwidth;
        let max_diag = (0..self.n)
            .map(|i| self.data[self.slot(i, i)].abs())
            .fold(0.0_f64, f64::max);
        let floor = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
        for i in 0..self.n {
            let lo_i = i.saturating_sub(bw);
            for j in lo_i..=i {
                let lo = lo_i.max(j.saturating_sub(bw));
                let mut sum = self.data[self.slot(i, j)];
                for k in lo..j {
                    sum -= self.data[self.slot(i, k)] * self.data[self.slot(j, k)];
                }
                if i == j {
                    if !(sum > floor) {
                        return Err(Error::SingularStiffness { dof: i });
                    }
                    let s = self.slot(i, i);
                    self.data[s] = sum.sqrt();
                } else {
                    let d = self.data[self.slot(j, j)];
                    let s = self.slot(i, j);
                    self.data[s] = sum / d;
                }
            }
        }
        Ok(BandedCholesky { factor: self })
    }
}

/// Lower-triangular band factor, reusable for any number of right-hand sides.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    factor: BandedSpd,
}

impl BandedCholesky {
    pub fn dim(&self) -> usize {
        self.factor.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let l = &self.factor;
        let n = l.n;
        let bw = l.bandwidth;
        assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= l.data[l.slot(i, k)] * b[k];
            }
            b[i] = s / l.data[l.slot(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n.min(i + bw + 1) {
                s -= l.data[l.slot(k, i)] * b[k];
            }
            b[i] = s / l.data[l.slot(i, i)];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn tridiag(n: usize) -> BandedSpd {
        let mut a = BandedSpd::zeros(n, 1);
        for i in 0..n {
            a.add(i, i, 4.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
        }
        a
    }

    #[test]
    fn solve_matches_dense() {
        let n = 9;
        let mut a = BandedSpd::zeros(n, 3);
        for i in 0..n {
            a.add(i, i, 10.0 + i as f64);
            for d in 1..=3 {
                if i >= d {
                    a.add(i, i - d, 1.0 / (d as f64 + i as f64));
                }
            }
        }
        let dense = DMatrix::from_fn(n, n, |i, j| a.get(i, j));
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 1.0).collect();
        let x = a.clone().cholesky().unwrap().solve(&b);
        let xd = dense.lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn mul_vec_is_symmetric_product() {
        let a = tridiag(4);
        let y = a.mul_vec(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y, vec![2.0, 4.0, 6.0, 13.0]);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut a = BandedSpd::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 0, 1.0);
        a.add(1, 1, 1.0);
        assert!(matches!(a.cholesky(), Err(Error::SingularStiffness { dof: 1 })));
    }
}
