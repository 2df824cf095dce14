//! Dense `f64` tensors and seeded pseudo-randomness.
//!
//! Everything here is deliberately small: row-major dense storage, no
//! broadcasting beyond scalar-with-tensor, and a hand-rolled generator so a
//! seed pins the exact byte content of every metric file the trainers emit.

use crate::{Error, Result};

/// Dense multi-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::argument(
                "Tensor::new",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::dimension(
                "Tensor::new",
                format!("shape {shape:?} needs {expect} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Stacks equal-length rows into a rank-2 tensor.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::argument("Tensor::from_rows", "no rows"));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * c);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != c {
                return Err(Error::dimension(
                    "Tensor::from_rows",
                    format!("row {i} has length {}, expected {c}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs rank 2");
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs rank 2");
        self.shape[1]
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dimension(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Scalar-with-tensor product.
    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::dimension(
                "matmul",
                format!("need rank 2, got {:?} and {:?}", self.shape, other.shape),
            ));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::dimension(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        // i-k-j loop order keeps both operand rows contiguous.
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose needs rank 2");
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data,
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Numerically stable softmax of a slice (max-subtraction form).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Stable log-softmax of a slice.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|&v| v - log_sum).collect()
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (m, c) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(m * c);
    for i in 0..m {
        data.extend(softmax(t.row(i)));
    }
    Tensor {
        shape: vec![m, c],
        data,
    }
}

/// Shannon entropy (nats) of a probability row; `0 * ln 0` counts as 0.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a stream tag.
///
/// Used to give samplers, initializers, etc. their own reproducible streams
/// without the streams for nearby base seeds colliding.
pub fn substream(seed: u64, tag: u64) -> u64 {
    let mut s = seed ^ tag.wrapping_mul(0xA076_1D64_78BD_642F);
    let a = splitmix64(&mut s);
    splitmix64(&mut s) ^ a.rotate_left(17)
}

/// Seeded pseudo-random generator: xoshiro256** (Blackman & Vigna), state
/// expanded from the seed with splitmix64.
///
/// Identical seeds give identical sequences on every platform, which is what
/// makes metric files byte-reproducible.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut sm);
        }
        // xoshiro's all-zero state is absorbing; splitmix64 of any seed
        // cannot produce four zeros, but guard anyway.
        if s == [0, 0, 0, 0] {
            s[0] = 1;
        }
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn uniform_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.uniform()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn normal_tensor(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| mean + std * self.normal()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Integer draw in `[0, n)` by rejection-free modulo on a 64-bit draw.
    ///
    /// Modulo bias is below 2^-50 for the `n` used here (dataset sizes), far
    /// under any tolerance in this crate.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// `k` distinct indices from `{0..n-1}` via partial Fisher-Yates.
    pub fn choice(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        if k > n {
            return Err(Error::argument(
                "rng_choice",
                format!("k={k} exceeds n={n}"),
            ));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        Ok(idx)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        let n = xs.len();
        for i in 0..n.saturating_sub(1) {
            let j = i + self.below(n - i);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(eye.matmul(&v).unwrap(), v);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data()[0], 11.0);
    }

    #[test]
    fn matmul_against_scalar_loop_oracle() {
        let mut rng = Rng::seed_from(7);
        let a = rng.normal_tensor(&[5, 7], 0.0, 1.0);
        let b = rng.normal_tensor(&[7, 3], 0.0, 1.0);
        let fast = a.matmul(&b).unwrap();
        let slow = naive_matmul(&a, &b);
        assert!(max_abs_diff(&fast, &slow) < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_inputs_unmodified() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let (a0, b0) = (a.clone(), b.clone());
        let _ = a.matmul(&b).unwrap();
        assert_eq!(a, a0);
        assert_eq!(b, b0);
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let z = [1.0, 2.0, 3.0];
        let p = softmax(&z);
        let norm: f64 = z.iter().map(|v| v.exp()).sum();
        for (a, b) in p.iter().zip(z.iter().map(|v| v.exp() / norm)) {
            assert!((a - b).abs() < 1e-12);
        }
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_consistent_with_softmax() {
        let z = [0.3, -2.0, 5.5, 1.1];
        let p = softmax(&z);
        let lp = log_softmax(&z);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rng_choice_full_draw_is_permutation() {
        let mut rng = Rng::seed_from(1);
        let mut got = rng.choice(5, 5).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn rng_choice_rejects_k_above_n() {
        let mut rng = Rng::seed_from(1);
        assert!(matches!(rng.choice(3, 4), Err(Error::Argument { .. })));
    }

    #[test]
    fn rng_same_seed_same_sequence() {
        let mut a = Rng::seed_from(42);
        let mut b = Rng::seed_from(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(
            a.normal_tensor(&[3, 3], 0.0, 1.0),
            b.normal_tensor(&[3, 3], 0.0, 1.0)
        );
        assert_eq!(a.choice(10, 4).unwrap(), b.choice(10, 4).unwrap());
    }

    #[test]
    fn rng_uniform_mean_law_of_large_numbers() {
        let mut rng = Rng::seed_from(3);
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| rng.uniform()).sum::<f64>() / n as f64;
        assert!((0.499..=0.501).contains(&mean), "mean {mean}");
    }

    #[test]
    fn rng_normal_moments_sane() {
        let mut rng = Rng::seed_from(9);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn substream_decorrelates_tags() {
        assert_ne!(substream(1, 0), substream(1, 1));
        assert_ne!(substream(1, 0), substream(2, 0));
        // Nearby base seeds with different tags must not alias.
        assert_ne!(substream(1, 1), substream(2, 0));
    }

    #[test]
    fn entropy_of_uniform_and_onehot() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        let u = [0.25; 4];
        assert!((entropy(&u) - 4.0f64.ln()).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use crate::ndcore::Rng as SeededRng;
        use proptest::prelude::*;

        fn small_dims() -> impl Strategy<Value = (usize, usize, usize)> {
            (1usize..=32, 1usize..=32, 1usize..=32)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn matmul_matches_naive_oracle((m, k, n) in small_dims(), seed in 0u64..1000) {
                let mut rng = SeededRng::seed_from(seed);
                let a = rng.normal_tensor(&[m, k], 0.0, 1.0);
                let b = rng.normal_tensor(&[k, n], 0.0, 1.0);
                let fast = a.matmul(&b).unwrap();
                let slow = naive_matmul(&a, &b);
                prop_assert!(max_abs_diff(&fast, &slow) < 1e-12);
            }

            #[test]
            fn add_mul_match_scalar_loops((m, n) in (1usize..=32, 1usize..=32), seed in 0u64..1000) {
                let mut rng = SeededRng::seed_from(seed);
                let a = rng.normal_tensor(&[m, n], 0.0, 1.0);
                let b = rng.normal_tensor(&[m, n], 0.0, 1.0);
                let sum = a.add(&b).unwrap();
                let prod = a.mul(&b).unwrap();
                for i in 0..m * n {
                    prop_assert!((sum.data()[i] - (a.data()[i] + b.data()[i])).abs() < 1e-12);
                    prop_assert!((prod.data()[i] - a.data()[i] * b.data()[i]).abs() < 1e-12);
                }
            }

            #[test]
            fn softmax_shift_invariant_and_permutation_equivariant(
                z in proptest::collection::vec(-20.0f64..20.0, 2..8),
                shift in -50.0f64..50.0,
            ) {
                let p = softmax(&z);
                let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
                let ps = softmax(&shifted);
                for (a, b) in p.iter().zip(&ps) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                let mut rev = z.clone();
                rev.reverse();
                let pr = softmax(&rev);
                for (a, b) in p.iter().rev().zip(&pr) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                let sum: f64 = p.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
