//! Dense row-major tensors over `f64`.
//!
//! Everything in the pipeline (images, feature maps, parameters) is stored in
//! one of these. Shapes are dynamic; the conventions used elsewhere are
//! `[C, H, W]` for feature maps, `[out, in, kh, kw]` for convolution kernels
//! and `[H, W]` for image planes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Gaussian init, values drawn in a fixed order from the given rng.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            // Box-Muller on two uniform draws; avoids a rand_distr dependency
            // and keeps the draw count per element fixed at two.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            data.push(z * std);
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(self.len(), shape.iter().product::<usize>());
        self.shape = shape.to_vec();
        self
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clamps every element to the nearest `f32`-representable value.
    ///
    /// Checkpoints store 32-bit floats; keeping in-memory parameters on the
    /// f32 grid makes the save/load round trip bit-exact.
    pub fn quantize_f32(&mut self) {
        for v in self.data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Flat offset for a 3-d `[C, H, W]` tensor.
#[inline]
pub fn idx3(shape: &[usize], c: usize, y: usize, x: usize) -> usize {
    debug_assert_eq!(shape.len(), 3);
    (c * shape[1] + y) * shape[2] + x
}

/// Flat offset for a 4-d tensor.
#[inline]
pub fn idx4(shape: &[usize], a: usize, b: usize, c: usize, d: usize) -> usize {
    debug_assert_eq!(shape.len(), 4);
    ((a * shape[1] + b) * shape[2] + c) * shape[3] + d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn randn_is_deterministic_for_a_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[4, 3], 0.1, &mut r1);
        let b = Tensor::randn(&[4, 3], 0.1, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut t = Tensor::from_vec(&[3], vec![0.1, 1.0 / 3.0, -2.75193125312]);
        t.quantize_f32();
        let once = t.clone();
        t.quantize_f32();
        assert_eq!(t, once);
        for v in t.iter() {
            assert_eq!(*v, *v as f32 as f64);
        }
    }

    #[test]
    fn idx_helpers_are_row_major() {
        let shape = [2, 3, 4];
        assert_eq!(idx3(&shape, 0, 0, 0), 0);
        assert_eq!(idx3(&shape, 0, 0, 3), 3);
        assert_eq!(idx3(&shape, 0, 1, 0), 4);
        assert_eq!(idx3(&shape, 1, 0, 0), 12);
    }
}
