//! Dense row-major tensors and the handful of numeric primitives the
//! simulator is built on.
//!
//! Values are stored as `f32` (matching the on-disk format and the fixed-point
//! hardware model this crate simulates) but every reduction — convolution
//! accumulators, norms, variance — runs in `f64` so that test oracles can pin
//! results tightly. Shapes are explicit extent lists; by convention
//! activations are `[C, H, W]`, convolution weights `[C_out, C_in, kH, kW]`,
//! and sample batches `[N, C, H, W]`.

use crate::error::{Error, Result};

/// Row-major dense tensor. Construction rejects non-finite values, so
/// arithmetic in the rest of the crate never has to re-check for NaNs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, validating that `data` fills `shape` exactly and is
    /// finite throughout.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if data.len() != expected {
            return Err(Error::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        Ok(Tensor {
            shape,
            data: vec![0.0; len],
        })
    }

    /// Tensor with every element equal to `value`.
    pub fn full(shape: Vec<usize>, value: f32) -> Result<Self> {
        let mut t = Tensor::zeros(shape)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        t.data.fill(value);
        Ok(t)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Consume the tensor, returning its raw parts.
    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }

    /// Element-wise difference `self - other`. Shapes must match exactly.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Element-wise sum `self + other`. Shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Apply `f` to every element, producing a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Multiply every element by a scalar.
    pub fn scale_by(&self, factor: f32) -> Result<Tensor> {
        self.map(|v| v * factor)
    }

    /// Largest absolute element, 0.0 for the degenerate all-zero tensor.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    /// Minimum and maximum element values.
    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Frobenius norm: sqrt of the sum of squared elements, accumulated in
    /// `f64`.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| {
                let v = v as f64;
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Population variance over all elements (division by N, not N-1).
    pub fn variance(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        self.data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n
    }

    /// Per-pixel channel norm of a `[C, H, W]` tensor: an `[H, W]` map whose
    /// entry is the Euclidean norm of the C-vector at that pixel.
    pub fn channel_norm_map(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "channel_norm_map expects [C, H, W], got {:?}",
                self.shape
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let plane = h * w;
        let mut out = vec![0.0f32; plane];
        for (i, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for ch in 0..c {
                let v = self.data[ch * plane + i] as f64;
                acc += v * v;
            }
            *slot = acc.sqrt() as f32;
        }
        Tensor::new(vec![h, w], out)
    }

    /// Mean squared difference against another tensor of the same shape,
    /// accumulated in `f64`.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "mse on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let acc: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(acc / self.data.len() as f64)
    }
}

/// Output spatial extents for a stride-1 convolution of an `[.., H, W]` input
/// with a `[.., kH, kW]` kernel under symmetric zero padding.
pub fn conv_output_extent(input: usize, kernel: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::ShapeMismatch(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok(padded - kernel + 1)
}

/// 2-D cross-correlation (the convention convolutional layers actually
/// compute): input `[C_in, H, W]`, weights `[C_out, C_in, kH, kW]`, stride 1,
/// symmetric zero padding, output `[C_out, H', W']`.
///
/// Accumulation is in `f64` per output element; the result is stored as
/// `f32`. The operation is linear in the input, which the sigma-delta engine
/// relies on: `conv2d(a + b, w) ≈ conv2d(a, w) + conv2d(b, w)` up to storage
/// rounding, and it is exact when all values are small integers.
pub fn conv2d(input: &Tensor, weights: &Tensor, padding: usize) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input must be [C, H, W], got {:?}",
            input.shape
        )));
    }
    if weights.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d weights must be [C_out, C_in, kH, kW], got {:?}",
            weights.shape
        )));
    }
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, wc_in, k_h, k_w) = (
        weights.shape[0],
        weights.shape[1],
        weights.shape[2],
        weights.shape[3],
    );
    if c_in != wc_in {
        return Err(Error::ShapeMismatch(format!(
            "conv2d channel mismatch: input has {c_in}, weights expect {wc_in}"
        )));
    }
    let h_out = conv_output_extent(h, k_h, padding)?;
    let w_out = conv_output_extent(w, k_w, padding)?;

    let x = &input.data;
    let wt = &weights.data;
    let mut out = vec![0.0f32; c_out * h_out * w_out];

    for co in 0..c_out {
        let out_base = co * h_out * w_out;
        let w_co = co * c_in * k_h * k_w;
        for oh in 0..h_out {
            // Valid kernel rows for this output row: ih = oh + kh - padding
            // must land in [0, h).
            let kh_lo = padding.saturating_sub(oh);
            let kh_hi = (h + padding - oh).min(k_h);
            for ow in 0..w_out {
                let kw_lo = padding.saturating_sub(ow);
                let kw_hi = (w + padding - ow).min(k_w);
                let mut acc = 0.0f64;
                for ci in 0..c_in {
                    let x_ci = ci * h * w;
                    let w_ci = w_co + ci * k_h * k_w;
                    for kh in kh_lo..kh_hi {
                        let ih = oh + kh - padding;
                        let x_row = x_ci + ih * w;
                        let w_row = w_ci + kh * k_w;
                        for kw in kw_lo..kw_hi {
                            let iw = ow + kw - padding;
                            acc += x[x_row + iw] as f64 * wt[w_row + kw] as f64;
                        }
                    }
                }
                out[out_base + oh * w_out + ow] = acc as f32;
            }
        }
    }
    Tensor::new(vec![c_out, h_out, w_out], out)
}

/// Rectified linear unit, applied element-wise.
pub fn relu(x: &Tensor) -> Tensor {
    // map() cannot fail here: max(v, 0) of finite values is finite.
    x.map(|v| v.max(0.0)).expect("relu preserves finiteness")
}

// ─────────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Independent reference convolution: direct quadruple loop with explicit
    /// bounds checks, no clamped index ranges shared with the implementation.
    fn conv2d_reference(input: &Tensor, weights: &Tensor, padding: usize) -> Tensor {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, _, k_h, k_w) = (
            weights.shape()[0],
            weights.shape()[1],
            weights.shape()[2],
            weights.shape()[3],
        );
        let h_out = h + 2 * padding - k_h + 1;
        let w_out = w + 2 * padding - k_w + 1;
        let mut out = vec![0.0f32; c_out * h_out * w_out];
        for co in 0..c_out {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = 0.0f64;
                    for ci in 0..c_in {
                        for kh in 0..k_h {
                            for kw in 0..k_w {
                                let ih = oh as isize + kh as isize - padding as isize;
                                let iw = ow as isize + kw as isize - padding as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                let xi = (ci * h + ih as usize) * w + iw as usize;
                                let wi = ((co * c_in + ci) * k_h + kh) * k_w + kw;
                                acc += input.data()[xi] as f64 * weights.data()[wi] as f64;
                            }
                        }
                    }
                    out[(co * h_out + oh) * w_out + ow] = acc as f32;
                }
            }
        }
        Tensor::new(vec![c_out, h_out, w_out], out).unwrap()
    }

    #[test]
    fn construction_validates_shape_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f32::INFINITY]).is_err());
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn sub_and_add_are_elementwise() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.5, 1.0, 1.5, 2.0]).unwrap();
        assert_eq!(a.sub(&b).unwrap().data(), &[0.5, 1.0, 1.5, 2.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[1.5, 3.0, 4.5, 6.0]);
        let c = Tensor::zeros(vec![3]).unwrap();
        assert!(a.sub(&c).is_err());
        // x - x is exactly zero element-wise.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, vec![3, 5, 4]);
        assert!(x.sub(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_scalar_case() {
        // 1x1 input, 1x1 kernel, no padding: plain multiplication.
        let x = Tensor::new(vec![1, 1, 1], vec![1.5]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let y = conv2d(&x, &w, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.5]);
    }

    #[test]
    fn conv2d_identity_kernel_with_same_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, vec![2, 6, 5]);
        // 3x3 kernel that picks out the center pixel of its own channel.
        let mut w = vec![0.0f32; 2 * 2 * 3 * 3];
        for c in 0..2 {
            w[((c * 2 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let w = Tensor::new(vec![2, 2, 3, 3], w).unwrap();
        let y = conv2d(&x, &w, 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_matches_reference_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cases = [
            (1, 1, 4, 4, 3, 3, 1),
            (3, 2, 7, 5, 3, 3, 1),
            (2, 4, 6, 6, 1, 1, 0),
            (2, 3, 5, 8, 3, 5, 2),
            (1, 2, 9, 4, 5, 3, 2),
            (3, 3, 4, 4, 3, 3, 0),
        ];
        for &(c_in, c_out, h, w, k_h, k_w, pad) in &cases {
            let x = random_tensor(&mut rng, vec![c_in, h, w]);
            let wt = random_tensor(&mut rng, vec![c_out, c_in, k_h, k_w]);
            let got = conv2d(&x, &wt, pad).unwrap();
            let want = conv2d_reference(&x, &wt, pad);
            assert_eq!(got.shape(), want.shape());
            for (g, e) in got.data().iter().zip(want.data()) {
                // Same f64 accumulation order over the same terms modulo the
                // skipped-zero entries; allow one storage rounding step.
                assert!((g - e).abs() <= 1e-6 * (1.0 + e.abs()), "{g} vs {e}");
            }
        }
    }

    #[test]
    fn conv2d_is_exact_on_small_integers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x_data: Vec<f32> = (0..(2 * 5 * 5))
            .map(|_| rng.random_range(-8i32..=8) as f32)
            .collect();
        let w_data: Vec<f32> = (0..(3 * 2 * 3 * 3))
            .map(|_| rng.random_range(-8i32..=8) as f32)
            .collect();
        let x = Tensor::new(vec![2, 5, 5], x_data).unwrap();
        let w = Tensor::new(vec![3, 2, 3, 3], w_data).unwrap();
        let got = conv2d(&x, &w, 1).unwrap();
        let want = conv2d_reference(&x, &w, 1);
        // Every accumulated value is a small integer, so both paths agree
        // bit for bit.
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn conv2d_linearity_over_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_tensor(&mut rng, vec![2, 6, 6]);
        let b = random_tensor(&mut rng, vec![2, 6, 6]);
        let w = random_tensor(&mut rng, vec![3, 2, 3, 3]);
        let sum = conv2d(&a.add(&b).unwrap(), &w, 1).unwrap();
        let parts = conv2d(&a, &w, 1)
            .unwrap()
            .add(&conv2d(&b, &w, 1).unwrap())
            .unwrap();
        for (s, p) in sum.data().iter().zip(parts.data()) {
            assert!((s - p).abs() <= 1e-5 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let x = Tensor::zeros(vec![2, 4, 4]).unwrap();
        let w = Tensor::zeros(vec![1, 3, 3, 3]).unwrap();
        assert!(conv2d(&x, &w, 1).is_err(), "channel mismatch");
        let w = Tensor::zeros(vec![1, 2, 7, 7]).unwrap();
        assert!(conv2d(&x, &w, 1).is_err(), "kernel larger than padded input");
        let x2 = Tensor::zeros(vec![4, 4]).unwrap();
        assert!(conv2d(&x2, &w, 1).is_err(), "rank-2 input");
    }

    #[test]
    fn channel_norm_map_hand_case() {
        // Pixel vector (3, 4) has norm 5.
        let x = Tensor::new(vec![2, 1, 2], vec![3.0, 0.0, 4.0, 1.0]).unwrap();
        let m = x.channel_norm_map().unwrap();
        assert_eq!(m.shape(), &[1, 2]);
        assert!((m.data()[0] - 5.0).abs() < 1e-7);
        assert!((m.data()[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn channel_norm_map_squares_sum_to_frobenius() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, vec![4, 7, 6]);
        let m = x.channel_norm_map().unwrap();
        let sum_sq: f64 = m.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        let fro = x.frobenius_norm();
        assert!((sum_sq.sqrt() - fro).abs() < 1e-5 * (1.0 + fro));
    }

    #[test]
    fn frobenius_norm_hand_case() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!((x.frobenius_norm() - 5.0).abs() < 1e-12);
        assert_eq!(Tensor::zeros(vec![3, 3]).unwrap().frobenius_norm(), 0.0);
    }

    #[test]
    fn variance_hand_cases() {
        let x = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        assert!((x.variance() - 1.0).abs() < 1e-12, "population variance");
        let c = Tensor::full(vec![5, 5], 2.5).unwrap();
        assert_eq!(c.variance(), 0.0);
    }

    #[test]
    fn mse_hand_case() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 4.0]).unwrap();
        assert!((a.mse(&b).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(a.mse(&a).unwrap(), 0.0);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(vec![4], vec![-1.0, 0.0, 0.5, -0.25]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 0.0]);
    }
}
