//! Uniform symmetric quantization.
//!
//! A quantizer is described by a bit-width `b` and a scale `s` derived from a
//! calibrated value range. Quantizing maps a real value to a signed integer
//! code,
//!
//! ```text
//! code(x) = clamp(round_ties_even(x / s), -2^(b-1), 2^(b-1) - 1)
//! ```
//!
//! and dequantizing maps the code back to `s * code`. The scale is tied to
//! the range endpoints by
//!
//! ```text
//! s = 2 * max(r_max, -r_min) / (2^b - 1)
//! ```
//!
//! so a stored range always reproduces its scale exactly — serialized
//! parameters are validated against this identity on load.
//!
//! `b = 0` is a legal degenerate quantizer meaning "transmit nothing": every
//! value maps to zero and carries no compute cost. It has no scale.
//!
//! Everything funnels through one per-element encode/decode pair, computed in
//! `f64` and stored as `f32`, so `dequantize(quantize_to_codes(x))` and
//! `fake_quantize(x)` agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv_output_extent, Tensor};

/// Maximum supported bit-width. Code magnitudes stay well inside `f32`'s
/// exactly-representable integer range, which keeps fake-quantization
/// idempotent (re-encoding a dequantized value always lands on the same code).
pub const MAX_BIT_WIDTH: u8 = 24;

/// Scale sharing across a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One scale for the whole tensor (used for activations).
    PerTensor,
    /// One scale per leading-axis slice (used for weights: one per output
    /// channel).
    PerChannel,
}

/// Calibrated parameters of one quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "repr::QuantParamsRepr", into = "repr::QuantParamsRepr")]
pub struct QuantParams {
    bit_width: u8,
    granularity: Granularity,
    /// One entry for per-tensor, one per channel otherwise. Empty iff
    /// `bit_width == 0`.
    scales: Vec<f32>,
    /// The calibrated `(r_min, r_max)` behind each scale, same length as
    /// `scales`. Every range satisfies `r_min <= 0 <= r_max`.
    ranges: Vec<(f32, f32)>,
}

/// Scale from range endpoints: `2 * max(r_max, -r_min) / (2^b - 1)`.
///
/// Requires `b >= 1` (a zero-bit quantizer has no scale), `r_min <= 0 <= r_max`,
/// and a non-degenerate range (not both endpoints zero).
pub fn compute_scale(r_min: f32, r_max: f32, bit_width: u8) -> Result<f32> {
    if bit_width == 0 {
        return Err(Error::InvalidParams(
            "a 0-bit quantizer has no scale".into(),
        ));
    }
    if bit_width > MAX_BIT_WIDTH {
        return Err(Error::InvalidParams(format!(
            "bit-width {bit_width} exceeds supported maximum {MAX_BIT_WIDTH}"
        )));
    }
    if !(r_min <= 0.0 && 0.0 <= r_max) || !r_min.is_finite() || !r_max.is_finite() {
        return Err(Error::InvalidParams(format!(
            "range ({r_min}, {r_max}) must be finite and contain zero"
        )));
    }
    let m = (r_max as f64).max(-(r_min as f64));
    if m == 0.0 {
        return Err(Error::DegenerateRange);
    }
    let levels = (1u64 << bit_width) as f64 - 1.0;
    Ok((2.0 * m / levels) as f32)
}

impl QuantParams {
    /// The degenerate "quantize to zero" quantizer.
    pub fn zero_bit() -> Self {
        QuantParams {
            bit_width: 0,
            granularity: Granularity::PerTensor,
            scales: Vec::new(),
            ranges: Vec::new(),
        }
    }

    /// Single-scale quantizer over the given range.
    pub fn per_tensor(bit_width: u8, r_min: f32, r_max: f32) -> Result<Self> {
        let scale = compute_scale(r_min, r_max, bit_width)?;
        Ok(QuantParams {
            bit_width,
            granularity: Granularity::PerTensor,
            scales: vec![scale],
            ranges: vec![(r_min, r_max)],
        })
    }

    /// One scale per leading-axis slice, from per-channel ranges.
    pub fn per_channel(bit_width: u8, ranges: &[(f32, f32)]) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::InvalidParams(
                "per-channel parameters need at least one range".into(),
            ));
        }
        let scales = ranges
            .iter()
            .map(|&(lo, hi)| compute_scale(lo, hi, bit_width))
            .collect::<Result<Vec<_>>>()?;
        Ok(QuantParams {
            bit_width,
            granularity: Granularity::PerChannel,
            scales,
            ranges: ranges.to_vec(),
        })
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    pub fn is_zero_bit(&self) -> bool {
        self.bit_width == 0
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn ranges(&self) -> &[(f32, f32)] {
        &self.ranges
    }

    /// Scale shared by the whole tensor. Errors for per-channel or zero-bit
    /// parameters.
    pub fn scalar_scale(&self) -> Result<f32> {
        if self.bit_width == 0 {
            return Err(Error::InvalidParams(
                "a 0-bit quantizer has no scale".into(),
            ));
        }
        match self.granularity {
            Granularity::PerTensor => Ok(self.scales[0]),
            Granularity::PerChannel => Err(Error::InvalidParams(
                "per-channel parameters have no single scale".into(),
            )),
        }
    }

    /// Integer code bounds `[-2^(b-1), 2^(b-1) - 1]`.
    fn code_bounds(&self) -> (f64, f64) {
        let half = 1i64 << (self.bit_width - 1);
        (-(half as f64), (half - 1) as f64)
    }

    /// Check that `x`'s shape is compatible with this parameter set and
    /// return the per-slice scale layout: `(slice_len, scales)`.
    fn slicing<'a>(&'a self, x: &Tensor) -> Result<(usize, &'a [f32])> {
        match self.granularity {
            Granularity::PerTensor => Ok((x.len(), &self.scales)),
            Granularity::PerChannel => {
                let channels = x.shape()[0];
                if channels != self.scales.len() {
                    return Err(Error::InvalidParams(format!(
                        "tensor has {channels} leading slices but parameters hold {} scales",
                        self.scales.len()
                    )));
                }
                Ok((x.len() / channels, &self.scales))
            }
        }
    }
}

#[inline]
fn encode_value(v: f32, scale: f32, qlo: f64, qhi: f64) -> i32 {
    let q = (v as f64 / scale as f64).round_ties_even();
    q.clamp(qlo, qhi) as i32
}

#[inline]
fn decode_value(code: i32, scale: f32) -> f32 {
    (scale as f64 * code as f64) as f32
}

/// Quantize and immediately dequantize: the value each code stands for.
/// Output has the same shape as the input.
pub fn fake_quantize(x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    if params.is_zero_bit() {
        return Tensor::zeros(x.shape().to_vec());
    }
    let (slice_len, scales) = params.slicing(x)?;
    let (qlo, qhi) = params.code_bounds();
    let mut out = Vec::with_capacity(x.len());
    for (chunk, &scale) in x.data().chunks(slice_len).zip(scales) {
        out.extend(
            chunk
                .iter()
                .map(|&v| decode_value(encode_value(v, scale, qlo, qhi), scale)),
        );
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// A tensor held as integer codes plus the parameters that produced them.
/// For a zero-bit quantizer no codes are stored, only the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<i32>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    /// Reconstruct the real-valued tensor the codes stand for.
    pub fn dequantize(&self) -> Result<Tensor> {
        if self.params.is_zero_bit() {
            return Tensor::zeros(self.shape.clone());
        }
        let channels = match self.params.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => self.shape[0],
        };
        let slice_len = self.codes.len() / channels;
        let mut out = Vec::with_capacity(self.codes.len());
        for (chunk, &scale) in self.codes.chunks(slice_len).zip(&self.params.scales) {
            out.extend(chunk.iter().map(|&c| decode_value(c, scale)));
        }
        Tensor::new(self.shape.clone(), out)
    }
}

/// Quantize a tensor to integer codes.
pub fn quantize_to_codes(x: &Tensor, params: &QuantParams) -> Result<QuantizedTensor> {
    if params.is_zero_bit() {
        return Ok(QuantizedTensor {
            shape: x.shape().to_vec(),
            codes: Vec::new(),
            params: params.clone(),
        });
    }
    let (slice_len, scales) = params.slicing(x)?;
    let (qlo, qhi) = params.code_bounds();
    let mut codes = Vec::with_capacity(x.len());
    for (chunk, &scale) in x.data().chunks(slice_len).zip(scales) {
        codes.extend(chunk.iter().map(|&v| encode_value(v, scale, qlo, qhi)));
    }
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        codes,
        params: params.clone(),
    })
}

/// Convolution evaluated entirely on integer codes, with the result rescaled
/// back to real values — the arithmetic a fixed-point accelerator would run.
///
/// The activation must be quantized per-tensor (`[C, H, W]`); weights may be
/// per-tensor or per-channel (`[C_out, C_in, kH, kW]`, one scale per output
/// channel). Code products accumulate exactly in `i64`; each output is then
/// scaled by `s_act * s_weight(channel)`. If either side is zero-bit the
/// result is identically zero.
pub fn integer_conv2d(
    x: &QuantizedTensor,
    w: &QuantizedTensor,
    padding: usize,
) -> Result<Tensor> {
    if x.shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "integer_conv2d input must be [C, H, W], got {:?}",
            x.shape
        )));
    }
    if w.shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "integer_conv2d weights must be [C_out, C_in, kH, kW], got {:?}",
            w.shape
        )));
    }
    let (c_in, h, win) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, wc_in, k_h, k_w) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if c_in != wc_in {
        return Err(Error::ShapeMismatch(format!(
            "integer_conv2d channel mismatch: input has {c_in}, weights expect {wc_in}"
        )));
    }
    let h_out = conv_output_extent(h, k_h, padding)?;
    let w_out = conv_output_extent(win, k_w, padding)?;

    if x.params.is_zero_bit() || w.params.is_zero_bit() {
        return Tensor::zeros(vec![c_out, h_out, w_out]);
    }
    if x.params.granularity != Granularity::PerTensor {
        return Err(Error::InvalidParams(
            "integer_conv2d activations must be quantized per-tensor".into(),
        ));
    }
    let s_x = x.params.scales[0] as f64;
    let w_scales = &w.params.scales;

    let xc = &x.codes;
    let wc = &w.codes;
    let mut out = vec![0.0f32; c_out * h_out * w_out];
    for co in 0..c_out {
        let s_w = match w.params.granularity {
            Granularity::PerTensor => w_scales[0] as f64,
            Granularity::PerChannel => w_scales[co] as f64,
        };
        let rescale = s_x * s_w;
        let out_base = co * h_out * w_out;
        let w_co = co * c_in * k_h * k_w;
        for oh in 0..h_out {
            let kh_lo = padding.saturating_sub(oh);
            let kh_hi = (h + padding - oh).min(k_h);
            for ow in 0..w_out {
                let kw_lo = padding.saturating_sub(ow);
                let kw_hi = (win + padding - ow).min(k_w);
                let mut acc = 0i64;
                for ci in 0..c_in {
                    let x_ci = ci * h * win;
                    let w_ci = w_co + ci * k_h * k_w;
                    for kh in kh_lo..kh_hi {
                        let x_row = x_ci + (oh + kh - padding) * win;
                        let w_row = w_ci + kh * k_w;
                        for kw in kw_lo..kw_hi {
                            acc += xc[x_row + ow + kw - padding] as i64 * wc[w_row + kw] as i64;
                        }
                    }
                }
                out[out_base + oh * w_out + ow] = (acc as f64 * rescale) as f32;
            }
        }
    }
    Tensor::new(vec![c_out, h_out, w_out], out)
}

/// Error a weight quantizer introduces into a convolution:
/// `conv(x, w) - conv(x, fake_quantize(w))`.
pub fn weight_quant_error(
    x: &Tensor,
    w: &Tensor,
    params: &QuantParams,
    padding: usize,
) -> Result<Tensor> {
    let w_hat = fake_quantize(w, params)?;
    conv2d(x, w, padding)?.sub(&conv2d(x, &w_hat, padding)?)
}

/// Error an activation quantizer introduces before the convolution:
/// `x - fake_quantize(x)`.
pub fn activation_quant_error(x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    x.sub(&fake_quantize(x, params)?)
}

// ── Serialized form ──────────────────────────────────────────────────────────

mod repr {
    use super::*;

    #[derive(Serialize, Deserialize, Clone)]
    pub struct RangeRepr {
        pub min: f32,
        pub max: f32,
    }

    /// On-disk schema: `bit_width`, `granularity`, `scales`, and the overall
    /// `range` envelope, plus per-channel `ranges` when applicable. Scales are
    /// redundant with ranges and are re-derived and compared on load.
    #[derive(Serialize, Deserialize, Clone)]
    pub struct QuantParamsRepr {
        pub bit_width: u8,
        pub granularity: Granularity,
        pub scales: Vec<f32>,
        pub range: RangeRepr,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub ranges: Option<Vec<RangeRepr>>,
    }

    impl From<QuantParams> for QuantParamsRepr {
        fn from(p: QuantParams) -> Self {
            let envelope = if p.ranges.is_empty() {
                RangeRepr { min: 0.0, max: 0.0 }
            } else {
                RangeRepr {
                    min: p.ranges.iter().map(|r| r.0).fold(f32::INFINITY, f32::min),
                    max: p
                        .ranges
                        .iter()
                        .map(|r| r.1)
                        .fold(f32::NEG_INFINITY, f32::max),
                }
            };
            let ranges = match p.granularity {
                Granularity::PerTensor => None,
                Granularity::PerChannel => Some(
                    p.ranges
                        .iter()
                        .map(|&(min, max)| RangeRepr { min, max })
                        .collect(),
                ),
            };
            QuantParamsRepr {
                bit_width: p.bit_width,
                granularity: p.granularity,
                scales: p.scales.clone(),
                range: envelope,
                ranges,
            }
        }
    }

    impl TryFrom<QuantParamsRepr> for QuantParams {
        type Error = Error;

        fn try_from(r: QuantParamsRepr) -> Result<QuantParams> {
            if r.bit_width == 0 {
                if !r.scales.is_empty() || r.ranges.is_some() {
                    return Err(Error::InvalidParams(
                        "a 0-bit quantizer carries no scales or ranges".into(),
                    ));
                }
                return Ok(QuantParams::zero_bit());
            }
            let built = match r.granularity {
                Granularity::PerTensor => {
                    if r.ranges.is_some() {
                        return Err(Error::InvalidParams(
                            "per-tensor parameters must not carry per-channel ranges".into(),
                        ));
                    }
                    QuantParams::per_tensor(r.bit_width, r.range.min, r.range.max)?
                }
                Granularity::PerChannel => {
                    let ranges = r.ranges.ok_or_else(|| {
                        Error::InvalidParams(
                            "per-channel parameters require a ranges list".into(),
                        )
                    })?;
                    let pairs: Vec<(f32, f32)> =
                        ranges.iter().map(|rr| (rr.min, rr.max)).collect();
                    let p = QuantParams::per_channel(r.bit_width, &pairs)?;
                    let env_min = pairs.iter().map(|r| r.0).fold(f32::INFINITY, f32::min);
                    let env_max = pairs.iter().map(|r| r.1).fold(f32::NEG_INFINITY, f32::max);
                    if env_min != r.range.min || env_max != r.range.max {
                        return Err(Error::InvalidParams(format!(
                            "range envelope ({}, {}) does not match per-channel ranges",
                            r.range.min, r.range.max
                        )));
                    }
                    p
                }
            };
            if built.scales.len() != r.scales.len() {
                return Err(Error::InvalidParams(format!(
                    "expected {} scales, found {}",
                    built.scales.len(),
                    r.scales.len()
                )));
            }
            for (i, (&stored, &derived)) in r.scales.iter().zip(&built.scales).enumerate() {
                if stored != derived {
                    return Err(Error::InvalidParams(format!(
                        "scale {i} is {stored} but the stored range derives {derived}"
                    )));
                }
            }
            Ok(built)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lim: f32) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-lim..lim)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn compute_scale_hand_cases() {
        // Symmetric unit range at 4 bits: 2/15.
        let s = compute_scale(-1.0, 1.0, 4).unwrap();
        assert_eq!(s, (2.0f64 / 15.0) as f32);
        // Asymmetric range uses the larger magnitude.
        let s = compute_scale(-0.5, 2.0, 8).unwrap();
        assert_eq!(s, (4.0f64 / 255.0) as f32);
        // Doubling the range doubles the scale exactly.
        let s1 = compute_scale(-1.0, 1.0, 6).unwrap();
        let s2 = compute_scale(-2.0, 2.0, 6).unwrap();
        assert_eq!(s2, 2.0 * s1);
    }

    #[test]
    fn compute_scale_rejects_bad_input() {
        assert!(matches!(
            compute_scale(0.0, 0.0, 8),
            Err(Error::DegenerateRange)
        ));
        assert!(compute_scale(-1.0, 1.0, 0).is_err(), "0-bit has no scale");
        assert!(compute_scale(0.5, 1.0, 8).is_err(), "range must contain 0");
        assert!(compute_scale(-1.0, -0.5, 8).is_err());
        assert!(compute_scale(-1.0, 1.0, MAX_BIT_WIDTH + 1).is_err());
    }

    #[test]
    fn fake_quantize_hand_values() {
        let p = QuantParams::per_tensor(4, -1.0, 1.0).unwrap();
        let s = p.scalar_scale().unwrap();
        let x = Tensor::new(vec![4], vec![0.0, 0.5, 1.9, -3.0]).unwrap();
        let q = fake_quantize(&x, &p).unwrap();
        assert_eq!(q.data()[0], 0.0);
        // 0.5 / (2/15) = 3.75 -> code 4.
        assert_eq!(q.data()[1], (s as f64 * 4.0) as f32);
        // 1.9 saturates at code 7 = 14/15.
        assert_eq!(q.data()[2], (s as f64 * 7.0) as f32);
        assert!((q.data()[2] as f64 - 14.0 / 15.0).abs() < 1e-7);
        // -3.0 saturates at code -8.
        assert_eq!(q.data()[3], (s as f64 * -8.0) as f32);
    }

    #[test]
    fn rounding_breaks_ties_to_even() {
        // m = 0.9375 at 4 bits gives s = 0.125 exactly (binary-representable),
        // so the half-way points below are exact ties.
        let p = QuantParams::per_tensor(4, -0.9375, 0.9375).unwrap();
        assert_eq!(p.scalar_scale().unwrap(), 0.125);
        let x = Tensor::new(vec![4], vec![0.3125, 0.4375, -0.3125, -0.0625]).unwrap();
        let q = quantize_to_codes(&x, &p).unwrap();
        // 2.5 -> 2, 3.5 -> 4, -2.5 -> -2, -0.5 -> 0.
        assert_eq!(q.codes(), &[2, 4, -2, 0]);
        assert_eq!(
            q.dequantize().unwrap().data(),
            &[0.25, 0.5, -0.25, 0.0]
        );
    }

    #[test]
    fn in_range_error_is_bounded_by_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &bits in &[2u8, 3, 4, 8] {
            let p = QuantParams::per_tensor(bits, -1.0, 1.0).unwrap();
            let s = p.scalar_scale().unwrap() as f64;
            let x = random_tensor(&mut rng, vec![512], 1.0);
            let err = activation_quant_error(&x, &p).unwrap();
            for &e in err.data() {
                assert!(
                    (e as f64).abs() <= s / 2.0 * (1.0 + 1e-6),
                    "bits={bits}: |{e}| > s/2 = {}",
                    s / 2.0
                );
            }
        }
    }

    #[test]
    fn out_of_range_error_exceeds_half_scale() {
        let p = QuantParams::per_tensor(4, -1.0, 1.0).unwrap();
        let s = p.scalar_scale().unwrap();
        let x = Tensor::new(vec![1], vec![10.0]).unwrap();
        let err = activation_quant_error(&x, &p).unwrap();
        assert!(err.data()[0].abs() > s / 2.0);
        // Saturated value is the top grid point 7 * 2/15.
        assert!((err.data()[0] - (10.0 - 14.0 / 15.0) as f32).abs() < 1e-6);
    }

    #[test]
    fn fake_quantize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for &bits in &[2u8, 3, 4, 8, 16] {
            let p = QuantParams::per_tensor(bits, -0.7, 1.3).unwrap();
            let x = random_tensor(&mut rng, vec![256], 2.0);
            let once = fake_quantize(&x, &p).unwrap();
            let twice = fake_quantize(&once, &p).unwrap();
            assert_eq!(once.data(), twice.data(), "bits={bits}");
        }
    }

    #[test]
    fn fake_quantize_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = QuantParams::per_tensor(4, -1.0, 1.0).unwrap();
        for _ in 0..2000 {
            let a: f32 = rng.random_range(-2.0..2.0);
            let b: f32 = rng.random_range(-2.0..2.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let t = Tensor::new(vec![2], vec![lo, hi]).unwrap();
            let q = fake_quantize(&t, &p).unwrap();
            assert!(q.data()[0] <= q.data()[1], "q({lo}) > q({hi})");
        }
    }

    #[test]
    fn codes_round_trip_matches_fake_quantize_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let p = QuantParams::per_tensor(5, -1.1, 0.9).unwrap();
        let x = random_tensor(&mut rng, vec![3, 9, 7], 1.5);
        let via_codes = quantize_to_codes(&x, &p).unwrap().dequantize().unwrap();
        let direct = fake_quantize(&x, &p).unwrap();
        assert_eq!(via_codes.data(), direct.data());

        let pc = QuantParams::per_channel(4, &[(-1.0, 1.0), (-0.25, 0.5), (-2.0, 2.0)]).unwrap();
        let via_codes = quantize_to_codes(&x, &pc).unwrap().dequantize().unwrap();
        let direct = fake_quantize(&x, &pc).unwrap();
        assert_eq!(via_codes.data(), direct.data());
    }

    #[test]
    fn codes_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for &bits in &[2u8, 4, 8] {
            let p = QuantParams::per_tensor(bits, -0.3, 0.3).unwrap();
            let x = random_tensor(&mut rng, vec![300], 5.0);
            let q = quantize_to_codes(&x, &p).unwrap();
            let lo = -(1i32 << (bits - 1));
            let hi = (1i32 << (bits - 1)) - 1;
            assert!(q.codes().iter().all(|&c| lo <= c && c <= hi));
        }
    }

    #[test]
    fn per_channel_applies_each_scale_to_its_slice() {
        let p = QuantParams::per_channel(4, &[(-1.0, 1.0), (-2.0, 2.0)]).unwrap();
        // Same value in both channels quantizes differently.
        let x = Tensor::new(vec![2, 1, 2], vec![0.5, -0.5, 0.5, -0.5]).unwrap();
        let q = fake_quantize(&x, &p).unwrap();
        let s0 = p.scales()[0] as f64;
        let s1 = p.scales()[1] as f64;
        // Channel 0: 0.5 / (2/15) = 3.75 -> 4. Channel 1: 0.5 / (4/15) = 1.875 -> 2.
        assert_eq!(q.data()[0], (s0 * 4.0) as f32);
        assert_eq!(q.data()[2], (s1 * 2.0) as f32);
        // Channel-count mismatch is rejected.
        let bad = Tensor::zeros(vec![3, 1, 2]).unwrap();
        assert!(fake_quantize(&bad, &p).is_err());
    }

    #[test]
    fn zero_bit_quantizes_to_zero_and_stores_no_codes() {
        let p = QuantParams::zero_bit();
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let fq = fake_quantize(&x, &p).unwrap();
        assert!(fq.data().iter().all(|&v| v == 0.0));
        let q = quantize_to_codes(&x, &p).unwrap();
        assert!(q.codes().is_empty());
        assert_eq!(q.dequantize().unwrap().data(), fq.data());
    }

    #[test]
    fn integer_conv_matches_real_conv_on_dequantized_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = random_tensor(&mut rng, vec![2, 6, 6], 1.0);
        let w = random_tensor(&mut rng, vec![3, 2, 3, 3], 0.5);
        let pa = QuantParams::per_tensor(8, -1.0, 1.0).unwrap();
        let ranges: Vec<(f32, f32)> = vec![(-0.5, 0.5); 3];
        let pw = QuantParams::per_channel(8, &ranges).unwrap();
        let qx = quantize_to_codes(&x, &pa).unwrap();
        let qw = quantize_to_codes(&w, &pw).unwrap();
        let integer = integer_conv2d(&qx, &qw, 1).unwrap();
        let real = conv2d(
            &qx.dequantize().unwrap(),
            &qw.dequantize().unwrap(),
            1,
        )
        .unwrap();
        assert_eq!(integer.shape(), real.shape());
        for (i, r) in integer.data().iter().zip(real.data()) {
            assert!((i - r).abs() <= 1e-5 * (1.0 + r.abs()), "{i} vs {r}");
        }
    }

    #[test]
    fn integer_conv_zero_bit_side_yields_zero() {
        let x = Tensor::full(vec![1, 4, 4], 1.0).unwrap();
        let w = Tensor::full(vec![2, 1, 3, 3], 0.5).unwrap();
        let qx = quantize_to_codes(&x, &QuantParams::zero_bit()).unwrap();
        let qw = quantize_to_codes(&w, &QuantParams::per_tensor(8, -1.0, 1.0).unwrap()).unwrap();
        let y = integer_conv2d(&qx, &qw, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_error_is_zero_for_grid_aligned_weights() {
        let p = QuantParams::per_tensor(4, -0.9375, 0.9375).unwrap(); // s = 0.125
        let w = Tensor::new(vec![1, 1, 1, 1], vec![0.25]).unwrap();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let err = weight_quant_error(&x, &w, &p, 0).unwrap();
        assert!(err.data().iter().all(|&v| v == 0.0));
        // Zero input likewise nulls the error regardless of the weights.
        let w2 = Tensor::new(vec![1, 1, 1, 1], vec![0.317]).unwrap();
        let x0 = Tensor::zeros(vec![1, 2, 2]).unwrap();
        let err = weight_quant_error(&x0, &w2, &p, 0).unwrap();
        assert!(err.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_error_equals_conv_with_weight_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let x = random_tensor(&mut rng, vec![2, 5, 5], 1.0);
        let w = random_tensor(&mut rng, vec![2, 2, 3, 3], 0.6);
        let p = QuantParams::per_tensor(4, -0.6, 0.6).unwrap();
        let got = weight_quant_error(&x, &w, &p, 1).unwrap();
        let w_hat = fake_quantize(&w, &p).unwrap();
        let want = conv2d(&x, &w.sub(&w_hat).unwrap(), 1).unwrap();
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() <= 1e-5 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn json_round_trip_per_tensor() {
        let p = QuantParams::per_tensor(4, -1.0, 1.0).unwrap();
        let json = serde_json::to_string_pretty(&p).unwrap();
        assert!(json.contains("\"bit_width\": 4"));
        assert!(json.contains("per-tensor"));
        let back: QuantParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn json_round_trip_per_channel_and_zero_bit() {
        let p = QuantParams::per_channel(8, &[(-0.3, 0.7), (-1.5, 0.0)]).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let back: QuantParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);

        let z = QuantParams::zero_bit();
        let json = serde_json::to_string(&z).unwrap();
        let back: QuantParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn json_with_inconsistent_scale_is_rejected() {
        let json = r#"{
            "bit_width": 4,
            "granularity": "per-tensor",
            "scales": [0.25],
            "range": {"min": -1.0, "max": 1.0}
        }"#;
        let r: std::result::Result<QuantParams, _> = serde_json::from_str(json);
        assert!(r.is_err(), "scale 0.25 is not 2/15");
    }
}
