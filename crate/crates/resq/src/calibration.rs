//! Post-training calibration.
//!
//! Weights get plain min-max ranges. Activation ranges come from a line
//! search: collect a small batch of the values the quantizer will actually
//! see — whole keyframe activations for the keyframe path, frame differences
//! for the residual path, both gathered *inside the quantized pipeline* so
//! upstream quantization error is part of the picture — then try a grid of
//! candidate ranges and keep the one whose quantized convolution output stays
//! closest to the unquantized one. Clipping a range below the observed
//! maximum often wins: a finer grid over the bulk of the distribution beats
//! covering rare outliers.
//!
//! Residual activations occupy a far narrower range than frame activations
//! whenever consecutive frames are correlated, which is why the residual path
//! survives aggressive bit-widths. Calibration is entirely deterministic:
//! same model, clips and configuration give bit-identical parameters.

use rayon::prelude::*;

use crate::engine::{LayerQuantConfig, ModelSpec, ResidualActQuant};
use crate::error::{Error, Result};
use crate::policy::QuantizerPool;
use crate::quantizer::{compute_scale, fake_quantize, Granularity, QuantParams};
use crate::tensor::{conv2d, Tensor};

/// Range magnitude substituted when a value set is identically zero, mapping
/// to the minimal representable scale `2^-24 / (2^b - 1)` so the degenerate
/// quantizer still satisfies the scale/range identity exactly.
pub const MINIMAL_RANGE_MAGNITUDE: f32 = 1.0 / (1u64 << 25) as f32;

/// Calibration knobs: `samples` values per batch, `grid_points` candidate
/// range endpoints, and the keyframe `period` used when gathering residual
/// samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalibrationConfig {
    samples: usize,
    grid_points: usize,
    period: usize,
}

impl CalibrationConfig {
    pub fn new(samples: usize, grid_points: usize, period: usize) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Calibration("need at least one sample".into()));
        }
        if grid_points < 2 {
            return Err(Error::Calibration(
                "the range grid needs at least two points".into(),
            ));
        }
        if period == 0 {
            return Err(Error::Calibration("keyframe period must be at least 1".into()));
        }
        Ok(CalibrationConfig {
            samples,
            grid_points,
            period,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn grid_points(&self) -> usize {
        self.grid_points
    }

    pub fn period(&self) -> usize {
        self.period
    }
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            samples: 64,
            grid_points: 20,
            period: 3,
        }
    }
}

// ── Weight ranges ────────────────────────────────────────────────────────────

/// Min-max weight quantizer: ranges are the observed extrema, clamped so each
/// range still contains zero. An all-zero tensor (or channel) degenerates to
/// [`MINIMAL_RANGE_MAGNITUDE`].
pub fn weight_minmax_range(
    w: &Tensor,
    granularity: Granularity,
    bit_width: u8,
) -> Result<QuantParams> {
    if bit_width == 0 {
        return Err(Error::InvalidParams(
            "weights need at least one bit".into(),
        ));
    }
    let clamp = |lo: f32, hi: f32| -> (f32, f32) {
        if lo == 0.0 && hi == 0.0 {
            (-MINIMAL_RANGE_MAGNITUDE, MINIMAL_RANGE_MAGNITUDE)
        } else {
            (lo.min(0.0), hi.max(0.0))
        }
    };
    match granularity {
        Granularity::PerTensor => {
            let (lo, hi) = w.min_max();
            let (lo, hi) = clamp(lo, hi);
            QuantParams::per_tensor(bit_width, lo, hi)
        }
        Granularity::PerChannel => {
            let channels = w.shape()[0];
            let slice = w.len() / channels;
            let ranges: Vec<(f32, f32)> = w
                .data()
                .chunks(slice)
                .map(|chunk| {
                    let lo = chunk.iter().cloned().fold(f32::INFINITY, f32::min);
                    let hi = chunk.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    clamp(lo, hi)
                })
                .collect();
            QuantParams::per_channel(bit_width, &ranges)
        }
    }
}

// ── Activation collection ────────────────────────────────────────────────────

/// What to gather at a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectMode {
    /// Keyframe activations: the input arriving at the layer on keyframes,
    /// under keyframe-quantized upstream inference.
    Frame,
    /// Residual differences: `x_t - x_ref` at the layer on non-keyframes,
    /// with upstream layers running the static residual path.
    Residual,
}

/// Quantized weights of the layers upstream of a collection point.
struct UpstreamWeights {
    kf: Vec<Tensor>,
    res: Vec<Tensor>,
}

fn upstream_weights(model: &ModelSpec, upto: usize) -> Result<UpstreamWeights> {
    let mut kf = Vec::with_capacity(upto);
    let mut res = Vec::with_capacity(upto);
    for (l, layer) in model.layers()[..upto].iter().enumerate() {
        let cfg = layer.quant().ok_or_else(|| {
            Error::Calibration(format!(
                "layer {l} upstream of the collection point is not calibrated yet"
            ))
        })?;
        kf.push(fake_quantize(layer.weights(), &cfg.keyframe_weight)?);
        res.push(fake_quantize(layer.weights(), &cfg.residual_weight)?);
    }
    Ok(UpstreamWeights { kf, res })
}

/// Keyframe-path trace up to `upto`: the input arriving at each layer
/// `0..=upto` and the pre-nonlinearity output of each layer `0..upto`.
fn keyframe_trace(
    model: &ModelSpec,
    up: &UpstreamWeights,
    frame: &Tensor,
    upto: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut inputs = Vec::with_capacity(upto + 1);
    let mut pre_acts = Vec::with_capacity(upto);
    let mut cur = frame.clone();
    for l in 0..upto {
        let layer = &model.layers()[l];
        let cfg = layer.quant().expect("validated by upstream_weights");
        let a = fake_quantize(&cur, &cfg.keyframe_act)?;
        let z = conv2d(&a, &up.kf[l], layer.padding())?;
        inputs.push(cur);
        pre_acts.push(z.clone());
        cur = layer.nonlinearity().apply(&z);
    }
    inputs.push(cur);
    Ok((inputs, pre_acts))
}

/// Static residual-path input arriving at `upto`, given the keyframe trace
/// that currently serves as the reference.
fn residual_input(
    model: &ModelSpec,
    up: &UpstreamWeights,
    ref_inputs: &[Tensor],
    ref_pre_acts: &[Tensor],
    frame: &Tensor,
    upto: usize,
) -> Result<Tensor> {
    let mut cur = frame.clone();
    for l in 0..upto {
        let layer = &model.layers()[l];
        let cfg = layer.quant().expect("validated by upstream_weights");
        let delta = cur.sub(&ref_inputs[l])?;
        let d_hat = fake_quantize(&delta, cfg.residual_act.static_params())?;
        let z = conv2d(&d_hat, &up.res[l], layer.padding())?.add(&ref_pre_acts[l])?;
        cur = layer.nonlinearity().apply(&z);
    }
    Ok(cur)
}

/// Gather up to `config.samples()` calibration samples at `layer_index`,
/// walking the clips in order on the configured keyframe schedule. Residual
/// collection steps upstream layers through their static residual quantizers
/// (the top pool entry where a pool is calibrated) against pairwise keyframe
/// references. Errors if no sample can be produced — in particular, residual
/// collection under period 1 leaves nothing between keyframes.
pub fn collect_activations(
    model: &ModelSpec,
    layer_index: usize,
    clips: &[Vec<Tensor>],
    mode: CollectMode,
    config: &CalibrationConfig,
) -> Result<Vec<Tensor>> {
    if layer_index >= model.num_layers() {
        return Err(Error::Calibration(format!(
            "layer {layer_index} out of range for a {}-layer model",
            model.num_layers()
        )));
    }
    if clips.iter().all(|c| c.is_empty()) {
        return Err(Error::Calibration("no frames to calibrate on".into()));
    }
    let up = upstream_weights(model, layer_index)?;
    let period = config.period();
    let mut out: Vec<Tensor> = Vec::new();

    'clips: for clip in clips {
        let mut reference: Option<(Vec<Tensor>, Vec<Tensor>)> = None;
        for (t, frame) in clip.iter().enumerate() {
            if out.len() >= config.samples() {
                break 'clips;
            }
            let is_kf = t % period == 0;
            match mode {
                CollectMode::Frame => {
                    if is_kf {
                        let (inputs, _) = keyframe_trace(model, &up, frame, layer_index)?;
                        out.push(inputs.into_iter().last().expect("trace is non-empty"));
                    }
                }
                CollectMode::Residual => {
                    if is_kf {
                        reference = Some(keyframe_trace(model, &up, frame, layer_index)?);
                    } else {
                        let (ref_inputs, ref_pre) =
                            reference.as_ref().expect("frame 0 is always a keyframe");
                        let x = residual_input(model, &up, ref_inputs, ref_pre, frame, layer_index)?;
                        out.push(x.sub(&ref_inputs[layer_index])?);
                    }
                }
            }
        }
    }

    if out.is_empty() {
        return Err(Error::Calibration(match mode {
            CollectMode::Frame => "no keyframe samples collected".into(),
            CollectMode::Residual => format!(
                "no residual samples collected (period {period} leaves no frames between keyframes)"
            ),
        }));
    }
    Ok(out)
}

// ── Range line search ────────────────────────────────────────────────────────

/// Outcome of a range line search: the winning parameters and the objective
/// they achieved (sum over the batch of squared Frobenius distances between
/// the raw-input and quantized-input convolution outputs).
#[derive(Debug, Clone)]
pub struct LineSearchResult {
    pub params: QuantParams,
    pub objective: f64,
}

/// Evaluate the line-search objective for one parameter set.
fn range_objective(
    samples: &[Tensor],
    references: &[Tensor],
    w_hat: &Tensor,
    padding: usize,
    params: &QuantParams,
) -> Result<f64> {
    let mut total = 0.0f64;
    for (x, r) in samples.iter().zip(references) {
        let y = conv2d(&fake_quantize(x, params)?, w_hat, padding)?;
        total += r.sub(&y)?.frobenius_norm().powi(2);
    }
    Ok(total)
}

/// Clamp a candidate magnitude to a range matching the batch's sign profile:
/// symmetric when both signs occur, one-sided otherwise.
fn range_for_magnitude(m: f32, has_neg: bool, has_pos: bool) -> (f32, f32) {
    match (has_neg, has_pos) {
        (true, false) => (-m, 0.0),
        (false, true) => (0.0, m),
        // Both signs — and the all-zero batch, where the choice is moot.
        _ => (-m, m),
    }
}

/// Pick an activation range for `bit_width`-bit quantization by line search.
///
/// Candidates are `grid_points` evenly spaced values between the batch
/// minimum and maximum; since the scale only depends on the larger range
/// magnitude, the distinct non-zero candidate magnitudes are searched
/// directly and the winner is clamped to the batch's sign profile. Ties go to
/// the smallest magnitude. The convolution against the raw weights `w` is the
/// fixed reference; `w_hat` is the already-quantized weight tensor the
/// quantized activations will actually meet. An all-zero batch degenerates to
/// [`MINIMAL_RANGE_MAGNITUDE`] with a zero objective.
pub fn line_search_activation_range(
    samples: &[Tensor],
    w: &Tensor,
    w_hat: &Tensor,
    padding: usize,
    bit_width: u8,
    grid_points: usize,
) -> Result<LineSearchResult> {
    if samples.is_empty() {
        return Err(Error::Calibration("empty calibration batch".into()));
    }
    if bit_width == 0 {
        return Err(Error::Calibration(
            "line search needs at least one bit; use the 0-bit quantizer directly".into(),
        ));
    }
    if grid_points < 2 {
        return Err(Error::Calibration(
            "the range grid needs at least two points".into(),
        ));
    }
    if w.shape() != w_hat.shape() {
        return Err(Error::ShapeMismatch(
            "raw and quantized weights must share a shape".into(),
        ));
    }

    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for s in samples {
        let (a, b) = s.min_max();
        lo = lo.min(a);
        hi = hi.max(b);
    }
    let has_neg = lo < 0.0;
    let has_pos = hi > 0.0;

    // Distinct non-zero magnitudes of the candidate grid, ascending.
    let mut magnitudes: Vec<f32> = (0..grid_points)
        .map(|i| {
            let t = i as f64 / (grid_points - 1) as f64;
            ((lo as f64 + (hi as f64 - lo as f64) * t) as f32).abs()
        })
        .filter(|&m| m > 0.0)
        .collect();
    magnitudes.sort_by(|a, b| a.partial_cmp(b).expect("magnitudes are finite"));
    magnitudes.dedup();

    if magnitudes.is_empty() {
        // Identically zero batch: any scale reproduces it; use the minimal one.
        let (r_min, r_max) =
            range_for_magnitude(MINIMAL_RANGE_MAGNITUDE, has_neg, has_pos);
        return Ok(LineSearchResult {
            params: QuantParams::per_tensor(bit_width, r_min, r_max)?,
            objective: 0.0,
        });
    }

    let references: Vec<Tensor> = samples
        .iter()
        .map(|x| conv2d(x, w, padding))
        .collect::<Result<_>>()?;

    let objectives: Vec<(QuantParams, f64)> = magnitudes
        .par_iter()
        .map(|&m| {
            let (r_min, r_max) = range_for_magnitude(m, has_neg, has_pos);
            let params = QuantParams::per_tensor(bit_width, r_min, r_max)?;
            let obj = range_objective(samples, &references, w_hat, padding, &params)?;
            Ok((params, obj))
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    for i in 1..objectives.len() {
        if objectives[i].1 < objectives[best].1 {
            best = i;
        }
    }
    let (params, objective) = objectives.into_iter().nth(best).expect("non-empty");
    Ok(LineSearchResult { params, objective })
}

// ── Whole-model calibration ──────────────────────────────────────────────────

/// Residual activation precision request: one fixed bit-width or a pool for
/// the dynamic policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResidualBits {
    Fixed(u8),
    Pool(Vec<u8>),
}

/// Bit-width assignment for a whole model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantScheme {
    pub keyframe_weight_bits: u8,
    pub keyframe_act_bits: u8,
    pub residual_weight_bits: u8,
    pub residual_act_bits: ResidualBits,
    pub weight_granularity: Granularity,
}

impl QuantScheme {
    fn validate(&self) -> Result<()> {
        if self.keyframe_weight_bits == 0
            || self.keyframe_act_bits == 0
            || self.residual_weight_bits == 0
        {
            return Err(Error::Calibration(
                "keyframe and weight bit-widths must be at least 1".into(),
            ));
        }
        if let ResidualBits::Pool(bits) = &self.residual_act_bits {
            if bits.len() < 2 {
                return Err(Error::Calibration(
                    "a quantizer pool needs at least two bit-widths".into(),
                ));
            }
            if bits.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::Calibration(
                    "pool bit-widths must be strictly ascending".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Calibrate every layer of a model on the given clips: min-max weight ranges
/// up front, then per layer (input to output) a line-searched keyframe
/// activation range followed by line-searched residual range(s). Layers are
/// finished in order so each collection step runs under fully quantized
/// upstream inference. Returns a calibrated copy; the input model's existing
/// quantizers, if any, are ignored.
pub fn calibrate_model(
    model: &ModelSpec,
    clips: &[Vec<Tensor>],
    config: &CalibrationConfig,
    scheme: &QuantScheme,
) -> Result<ModelSpec> {
    scheme.validate()?;
    let mut out = model.clone();
    out.clear_quant();

    let weight_params: Vec<(QuantParams, QuantParams)> = model
        .layers()
        .iter()
        .map(|layer| {
            let phi = weight_minmax_range(
                layer.weights(),
                scheme.weight_granularity,
                scheme.keyframe_weight_bits,
            )?;
            let theta = weight_minmax_range(
                layer.weights(),
                scheme.weight_granularity,
                scheme.residual_weight_bits,
            )?;
            Ok((phi, theta))
        })
        .collect::<Result<_>>()?;

    for (l, (layer, (phi_w, theta_w))) in model.layers().iter().zip(&weight_params).enumerate() {
        let w = layer.weights();
        let w_hat_phi = fake_quantize(w, phi_w)?;
        let w_hat_theta = fake_quantize(w, theta_w)?;

        let frame_batch = collect_activations(&out, l, clips, CollectMode::Frame, config)?;
        let keyframe_act = line_search_activation_range(
            &frame_batch,
            w,
            &w_hat_phi,
            layer.padding(),
            scheme.keyframe_act_bits,
            config.grid_points(),
        )?
        .params;

        let residual_batch = collect_activations(&out, l, clips, CollectMode::Residual, config)?;
        let search_residual = |bits: u8| -> Result<QuantParams> {
            if bits == 0 {
                return Ok(QuantParams::zero_bit());
            }
            Ok(line_search_activation_range(
                &residual_batch,
                w,
                &w_hat_theta,
                layer.padding(),
                bits,
                config.grid_points(),
            )?
            .params)
        };
        let residual_act = match &scheme.residual_act_bits {
            ResidualBits::Fixed(0) => ResidualActQuant::Single(QuantParams::zero_bit()),
            ResidualBits::Fixed(bits) => ResidualActQuant::Single(search_residual(*bits)?),
            ResidualBits::Pool(bits) => {
                let entries = bits
                    .iter()
                    .map(|&b| search_residual(b))
                    .collect::<Result<Vec<_>>>()?;
                ResidualActQuant::Pool(QuantizerPool::new(entries)?)
            }
        };

        out.set_layer_quant(
            l,
            LayerQuantConfig {
                keyframe_weight: phi_w.clone(),
                keyframe_act,
                residual_weight: theta_w.clone(),
                residual_act,
            },
        )?;
    }
    Ok(out)
}

/// The scale the degenerate (all-zero) case maps to at a given bit-width.
pub fn minimal_scale(bit_width: u8) -> Result<f32> {
    compute_scale(-MINIMAL_RANGE_MAGNITUDE, MINIMAL_RANGE_MAGNITUDE, bit_width)
}
