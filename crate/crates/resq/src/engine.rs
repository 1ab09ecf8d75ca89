//! Sigma-delta inference over frame sequences.
//!
//! A clip is processed on a fixed keyframe schedule. Keyframes run the whole
//! network through the high-precision quantizer set and cache, per layer, the
//! input that arrived there and the pre-activation output. Every other frame
//! transmits only the difference against the cached reference input through
//! the low-precision residual quantizers and adds the cached reference output
//! back before the nonlinearity:
//!
//! ```text
//! keyframe:  z_ref = conv(q_phi(x), w_phi)            (reference refresh)
//! residual:  z     = conv(q_theta(x - x_ref), w_theta) + z_ref
//! ```
//!
//! Because convolution is linear, the reconstruction is exact when
//! quantization is disabled; with quantization on, the residual path spends
//! far fewer bits because frame-to-frame differences occupy a much smaller
//! range than whole frames.
//!
//! Two reference policies are supported: *pairwise* keeps the keyframe as the
//! reference for the whole period (residual steps are independent of each
//! other), *recurrent* re-references each frame against its reconstructed
//! predecessor (smaller deltas, but quantization error compounds between
//! keyframes).

use serde::{Deserialize, Serialize};

use crate::bops::{self, ActBits, BopReport, ConvShape, LayerFrameBops};
use crate::error::{Error, Result};
use crate::policy::{self, IndexMap, PolicyConfig, QuantizerPool};
use crate::quantizer::{fake_quantize, Granularity, QuantParams};
use crate::tensor::{conv2d, conv_output_extent, relu, Tensor};

// ── Model description ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    None,
    Relu,
}

impl Nonlinearity {
    pub fn apply(self, z: &Tensor) -> Tensor {
        match self {
            Nonlinearity::None => z.clone(),
            Nonlinearity::Relu => relu(z),
        }
    }
}

/// Residual-path activation quantizer: either one fixed parameter set or a
/// pool of candidates for the per-pixel dynamic policy.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualActQuant {
    Single(QuantParams),
    Pool(QuantizerPool),
}

impl ResidualActQuant {
    /// Parameters used by *static* residual inference: the single set, or the
    /// highest-precision pool entry when a pool was calibrated.
    pub fn static_params(&self) -> &QuantParams {
        match self {
            ResidualActQuant::Single(p) => p,
            ResidualActQuant::Pool(pool) => pool.top(),
        }
    }
}

/// Calibrated quantizers for one layer: a high-precision keyframe pair and a
/// low-precision residual pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuantConfig {
    pub keyframe_weight: QuantParams,
    pub keyframe_act: QuantParams,
    pub residual_weight: QuantParams,
    pub residual_act: ResidualActQuant,
}

/// One convolutional layer: weights `[C_out, C_in, kH, kW]`, symmetric zero
/// padding, optional nonlinearity, and quantizers once calibrated.
#[derive(Debug, Clone)]
pub struct Layer {
    weights: Tensor,
    padding: usize,
    nonlinearity: Nonlinearity,
    quant: Option<LayerQuantConfig>,
}

impl Layer {
    pub fn new(weights: Tensor, padding: usize, nonlinearity: Nonlinearity) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "layer weights must be [C_out, C_in, kH, kW], got {:?}",
                weights.shape()
            )));
        }
        Ok(Layer {
            weights,
            padding,
            nonlinearity,
            quant: None,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn quant(&self) -> Option<&LayerQuantConfig> {
        self.quant.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// A stack of convolutional layers processed in order.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    layers: Vec<Layer>,
}

impl ModelSpec {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} outputs {} channels but layer {} expects {}",
                    pair[0].out_channels(),
                    l + 1,
                    pair[1].in_channels()
                )));
            }
        }
        Ok(ModelSpec { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn is_calibrated(&self) -> bool {
        self.layers.iter().all(|l| l.quant.is_some())
    }

    /// Install calibrated quantizers on one layer, validating scale counts
    /// against the layer's weight shape and that activation quantizers are
    /// per-tensor.
    pub fn set_layer_quant(&mut self, layer: usize, cfg: LayerQuantConfig) -> Result<()> {
        let c_out = self.layers[layer].out_channels();
        for (name, p) in [
            ("keyframe_weight", &cfg.keyframe_weight),
            ("residual_weight", &cfg.residual_weight),
        ] {
            if p.granularity() == Granularity::PerChannel && p.scales().len() != c_out {
                return Err(Error::InvalidParams(format!(
                    "layer {layer} {name}: {} scales for {c_out} output channels",
                    p.scales().len()
                )));
            }
        }
        let mut acts: Vec<&QuantParams> = vec![&cfg.keyframe_act];
        match &cfg.residual_act {
            ResidualActQuant::Single(p) => acts.push(p),
            ResidualActQuant::Pool(pool) => acts.extend(pool.entries()),
        }
        for p in acts {
            if !p.is_zero_bit() && p.granularity() != Granularity::PerTensor {
                return Err(Error::InvalidParams(format!(
                    "layer {layer}: activation quantizers must be per-tensor"
                )));
            }
        }
        self.layers[layer].quant = Some(cfg);
        Ok(())
    }

    /// Drop all calibrated quantizers.
    pub fn clear_quant(&mut self) {
        for l in &mut self.layers {
            l.quant = None;
        }
    }
}

// ── Inference configuration ──────────────────────────────────────────────────

/// Whether quantizers are applied or the network runs in plain `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecisionMode {
    Quantized,
    FullPrecision,
}

/// Which calibrated parameter pair a plain frame pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichParams {
    Keyframe,
    Residual,
}

/// How cached references evolve between keyframes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMode {
    /// References stay at the last keyframe; residual steps are independent.
    Pairwise,
    /// References advance to each reconstructed frame; deltas shrink but
    /// quantization error accumulates until the next keyframe.
    Recurrent,
}

/// Keyframe schedule: frame `t` is a keyframe iff `t % period == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleConfig {
    period: usize,
}

impl ScheduleConfig {
    pub fn new(period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config("keyframe period must be at least 1".into()));
        }
        Ok(ScheduleConfig { period })
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn is_keyframe(&self, frame_index: usize) -> bool {
        frame_index.is_multiple_of(self.period)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Frame,
    ResqPairwise,
    ResqRecurrent,
    ResqDynamic,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(RunMode::Frame),
            "resq-pairwise" => Ok(RunMode::ResqPairwise),
            "resq-recurrent" => Ok(RunMode::ResqRecurrent),
            "resq-dynamic" => Ok(RunMode::ResqDynamic),
            other => Err(Error::Parse(format!(
                "unknown run mode {other:?}; expected frame, resq-pairwise, resq-recurrent or resq-dynamic"
            ))),
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunMode::Frame => "frame",
            RunMode::ResqPairwise => "resq-pairwise",
            RunMode::ResqRecurrent => "resq-recurrent",
            RunMode::ResqDynamic => "resq-dynamic",
        })
    }
}

// ── Residual state ───────────────────────────────────────────────────────────

/// Per-layer reference cached by the most recent keyframe (or, in recurrent
/// mode, the most recent frame): the input that arrived at the layer inside
/// the quantized pipeline, before its own activation quantizer, and the
/// pre-nonlinearity output that was produced from it.
#[derive(Debug, Clone)]
pub struct LayerReference {
    pub input: Tensor,
    pub output: Tensor,
}

/// Mutable state threaded through a sigma-delta sequence.
#[derive(Debug, Clone)]
pub struct ResidualState {
    mode: ReferenceMode,
    refs: Vec<LayerReference>,
}

impl ResidualState {
    pub fn new(mode: ReferenceMode) -> Self {
        ResidualState {
            mode,
            refs: Vec::new(),
        }
    }

    pub fn mode(&self) -> ReferenceMode {
        self.mode
    }

    pub fn is_initialized(&self) -> bool {
        !self.refs.is_empty()
    }

    pub fn references(&self) -> &[LayerReference] {
        &self.refs
    }
}

// ── Prepared forward passes ──────────────────────────────────────────────────

/// A model with weight quantization resolved up front, so sequences don't
/// re-quantize weights on every frame. In full-precision mode the raw weights
/// are used on both paths and activation quantizers are skipped entirely.
pub(crate) struct PreparedModel<'m> {
    pub(crate) model: &'m ModelSpec,
    pub(crate) precision: PrecisionMode,
    kf_weights: Vec<Tensor>,
    res_weights: Vec<Tensor>,
}

impl<'m> PreparedModel<'m> {
    pub(crate) fn new(model: &'m ModelSpec, precision: PrecisionMode) -> Result<Self> {
        let mut kf_weights = Vec::with_capacity(model.num_layers());
        let mut res_weights = Vec::with_capacity(model.num_layers());
        for (l, layer) in model.layers.iter().enumerate() {
            match precision {
                PrecisionMode::FullPrecision => {
                    kf_weights.push(layer.weights.clone());
                    res_weights.push(layer.weights.clone());
                }
                PrecisionMode::Quantized => {
                    let cfg = layer.quant.as_ref().ok_or_else(|| {
                        Error::Sequencing(format!(
                            "layer {l} has no calibrated quantizers; calibrate the model or run with quantization disabled"
                        ))
                    })?;
                    kf_weights.push(fake_quantize(&layer.weights, &cfg.keyframe_weight)?);
                    res_weights.push(fake_quantize(&layer.weights, &cfg.residual_weight)?);
                }
            }
        }
        Ok(PreparedModel {
            model,
            precision,
            kf_weights,
            res_weights,
        })
    }

    pub(crate) fn weight_for(&self, layer: usize, which: WhichParams) -> &Tensor {
        match which {
            WhichParams::Keyframe => &self.kf_weights[layer],
            WhichParams::Residual => &self.res_weights[layer],
        }
    }

    /// Quantize an activation (or residual) entering `layer`, or pass it
    /// through untouched in full-precision mode.
    pub(crate) fn quantize_act(
        &self,
        layer: usize,
        x: &Tensor,
        which: WhichParams,
    ) -> Result<Tensor> {
        if self.precision == PrecisionMode::FullPrecision {
            return Ok(x.clone());
        }
        let cfg = self.model.layers[layer].quant.as_ref().expect("checked in new");
        let params = match which {
            WhichParams::Keyframe => &cfg.keyframe_act,
            WhichParams::Residual => cfg.residual_act.static_params(),
        };
        fake_quantize(x, params)
    }

    /// One layer of a plain pass: quantize, convolve, return the
    /// pre-nonlinearity output.
    pub(crate) fn frame_step(&self, layer: usize, x: &Tensor, which: WhichParams) -> Result<Tensor> {
        let a = self.quantize_act(layer, x, which)?;
        conv2d(&a, self.weight_for(layer, which), self.model.layers[layer].padding)
    }
}

// ── Forward passes ───────────────────────────────────────────────────────────

/// Plain single-frame inference through one of the calibrated parameter sets.
/// With `WhichParams::Residual` the static residual parameters are applied to
/// the frame itself (useful for diagnostics, not part of the schedule).
pub fn frame_forward(
    model: &ModelSpec,
    x: &Tensor,
    which: WhichParams,
    precision: PrecisionMode,
) -> Result<Tensor> {
    let prep = PreparedModel::new(model, precision)?;
    frame_forward_prepared(&prep, x, which)
}

pub(crate) fn frame_forward_prepared(
    prep: &PreparedModel<'_>,
    x: &Tensor,
    which: WhichParams,
) -> Result<Tensor> {
    check_input(prep.model, x)?;
    let mut cur = x.clone();
    for (l, layer) in prep.model.layers.iter().enumerate() {
        let z = prep.frame_step(l, &cur, which)?;
        cur = layer.nonlinearity.apply(&z);
    }
    Ok(cur)
}

/// Process a keyframe: run the keyframe-precision pass and refresh every
/// layer's cached reference.
pub fn keyframe_forward(
    model: &ModelSpec,
    x: &Tensor,
    state: &mut ResidualState,
    precision: PrecisionMode,
) -> Result<Tensor> {
    let prep = PreparedModel::new(model, precision)?;
    keyframe_forward_prepared(&prep, x, state)
}

pub(crate) fn keyframe_forward_prepared(
    prep: &PreparedModel<'_>,
    x: &Tensor,
    state: &mut ResidualState,
) -> Result<Tensor> {
    check_input(prep.model, x)?;
    state.refs.clear();
    let mut cur = x.clone();
    for (l, layer) in prep.model.layers.iter().enumerate() {
        let z = prep.frame_step(l, &cur, WhichParams::Keyframe)?;
        state.refs.push(LayerReference {
            input: cur,
            output: z.clone(),
        });
        cur = layer.nonlinearity.apply(&z);
    }
    Ok(cur)
}

/// Process a non-keyframe through the static residual path: per layer,
/// quantize the difference against the cached reference input, convolve it
/// with the residual-quantized weights and add the cached reference output
/// back. Requires a prior keyframe on this state.
pub fn residual_forward(
    model: &ModelSpec,
    x: &Tensor,
    state: &mut ResidualState,
    precision: PrecisionMode,
) -> Result<Tensor> {
    let prep = PreparedModel::new(model, precision)?;
    residual_forward_prepared(&prep, x, state)
}

pub(crate) fn residual_forward_prepared(
    prep: &PreparedModel<'_>,
    x: &Tensor,
    state: &mut ResidualState,
) -> Result<Tensor> {
    check_state(prep.model, state)?;
    check_input(prep.model, x)?;
    let mut cur = x.clone();
    for (l, layer) in prep.model.layers.iter().enumerate() {
        let delta = cur.sub(&state.refs[l].input)?;
        let d_hat = prep.quantize_act(l, &delta, WhichParams::Residual)?;
        let z = conv2d(&d_hat, &prep.res_weights[l], layer.padding)?
            .add(&state.refs[l].output)?;
        let out = layer.nonlinearity.apply(&z);
        if state.mode == ReferenceMode::Recurrent {
            state.refs[l] = LayerReference {
                input: cur,
                output: z,
            };
        }
        cur = out;
    }
    Ok(cur)
}

fn check_input(model: &ModelSpec, x: &Tensor) -> Result<()> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "frame must be [C, H, W], got {:?}",
            x.shape()
        )));
    }
    if x.shape()[0] != model.input_channels() {
        return Err(Error::ShapeMismatch(format!(
            "frame has {} channels, model expects {}",
            x.shape()[0],
            model.input_channels()
        )));
    }
    Ok(())
}

pub(crate) fn check_state(model: &ModelSpec, state: &ResidualState) -> Result<()> {
    if state.refs.len() != model.num_layers() {
        return Err(Error::Sequencing(
            "residual step before any keyframe: run keyframe_forward first".into(),
        ));
    }
    Ok(())
}

pub(crate) fn reference_mut(state: &mut ResidualState) -> &mut Vec<LayerReference> {
    &mut state.refs
}

// ── Sequence runner ──────────────────────────────────────────────────────────

/// Everything a sequence run produces: per-frame outputs, the cost/error
/// report, and (in dynamic mode) the per-layer bit-width index maps chosen on
/// each residual frame.
#[derive(Debug)]
pub struct SequenceResult {
    pub outputs: Vec<Tensor>,
    pub report: BopReport,
    /// `policy_maps[t]` is `Some(per-layer maps)` only for residual frames of
    /// a dynamic run.
    pub policy_maps: Vec<Option<Vec<IndexMap>>>,
}

/// Run a clip through the chosen mode on the given keyframe schedule.
///
/// Per-frame output error is measured against the same model run in full
/// precision on the same frame. BOP accounting covers the convolution work at
/// the bit-widths actually used; dynamic runs additionally itemize the cost
/// of evaluating the policy's error maps. Full-precision runs are reported at
/// 32-bit weights and activations.
pub fn run_sequence(
    model: &ModelSpec,
    frames: &[Tensor],
    schedule: ScheduleConfig,
    mode: RunMode,
    precision: PrecisionMode,
    policy: &PolicyConfig,
) -> Result<SequenceResult> {
    if frames.is_empty() {
        return Err(Error::Sequencing("cannot run an empty clip".into()));
    }
    for f in frames {
        if f.shape() != frames[0].shape() {
            return Err(Error::ShapeMismatch(
                "all frames in a clip must share one shape".into(),
            ));
        }
    }
    let prep = PreparedModel::new(model, precision)?;
    let fp = PreparedModel::new(model, PrecisionMode::FullPrecision)?;
    let shapes = layer_conv_shapes(model, frames[0].shape())?;

    let ref_mode = match mode {
        RunMode::ResqRecurrent => ReferenceMode::Recurrent,
        _ => ReferenceMode::Pairwise,
    };
    let mut state = ResidualState::new(ref_mode);

    let mut outputs = Vec::with_capacity(frames.len());
    let mut policy_maps: Vec<Option<Vec<IndexMap>>> = Vec::with_capacity(frames.len());
    let mut entries: Vec<LayerFrameBops> = Vec::new();
    let mut frame_mse = Vec::with_capacity(frames.len());

    for (t, frame) in frames.iter().enumerate() {
        let is_kf = schedule.is_keyframe(t);
        let mut maps_this_frame: Option<Vec<IndexMap>> = None;

        let out = match mode {
            RunMode::Frame => frame_forward_prepared(&prep, frame, WhichParams::Keyframe)?,
            RunMode::ResqPairwise | RunMode::ResqRecurrent => {
                if is_kf {
                    keyframe_forward_prepared(&prep, frame, &mut state)?
                } else {
                    residual_forward_prepared(&prep, frame, &mut state)?
                }
            }
            RunMode::ResqDynamic => {
                if is_kf {
                    keyframe_forward_prepared(&prep, frame, &mut state)?
                } else {
                    let (out, maps) =
                        policy::dynamic_residual_forward_prepared(&prep, frame, &mut state, policy)?;
                    maps_this_frame = Some(maps);
                    out
                }
            }
        };

        for (l, layer) in model.layers.iter().enumerate() {
            entries.push(layer_entry(
                &prep, layer, l, t, is_kf, mode, &shapes[l],
                maps_this_frame.as_deref(),
            )?);
        }

        let fp_out = frame_forward_prepared(&fp, frame, WhichParams::Keyframe)?;
        frame_mse.push(out.mse(&fp_out)?);
        outputs.push(out);
        policy_maps.push(maps_this_frame);
    }

    let report = bops::sequence_report(schedule.period(), entries, frame_mse)?;
    Ok(SequenceResult {
        outputs,
        report,
        policy_maps,
    })
}

/// Static convolution geometry of every layer for a given input frame shape.
pub(crate) fn layer_conv_shapes(model: &ModelSpec, frame_shape: &[usize]) -> Result<Vec<ConvShape>> {
    let (mut h, mut w) = (frame_shape[1], frame_shape[2]);
    let mut shapes = Vec::with_capacity(model.num_layers());
    for layer in &model.layers {
        let ws = layer.weights.shape();
        let h_out = conv_output_extent(h, ws[2], layer.padding)?;
        let w_out = conv_output_extent(w, ws[3], layer.padding)?;
        shapes.push(ConvShape {
            c_out: ws[0],
            c_in: ws[1],
            k_h: ws[2],
            k_w: ws[3],
            h_in: h,
            w_in: w,
            h_out,
            w_out,
        });
        h = h_out;
        w = w_out;
    }
    Ok(shapes)
}

#[allow(clippy::too_many_arguments)]
fn layer_entry(
    prep: &PreparedModel<'_>,
    layer: &Layer,
    l: usize,
    frame_index: usize,
    is_keyframe: bool,
    mode: RunMode,
    shape: &ConvShape,
    maps: Option<&[IndexMap]>,
) -> Result<LayerFrameBops> {
    // Full-precision runs are costed as plain fp32 arithmetic.
    if prep.precision == PrecisionMode::FullPrecision {
        return Ok(LayerFrameBops {
            frame_index,
            layer: l,
            is_keyframe,
            macs: shape.macs(),
            weight_bits: 32,
            act_bits: ActBits::Uniform(32),
            conv_bops: bops::conv_bops(shape, 32, 32),
            policy_bops: 0,
        });
    }
    let cfg = layer.quant().expect("prepared model is calibrated");
    let keyframe_path = is_keyframe || mode == RunMode::Frame;
    if keyframe_path {
        let (wb, ab) = (cfg.keyframe_weight.bit_width(), cfg.keyframe_act.bit_width());
        return Ok(LayerFrameBops {
            frame_index,
            layer: l,
            is_keyframe,
            macs: shape.macs(),
            weight_bits: wb,
            act_bits: ActBits::Uniform(ab),
            conv_bops: bops::conv_bops(shape, wb, ab),
            policy_bops: 0,
        });
    }
    let wb = cfg.residual_weight.bit_width();
    match mode {
        RunMode::ResqPairwise | RunMode::ResqRecurrent => {
            let ab = cfg.residual_act.static_params().bit_width();
            Ok(LayerFrameBops {
                frame_index,
                layer: l,
                is_keyframe,
                macs: shape.macs(),
                weight_bits: wb,
                act_bits: ActBits::Uniform(ab),
                conv_bops: bops::conv_bops(shape, wb, ab),
                policy_bops: 0,
            })
        }
        RunMode::ResqDynamic => {
            let pool = match &cfg.residual_act {
                ResidualActQuant::Pool(pool) => pool,
                ResidualActQuant::Single(_) => {
                    return Err(Error::Policy(format!(
                        "layer {l} has no quantizer pool; dynamic mode requires pool calibration"
                    )))
                }
            };
            let map = &maps.expect("dynamic residual frames carry maps")[l];
            let pool_bits = pool.bits();
            let conv = bops::mixed_conv_bops(shape, wb, map, &pool_bits)?;
            let policy_bops =
                bops::policy_overhead_bops(pool.len(), shape.c_in, shape.h_in, shape.w_in);
            Ok(LayerFrameBops {
                frame_index,
                layer: l,
                is_keyframe,
                macs: shape.macs(),
                weight_bits: wb,
                act_bits: ActBits::PerPixel {
                    pool_bits,
                    pixel_counts: map.histogram(pool.len()),
                },
                conv_bops: conv,
                policy_bops,
            })
        }
        RunMode::Frame => unreachable!("handled above"),
    }
}
