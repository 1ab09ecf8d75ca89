//! Per-pixel dynamic bit-width selection for residual frames.
//!
//! Instead of one residual quantizer per layer, a layer can carry a *pool* of
//! candidates at strictly ascending bit-widths (a 0-bit "transmit nothing"
//! entry is allowed at the bottom). On every residual frame the policy
//! estimates, per pixel, how much output error each candidate would cause,
//! and walks the pool from cheap to precise until the next step up stops
//! paying for itself:
//!
//! ```text
//! pick(px) = min { i : err_i(px) - err_{i+1}(px) < tau },  else n
//! ```
//!
//! The *exact* error map convolves the per-entry quantization residue with
//! the quantized weights — faithful but as expensive as the layer itself. The
//! *approximate* map bounds it by the pixel-wise norm of the residue times
//! the Frobenius norm of the weights, which only touches the input once per
//! entry; that is what the dynamic forward pass uses online, and what the
//! policy-overhead BOP model prices.

use crate::engine::{
    check_state, reference_mut, LayerReference, ModelSpec, PreparedModel, PrecisionMode,
    ReferenceMode, ResidualActQuant, ResidualState,
};
use crate::error::{Error, Result};
use crate::quantizer::{fake_quantize, Granularity, QuantParams};
use crate::tensor::{conv2d, Tensor};

/// Candidate quantizers at strictly ascending bit-widths. All entries are
/// per-tensor (residual activations always are); the lowest may be 0-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerPool {
    entries: Vec<QuantParams>,
}

impl QuantizerPool {
    pub fn new(entries: Vec<QuantParams>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::Policy(
                "a quantizer pool needs at least two entries".into(),
            ));
        }
        for pair in entries.windows(2) {
            if pair[0].bit_width() >= pair[1].bit_width() {
                return Err(Error::Policy(format!(
                    "pool bit-widths must be strictly ascending, got {} before {}",
                    pair[0].bit_width(),
                    pair[1].bit_width()
                )));
            }
        }
        for p in &entries {
            if !p.is_zero_bit() && p.granularity() != Granularity::PerTensor {
                return Err(Error::Policy(
                    "pool entries must be per-tensor quantizers".into(),
                ));
            }
        }
        Ok(QuantizerPool { entries })
    }

    pub fn entries(&self) -> &[QuantParams] {
        &self.entries
    }

    /// Number of entries (always at least two).
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Highest-precision entry (used by static inference over a pool).
    pub fn top(&self) -> &QuantParams {
        self.entries.last().expect("pool is non-empty")
    }

    pub fn bits(&self) -> Vec<u8> {
        self.entries.iter().map(|p| p.bit_width()).collect()
    }
}

/// Per-pixel selection into a pool: 1-based entry indices over an `H x W`
/// grid (1 = cheapest entry).
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl IndexMap {
    /// Build a map, validating every index lies in `1..=n_entries`.
    pub fn new(height: usize, width: usize, values: Vec<u8>, n_entries: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Policy(format!(
                "index map has {} values for a {height}x{width} grid",
                values.len()
            )));
        }
        if n_entries == 0 || n_entries > u8::MAX as usize {
            return Err(Error::Policy(format!("unsupported pool size {n_entries}")));
        }
        if let Some(&bad) = values.iter().find(|&&v| v < 1 || v as usize > n_entries) {
            return Err(Error::Policy(format!(
                "index {bad} outside 1..={n_entries}"
            )));
        }
        Ok(IndexMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    /// Pixel count per pool entry, indexed `0..n`.
    pub fn histogram(&self, n_entries: usize) -> Vec<u64> {
        let mut h = vec![0u64; n_entries];
        for &v in &self.values {
            h[(v - 1) as usize] += 1;
        }
        h
    }

    /// Mean selected index (1-based), for summaries.
    pub fn mean_index(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }
}

/// Dynamic-policy settings. `tau` is the error-improvement threshold below
/// which a step up in precision is considered not worth taking; it only needs
/// to be finite (negative values force the top entry everywhere, which is
/// occasionally useful to disable the policy without recalibrating).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub tau: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { tau: 3e-4 }
    }
}

impl PolicyConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::Policy(format!("tau must be finite, got {tau}")));
        }
        Ok(PolicyConfig { tau })
    }
}

/// Exact per-pixel output error a pool entry would cause on this residual:
/// the channel norm of `(delta - q(delta)) * w_hat`, an `[H', W']` map over
/// the convolution's output grid.
pub fn exact_error_map(
    delta: &Tensor,
    w_hat: &Tensor,
    entry: &QuantParams,
    padding: usize,
) -> Result<Tensor> {
    let residue = delta.sub(&fake_quantize(delta, entry)?)?;
    conv2d(&residue, w_hat, padding)?.channel_norm_map()
}

/// Upper bound on the exact map that never runs the convolution: the channel
/// norm of the quantization residue scaled by the Frobenius norm of the
/// weights, an `[H, W]` map over the input grid.
pub fn approx_error_map(delta: &Tensor, w_hat: &Tensor, entry: &QuantParams) -> Result<Tensor> {
    let residue = delta.sub(&fake_quantize(delta, entry)?)?;
    residue
        .channel_norm_map()?
        .scale_by(w_hat.frobenius_norm() as f32)
}

/// Apply the selection rule to per-entry error maps (cheapest first): per
/// pixel, the first index whose improvement over the next entry falls below
/// `tau`, falling back to the last entry.
pub fn select_bitwidths(maps: &[Tensor], tau: f64) -> Result<IndexMap> {
    if maps.is_empty() {
        return Err(Error::Policy("no error maps to select from".into()));
    }
    if !tau.is_finite() {
        return Err(Error::Policy(format!("tau must be finite, got {tau}")));
    }
    for m in maps {
        if m.rank() != 2 || m.shape() != maps[0].shape() {
            return Err(Error::Policy(format!(
                "error maps must share one [H, W] shape; got {:?} vs {:?}",
                m.shape(),
                maps[0].shape()
            )));
        }
    }
    let (h, w) = (maps[0].shape()[0], maps[0].shape()[1]);
    let n = maps.len();
    let mut values = vec![n as u8; h * w];
    for (px, value) in values.iter_mut().enumerate() {
        for i in 0..n - 1 {
            let gap = maps[i].data()[px] as f64 - maps[i + 1].data()[px] as f64;
            if gap < tau {
                *value = (i + 1) as u8;
                break;
            }
        }
    }
    IndexMap::new(h, w, values, n)
}

/// Quantize a residual with a different pool entry per pixel. Every pool
/// entry is applied to the whole tensor through the ordinary quantizer and
/// the result is gathered pixel-wise, so a uniform map reproduces plain
/// `fake_quantize` with that entry bit for bit.
pub fn mixed_quantize(delta: &Tensor, pool: &QuantizerPool, map: &IndexMap) -> Result<Tensor> {
    if delta.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "mixed_quantize expects [C, H, W], got {:?}",
            delta.shape()
        )));
    }
    let (c, h, w) = (delta.shape()[0], delta.shape()[1], delta.shape()[2]);
    if map.height() != h || map.width() != w {
        return Err(Error::Policy(format!(
            "index map is {}x{} but the residual is {h}x{w}",
            map.height(),
            map.width()
        )));
    }
    if map.values().iter().any(|&v| v as usize > pool.len()) {
        return Err(Error::Policy(
            "index map refers past the end of the pool".into(),
        ));
    }
    let quantized: Vec<Tensor> = pool
        .entries()
        .iter()
        .map(|p| fake_quantize(delta, p))
        .collect::<Result<_>>()?;
    let plane = h * w;
    let mut out = vec![0.0f32; c * plane];
    for px in 0..plane {
        let chosen = &quantized[(map.values()[px] - 1) as usize];
        for ch in 0..c {
            out[ch * plane + px] = chosen.data()[ch * plane + px];
        }
    }
    Tensor::new(delta.shape().to_vec(), out)
}

/// Residual step that picks a bit-width per pixel: per layer, build the
/// approximate error map for every pool entry, select indices under the
/// configured threshold, quantize the delta pixel-wise and reconstruct as in
/// the static path. Returns the output and the per-layer index maps.
///
/// Requires pool-calibrated layers and same-extent convolutions (the selected
/// map doubles as the output-pixel cost map). With quantization disabled the
/// delta passes through untouched and every pixel reports the top entry.
pub fn dynamic_residual_forward(
    model: &ModelSpec,
    x: &Tensor,
    state: &mut ResidualState,
    policy: &PolicyConfig,
    precision: PrecisionMode,
) -> Result<(Tensor, Vec<IndexMap>)> {
    let prep = PreparedModel::new(model, precision)?;
    dynamic_residual_forward_prepared(&prep, x, state, policy)
}

pub(crate) fn dynamic_residual_forward_prepared(
    prep: &PreparedModel<'_>,
    x: &Tensor,
    state: &mut ResidualState,
    policy: &PolicyConfig,
) -> Result<(Tensor, Vec<IndexMap>)> {
    let model = prep.model;
    check_state(model, state)?;
    let mut cur = x.clone();
    let mut maps = Vec::with_capacity(model.num_layers());
    for (l, layer) in model.layers().iter().enumerate() {
        let refs = &state.references()[l];
        let delta = cur.sub(&refs.input)?;
        let (h, w) = (delta.shape()[1], delta.shape()[2]);
        let w_hat = prep.weight_for(l, crate::engine::WhichParams::Residual);

        let (d_hat, map) = match prep.precision {
            PrecisionMode::FullPrecision => {
                // Nothing is discarded; report the most precise entry (or a
                // single-entry map when no pool is calibrated).
                let n = match layer.quant().map(|c| &c.residual_act) {
                    Some(ResidualActQuant::Pool(pool)) => pool.len(),
                    _ => 1,
                };
                let map = IndexMap::new(h, w, vec![n as u8; h * w], n)?;
                (delta.clone(), map)
            }
            PrecisionMode::Quantized => {
                let cfg = layer.quant().expect("prepared model is calibrated");
                let pool = match &cfg.residual_act {
                    ResidualActQuant::Pool(pool) => pool,
                    ResidualActQuant::Single(_) => {
                        return Err(Error::Policy(format!(
                            "layer {l} has no quantizer pool; dynamic mode requires pool calibration"
                        )))
                    }
                };
                let err_maps = pool
                    .entries()
                    .iter()
                    .map(|entry| approx_error_map(&delta, w_hat, entry))
                    .collect::<Result<Vec<_>>>()?;
                let map = select_bitwidths(&err_maps, policy.tau)?;
                let d_hat = mixed_quantize(&delta, pool, &map)?;
                (d_hat, map)
            }
        };

        let z = conv2d(&d_hat, w_hat, layer.padding())?.add(&refs.output)?;
        let out = layer.nonlinearity().apply(&z);
        if state.mode() == ReferenceMode::Recurrent {
            reference_mut(state)[l] = LayerReference {
                input: cur,
                output: z,
            };
        }
        maps.push(map);
        cur = out;
    }
    Ok((cur, maps))
}
