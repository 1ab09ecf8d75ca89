//! The canned experiments behind the CLI: residual-vs-frame statistics,
//! cost/accuracy sweeps, and policy-map summaries.

use std::path::Path;

use crate::calibration::{
    calibrate_model, collect_activations, weight_minmax_range, CalibrationConfig, CollectMode,
};
use crate::engine::{
    run_sequence, ModelSpec, PrecisionMode, ResidualActQuant, RunMode, ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::harness::clips::Clip;
use crate::notation::{ActBitsSpec, SchemeNotation};
use crate::pgm;
use crate::policy::PolicyConfig;
use crate::quantizer::{fake_quantize, Granularity};
use crate::tensor::Tensor;

fn frames_of(clips: &[Clip]) -> Vec<Vec<Tensor>> {
    clips.iter().map(|c| c.frames.clone()).collect()
}

/// Population variance of every element across a batch of tensors.
fn batch_variance(batch: &[Tensor]) -> f64 {
    let n: usize = batch.iter().map(|t| t.len()).sum();
    let mean: f64 = batch
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|&v| v as f64)
        .sum::<f64>()
        / n as f64;
    batch
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64
}

/// Mean `|x - q(x)|` over a batch under a per-tensor min-max quantizer fit to
/// the whole batch (same zero-covering range rule the calibrator uses).
fn minmax_abs_error(batch: &[Tensor], bits: u8) -> Result<f64> {
    let flat: Vec<f32> = batch
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let n = flat.len();
    let flat = Tensor::new(vec![n], flat)?;
    let params = weight_minmax_range(&flat, Granularity::PerTensor, bits)?;
    let q = fake_quantize(&flat, &params)?;
    let err: f64 = flat
        .data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(err / n as f64)
}

// ── Residual statistics ─────────────────────────────────────────────────────

/// Per-layer comparison of keyframe activations against residual differences.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub layer: usize,
    pub frame_variance: f64,
    pub residual_variance: f64,
    /// Mean `|x - q(x)|` of keyframe activations under a min-max quantizer.
    pub frame_mean_abs_error: f64,
    /// Same measurement on the residual differences, at the same bit-width.
    pub residual_mean_abs_error: f64,
}

/// Measure, per layer, how much smaller residual differences are than the
/// activations themselves — in variance and in quantization error at a fixed
/// bit-width. The model must already be calibrated, because the collection
/// passes run the quantized pipeline upstream of each layer.
pub fn experiment_variance(
    model: &ModelSpec,
    clips: &[Clip],
    config: &CalibrationConfig,
    error_bits: u8,
) -> Result<Vec<VarianceRow>> {
    if clips.is_empty() {
        return Err(Error::Config("variance experiment needs clips".into()));
    }
    let frames = frames_of(clips);
    let mut rows = Vec::with_capacity(model.num_layers());
    for l in 0..model.num_layers() {
        let frame_batch = collect_activations(model, l, &frames, CollectMode::Frame, config)?;
        let res_batch = collect_activations(model, l, &frames, CollectMode::Residual, config)?;
        rows.push(VarianceRow {
            layer: l,
            frame_variance: batch_variance(&frame_batch),
            residual_variance: batch_variance(&res_batch),
            frame_mean_abs_error: minmax_abs_error(&frame_batch, error_bits)?,
            residual_mean_abs_error: minmax_abs_error(&res_batch, error_bits)?,
        });
    }
    Ok(rows)
}

pub fn variance_csv(rows: &[VarianceRow]) -> String {
    let mut out = String::from(
        "layer,frame_variance,residual_variance,frame_mean_abs_error,residual_mean_abs_error\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.layer,
            r.frame_variance,
            r.residual_variance,
            r.frame_mean_abs_error,
            r.residual_mean_abs_error
        ));
    }
    out
}

// ── Cost/accuracy sweep ─────────────────────────────────────────────────────

/// What to sweep: every (scheme, period, mode) combination gets one row.
#[derive(Debug, Clone)]
pub struct TradeoffSpec {
    pub schemes: Vec<SchemeNotation>,
    pub modes: Vec<RunMode>,
    pub periods: Vec<usize>,
    /// Calibration batch cap and line-search resolution.
    pub samples: usize,
    pub grid_points: usize,
    /// Policy threshold for dynamic runs.
    pub tau: f64,
    pub weight_granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub mode: RunMode,
    pub scheme: String,
    pub period: usize,
    /// Mean per-frame cost across clips, including policy overhead.
    pub amortized_bops: f64,
    /// Same without the policy overhead.
    pub amortized_conv_bops: f64,
    /// Mean per-frame output MSE against full precision, across all frames.
    pub mean_mse: f64,
    /// `mse_by_dt[d]` is the mean MSE of frames at distance `d` from their
    /// keyframe (`d = 0` is the keyframes themselves). `NaN` if the clip is
    /// too short for some distance to occur.
    pub mse_by_dt: Vec<f64>,
}

/// Calibrate and run every requested combination. Within one (scheme, period)
/// cell all modes share a single calibration, so keyframes of the residual
/// modes reproduce the frame mode's outputs exactly. `resq-dynamic` is
/// skipped for schemes without a residual pool (it has nothing to select
/// from); asking for it on *only* such schemes is an error.
pub fn experiment_tradeoff(
    model: &ModelSpec,
    clips: &[Clip],
    spec: &TradeoffSpec,
) -> Result<Vec<TradeoffRow>> {
    if clips.is_empty() || spec.schemes.is_empty() || spec.modes.is_empty() || spec.periods.is_empty()
    {
        return Err(Error::Config(
            "the sweep needs clips plus at least one scheme, mode, and period".into(),
        ));
    }
    let modes_for = |scheme: &SchemeNotation| -> Vec<RunMode> {
        let has_pool = matches!(scheme.residual.act_bits, ActBitsSpec::Pool(_));
        spec.modes
            .iter()
            .copied()
            .filter(|&m| m != RunMode::ResqDynamic || has_pool)
            .collect()
    };
    if spec.schemes.iter().all(|s| modes_for(s).is_empty()) {
        return Err(Error::Config(
            "resq-dynamic needs a pooled residual scheme like W8A{0,4,8}; none given".into(),
        ));
    }
    let frames = frames_of(clips);
    let policy = PolicyConfig { tau: spec.tau };
    let mut rows = Vec::new();
    for scheme in &spec.schemes {
        let quant_scheme = scheme.to_scheme(spec.weight_granularity)?;
        let modes = modes_for(scheme);
        for &period in &spec.periods {
            if modes.is_empty() {
                continue;
            }
            let config = CalibrationConfig::new(spec.samples, spec.grid_points, period)?;
            let calibrated = calibrate_model(model, &frames, &config, &quant_scheme)?;
            let schedule = ScheduleConfig::new(period)?;
            for &mode in &modes {
                let mut bops_sum = 0.0;
                let mut conv_sum = 0.0;
                let mut mse_sum = 0.0;
                let mut frame_count = 0usize;
                let mut dt_sum = vec![0.0f64; period];
                let mut dt_count = vec![0usize; period];
                for clip in &frames {
                    let result = run_sequence(
                        &calibrated,
                        clip,
                        schedule,
                        mode,
                        PrecisionMode::Quantized,
                        &policy,
                    )?;
                    bops_sum += result.report.amortized_bops_per_frame();
                    conv_sum += result.report.amortized_conv_bops_per_frame();
                    for (t, &mse) in result.report.frame_mse.iter().enumerate() {
                        mse_sum += mse;
                        frame_count += 1;
                        dt_sum[t % period] += mse;
                        dt_count[t % period] += 1;
                    }
                }
                let mse_by_dt = dt_sum
                    .iter()
                    .zip(&dt_count)
                    .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
                    .collect();
                rows.push(TradeoffRow {
                    mode,
                    scheme: scheme.to_string(),
                    period,
                    amortized_bops: bops_sum / clips.len() as f64,
                    amortized_conv_bops: conv_sum / clips.len() as f64,
                    mean_mse: mse_sum / frame_count as f64,
                    mse_by_dt,
                });
            }
        }
    }
    Ok(rows)
}

/// Sweep rows as CSV. Ragged `mse_by_dt` vectors are padded with empty cells
/// up to the longest period; with `giga`, cost columns are in units of 1e9.
pub fn tradeoff_csv(rows: &[TradeoffRow], giga: bool) -> String {
    let max_period = rows.iter().map(|r| r.period).max().unwrap_or(0);
    let mut out = String::from("mode,scheme,period,amortized_bops,amortized_conv_bops,mean_mse");
    for d in 0..max_period {
        out.push_str(&format!(",mse_dt{d}"));
    }
    out.push('\n');
    let scale = if giga { 1e-9 } else { 1.0 };
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.mode,
            r.scheme,
            r.period,
            r.amortized_bops * scale,
            r.amortized_conv_bops * scale,
            r.mean_mse
        ));
        for d in 0..max_period {
            match r.mse_by_dt.get(d) {
                Some(v) if v.is_finite() => out.push_str(&format!(",{v}")),
                _ => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

// ── Policy maps ─────────────────────────────────────────────────────────────

/// Mean policy decisions for residual frames at one distance from the
/// keyframe. "Moving" pixels are those the clip's motion mask marks changed;
/// the split is only taken on layers whose map grid matches the mask grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMapSummaryRow {
    pub dt: usize,
    pub mean_index: f64,
    pub mean_bits: f64,
    pub moving_mean_bits: f64,
    pub static_mean_bits: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMapResult {
    pub rows: Vec<PolicyMapSummaryRow>,
    pub overall_mean_index: f64,
    pub overall_mean_bits: f64,
    pub overall_moving_bits: f64,
    pub overall_static_bits: f64,
}

#[derive(Default, Clone, Copy)]
struct BitTally {
    index_sum: f64,
    bits_sum: f64,
    count: u64,
    moving_bits: f64,
    moving_count: u64,
    static_bits: f64,
    static_count: u64,
}

impl BitTally {
    fn mean_bits(&self) -> f64 {
        self.bits_sum / self.count as f64
    }
    fn moving(&self) -> f64 {
        if self.moving_count == 0 {
            f64::NAN
        } else {
            self.moving_bits / self.moving_count as f64
        }
    }
    fn r#static(&self) -> f64 {
        if self.static_count == 0 {
            f64::NAN
        } else {
            self.static_bits / self.static_count as f64
        }
    }
}

/// Run dynamic inference over the clips and summarize which precision the
/// policy picked where. With `out_dir` set, every index map is also written
/// as a PGM image named `clip{c}_frame{t}_layer{l}.pgm`.
pub fn experiment_policy_map(
    model: &ModelSpec,
    clips: &[Clip],
    period: usize,
    policy: &PolicyConfig,
    out_dir: Option<&Path>,
) -> Result<PolicyMapResult> {
    if clips.is_empty() {
        return Err(Error::Config("policy-map experiment needs clips".into()));
    }
    let pool_bits: Vec<Vec<u8>> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| match layer.quant() {
            Some(cfg) => match &cfg.residual_act {
                ResidualActQuant::Pool(pool) => Ok(pool.bits()),
                ResidualActQuant::Single(_) => Err(Error::Policy(format!(
                    "layer {l} has a single residual quantizer; policy maps need a pool"
                ))),
            },
            None => Err(Error::Sequencing(format!("layer {l} is not calibrated"))),
        })
        .collect::<Result<_>>()?;
    for clip in clips {
        if !clip.has_masks() {
            return Err(Error::Config(
                "policy-map experiment needs per-frame motion masks".into(),
            ));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let schedule = ScheduleConfig::new(period)?;
    let mut per_dt: Vec<BitTally> = vec![BitTally::default(); period.max(1)];
    let mut overall = BitTally::default();
    for (ci, clip) in clips.iter().enumerate() {
        let result = run_sequence(
            model,
            &clip.frames,
            schedule,
            RunMode::ResqDynamic,
            PrecisionMode::Quantized,
            policy,
        )?;
        for (t, maps) in result.policy_maps.iter().enumerate() {
            let Some(maps) = maps else { continue };
            let dt = t % period;
            let mask = &clip.masks[t];
            for (l, map) in maps.iter().enumerate() {
                let bits = &pool_bits[l];
                if let Some(dir) = out_dir {
                    let name = format!("clip{ci:02}_frame{t:03}_layer{l}.pgm");
                    pgm::write_bits_map(&dir.join(name), map, bits)?;
                }
                let mask_matches = mask.shape() == [map.height(), map.width()].as_slice();
                for (px, &idx) in map.values().iter().enumerate() {
                    let b = bits[(idx - 1) as usize] as f64;
                    for tally in [&mut per_dt[dt], &mut overall] {
                        tally.index_sum += idx as f64;
                        tally.bits_sum += b;
                        tally.count += 1;
                        if mask_matches {
                            if mask.data()[px] > 0.5 {
                                tally.moving_bits += b;
                                tally.moving_count += 1;
                            } else {
                                tally.static_bits += b;
                                tally.static_count += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    let rows = per_dt
        .iter()
        .enumerate()
        .filter(|(_, t)| t.count > 0)
        .map(|(dt, t)| PolicyMapSummaryRow {
            dt,
            mean_index: t.index_sum / t.count as f64,
            mean_bits: t.mean_bits(),
            moving_mean_bits: t.moving(),
            static_mean_bits: t.r#static(),
        })
        .collect();
    Ok(PolicyMapResult {
        rows,
        overall_mean_index: overall.index_sum / overall.count.max(1) as f64,
        overall_mean_bits: overall.mean_bits(),
        overall_moving_bits: overall.moving(),
        overall_static_bits: overall.r#static(),
    })
}

pub fn policy_summary_csv(result: &PolicyMapResult) -> String {
    let cell = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
    let mut out = String::from("dt,mean_index,mean_bits,moving_mean_bits,static_mean_bits\n");
    for r in &result.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.dt,
            r.mean_index,
            r.mean_bits,
            cell(r.moving_mean_bits),
            cell(r.static_mean_bits)
        ));
    }
    out.push_str(&format!(
        "all,{},{},{},{}\n",
        result.overall_mean_index,
        result.overall_mean_bits,
        cell(result.overall_moving_bits),
        cell(result.overall_static_bits)
    ));
    out
}
