//! Bit-operation (BOP) accounting.
//!
//! The cost of a convolution is its multiply-accumulate count times the
//! operand bit-widths:
//!
//! ```text
//! conv_bops = C_out * H_out * W_out * C_in * kH * kW * b_w * b_a
//! ```
//!
//! For per-pixel mixed precision the activation factor varies over the output
//! grid, and the dynamic policy itself is charged for evaluating one error
//! map per pool entry — `n * C * H * W` MACs modelled at 8x8-bit arithmetic.
//! A sequence report aggregates per-(frame, layer) entries and the amortized
//! per-frame cost over the whole clip.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::policy::IndexMap;

/// Static geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_out: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvShape {
    /// Multiply-accumulates for the full output grid.
    pub fn macs(&self) -> u64 {
        (self.c_out * self.h_out * self.w_out * self.c_in * self.k_h * self.k_w) as u64
    }

    /// MACs behind one output pixel (all output channels included).
    pub fn macs_per_pixel(&self) -> u64 {
        (self.c_out * self.c_in * self.k_h * self.k_w) as u64
    }
}

/// BOPs of a uniform-precision convolution.
pub fn conv_bops(shape: &ConvShape, weight_bits: u8, act_bits: u8) -> u64 {
    shape.macs() * weight_bits as u64 * act_bits as u64
}

/// BOPs of a convolution whose activation bit-width varies per output pixel
/// according to an index map into `pool_bits` (ascending, 1-based indices).
/// Pixels on a 0-bit entry cost nothing.
pub fn mixed_conv_bops(
    shape: &ConvShape,
    weight_bits: u8,
    map: &IndexMap,
    pool_bits: &[u8],
) -> Result<u64> {
    if map.height() != shape.h_out || map.width() != shape.w_out {
        return Err(Error::Policy(format!(
            "index map is {}x{} but the output grid is {}x{}",
            map.height(),
            map.width(),
            shape.h_out,
            shape.w_out
        )));
    }
    let mut act_bit_sum = 0u64;
    for &v in map.values() {
        let i = (v - 1) as usize;
        let bits = *pool_bits.get(i).ok_or_else(|| {
            Error::Policy(format!("index {v} outside the {}-entry pool", pool_bits.len()))
        })?;
        act_bit_sum += bits as u64;
    }
    Ok(shape.macs_per_pixel() * weight_bits as u64 * act_bit_sum)
}

/// Cost of evaluating the dynamic policy itself on one layer of one residual
/// frame: one pass over the `[C, H, W]` input per pool entry, priced at
/// 8x8-bit arithmetic.
pub fn policy_overhead_bops(n_entries: usize, c: usize, h: usize, w: usize) -> u64 {
    (n_entries * c * h * w) as u64 * 64
}

/// Activation precision actually used by one (frame, layer) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActBits {
    Uniform(u8),
    /// Dynamic frames: pool bit-widths with the number of output pixels that
    /// selected each entry.
    PerPixel {
        pool_bits: Vec<u8>,
        pixel_counts: Vec<u64>,
    },
}

/// Cost record for one layer on one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFrameBops {
    pub frame_index: usize,
    pub layer: usize,
    pub is_keyframe: bool,
    pub macs: u64,
    pub weight_bits: u8,
    pub act_bits: ActBits,
    pub conv_bops: u64,
    pub policy_bops: u64,
}

/// Aggregated cost/error report for one sequence run.
#[derive(Debug, Clone, PartialEq)]
pub struct BopReport {
    pub keyframe_period: usize,
    /// One entry per (frame, layer), frames outermost, layers in order.
    pub entries: Vec<LayerFrameBops>,
    /// Per-frame output MSE against the full-precision pass.
    pub frame_mse: Vec<f64>,
}

/// Assemble a report from per-(frame, layer) entries, validating that the
/// entries tile the clip: every frame carries the same layer count and the
/// MSE vector covers every frame.
pub fn sequence_report(
    keyframe_period: usize,
    entries: Vec<LayerFrameBops>,
    frame_mse: Vec<f64>,
) -> Result<BopReport> {
    if keyframe_period == 0 {
        return Err(Error::Config("keyframe period must be at least 1".into()));
    }
    let frames = frame_mse.len();
    if frames == 0 || entries.is_empty() || !entries.len().is_multiple_of(frames) {
        return Err(Error::Config(format!(
            "{} cost entries do not tile {frames} frames",
            entries.len()
        )));
    }
    let layers = entries.len() / frames;
    for (i, e) in entries.iter().enumerate() {
        if e.frame_index != i / layers || e.layer != i % layers {
            return Err(Error::Config(format!(
                "cost entry {i} is out of order: frame {} layer {}",
                e.frame_index, e.layer
            )));
        }
    }
    Ok(BopReport {
        keyframe_period,
        entries,
        frame_mse,
    })
}

impl BopReport {
    pub fn num_frames(&self) -> usize {
        self.frame_mse.len()
    }

    pub fn num_layers(&self) -> usize {
        self.entries.len() / self.num_frames()
    }

    /// Convolution BOPs of one frame, summed over layers.
    pub fn frame_conv_bops(&self, frame: usize) -> u64 {
        let layers = self.num_layers();
        self.entries[frame * layers..(frame + 1) * layers]
            .iter()
            .map(|e| e.conv_bops)
            .sum()
    }

    pub fn total_conv_bops(&self) -> u64 {
        self.entries.iter().map(|e| e.conv_bops).sum()
    }

    pub fn total_policy_bops(&self) -> u64 {
        self.entries.iter().map(|e| e.policy_bops).sum()
    }

    /// Full cost including policy overhead.
    pub fn total_bops(&self) -> u64 {
        self.total_conv_bops() + self.total_policy_bops()
    }

    /// Mean per-frame cost over the sequence, policy overhead included.
    pub fn amortized_bops_per_frame(&self) -> f64 {
        self.total_bops() as f64 / self.num_frames() as f64
    }

    /// Mean per-frame convolution cost only.
    pub fn amortized_conv_bops_per_frame(&self) -> f64 {
        self.total_conv_bops() as f64 / self.num_frames() as f64
    }

    pub fn mean_mse(&self) -> f64 {
        self.frame_mse.iter().sum::<f64>() / self.frame_mse.len() as f64
    }

    /// Per-frame report as CSV. Columns are pinned:
    /// `frame_index,is_keyframe,layer,bops,output_mse_vs_fp32,policy_bops`
    /// with `bops` the convolution cost of that (frame, layer) pair. With
    /// `giga` set, both cost columns are reported in units of 1e9.
    pub fn write_csv<W: Write>(&self, out: &mut W, giga: bool) -> io::Result<()> {
        writeln!(
            out,
            "frame_index,is_keyframe,layer,bops,output_mse_vs_fp32,policy_bops"
        )?;
        for e in &self.entries {
            let mse = self.frame_mse[e.frame_index];
            if giga {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    e.frame_index,
                    e.is_keyframe,
                    e.layer,
                    e.conv_bops as f64 / 1e9,
                    mse,
                    e.policy_bops as f64 / 1e9
                )?;
            } else {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    e.frame_index, e.is_keyframe, e.layer, e.conv_bops, mse, e.policy_bops
                )?;
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self, giga: bool) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, giga).expect("vec write");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}
