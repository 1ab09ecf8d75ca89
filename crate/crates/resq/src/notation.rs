//! Compact precision notation.
//!
//! `W8A4` means 8-bit weights with 4-bit activations. A brace list gives a
//! pool for the per-pixel policy: `W8A{0,4,8}`. A keyframe|residual pair is
//! separated by a vertical bar: `W8A8|W8A4`. A single part applies to both
//! paths. Pools are only meaningful on the residual side.

use std::fmt;
use std::str::FromStr;

use crate::calibration::{QuantScheme, ResidualBits};
use crate::error::{Error, Result};
use crate::quantizer::Granularity;

/// Activation precision: fixed or a pool of candidates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActBitsSpec {
    Fixed(u8),
    Pool(Vec<u8>),
}

/// One `WxAy` (or `WxA{..}`) term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrecisionSpec {
    pub weight_bits: u8,
    pub act_bits: ActBitsSpec,
}

impl FromStr for PrecisionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::Parse(format!("malformed precision {s:?}; expected e.g. W8A4 or W8A{{0,4,8}}"));
        let rest = s.strip_prefix('W').ok_or_else(err)?;
        let a_pos = rest.find('A').ok_or_else(err)?;
        let weight_bits: u8 = rest[..a_pos].parse().map_err(|_| err())?;
        let act = &rest[a_pos + 1..];
        let act_bits = if let Some(list) = act.strip_prefix('{') {
            let list = list.strip_suffix('}').ok_or_else(err)?;
            let bits = list
                .split(',')
                .map(|p| p.trim().parse::<u8>().map_err(|_| err()))
                .collect::<Result<Vec<u8>>>()?;
            if bits.len() < 2 || bits.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Parse(format!(
                    "pool {s:?} needs at least two strictly ascending bit-widths"
                )));
            }
            ActBitsSpec::Pool(bits)
        } else {
            ActBitsSpec::Fixed(act.parse().map_err(|_| err())?)
        };
        if weight_bits == 0 {
            return Err(Error::Parse(format!("{s:?}: weights need at least one bit")));
        }
        Ok(PrecisionSpec {
            weight_bits,
            act_bits,
        })
    }
}

impl fmt::Display for PrecisionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.act_bits {
            ActBitsSpec::Fixed(a) => write!(f, "W{}A{}", self.weight_bits, a),
            ActBitsSpec::Pool(bits) => {
                let list: Vec<String> = bits.iter().map(|b| b.to_string()).collect();
                write!(f, "W{}A{{{}}}", self.weight_bits, list.join(","))
            }
        }
    }
}

/// A full scheme: keyframe precision and residual precision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemeNotation {
    pub keyframe: PrecisionSpec,
    pub residual: PrecisionSpec,
}

impl FromStr for SchemeNotation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('|');
        let first = parts.next().expect("split yields at least one part");
        let keyframe: PrecisionSpec = first.trim().parse()?;
        let residual = match parts.next() {
            Some(second) => second.trim().parse()?,
            None => keyframe.clone(),
        };
        if parts.next().is_some() {
            return Err(Error::Parse(format!(
                "scheme {s:?} has more than one '|' separator"
            )));
        }
        if matches!(keyframe.act_bits, ActBitsSpec::Pool(_)) {
            return Err(Error::Parse(format!(
                "scheme {s:?}: pools are only supported on the residual side"
            )));
        }
        Ok(SchemeNotation { keyframe, residual })
    }
}

impl fmt::Display for SchemeNotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.keyframe == self.residual {
            write!(f, "{}", self.keyframe)
        } else {
            write!(f, "{}|{}", self.keyframe, self.residual)
        }
    }
}

impl SchemeNotation {
    /// Turn the notation into a calibration request.
    pub fn to_scheme(&self, weight_granularity: Granularity) -> Result<QuantScheme> {
        let keyframe_act_bits = match self.keyframe.act_bits {
            ActBitsSpec::Fixed(b) => b,
            ActBitsSpec::Pool(_) => unreachable!("rejected at parse time"),
        };
        let residual_act_bits = match &self.residual.act_bits {
            ActBitsSpec::Fixed(b) => ResidualBits::Fixed(*b),
            ActBitsSpec::Pool(bits) => ResidualBits::Pool(bits.clone()),
        };
        Ok(QuantScheme {
            keyframe_weight_bits: self.keyframe.weight_bits,
            keyframe_act_bits,
            residual_weight_bits: self.residual.weight_bits,
            residual_act_bits,
            weight_granularity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fixed_precision() {
        let p: PrecisionSpec = "W8A4".parse().unwrap();
        assert_eq!(p.weight_bits, 8);
        assert_eq!(p.act_bits, ActBitsSpec::Fixed(4));
        assert_eq!(p.to_string(), "W8A4");
    }

    #[test]
    fn parses_pool_precision() {
        let p: PrecisionSpec = "W8A{0,4,8}".parse().unwrap();
        assert_eq!(p.act_bits, ActBitsSpec::Pool(vec![0, 4, 8]));
        assert_eq!(p.to_string(), "W8A{0,4,8}");
    }

    #[test]
    fn parses_keyframe_residual_pair() {
        let s: SchemeNotation = "W8A8|W8A4".parse().unwrap();
        assert_eq!(s.keyframe.act_bits, ActBitsSpec::Fixed(8));
        assert_eq!(s.residual.act_bits, ActBitsSpec::Fixed(4));
        assert_eq!(s.to_string(), "W8A8|W8A4");
        // A lone part covers both paths and prints without the bar.
        let s: SchemeNotation = "W6A6".parse().unwrap();
        assert_eq!(s.keyframe, s.residual);
        assert_eq!(s.to_string(), "W6A6");
    }

    #[test]
    fn rejects_malformed_notation() {
        assert!("8A4".parse::<PrecisionSpec>().is_err());
        assert!("W8".parse::<PrecisionSpec>().is_err());
        assert!("W8A{4}".parse::<PrecisionSpec>().is_err(), "pool of one");
        assert!("W8A{8,4}".parse::<PrecisionSpec>().is_err(), "descending");
        assert!("W0A4".parse::<PrecisionSpec>().is_err(), "0-bit weights");
        assert!("W8A8|W8A4|W8A2".parse::<SchemeNotation>().is_err());
        assert!(
            "W8A{0,4}|W8A4".parse::<SchemeNotation>().is_err(),
            "keyframe pools are not a thing"
        );
    }
}
