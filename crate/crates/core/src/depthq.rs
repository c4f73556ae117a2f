//! Depth ↔ bin quantization.
//!
//! Bins `1..=1000` cover the valid range; bin 0 marks invalid depth. A
//! depth `d` maps to `ceil(t × 1000)` clamped to `1..=1000`, where `t` is
//! the position of `d` in the range (linear in meters, or linear in `ln d`
//! for the log-uniform scheme). Bin edges therefore belong to the lower
//! bin and `d_min` itself lands in bin 1. Depths outside the range are
//! invalid. Dequantization returns the bin center.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::{DenseMap, MapKind, DEPTH_IGNORE};
use crate::vocab::MAX_BIN;

/// Positions within this many bin widths of an edge snap onto the edge,
/// so that exact edges such as the log midpoint are not pushed into the
/// next bin by rounding in `ln`.
const EDGE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Linear,
    LogUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthQuantizer {
    pub scheme: Scheme,
    pub d_min: f64,
    pub d_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Nyuv2,
    Cityscapes,
    Ddad,
    OpenWorld,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Nyuv2, Preset::Cityscapes, Preset::Ddad, Preset::OpenWorld];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Nyuv2 => "nyuv2",
            Preset::Cityscapes => "cityscapes",
            Preset::Ddad => "ddad",
            Preset::OpenWorld => "openworld",
        }
    }

    pub fn quantizer(self) -> DepthQuantizer {
        let (scheme, d_min, d_max) = match self {
            Preset::Nyuv2 => (Scheme::Linear, 0.0, 10.0),
            Preset::Cityscapes => (Scheme::Linear, 0.0, 80.0),
            Preset::Ddad => (Scheme::Linear, 0.05, 120.0),
            Preset::OpenWorld => (Scheme::LogUniform, 0.5, 100.0),
        };
        DepthQuantizer { scheme, d_min, d_max }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownDepthPreset(s.to_string()))
    }
}

impl DepthQuantizer {
    pub fn new(scheme: Scheme, d_min: f64, d_max: f64) -> Result<Self> {
        let q = Self { scheme, d_min, d_max };
        q.validate()?;
        Ok(q)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(name.parse::<Preset>()?.quantizer())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.d_min.is_finite()
            && self.d_max.is_finite()
            && self.d_min < self.d_max
            && match self.scheme {
                Scheme::Linear => self.d_min >= 0.0,
                Scheme::LogUniform => self.d_min > 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidQuantizer(format!(
                "{:?} range [{}, {}]",
                self.scheme, self.d_min, self.d_max
            )))
        }
    }

    /// Whether `d` lies in the quantizable range. A linear range starting at
    /// zero excludes zero itself (zero depth is the conventional hole value).
    pub fn in_range(&self, d: f64) -> bool {
        if self.scheme == Scheme::Linear && self.d_min == 0.0 {
            d > 0.0 && d <= self.d_max
        } else {
            d >= self.d_min && d <= self.d_max
        }
    }

    /// Normalized position of `d` in the range, in `[0, 1]` for valid depths.
    fn position(&self, d: f64) -> f64 {
        match self.scheme {
            Scheme::Linear => (d - self.d_min) / (self.d_max - self.d_min),
            Scheme::LogUniform => (d.ln() - self.d_min.ln()) / (self.d_max.ln() - self.d_min.ln()),
        }
    }

    pub fn quantize(&self, depth_m: f64) -> Result<u32> {
        if !depth_m.is_finite() {
            return Err(Error::InvalidDepth);
        }
        if !self.in_range(depth_m) {
            return Ok(DEPTH_IGNORE);
        }
        let t = self.position(depth_m) * MAX_BIN as f64;
        let bin = (t - EDGE_SNAP).ceil();
        Ok(bin.clamp(1.0, MAX_BIN as f64) as u32)
    }

    /// Bin center in meters.
    pub fn dequantize(&self, bin: u32) -> Result<f64> {
        if bin == DEPTH_IGNORE {
            return Err(Error::IgnoreBin);
        }
        if bin > MAX_BIN {
            return Err(Error::BinOutOfRange(bin));
        }
        let t = (bin as f64 - 0.5) / MAX_BIN as f64;
        Ok(match self.scheme {
            Scheme::Linear => self.d_min + t * (self.d_max - self.d_min),
            Scheme::LogUniform => (self.d_min.ln() + t * (self.d_max.ln() - self.d_min.ln())).exp(),
        })
    }

    /// Lower and upper depth edges of `bin`.
    pub fn bin_edges(&self, bin: u32) -> Result<(f64, f64)> {
        if bin == DEPTH_IGNORE {
            return Err(Error::IgnoreBin);
        }
        if bin > MAX_BIN {
            return Err(Error::BinOutOfRange(bin));
        }
        let at = |t: f64| match self.scheme {
            Scheme::Linear => self.d_min + t * (self.d_max - self.d_min),
            Scheme::LogUniform => (self.d_min.ln() + t * (self.d_max.ln() - self.d_min.ln())).exp(),
        };
        Ok((at((bin - 1) as f64 / MAX_BIN as f64), at(bin as f64 / MAX_BIN as f64)))
    }

    /// Quantizes a per-pixel depth image; non-finite depths become bin 0.
    pub fn quantize_map(&self, width: usize, height: usize, depth_m: &[f64]) -> Result<DenseMap> {
        let values = depth_m
            .iter()
            .map(|&d| if d.is_finite() { self.quantize(d) } else { Ok(DEPTH_IGNORE) })
            .collect::<Result<Vec<_>>>()?;
        DenseMap::new(width, height, values, MapKind::DepthBins)
    }

    /// Dequantizes a bin map; ignore pixels become `None`.
    pub fn dequantize_map(&self, bins: &DenseMap) -> Result<Vec<Option<f64>>> {
        bins.values
            .iter()
            .map(|&b| {
                if b == DEPTH_IGNORE {
                    Ok(None)
                } else {
                    self.dequantize(b).map(Some)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn nyu() -> DepthQuantizer {
        Preset::Nyuv2.quantizer()
    }

    #[test]
    fn boundary_and_midpoint_examples() {
        assert_eq!(nyu().quantize(10.0).unwrap(), 1000);
        assert_eq!(nyu().quantize(5.0).unwrap(), 500);
        let ow = Preset::OpenWorld.quantizer();
        assert_eq!(ow.quantize(0.5).unwrap(), 1);
        assert_eq!(ow.quantize((0.5f64 * 100.0).sqrt()).unwrap(), 500);
        assert_eq!(ow.quantize(100.0).unwrap(), 1000);
    }

    #[test]
    fn bin_centers() {
        assert_relative_eq!(nyu().dequantize(1000).unwrap(), 9.995, epsilon = 1e-12);
        assert_relative_eq!(nyu().dequantize(500).unwrap(), 4.995, epsilon = 1e-12);
        assert_eq!(nyu().dequantize(0), Err(Error::IgnoreBin));
        assert_eq!(nyu().dequantize(1001), Err(Error::BinOutOfRange(1001)));
    }

    #[test]
    fn invalid_depths() {
        assert_eq!(nyu().quantize(0.0).unwrap(), 0);
        assert_eq!(nyu().quantize(-1.0).unwrap(), 0);
        assert_eq!(nyu().quantize(10.5).unwrap(), 0);
        assert_eq!(Preset::Ddad.quantizer().quantize(0.04).unwrap(), 0);
        assert_eq!(Preset::Ddad.quantizer().quantize(0.05).unwrap(), 1);
        assert_eq!(Preset::OpenWorld.quantizer().quantize(0.49).unwrap(), 0);
        assert_eq!(nyu().quantize(f64::NAN), Err(Error::InvalidDepth));
    }

    #[test]
    fn presets_and_validation() {
        assert_eq!(DepthQuantizer::preset("cityscapes").unwrap().d_max, 80.0);
        assert!(matches!(DepthQuantizer::preset("kitti"), Err(Error::UnknownDepthPreset(_))));
        assert!(DepthQuantizer::new(Scheme::LogUniform, 0.0, 10.0).is_err());
        assert!(DepthQuantizer::new(Scheme::Linear, 5.0, 5.0).is_err());
        assert!(DepthQuantizer::new(Scheme::Linear, 0.0, 5.0).is_ok());
    }

    #[test]
    fn identity_on_bins_for_every_preset() {
        for p in Preset::ALL {
            let q = p.quantizer();
            for b in 1..=MAX_BIN {
                assert_eq!(q.quantize(q.dequantize(b).unwrap()).unwrap(), b, "{} bin {b}", p.name());
            }
        }
    }

    #[test]
    fn map_helpers() {
        let m = nyu().quantize_map(3, 1, &[5.0, f64::NAN, 0.0]).unwrap();
        assert_eq!(m.values, vec![500, 0, 0]);
        let d = nyu().dequantize_map(&m).unwrap();
        assert_eq!(d[1], None);
        assert_relative_eq!(d[0].unwrap(), 4.995, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn monotone(a in 0.0f64..12.0, b in 0.0f64..12.0) {
            let q = Preset::Nyuv2.quantizer();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if q.in_range(lo) && q.in_range(hi) {
                prop_assert!(q.quantize(lo).unwrap() <= q.quantize(hi).unwrap());
            }
        }

        #[test]
        fn round_trip_within_half_bin(t in 0.0f64..1.0) {
            for p in Preset::ALL {
                let q = p.quantizer();
                let d = match q.scheme {
                    Scheme::Linear => q.d_min + t * (q.d_max - q.d_min),
                    Scheme::LogUniform => (q.d_min.ln() + t * (q.d_max.ln() - q.d_min.ln())).exp(),
                };
                if !q.in_range(d) { continue; }
                let b = q.quantize(d).unwrap();
                let (lo, hi) = q.bin_edges(b).unwrap();
                let c = q.dequantize(b).unwrap();
                let half = (c - lo).max(hi - c);
                prop_assert!((c - d).abs() <= half * (1.0 + 1e-9), "{} d={d} bin={b}", p.name());
            }
        }
    }
}
