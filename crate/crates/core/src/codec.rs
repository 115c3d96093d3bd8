//! Scalar quantizers behind the discrete token targets.

use serde::{Deserialize, Serialize};

/// Uniform bins over `[lo, hi)`. Values outside clamp to the edge bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformCodec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl UniformCodec {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(hi > lo && bins > 0, "empty codec range");
        Self { lo, hi, bins }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    /// Values within 1e-9 bins below an edge snap up, so exact edges computed
    /// in floating point land in the upper bin.
    pub fn encode(&self, v: f64) -> usize {
        let b = ((v - self.lo) / self.width() + 1e-9).floor();
        if b.is_nan() {
            return 0;
        }
        (b.max(0.0) as usize).min(self.bins - 1)
    }

    pub fn decode(&self, bin: usize) -> f64 {
        self.lo + (bin.min(self.bins - 1) as f64 + 0.5) * self.width()
    }
}

/// Depth bins uniform in inverse depth over `[z_near, z_far]`. Bin 0 holds the
/// farthest depths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthCodec {
    pub z_near: f64,
    pub z_far: f64,
    pub bins: usize,
}

impl Default for DepthCodec {
    fn default() -> Self {
        Self { z_near: 0.3, z_far: 1.5, bins: 32 }
    }
}

impl DepthCodec {
    fn inverse(&self) -> UniformCodec {
        UniformCodec::new(1.0 / self.z_far, 1.0 / self.z_near, self.bins)
    }

    pub fn encode(&self, z: f64) -> usize {
        self.inverse().encode(1.0 / z)
    }

    pub fn decode(&self, bin: usize) -> f64 {
        1.0 / self.inverse().decode(bin)
    }
}

/// Pixel-coordinate bins over `[0, extent)`.
pub fn coord_codec(extent: usize, bins: usize) -> UniformCodec {
    UniformCodec::new(0.0, extent as f64, bins)
}

/// Per-axis pose bins for `(x, y, z, yaw)`. Yaw is taken modulo pi.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseCodec {
    pub axes: [UniformCodec; 4],
}

impl Default for PoseCodec {
    fn default() -> Self {
        let half_pi = std::f64::consts::FRAC_PI_2;
        Self {
            axes: [
                UniformCodec::new(-0.3, 0.3, 64),
                UniformCodec::new(-0.3, 0.3, 64),
                UniformCodec::new(0.0, 0.3, 64),
                UniformCodec::new(-half_pi, half_pi, 64),
            ],
        }
    }
}

impl PoseCodec {
    pub fn encode(&self, pose: [f64; 4]) -> [usize; 4] {
        let yaw = crate::scenegen::geom::wrap_half_pi(pose[3]);
        [self.axes[0].encode(pose[0]), self.axes[1].encode(pose[1]), self.axes[2].encode(pose[2]), self.axes[3].encode(yaw)]
    }

    pub fn decode(&self, bins: [usize; 4]) -> [f64; 4] {
        [0, 1, 2, 3].map(|i| self.axes[i].decode(bins[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn depth_bin_closed_form() {
        // (1/0.6 - 1/1.5) / ((1/0.3 - 1/1.5) / 32) = 12
        assert_eq!(DepthCodec::default().encode(0.6), 12);
    }

    #[test]
    fn one_pixel_coordinate_bins() {
        let c = coord_codec(64, 64);
        assert_eq!(c.width(), 1.0);
        assert_eq!(c.encode(10.3), 10);
        assert_eq!(c.decode(10), 10.5);
    }

    proptest! {
        #[test]
        fn uniform_round_trip_within_half_bin(lo in -5.0f64..5.0, span in 0.1f64..10.0, bins in 1usize..200, u in 0.0f64..1.0) {
            let c = UniformCodec::new(lo, lo + span, bins);
            let v = lo + u * span * 0.999_999;
            let b = c.encode(v);
            prop_assert!(b < bins);
            prop_assert!((c.decode(b) - v).abs() <= c.width() / 2.0 + 1e-9);
            prop_assert_eq!(c.encode(c.decode(b)), b);
        }

        #[test]
        fn depth_round_trip_stays_in_bin(z in 0.3f64..1.5) {
            let c = DepthCodec::default();
            let b = c.encode(z);
            prop_assert_eq!(c.encode(c.decode(b)), b);
        }

        #[test]
        fn pose_round_trip(x in -0.3f64..0.3, y in -0.3f64..0.3, z in 0.0f64..0.3, yaw in -1.5f64..1.5) {
            let c = PoseCodec::default();
            let d = c.decode(c.encode([x, y, z, yaw]));
            for (i, v) in [x, y, z, yaw].into_iter().enumerate() {
                prop_assert!((d[i] - v).abs() <= c.axes[i].width() / 2.0 + 1e-9);
            }
        }
    }
}
