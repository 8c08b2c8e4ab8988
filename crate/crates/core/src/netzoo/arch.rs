use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{PoeError, Result};

/// Input image geometry, channels first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// `WRN-l-(k_c, k_s)`: four convolution groups where conv2/conv3 widths scale
/// with `widen_common` and conv4 with `widen_special`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub depth: usize,
    pub widen_common: f64,
    pub widen_special: f64,
    pub num_classes: usize,
    pub input: InputShape,
}

/// `round(base·k)` with halves rounded up and a floor of one channel.
pub fn scaled_channels(base: usize, k: f64) -> usize {
    ((base as f64 * k + 0.5).floor() as usize).max(1)
}

impl ArchConfig {
    pub fn new(depth: usize, widen_common: f64, widen_special: f64, num_classes: usize, input: InputShape) -> Result<Self> {
        let cfg = Self {
            depth,
            widen_common,
            widen_special,
            num_classes,
            input,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 10 || !(self.depth - 4).is_multiple_of(6) {
            return Err(PoeError::Arch(format!(
                "depth {} must satisfy (depth - 4) % 6 == 0 with at least one block per group",
                self.depth
            )));
        }
        for (name, k) in [("k_c", self.widen_common), ("k_s", self.widen_special)] {
            if !(k > 0.0 && k.is_finite()) {
                return Err(PoeError::Arch(format!("widening factor {name} must be positive, got {k}")));
            }
        }
        if self.num_classes == 0 {
            return Err(PoeError::Arch("num_classes must be positive".into()));
        }
        let InputShape { channels, height, width } = self.input;
        if channels == 0 || height < 4 || width < 4 {
            return Err(PoeError::Arch(format!("input {channels}x{height}x{width} is too small for two stride-2 groups")));
        }
        Ok(())
    }

    pub fn blocks_per_group(&self) -> usize {
        (self.depth - 4) / 6
    }

    pub fn conv1_channels(&self) -> usize {
        16
    }

    pub fn conv2_channels(&self) -> usize {
        scaled_channels(16, self.widen_common)
    }

    pub fn conv3_channels(&self) -> usize {
        scaled_channels(32, self.widen_common)
    }

    pub fn conv4_channels(&self) -> usize {
        scaled_channels(64, self.widen_special)
    }

    /// Spatial size after a stride-2 3×3 conv with padding 1.
    fn halve(n: usize) -> usize {
        (n + 2 - 3) / 2 + 1
    }

    /// Shape of the conv3 output, i.e. what the library hands to every head.
    pub fn library_output(&self) -> InputShape {
        InputShape::new(
            self.conv3_channels(),
            Self::halve(self.input.height),
            Self::halve(self.input.width),
        )
    }

    /// Spatial size of the conv4 output.
    pub fn head_spatial(&self) -> (usize, usize) {
        let lib = self.library_output();
        (Self::halve(lib.height), Self::halve(lib.width))
    }

    /// Same trunk, different head: the shape of an expert for `classes` outputs.
    pub fn with_head(&self, widen_special: f64, num_classes: usize) -> Self {
        Self {
            widen_special,
            num_classes,
            ..*self
        }
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WRN-{}-({}, {})", self.depth, self.widen_common, self.widen_special)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IN32: InputShape = InputShape::new(3, 32, 32);

    #[test]
    fn depth_must_be_six_n_plus_four() {
        assert!(ArchConfig::new(10, 1.0, 1.0, 10, IN32).is_ok());
        assert!(ArchConfig::new(16, 1.0, 1.0, 10, IN32).is_ok());
        assert!(matches!(ArchConfig::new(12, 1.0, 1.0, 10, IN32), Err(PoeError::Arch(_))));
        assert!(ArchConfig::new(4, 1.0, 1.0, 10, IN32).is_err());
    }

    #[test]
    fn one_block_per_group_at_depth_ten() {
        let cfg = ArchConfig::new(10, 1.0, 1.0, 10, IN32).unwrap();
        assert_eq!(cfg.blocks_per_group(), 1);
        assert_eq!(ArchConfig::new(40, 4.0, 4.0, 100, IN32).unwrap().blocks_per_group(), 6);
    }

    #[test]
    fn channel_widths_follow_widening_factors() {
        let cfg = ArchConfig::new(16, 1.0, 0.25, 20, IN32).unwrap();
        assert_eq!(
            (cfg.conv1_channels(), cfg.conv2_channels(), cfg.conv3_channels(), cfg.conv4_channels()),
            (16, 16, 32, 16)
        );
        let cfg = ArchConfig::new(16, 2.0, 2.0, 20, IN32).unwrap();
        assert_eq!((cfg.conv2_channels(), cfg.conv3_channels(), cfg.conv4_channels()), (32, 64, 128));
    }

    #[test]
    fn fractional_widths_round_half_up_with_floor_one() {
        assert_eq!(scaled_channels(64, 0.25), 16);
        assert_eq!(scaled_channels(16, 0.03125), 1); // 0.5 rounds up
        assert_eq!(scaled_channels(16, 0.01), 1); // floor
        assert_eq!(scaled_channels(16, 1.0 / 3.0), 5); // 5.33
        assert_eq!(scaled_channels(32, 0.078125), 3); // 2.5 rounds up
    }

    #[test]
    fn desk_student_halves_twice_by_the_end_of_conv4() {
        // conv3 is the only stride-2 group inside the library; conv4 halves again.
        let cfg = ArchConfig::new(10, 1.0, 1.0, 100, IN32).unwrap();
        assert_eq!(cfg.library_output(), InputShape::new(32, 16, 16));
        assert_eq!(cfg.head_spatial(), (8, 8));
    }
}
