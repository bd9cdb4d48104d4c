//! Input frames: flattened pixel vectors with timing metadata.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Channel layout of a decoded frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelMode {
    Gray,
    Rgb,
}

impl PixelMode {
    pub fn channels(self) -> usize {
        match self {
            PixelMode::Gray => 1,
            PixelMode::Rgb => 3,
        }
    }
}

impl std::str::FromStr for PixelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gray" | "grey" => Ok(PixelMode::Gray),
            "rgb" => Ok(PixelMode::Rgb),
            other => Err(format!("unknown pixel mode {other:?} (expected gray or rgb)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame {id}: {len} pixels do not match {width}x{height} ({channels} channel(s))")]
    DimensionMismatch { id: u64, len: usize, width: u32, height: u32, channels: usize },
    #[error("frame {id}: empty image")]
    EmptyImage { id: u64 },
    #[error("frame {id}: pixel {index} is {value}, expected a finite value in [0, 1]")]
    PixelOutOfRange { id: u64, index: usize, value: f64 },
    #[error("frame {id}: non-finite timestamp {timestamp}")]
    BadTimestamp { id: u64, timestamp: f64 },
}

/// One observation from the stream. Pixels are flattened row-major (RGB
/// interleaved per pixel in color mode) and normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub timestamp: f64,
    pub width: u32,
    pub height: u32,
    pub mode: PixelMode,
    pixels: Array1<f64>,
}

impl Frame {
    pub fn new(
        id: u64,
        timestamp: f64,
        width: u32,
        height: u32,
        mode: PixelMode,
        pixels: Vec<f64>,
    ) -> Result<Self, FrameError> {
        if !timestamp.is_finite() {
            return Err(FrameError::BadTimestamp { id, timestamp });
        }
        if width == 0 || height == 0 {
            return Err(FrameError::EmptyImage { id });
        }
        let expected = width as usize * height as usize * mode.channels();
        if pixels.len() != expected {
            return Err(FrameError::DimensionMismatch {
                id,
                len: pixels.len(),
                width,
                height,
                channels: mode.channels(),
            });
        }
        for (index, &value) in pixels.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(FrameError::PixelOutOfRange { id, index, value });
            }
        }
        Ok(Frame { id, timestamp, width, height, mode, pixels: Array1::from_vec(pixels) })
    }

    /// Flattened pixel vector; its length is the input dimension `N`.
    pub fn pixels(&self) -> &Array1<f64> {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}
