use serde::{Deserialize, Serialize};

/// Channel-major image geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// A CHW image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    data: Vec<f32>,
}

impl Image {
    /// Panics if `data` does not match `shape` or holds values outside `[0, 1]`.
    pub fn new(shape: ImageShape, data: Vec<f32>) -> Self {
        assert_eq!(shape.len(), data.len(), "pixel buffer does not match shape");
        assert!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            "pixel values must lie in [0, 1]"
        );
        Self { shape, data }
    }

    pub fn filled(shape: ImageShape, value: f32) -> Self {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.height * self.shape.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub(crate) fn from_raw_clamped(shape: ImageShape, mut data: Vec<f32>) -> Self {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self { shape, data }
    }

    /// Bilinear sample of channel `c` at continuous pixel coordinates,
    /// clamped to the border.
    pub(crate) fn sample_bilinear(&self, c: usize, y: f32, x: f32) -> f32 {
        let h = self.shape.height;
        let w = self.shape.width;
        let plane = self.channel(c);
        let y = y.clamp(0.0, (h - 1) as f32);
        let x = x.clamp(0.0, (w - 1) as f32);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
        let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// One labelled image. `class_id` is never exposed to pre-training batches.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Image,
    pub class_id: usize,
    pub sample_id: u64,
}
