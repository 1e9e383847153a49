//! Bounding boxes, coordinate quantization into the layout vocabulary,
//! and overlap measures.

use thiserror::Error;

/// Number of discrete coordinate bins per axis ([0, 1000] inclusive).
pub const NUM_BINS: usize = 1001;
/// Largest bin index.
pub const MAX_BIN: u16 = 1000;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("coordinate {0} outside [0, 1]")]
    ValueOutOfRange(f64),
    #[error("bin {0} outside [0, 1000]")]
    BinOutOfRange(u16),
    #[error("invalid box ({0}, {1}, {2}, {3})")]
    InvalidBox(u16, u16, u16, u16),
}

/// Quantized box in layout-vocabulary bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x1: u16,
    pub y1: u16,
    pub x2: u16,
    pub y2: u16,
}

impl BBox {
    pub fn new(x1: u16, y1: u16, x2: u16, y2: u16) -> Result<Self, GeometryError> {
        if x1 > x2 || y1 > y2 || x2 > MAX_BIN || y2 > MAX_BIN {
            return Err(GeometryError::InvalidBox(x1, y1, x2, y2));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn coords(&self) -> [u16; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_coords(c: [u16; 4]) -> Result<Self, GeometryError> {
        BBox::new(c[0], c[1], c[2], c[3])
    }

    fn area(&self) -> f64 {
        (self.x2 - self.x1) as f64 * (self.y2 - self.y1) as f64
    }
}

/// Box in [0,1]-normalized page coordinates, pre-quantization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl NormBox {
    pub fn quantize(&self) -> Result<BBox, GeometryError> {
        BBox::new(
            quantize(self.x1)?,
            quantize(self.y1)?,
            quantize(self.x2)?,
            quantize(self.y2)?,
        )
    }
}

/// Map a normalized coordinate to a bin: `round(v·1000)`, half-up.
pub fn quantize(v: f64) -> Result<u16, GeometryError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(GeometryError::ValueOutOfRange(v));
    }
    Ok((v * MAX_BIN as f64 + 0.5).floor() as u16)
}

/// Inverse mapping, `bin/1000`.
pub fn dequantize(bin: u16) -> Result<f64, GeometryError> {
    if bin > MAX_BIN {
        return Err(GeometryError::BinOutOfRange(bin));
    }
    Ok(bin as f64 / MAX_BIN as f64)
}

/// Intersection over union with boxes treated as half-open ranges.
/// Degenerate (zero-area) boxes overlap nothing, including themselves.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let iy = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
