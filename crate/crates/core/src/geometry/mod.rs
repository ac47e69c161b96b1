//! Landmark geometry: part masks from 68-point annotations, face
//! normalisation and occlusion augmentation.

mod io;
mod mask;
mod normalize;
mod raster;
mod spline;

use crate::error::{invalid_input, Result};
use crate::NUM_LANDMARKS;

pub use io::{parse_pts, read_image_png, read_mask_png, read_pts, write_image_png, write_mask_png, write_pts};
pub use mask::{landmarks_to_mask, DEFAULT_EYEBROW_WIDTH_FRAC};
pub use normalize::{normalize_face, occlusion_augment, OcclusionRect};
pub use raster::{rasterize_polygon, PixelMask};
pub use spline::eyebrow_stroke;

/// Point in image pixel coordinates, `x` rightward and `y` downward.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Self) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Index ranges of the Multi-PIE 68-point markup (0-based, half-open).
pub mod markup {
    use std::ops::Range;

    pub const JAW: Range<usize> = 0..17;
    pub const RIGHT_BROW: Range<usize> = 17..22;
    pub const LEFT_BROW: Range<usize> = 22..27;
    pub const NOSE_BRIDGE: Range<usize> = 27..31;
    pub const NOSTRILS: Range<usize> = 31..36;
    pub const RIGHT_EYE: Range<usize> = 36..42;
    pub const LEFT_EYE: Range<usize> = 42..48;
    pub const OUTER_LIPS: Range<usize> = 48..60;
    pub const INNER_LIPS: Range<usize> = 60..68;
    /// Outer corner of the right eye (point 37 in 1-based numbering).
    pub const RIGHT_EYE_OUTER: usize = 36;
    /// Outer corner of the left eye (point 46 in 1-based numbering).
    pub const LEFT_EYE_OUTER: usize = 45;
}

/// Exactly 68 finite landmarks in Multi-PIE order.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point2>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(invalid_input(format!(
                "a landmark set needs {NUM_LANDMARKS} points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(invalid_input(format!("landmark {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn get(&self, index: usize) -> Point2 {
        self.points[index]
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), p| (x0.min(p.x), y0.min(p.y), x1.max(p.x), y1.max(p.y)),
        )
    }

    /// Height of the landmark bounding box, used as the face size.
    pub fn face_height(&self) -> f64 {
        let (_, y0, _, y1) = self.bounding_box();
        y1 - y0
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Result<Self> {
        Self::new(self.points.iter().map(|&p| f(p)).collect())
    }

    pub fn map_indexed(&self, f: impl Fn(usize, Point2) -> Point2) -> Result<Self> {
        Self::new(self.points.iter().enumerate().map(|(k, &p)| f(k, p)).collect())
    }
}

/// Facial part labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ClassId {
    Background = 0,
    Skin = 1,
    Eyebrows = 2,
    Eyes = 3,
    Nose = 4,
    UpperLip = 5,
    InnerMouth = 6,
    LowerLip = 7,
}

impl ClassId {
    pub const ALL: [ClassId; 8] = [
        ClassId::Background,
        ClassId::Skin,
        ClassId::Eyebrows,
        ClassId::Eyes,
        ClassId::Nose,
        ClassId::UpperLip,
        ClassId::InnerMouth,
        ClassId::LowerLip,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Background => "background",
            ClassId::Skin => "skin",
            ClassId::Eyebrows => "eyebrows",
            ClassId::Eyes => "eyes",
            ClassId::Nose => "nose",
            ClassId::UpperLip => "upper_lip",
            ClassId::InnerMouth => "inner_mouth",
            ClassId::LowerLip => "lower_lip",
        }
    }
}

/// Row-major grid of part labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(invalid_input(format!(
                "mask {width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| ClassId::from_u8(l).is_none()) {
            return Err(invalid_input(format!("invalid class label {bad}")));
        }
        Ok(Self { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, class: ClassId) -> Self {
        Self {
            width,
            height,
            labels: vec![class as u8; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> ClassId {
        ClassId::from_u8(self.labels[y * self.width + x]).expect("validated label")
    }

    pub fn set(&mut self, x: usize, y: usize, class: ClassId) {
        self.labels[y * self.width + x] = class as u8;
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> [usize; 8] {
        let mut h = [0; 8];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// `H × W × 3` intensities in `[0, 1]`, stored interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(invalid_input(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// An image with its landmarks and part mask in the same pixel frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub mask: SegMask,
}

impl FaceSample {
    pub fn new(image: Image, landmarks: LandmarkSet, mask: SegMask) -> Result<Self> {
        if (image.width(), image.height()) != (mask.width(), mask.height()) {
            return Err(invalid_input(format!(
                "image {}x{} and mask {}x{} differ in size",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            )));
        }
        Ok(Self { image, landmarks, mask })
    }
}
