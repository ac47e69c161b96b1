//! Procedural face-like samples with exact landmarks and part masks.
//!
//! A fixed 68-point template (elliptic jaw, arched brows, almond eyes,
//! nose, two-lipped mouth) is deformed per sample by a similarity transform,
//! a smooth sinusoidal displacement field and a varying mouth opening, all
//! proportional to the shape amplitude. Images shade every part with its
//! own colour under random illumination, then add smooth texture and pixel
//! noise, with random blobs in the background.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid_config, Result};
use crate::geometry::{landmarks_to_mask, ClassId, FaceSample, Image, LandmarkSet, Point2, DEFAULT_EYEBROW_WIDTH_FRAC};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    /// Side length of the square images.
    pub size: usize,
    /// Shape variation as a fraction of the image size.
    pub amplitude: f64,
    /// Standard deviation of the texture and pixel noise (intensities are in `[0, 1]`).
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 250,
            size: 64,
            amplitude: 0.1,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, stride: usize) -> Result<()> {
        if self.count == 0 {
            return Err(invalid_config("synthetic count must be positive"));
        }
        if self.size == 0 || !self.size.is_multiple_of(stride) {
            return Err(invalid_config(format!(
                "synthetic size {} not divisible by stride {stride}",
                self.size
            )));
        }
        if !(0.0..=0.5).contains(&self.amplitude) {
            return Err(invalid_config(format!("amplitude {} outside [0, 0.5]", self.amplitude)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(invalid_config(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

/// Mouth opening of the template, in 64-unit frame coordinates.
const TEMPLATE_MOUTH_OPEN: f64 = 1.5;

/// Template points in a 64 × 64 frame for a given mouth opening.
fn template_points(open: f64) -> Vec<Point2> {
    let (cx, cy) = (32.0, 34.0);
    let mut p = Vec::with_capacity(68);
    // jaw: lower part of an ellipse, subject's right (image left) to left
    let (a, b) = (22.0, 24.0);
    for i in 0..17 {
        let phi = PI + 0.15 - i as f64 * (PI + 0.3) / 16.0;
        p.push(Point2::new(cx + a * phi.cos(), cy + b * phi.sin()));
    }
    // brows: five points each, image left to right; u is 0 at the outer end
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let t = i as f64 / 4.0;
            let u = if side < 0.0 { t } else { 1.0 - t };
            let x = cx + side * (18.0 - 14.0 * u);
            let y = cy - 15.0 - 3.0 * (PI * (0.2 + 0.7 * u)).sin();
            p.push(Point2::new(x, y));
        }
    }
    // nose bridge, top to bottom
    for i in 0..4 {
        p.push(Point2::new(cx, cy - 11.0 + i as f64 * 4.0));
    }
    // nostrils, left to right
    for (dx, dy) in [(-5.0, 4.0), (-2.5, 5.0), (0.0, 5.5), (2.5, 5.0), (5.0, 4.0)] {
        p.push(Point2::new(cx + dx, cy + dy));
    }
    // eyes: image-left corner, two upper lid points, image-right corner,
    // two lower lid points
    for ex in [cx - 10.0, cx + 10.0] {
        let (hw, hh) = (4.5, 2.0);
        let ring = [
            (-1.0, 0.0),
            (-0.4, -1.0),
            (0.4, -1.0),
            (1.0, 0.0),
            (0.4, 1.0),
            (-0.4, 1.0),
        ];
        for (ux, uy) in ring {
            p.push(Point2::new(ex + ux * hw, cy - 8.0 + uy * hh));
        }
    }
    // outer lips: corner, upper contour left to right, corner, lower back
    let my = cy + 13.0;
    let half = open / 2.0;
    let upper: [(f64, f64); 7] = [
        (-9.0, 0.0),
        (-6.0, -2.5),
        (-2.5, -3.2),
        (0.0, -2.6),
        (2.5, -3.2),
        (6.0, -2.5),
        (9.0, 0.0),
    ];
    for (dx, dy) in upper {
        let lift = if dx.abs() < 9.0 { half } else { 0.0 };
        p.push(Point2::new(cx + dx, my + dy - lift));
    }
    for (dx, dy) in [(6.0, 3.0), (2.5, 3.8), (0.0, 4.0), (-2.5, 3.8), (-6.0, 3.0)] {
        p.push(Point2::new(cx + dx, my + dy + half));
    }
    // inner lips: corner, three upper, corner, three lower (right to left)
    p.push(Point2::new(cx - 7.0, my));
    for dx in [-3.0, 0.0, 3.0] {
        p.push(Point2::new(cx + dx, my - 0.5 - half));
    }
    p.push(Point2::new(cx + 7.0, my));
    for dx in [3.0, 0.0, -3.0] {
        p.push(Point2::new(cx + dx, my + 0.5 + half));
    }
    p
}

/// The undeformed template scaled to a `width × height` frame.
pub fn template_landmarks(width: f64, height: f64) -> LandmarkSet {
    scaled(template_points(TEMPLATE_MOUTH_OPEN), width, height)
}

fn scaled(points: Vec<Point2>, width: f64, height: f64) -> LandmarkSet {
    let (sx, sy) = (width / 64.0, height / 64.0);
    LandmarkSet::new(points.into_iter().map(|p| Point2::new(p.x * sx, p.y * sy)).collect())
        .expect("template has 68 finite points")
}

/// Random landmarks around the template: similarity transform plus a smooth
/// displacement field, both scaled by `amplitude`.
fn deformed_landmarks<R: Rng + ?Sized>(amplitude: f64, size: f64, rng: &mut R) -> LandmarkSet {
    let a = amplitude;
    let open = TEMPLATE_MOUTH_OPEN + a * 40.0 * rng.random_range(-0.03..0.1);
    let base = template_points(open.max(0.0));
    let scale = 1.0 + a * rng.random_range(-1.0..1.0);
    let angle = a * rng.random_range(-1.0..1.0);
    let shift = (
        a * 20.0 * rng.random_range(-1.0..1.0),
        a * 20.0 * rng.random_range(-1.0..1.0),
    );
    let waves: Vec<[f64; 5]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.0..2.0 * PI),
                a * 10.0 * rng.random_range(-1.0..1.0),
                a * 10.0 * rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let (s, c) = angle.sin_cos();
    let moved = base
        .into_iter()
        .map(|p| {
            let (u, v) = (p.x - 32.0, p.y - 32.0);
            let mut x = 32.0 + scale * (c * u - s * v) + shift.0;
            let mut y = 32.0 + scale * (s * u + c * v) + shift.1;
            for [fx, fy, ph, ax, ay] in &waves {
                let w = (2.0 * PI * (fx * p.x + fy * p.y) / 64.0 + ph).sin() / 3.0;
                x += ax * w;
                y += ay * w;
            }
            Point2::new(x, y)
        })
        .collect();
    scaled(moved, size, size)
}

/// Per-part base colours (RGB).
const PALETTE: [[f32; 3]; 8] = [
    [0.0, 0.0, 0.0], // background: drawn per sample
    [0.62, 0.48, 0.40],
    [0.42, 0.31, 0.26],
    [0.47, 0.44, 0.47],
    [0.66, 0.51, 0.43],
    [0.62, 0.41, 0.39],
    [0.38, 0.24, 0.24],
    [0.64, 0.43, 0.41],
];

/// Smooth random field with values roughly in `[-1, 1]`.
struct Texture {
    waves: Vec<[f64; 4]>,
}

impl Texture {
    fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let waves = (0..4)
            .map(|_| {
                [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.5..1.0),
                ]
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64, size: f64) -> f64 {
        self.waves
            .iter()
            .map(|[fx, fy, ph, amp]| amp * (2.0 * PI * (fx * x + fy * y) / size + ph).sin())
            .sum::<f64>()
            / 2.0
    }
}

fn render<R: Rng + ?Sized>(mask: &crate::geometry::SegMask, noise: f64, rng: &mut R) -> Image {
    let (w, h) = (mask.width(), mask.height());
    let size = w.max(h) as f64;
    let background: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let blob_color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let blobs: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..size),
                rng.random_range(0.0..size),
                rng.random_range(0.08..0.2) * size,
            )
        })
        .collect();
    let gain = 1.0 + rng.random_range(-0.2..0.2) as f32;
    let tilt = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let texture = Texture::new(rng);
    let pixel_noise = Normal::new(0.0, noise).expect("noise is finite and non-negative");
    let mut image = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let class = mask.get(x, y);
            let base = if class == ClassId::Background {
                let in_blob = blobs
                    .iter()
                    .any(|&(bx, by, r)| (px - bx).powi(2) + (py - by).powi(2) < r * r);
                if in_blob {
                    blob_color
                } else {
                    background
                }
            } else {
                PALETTE[class as usize]
            };
            let shade = gain * (1.0 + (tilt.0 * (px / size - 0.5) + tilt.1 * (py / size - 0.5)) as f32);
            let smooth = (noise * texture.at(px, py, size)) as f32;
            let rgb = std::array::from_fn(|c| {
                let v = base[c] * shade + smooth + pixel_noise.sample(rng) as f32;
                v.clamp(0.0, 1.0)
            });
            image.set_pixel(x, y, rgb);
        }
    }
    image
}

/// Generates `spec.count` samples; the same spec always yields the same data.
pub fn synth_faces(spec: &SynthSpec) -> Result<Vec<FaceSample>> {
    spec.validate(1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.size;
    (0..spec.count)
        .map(|_| {
            let landmarks = deformed_landmarks(spec.amplitude, size as f64, &mut rng);
            let mask = landmarks_to_mask(&landmarks, size, size, DEFAULT_EYEBROW_WIDTH_FRAC);
            let image = render(&mask, spec.noise, &mut rng);
            FaceSample::new(image, landmarks, mask)
        })
        .collect()
}
