use rand::Rng;

use super::mask::{landmarks_to_mask, DEFAULT_EYEBROW_WIDTH_FRAC};
use super::{FaceSample, Image, LandmarkSet, Point2};
use crate::error::{invalid_input, Result};

/// Bilinear sample at continuous pixel-centre coordinates; zero outside.
fn sample_bilinear(image: &Image, x: f64, y: f64) -> [f32; 3] {
    // pixel (i, j) has its centre at (j + 0.5, i + 0.5)
    let (u, v) = (x - 0.5, y - 0.5);
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = ((u - x0) as f32, (v - y0) as f32);
    let mut acc = [0.0f32; 3];
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (sx, sy) = (x0 + dx, y0 + dy);
            if sx < 0.0 || sy < 0.0 || sx >= image.width() as f64 || sy >= image.height() as f64 {
                continue;
            }
            let p = image.pixel(sx as usize, sy as usize);
            let w = wx * wy;
            for c in 0..3 {
                acc[c] += w * p[c];
            }
        }
    }
    acc
}

/// Crops the landmark bounding box (shifted by up to `±jitter` of its size in
/// each axis), rescales it to `target_height` rows and rebuilds the part mask
/// in the new frame.
pub fn normalize_face<R: Rng + ?Sized>(
    image: &Image,
    landmarks: &LandmarkSet,
    target_height: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<FaceSample> {
    if target_height == 0 {
        return Err(invalid_input("target height must be positive"));
    }
    if !(0.0..0.5).contains(&jitter) {
        return Err(invalid_input(format!("jitter {jitter} outside [0, 0.5)")));
    }
    let (x0, y0, x1, y1) = landmarks.bounding_box();
    let (bw, bh) = (x1 - x0, y1 - y0);
    if !(bw > 0.0 && bh > 0.0) {
        return Err(invalid_input("landmark bounding box has zero area"));
    }
    let (dx, dy) = if jitter > 0.0 {
        (
            rng.random_range(-jitter..jitter) * bw,
            rng.random_range(-jitter..jitter) * bh,
        )
    } else {
        (0.0, 0.0)
    };
    let origin = Point2::new(x0 + dx, y0 + dy);
    let scale = target_height as f64 / bh;
    let out_w = ((bw * scale).round() as usize).max(1);
    let out_h = target_height;

    let mut out = Image::zeros(out_w, out_h);
    for r in 0..out_h {
        for c in 0..out_w {
            let sx = origin.x + (c as f64 + 0.5) / scale;
            let sy = origin.y + (r as f64 + 0.5) / scale;
            out.set_pixel(c, r, sample_bilinear(image, sx, sy));
        }
    }
    let moved = landmarks.map(|p| Point2::new((p.x - origin.x) * scale, (p.y - origin.y) * scale))?;
    let mask = landmarks_to_mask(&moved, out_w, out_h, DEFAULT_EYEBROW_WIDTH_FRAC);
    FaceSample::new(out, moved, mask)
}

/// Axis-aligned rectangle blacked out by [`occlusion_augment`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OcclusionRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

const OCCLUDER_MIN_FRAC: f64 = 0.15;
const OCCLUDER_MAX_FRAC: f64 = 0.4;

/// With probability `prob`, zeroes a rectangle whose sides are drawn
/// uniformly from `[0.15, 0.4] ×` image height at a uniform position inside
/// the image. Labels are left alone.
pub fn occlusion_augment<R: Rng + ?Sized>(
    image: &Image,
    prob: f64,
    rng: &mut R,
) -> Result<(Image, Option<OcclusionRect>)> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(invalid_input(format!("probability {prob} outside [0, 1]")));
    }
    let mut out = image.clone();
    if image.width() == 0 || image.height() == 0 || rng.random::<f64>() >= prob {
        return Ok((out, None));
    }
    let h = image.height() as f64;
    let mut side = |limit: usize| {
        let s = rng.random_range(OCCLUDER_MIN_FRAC..=OCCLUDER_MAX_FRAC) * h;
        (s.round() as usize).clamp(1, limit)
    };
    let width = side(image.width());
    let height = side(image.height());
    let x = rng.random_range(0..=image.width() - width);
    let y = rng.random_range(0..=image.height() - height);
    for row in y..y + height {
        for col in x..x + width {
            out.set_pixel(col, row, [0.0; 3]);
        }
    }
    Ok((out, Some(OcclusionRect { x, y, width, height })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_landmarks(x0: f64, y0: f64, w: f64, h: f64) -> LandmarkSet {
        // 68 points on a 17 x 4 lattice covering the box exactly
        let pts = (0..68)
            .map(|i| {
                let (c, r) = ((i % 17) as f64, (i / 17) as f64);
                Point2::new(x0 + w * c / 16.0, y0 + h * r / 3.0)
            })
            .collect();
        LandmarkSet::new(pts).unwrap()
    }

    #[test]
    fn identity_crop_is_pure_scale() {
        let img = Image::new(70, 100, vec![0.5; 70 * 100 * 3]).unwrap();
        let l = grid_landmarks(0.0, 0.0, 70.0, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = normalize_face(&img, &l, 350, 0.0, &mut rng).unwrap();
        assert_eq!(s.image.height(), 350);
        assert_eq!(s.image.width(), 245);
        let (_, y0, _, y1) = s.landmarks.bounding_box();
        assert_eq!(y0, 0.0);
        assert!(y1 <= 350.0 && (y1 - 350.0).abs() < 1e-9);
        assert_eq!(s.mask.width(), 245);
    }

    #[test]
    fn halving_scale_halves_distances() {
        let img = Image::zeros(600, 800);
        let l = grid_landmarks(50.0, 40.0, 500.0, 700.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = normalize_face(&img, &l, 350, 0.0, &mut rng).unwrap();
        // direct affine application to each point
        let (ox, oy, k) = (50.0, 40.0, 0.5);
        for (p, q) in l.points().iter().zip(s.landmarks.points()) {
            let expected = Point2::new((p.x - ox) * k, (p.y - oy) * k);
            assert!(expected.distance(*q) <= 1e-9 * (1.0 + expected.x.abs() + expected.y.abs()));
        }
        for i in 0..68 {
            for j in (i + 1)..68 {
                let d0 = l.get(i).distance(l.get(j));
                let d1 = s.landmarks.get(i).distance(s.landmarks.get(j));
                assert!((d1 - d0 / 2.0).abs() <= 1e-6 * d0);
            }
        }
    }

    #[test]
    fn jitter_is_reproducible() {
        let img = Image::new(64, 64, (0..64 * 64 * 3).map(|v| (v % 7) as f32 / 7.0).collect()).unwrap();
        let l = grid_landmarks(10.0, 12.0, 40.0, 44.0);
        let a = normalize_face(&img, &l, 48, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = normalize_face(&img, &l, 48, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let c = normalize_face(&img, &l, 48, 0.1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_ne!(a.landmarks, c.landmarks);
    }

    #[test]
    fn degenerate_box_rejected() {
        let pts = vec![Point2::new(3.0, 4.0); 68];
        let l = LandmarkSet::new(pts).unwrap();
        let r = normalize_face(&Image::zeros(8, 8), &l, 10, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn occlusion_probability_zero_is_identity() {
        let img = Image::new(4, 4, vec![0.3; 48]).unwrap();
        let (out, rect) = occlusion_augment(&img, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, img);
        assert!(rect.is_none());
    }

    #[test]
    fn occlusion_zeroes_one_rectangle() {
        let img = Image::new(64, 64, vec![0.5; 64 * 64 * 3]).unwrap();
        for seed in 0..20 {
            let (out, rect) = occlusion_augment(&img, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let rect = rect.unwrap();
            // scan the output for the zeroed region
            let zeros: Vec<(usize, usize)> = (0..64)
                .flat_map(|y| (0..64).map(move |x| (x, y)))
                .filter(|&(x, y)| out.pixel(x, y) == [0.0; 3])
                .collect();
            assert_eq!(zeros.len(), rect.width * rect.height);
            let xmin = zeros.iter().map(|p| p.0).min().unwrap();
            let xmax = zeros.iter().map(|p| p.0).max().unwrap();
            let ymin = zeros.iter().map(|p| p.1).min().unwrap();
            let ymax = zeros.iter().map(|p| p.1).max().unwrap();
            assert_eq!((xmax - xmin + 1) * (ymax - ymin + 1), zeros.len());
            assert!((10..=26).contains(&rect.width) && (10..=26).contains(&rect.height));
        }
    }

    #[test]
    fn occlusion_is_deterministic() {
        let img = Image::new(32, 32, vec![0.5; 32 * 32 * 3]).unwrap();
        let a = occlusion_augment(&img, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = occlusion_augment(&img, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
