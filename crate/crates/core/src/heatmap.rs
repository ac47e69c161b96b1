//! Gaussian confidence maps: one channel per landmark.
//!
//! Heatmap pixel `(row r, col c)` is evaluated at the point `(x = c, y = r)`,
//! so decoding returns integer coordinates and an encode/decode round trip
//! is exact for landmarks on integer positions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid_input, Result};
use crate::geometry::{Image, LandmarkSet, Point2};
use crate::tensor::{Scalar, Tensor};
use crate::NUM_LANDMARKS;

/// Gaussian width at a 350 px face height.
pub const REFERENCE_SIGMA: f64 = 5.0;
pub const REFERENCE_FACE_HEIGHT: f64 = 350.0;

/// σ scaled from the 350 px reference to a smaller or larger face height.
pub fn default_sigma(face_height: f64) -> f64 {
    REFERENCE_SIGMA * face_height / REFERENCE_FACE_HEIGHT
}

/// `channels × height × width` confidences in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl HeatmapStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(invalid_input(format!(
                "heatmap stack {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, k: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[k * plane..(k + 1) * plane]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.channels, self.height, self.width], |i| {
            T::cast(self.data[i] as f64)
        })
    }
}

/// One peak-normalised Gaussian per landmark. Landmarks outside the grid
/// still contribute their in-bounds tail.
pub fn encode_landmarks(landmarks: &LandmarkSet, width: usize, height: usize, sigma: f64) -> Result<HeatmapStack> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(invalid_input(format!("sigma must be positive, got {sigma}")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let plane = width * height;
    let mut data = vec![0.0f32; NUM_LANDMARKS * plane];
    for (k, p) in landmarks.points().iter().enumerate() {
        // separable: exp(-(dx² + dy²)·inv) = exp(-dx²·inv)·exp(-dy²·inv)
        let gx: Vec<f64> = (0..width).map(|c| (-(c as f64 - p.x).powi(2) * inv).exp()).collect();
        let gy: Vec<f64> = (0..height).map(|r| (-(r as f64 - p.y).powi(2) * inv).exp()).collect();
        let out = &mut data[k * plane..(k + 1) * plane];
        for (r, row) in out.chunks_exact_mut(width.max(1)).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (gy[r] * gx[c]) as f32;
            }
        }
    }
    HeatmapStack::new(NUM_LANDMARKS, height, width, data)
}

/// Channels that carried no location information during decoding.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodeReport {
    pub empty_channels: Vec<usize>,
}

fn argmax_plane(values: &[f32], width: usize) -> (Point2, bool) {
    let mut best = f32::NEG_INFINITY;
    let mut best_idx = 0;
    let mut first = f32::NAN;
    let mut uniform = true;
    for (i, &v) in values.iter().enumerate() {
        if i == 0 {
            first = v;
        } else if v != first {
            uniform = false;
        }
        // strict comparison keeps the smallest row, then smallest column
        if v > best {
            best = v;
            best_idx = i;
        }
    }
    let w = width.max(1);
    (Point2::new((best_idx % w) as f64, (best_idx / w) as f64), uniform)
}

/// Per-channel argmax. All-zero channels decode to `(0, 0)` and are listed in
/// the report.
pub fn decode_heatmaps(stack: &HeatmapStack) -> Result<(LandmarkSet, DecodeReport)> {
    if stack.channels != NUM_LANDMARKS {
        return Err(invalid_input(format!(
            "decoding needs {NUM_LANDMARKS} channels, got {}",
            stack.channels
        )));
    }
    let mut report = DecodeReport::default();
    let mut points = Vec::with_capacity(NUM_LANDMARKS);
    for k in 0..NUM_LANDMARKS {
        let ch = stack.channel(k);
        let (p, _) = argmax_plane(ch, stack.width);
        if ch.iter().all(|&v| v == 0.0) {
            report.empty_channels.push(k);
            points.push(Point2::new(0.0, 0.0));
        } else {
            points.push(p);
        }
    }
    Ok((LandmarkSet::new(points)?, report))
}

/// Argmax decoding of raw network scores (logits). Channels whose scores are
/// all equal are reported as empty.
pub fn decode_scores<T: Scalar>(scores: &Tensor<T>) -> Result<(LandmarkSet, DecodeReport)> {
    let (c, h, w) = scores.dims3()?;
    if c != NUM_LANDMARKS {
        return Err(invalid_input(format!(
            "decoding needs {NUM_LANDMARKS} channels, got {c}"
        )));
    }
    let plane = h * w;
    let mut report = DecodeReport::default();
    let mut points = Vec::with_capacity(NUM_LANDMARKS);
    for k in 0..c {
        let ch: Vec<f32> = scores.data()[k * plane..(k + 1) * plane]
            .iter()
            .map(|v| v.widen() as f32)
            .collect();
        let (p, uniform) = argmax_plane(&ch, w);
        if uniform {
            report.empty_channels.push(k);
        }
        points.push(p);
    }
    Ok((LandmarkSet::new(points)?, report))
}

/// `C × H × W` tensor of the image channels.
pub fn image_tensor<T: Scalar>(image: &Image) -> Tensor<T> {
    let (w, h) = (image.width(), image.height());
    let plane = w * h;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        T::cast(image.data()[p * 3 + c] as f64)
    })
}

/// Guided-network input: `[R, G, B, landmark_1, …, landmark_68]`.
pub fn stack_input<T: Scalar>(image: &Image, heatmaps: &HeatmapStack) -> Result<Tensor<T>> {
    if (image.height(), image.width()) != (heatmaps.height, heatmaps.width) {
        return Err(invalid_input(format!(
            "image {}x{} and heatmaps {}x{} differ in size",
            image.width(),
            image.height(),
            heatmaps.width,
            heatmaps.height
        )));
    }
    Tensor::concat_channels(&[&image_tensor(image), &heatmaps.to_tensor()])
}

const MAGIC: &[u8; 4] = b"HMST";

/// Debug dump: magic `HMST`, `u32` channels, height, width (little-endian),
/// then 32-bit float values channel by channel.
pub fn write_heatmaps<W: Write>(mut out: W, stack: &HeatmapStack) -> Result<()> {
    out.write_all(MAGIC)?;
    for d in [stack.channels, stack.height, stack.width] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in &stack.data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_heatmaps<R: Read>(mut input: R) -> Result<HeatmapStack> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(invalid_input("not a heatmap stack (bad magic)"));
    }
    let dim = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(4), dim(8), dim(12));
    let mut raw = vec![0u8; c * h * w * 4];
    input.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    HeatmapStack::new(c, h, w, data)
}

pub fn save_heatmaps(path: &Path, stack: &HeatmapStack) -> Result<()> {
    write_heatmaps(BufWriter::new(File::create(path)?), stack)
}

pub fn load_heatmaps(path: &Path) -> Result<HeatmapStack> {
    read_heatmaps(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn integer_landmarks(w: usize, h: usize, seed: usize) -> LandmarkSet {
        let pts = (0..68)
            .map(|k| {
                let v = k * 7919 + seed * 104729;
                Point2::new((v % w) as f64, ((v / w) % h) as f64)
            })
            .collect();
        LandmarkSet::new(pts).unwrap()
    }

    #[test]
    fn peak_on_pixel_centre_is_one() {
        let l = integer_landmarks(20, 16, 1);
        let s = encode_landmarks(&l, 20, 16, 2.0).unwrap();
        for k in 0..68 {
            let p = l.get(k);
            assert_eq!(s.channel(k)[p.y as usize * 20 + p.x as usize], 1.0);
            assert!(s.channel(k).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn channel_mass_matches_gaussian_integral() {
        let pts = vec![Point2::new(32.0, 32.0); 68];
        let l = LandmarkSet::new(pts).unwrap();
        let s = encode_landmarks(&l, 64, 64, 5.0).unwrap();
        let mass: f64 = s.channel(0).iter().map(|&v| v as f64).sum();
        let expected = 2.0 * std::f64::consts::PI * 25.0;
        assert!((mass - expected).abs() / expected < 0.02, "{mass}");
    }

    #[test]
    fn encoding_is_deterministic() {
        let l = integer_landmarks(12, 12, 2);
        assert_eq!(
            encode_landmarks(&l, 12, 12, 1.5).unwrap(),
            encode_landmarks(&l.clone(), 12, 12, 1.5).unwrap()
        );
    }

    #[test]
    fn out_of_bounds_landmark_keeps_tail() {
        let pts = vec![Point2::new(-2.0, 5.0); 68];
        let s = encode_landmarks(&LandmarkSet::new(pts).unwrap(), 10, 10, 2.0).unwrap();
        let max = s.channel(0).iter().cloned().fold(0.0f32, f32::max);
        assert!(max > 0.0 && max < 1.0);
    }

    #[test]
    fn invalid_sigma() {
        let l = integer_landmarks(8, 8, 0);
        assert!(encode_landmarks(&l, 8, 8, 0.0).is_err());
    }

    #[test]
    fn uniform_and_empty_channels_decode_to_origin() {
        let mut data = vec![0.0f32; 68 * 4 * 5];
        // channel 1 uniform, channel 2 single spike at row 3, col 2
        for v in &mut data[20..40] {
            *v = 0.25;
        }
        data[40 + 3 * 5 + 2] = 0.9;
        let s = HeatmapStack::new(68, 4, 5, data).unwrap();
        let (l, report) = decode_heatmaps(&s).unwrap();
        assert_eq!(l.get(0), Point2::new(0.0, 0.0));
        assert_eq!(l.get(1), Point2::new(0.0, 0.0));
        assert_eq!(l.get(2), Point2::new(2.0, 3.0));
        assert!(report.empty_channels.contains(&0));
        assert!(!report.empty_channels.contains(&1));
        assert!(!report.empty_channels.contains(&2));
    }

    #[test]
    fn wrong_channel_count_rejected() {
        assert!(decode_heatmaps(&HeatmapStack::zeros(3, 2, 2)).is_err());
    }

    #[test]
    fn stacking_orders_channels() {
        let img = Image::new(3, 2, (0..18).map(|v| v as f32 / 18.0).collect()).unwrap();
        let l = integer_landmarks(3, 2, 5);
        let hm = encode_landmarks(&l, 3, 2, 1.0).unwrap();
        let t: Tensor<f32> = stack_input(&img, &hm).unwrap();
        assert_eq!(t.shape(), &[71, 2, 3]);
        assert_eq!(t.slice_channels(0, 3).unwrap(), image_tensor(&img));
        assert_eq!(t.slice_channels(3, 71).unwrap(), hm.to_tensor());
        // red channel of pixel (1, 0)
        assert_eq!(t.data()[1], img.pixel(1, 0)[0]);

        let zero: Tensor<f32> = stack_input(&img, &HeatmapStack::zeros(68, 2, 3)).unwrap();
        assert!(zero.data()[18..].iter().all(|&v| v == 0.0));
        assert!(stack_input::<f32>(&img, &HeatmapStack::zeros(68, 3, 3)).is_err());
    }

    #[test]
    fn heatmap_file_round_trip() {
        let l = integer_landmarks(6, 5, 3);
        let s = encode_landmarks(&l, 6, 5, 1.2).unwrap();
        let mut buf = Vec::new();
        write_heatmaps(&mut buf, &s).unwrap();
        assert_eq!(buf.len(), 16 + 68 * 30 * 4);
        assert_eq!(read_heatmaps(buf.as_slice()).unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn round_trip_on_integer_positions(seed in 0usize..1000, sigma in 1.0f64..10.0) {
            let l = integer_landmarks(24, 20, seed);
            let (back, report) = decode_heatmaps(&encode_landmarks(&l, 24, 20, sigma).unwrap()).unwrap();
            prop_assert_eq!(back, l);
            prop_assert!(report.empty_channels.is_empty());
        }

        #[test]
        fn off_centre_error_is_bounded(xs in proptest::collection::vec((0.0f64..23.0, 0.0f64..19.0), 68), sigma in 1.0f64..10.0) {
            let l = LandmarkSet::new(xs.iter().map(|&(x, y)| Point2::new(x, y)).collect()).unwrap();
            let (back, _) = decode_heatmaps(&encode_landmarks(&l, 24, 20, sigma).unwrap()).unwrap();
            for (p, q) in l.points().iter().zip(back.points()) {
                // f32 rounding can flip near-ties by a few micro-pixels
                prop_assert!(p.distance(*q) <= 0.5 * 2f64.sqrt() + 1e-4);
            }
        }
    }
}
