//! 300-W `.pts` landmark files and PNG images and masks.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::{ClassId, Image, LandmarkSet, Point2, SegMask};
use crate::error::{Error, Result};
use crate::NUM_LANDMARKS;

fn parse_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses the text of a 300-W `.pts` file. `path` is only used in errors.
pub fn parse_pts(text: &str, path: &Path) -> Result<LandmarkSet> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut n_points = None;
    for line in lines.by_ref() {
        if line == "{" {
            break;
        }
        if let Some((key, value)) = line.split_once(':') {
            if key.trim() == "n_points" {
                n_points = Some(
                    value
                        .trim()
                        .parse::<usize>()
                        .map_err(|e| parse_error(path, format!("bad n_points: {e}")))?,
                );
            }
        }
    }
    match n_points {
        Some(NUM_LANDMARKS) => {}
        Some(n) => {
            return Err(parse_error(
                path,
                format!("expected n_points: {NUM_LANDMARKS}, found {n}"),
            ))
        }
        None => return Err(parse_error(path, "missing n_points header")),
    }
    let mut points = Vec::with_capacity(NUM_LANDMARKS);
    let mut closed = false;
    for line in lines {
        if line == "}" {
            closed = true;
            break;
        }
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) => points.push(Point2::new(x, y)),
            _ => return Err(parse_error(path, format!("bad point line {line:?}"))),
        }
    }
    if !closed {
        return Err(parse_error(path, "missing closing brace"));
    }
    LandmarkSet::new(points).map_err(|e| parse_error(path, e.to_string()))
}

pub fn read_pts(path: &Path) -> Result<LandmarkSet> {
    parse_pts(&fs::read_to_string(path)?, path)
}

pub fn write_pts(path: &Path, landmarks: &LandmarkSet) -> Result<()> {
    let mut text = format!("version: 1\nn_points: {NUM_LANDMARKS}\n{{\n");
    for p in landmarks.points() {
        text.push_str(&format!("{} {}\n", p.x, p.y));
    }
    text.push_str("}\n");
    fs::write(path, text)?;
    Ok(())
}

/// Writes raw label values 0–7 as an 8-bit single-channel PNG.
pub fn write_mask_png(path: &Path, mask: &SegMask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([mask.get(x as usize, y as usize) as u8])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<SegMask> {
    let img = image::open(path)?.into_luma8();
    let labels = img.pixels().map(|p| p.0[0]).collect::<Vec<_>>();
    if let Some(&bad) = labels.iter().find(|&&l| ClassId::from_u8(l).is_none()) {
        return Err(parse_error(path, format!("label {bad} out of range")));
    }
    SegMask::new(img.width() as usize, img.height() as usize, labels)
}

pub fn write_image_png(path: &Path, image: &Image) -> Result<()> {
    let img = RgbImage::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let p = image.pixel(x as usize, y as usize);
        Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path)?;
    Ok(())
}

pub fn read_image_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.into_rgb8();
    let data = img.pixels().flat_map(|p| p.0).map(|v| v as f32 / 255.0).collect();
    Image::new(img.width() as usize, img.height() as usize, data)
}
