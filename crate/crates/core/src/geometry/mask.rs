use super::markup::*;
use super::raster::fill_spans;
use super::spline::eyebrow_stroke;
use super::{ClassId, LandmarkSet, Point2, SegMask};

/// Eyebrow stroke width as a fraction of the face height (14 px at 350 px).
pub const DEFAULT_EYEBROW_WIDTH_FRAC: f64 = 0.04;

fn pick(l: &LandmarkSet, idx: impl IntoIterator<Item = usize>) -> Vec<Point2> {
    idx.into_iter().map(|i| l.get(i)).collect()
}

/// Face outline: the jaw closed over the top of both brows.
fn skin_outline(l: &LandmarkSet) -> Vec<Point2> {
    pick(l, JAW.chain(LEFT_BROW.rev()).chain(RIGHT_BROW.rev()))
}

fn nose_outline(l: &LandmarkSet) -> Vec<Point2> {
    pick(l, std::iter::once(NOSE_BRIDGE.start).chain(NOSTRILS))
}

fn upper_lip_outline(l: &LandmarkSet) -> Vec<Point2> {
    // outer 49..55 left to right, back along inner 65..61
    pick(l, (48..=54).chain((60..=64).rev()))
}

fn lower_lip_outline(l: &LandmarkSet) -> Vec<Point2> {
    // outer 55..60,49 right to left, back along inner 61,68..65
    pick(l, (54..=59).chain([48, 60]).chain((64..=67).rev()))
}

/// Paints the part mask implied by a 68-point annotation.
///
/// Layers are painted back to front (skin, brows, eyes, nose, upper lip,
/// inner mouth, lower lip) so later parts overwrite earlier ones. The brow
/// stroke width is `eyebrow_width_frac` times the landmark bounding-box height.
pub fn landmarks_to_mask(landmarks: &LandmarkSet, width: usize, height: usize, eyebrow_width_frac: f64) -> SegMask {
    let mut mask = SegMask::filled(width, height, ClassId::Background);
    let brow_width = eyebrow_width_frac * landmarks.face_height();
    let layers: [(Vec<Point2>, ClassId); 9] = [
        (skin_outline(landmarks), ClassId::Skin),
        (
            eyebrow_stroke(&pick(landmarks, RIGHT_BROW), brow_width),
            ClassId::Eyebrows,
        ),
        (
            eyebrow_stroke(&pick(landmarks, LEFT_BROW), brow_width),
            ClassId::Eyebrows,
        ),
        (pick(landmarks, RIGHT_EYE), ClassId::Eyes),
        (pick(landmarks, LEFT_EYE), ClassId::Eyes),
        (nose_outline(landmarks), ClassId::Nose),
        (upper_lip_outline(landmarks), ClassId::UpperLip),
        (pick(landmarks, INNER_LIPS), ClassId::InnerMouth),
        (lower_lip_outline(landmarks), ClassId::LowerLip),
    ];
    for (outline, class) in &layers {
        fill_spans(outline, width, height, |row, lo, hi| {
            for x in lo..hi {
                mask.set(x, row, *class);
            }
        });
    }
    mask
}

/// Outlines in paint order, exposed for tests that check the mask against an
/// independent point-in-polygon evaluation.
#[cfg(test)]
pub(crate) fn paint_layers(l: &LandmarkSet, eyebrow_width_frac: f64) -> Vec<(Vec<Point2>, ClassId)> {
    let w = eyebrow_width_frac * l.face_height();
    vec![
        (skin_outline(l), ClassId::Skin),
        (eyebrow_stroke(&pick(l, RIGHT_BROW), w), ClassId::Eyebrows),
        (eyebrow_stroke(&pick(l, LEFT_BROW), w), ClassId::Eyebrows),
        (pick(l, RIGHT_EYE), ClassId::Eyes),
        (pick(l, LEFT_EYE), ClassId::Eyes),
        (nose_outline(l), ClassId::Nose),
        (upper_lip_outline(l), ClassId::UpperLip),
        (pick(l, INNER_LIPS), ClassId::InnerMouth),
        (lower_lip_outline(l), ClassId::LowerLip),
    ]
}
