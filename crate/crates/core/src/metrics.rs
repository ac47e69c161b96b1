//! Per-class intersection-over-union, interocular-normalised landmark error,
//! and the four-method comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{invalid_input, Result};
use crate::geometry::{markup, ClassId, LandmarkSet, SegMask};
use crate::NUM_CLASSES;

/// IoU per class; `None` where both masks lack the class.
#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    pub per_class: [Option<f64>; NUM_CLASSES],
    /// Mean over defined classes, `None` if no class is defined.
    pub mean: Option<f64>,
}

pub fn iou(pred: &SegMask, gt: &SegMask) -> Result<IoUReport> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(invalid_input(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut inter = [0usize; NUM_CLASSES];
    let mut union = [0usize; NUM_CLASSES];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    let per_class: [Option<f64>; NUM_CLASSES] =
        std::array::from_fn(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64));
    Ok(IoUReport {
        per_class,
        mean: mean_defined(per_class.iter().copied()),
    })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean point-to-point distance divided by the groundtruth outer-eye-corner
/// distance.
pub fn landmark_error(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<f64> {
    let interocular = gt.get(markup::RIGHT_EYE_OUTER).distance(gt.get(markup::LEFT_EYE_OUTER));
    if interocular.is_nan() || interocular <= 0.0 {
        return Err(invalid_input("groundtruth interocular distance is zero"));
    }
    let total: f64 = pred.points().iter().zip(gt.points()).map(|(p, g)| p.distance(*g)).sum();
    Ok(total / pred.points().len() as f64 / interocular)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkErrorReport {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

pub fn landmark_error_report(preds: &[LandmarkSet], gts: &[LandmarkSet]) -> Result<LandmarkErrorReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(invalid_input(
            "need equally many, and at least one, predictions and groundtruths",
        ));
    }
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| landmark_error(p, g))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(LandmarkErrorReport { per_image, mean })
}

/// The four segmentation routes being compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Unguided,
    ConnectedLandmarks,
    GuidedGt,
    GuidedDetected,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Unguided,
        Method::ConnectedLandmarks,
        Method::GuidedGt,
        Method::GuidedDetected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unguided => "unguided",
            Method::ConnectedLandmarks => "connected_landmarks",
            Method::GuidedGt => "guided_gt",
            Method::GuidedDetected => "guided_detected",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: Method,
    /// Mean over images where the class is defined.
    pub per_class: [Option<f64>; NUM_CLASSES],
    /// Mean of the defined per-class means.
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    per_image: BTreeMap<Method, Vec<IoUReport>>,
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

impl ComparisonTable {
    pub fn row(&self, method: Method) -> &ComparisonRow {
        self.rows
            .iter()
            .find(|r| r.method == method)
            .expect("every method has a row")
    }

    /// `method,class,mean_iou` rows followed by a `method,ALL,mean` row per method.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,class,mean_iou\n");
        for row in &self.rows {
            for (c, v) in row.per_class.iter().enumerate() {
                let class = ClassId::ALL[c].name();
                let _ = writeln!(s, "{},{class},{}", row.method.name(), fmt_value(*v));
            }
            let _ = writeln!(s, "{},ALL,{:.6}", row.method.name(), row.mean);
        }
        s
    }

    /// Wide table: one line per method, 8 class columns plus the mean.
    pub fn to_wide_csv(&self) -> String {
        let mut s = String::from("method");
        for c in ClassId::ALL {
            s.push(',');
            s.push_str(c.name());
        }
        s.push_str(",mean\n");
        for row in &self.rows {
            s.push_str(row.method.name());
            for v in row.per_class {
                s.push(',');
                s.push_str(&fmt_value(v));
            }
            let _ = writeln!(s, ",{:.6}", row.mean);
        }
        s
    }

    /// Raw per-image values: `method,image,class,iou`.
    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("method,image,class,iou\n");
        for (method, reports) in &self.per_image {
            for (i, r) in reports.iter().enumerate() {
                for (c, v) in r.per_class.iter().enumerate() {
                    let _ = writeln!(s, "{},{i},{},{}", method.name(), ClassId::ALL[c].name(), fmt_value(*v));
                }
            }
        }
        s
    }
}

/// Aggregates per-image IoU reports for all four methods.
pub fn compare_methods(results: &BTreeMap<Method, Vec<IoUReport>>) -> Result<ComparisonTable> {
    let mut rows = Vec::with_capacity(Method::ALL.len());
    for method in Method::ALL {
        let reports = results
            .get(&method)
            .ok_or_else(|| invalid_input(format!("missing results for method {}", method.name())))?;
        let per_class: [Option<f64>; NUM_CLASSES] =
            std::array::from_fn(|c| mean_defined(reports.iter().map(|r| r.per_class[c])));
        let mean = mean_defined(per_class.iter().copied()).unwrap_or(0.0);
        rows.push(ComparisonRow {
            method,
            per_class,
            mean,
        });
    }
    Ok(ComparisonTable {
        rows,
        per_image: results.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, labels: &[u8]) -> SegMask {
        SegMask::new(w, h, labels.to_vec()).unwrap()
    }

    #[test]
    fn identical_masks() {
        let m = mask(3, 1, &[0, 3, 3]);
        let r = iou(&m, &m).unwrap();
        assert_eq!(r.per_class[0], Some(1.0));
        assert_eq!(r.per_class[3], Some(1.0));
        assert_eq!(r.per_class[1], None);
        assert_eq!(r.mean, Some(1.0));
    }

    #[test]
    fn background_only_prediction() {
        let gt = mask(4, 1, &[0, 0, 1, 2]);
        let pred = mask(4, 1, &[0, 0, 0, 0]);
        let r = iou(&pred, &gt).unwrap();
        assert_eq!(r.per_class[0], Some(0.5));
        assert_eq!(r.per_class[1], Some(0.0));
        assert_eq!(r.per_class[2], Some(0.0));
        assert_eq!(r.per_class[5], None);
    }

    #[test]
    fn two_pixel_hand_count() {
        // [A, B] vs [A, A] with A = skin, B = eyes
        let r = iou(&mask(2, 1, &[1, 3]), &mask(2, 1, &[1, 1])).unwrap();
        assert_eq!(r.per_class[1], Some(0.5));
        assert_eq!(r.per_class[3], Some(0.0));
    }

    #[test]
    fn size_mismatch_rejected() {
        assert!(iou(&mask(2, 1, &[0, 0]), &mask(1, 2, &[0, 0])).is_err());
    }

    fn face(shift: f64, scale: f64) -> LandmarkSet {
        LandmarkSet::new(
            (0..68)
                .map(|k| Point2::new(scale * (k as f64 + shift), scale * ((k * 7 % 11) as f64)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn landmark_error_cases() {
        let gt = face(0.0, 1.0);
        assert_eq!(landmark_error(&gt, &gt).unwrap(), 0.0);
        let d = 0.75;
        let moved = face(d, 1.0);
        let interocular = gt.get(36).distance(gt.get(45));
        let e = landmark_error(&moved, &gt).unwrap();
        assert!((e - d / interocular).abs() < 1e-12);
        // exact scale invariance for power-of-two scales
        let e2 = landmark_error(&face(d, 4.0), &face(0.0, 4.0)).unwrap();
        assert_eq!(e, e2);
    }

    #[test]
    fn zero_interocular_rejected() {
        let gt = LandmarkSet::new(vec![Point2::new(1.0, 1.0); 68]).unwrap();
        assert!(landmark_error(&gt, &gt).is_err());
    }

    fn report(values: &[Option<f64>]) -> IoUReport {
        let per_class: [Option<f64>; 8] = std::array::from_fn(|c| values.get(c).copied().flatten());
        IoUReport {
            per_class,
            mean: mean_defined(per_class.iter().copied()),
        }
    }

    #[test]
    fn comparison_means_by_hand() {
        let a = report(&[Some(1.0), Some(0.5), None]);
        let b = report(&[Some(0.5), Some(0.0), Some(0.25)]);
        let mut results = BTreeMap::new();
        for m in Method::ALL {
            results.insert(m, vec![a.clone(), b.clone()]);
        }
        let t = compare_methods(&results).unwrap();
        let row = t.row(Method::GuidedGt);
        assert_eq!(row.per_class[0], Some(0.75));
        assert_eq!(row.per_class[1], Some(0.25));
        assert_eq!(row.per_class[2], Some(0.25));
        assert_eq!(row.per_class[3], None);
        assert!((row.mean - 1.25 / 3.0).abs() < 1e-12);
        // identical inputs give identical rows
        assert_eq!(t.row(Method::Unguided).per_class, row.per_class);
        // arity: 8 classes + ALL per method
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 1 + 4 * 9);
        assert!(csv.contains("guided_gt,ALL,0.416667"));
        let wide = t.to_wide_csv();
        assert_eq!(wide.lines().next().unwrap().split(',').count(), 1 + 8 + 1);
    }

    #[test]
    fn missing_method_rejected() {
        let mut results = BTreeMap::new();
        results.insert(Method::Unguided, vec![report(&[Some(1.0)])]);
        assert!(compare_methods(&results).is_err());
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in proptest::collection::vec(0u8..8, 36), b in proptest::collection::vec(0u8..8, 36)) {
            let (ma, mb) = (mask(6, 6, &a), mask(6, 6, &b));
            let (ab, ba) = (iou(&ma, &mb).unwrap(), iou(&mb, &ma).unwrap());
            prop_assert_eq!(&ab, &ba);
            for v in ab.per_class.iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
