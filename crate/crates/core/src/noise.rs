//! Landmark displacement model fitted from detector errors.
//!
//! Guided segmentation must not be trained on perfect landmarks, so the
//! detector's validation-set errors are summarised as independent 2-d
//! Gaussians per landmark (or optionally one joint 136-d Gaussian) and
//! groundtruth landmarks are perturbed with draws from it.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid_input, Error, Result};
use crate::geometry::{LandmarkSet, Point2};
use crate::NUM_LANDMARKS;

/// Minimum number of pairs per dimension for the joint-covariance variant.
pub const JOINT_SAMPLES_PER_DIM: usize = 10;

/// Per-landmark displacement Gaussians plus the face height they were
/// measured at.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    face_size: f64,
    means: Vec<Vector2<f64>>,
    covariances: Vec<Matrix2<f64>>,
    factors: Vec<Matrix2<f64>>,
    joint: Option<JointNoise>,
}

#[derive(Clone, Debug, PartialEq)]
struct JointNoise {
    covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
}

/// `V·diag(√max(λ, 0))` for a symmetric matrix: a square-root factor with
/// negative eigenvalues clipped to zero.
fn psd_factor2(cov: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = cov.symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    eig.eigenvectors * Matrix2::from_diagonal(&sqrt)
}

fn psd_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = cov.clone().symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

impl NoiseModel {
    pub fn new(face_size: f64, means: Vec<Vector2<f64>>, covariances: Vec<Matrix2<f64>>) -> Result<Self> {
        if !(face_size > 0.0 && face_size.is_finite()) {
            return Err(invalid_input(format!("face size {face_size} must be positive")));
        }
        if means.len() != NUM_LANDMARKS || covariances.len() != NUM_LANDMARKS {
            return Err(invalid_input("noise model needs one mean and covariance per landmark"));
        }
        if means.iter().any(|m| !m.iter().all(|v| v.is_finite())) {
            return Err(invalid_input("noise model means must be finite"));
        }
        let covariances: Vec<Matrix2<f64>> = covariances
            .into_iter()
            .map(|c| {
                let off = 0.5 * (c[(0, 1)] + c[(1, 0)]);
                Matrix2::new(c[(0, 0)], off, off, c[(1, 1)])
            })
            .collect();
        let factors = covariances.iter().map(psd_factor2).collect();
        Ok(Self {
            face_size,
            means,
            covariances,
            factors,
            joint: None,
        })
    }

    /// A model that never moves a landmark.
    pub fn zero(face_size: f64) -> Self {
        Self::new(
            face_size,
            vec![Vector2::zeros(); NUM_LANDMARKS],
            vec![Matrix2::zeros(); NUM_LANDMARKS],
        )
        .expect("valid zero model")
    }

    pub fn face_size(&self) -> f64 {
        self.face_size
    }

    pub fn mean(&self, k: usize) -> Vector2<f64> {
        self.means[k]
    }

    pub fn covariance(&self, k: usize) -> Matrix2<f64> {
        self.covariances[k]
    }

    pub fn is_joint(&self) -> bool {
        self.joint.is_some()
    }

    /// Serialises as one `k dx dy sxx sxy syy` line per landmark after a
    /// `face_size` header. The joint covariance, if any, is not stored.
    pub fn to_text(&self) -> String {
        let mut s = format!("face_size {}\n", self.face_size);
        for (k, (m, c)) in self.means.iter().zip(&self.covariances).enumerate() {
            s.push_str(&format!(
                "{k} {} {} {} {} {}\n",
                m.x,
                m.y,
                c[(0, 0)],
                c[(0, 1)],
                c[(1, 1)]
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |reason: String| Error::Parse {
            path: "<noise model>".into(),
            reason,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| err("empty file".into()))?;
        let face_size = match header.split_whitespace().collect::<Vec<_>>()[..] {
            ["face_size", v] => v.parse::<f64>().map_err(|e| err(e.to_string()))?,
            _ => return Err(err(format!("bad header {header:?}"))),
        };
        let mut means = vec![Vector2::zeros(); NUM_LANDMARKS];
        let mut covs = vec![Matrix2::zeros(); NUM_LANDMARKS];
        let mut seen = [false; NUM_LANDMARKS];
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(err(format!("bad line {line:?}")));
            }
            let k: usize = f[0].parse().map_err(|_| err(format!("bad index in {line:?}")))?;
            if k >= NUM_LANDMARKS {
                return Err(err(format!("landmark index {k} out of range")));
            }
            let v = f[1..]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(e.to_string()))?;
            means[k] = Vector2::new(v[0], v[1]);
            covs[k] = Matrix2::new(v[2], v[3], v[3], v[4]);
            seen[k] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(err(format!("landmark {k} missing")));
        }
        Self::new(face_size, means, covs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?).map_err(|e| match e {
            Error::Parse { reason, .. } => Error::Parse {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

fn displacements(predicted: &[LandmarkSet], groundtruth: &[LandmarkSet]) -> Result<Vec<Vec<Vector2<f64>>>> {
    if predicted.is_empty() {
        return Err(invalid_input("noise fitting needs at least one pair"));
    }
    if predicted.len() != groundtruth.len() {
        return Err(invalid_input(format!(
            "{} predictions but {} groundtruth sets",
            predicted.len(),
            groundtruth.len()
        )));
    }
    Ok(predicted
        .iter()
        .zip(groundtruth)
        .map(|(p, g)| {
            p.points()
                .iter()
                .zip(g.points())
                .map(|(a, b)| Vector2::new(a.x - b.x, a.y - b.y))
                .collect()
        })
        .collect())
}

fn mean_face_size(groundtruth: &[LandmarkSet]) -> f64 {
    groundtruth.iter().map(LandmarkSet::face_height).sum::<f64>() / groundtruth.len() as f64
}

/// Per-landmark mean and unbiased covariance of `predicted − groundtruth`.
/// A single pair gives zero covariance.
pub fn fit_noise_model(predicted: &[LandmarkSet], groundtruth: &[LandmarkSet]) -> Result<NoiseModel> {
    let d = displacements(predicted, groundtruth)?;
    let n = d.len() as f64;
    let mut means = Vec::with_capacity(NUM_LANDMARKS);
    let mut covs = Vec::with_capacity(NUM_LANDMARKS);
    for k in 0..NUM_LANDMARKS {
        let mean = d.iter().map(|s| s[k]).sum::<Vector2<f64>>() / n;
        let cov = if d.len() > 1 {
            d.iter()
                .map(|s| {
                    let c = s[k] - mean;
                    c * c.transpose()
                })
                .sum::<Matrix2<f64>>()
                / (n - 1.0)
        } else {
            Matrix2::zeros()
        };
        means.push(mean);
        covs.push(cov);
    }
    NoiseModel::new(mean_face_size(groundtruth), means, covs)
}

/// Like [`fit_noise_model`] but also estimates the full 136×136 covariance
/// across all landmark coordinates. Needs at least
/// `JOINT_SAMPLES_PER_DIM × 136` pairs.
pub fn fit_joint_noise_model(predicted: &[LandmarkSet], groundtruth: &[LandmarkSet]) -> Result<NoiseModel> {
    let dim = 2 * NUM_LANDMARKS;
    if predicted.len() < JOINT_SAMPLES_PER_DIM * dim {
        return Err(invalid_input(format!(
            "joint covariance needs at least {} pairs, got {}",
            JOINT_SAMPLES_PER_DIM * dim,
            predicted.len()
        )));
    }
    let mut model = fit_noise_model(predicted, groundtruth)?;
    let d = displacements(predicted, groundtruth)?;
    let n = d.len();
    let flat = |s: &Vec<Vector2<f64>>| DVector::from_iterator(dim, s.iter().flat_map(|v| [v.x, v.y]));
    let mean = d.iter().map(flat).fold(DVector::zeros(dim), |a, b| a + b) / n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in &d {
        let c = flat(s) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    let factor = psd_factor(&cov);
    model.joint = Some(JointNoise {
        covariance: cov,
        factor,
    });
    Ok(model)
}

/// Adds a draw from the model to every landmark, scaled by
/// `face height / model face size`.
pub fn perturb<R: Rng + ?Sized>(landmarks: &LandmarkSet, model: &NoiseModel, rng: &mut R) -> Result<LandmarkSet> {
    let scale = landmarks.face_height() / model.face_size;
    let offsets: Vec<Vector2<f64>> = match &model.joint {
        Some(joint) => {
            let dim = 2 * NUM_LANDMARKS;
            let z = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let d = &joint.factor * z;
            (0..NUM_LANDMARKS)
                .map(|k| model.means[k] + Vector2::new(d[2 * k], d[2 * k + 1]))
                .collect()
        }
        None => (0..NUM_LANDMARKS)
            .map(|k| {
                let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                model.means[k] + model.factors[k] * z
            })
            .collect(),
    };
    landmarks.map_indexed(|k, p| Point2::new(p.x + scale * offsets[k].x, p.y + scale * offsets[k].y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn base() -> LandmarkSet {
        LandmarkSet::new((0..68).map(|k| Point2::new(k as f64, (k * 3 % 50) as f64)).collect()).unwrap()
    }

    fn shifted(l: &LandmarkSet, dx: f64, dy: f64) -> LandmarkSet {
        l.map(|p| Point2::new(p.x + dx, p.y + dy)).unwrap()
    }

    #[test]
    fn identical_sets_give_zero_model() {
        let l = vec![base(), shifted(&base(), 1.0, 2.0)];
        let m = fit_noise_model(&l, &l).unwrap();
        for k in 0..68 {
            assert_eq!(m.mean(k), Vector2::zeros());
            assert_eq!(m.covariance(k), Matrix2::zeros());
        }
    }

    #[test]
    fn single_pair_has_zero_covariance() {
        let m = fit_noise_model(&[shifted(&base(), 3.0, 3.0)], &[base()]).unwrap();
        assert_eq!(m.mean(10), Vector2::new(3.0, 3.0));
        assert_eq!(m.covariance(10), Matrix2::zeros());
        assert_eq!(m.face_size(), base().face_height());
    }

    #[test]
    fn empty_or_mismatched_input_rejected() {
        assert!(fit_noise_model(&[], &[]).is_err());
        assert!(fit_noise_model(&[base()], &[base(), base()]).is_err());
    }

    #[test]
    fn zero_model_is_identity() {
        let l = base();
        let out = perturb(&l, &NoiseModel::zero(10.0), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(out, l);
    }

    #[test]
    fn perturbation_is_deterministic() {
        let m = fit_noise_model(
            &[
                shifted(&base(), 1.0, 0.0),
                shifted(&base(), -1.0, 2.0),
                shifted(&base(), 0.5, 0.5),
            ],
            &[base(), base(), base()],
        )
        .unwrap();
        let a = perturb(&base(), &m, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = perturb(&base(), &m, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, base());
    }

    #[test]
    fn doubling_face_height_doubles_displacement() {
        let mut means = vec![Vector2::new(1.0, -0.5); 68];
        means[3] = Vector2::new(0.0, 2.0);
        let m = NoiseModel::new(49.0, means, vec![Matrix2::new(2.0, 0.3, 0.3, 1.0); 68]).unwrap();
        let small = base();
        let big = small.map(|p| Point2::new(2.0 * p.x, 2.0 * p.y)).unwrap();
        let a = perturb(&small, &m, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = perturb(&big, &m, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for k in 0..68 {
            let da = (a.get(k).x - small.get(k).x, a.get(k).y - small.get(k).y);
            let db = (b.get(k).x - big.get(k).x, b.get(k).y - big.get(k).y);
            assert!((db.0 - 2.0 * da.0).abs() < 1e-9 && (db.1 - 2.0 * da.1).abs() < 1e-9);
        }
    }

    #[test]
    fn non_psd_covariance_is_clipped() {
        let m = NoiseModel::new(
            10.0,
            vec![Vector2::zeros(); 68],
            vec![Matrix2::new(1.0, 2.0, 2.0, 1.0); 68],
        )
        .unwrap();
        let out = perturb(&base(), &m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(out.points().iter().all(|p| p.is_finite()));
        // the clipped factor reproduces only the positive eigen-direction
        let f = psd_factor2(&Matrix2::new(1.0, 2.0, 2.0, 1.0));
        let recon = f * f.transpose();
        assert!((recon - Matrix2::new(1.5, 1.5, 1.5, 1.5)).norm() < 1e-12);
    }

    #[test]
    fn text_round_trip() {
        let m = fit_noise_model(
            &[shifted(&base(), 1.25, 0.0), shifted(&base(), -1.0, 2.5)],
            &[base(), base()],
        )
        .unwrap();
        let back = NoiseModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(NoiseModel::from_text("face_size 3\n0 1 2 3 4 5\n").is_err());
    }

    #[test]
    fn joint_variant_needs_enough_samples() {
        let l = vec![base(); 20];
        assert!(fit_joint_noise_model(&l, &l).is_err());
    }

    #[test]
    fn joint_variant_recovers_correlation() {
        // landmark 0's x displacement equals landmark 1's y displacement
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = JOINT_SAMPLES_PER_DIM * 136;
        let gt = vec![base(); n];
        let pred: Vec<LandmarkSet> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..136).map(|_| rng.sample(StandardNormal)).collect();
                base()
                    .map_indexed(|k, p| {
                        let dx = z[2 * k];
                        let dy = if k == 1 { z[0] } else { z[2 * k + 1] };
                        Point2::new(p.x + dx, p.y + dy)
                    })
                    .unwrap()
            })
            .collect();
        let m = fit_joint_noise_model(&pred, &gt).unwrap();
        assert!(m.is_joint());
        let cov = &m.joint.as_ref().unwrap().covariance;
        assert!((cov[(0, 3)] - 1.0).abs() < 0.15, "{}", cov[(0, 3)]);
        assert!(cov[(0, 5)].abs() < 0.15);
        let out = perturb(&base(), &m, &mut rng).unwrap();
        assert!(out.points().iter().all(|p| p.is_finite()));
    }
}
