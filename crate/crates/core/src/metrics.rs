//! Procrustes-aligned reconstruction metrics.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Shape3D;

/// `pred` brought into the frame of `gt`.
#[derive(Debug, Clone)]
pub struct MetricAlignment {
    pub aligned: DMatrix<f64>,
    /// Per-point Euclidean distance to the centered ground truth.
    pub distances: Vec<f64>,
    pub reflection: bool,
}

/// Centers both shapes, rescales `pred` to the Frobenius norm of `gt` and
/// applies the best orthogonal transform (reflections allowed).
pub fn align_to_gt(pred: &Shape3D, gt: &Shape3D) -> Result<MetricAlignment> {
    if pred.num_points() != gt.num_points() {
        return Err(Error::shape("metric alignment", gt.num_points(), pred.num_points()));
    }
    if !pred.is_finite() || !gt.is_finite() {
        return Err(Error::InvalidInput("non-finite shape in metric".into()));
    }
    let (g, _) = gt.centered();
    let (p, _) = pred.centered();
    let g_norm = g.norm();
    if !(g_norm > 0.0) {
        return Err(Error::Degenerate("ground-truth points coincide".into()));
    }
    let p_norm = p.norm();
    let (aligned, reflection) = if p_norm > 0.0 {
        let p = p.matrix() * (g_norm / p_norm);
        let m: Matrix3<f64> = (p.transpose() * g.matrix()).fixed_view::<3, 3>(0, 0).into_owned();
        let svd = m.svd(true, true);
        let r = svd.u.expect("u requested") * svd.v_t.expect("v_t requested");
        let rotated = &p * r;
        let aligned = DMatrix::from_column_slice(p.nrows(), 3, rotated.as_slice());
        (aligned, r.determinant() < 0.0)
    } else {
        (p.matrix().clone(), false)
    };
    let distances = (0..aligned.nrows())
        .map(|i| (aligned.row(i) - g.matrix().row(i)).norm())
        .collect();
    Ok(MetricAlignment {
        aligned,
        distances,
        reflection,
    })
}

/// Mean per-point error after alignment.
pub fn pa_mpjpe(pred: &Shape3D, gt: &Shape3D) -> Result<f64> {
    let a = align_to_gt(pred, gt)?;
    Ok(mean(&a.distances))
}

/// Fraction of points within `threshold` of the ground truth after alignment.
pub fn pck(pred: &Shape3D, gt: &Shape3D, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidInput(format!("PCK threshold must be positive, got {threshold}")));
    }
    let a = align_to_gt(pred, gt)?;
    Ok(fraction_within(&a.distances, threshold))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn fraction_within(d: &[f64], threshold: f64) -> f64 {
    if d.is_empty() {
        return 0.0;
    }
    d.iter().filter(|&&x| x <= threshold).count() as f64 / d.len() as f64
}

/// Largest distance between two points of a shape.
pub fn shape_diameter(s: &Shape3D) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..s.num_points() {
        for j in i + 1..s.num_points() {
            best = best.max((s.row(i) - s.row(j)).norm());
        }
    }
    best
}

/// Mean diameter over a set of shapes.
pub fn mean_diameter(shapes: &[Shape3D]) -> f64 {
    mean(&shapes.iter().map(shape_diameter).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetric {
    pub index: usize,
    pub pa_mpjpe: f64,
    pub pck: f64,
    pub reflection: bool,
}

/// Dataset-level metrics with a per-instance breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pa_mpjpe: f64,
    pub pck: f64,
    pub pck_threshold: f64,
    pub reflections: usize,
    pub instances: Vec<InstanceMetric>,
}

impl MetricReport {
    /// Per-instance alignment of `preds` against `gts`.
    pub fn compute(preds: &[Shape3D], gts: &[Shape3D], pck_threshold: f64) -> Result<Self> {
        if preds.len() != gts.len() {
            return Err(Error::shape("MetricReport", gts.len(), preds.len()));
        }
        if !(pck_threshold > 0.0) {
            return Err(Error::InvalidInput(format!("PCK threshold must be positive, got {pck_threshold}")));
        }
        let mut instances = Vec::with_capacity(preds.len());
        for (index, (p, g)) in preds.iter().zip(gts).enumerate() {
            let a = align_to_gt(p, g)?;
            instances.push(InstanceMetric {
                index,
                pa_mpjpe: mean(&a.distances),
                pck: fraction_within(&a.distances, pck_threshold),
                reflection: a.reflection,
            });
        }
        Ok(Self {
            pa_mpjpe: mean(&instances.iter().map(|m| m.pa_mpjpe).collect::<Vec<_>>()),
            pck: mean(&instances.iter().map(|m| m.pck).collect::<Vec<_>>()),
            pck_threshold,
            reflections: instances.iter().filter(|m| m.reflection).count(),
            instances,
        })
    }

    /// Fixed-width summary table.
    pub fn summary(&self) -> String {
        format!(
            "{:<12} {:>14} {:>10} {:>12}\n{:<12} {:>14.6} {:>10.4} {:>12}\n",
            "instances",
            "PA-MPJPE",
            "PCK",
            "reflections",
            self.instances.len(),
            self.pa_mpjpe,
            self.pck,
            self.reflections
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_rotation;
    use nalgebra::{RowVector3, Vector3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_shape(rng: &mut ChaCha8Rng, p: usize) -> Shape3D {
        Shape3D::new(DMatrix::from_fn(p, 3, |_, _| rng.sample(StandardNormal))).unwrap()
    }

    fn similarity(s: &Shape3D, r: &Matrix3<f64>, c: f64, t: Vector3<f64>) -> Shape3D {
        let rotated = s.matrix() * r * c;
        let mut m = DMatrix::from_column_slice(rotated.nrows(), 3, rotated.as_slice());
        for i in 0..m.nrows() {
            for j in 0..3 {
                m[(i, j)] += t[j];
            }
        }
        Shape3D::new(m).unwrap()
    }

    #[test]
    fn identical_shapes_score_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_shape(&mut rng, 12);
        assert!(pa_mpjpe(&s, &s).unwrap() < 1e-12);
        assert_eq!(pck(&s, &s, 1e-6).unwrap(), 1.0);
    }

    #[test]
    fn similarity_transforms_are_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = random_shape(&mut rng, 10);
            let mut r = random_rotation(&mut rng);
            let reflect = rng.random_bool(0.5);
            if reflect {
                r.column_mut(0).neg_mut();
            }
            let pred = similarity(&s, &r, rng.random_range(0.1..10.0), Vector3::new(3.0, -1.0, 7.0));
            let a = align_to_gt(&pred, &s).unwrap();
            assert!(mean(&a.distances) < 1e-9);
            assert_eq!(a.reflection, reflect);
        }
    }

    #[test]
    fn single_point_offset_matches_direct_formula() {
        let p = 10;
        let mut gt = DMatrix::zeros(p, 3);
        for i in 0..p {
            let a = i as f64 * std::f64::consts::TAU / p as f64;
            gt.set_row(i, &RowVector3::new(a.cos(), a.sin(), 0.0));
        }
        let gt = Shape3D::new(gt).unwrap();
        // Oracle: center, rescale and align by hand with a plain SVD.
        let mut pred = gt.matrix().clone();
        pred[(0, 2)] += 1.0;
        let pred = Shape3D::new(pred).unwrap();
        let (pc, _) = pred.centered();
        let (gc, _) = gt.centered();
        let scaled = pc.matrix() * (gc.norm() / pc.norm());
        let m = scaled.transpose() * gc.matrix();
        let svd = m.svd(true, true);
        let r = svd.u.unwrap() * svd.v_t.unwrap();
        let direct = scaled * r - gc.matrix();
        let expected: f64 = (0..p).map(|i| direct.row(i).norm()).sum::<f64>() / p as f64;
        assert!((pa_mpjpe(&pred, &gt).unwrap() - expected).abs() < 1e-12);
        assert!(expected > 0.0);
    }

    #[test]
    fn pck_examples() {
        let mut gt = DMatrix::zeros(4, 3);
        gt.set_row(0, &RowVector3::new(1.0, 0.0, 0.0));
        gt.set_row(1, &RowVector3::new(-1.0, 0.0, 0.0));
        gt.set_row(2, &RowVector3::new(0.0, 1.0, 0.0));
        gt.set_row(3, &RowVector3::new(0.0, -1.0, 0.0));
        let gt = Shape3D::new(gt).unwrap();
        assert_eq!(pck(&gt, &gt, 0.1).unwrap(), 1.0);

        let d = MetricAlignment {
            aligned: DMatrix::zeros(4, 3),
            distances: vec![0.2; 4],
            reflection: false,
        };
        assert_eq!(fraction_within(&d.distances, 0.1), 0.0);
        assert_eq!(fraction_within(&[0.05, 0.05, 0.3, 0.3], 0.1), 0.5);
    }

    #[test]
    fn half_in_half_out_instance() {
        // Stretching along x keeps the centroid and the optimal rotation at
        // identity; only the Frobenius rescaling acts.
        let p = 4;
        let mut gt = DMatrix::zeros(p, 3);
        gt.set_row(0, &RowVector3::new(1.0, 0.0, 0.0));
        gt.set_row(1, &RowVector3::new(-1.0, 0.0, 0.0));
        gt.set_row(2, &RowVector3::new(0.0, 1.0, 0.0));
        gt.set_row(3, &RowVector3::new(0.0, -1.0, 0.0));
        let gt_s = Shape3D::new(gt.clone()).unwrap();
        let mut pred = gt.clone();
        pred[(0, 0)] = 3.0;
        pred[(1, 0)] = -3.0;
        let pred = Shape3D::new(pred).unwrap();
        let a = align_to_gt(&pred, &gt_s).unwrap();
        let c = 2.0 / 20.0f64.sqrt();
        let expected = [3.0 * c - 1.0, 3.0 * c - 1.0, 1.0 - c, 1.0 - c];
        for (d, e) in a.distances.iter().zip(expected) {
            assert!((d - e.abs()).abs() < 1e-12);
        }
        let threshold = 0.5 * (expected[0].abs() + expected[2].abs());
        assert!((expected[0].abs() - expected[2].abs()).abs() > 0.1);
        assert_eq!(pck(&pred, &gt_s, threshold).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_gt_is_rejected() {
        let gt = Shape3D::new(DMatrix::from_element(5, 3, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = random_shape(&mut rng, 5);
        assert!(matches!(pa_mpjpe(&pred, &gt), Err(Error::Degenerate(_))));
        assert!(pck(&pred, &pred, 0.0).is_err());
    }

    #[test]
    fn report_aggregates_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gts: Vec<_> = (0..5).map(|_| random_shape(&mut rng, 8)).collect();
        let preds: Vec<_> = gts.iter().map(|g| Shape3D::new(g.matrix() + DMatrix::from_fn(8, 3, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal))).unwrap()).collect();
        let rep = MetricReport::compute(&preds, &gts, 0.15).unwrap();
        let mean_direct: f64 = preds.iter().zip(&gts).map(|(p, g)| pa_mpjpe(p, g).unwrap()).sum::<f64>() / 5.0;
        assert!((rep.pa_mpjpe - mean_direct).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&rep.pck));
        assert_eq!(rep.instances.len(), 5);
        assert!(rep.summary().contains("PA-MPJPE"));
    }

    #[test]
    fn diameter_of_unit_square() {
        let mut s = DMatrix::zeros(4, 3);
        s.set_row(1, &RowVector3::new(1.0, 0.0, 0.0));
        s.set_row(2, &RowVector3::new(0.0, 1.0, 0.0));
        s.set_row(3, &RowVector3::new(1.0, 1.0, 0.0));
        assert!((shape_diameter(&Shape3D::new(s).unwrap()) - 2.0f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn metrics_are_similarity_invariant(seed in any::<u64>(), c in 0.05f64..20.0, reflect in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_shape(&mut rng, 9);
            let pred = Shape3D::new(gt.matrix() + DMatrix::from_fn(9, 3, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal))).unwrap();
            let mut r = random_rotation(&mut rng);
            if reflect {
                r.column_mut(1).neg_mut();
            }
            let moved = similarity(&pred, &r, c, Vector3::new(rng.random_range(-5.0..5.0), 1.0, -2.0));
            let a = pa_mpjpe(&pred, &gt).unwrap();
            let b = pa_mpjpe(&moved, &gt).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
            prop_assert_eq!(pck(&pred, &gt, 0.4).unwrap(), pck(&moved, &gt, 0.4).unwrap());
        }

        #[test]
        fn pck_is_monotone_in_threshold(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_shape(&mut rng, 10);
            let pred = random_shape(&mut rng, 10);
            let mut prev = 0.0;
            for i in 1..40 {
                let v = pck(&pred, &gt, i as f64 * 0.1).unwrap();
                prop_assert!(v >= prev);
                prop_assert!((0.0..=1.0).contains(&v));
                prev = v;
            }
        }
    }
}
