//! Multi-view datasets: synthetic generation, noise protocols and on-disk
//! containers.

mod container;
mod noise;
mod synth;

pub use container::{
    load_checkpoint, load_dataset, load_predictions, save_checkpoint, save_dataset, save_predictions, Checkpoint,
    Predictions, CHECKPOINT_MAGIC, DATASET_MAGIC, FORMAT_VERSION, PREDICTIONS_MAGIC,
};
pub use noise::{inject_noise, NoiseSpec};
pub use synth::{synth_generate, SynthConfig};

use crate::error::{Error, Result};
use crate::geometry::{Keypoints2D, Shape3D};
use crate::triangulation::CalibratedCamera;

/// `N` instances observed in the same `K` views, `P` keypoints each.
/// Keypoints are pixels; shapes are in arbitrary length units.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    num_points: usize,
    num_views: usize,
    keypoints: Vec<Vec<Keypoints2D>>,
    gt_shapes: Option<Vec<Shape3D>>,
    cameras: Option<Vec<CalibratedCamera>>,
}

impl MultiViewDataset {
    pub fn new(
        num_points: usize,
        num_views: usize,
        keypoints: Vec<Vec<Keypoints2D>>,
        gt_shapes: Option<Vec<Shape3D>>,
        cameras: Option<Vec<CalibratedCamera>>,
    ) -> Result<Self> {
        for views in &keypoints {
            if views.len() != num_views {
                return Err(Error::shape("MultiViewDataset views", num_views, views.len()));
            }
            for w in views {
                if w.num_points() != num_points {
                    return Err(Error::shape("MultiViewDataset keypoints", num_points, w.num_points()));
                }
            }
        }
        if let Some(gt) = &gt_shapes {
            if gt.len() != keypoints.len() {
                return Err(Error::shape("MultiViewDataset gt", keypoints.len(), gt.len()));
            }
            if let Some(s) = gt.iter().find(|s| s.num_points() != num_points) {
                return Err(Error::shape("MultiViewDataset gt points", num_points, s.num_points()));
            }
        }
        if let Some(cams) = &cameras {
            if cams.len() != num_views {
                return Err(Error::shape("MultiViewDataset cameras", num_views, cams.len()));
            }
        }
        Ok(Self {
            num_points,
            num_views,
            keypoints,
            gt_shapes,
            cameras,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn num_views(&self) -> usize {
        self.num_views
    }

    /// All views of instance `n`.
    pub fn instance(&self, n: usize) -> &[Keypoints2D] {
        &self.keypoints[n]
    }

    pub fn keypoints(&self) -> &[Vec<Keypoints2D>] {
        &self.keypoints
    }

    pub fn gt_shapes(&self) -> Option<&[Shape3D]> {
        self.gt_shapes.as_deref()
    }

    pub fn cameras(&self) -> Option<&[CalibratedCamera]> {
        self.cameras.as_deref()
    }

    pub fn require_gt(&self) -> Result<&[Shape3D]> {
        self.gt_shapes()
            .ok_or_else(|| Error::InvalidInput("dataset carries no ground-truth shapes".into()))
    }

    pub fn require_cameras(&self) -> Result<&[CalibratedCamera]> {
        self.cameras()
            .ok_or_else(|| Error::InvalidInput("dataset carries no calibration".into()))
    }

    pub(crate) fn keypoints_mut(&mut self) -> &mut [Vec<Keypoints2D>] {
        &mut self.keypoints
    }

    pub(crate) fn cameras_mut(&mut self) -> Option<&mut [CalibratedCamera]> {
        self.cameras.as_deref_mut()
    }

    /// Instances `[0, at)` and `[at, N)`.
    pub fn split_at(&self, at: usize) -> Result<(Self, Self)> {
        if at > self.len() {
            return Err(Error::InvalidInput(format!("split index {at} exceeds {} instances", self.len())));
        }
        let part = |range: std::ops::Range<usize>| Self {
            num_points: self.num_points,
            num_views: self.num_views,
            keypoints: self.keypoints[range.clone()].to_vec(),
            gt_shapes: self.gt_shapes.as_ref().map(|g| g[range].to_vec()),
            cameras: self.cameras.clone(),
        };
        Ok((part(0..at), part(at..self.len())))
    }

    /// Keeps the listed views, in the given order.
    pub fn select_views(&self, views: &[usize]) -> Result<Self> {
        if let Some(&bad) = views.iter().find(|&&k| k >= self.num_views) {
            return Err(Error::InvalidInput(format!("view {bad} out of range (K = {})", self.num_views)));
        }
        Self::new(
            self.num_points,
            views.len(),
            self.keypoints
                .iter()
                .map(|inst| views.iter().map(|&k| inst[k].clone()).collect())
                .collect(),
            self.gt_shapes.clone(),
            self.cameras.as_ref().map(|c| views.iter().map(|&k| c[k]).collect()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_counts() {
        let kp = vec![vec![Keypoints2D::zeros(4), Keypoints2D::zeros(4)]];
        assert!(MultiViewDataset::new(4, 2, kp.clone(), None, None).is_ok());
        assert!(MultiViewDataset::new(5, 2, kp.clone(), None, None).is_err());
        assert!(MultiViewDataset::new(4, 3, kp.clone(), None, None).is_err());
        assert!(MultiViewDataset::new(4, 2, kp.clone(), Some(vec![]), None).is_err());
        assert!(MultiViewDataset::new(4, 2, kp, Some(vec![Shape3D::zeros(3)]), None).is_err());
    }

    #[test]
    fn split_and_select() {
        let ds = synth_generate(&SynthConfig {
            num_points: 6,
            num_views: 3,
            num_instances: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        let (a, b) = ds.split_at(7).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!(b.instance(0), ds.instance(7));
        let two = ds.select_views(&[2, 0]).unwrap();
        assert_eq!(two.num_views(), 2);
        assert_eq!(two.instance(4)[0], ds.instance(4)[2]);
        assert_eq!(two.cameras().unwrap()[1], ds.cameras().unwrap()[0]);
        assert!(ds.select_views(&[3]).is_err());
    }
}
