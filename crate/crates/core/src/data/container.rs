//! Directory container: `manifest.json` plus one little-endian `f64` blob per
//! array, row-major.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::MultiViewDataset;
use crate::diffengine::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::geometry::{Keypoints2D, Shape3D};
use crate::neural_prior::{DictionaryStack, Reconstruction};
use crate::triangulation::CalibratedCamera;

pub const DATASET_MAGIC: &str = "mvprior-dataset";
pub const CHECKPOINT_MAGIC: &str = "mvprior-checkpoint";
pub const PREDICTIONS_MAGIC: &str = "mvprior-predictions";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64-little-endian";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    version: u32,
    dtype: String,
    #[serde(flatten)]
    meta: Map<String, Value>,
    arrays: Vec<ArrayEntry>,
}

struct Array {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.to_string(),
            shape,
            data,
        }
    }
}

struct Container {
    meta: Map<String, Value>,
    arrays: Vec<Array>,
}

impl Container {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let idx = self
            .arrays
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::format(name, "array missing from manifest"))?;
        let a = self.arrays.swap_remove(idx);
        if a.shape != shape {
            return Err(Error::format(name, format!("shape {:?} does not match declared counts {:?}", a.shape, shape)));
        }
        Ok(a.data)
    }

    fn has(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::format(key, "missing or not a nonnegative integer"))
    }

    fn field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::format(key, "missing"))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::format(key, e.to_string()))
    }
}

fn write_container(dir: &Path, magic: &str, c: &Container) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(c.arrays.len());
    for a in &c.arrays {
        let file = format!("{}.bin", a.name);
        let mut bytes = Vec::with_capacity(8 * a.data.len());
        for v in &a.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ArrayEntry {
            name: a.name.clone(),
            file,
            shape: a.shape.clone(),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        magic: magic.to_string(),
        version: FORMAT_VERSION,
        dtype: DTYPE.to_string(),
        meta: c.meta.clone(),
        arrays: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_container(dir: &Path, magic: &str, kind: &'static str) -> Result<Container> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    let found_magic = raw.get("magic").and_then(Value::as_str).unwrap_or_default();
    if found_magic != magic {
        return Err(Error::format("magic", format!("expected {magic:?}, found {found_magic:?}")));
    }
    let version = raw
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::format("version", "missing or not an integer"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            kind,
            found: version.min(u32::MAX as u64) as u32,
            supported: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::format("manifest", e.to_string()))?;
    if manifest.dtype != DTYPE {
        return Err(Error::format("dtype", format!("expected {DTYPE:?}, found {:?}", manifest.dtype)));
    }
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        if entry.file.contains('/') || entry.file.contains('\\') || entry.file.starts_with('.') {
            return Err(Error::format(&entry.name, "blob file must be a plain name inside the container"));
        }
        let count: usize = entry.shape.iter().product();
        if entry.bytes != 8 * count as u64 {
            return Err(Error::format(
                &entry.name,
                format!("declared {} bytes but shape {:?} needs {}", entry.bytes, entry.shape, 8 * count),
            ));
        }
        let blob_path = dir.join(&entry.file);
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if bytes.len() as u64 != entry.bytes {
            return Err(Error::format(
                &entry.name,
                format!("blob holds {} bytes, manifest declares {}", bytes.len(), entry.bytes),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push(Array::new(&entry.name, entry.shape.clone(), data));
    }
    Ok(Container {
        meta: manifest.meta,
        arrays,
    })
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

fn meta(pairs: &[(&str, Value)]) -> Map<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Writes a dataset container into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &MultiViewDataset) -> Result<()> {
    let (n, k, p) = (ds.len(), ds.num_views(), ds.num_points());
    let mut arrays = vec![Array::new(
        "keypoints",
        vec![n, k, p, 2],
        ds.keypoints().iter().flatten().flat_map(|w| row_major(w.matrix()).collect::<Vec<_>>()).collect(),
    )];
    if let Some(gt) = ds.gt_shapes() {
        arrays.push(Array::new(
            "gt_shapes",
            vec![n, p, 3],
            gt.iter().flat_map(|s| row_major(s.matrix()).collect::<Vec<_>>()).collect(),
        ));
    }
    if let Some(cams) = ds.cameras() {
        let m3 = |m: &Matrix3<f64>| (0..3).flat_map(move |i| (0..3).map(move |j| m[(i, j)])).collect::<Vec<_>>();
        arrays.push(Array::new("intrinsics", vec![k, 3, 3], cams.iter().flat_map(|c| m3(&c.intrinsics)).collect()));
        arrays.push(Array::new("rotations", vec![k, 3, 3], cams.iter().flat_map(|c| m3(&c.rotation)).collect()));
        arrays.push(Array::new(
            "translations",
            vec![k, 3],
            cams.iter().flat_map(|c| c.translation.iter().copied().collect::<Vec<_>>()).collect(),
        ));
    }
    let c = Container {
        meta: meta(&[("N", n.into()), ("K", k.into()), ("P", p.into())]),
        arrays,
    };
    write_container(dir.as_ref(), DATASET_MAGIC, &c)
}

/// Reads a dataset container written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<MultiViewDataset> {
    let mut c = read_container(dir.as_ref(), DATASET_MAGIC, "dataset")?;
    let (n, k, p) = (c.usize("N")?, c.usize("K")?, c.usize("P")?);
    let kp = c.take("keypoints", &[n, k, p, 2])?;
    let keypoints = (0..n)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let off = (i * k + j) * p * 2;
                    Keypoints2D::new(from_row_major(p, 2, &kp[off..off + 2 * p]))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let gt_shapes = if c.has("gt_shapes") {
        let g = c.take("gt_shapes", &[n, p, 3])?;
        Some(
            (0..n)
                .map(|i| Shape3D::new(from_row_major(p, 3, &g[i * 3 * p..(i + 1) * 3 * p])))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let cameras = if c.has("intrinsics") || c.has("rotations") || c.has("translations") {
        let ki = c.take("intrinsics", &[k, 3, 3])?;
        let ro = c.take("rotations", &[k, 3, 3])?;
        let tr = c.take("translations", &[k, 3])?;
        Some(
            (0..k)
                .map(|j| {
                    let kk = Matrix3::from_row_slice(&ki[9 * j..9 * j + 9]);
                    let rr = Matrix3::from_row_slice(&ro[9 * j..9 * j + 9]);
                    let tt = Vector3::from_row_slice(&tr[3 * j..3 * j + 3]);
                    CalibratedCamera::new(kk, rr, tt).map_err(|e| Error::format("cameras", e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    MultiViewDataset::new(p, k, keypoints, gt_shapes, cameras).map_err(|e| Error::format("dataset", e.to_string()))
}

/// Fitted parameters plus the optimizer state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub theta: DictionaryStack,
    pub adam: Option<AdamState>,
    /// Completed epochs.
    pub epoch: usize,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let theta = &ckpt.theta;
    let widths = theta.widths();
    let mut arrays = Vec::new();
    for (l, d) in theta.dictionaries.iter().enumerate() {
        arrays.push(Array::new(&format!("dictionary_{l}"), vec![d.nrows(), d.ncols()], row_major(d).collect()));
    }
    arrays.push(Array::new("lambdas", vec![theta.lambdas.len()], theta.lambdas.clone()));
    arrays.push(Array::new(
        "rf_weight",
        vec![theta.rf_weight.nrows(), theta.rf_weight.ncols()],
        row_major(&theta.rf_weight).collect(),
    ));
    arrays.push(Array::new("rf_bias", vec![theta.rf_bias.len()], theta.rf_bias.as_slice().to_vec()));
    let mut pairs = vec![
        ("P", theta.num_points().into()),
        ("widths", serde_json::to_value(&widths).expect("widths")),
        ("epoch", ckpt.epoch.into()),
    ];
    if let Some(adam) = &ckpt.adam {
        arrays.push(Array::new("adam_m", vec![adam.m.len()], adam.m.clone()));
        arrays.push(Array::new("adam_v", vec![adam.v.len()], adam.v.clone()));
        pairs.push(("adam_step", adam.step.into()));
        pairs.push(("adam_config", serde_json::to_value(adam.config).expect("adam config")));
    }
    write_container(dir.as_ref(), CHECKPOINT_MAGIC, &Container { meta: meta(&pairs), arrays })
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut c = read_container(dir.as_ref(), CHECKPOINT_MAGIC, "checkpoint")?;
    let p = c.usize("P")?;
    let widths: Vec<usize> = c.field("widths")?;
    let epoch = c.usize("epoch")?;
    let mut theta = DictionaryStack::zeros(p, &widths).map_err(|e| Error::format("widths", e.to_string()))?;
    for l in 0..widths.len() {
        let (r, cc) = theta.dictionaries[l].shape();
        let d = c.take(&format!("dictionary_{l}"), &[r, cc])?;
        theta.dictionaries[l] = from_row_major(r, cc, &d);
    }
    theta.lambdas = c.take("lambdas", &[widths.len()])?;
    let (r, cc) = theta.rf_weight.shape();
    theta.rf_weight = from_row_major(r, cc, &c.take("rf_weight", &[r, cc])?);
    theta.rf_bias = DVector::from_vec(c.take("rf_bias", &[r])?);
    let adam = if c.has("adam_m") {
        let len = theta.num_parameters();
        let config: AdamConfig = c.field("adam_config")?;
        let step = c.field::<u64>("adam_step")?;
        let m = c.take("adam_m", &[len])?;
        let v = c.take("adam_v", &[len])?;
        Some(AdamState { config, m, v, step })
    } else {
        None
    };
    Ok(Checkpoint { theta, adam, epoch })
}

/// Per-instance reconstruction outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub shapes: Vec<Shape3D>,
    /// `[n][k]` OnP rotation of the decoded shape against view `k`.
    pub rotations: Vec<Vec<Matrix3<f64>>>,
    pub scales: Vec<Vec<f64>>,
    /// Keypoint centroid of each view (pixels).
    pub translations: Vec<Vec<Vector2<f64>>>,
}

impl Predictions {
    pub fn from_reconstructions(recs: &[Reconstruction]) -> Self {
        Self {
            shapes: recs.iter().map(|r| r.shape.clone()).collect(),
            rotations: recs.iter().map(|r| r.views.iter().map(|v| v.onp.rotation).collect()).collect(),
            scales: recs.iter().map(|r| r.views.iter().map(|v| v.onp.scale).collect()).collect(),
            translations: recs.iter().map(|r| r.views.iter().map(|v| v.translation).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

pub fn save_predictions(dir: impl AsRef<Path>, preds: &Predictions) -> Result<()> {
    let n = preds.len();
    let p = preds.shapes.first().map_or(0, |s| s.num_points());
    let k = preds.rotations.first().map_or(0, |r| r.len());
    if preds.rotations.len() != n
        || preds.scales.len() != n
        || preds.translations.len() != n
        || preds.rotations.iter().any(|r| r.len() != k)
        || preds.scales.iter().any(|s| s.len() != k)
        || preds.translations.iter().any(|t| t.len() != k)
        || preds.shapes.iter().any(|s| s.num_points() != p)
    {
        return Err(Error::InvalidInput("ragged predictions".into()));
    }
    let arrays = vec![
        Array::new(
            "shapes",
            vec![n, p, 3],
            preds.shapes.iter().flat_map(|s| row_major(s.matrix()).collect::<Vec<_>>()).collect(),
        ),
        Array::new(
            "rotations",
            vec![n, k, 3, 3],
            preds
                .rotations
                .iter()
                .flatten()
                .flat_map(|m| (0..3).flat_map(move |i| (0..3).map(move |j| m[(i, j)])).collect::<Vec<_>>())
                .collect(),
        ),
        Array::new("scales", vec![n, k], preds.scales.iter().flatten().copied().collect()),
        Array::new(
            "translations",
            vec![n, k, 2],
            preds.translations.iter().flatten().flat_map(|t| [t.x, t.y]).collect(),
        ),
    ];
    let c = Container {
        meta: meta(&[("N", n.into()), ("K", k.into()), ("P", p.into())]),
        arrays,
    };
    write_container(dir.as_ref(), PREDICTIONS_MAGIC, &c)
}

pub fn load_predictions(dir: impl AsRef<Path>) -> Result<Predictions> {
    let mut c = read_container(dir.as_ref(), PREDICTIONS_MAGIC, "predictions")?;
    let (n, k, p) = (c.usize("N")?, c.usize("K")?, c.usize("P")?);
    let s = c.take("shapes", &[n, p, 3])?;
    let r = c.take("rotations", &[n, k, 3, 3])?;
    let sc = c.take("scales", &[n, k])?;
    let t = c.take("translations", &[n, k, 2])?;
    Ok(Predictions {
        shapes: (0..n)
            .map(|i| Shape3D::new(from_row_major(p, 3, &s[i * 3 * p..(i + 1) * 3 * p])))
            .collect::<Result<Vec<_>>>()?,
        rotations: (0..n)
            .map(|i| (0..k).map(|j| Matrix3::from_row_slice(&r[9 * (i * k + j)..9 * (i * k + j) + 9])).collect())
            .collect(),
        scales: (0..n).map(|i| sc[i * k..(i + 1) * k].to_vec()).collect(),
        translations: (0..n)
            .map(|i| {
                (0..k)
                    .map(|j| Vector2::new(t[2 * (i * k + j)], t[2 * (i * k + j) + 1]))
                    .collect()
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{inject_noise, synth_generate, NoiseSpec, SynthConfig};
    use crate::neural_prior::forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset() -> MultiViewDataset {
        let ds = synth_generate(&SynthConfig {
            num_points: 7,
            num_views: 3,
            num_instances: 12,
            seed: 11,
            ..SynthConfig::default()
        })
        .unwrap();
        inject_noise(
            &ds,
            &NoiseSpec {
                sigma_keypoints: 1.3,
                sigma_extrinsics: 0.1,
                seed: 2,
                ..NoiseSpec::default()
            },
        )
        .unwrap()
    }

    fn bits(ds: &MultiViewDataset) -> Vec<u64> {
        ds.keypoints().iter().flatten().flat_map(|w| w.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(bits(&back), bits(&ds));

        let bare = MultiViewDataset::new(7, 3, ds.keypoints().to_vec(), None, None).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &bare).unwrap();
        assert_eq!(load_dataset(dir2.path()).unwrap(), bare);
    }

    #[test]
    fn same_dataset_writes_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save_dataset(a.path(), &dataset()).unwrap();
        save_dataset(b.path(), &dataset()).unwrap();
        for name in ["manifest.json", "keypoints.bin", "gt_shapes.bin", "rotations.bin"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Value)) {
        let path = dir.join(MANIFEST);
        let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        f(&mut v);
        fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    }

    #[test]
    fn inconsistent_point_count_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &dataset()).unwrap();
        edit_manifest(dir.path(), |v| v["P"] = 8.into());
        match load_dataset(dir.path()) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "keypoints"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &dataset()).unwrap();
        let blob = dir.path().join("gt_shapes.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "gt_shapes"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_version_and_wrong_magic_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &dataset()).unwrap();
        edit_manifest(dir.path(), |v| v["version"] = 99.into());
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::UnsupportedVersion { found: 99, .. })
        ));
        edit_manifest(dir.path(), |v| v["version"] = 1.into());
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
        fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut theta = DictionaryStack::init(7, &[12, 6, 3], &mut rng).unwrap();
        theta.rf_bias = DVector::from_fn(12, |i, _| (i as f64).sin());
        let len = theta.num_parameters();
        let ckpt = Checkpoint {
            adam: Some(AdamState {
                config: AdamConfig::default(),
                m: (0..len).map(|i| (i as f64 * 0.37).cos()).collect(),
                v: (0..len).map(|i| (i as f64 * 0.11).sin().abs()).collect(),
                step: 42,
            }),
            theta,
            epoch: 5,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        let ds = dataset();
        for n in 0..ds.len() {
            let a = forward(ds.instance(n), &ckpt.theta).unwrap();
            let b = forward(ds.instance(n), &back.theta).unwrap();
            assert_eq!(a.shape, b.shape);
        }
        assert!(matches!(
            back.theta.ensure_architecture(7, &[12, 6, 4]),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn predictions_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = DictionaryStack::init(7, &[6, 3], &mut rng).unwrap();
        let ds = dataset();
        let recs: Vec<_> = (0..ds.len()).map(|n| forward(ds.instance(n), &theta).unwrap()).collect();
        let preds = Predictions::from_reconstructions(&recs);
        let dir = tempfile::tempdir().unwrap();
        save_predictions(dir.path(), &preds).unwrap();
        assert_eq!(load_predictions(dir.path()).unwrap(), preds);
    }
}
