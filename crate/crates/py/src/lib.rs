//! Python bindings: scene generation, weak labels, training, evaluation and
//! the two perturbation generators. Arrays cross the boundary as nested
//! lists.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use datseg::backbone::{infer_logits, predict_labels};
use datseg::covariance::ClassCovarianceTracker;
use datseg::io::{self, RunConfig};
use datseg::lap::generate_lap_from_logits;
use datseg::rad::{generate_rad_from_logits, partition_superpoints};
use datseg::{AnnotationScheme, LabeledScene, ModelParams, SceneSpec, WeakLabels};

fn err(e: datseg::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_config(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(dict) = overrides {
        for (key, value) in dict.iter() {
            let key: String = key.extract()?;
            let text = if value.is_instance_of::<PyBool>() {
                value.extract::<bool>()?.to_string()
            } else {
                value.str()?.to_string()
            };
            config.set(&key, &text).map_err(err)?;
        }
    }
    config.validate().map_err(err)?;
    Ok(config)
}

fn rows(a: &datseg::Array) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

/// A labeled point cloud.
#[pyclass(name = "Scene", module = "datseg_py", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: LabeledScene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::load_scene(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save(&path, |w| io::write_scene(&self.inner, w)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn coords(&self) -> Vec<Vec<f64>> {
        rows(self.inner.cloud.coords())
    }

    #[getter]
    fn feats(&self) -> Vec<Vec<f64>> {
        rows(self.inner.cloud.feats())
    }

    #[getter]
    fn classes(&self) -> Vec<usize> {
        self.inner.gt_classes.clone()
    }

    #[getter]
    fn instances(&self) -> Vec<usize> {
        self.inner.instance_ids.clone()
    }

    /// Weak labels `[(index, class)]` under `otoc`, `ottc` or `points<K>`.
    #[pyo3(signature = (scheme="otoc", seed=0))]
    fn sample_labels(&self, scheme: &str, seed: u64) -> PyResult<Vec<(usize, usize)>> {
        let scheme: AnnotationScheme = scheme.parse().map_err(err)?;
        let labels = scheme.sample(&self.inner, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        Ok(labels.entries().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(points={}, classes={}, instances={})",
            self.inner.len(),
            self.inner.num_classes,
            self.inner.num_instances()
        )
    }
}

/// Network weights.
#[pyclass(name = "Model", module = "datseg_py", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::load_checkpoint(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save(&path, |w| io::write_checkpoint(&self.inner, w)).map_err(err)
    }

    fn predict(&self, scene: &PyScene) -> PyResult<Vec<usize>> {
        Ok(predict_labels(&infer_logits(&scene.inner.cloud, &self.inner, None).map_err(err)?))
    }

    /// `{"miou": float, "iou": [float | None]}` over the given scenes.
    fn evaluate<'py>(&self, py: Python<'py>, scenes: Vec<PyScene>) -> PyResult<Bound<'py, PyDict>> {
        let scenes: Vec<LabeledScene> = scenes.into_iter().map(|s| s.inner).collect();
        let metrics = datseg::evaluate(&scenes, &self.inner).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("miou", metrics.miou())?;
        out.set_item("iou", (0..metrics.num_classes()).map(|c| metrics.iou(c)).collect::<Vec<_>>())?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("Model(feat_dim={}, classes={})", self.inner.feat_dim(), self.inner.num_classes())
    }
}

#[pyfunction]
#[pyo3(signature = (n_scenes, seed=0, n_points=2048, k_classes=6))]
fn generate_dataset(n_scenes: usize, seed: u64, n_points: usize, k_classes: usize) -> PyResult<Vec<PyScene>> {
    let spec = SceneSpec { n_points, k_classes, ..SceneSpec::default() };
    let scenes = datseg::generate_dataset(&spec, n_scenes, seed).map_err(err)?;
    Ok(scenes.into_iter().map(|inner| PyScene { inner }).collect())
}

/// `(step, branch, L_seg, L_lc, L_rc, L_total)`.
type LogRow = (usize, String, f64, f64, f64, f64);

/// Trains on `scenes` with one weak label list per scene. `config` holds run
/// config keys. Returns the model and the per-step log.
#[pyfunction]
#[pyo3(signature = (scenes, labels, config=None))]
fn train(
    scenes: Vec<PyScene>,
    labels: Vec<Vec<(usize, usize)>>,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<(PyModel, Vec<LogRow>)> {
    let config = run_config(config)?;
    let scenes: Vec<LabeledScene> = scenes.into_iter().map(|s| s.inner).collect();
    let weak = labels.into_iter().map(WeakLabels::new).collect::<datseg::Result<Vec<_>>>().map_err(err)?;
    let outcome = datseg::train(&scenes, &weak, &config.train, None).map_err(err)?;
    let log = outcome.log.iter().map(|r| (r.step, r.branch.to_string(), r.l_seg, r.l_lc, r.l_rc, r.l_total)).collect();
    Ok((PyModel { inner: outcome.params }, log))
}

/// Local adaptive perturbation of one scene: `{"coords", "feats", "lds"}`.
#[pyfunction]
#[pyo3(signature = (scene, model, config=None, seed=0))]
fn lap<'py>(
    py: Python<'py>,
    scene: &PyScene,
    model: &PyModel,
    config: Option<&Bound<'_, PyDict>>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = run_config(config)?;
    let cloud = &scene.inner.cloud;
    let logits = infer_logits(cloud, &model.inner, None).map_err(err)?;
    let mut tracker = ClassCovarianceTracker::new(model.inner.num_classes(), model.inner.feat_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, diag) = generate_lap_from_logits(
        cloud,
        &model.inner,
        &logits,
        None,
        &config.train.lap_config(),
        &mut tracker,
        &mut rng,
    )
    .map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("coords", rows(out.cloud.coords()))?;
    dict.set_item("feats", rows(out.cloud.feats()))?;
    dict.set_item("lds", diag.lds)?;
    Ok(dict)
}

/// Regional adaptive deformation of one scene: `{"coords", "regions", "lds"}`.
#[pyfunction]
#[pyo3(signature = (scene, model, config=None, seed=0))]
fn rad<'py>(
    py: Python<'py>,
    scene: &PyScene,
    model: &PyModel,
    config: Option<&Bound<'_, PyDict>>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = run_config(config)?;
    let cloud = &scene.inner.cloud;
    let partition = partition_superpoints(cloud, config.train.rad.cell_size).map_err(err)?;
    let logits = infer_logits(cloud, &model.inner, None).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = generate_rad_from_logits(cloud, &partition, &model.inner, &logits, &config.train.rad_config(), &mut rng)
        .map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("coords", rows(out.cloud.coords()))?;
    dict.set_item("regions", partition.region_of().to_vec())?;
    dict.set_item("lds", out.diagnostics.lds)?;
    Ok(dict)
}

#[pymodule]
fn datseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(lap, m)?)?;
    m.add_function(wrap_pyfunction!(rad, m)?)?;
    Ok(())
}
