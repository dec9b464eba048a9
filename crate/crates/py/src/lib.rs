//! Python module `jigsaw`: houses, the noise schedule, models and metrics.

use std::path::PathBuf;

use jigsaw_core::data::{self, House};
use jigsaw_core::diffusion::NoiseSchedule;
use jigsaw_core::geometry::{Point2, Pose, Rotation4};
use jigsaw_core::inference::{evaluate_runs, EvalConfig};
use jigsaw_core::metrics;
use jigsaw_core::model::{DenoiserConfig, ModelKind, RotationMode, TrainedModel};
use jigsaw_core::numcore::Tensor;
use jigsaw_core::render::{render_svg, RenderOptions};
use jigsaw_core::training::{TrainConfig, Trainer};
use jigsaw_core::JigsawError;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(jigsaw, JigsawException, PyException);

fn err(e: JigsawError) -> PyErr {
    JigsawException::new_err(e.to_string())
}

type PoseTuple = (f64, f64, u8);

fn to_tuples(poses: &[Pose]) -> Vec<PoseTuple> {
    poses
        .iter()
        .map(|p| (p.translation.x, p.translation.y, p.rotation.k()))
        .collect()
}

fn from_tuples(poses: &[PoseTuple]) -> PyResult<Vec<Pose>> {
    poses
        .iter()
        .map(|&(x, y, k)| Ok(Pose::new(Point2::new(x, y), Rotation4::new(k).map_err(err)?)))
        .collect()
}

#[pyclass(name = "House", module = "jigsaw", from_py_object)]
#[derive(Clone)]
struct PyHouse {
    inner: House,
}

#[pymethods]
impl PyHouse {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let mut v = data::from_jsonl_str(text).map_err(err)?;
        match (v.pop(), v.is_empty()) {
            (Some(inner), true) => Ok(PyHouse { inner }),
            _ => Err(PyValueError::new_err("expected exactly one house")),
        }
    }

    fn to_json(&self) -> PyResult<String> {
        Ok(data::to_jsonl_string(std::slice::from_ref(&self.inner))
            .map_err(err)?
            .trim_end()
            .to_string())
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn num_rooms(&self) -> usize {
        self.inner.num_rooms()
    }

    #[getter]
    fn num_corners(&self) -> usize {
        self.inner.num_corners()
    }

    /// Ground-truth `(x, y, k)` per room.
    #[getter]
    fn gt_poses(&self) -> Vec<PoseTuple> {
        to_tuples(&self.inner.gt_poses)
    }

    /// Room-local corners of every room.
    #[getter]
    fn corners(&self) -> Vec<Vec<(f64, f64)>> {
        self.inner
            .rooms
            .iter()
            .map(|r| r.corners.iter().map(|c| (c.x, c.y)).collect())
            .collect()
    }

    /// Pairs of rooms sharing a door.
    fn door_adjacency(&self) -> Vec<(usize, usize)> {
        self.inner.door_adjacency()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[pyo3(signature = (drop_types = false, drop_doors = false))]
    fn corrupted(&self, drop_types: bool, drop_doors: bool) -> Self {
        PyHouse {
            inner: data::corrupt_house(&self.inner, drop_types, drop_doors),
        }
    }

    /// SVG of the house at `poses` (ground truth when omitted).
    #[pyo3(signature = (poses = None))]
    fn render_svg(&self, poses: Option<Vec<PoseTuple>>) -> PyResult<String> {
        let poses = match poses {
            Some(p) => from_tuples(&p)?,
            None => self.inner.gt_poses.clone(),
        };
        render_svg(&self.inner, &poses, &RenderOptions::default()).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "House(id={:?}, rooms={}, corners={})",
            self.inner.id,
            self.inner.num_rooms(),
            self.inner.num_corners()
        )
    }
}

fn houses_of(hs: &[PyHouse]) -> Vec<House> {
    hs.iter().map(|h| h.inner.clone()).collect()
}

#[pyfunction]
#[pyo3(signature = (seed, n_rooms = 5))]
fn generate_house(seed: u64, n_rooms: usize) -> PyResult<PyHouse> {
    let inner = data::generate_house(seed, &data::GeneratorConfig::with_rooms(n_rooms)).map_err(err)?;
    Ok(PyHouse { inner })
}

#[pyfunction]
#[pyo3(signature = (n, seed = 0, min_rooms = 3, max_rooms = 6))]
fn generate_dataset(n: usize, seed: u64, min_rooms: usize, max_rooms: usize) -> PyResult<Vec<PyHouse>> {
    let hs = data::generate_dataset(n, seed, (min_rooms, max_rooms), &data::GeneratorConfig::default())
        .map_err(err)?;
    Ok(hs.into_iter().map(|inner| PyHouse { inner }).collect())
}

#[pyfunction]
fn read_jsonl(path: PathBuf) -> PyResult<Vec<PyHouse>> {
    Ok(data::read_jsonl(path)
        .map_err(err)?
        .into_iter()
        .map(|inner| PyHouse { inner })
        .collect())
}

#[pyfunction]
fn write_jsonl(path: PathBuf, houses: Vec<PyHouse>) -> PyResult<()> {
    data::write_jsonl(path, &houses_of(&houses)).map_err(err)
}

#[pyclass(name = "NoiseSchedule", module = "jigsaw", from_py_object)]
#[derive(Clone)]
struct PyNoiseSchedule {
    inner: NoiseSchedule,
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(err)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[pymethods]
impl PyNoiseSchedule {
    /// Linear schedule of `steps` steps with endpoints rescaled from the 1000-step reference.
    #[new]
    #[pyo3(signature = (steps = 1000))]
    fn new(steps: usize) -> PyResult<Self> {
        Ok(PyNoiseSchedule {
            inner: NoiseSchedule::scaled(steps).map_err(err)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.alpha_bar_at(t).map_err(err)
    }

    fn q_sample(&self, x0: Vec<Vec<f64>>, t: usize, noise: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.q_sample(&matrix(&x0)?, t, &matrix(&noise)?).map_err(err)?;
        Ok(rows_of(&out))
    }

    fn estimate_x0(&self, x_t: Vec<Vec<f64>>, t: usize, eps: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.estimate_x0(&matrix(&x_t)?, t, &matrix(&eps)?).map_err(err)?;
        Ok(rows_of(&out))
    }
}

#[pyclass(name = "Model", module = "jigsaw")]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    /// Untrained model. `kind` is `"diffusion"` or `"transvector"`,
    /// `mode` is `"estimated"` or `"gt_given"`.
    #[new]
    #[pyo3(signature = (kind = "diffusion", mode = "estimated", d_model = 128, n_blocks = 6, n_heads = 4, steps = 1000, seed = 0))]
    fn new(kind: &str, mode: &str, d_model: usize, n_blocks: usize, n_heads: usize, steps: usize, seed: u64) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(err)?;
        let cfg = DenoiserConfig {
            d_model,
            n_blocks,
            n_heads,
            mlp_hidden: 4 * d_model,
            rotation_mode: mode.parse::<RotationMode>().map_err(err)?,
            ..DenoiserConfig::default()
        };
        Ok(PyModel {
            inner: TrainedModel::new(kind, cfg, steps, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: TrainedModel::load(&path).map_err(err)?.0,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, serde_json::json!({})).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.as_str()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.net.num_parameters()
    }

    /// Trains in place; returns the mean loss of every epoch.
    #[pyo3(signature = (houses, epochs = 10, lr = 3e-4, batch_size = 32, seed = 0))]
    fn fit(&mut self, py: Python<'_>, houses: Vec<PyHouse>, epochs: usize, lr: f64, batch_size: usize, seed: u64) -> PyResult<Vec<f64>> {
        let cfg = TrainConfig {
            kind: self.inner.kind,
            model: self.inner.net.config.clone(),
            diffusion_steps: self.inner.diffusion_steps(),
            lr,
            batch_size,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let hs = houses_of(&houses);
        let model = self.inner.clone();
        let (model, losses) = py
            .detach(move || -> Result<_, JigsawError> {
                let mut t = Trainer::new(cfg, None)?;
                t.model = model;
                t.fit(&hs, &[])?;
                let losses = t.history.iter().map(|e| e.mean_loss).collect::<Vec<_>>();
                Ok((t.model, losses))
            })
            .map_err(err)?;
        self.inner = model;
        Ok(losses)
    }

    /// Mean/std metrics over `runs` sampling runs, as a JSON string.
    #[pyo3(signature = (houses, runs = 5, seed = 0, test_scaling = true))]
    fn evaluate(&self, py: Python<'_>, houses: Vec<PyHouse>, runs: usize, seed: u64, test_scaling: bool) -> PyResult<String> {
        let cfg = EvalConfig {
            n_runs: runs,
            seed,
            test_scaling,
            ..EvalConfig::default()
        };
        let hs = houses_of(&houses);
        let report = py.detach(|| evaluate_runs(&self.inner, &hs, &cfg)).map_err(err)?;
        serde_json::to_string(&report.summary).map_err(|e| err(e.into()))
    }

    /// Estimated `(x, y, k)` per room of `house`, in its stored frame.
    #[pyo3(signature = (house, seed = 0))]
    fn estimate(&self, house: &PyHouse, seed: u64) -> PyResult<Vec<PoseTuple>> {
        let cfg = EvalConfig {
            n_runs: 1,
            seed,
            test_scaling: false,
            ..EvalConfig::default()
        };
        let report = evaluate_runs(&self.inner, std::slice::from_ref(&house.inner), &cfg).map_err(err)?;
        Ok(to_tuples(&report.houses[0].runs[0].pred_poses))
    }
}

#[pyfunction]
fn mpe(pred: Vec<PoseTuple>, gt: Vec<PoseTuple>) -> PyResult<f64> {
    metrics::mpe(&from_tuples(&pred)?, &from_tuples(&gt)?).map_err(err)
}

/// Edge edits between the connectivity graphs of `pred` and the ground truth.
#[pyfunction]
#[pyo3(signature = (house, pred, threshold = metrics::CONNECT_THRESHOLD))]
fn ged(house: &PyHouse, pred: Vec<PoseTuple>, threshold: f64) -> PyResult<usize> {
    let h = &house.inner;
    let p = metrics::connectivity(&from_tuples(&pred)?, h, threshold).map_err(err)?;
    let g = metrics::connectivity(&h.gt_poses, h, threshold).map_err(err)?;
    metrics::ged(&p, &g).map_err(err)
}

#[pymodule]
fn jigsaw(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("JigsawError", m.py().get_type::<JigsawException>())?;
    m.add_class::<PyHouse>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_house, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(write_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(mpe, m)?)?;
    m.add_function(wrap_pyfunction!(ged, m)?)?;
    Ok(())
}
