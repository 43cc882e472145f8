//! Python bindings for `lesson_core`.

use std::path::PathBuf;

use lesson_core::estimation;
use lesson_core::fdia::{self, AttackScale, DatasetConfig, FdiaSpec};
use lesson_core::gridcase::{self, GridModel};
use lesson_core::harness::calibrated_grid;
use lesson_core::lesson::{self, AttackConfig, Objective, Variant};
use lesson_core::neural::{self, ArchitectureSpec, Mode, NalModel, TrainConfig};
use lesson_core::rng::stream;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(lesson_py, LessonError, PyException);

fn py_err(e: lesson_core::Error) -> PyErr {
    LessonError::new_err(format!("{}: {e}", e.kind()))
}

#[pyclass(name = "Grid", module = "lesson_py", frozen)]
struct PyGrid {
    inner: GridModel,
}

#[pymethods]
impl PyGrid {
    /// A bundled case with noise levels calibrated from `seed`.
    #[staticmethod]
    #[pyo3(signature = (case, seed = 0))]
    fn bundled(case: &str, seed: u64) -> PyResult<Self> {
        Ok(PyGrid {
            inner: calibrated_grid(case, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyGrid {
            inner: gridcase::load_grid_json(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        gridcase::save_grid_json(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn case_name(&self) -> String {
        self.inner.case_name.clone()
    }

    #[getter]
    fn n_bus(&self) -> usize {
        self.inner.n_bus
    }

    #[getter]
    fn n_state(&self) -> usize {
        self.inner.n_state
    }

    #[getter]
    fn n_meters(&self) -> usize {
        self.inner.n_meters()
    }

    #[getter]
    fn noise_sigma(&self) -> Option<Vec<f64>> {
        self.inner.noise_sigma().map(<[f64]>::to_vec)
    }

    fn measure(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.n_state {
            return Err(PyValueError::new_err(format!(
                "state has length {}, grid has {} states",
                x.len(),
                self.inner.n_state
            )));
        }
        Ok(self.inner.measure(&x))
    }

    fn estimate(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        estimation::wls_estimate(&self.inner, &z).map_err(py_err)
    }

    fn bdd_statistic(&self, z: Vec<f64>) -> PyResult<f64> {
        estimation::bdd_statistic(&self.inner, &z).map_err(py_err)
    }

    #[pyo3(signature = (z, significance = estimation::DEFAULT_SIGNIFICANCE))]
    fn detect<'py>(&self, py: Python<'py>, z: Vec<f64>, significance: f64) -> PyResult<Bound<'py, PyDict>> {
        let r = estimation::bdd_detect(&self.inner, &z, significance).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("x_hat", r.x_hat)?;
        d.set_item("residual", r.residual)?;
        d.set_item("statistic", r.bdd_statistic)?;
        d.set_item("threshold", r.threshold)?;
        d.set_item("dof", r.dof)?;
        d.set_item("flagged", r.flagged)?;
        Ok(d)
    }

    /// One noisy reading from the load model: `(state, measurements)`.
    fn sample_measurement(&self, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let mut rng = stream(seed, "py-sample", 0);
        let (_, x) = fdia::sample_state(&self.inner, &mut rng);
        let z = fdia::make_measurements(&self.inner, &x, &mut rng).map_err(py_err)?;
        Ok((x, z))
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid({}, buses={}, meters={})",
            self.inner.case_name,
            self.inner.n_bus,
            self.inner.n_meters()
        )
    }
}

#[pyclass(name = "Fdia", module = "lesson_py", frozen)]
struct PyFdia {
    inner: FdiaSpec,
}

#[pymethods]
impl PyFdia {
    /// Random stealthy attack with state-error variance `scale` (or a scale
    /// name: small, medium, large).
    #[staticmethod]
    fn random(grid: &PyGrid, scale: &Bound<'_, PyAny>, seed: u64) -> PyResult<Self> {
        let variance = match scale.extract::<f64>() {
            Ok(v) => v,
            Err(_) => {
                let name: String = scale.extract()?;
                AttackScale::parse(&name)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown scale {name:?}")))?
                    .variance()
            }
        };
        let mut rng = stream(seed, "py-fdia", 0);
        Ok(PyFdia {
            inner: fdia::random_fdia(&grid.inner, variance, &mut rng).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_state_error(grid: &PyGrid, c: Vec<f64>) -> PyResult<Self> {
        if c.len() != grid.inner.n_state {
            return Err(PyValueError::new_err("state error has the wrong length"));
        }
        Ok(PyFdia {
            inner: FdiaSpec::from_state_error(&grid.inner, c, 0.0),
        })
    }

    #[getter]
    fn c(&self) -> Vec<f64> {
        self.inner.c.clone()
    }

    #[getter]
    fn a(&self) -> Vec<f64> {
        self.inner.a.clone()
    }

    #[getter]
    fn target_indices(&self) -> Vec<usize> {
        self.inner.target_indices.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        fdia::labels_from_attack(&self.inner.a, fdia::LABEL_EPSILON)
    }
}

#[pyclass(name = "Model", module = "lesson_py")]
struct PyModel {
    inner: NalModel,
}

#[pymethods]
impl PyModel {
    /// Untrained preset network for `grid`.
    #[staticmethod]
    #[pyo3(signature = (grid, seed = 0))]
    fn preset(grid: &PyGrid, seed: u64) -> PyResult<Self> {
        let g = &grid.inner;
        let arch = ArchitectureSpec::preset(g.n_bus, g.n_meters());
        Ok(PyModel {
            inner: NalModel::new(&g.case_name, arch, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: NalModel::load_json(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_json(&path).map_err(py_err)
    }

    #[getter]
    fn n_meters(&self) -> usize {
        self.inner.n_meters()
    }

    #[getter]
    fn trained(&self) -> bool {
        self.inner.training.is_some()
    }

    fn logits(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward(&z).map_err(py_err)?.0)
    }

    fn predict_labels(&self, z: Vec<f64>) -> PyResult<Vec<u8>> {
        self.inner.predict_labels(&z).map_err(py_err)
    }

    /// Train on `<data>/train` (or `data` itself); accuracy is reported on
    /// `<data>/test` when present.
    #[pyo3(signature = (data, epochs = 30, batch_size = 64, lr = 1e-3, seed = 0))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        data: PathBuf,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let grid = gridcase::load_grid_json(&data.join("grid.json")).map_err(py_err)?;
        let split = |name: &str| {
            let dir = data.join(name);
            dir.join("meta.json").exists().then_some(dir)
        };
        let train_dir = split("train").unwrap_or_else(|| data.clone());
        let train_set = fdia::load_dataset(&train_dir, &grid).map_err(py_err)?;
        let test_set = split("test")
            .map(|d| fdia::load_dataset(&d, &grid))
            .transpose()
            .map_err(py_err)?;
        let config = TrainConfig {
            epochs,
            batch_size,
            lr,
            seed,
        };
        let model = &mut self.inner;
        let report = py
            .detach(|| neural::train(model, &train_set, test_set.as_ref(), &config))
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("epochs", report.epochs_run)?;
        d.set_item("final_loss", report.final_loss)?;
        d.set_item("meter_accuracy", report.meter_accuracy)?;
        d.set_item("row_accuracy", report.row_accuracy)?;
        d.set_item("loss_trace", report.loss_trace)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({}, meters={}, mode={:?})",
            self.inner.case_name,
            self.inner.n_meters(),
            self.inner.mode
        )
    }
}

/// Generate a labelled dataset, split it 2:1 and write `grid.json`,
/// `train/` and `test/` under `out`.
#[pyfunction]
#[pyo3(signature = (grid, out, n_normal, n_attacked_per_scale, seed = 0))]
fn generate_dataset(grid: &PyGrid, out: PathBuf, n_normal: usize, n_attacked_per_scale: usize, seed: u64) -> PyResult<(usize, usize)> {
    let g = &grid.inner;
    let data = fdia::generate_dataset(g, &DatasetConfig::new(n_normal, n_attacked_per_scale, seed)).map_err(py_err)?;
    let (tr, te) = data.split_train_test(seed);
    std::fs::create_dir_all(&out).map_err(|e| PyOSError::new_err(format!("{}: {e}", out.display())))?;
    gridcase::save_grid_json(g, &out.join("grid.json")).map_err(py_err)?;
    fdia::save_dataset(&tr, &out.join("train")).map_err(py_err)?;
    fdia::save_dataset(&te, &out.join("test")).map_err(py_err)?;
    Ok((tr.len(), te.len()))
}

/// Run one adversarial search against a trained model.
#[pyfunction]
#[pyo3(signature = (
    model, grid, z_a, attack, variant,
    lr = 1e-3, mu = 1.0, max_iter = 500, uncontrolled = None, penalty = None, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn run_attack<'py>(
    py: Python<'py>,
    model: &PyModel,
    grid: &PyGrid,
    z_a: Vec<f64>,
    attack: &PyFdia,
    variant: &str,
    lr: f64,
    mu: f64,
    max_iter: usize,
    uncontrolled: Option<Vec<usize>>,
    penalty: Option<f64>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let variant = Variant::parse(variant).ok_or_else(|| PyValueError::new_err(format!("unknown variant {variant:?}")))?;
    let mut cfg = AttackConfig::new(variant);
    cfg.lr = lr;
    cfg.mu = mu;
    cfg.max_iter = max_iter;
    cfg.seed = seed;
    cfg.uncontrolled_meters = uncontrolled.unwrap_or_default();
    if let Some(lambda) = penalty {
        cfg.objective = Objective::Penalty { lambda };
    }
    if model.inner.mode != Mode::Eval {
        return Err(LessonError::new_err("precondition: model must be trained (eval mode)"));
    }
    let r = py
        .detach(|| lesson::run_attack(&model.inner, &grid.inner, &z_a, &attack.inner, &cfg))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("success", r.success)?;
    d.set_item("iterations_used", r.iterations_used)?;
    d.set_item("zeta", r.zeta)?;
    d.set_item("theta", r.theta)?;
    d.set_item("z_f", r.z_f)?;
    d.set_item("predicted_labels", r.predicted_labels)?;
    d.set_item("loss", r.loss)?;
    d.set_item("bdd_statistic_final", r.bdd_statistic_final)?;
    d.set_item("zeta_norm", r.zeta_norm)?;
    d.set_item("theta_norm", r.theta_norm)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (dof, significance = estimation::DEFAULT_SIGNIFICANCE))]
fn chi_square_threshold(dof: usize, significance: f64) -> PyResult<f64> {
    estimation::chi_square_threshold(dof, significance).map_err(py_err)
}

#[pymodule]
fn lesson_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LessonError", m.py().get_type::<LessonError>())?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyFdia>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_attack, m)?)?;
    m.add_function(wrap_pyfunction!(chi_square_threshold, m)?)?;
    m.add("VARIANTS", Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>())?;
    Ok(())
}
