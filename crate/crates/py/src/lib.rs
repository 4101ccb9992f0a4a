//! Python bindings. Images cross the boundary as lists of rows.

use std::path::PathBuf;

use dualarb::curriculum::CurriculumSchedule;
use dualarb::dataset::{generate_dataset, read_slice, DatasetSpec};
use dualarb::kspace::{degrade_plane, lowpass_mask};
use dualarb::model::{DualArbNet, ModelConfig};
use dualarb::phantom::{generate_phantom, PhantomSpec};
use dualarb::tensor::Plane;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: dualarb::Error) -> PyErr {
    match e {
        dualarb::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_plane(rows: Vec<Vec<f64>>) -> PyResult<Plane<f64>> {
    let h = rows.len();
    let w = rows.first().map_or(0, |r| r.len());
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Plane::new(h, w, rows.into_iter().flatten().collect()).map_err(err)
}

type Rows = Vec<Vec<f64>>;

fn to_rows<T: dualarb::tensor::Real>(p: &Plane<T>) -> Vec<Vec<f64>> {
    p.data
        .chunks(p.w)
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect()
}

/// Low-pass k-space degradation by `scale`.
#[pyfunction]
fn degrade(image: Vec<Vec<f64>>, scale: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&degrade_plane(&to_plane(image)?, scale).map_err(err)?))
}

/// Centered k-space mask keeping the `lr` window of an `hr` grid.
#[pyfunction]
fn frequency_mask(hr: (usize, usize), lr: (usize, usize)) -> PyResult<Vec<Vec<u8>>> {
    let m = lowpass_mask(hr, lr).map_err(err)?;
    Ok(m.values.chunks(m.w).map(|r| r.to_vec()).collect())
}

#[pyfunction]
#[pyo3(signature = (a, b, data_range=1.0))]
fn psnr(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, data_range: f64) -> PyResult<f64> {
    dualarb::metrics::psnr(&to_plane(a)?, &to_plane(b)?, data_range).map_err(err)
}

#[pyfunction]
fn ssim(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    dualarb::metrics::ssim(&to_plane(a)?, &to_plane(b)?).map_err(err)
}

/// `||M * F(sr - hr)||` with the mask of the `lr` window.
#[pyfunction]
fn k_loss(sr: Vec<Vec<f64>>, hr: Vec<Vec<f64>>, lr: (usize, usize)) -> PyResult<f64> {
    let (sr, hr) = (to_plane(sr)?, to_plane(hr)?);
    let mask = lowpass_mask(hr.dims(), lr).map_err(err)?;
    dualarb::losses::k_loss(&sr, &hr, &mask).map_err(err)
}

/// `(target, reference)` phantom slices in [0, 1].
#[pyfunction]
#[pyo3(signature = (seed, h, w, n_ellipses=10))]
fn phantom(seed: u64, h: usize, w: usize, n_ellipses: usize) -> PyResult<(Rows, Rows)> {
    let pair = generate_phantom(&PhantomSpec::random(seed, (h, w), n_ellipses)).map_err(err)?;
    Ok((to_rows(&pair.target.pixels), to_rows(&pair.reference.pixels)))
}

/// Writes a phantom dataset and returns the slice count per split.
#[pyfunction]
#[pyo3(signature = (root, seed=0, subjects=20, slices=4, h=96, w=96))]
fn make_dataset(root: PathBuf, seed: u64, subjects: usize, slices: usize, h: usize, w: usize) -> PyResult<Vec<usize>> {
    let spec = DatasetSpec {
        seed,
        subjects,
        slices_per_subject: slices,
        dims: (h, w),
        ..DatasetSpec::default()
    };
    let splits = generate_dataset(&root, &spec).map_err(err)?;
    Ok(splits.iter().map(|m| m.entries.len()).collect())
}

#[pyfunction]
fn load_slice(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&read_slice(&path).map_err(err)?.pixels))
}

/// `(stage, lr)` for an epoch of a `(warm-up, pre-learning, full)` schedule.
#[pyfunction]
fn curriculum_stage(schedule: (usize, usize, usize), epoch: usize) -> PyResult<(String, f64)> {
    let s = CurriculumSchedule::new(schedule.0, schedule.1, schedule.2).map_err(err)?;
    let p = s.stage_for_epoch(epoch).map_err(err)?;
    Ok((p.stage.as_str().to_string(), p.lr))
}

#[pyclass(frozen)]
struct Model {
    net: DualArbNet<f32>,
}

#[pymethods]
impl Model {
    /// Freshly initialized network from a preset: "desk", "full" or "tiny".
    #[new]
    #[pyo3(signature = (preset="desk", seed=0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let mut cfg = match preset {
            "desk" => ModelConfig::desk(),
            "full" => ModelConfig::full(),
            "tiny" => ModelConfig::tiny(),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        cfg.seed = seed;
        Ok(Model {
            net: DualArbNet::init(cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = dualarb::checkpoint::load_checkpoint(&path).map_err(err)?;
        Ok(Model { net: ck.state.net })
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.net.config).expect("config serializes")
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.net.params.len()
    }

    /// Super-resolves `target` by `scale`, guided by `reference` at any size.
    #[pyo3(signature = (target, scale, reference=None))]
    fn super_resolve(
        &self,
        target: Vec<Vec<f64>>,
        scale: f64,
        reference: Option<Vec<Vec<f64>>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let tar = to_plane(target)?.cast::<f32>();
        let reference = reference.map(to_plane).transpose()?.map(|r| r.cast::<f32>());
        let sr = dualarb::inference::super_resolve(&self.net, &tar, reference.as_ref(), scale).map_err(err)?;
        Ok(to_rows(&sr))
    }

    fn __repr__(&self) -> String {
        let r = &self.net.config.rdn;
        format!(
            "Model(D={}, C={}, G={}, G0={}, parameters={})",
            r.num_blocks,
            r.convs_per_block,
            r.growth,
            r.base_channels,
            self.net.params.len()
        )
    }
}

#[pymodule]
fn dualarb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(frequency_mask, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(k_loss, m)?)?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_slice, m)?)?;
    m.add_function(wrap_pyfunction!(curriculum_stage, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
