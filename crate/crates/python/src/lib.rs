//! Python bindings for the core geometry, fusion, time-surface and pipeline
//! entry points.

use pyo3::prelude::*;

#[pymodule]
mod evstereo_py {
    use std::collections::BTreeMap;
    use std::path::PathBuf;

    use nalgebra::{Point2, UnitQuaternion, Vector3};
    use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
    use pyo3::prelude::*;

    use evstereo::fusion::{chi2_statistic, fuse as fuse_gaussians, GaussianInverseDepth};
    use evstereo::geometry::{RationalWarpCoefficients, RectifiedCamera, SE3Transform};
    use evstereo::ingest::{Event, OrderPolicy};
    use evstereo::pipeline::{evaluate_files, report_summary, run_pipeline, PipelineConfig, RunSummary};
    use evstereo::synthetic::{generate, write_dataset, EventModel, ThreePlaneConfig};
    use evstereo::time_surface::LastSpikeMap;
    use evstereo::Error;

    fn to_py(e: Error) -> PyErr {
        match e {
            Error::Io(io) => PyIOError::new_err(io.to_string()),
            Error::Config(_)
            | Error::InvalidInverseDepth(_)
            | Error::InvalidRotation(_)
            | Error::InvalidProjection(_)
            | Error::Incompatible => PyValueError::new_err(e.to_string()),
            other => PyRuntimeError::new_err(other.to_string()),
        }
    }

    fn to_dict(summary: &RunSummary) -> BTreeMap<String, String> {
        summary.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    /// Rectified pinhole camera.
    #[pyclass(frozen)]
    struct Camera {
        inner: RectifiedCamera,
    }

    #[pymethods]
    impl Camera {
        #[new]
        fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
            Self {
                inner: RectifiedCamera::new(fx, fy, cx, cy, width, height),
            }
        }

        /// Camera-frame point of pixel `(u, v)` at inverse depth `rho`.
        fn back_project(&self, u: f64, v: f64, rho: f64) -> PyResult<(f64, f64, f64)> {
            let p = self.inner.back_project(&Point2::new(u, v), rho).map_err(to_py)?;
            Ok((p.x, p.y, p.z))
        }

        fn project(&self, x: f64, y: f64, z: f64) -> PyResult<(f64, f64)> {
            let p = self.inner.project(&Vector3::new(x, y, z)).map_err(to_py)?;
            Ok((p.x, p.y))
        }

        fn __repr__(&self) -> String {
            let c = &self.inner;
            format!("Camera(fx={}, fy={}, cx={}, cy={}, width={}, height={})", c.fx, c.fy, c.cx, c.cy, c.width, c.height)
        }
    }

    /// Rigid transform from a translation and a unit quaternion `(qx, qy, qz, qw)`.
    #[pyclass(frozen)]
    struct Transform {
        inner: SE3Transform,
    }

    #[pymethods]
    impl Transform {
        #[new]
        #[pyo3(signature = (translation = (0.0, 0.0, 0.0), quaternion = (0.0, 0.0, 0.0, 1.0)))]
        fn new(translation: (f64, f64, f64), quaternion: (f64, f64, f64, f64)) -> PyResult<Self> {
            let (qx, qy, qz, qw) = quaternion;
            let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
            if !(q.norm() > 0.0) {
                return Err(PyValueError::new_err("quaternion must be non-zero"));
            }
            let t = Vector3::new(translation.0, translation.1, translation.2);
            Ok(Self {
                inner: SE3Transform::from_quaternion(UnitQuaternion::from_quaternion(q), t),
            })
        }

        fn compose(&self, other: &Transform) -> Transform {
            Transform {
                inner: self.inner.compose(&other.inner),
            }
        }

        fn inverse(&self) -> Transform {
            Transform {
                inner: self.inner.inverse(),
            }
        }

        fn apply(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
            let p = self.inner.transform_point(&Vector3::new(x, y, z));
            (p.x, p.y, p.z)
        }

        #[getter]
        fn translation(&self) -> (f64, f64, f64) {
            let t = self.inner.translation();
            (t.x, t.y, t.z)
        }
    }

    /// Location of reference pixel `(u, v)` at inverse depth `rho` in `camera`
    /// after `transform` (reference-camera to target-camera coordinates).
    #[pyfunction]
    fn warp(reference: &Camera, camera: &Camera, transform: &Transform, u: f64, v: f64, rho: f64) -> PyResult<(f64, f64)> {
        let c = RationalWarpCoefficients::new(&Point2::new(u, v), &transform.inner, &camera.inner, &reference.inner);
        let p = c.warp(rho).map_err(to_py)?;
        Ok((p.x, p.y))
    }

    /// `(du/drho, dv/drho)` of [`warp`].
    #[pyfunction]
    fn warp_derivative(
        reference: &Camera,
        camera: &Camera,
        transform: &Transform,
        u: f64,
        v: f64,
        rho: f64,
    ) -> PyResult<(f64, f64)> {
        let c = RationalWarpCoefficients::new(&Point2::new(u, v), &transform.inner, &camera.inner, &reference.inner);
        c.derivative(rho).map_err(to_py)
    }

    #[pyfunction]
    fn chi2(rho_a: f64, var_a: f64, rho_b: f64, var_b: f64) -> PyResult<f64> {
        let a = GaussianInverseDepth::new(rho_a, var_a).map_err(to_py)?;
        let b = GaussianInverseDepth::new(rho_b, var_b).map_err(to_py)?;
        Ok(chi2_statistic(&a, &b))
    }

    /// Fused `(rho, variance)`; raises `ValueError` for incompatible inputs.
    #[pyfunction]
    fn fuse(rho_a: f64, var_a: f64, rho_b: f64, var_b: f64) -> PyResult<(f64, f64)> {
        let a = GaussianInverseDepth::new(rho_a, var_a).map_err(to_py)?;
        let b = GaussianInverseDepth::new(rho_b, var_b).map_err(to_py)?;
        let f = fuse_gaussians(&a, &b).map_err(to_py)?;
        Ok((f.rho, f.sigma2))
    }

    /// Time surface at `t` from time-ordered `(t_us, x, y, polarity)` events,
    /// row-major.
    #[pyfunction]
    #[pyo3(signature = (events, width, height, t, decay_us = 30_000.0))]
    fn render_time_surface(
        events: Vec<(i64, u32, u32, i8)>,
        width: u32,
        height: u32,
        t: i64,
        decay_us: f64,
    ) -> PyResult<Vec<f64>> {
        let mut map = LastSpikeMap::new(width, height);
        for (te, x, y, p) in events {
            map.consume(&Event::new(te, x, y, p)).map_err(to_py)?;
        }
        Ok(map.render(t, decay_us).map_err(to_py)?.values().to_vec())
    }

    /// Generates the three-plane scene into `out_dir`, reconstructs it and
    /// returns the run summary.
    #[pyfunction]
    #[pyo3(signature = (out_dir, seed = 1, width = 240, height = 180, focal = 200.0, fusion_views = 8, threads = 0))]
    fn run_synth(
        py: Python<'_>,
        out_dir: PathBuf,
        seed: u64,
        width: u32,
        height: u32,
        focal: f64,
        fusion_views: usize,
        threads: usize,
    ) -> PyResult<BTreeMap<String, String>> {
        let scene_cfg = ThreePlaneConfig {
            width,
            height,
            focal,
            seed,
            ..ThreePlaneConfig::default()
        };
        let config = PipelineConfig {
            fusion_views,
            threads,
            order: OrderPolicy::Reject,
            ..PipelineConfig::default()
        };
        let model = EventModel {
            seed,
            ..EventModel::default()
        };
        py.detach(|| {
            config.validate()?;
            let scene = scene_cfg.scene()?;
            let data = generate(&scene, &model)?;
            let inputs = write_dataset(&data, &out_dir.join("data"))?;
            let gt = |pose: &SE3Transform| scene.ground_truth_map(pose);
            run_pipeline(&inputs, &config, &out_dir, Some(&gt))
        })
        .map(|report| to_dict(&report.summary))
        .map_err(to_py)
    }

    /// Metrics of a fused depth CSV against a ground-truth CSV.
    #[pyfunction]
    fn evaluate(fused_csv: PathBuf, ground_truth_csv: PathBuf) -> PyResult<BTreeMap<String, String>> {
        let report = evaluate_files(&fused_csv, &ground_truth_csv).map_err(to_py)?;
        Ok(to_dict(&report_summary(&report)))
    }
}
