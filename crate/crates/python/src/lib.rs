//! Python bindings: configs, models, inference, cost and coefficient utilities.

use std::path::PathBuf;

use basisnet::cost::{self, model_cost};
use basisnet::disturbance::{evaluate_disturbed, Disturbance, DisturbTarget, DisturbanceKind};
use basisnet::harness::checkpoint::{load_checkpoint, save_checkpoint};
use basisnet::harness::config::ExperimentConfig;
use basisnet::harness::data::{Splits, SyntheticSpec};
use basisnet::synthesis::{self, CoefficientActivation, CoefficientMatrix, CoefficientMode};
use basisnet::training::{self, TrainState};
use basisnet::Tensor;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(basisnet_py, BasisNetError, PyException);

fn err(e: basisnet::Error) -> PyErr {
    BasisNetError::new_err(e.to_string())
}

/// Serializable value → plain Python objects (dicts, lists, numbers).
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| BasisNetError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<CoefficientMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(BasisNetError::new_err("coefficient rows must have equal length"));
    }
    let n = rows.len();
    CoefficientMatrix::new(n, cols, rows.concat(), CoefficientMode::PerLayer).map_err(err)
}

fn rows_of(a: &CoefficientMatrix) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|k| a.row(k).to_vec()).collect()
}

/// `p·c_lm + (1 − p)·c_total`.
#[pyfunction]
fn expected_cost(p_skip: f64, c_lm: f64, c_total: f64) -> PyResult<f64> {
    cost::expected_cost(p_skip, c_lm, c_total).map_err(err)
}

/// Row-wise softmax or elementwise sigmoid of raw coefficients.
#[pyfunction]
#[pyo3(signature = (raw, activation = "softmax"))]
fn activate(raw: Vec<Vec<f64>>, activation: &str) -> PyResult<Vec<Vec<f64>>> {
    let act: CoefficientActivation = serde_json::from_value(serde_json::Value::String(activation.into()))
        .map_err(|_| BasisNetError::new_err(format!("unknown activation '{activation}'")))?;
    let m = matrix(raw)?;
    let t = Tensor::new(vec![m.rows(), m.cols()], m.values().to_vec()).map_err(err)?;
    Ok(rows_of(&synthesis::activate(&t, act).map_err(err)?))
}

/// `(1 − ε)·α + ε/N`.
#[pyfunction]
fn blend_epsilon(alpha: Vec<Vec<f64>>, epsilon: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows_of(&synthesis::blend_epsilon(&matrix(alpha)?, epsilon).map_err(err)?))
}

/// Zeroes the dropped bases (`True` = dropped), optionally renormalizing rows.
#[pyfunction]
#[pyo3(signature = (alpha, drop_mask, renormalize = true))]
fn apply_bmd(alpha: Vec<Vec<f64>>, drop_mask: Vec<bool>, renormalize: bool) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows_of(&synthesis::apply_bmd(&matrix(alpha)?, &drop_mask, renormalize).map_err(err)?))
}

/// Row-wise argmax one-hot.
#[pyfunction]
fn to_one_hot(alpha: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows_of(&synthesis::to_one_hot(&matrix(alpha)?)))
}

/// Seeded coarse/fine synthetic images:
/// `{"shape": [c, h, w], "train": (images, labels), "eval": (images, labels)}`.
#[pyfunction]
#[pyo3(signature = (seed = 0, train_size = 1200, eval_size = 600, image_size = 12, noise = 0.1))]
fn synthetic_dataset(
    py: Python<'_>,
    seed: u64,
    train_size: usize,
    eval_size: usize,
    image_size: usize,
    noise: f64,
) -> PyResult<Py<PyAny>> {
    let spec = SyntheticSpec {
        seed,
        train_size,
        eval_size,
        image_size,
        noise,
        ..SyntheticSpec::default()
    };
    let s = spec.generate().map_err(err)?;
    let split = |d: &basisnet::harness::data::Dataset| {
        let images: Vec<Vec<f64>> = (0..d.len()).map(|i| d.pixels(i).to_vec()).collect();
        (images, d.labels().to_vec())
    };
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("shape", s.train.shape().to_vec())?;
    dict.set_item("train", split(&s.train))?;
    dict.set_item("eval", split(&s.eval))?;
    Ok(dict.into_any().unbind())
}

/// A validated experiment configuration.
#[pyclass(module = "basisnet_py", frozen)]
struct Config {
    inner: ExperimentConfig,
}

#[pymethods]
impl Config {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Config {
            inner: ExperimentConfig::from_json(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Config {
            inner: ExperimentConfig::from_file(&path).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn epsilon_at(&self, step: u64) -> f64 {
        training::epsilon_at(step, &self.inner.schedule)
    }

    /// Itemized parameter and MAdds counts.
    fn cost<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let model = self.inner.build_model().map_err(err)?;
        to_py(py, &model_cost(&model).map_err(err)?)
    }

    /// Freshly initialized model.
    fn build(&self) -> PyResult<Model> {
        Ok(Model {
            state: TrainState::new(self.inner.build_model().map_err(err)?),
            config: self.inner.clone(),
            data: None,
        })
    }

    /// Trains from scratch for the configured schedule (no distillation).
    fn train(&self, py: Python<'_>) -> PyResult<Model> {
        let cfg = self.inner.clone();
        py.detach(move || {
            let data = cfg.dataset.load()?;
            let mut state = TrainState::new(cfg.build_model()?);
            training::train(
                &mut state,
                &data.train,
                &data.eval,
                None,
                &cfg.schedule,
                &cfg.loss,
                cfg.eval.default_threshold,
                |_| {},
            )?;
            Ok(Model {
                state,
                config: cfg,
                data: Some(data),
            })
        })
        .map_err(err)
    }
}

/// A BasisNet with its configuration; the dataset is loaded on first use.
#[pyclass(module = "basisnet_py")]
struct Model {
    state: TrainState,
    config: ExperimentConfig,
    data: Option<Splits>,
}

impl Model {
    fn eval_data(&mut self) -> PyResult<&basisnet::harness::data::Dataset> {
        if self.data.is_none() {
            self.data = Some(self.config.dataset.load().map_err(err)?);
        }
        Ok(&self.data.as_ref().expect("loaded").eval)
    }

    fn input(&self, pixels: Vec<f64>) -> PyResult<Tensor> {
        let [c, h, w] = self.state.model.bank.spec().input;
        Tensor::new(vec![1, c, h, w], pixels).map_err(err)
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (state, config) = load_checkpoint(&path).map_err(err)?;
        Ok(Model {
            state,
            config,
            data: None,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.state, &self.config, &path).map_err(err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    #[getter]
    fn num_bases(&self) -> usize {
        self.state.model.bank.num_bases()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.state.model.num_classes()
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.state.model.bank.spec().input.to_vec()
    }

    fn config(&self) -> Config {
        Config {
            inner: self.config.clone(),
        }
    }

    /// Two-stage inference of one flattened `C·H·W` image.
    #[pyo3(signature = (pixels, threshold = None))]
    fn infer<'py>(&self, py: Python<'py>, pixels: Vec<f64>, threshold: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
        let t = threshold.unwrap_or(self.config.eval.default_threshold);
        let r = self.state.model.infer(&self.input(pixels)?, t).map_err(err)?;
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item("prediction", r.prediction())?;
        dict.set_item("terminated", r.terminated)?;
        dict.set_item("confidence", r.confidence)?;
        dict.set_item("initial_logits", &r.initial_logits)?;
        dict.set_item("final_logits", &r.final_logits)?;
        dict.set_item("coefficients", r.coefficients.as_ref().map(rows_of))?;
        dict.set_item("lm_madds", r.lm_madds)?;
        dict.set_item("synthesis_madds", r.synthesis_madds)?;
        dict.set_item("stage2_madds", r.stage2_madds)?;
        dict.set_item("madds", r.madds_spent)?;
        Ok(dict.into_any())
    }

    /// Inference-time coefficients (one row per non-shared layer).
    fn coefficients(&self, pixels: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows_of(&self.state.model.coefficients(&self.input(pixels)?).map_err(err)?))
    }

    fn cost<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &model_cost(&self.state.model).map_err(err)?)
    }

    /// Accuracy of both stages and skip rate on the evaluation split.
    #[pyo3(signature = (threshold = None))]
    fn evaluate<'py>(&mut self, py: Python<'py>, threshold: Option<f64>) -> PyResult<Bound<'py, PyAny>> {
        let t = threshold.unwrap_or(self.config.eval.default_threshold);
        self.eval_data()?;
        let (model, data) = (&self.state.model, &self.data.as_ref().expect("loaded").eval);
        let e = py.detach(|| training::evaluate(model, data, t)).map_err(err)?;
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item("acc_lm", e.acc_lm)?;
        dict.set_item("acc_full", e.acc_full)?;
        dict.set_item("skip_rate", e.skip_rate)?;
        Ok(dict.into_any())
    }

    fn sweep<'py>(&mut self, py: Python<'py>, thresholds: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        self.eval_data()?;
        let (model, data) = (&self.state.model, &self.data.as_ref().expect("loaded").eval);
        let points = py.detach(|| cost::sweep(model, data, &thresholds)).map_err(err)?;
        to_py(py, &points)
    }

    /// Evaluation accuracy under a coefficient disturbance
    /// (`correct`, `top1`, `mean`, `uniform` or `shuffled`).
    #[pyo3(signature = (kind, seed = 0, layer = None))]
    fn disturb(&mut self, py: Python<'_>, kind: &str, seed: u64, layer: Option<usize>) -> PyResult<f64> {
        let kind = DisturbanceKind::parse(kind, seed).map_err(err)?;
        let target = match layer {
            None => DisturbTarget::AllLayers,
            Some(layer) => DisturbTarget::SingleLayer { layer },
        };
        self.eval_data()?;
        let (model, data) = (&self.state.model, &self.data.as_ref().expect("loaded").eval);
        py.detach(|| evaluate_disturbed(model, data, Disturbance { kind, target })).map_err(err)
    }
}

#[pymodule]
fn basisnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BasisNetError", m.py().get_type::<BasisNetError>())?;
    m.add_function(wrap_pyfunction!(expected_cost, m)?)?;
    m.add_function(wrap_pyfunction!(activate, m)?)?;
    m.add_function(wrap_pyfunction!(blend_epsilon, m)?)?;
    m.add_function(wrap_pyfunction!(apply_bmd, m)?)?;
    m.add_function(wrap_pyfunction!(to_one_hot, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_class::<Config>()?;
    m.add_class::<Model>()?;
    Ok(())
}
