//! Python bindings: synthetic data, training, scoring, EER and fusion.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use xmalign_core::data::{read_dataset, write_dataset};
use xmalign_core::eval::report_from_scores;
use xmalign_core::gradcheck::run_gradcheck;
use xmalign_core::{
    Checkpoint, Dataset as CoreDataset, Error, FileError, FlatConfig, Modality, ScoreFile as CoreScoreFile,
    SyntheticConfig, TrainingConfig as CoreTrainingConfig,
};

fn core_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(m) => PyArithmeticError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn file_err(e: FileError) -> PyErr {
    match e {
        FileError::Content(e) => core_err(e),
        other => PyIOError::new_err(other.to_string()),
    }
}

/// Applies `key=value` overrides (values rendered with `str()`) on top of
/// `text`, then validates.
fn build_config<C: FlatConfig>(text: Option<&str>, overrides: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<C> {
    let mut cfg = match text {
        Some(t) => C::from_text(t).map_err(core_err)?,
        None => C::default(),
    };
    for (k, v) in overrides.unwrap_or_default() {
        let value = if let Ok(items) = v.extract::<Vec<usize>>() {
            items.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        } else if let Ok(b) = v.extract::<bool>() {
            b.to_string()
        } else {
            v.str()?.to_string()
        };
        cfg.set(&k, &value).map_err(core_err)?;
    }
    cfg.validate().map_err(core_err)?;
    Ok(cfg)
}

type SampleTuple = (usize, String, String, Vec<f64>, Vec<f64>);

/// Synthetic paired face/voice dataset with its verification trials.
#[pyclass(module = "xmalign", frozen)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Generates a dataset; `config` is `key = value` text, keyword
    /// arguments override individual keys.
    #[staticmethod]
    #[pyo3(signature = (config=None, **overrides))]
    fn generate(config: Option<&str>, overrides: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let cfg: SyntheticConfig = build_config(config, overrides)?;
        let inner = xmalign_core::generate_dataset(&cfg).map_err(core_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_dataset(&path).map_err(file_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_dataset(&path, &self.inner).map_err(file_err)
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.to_text()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn num_train_samples(&self) -> usize {
        self.inner.train_samples().count()
    }

    #[getter]
    fn num_eval_samples(&self) -> usize {
        self.inner.eval_samples().count()
    }

    /// `(face_id, voice_id, is_target, condition)` tuples in canonical order.
    fn trials(&self) -> Vec<(usize, usize, bool, String)> {
        self.inner
            .trials
            .trials
            .iter()
            .map(|t| (t.face_id, t.voice_id, t.is_target, t.condition.to_string()))
            .collect()
    }

    fn trial_list_text(&self) -> String {
        self.inner.trials.to_text()
    }

    /// `(identity, split, language, face, voice)` for sample `id`.
    fn sample(&self, id: usize) -> PyResult<SampleTuple> {
        let s = self.inner.sample(id).map_err(core_err)?;
        Ok((
            s.identity,
            format!("{:?}", s.split).to_lowercase(),
            format!("{:?}", s.language),
            s.face.clone(),
            s.voice.clone(),
        ))
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(samples={}, classes={}, trials={})",
            self.inner.samples.len(),
            self.inner.num_classes(),
            self.inner.trials.len()
        )
    }
}

#[pyclass(module = "xmalign", frozen)]
struct TrainingConfig {
    inner: CoreTrainingConfig,
}

#[pymethods]
impl TrainingConfig {
    /// `TrainingConfig(text=None, **overrides)`; use the key `lambda` via
    /// `**{"lambda": 0.5}` or the alias `lam`.
    #[new]
    #[pyo3(signature = (text=None, **overrides))]
    fn new(text: Option<&str>, overrides: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let overrides = overrides.map(|m| {
            m.into_iter()
                .map(|(k, v)| (if k == "lam" { "lambda".to_string() } else { k }, v))
                .collect()
        });
        Ok(Self {
            inner: build_config(text, overrides)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn hash(&self) -> u64 {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!("TrainingConfig({:?})", self.inner.to_text())
    }
}

/// A trained (or loaded) model checkpoint.
#[pyclass(module = "xmalign", frozen)]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(file_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(file_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.epoch
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.model.embedding_dim()
    }

    #[getter]
    fn head_mode(&self) -> String {
        self.inner.model.head.mode().to_string()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.model.num_params()
    }

    fn embed_face(&self, features: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.model.encoder(Modality::Face).embed(&features).map_err(core_err)
    }

    fn embed_voice(&self, features: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.model.encoder(Modality::Voice).embed(&features).map_err(core_err)
    }
}

/// Per-trial verification scores of one system.
#[pyclass(module = "xmalign", frozen, from_py_object)]
#[derive(Clone)]
struct ScoreFile {
    inner: CoreScoreFile,
}

#[pymethods]
impl ScoreFile {
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreScoreFile::from_text(text).map_err(core_err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn system_id(&self) -> String {
        self.inner.system_id.clone()
    }

    #[getter]
    fn scores(&self) -> Vec<f64> {
        self.inner.rows.iter().map(|r| r.score).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<bool> {
        self.inner.rows.iter().map(|r| r.is_target).collect()
    }

    #[getter]
    fn conditions(&self) -> Vec<String> {
        self.inner.rows.iter().map(|r| r.condition.to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }
}

/// Trains with `config` (default recipe if omitted). Returns the averaged
/// model and the per-epoch log as a list of dicts.
#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn train(
    py: Python<'_>,
    dataset: &Dataset,
    config: Option<&TrainingConfig>,
) -> PyResult<(Model, Vec<BTreeMap<String, f64>>)> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let data = &dataset.inner;
    let outcome = py
        .detach(|| xmalign_core::run_training(&cfg, data, None))
        .map_err(core_err)?;
    let log = outcome
        .log
        .iter()
        .map(|e| {
            BTreeMap::from([
                ("epoch".to_string(), e.epoch as f64),
                ("lr".to_string(), e.lr),
                ("l_face".to_string(), e.loss.l_face),
                ("l_voice".to_string(), e.loss.l_voice),
                ("l_align".to_string(), e.loss.l_align),
                ("total".to_string(), e.loss.total),
            ])
        })
        .collect();
    Ok((Model { inner: outcome.checkpoint() }, log))
}

/// Cosine scores for every trial of `dataset`.
#[pyfunction]
#[pyo3(signature = (model, dataset, system_id="system"))]
fn score(model: &Model, dataset: &Dataset, system_id: &str) -> PyResult<ScoreFile> {
    let inner = xmalign_core::score_trials(&model.inner.model, &dataset.inner, &dataset.inner.trials, system_id)
        .map_err(core_err)?;
    Ok(ScoreFile { inner })
}

/// Equal error rate in percent.
#[pyfunction]
fn compute_eer(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pairs: Vec<(f64, bool)> = scores.into_iter().zip(labels).collect();
    xmalign_core::compute_eer(&pairs).map_err(core_err)
}

#[pyfunction]
fn overall_score(eers: Vec<f64>) -> PyResult<f64> {
    xmalign_core::overall_score(&eers).map_err(core_err)
}

/// Z-normalized mean of two or more systems scored on the same trials.
#[pyfunction]
#[pyo3(signature = (systems, system_id="fusion"))]
fn fuse(systems: Vec<ScoreFile>, system_id: &str) -> PyResult<ScoreFile> {
    let inner: Vec<CoreScoreFile> = systems.into_iter().map(|s| s.inner).collect();
    Ok(ScoreFile {
        inner: xmalign_core::fuse_scores(&inner, system_id).map_err(core_err)?,
    })
}

/// `{"heard": eer, "unheard": eer, "overall": mean}` for a score file.
#[pyfunction]
fn report(scores: &ScoreFile) -> PyResult<BTreeMap<String, f64>> {
    let r = report_from_scores(&scores.inner).map_err(core_err)?;
    let mut out: BTreeMap<String, f64> = r
        .conditions
        .iter()
        .map(|c| (c.condition.to_string(), c.eer))
        .collect();
    out.insert("overall".into(), r.overall);
    Ok(out)
}

#[pyfunction]
fn report_text(scores: &ScoreFile) -> PyResult<String> {
    Ok(report_from_scores(&scores.inner).map_err(core_err)?.to_text())
}

/// Largest analytic vs finite-difference relative gradient error over
/// `trials` random configurations.
#[pyfunction]
#[pyo3(signature = (seed=0, trials=100))]
fn gradcheck(py: Python<'_>, seed: u64, trials: usize) -> PyResult<f64> {
    let summary = py.detach(|| run_gradcheck(seed, trials, None)).map_err(core_err)?;
    Ok(summary.max_rel_error())
}

#[pymodule]
fn xmalign(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<TrainingConfig>()?;
    m.add_class::<Model>()?;
    m.add_class::<ScoreFile>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(overall_score, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(report_text, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
