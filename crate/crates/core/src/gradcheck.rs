//! Randomized finite-difference verification of the full training objective.

use crate::error::{Error, Result};
use crate::model::{Architecture, HeadMode, ModelState};
use crate::numerics::{finite_diff_grad, Matrix, RandomSource};
use crate::objective::{total_loss, total_loss_value, AlignMetric, PairedBatch};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of [`relative_error`]; below this magnitude gradients
/// are compared on absolute error `TOLERANCE * FLOOR`.
pub const FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Deliberate gradient corruption, used to confirm the checker notices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradFault {
    HalveHeadGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseSpec {
    pub head_mode: HeadMode,
    pub align_metric: AlignMetric,
    pub lambda: f64,
    pub batch_size: usize,
    pub arch: Architecture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub case: usize,
    pub spec: CaseSpec,
    pub params: usize,
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst coordinate.
    pub worst_tensor: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSummary {
    pub cases: Vec<CaseResult>,
}

impl GradcheckSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < TOLERANCE)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| c.max_rel_error >= TOLERANCE)
    }
}

fn random_spec(rng: &mut RandomSource) -> CaseSpec {
    let head_mode = if rng.below(2) == 0 {
        HeadMode::Shared
    } else {
        HeadMode::Separate
    };
    let align_metric = [AlignMetric::Mse, AlignMetric::Cosine, AlignMetric::None][rng.below(3)];
    let hidden = (0..rng.below(3)).map(|_| 2 + rng.below(5)).collect();
    CaseSpec {
        head_mode,
        align_metric,
        lambda: rng.uniform_in(0.0, 2.0),
        batch_size: 1 + rng.below(6),
        arch: Architecture {
            face_dim: 2 + rng.below(5),
            voice_dim: 2 + rng.below(5),
            hidden,
            embedding_dim: 2 + rng.below(4),
            num_classes: 2 + rng.below(4),
            head_mode,
        },
    }
}

/// Checks one random configuration drawn from `rng`.
pub fn check_case(case: usize, rng: &RandomSource, fault: Option<GradFault>) -> Result<CaseResult> {
    let spec = random_spec(&mut rng.split("spec"));
    let model = ModelState::init(&spec.arch, &rng.split("model"))?;
    let mut data = rng.split("batch");
    let n = spec.batch_size;
    let labels = (0..n).map(|_| data.below(spec.arch.num_classes)).collect();
    let batch = PairedBatch::new(
        Matrix::gaussian(n, spec.arch.face_dim, 1.0, &mut data),
        Matrix::gaussian(n, spec.arch.voice_dim, 1.0, &mut data),
        labels,
    )?;

    let (_, mut grads) = total_loss(&model, &batch, spec.lambda, spec.align_metric)?;
    if fault == Some(GradFault::HalveHeadGradient) {
        for (name, g) in grads.tensors_mut() {
            if name.starts_with("head.") {
                g.scale(0.5);
            }
        }
    }

    let mut probe = model.clone();
    let mut failure = None;
    let numeric = finite_diff_grad(
        |p| {
            probe.assign_flat(p).expect("flat layout");
            match total_loss_value(&probe, &batch, spec.lambda, spec.align_metric) {
                Ok(l) => l.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &model.flatten(),
        STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let numeric = numeric?;

    let mut worst = (0.0, String::new());
    let mut offset = 0;
    for (name, g) in grads.tensors() {
        for (i, a) in g.data().iter().enumerate() {
            let err = relative_error(*a, numeric[offset + i]);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, name.clone());
            }
        }
        offset += g.data().len();
    }
    if offset != numeric.len() {
        return Err(Error::shape("gradient layout does not match parameters"));
    }
    Ok(CaseResult {
        case,
        params: model.num_params(),
        spec,
        max_rel_error: worst.0,
        worst_tensor: worst.1,
    })
}

/// Runs `trials` random configurations derived from `seed`.
pub fn run_gradcheck(seed: u64, trials: usize, fault: Option<GradFault>) -> Result<GradcheckSummary> {
    if trials == 0 {
        return Err(Error::validation("gradcheck needs at least one trial"));
    }
    let root = RandomSource::new(seed).split("gradcheck");
    let cases = (0..trials)
        .map(|k| check_case(k, &root.split(&format!("case{k}")), fault))
        .collect::<Result<_>>()?;
    Ok(GradcheckSummary { cases })
}
