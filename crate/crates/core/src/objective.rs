//! Identity cross-entropy, embedding alignment losses and the combined
//! training objective with its gradients.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{ClassifierHead, ModelState, Modality};
use crate::numerics::{dot, log_softmax, Matrix};

/// Distance used by the explicit alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignMetric {
    Mse,
    Cosine,
    /// No alignment term; `l_align` is reported as 0.
    None,
}

impl AlignMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignMetric::Mse => "mse",
            AlignMetric::Cosine => "cosine",
            AlignMetric::None => "none",
        }
    }
}

impl fmt::Display for AlignMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AlignMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(AlignMetric::Mse),
            "cosine" => Ok(AlignMetric::Cosine),
            "none" => Ok(AlignMetric::None),
            other => Err(Error::validation(format!(
                "align metric must be mse, cosine or none, got {other:?}"
            ))),
        }
    }
}

/// Alignment loss value with gradients for both embedding batches.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignLoss {
    pub loss: f64,
    pub grad_face: Matrix,
    pub grad_voice: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub grad_logits: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_face: f64,
    pub l_voice: f64,
    pub l_align: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_face: f64, l_voice: f64, l_align: f64, lambda: f64) -> Self {
        Self {
            l_face,
            l_voice,
            l_align,
            lambda,
            total: l_face + l_voice + lambda * l_align,
        }
    }
}

/// Co-indexed face and voice inputs: row `i` of both belongs to identity
/// `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub face: Matrix,
    pub voice: Matrix,
    pub labels: Vec<usize>,
}

impl PairedBatch {
    pub fn new(face: Matrix, voice: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::validation("batch must hold at least one pair"));
        }
        if face.rows() != labels.len() || voice.rows() != labels.len() {
            return Err(Error::shape(format!(
                "batch has {} labels but {} face rows and {} voice rows",
                labels.len(),
                face.rows(),
                voice.rows()
            )));
        }
        Ok(Self {
            face,
            voice,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_pair(face: &Matrix, voice: &Matrix) -> Result<usize> {
    if face.shape() != voice.shape() {
        return Err(Error::shape(format!(
            "face embeddings {}x{} vs voice embeddings {}x{}",
            face.rows(),
            face.cols(),
            voice.rows(),
            voice.cols()
        )));
    }
    if face.rows() == 0 {
        return Err(Error::validation("empty batch"));
    }
    Ok(face.rows())
}

/// `(1/N) Σᵢ ‖e_f⁽ⁱ⁾ − e_v⁽ⁱ⁾‖²`.
pub fn align_loss_mse(face: &Matrix, voice: &Matrix) -> Result<AlignLoss> {
    let n = check_pair(face, voice)? as f64;
    let mut grad_face = Matrix::zeros(face.rows(), face.cols());
    let mut loss = 0.0;
    for ((g, f), v) in grad_face
        .data_mut()
        .iter_mut()
        .zip(face.data())
        .zip(voice.data())
    {
        let d = f - v;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    let mut grad_voice = grad_face.clone();
    grad_voice.scale(-1.0);
    Ok(AlignLoss {
        loss: loss / n,
        grad_face,
        grad_voice,
    })
}

/// `(1/N) Σᵢ (1 − cos(e_f⁽ⁱ⁾, e_v⁽ⁱ⁾))`.
pub fn align_loss_cosine(face: &Matrix, voice: &Matrix) -> Result<AlignLoss> {
    let rows = check_pair(face, voice)?;
    let n = rows as f64;
    let mut grad_face = Matrix::zeros(face.rows(), face.cols());
    let mut grad_voice = Matrix::zeros(face.rows(), face.cols());
    let mut loss = 0.0;
    for i in 0..rows {
        let (a, b) = (face.row(i), voice.row(i));
        let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::numeric(format!(
                "zero-norm embedding in row {i}; cosine is undefined"
            )));
        }
        let cos = dot(a, b) / (na * nb);
        loss += 1.0 - cos;
        // ∂cos/∂a = b/(|a||b|) − cos·a/|a|²
        for (((ga, gb), x), y) in grad_face
            .row_mut(i)
            .iter_mut()
            .zip(grad_voice.row_mut(i).iter_mut())
            .zip(a)
            .zip(b)
        {
            *ga = -(y / (na * nb) - cos * x / (na * na)) / n;
            *gb = -(x / (na * nb) - cos * y / (nb * nb)) / n;
        }
    }
    Ok(AlignLoss {
        loss: loss / n,
        grad_face,
        grad_voice,
    })
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits`; gradient is `(softmax − one_hot) / N`.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<CrossEntropy> {
    if labels.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let classes = logits.cols();
    let n = labels.len() as f64;
    let mut grad_logits = Matrix::zeros(logits.rows(), classes);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::validation(format!(
                "label {y} in row {i} outside [0, {classes})"
            )));
        }
        let logp = log_softmax(logits.row(i))?;
        loss -= logp[y];
        for (j, (g, lp)) in grad_logits.row_mut(i).iter_mut().zip(&logp).enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            *g = (lp.exp() - target) / n;
        }
    }
    Ok(CrossEntropy {
        loss: loss / n,
        grad_logits,
    })
}

fn alignment(metric: AlignMetric, face: &Matrix, voice: &Matrix) -> Result<Option<AlignLoss>> {
    match metric {
        AlignMetric::Mse => align_loss_mse(face, voice).map(Some),
        AlignMetric::Cosine => align_loss_cosine(face, voice).map(Some),
        AlignMetric::None => {
            check_pair(face, voice)?;
            Ok(None)
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::validation(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    Ok(())
}

/// Objective value only.
pub fn total_loss_value(
    model: &ModelState,
    batch: &PairedBatch,
    lambda: f64,
    metric: AlignMetric,
) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let (e_f, _) = model.face_encoder.forward(&batch.face)?;
    let (e_v, _) = model.voice_encoder.forward(&batch.voice)?;
    let l_face = ce_loss(&model.head.batch_logits(&e_f, Modality::Face)?, &batch.labels)?.loss;
    let l_voice = ce_loss(&model.head.batch_logits(&e_v, Modality::Voice)?, &batch.labels)?.loss;
    let l_align = alignment(metric, &e_f, &e_v)?.map_or(0.0, |a| a.loss);
    Ok(LossBreakdown::new(l_face, l_voice, l_align, lambda))
}

/// `L_face + L_voice + λ·L_align` and its gradient with respect to every
/// model parameter, laid out as a [`ModelState`].
pub fn total_loss(
    model: &ModelState,
    batch: &PairedBatch,
    lambda: f64,
    metric: AlignMetric,
) -> Result<(LossBreakdown, ModelState)> {
    check_lambda(lambda)?;
    let (e_f, cache_f) = model.face_encoder.forward(&batch.face)?;
    let (e_v, cache_v) = model.voice_encoder.forward(&batch.voice)?;

    let ce_f = ce_loss(&model.head.batch_logits(&e_f, Modality::Face)?, &batch.labels)?;
    let ce_v = ce_loss(&model.head.batch_logits(&e_v, Modality::Voice)?, &batch.labels)?;
    let align = alignment(metric, &e_f, &e_v)?;

    // dL/dE = G W for each modality's logits G = E Wᵀ
    let mut grad_e_f = ce_f.grad_logits.matmul(model.head.weight(Modality::Face))?;
    let mut grad_e_v = ce_v.grad_logits.matmul(model.head.weight(Modality::Voice))?;
    if let Some(a) = &align {
        grad_e_f.add_scaled(&a.grad_face, lambda)?;
        grad_e_v.add_scaled(&a.grad_voice, lambda)?;
    }

    let (face_grads, _) = model.face_encoder.backward(&cache_f, &grad_e_f)?;
    let (voice_grads, _) = model.voice_encoder.backward(&cache_v, &grad_e_v)?;

    // dL/dW = Gᵀ E; a shared W accumulates both modalities.
    let dw_f = ce_f.grad_logits.transposed_matmul(&e_f)?;
    let dw_v = ce_v.grad_logits.transposed_matmul(&e_v)?;
    let head = match model.head {
        ClassifierHead::Shared { .. } => {
            let mut weight = dw_f;
            weight.add_scaled(&dw_v, 1.0)?;
            ClassifierHead::Shared { weight }
        }
        ClassifierHead::Separate { .. } => ClassifierHead::Separate {
            face: dw_f,
            voice: dw_v,
        },
    };

    let breakdown = LossBreakdown::new(
        ce_f.loss,
        ce_v.loss,
        align.map_or(0.0, |a| a.loss),
        lambda,
    );
    let grads = ModelState {
        face_encoder: face_grads,
        voice_encoder: voice_grads,
        head,
    };
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, HeadMode};
    use crate::numerics::{finite_diff_grad, RandomSource};
    use proptest::prelude::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
    }

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn mse_examples() {
        let e = m(&[vec![0.3, -1.0], vec![2.0, 0.5]]);
        let out = align_loss_mse(&e, &e).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_face.data().iter().all(|v| *v == 0.0));

        let out = align_loss_mse(&m(&[vec![1.0, 0.0]]), &m(&[vec![0.0, 1.0]])).unwrap();
        assert_eq!(out.loss, 2.0);
        assert_eq!(out.grad_face.data(), &[2.0, -2.0]);
        assert_eq!(out.grad_voice.data(), &[-2.0, 2.0]);

        assert!(matches!(
            align_loss_mse(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            align_loss_mse(&Matrix::zeros(0, 3), &Matrix::zeros(0, 3)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        let v = m(&[vec![1.0, 2.0, -1.0], vec![0.5, 0.5, 3.0]]);
        let mut f = v.clone();
        f.row_mut(0).iter_mut().for_each(|x| *x *= 3.0);
        f.row_mut(1).iter_mut().for_each(|x| *x *= 0.25);
        assert!(align_loss_cosine(&f, &v).unwrap().loss.abs() < 1e-15);

        let out = align_loss_cosine(&m(&[vec![1.0, 0.0]]), &m(&[vec![0.0, 1.0]])).unwrap();
        assert_eq!(out.loss, 1.0);

        assert!(matches!(
            align_loss_cosine(&m(&[vec![0.0, 0.0]]), &m(&[vec![0.0, 1.0]])),
            Err(Error::Numeric(_))
        ));
    }

    fn check_align_grads(loss: fn(&Matrix, &Matrix) -> Result<AlignLoss>, seed: u64) {
        let mut rng = RandomSource::new(seed);
        for _ in 0..20 {
            let f = Matrix::gaussian(4, 3, 1.0, &mut rng);
            let v = Matrix::gaussian(4, 3, 1.0, &mut rng);
            let out = loss(&f, &v).unwrap();
            let nf = finite_diff_grad(
                |x| loss(&Matrix::new(4, 3, x.to_vec()).unwrap(), &v).unwrap().loss,
                f.data(),
                1e-5,
            )
            .unwrap();
            let nv = finite_diff_grad(
                |x| loss(&f, &Matrix::new(4, 3, x.to_vec()).unwrap()).unwrap().loss,
                v.data(),
                1e-5,
            )
            .unwrap();
            for (a, n) in out.grad_face.data().iter().zip(&nf) {
                assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
            }
            for (a, n) in out.grad_voice.data().iter().zip(&nv) {
                assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn mse_grads_match_finite_differences() {
        check_align_grads(align_loss_mse, 1);
    }

    #[test]
    fn cosine_grads_match_finite_differences() {
        check_align_grads(align_loss_cosine, 2);
    }

    #[test]
    fn ce_examples() {
        for c in [2usize, 5, 17] {
            let out = ce_loss(&Matrix::zeros(3, c), &[0, 1, c - 1]).unwrap();
            assert!((out.loss - (c as f64).ln()).abs() < 1e-12);
        }
        let out = ce_loss(&m(&[vec![1.0, 0.0]]), &[0]).unwrap();
        let e = std::f64::consts::E;
        assert!((out.loss - -(e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((out.loss - 0.3133).abs() < 1e-4);

        let out = ce_loss(&m(&[vec![1000.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!(out.loss.is_finite() && out.loss.abs() < 1e-12);

        assert!(matches!(
            ce_loss(&Matrix::zeros(1, 2), &[2]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(ce_loss(&Matrix::zeros(0, 2), &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn ce_grad_matches_finite_differences() {
        let mut rng = RandomSource::new(3);
        let logits = Matrix::gaussian(4, 5, 2.0, &mut rng);
        let labels = [0, 4, 2, 2];
        let out = ce_loss(&logits, &labels).unwrap();
        let num = finite_diff_grad(
            |x| ce_loss(&Matrix::new(4, 5, x.to_vec()).unwrap(), &labels).unwrap().loss,
            logits.data(),
            1e-5,
        )
        .unwrap();
        for (a, n) in out.grad_logits.data().iter().zip(&num) {
            assert!(rel_err(*a, *n) < 1e-4);
        }
    }

    fn arch(mode: HeadMode) -> Architecture {
        Architecture {
            face_dim: 5,
            voice_dim: 4,
            hidden: vec![6, 5],
            embedding_dim: 3,
            num_classes: 4,
            head_mode: mode,
        }
    }

    fn random_batch(rng: &mut RandomSource, n: usize) -> PairedBatch {
        let labels = (0..n).map(|_| rng.below(4)).collect();
        PairedBatch::new(
            Matrix::gaussian(n, 5, 1.0, rng),
            Matrix::gaussian(n, 4, 1.0, rng),
            labels,
        )
        .unwrap()
    }

    #[test]
    fn lambda_zero_ignores_alignment() {
        let rng = RandomSource::new(4);
        let model = ModelState::init(&arch(HeadMode::Shared), &rng).unwrap();
        let batch = random_batch(&mut rng.split("batch"), 4);
        let (lb, g0) = total_loss(&model, &batch, 0.0, AlignMetric::Mse).unwrap();
        assert_eq!(lb.total, lb.l_face + lb.l_voice);
        let (_, g_none) = total_loss(&model, &batch, 0.0, AlignMetric::None).unwrap();
        assert_eq!(g0, g_none);
    }

    #[test]
    fn total_is_sum_of_independent_terms() {
        let rng = RandomSource::new(5);
        let model = ModelState::init(&arch(HeadMode::Separate), &rng).unwrap();
        let batch = random_batch(&mut rng.split("batch"), 3);
        let (lb, _) = total_loss(&model, &batch, 0.7, AlignMetric::Cosine).unwrap();

        let (e_f, _) = model.face_encoder.forward(&batch.face).unwrap();
        let (e_v, _) = model.voice_encoder.forward(&batch.voice).unwrap();
        let lf = ce_loss(&model.head.batch_logits(&e_f, Modality::Face).unwrap(), &batch.labels)
            .unwrap()
            .loss;
        let lv = ce_loss(&model.head.batch_logits(&e_v, Modality::Voice).unwrap(), &batch.labels)
            .unwrap()
            .loss;
        let la = align_loss_cosine(&e_f, &e_v).unwrap().loss;
        assert!((lb.total - (lf + lv + 0.7 * la)).abs() < 1e-12);
        assert_eq!(lb.total, lb.l_face + lb.l_voice + lb.lambda * lb.l_align);
    }

    #[test]
    fn total_loss_grads_match_finite_differences() {
        let root = RandomSource::new(6);
        for (k, (mode, metric)) in [
            (HeadMode::Shared, AlignMetric::Mse),
            (HeadMode::Shared, AlignMetric::Cosine),
            (HeadMode::Separate, AlignMetric::Mse),
            (HeadMode::Separate, AlignMetric::None),
        ]
        .into_iter()
        .enumerate()
        {
            let rng = root.split(&format!("case{k}"));
            let model = ModelState::init(&arch(mode), &rng).unwrap();
            let batch = random_batch(&mut rng.split("batch"), 4);
            let (_, grads) = total_loss(&model, &batch, 1.0, metric).unwrap();
            let mut probe = model.clone();
            let num = finite_diff_grad(
                |p| {
                    probe.assign_flat(p).unwrap();
                    total_loss_value(&probe, &batch, 1.0, metric).unwrap().total
                },
                &model.flatten(),
                1e-5,
            )
            .unwrap();
            for (a, n) in grads.flatten().iter().zip(&num) {
                assert!(rel_err(*a, *n) < 1e-4, "{mode:?}/{metric:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn shared_grad_is_sum_of_separate_grads() {
        let rng = RandomSource::new(8);
        let shared = ModelState::init(&arch(HeadMode::Shared), &rng).unwrap();
        let w = shared.head.weight(Modality::Face).clone();
        let separate = ModelState {
            head: ClassifierHead::Separate {
                face: w.clone(),
                voice: w,
            },
            ..shared.clone()
        };
        let batch = random_batch(&mut rng.split("batch"), 6);
        let (_, gs) = total_loss(&shared, &batch, 0.5, AlignMetric::Mse).unwrap();
        let (_, gp) = total_loss(&separate, &batch, 0.5, AlignMetric::Mse).unwrap();
        let mut sum = gp.head.weight(Modality::Face).clone();
        sum.add_scaled(gp.head.weight(Modality::Voice), 1.0).unwrap();
        for (a, b) in gs.head.weight(Modality::Face).data().iter().zip(sum.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(gs.face_encoder, gp.face_encoder);
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        let root = RandomSource::new(9);
        for k in 0..50 {
            let rng = root.split(&format!("case{k}"));
            let mode = if k % 2 == 0 { HeadMode::Shared } else { HeadMode::Separate };
            let metric = if k % 3 == 0 { AlignMetric::Cosine } else { AlignMetric::Mse };
            let model = ModelState::init(&arch(mode), &rng).unwrap();
            let batch = random_batch(&mut rng.split("batch"), 4);
            let (before, grads) = total_loss(&model, &batch, 1.0, metric).unwrap();
            let mut stepped = model.clone();
            let flat: Vec<f64> = model
                .flatten()
                .iter()
                .zip(grads.flatten())
                .map(|(p, g)| p - 1e-4 * g)
                .collect();
            stepped.assign_flat(&flat).unwrap();
            let after = total_loss_value(&stepped, &batch, 1.0, metric).unwrap();
            assert!(after.total <= before.total, "case {k}");
        }
    }

    #[test]
    fn rejects_negative_lambda_and_empty_batch() {
        let rng = RandomSource::new(10);
        let model = ModelState::init(&arch(HeadMode::Shared), &rng).unwrap();
        let batch = random_batch(&mut rng.split("b"), 2);
        assert!(matches!(
            total_loss(&model, &batch, -1.0, AlignMetric::Mse),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            PairedBatch::new(Matrix::zeros(0, 5), Matrix::zeros(0, 4), vec![]),
            Err(Error::Validation(_))
        ));
    }

    fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-5.0f64..5.0, rows * cols)
            .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn mse_is_nonnegative(f in matrix_strategy(3, 4), v in matrix_strategy(3, 4)) {
            let out = align_loss_mse(&f, &v).unwrap();
            prop_assert!(out.loss >= 0.0);
            prop_assert_eq!(align_loss_mse(&f, &f).unwrap().loss, 0.0);
            if f != v {
                prop_assert!(out.loss > 0.0);
            }
        }

        #[test]
        fn cosine_scale_invariant(f in matrix_strategy(3, 4), v in matrix_strategy(3, 4), c in 0.01f64..100.0) {
            prop_assume!((0..3).all(|i| dot(f.row(i), f.row(i)) > 1e-6 && dot(v.row(i), v.row(i)) > 1e-6));
            let mut scaled = f.clone();
            scaled.scale(c);
            let a = align_loss_cosine(&f, &v).unwrap().loss;
            let b = align_loss_cosine(&scaled, &v).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&a));
        }

        #[test]
        fn ce_grad_rows_sum_to_zero(logits in matrix_strategy(4, 6), labels in prop::collection::vec(0usize..6, 4)) {
            let out = ce_loss(&logits, &labels).unwrap();
            for i in 0..4 {
                let s: f64 = out.grad_logits.row(i).iter().sum();
                prop_assert!(s.abs() < 1e-12);
            }
        }
    }
}
