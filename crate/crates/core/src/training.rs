//! Adam training with per-epoch exponential learning-rate decay, paired
//! batch sampling, feature-noise augmentation and last-K weight averaging.

use std::collections::VecDeque;
use std::io::Write;

use crate::checkpoint::Checkpoint;
use crate::codec::sha256_u64;
use crate::config::{fmt_exact, parse_value, unknown_key, FlatConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Architecture, HeadMode, ModelState};
use crate::numerics::{Matrix, RandomSource};
use crate::objective::{total_loss, AlignMetric, LossBreakdown, PairedBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub align_metric: AlignMetric,
    pub head_mode: HeadMode,
    pub epochs: usize,
    pub lr0: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub avg_window: usize,
    pub seed: u64,
    pub augment_noise_sigma: f64,
    pub embedding_dim: usize,
    pub hidden_widths: Vec<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            align_metric: AlignMetric::Mse,
            head_mode: HeadMode::Shared,
            epochs: 500,
            lr0: 0.001,
            decay: 0.97,
            batch_size: 64,
            avg_window: 5,
            seed: 0,
            augment_noise_sigma: 0.1,
            embedding_dim: 128,
            hidden_widths: vec![64, 64],
        }
    }
}

impl FlatConfig for TrainingConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda" => self.lambda = parse_value(key, value)?,
            "align_metric" => self.align_metric = parse_value(key, value)?,
            "head_mode" => self.head_mode = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "decay" => self.decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "avg_window" => self.avg_window = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "augment_noise_sigma" => self.augment_noise_sigma = parse_value(key, value)?,
            "embedding_dim" => self.embedding_dim = parse_value(key, value)?,
            "hidden_widths" => {
                self.hidden_widths = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| parse_value(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "lambda = {}\nalign_metric = {}\nhead_mode = {}\nepochs = {}\nlr0 = {}\n\
             decay = {}\nbatch_size = {}\navg_window = {}\nseed = {}\n\
             augment_noise_sigma = {}\nembedding_dim = {}\nhidden_widths = {}\n",
            fmt_exact(self.lambda),
            self.align_metric,
            self.head_mode,
            self.epochs,
            fmt_exact(self.lr0),
            fmt_exact(self.decay),
            self.batch_size,
            self.avg_window,
            self.seed,
            fmt_exact(self.augment_noise_sigma),
            self.embedding_dim,
            hidden.join(",")
        )
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::validation(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be finite and >= 0");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail("decay must be in (0, 1]");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail("lr0 must be finite and >= 0");
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if self.avg_window == 0 || self.avg_window > self.epochs {
            return fail("avg_window must be in [1, epochs]");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(self.augment_noise_sigma >= 0.0 && self.augment_noise_sigma.is_finite()) {
            return fail("augment_noise_sigma must be finite and >= 0");
        }
        if self.embedding_dim == 0 || self.hidden_widths.contains(&0) {
            return fail("layer widths must be >= 1");
        }
        Ok(())
    }
}

impl TrainingConfig {
    /// Stable fingerprint of the canonical config text.
    pub fn hash(&self) -> u64 {
        sha256_u64(self.to_text().as_bytes())
    }

    pub fn architecture(&self, dataset: &Dataset) -> Architecture {
        Architecture {
            face_dim: dataset.face_dim(),
            voice_dim: dataset.voice_dim(),
            hidden: self.hidden_widths.clone(),
            embedding_dim: self.embedding_dim,
            num_classes: dataset.num_classes(),
            head_mode: self.head_mode,
        }
    }
}

/// Learning rate for `epoch` (0-based): `lr0 · decay^epoch`.
pub fn lr_for_epoch(cfg: &TrainingConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay.powi(epoch as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter slice; `t` is the
/// 1-based step number after incrementing.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    hp: AdamHyper,
) {
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
}

/// Adam moments laid out like the model they optimize.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelState,
    pub v: ModelState,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(model: &ModelState) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
            hyper: AdamHyper::default(),
        }
    }

    /// Applies one update in place. Nothing is modified if any gradient is
    /// non-finite or the layouts disagree.
    pub fn step(&mut self, params: &mut ModelState, grads: &ModelState, lr: f64) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::shape("gradient layout does not match parameters"));
        }
        for (name, g) in grads.tensors() {
            if !g.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient in {name}")));
            }
        }
        self.t += 1;
        let t = self.t;
        let hyper = self.hyper;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), t, lr, hyper);
        }
        for (name, p) in params.tensors() {
            if !p.is_finite() {
                return Err(Error::numeric(format!("parameter {name} became non-finite")));
            }
        }
        Ok(())
    }
}

type Pool = Vec<Vec<f64>>;

/// Training split grouped by identity.
#[derive(Debug, Clone)]
pub struct TrainSet {
    /// `(face pool, voice pool)` per class label.
    pools: Vec<(Pool, Pool)>,
    face_dim: usize,
    voice_dim: usize,
    draws_per_identity: usize,
}

impl TrainSet {
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let classes = dataset.num_classes();
        let mut pools = vec![(Vec::new(), Vec::new()); classes];
        for s in dataset.train_samples() {
            let (faces, voices) = pools.get_mut(s.identity).ok_or_else(|| {
                Error::validation(format!("train identity {} out of range", s.identity))
            })?;
            faces.push(s.face.clone());
            voices.push(s.voice.clone());
        }
        if pools.iter().any(|(f, _)| f.is_empty()) {
            return Err(Error::validation("every training identity needs samples"));
        }
        Ok(Self {
            pools,
            face_dim: dataset.face_dim(),
            voice_dim: dataset.voice_dim(),
            draws_per_identity: dataset.config.samples_per_identity_per_modality,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.pools.len() * self.draws_per_identity
    }
}

/// Re-draws face/voice pairs for one epoch, shuffles them, splits them into
/// batches and adds augmentation noise. Uses the `pairs`, `shuffle` and
/// `noise` substreams of `rng`.
pub fn draw_epoch_batches(
    train: &TrainSet,
    cfg: &TrainingConfig,
    rng: &RandomSource,
) -> Result<Vec<PairedBatch>> {
    let mut pair_rng = rng.split("pairs");
    let mut pairs: Vec<(usize, usize, usize)> = Vec::with_capacity(train.num_pairs());
    for (label, (faces, voices)) in train.pools.iter().enumerate() {
        for _ in 0..train.draws_per_identity {
            let f = pair_rng.below(faces.len());
            let v = pair_rng.below(voices.len());
            pairs.push((label, f, v));
        }
    }
    rng.split("shuffle").shuffle(&mut pairs);

    let mut noise = rng.split("noise");
    let sigma = cfg.augment_noise_sigma;
    let mut batches = Vec::with_capacity(pairs.len().div_ceil(cfg.batch_size));
    for chunk in pairs.chunks(cfg.batch_size) {
        let mut face = Vec::with_capacity(chunk.len() * train.face_dim);
        let mut voice = Vec::with_capacity(chunk.len() * train.voice_dim);
        let mut labels = Vec::with_capacity(chunk.len());
        for &(label, f, v) in chunk {
            let (faces, voices) = &train.pools[label];
            face.extend(faces[f].iter().map(|x| x + sigma * noise.normal()));
            voice.extend(voices[v].iter().map(|x| x + sigma * noise.normal()));
            labels.push(label);
        }
        batches.push(PairedBatch::new(
            Matrix::new(chunk.len(), train.face_dim, face)?,
            Matrix::new(chunk.len(), train.voice_dim, voice)?,
            labels,
        )?);
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean loss components.
    pub loss: LossBreakdown,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,lr,l_face,l_voice,l_align,total";

    /// CSV row with 9 significant digits per real value.
    pub fn to_row(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.epoch,
            self.lr,
            self.loss.l_face,
            self.loss.l_voice,
            self.loss.l_align,
            self.loss.total
        )
    }
}

/// Runs one epoch of Adam updates at learning rate `lr` and returns the mean
/// loss breakdown over its batches.
pub fn train_epoch(
    model: &mut ModelState,
    train: &TrainSet,
    cfg: &TrainingConfig,
    adam: &mut AdamState,
    rng: &RandomSource,
    lr: f64,
) -> Result<LossBreakdown> {
    let batches = draw_epoch_batches(train, cfg, rng)?;
    let (mut face, mut voice, mut align) = (0.0, 0.0, 0.0);
    for (b, batch) in batches.iter().enumerate() {
        let at = |e: Error| match e {
            Error::Numeric(msg) => Error::Numeric(format!("batch {b}: {msg}")),
            other => other,
        };
        let (loss, grads) = total_loss(model, batch, cfg.lambda, cfg.align_metric).map_err(at)?;
        adam.step(model, &grads, lr).map_err(at)?;
        face += loss.l_face;
        voice += loss.l_voice;
        align += loss.l_align;
    }
    let n = batches.len() as f64;
    Ok(LossBreakdown::new(face / n, voice / n, align / n, cfg.lambda))
}

/// Parameter-wise arithmetic mean. Computed as `first + Σ(xₖ − first)/K`,
/// which returns `first` bit-exactly when all inputs agree.
pub fn average_models(models: &[ModelState]) -> Result<ModelState> {
    let first = models
        .first()
        .ok_or_else(|| Error::validation("nothing to average"))?;
    if let Some(bad) = models.iter().position(|m| !m.same_layout(first)) {
        return Err(Error::validation(format!(
            "model {bad} has a different architecture"
        )));
    }
    let k = models.len() as f64;
    let mut out = first.clone();
    let inputs: Vec<Vec<(String, &Matrix)>> = models.iter().map(ModelState::tensors).collect();
    for (t, (_, dst)) in out.tensors_mut().into_iter().enumerate() {
        let base = inputs[0][t].1.data();
        for (i, d) in dst.data_mut().iter_mut().enumerate() {
            let spread: f64 = inputs.iter().map(|m| m[t].1.data()[i] - base[i]).sum();
            *d = base[i] + spread / k;
        }
    }
    Ok(out)
}

/// Averages checkpoints that share one config hash and architecture.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<ModelState> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::validation("nothing to average"))?;
    if let Some(bad) = checkpoints
        .iter()
        .find(|c| c.config_hash != first.config_hash)
    {
        return Err(Error::validation(format!(
            "checkpoint from epoch {} has config hash {:016x}, expected {:016x}",
            bad.epoch, bad.config_hash, first.config_hash
        )));
    }
    let models: Vec<ModelState> = checkpoints.iter().map(|c| c.model.clone()).collect();
    average_models(&models)
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Average of the last `avg_window` epoch-end models.
    pub model: ModelState,
    pub log: Vec<EpochLog>,
    pub config_hash: u64,
}

impl TrainingOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.log.len() as u64,
            model: self.model.clone(),
            config_hash: self.config_hash,
        }
    }
}

/// Full training run. When `log_sink` is given, the CSV header and each epoch
/// row are written and flushed as soon as the epoch finishes, so a failed run
/// leaves every completed epoch on disk.
pub fn run_training(
    cfg: &TrainingConfig,
    dataset: &Dataset,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let train = TrainSet::from_dataset(dataset)?;
    let root = RandomSource::new(cfg.seed);
    let mut model = ModelState::init(&cfg.architecture(dataset), &root.split("init"))?;
    let mut adam = AdamState::new(&model);
    let config_hash = cfg.hash();
    let train_rng = root.split("train");

    let io_err = |e: std::io::Error| Error::validation(format!("training log: {e}"));
    if let Some(sink) = log_sink.as_deref_mut() {
        writeln!(sink, "{}", EpochLog::HEADER).map_err(io_err)?;
        sink.flush().map_err(io_err)?;
    }

    let mut window: VecDeque<ModelState> = VecDeque::with_capacity(cfg.avg_window);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_for_epoch(cfg, epoch);
        let rng = train_rng.split(&format!("epoch{epoch}"));
        let loss = train_epoch(&mut model, &train, cfg, &mut adam, &rng, lr).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, {msg}")),
            other => other,
        })?;
        let entry = EpochLog { epoch, lr, loss };
        if let Some(sink) = log_sink.as_deref_mut() {
            writeln!(sink, "{}", entry.to_row()).map_err(io_err)?;
            sink.flush().map_err(io_err)?;
        }
        log.push(entry);
        if window.len() == cfg.avg_window {
            window.pop_front();
        }
        window.push_back(model.clone());
    }
    let models: Vec<ModelState> = window.into_iter().collect();
    Ok(TrainingOutcome {
        model: average_models(&models)?,
        log,
        config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticConfig};
    use crate::objective::total_loss_value;

    fn tiny_data() -> Dataset {
        generate_dataset(&SyntheticConfig {
            num_train_identities: 4,
            num_eval_identities: 3,
            latent_dim: 3,
            face_dim: 6,
            voice_dim: 5,
            samples_per_identity_per_modality: 4,
            seed: 2,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainingConfig {
        TrainingConfig {
            epochs: 3,
            avg_window: 2,
            batch_size: 5,
            embedding_dim: 4,
            hidden_widths: vec![6, 6],
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainingConfig::default();
        assert_eq!(lr_for_epoch(&cfg, 0), 0.001);
        assert!((lr_for_epoch(&cfg, 1) - 0.00097).abs() < 1e-18);
        let flat = TrainingConfig {
            decay: 1.0,
            ..cfg
        };
        assert_eq!(lr_for_epoch(&flat, 321), flat.lr0);
    }

    #[test]
    fn adam_zero_grad_keeps_params_and_decays_moments() {
        let mut p = vec![1.5, -2.0];
        let mut m = vec![0.4, -0.2];
        let mut v = vec![0.3, 0.1];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, AdamHyper::default());
        // m̂ is nonzero from history, so only check the moments decay
        assert_eq!(m, vec![0.9 * 0.4, 0.9 * -0.2]);
        assert_eq!(v, vec![0.999 * 0.3, 0.999 * 0.1]);

        let mut p = vec![1.5, -2.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, AdamHyper::default());
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut m = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        adam_update(&mut p, &[3.0, -0.5, 1e3], &mut m, &mut v, 1, 0.01, AdamHyper::default());
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_matches_hand_stepped_trajectory() {
        // g = 1 each step: m_t = 1 - 0.9^t, v_t = 1 - 0.999^t, so m̂ = v̂ = 1
        // and every step moves by lr / (1 + ε).
        let mut p = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let mut expect = 0.0;
        for t in 1..=3u64 {
            adam_update(&mut p, &[1.0], &mut m, &mut v, t, 0.1, AdamHyper::default());
            let mt: f64 = 1.0 - 0.9f64.powi(t as i32);
            let vt: f64 = 1.0 - 0.999f64.powi(t as i32);
            let m_hat = mt / (1.0 - 0.9f64.powi(t as i32));
            let v_hat = vt / (1.0 - 0.999f64.powi(t as i32));
            expect -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((m[0] - mt).abs() < 1e-15);
            assert!((v[0] - vt).abs() < 1e-15);
            assert!((p[0] - expect).abs() < 1e-12);
        }
        assert!((p[0] + 0.3 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn adam_state_rejects_non_finite_grads_by_name() {
        let ds = tiny_data();
        let cfg = tiny_cfg();
        let mut model = ModelState::init(&cfg.architecture(&ds), &RandomSource::new(1)).unwrap();
        let before = model.clone();
        let mut adam = AdamState::new(&model);
        let mut grads = model.zeros_like();
        grads.voice_encoder.layers_mut()[1].bias.data_mut()[0] = f64::NAN;
        let err = adam.step(&mut model, &grads, 0.1).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("voice_encoder.layer1.bias")));
        assert_eq!(model, before);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let ds = tiny_data();
        let cfg = tiny_cfg();
        let train = TrainSet::from_dataset(&ds).unwrap();
        let mut model = ModelState::init(&cfg.architecture(&ds), &RandomSource::new(1)).unwrap();
        let before = model.clone();
        let mut adam = AdamState::new(&model);
        train_epoch(&mut model, &train, &cfg, &mut adam, &RandomSource::new(5), 0.0).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn single_batch_epoch_reports_direct_loss() {
        let ds = tiny_data();
        let cfg = TrainingConfig {
            batch_size: 1000,
            ..tiny_cfg()
        };
        let train = TrainSet::from_dataset(&ds).unwrap();
        let mut model = ModelState::init(&cfg.architecture(&ds), &RandomSource::new(1)).unwrap();
        let start = model.clone();
        let rng = RandomSource::new(8);
        let batches = draw_epoch_batches(&train, &cfg, &rng).unwrap();
        assert_eq!(batches.len(), 1);
        let direct = total_loss_value(&start, &batches[0], cfg.lambda, cfg.align_metric).unwrap();
        let mut adam = AdamState::new(&model);
        let stats = train_epoch(&mut model, &train, &cfg, &mut adam, &rng, 0.01).unwrap();
        assert_eq!(stats, direct);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn batches_cover_every_pair_once() {
        let ds = tiny_data();
        let cfg = tiny_cfg();
        let train = TrainSet::from_dataset(&ds).unwrap();
        let batches = draw_epoch_batches(&train, &cfg, &RandomSource::new(3)).unwrap();
        let total: usize = batches.iter().map(PairedBatch::len).sum();
        assert_eq!(total, 4 * 4);
        let mut counts = [0usize; 4];
        for b in &batches {
            assert!(b.len() <= 5);
            for &l in &b.labels {
                counts[l] += 1;
            }
        }
        assert_eq!(counts, [4; 4]);
    }

    #[test]
    fn averaging_examples() {
        let ds = tiny_data();
        let cfg = tiny_cfg();
        let arch = cfg.architecture(&ds);
        let a = ModelState::init(&arch, &RandomSource::new(1)).unwrap();
        let same = vec![a.clone(); 5];
        assert_eq!(average_models(&same).unwrap(), a);

        let mut neg = a.clone();
        for (_, m) in neg.tensors_mut() {
            m.scale(-1.0);
        }
        let avg = average_models(&[a.clone(), neg]).unwrap();
        assert!(avg.flatten().iter().all(|v| *v == 0.0));

        let models: Vec<ModelState> = (0..5)
            .map(|s| ModelState::init(&arch, &RandomSource::new(10 + s)).unwrap())
            .collect();
        let avg = average_models(&models).unwrap().flatten();
        let flats: Vec<Vec<f64>> = models.iter().map(ModelState::flatten).collect();
        for (i, v) in avg.iter().enumerate() {
            let mean = flats.iter().map(|f| f[i]).sum::<f64>() / 5.0;
            assert!((v - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_rejects_mismatch() {
        let ds = tiny_data();
        let cfg = tiny_cfg();
        let a = ModelState::init(&cfg.architecture(&ds), &RandomSource::new(1)).unwrap();
        let other = TrainingConfig {
            head_mode: HeadMode::Separate,
            ..cfg.clone()
        };
        let b = ModelState::init(&other.architecture(&ds), &RandomSource::new(1)).unwrap();
        assert!(matches!(average_models(&[a.clone(), b]), Err(Error::Validation(_))));
        assert!(average_models(&[]).is_err());

        let c1 = Checkpoint { epoch: 1, model: a.clone(), config_hash: 1 };
        let c2 = Checkpoint { epoch: 2, model: a, config_hash: 2 };
        assert!(matches!(average_checkpoints(&[c1, c2]), Err(Error::Validation(_))));
    }

    #[test]
    fn single_epoch_window_returns_trained_model() {
        let ds = tiny_data();
        let cfg = TrainingConfig {
            epochs: 1,
            avg_window: 1,
            ..tiny_cfg()
        };
        let out = run_training(&cfg, &ds, None).unwrap();
        // replay the one epoch by hand
        let root = RandomSource::new(cfg.seed);
        let mut model = ModelState::init(&cfg.architecture(&ds), &root.split("init")).unwrap();
        let mut adam = AdamState::new(&model);
        let train = TrainSet::from_dataset(&ds).unwrap();
        let rng = root.split("train").split("epoch0");
        train_epoch(&mut model, &train, &cfg, &mut adam, &rng, cfg.lr0).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn run_is_deterministic_and_logs_schedule() {
        let ds = tiny_data();
        let cfg = tiny_cfg();
        let mut sink_a = Vec::new();
        let a = run_training(&cfg, &ds, Some(&mut sink_a)).unwrap();
        let mut sink_b = Vec::new();
        let b = run_training(&cfg, &ds, Some(&mut sink_b)).unwrap();
        assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
        assert_eq!(sink_a, sink_b);
        for entry in &a.log {
            assert_eq!(entry.lr, lr_for_epoch(&cfg, entry.epoch));
            let l = entry.loss;
            assert!((l.total - (l.l_face + l.l_voice + l.lambda * l.l_align)).abs() < 1e-12);
        }
        let text = String::from_utf8(sink_a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], EpochLog::HEADER);
        assert_eq!(lines.len(), cfg.epochs + 1);
        assert_eq!(lines[1].split(',').count(), 6);
    }

    #[test]
    fn config_text_round_trip_and_errors() {
        let cfg = TrainingConfig {
            lambda: 0.3,
            align_metric: AlignMetric::Cosine,
            head_mode: HeadMode::Separate,
            hidden_widths: vec![32, 16, 8],
            ..TrainingConfig::default()
        };
        assert_eq!(TrainingConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_ne!(cfg.hash(), TrainingConfig::default().hash());

        let err = TrainingConfig::from_text("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(TrainingConfig::from_text("decay = 0").is_err());
        assert!(TrainingConfig::from_text("decay = 1.5").is_err());
        assert!(TrainingConfig::from_text("epochs = 3\navg_window = 4").is_err());
        assert!(TrainingConfig::from_text("lambda = -1").is_err());
        assert!(TrainingConfig::from_text("head_mode = both").is_err());
    }
}
