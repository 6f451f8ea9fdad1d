//! Face/voice encoders and the classifier head, with hand-written backward
//! passes.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RandomSource};

/// Fully connected layer computing `x Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.rows() {
            return Err(Error::shape(format!(
                "bias {}x{} does not match weight {}x{}",
                bias.rows(),
                bias.cols(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(Self { weight, bias })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(input_dim: usize, output_dim: usize, rng: &mut RandomSource) -> Self {
        let bound = (6.0 / (input_dim + output_dim) as f64).sqrt();
        Self {
            weight: Matrix::uniform(output_dim, input_dim, bound, rng),
            bias: Matrix::zeros(1, output_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul_transposed(&self.weight)?;
        let bias = self.bias.data();
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(z)
    }
}

/// Multi-layer perceptron with tanh hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    layers: Vec<Dense>,
}

/// Activations recorded by [`MlpEncoder::forward`]: `activations[0]` is the
/// input and `activations[l + 1]` is the output of layer `l`.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    activations: Vec<Matrix>,
}

impl EncoderCache {
    pub fn embedding(&self) -> &Matrix {
        self.activations.last().expect("cache holds the input")
    }
}

impl MlpEncoder {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("encoder needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Randomly initialised encoder `input_dim → hidden… → output_dim`. Layer
    /// `l` draws from the `layer{l}` substream of `rng`.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &RandomSource,
    ) -> Self {
        let dims: Vec<usize> = std::iter::once(input_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output_dim))
            .collect();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, d)| Dense::init(d[0], d[1], &mut rng.split(&format!("layer{l}"))))
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Batch forward pass: one input per row of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, EncoderCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "encoder expects {} input features, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&activations[l])?;
            if l != last {
                z.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            }
            if !z.is_finite() {
                return Err(Error::numeric(format!("non-finite activation in layer {l}")));
            }
            activations.push(z);
        }
        let embedding = activations[activations.len() - 1].clone();
        Ok((embedding, EncoderCache { activations }))
    }

    /// Embedding of a single feature vector.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (e, _) = self.forward(&Matrix::row_vector(x)?)?;
        Ok(e.into_data())
    }

    /// Backward pass from `grad_embedding` (same shape as the forward output).
    /// Returns parameter gradients laid out as an encoder, and the gradient
    /// with respect to the input rows.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        grad_embedding: &Matrix,
    ) -> Result<(MlpEncoder, Matrix)> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::shape("cache does not belong to this encoder"));
        }
        if grad_embedding.shape() != cache.embedding().shape() {
            return Err(Error::shape(format!(
                "gradient {}x{} does not match embedding {}x{}",
                grad_embedding.rows(),
                grad_embedding.cols(),
                cache.embedding().rows(),
                cache.embedding().cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_embedding.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let output = &cache.activations[l + 1];
            if output.cols() != layer.output_dim() {
                return Err(Error::shape("cache does not belong to this encoder"));
            }
            if l != last {
                // tanh' = 1 - tanh²
                for (g, a) in upstream.data_mut().iter_mut().zip(output.data()) {
                    *g *= 1.0 - a * a;
                }
            }
            let input = &cache.activations[l];
            let weight = upstream.transposed_matmul(input)?;
            let bias = upstream.column_sums();
            let next = upstream.matmul(&layer.weight)?;
            grads.push(Dense { weight, bias });
            upstream = next;
        }
        grads.reverse();
        Ok((MlpEncoder { layers: grads }, upstream))
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: Matrix::zeros(1, l.bias.cols()),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadMode {
    Shared,
    Separate,
}

impl HeadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Shared => "shared",
            HeadMode::Separate => "separate",
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(HeadMode::Shared),
            "separate" => Ok(HeadMode::Separate),
            other => Err(Error::validation(format!(
                "head mode must be shared or separate, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Face,
    Voice,
}

/// Bias-free linear classifier over embeddings. `Shared` classifies both
/// modalities with one `C × D` matrix; `Separate` keeps one per modality.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierHead {
    Shared { weight: Matrix },
    Separate { face: Matrix, voice: Matrix },
}

impl ClassifierHead {
    pub fn init(mode: HeadMode, classes: usize, dim: usize, rng: &RandomSource) -> Self {
        let bound = (6.0 / (classes + dim) as f64).sqrt();
        match mode {
            HeadMode::Shared => ClassifierHead::Shared {
                weight: Matrix::uniform(classes, dim, bound, &mut rng.split("shared")),
            },
            HeadMode::Separate => ClassifierHead::Separate {
                face: Matrix::uniform(classes, dim, bound, &mut rng.split("face")),
                voice: Matrix::uniform(classes, dim, bound, &mut rng.split("voice")),
            },
        }
    }

    pub fn mode(&self) -> HeadMode {
        match self {
            ClassifierHead::Shared { .. } => HeadMode::Shared,
            ClassifierHead::Separate { .. } => HeadMode::Separate,
        }
    }

    /// Matrix that scores `modality`.
    pub fn weight(&self, modality: Modality) -> &Matrix {
        match (self, modality) {
            (ClassifierHead::Shared { weight }, _) => weight,
            (ClassifierHead::Separate { face, .. }, Modality::Face) => face,
            (ClassifierHead::Separate { voice, .. }, Modality::Voice) => voice,
        }
    }

    pub fn weight_mut(&mut self, modality: Modality) -> &mut Matrix {
        match (self, modality) {
            (ClassifierHead::Shared { weight }, _) => weight,
            (ClassifierHead::Separate { face, .. }, Modality::Face) => face,
            (ClassifierHead::Separate { voice, .. }, Modality::Voice) => voice,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight(Modality::Face).rows()
    }

    pub fn dim(&self) -> usize {
        self.weight(Modality::Face).cols()
    }

    /// `logits[j] = ⟨W_j, e⟩` for a single embedding.
    pub fn logits(&self, embedding: &[f64], modality: Modality) -> Result<Vec<f64>> {
        Ok(self
            .batch_logits(&Matrix::row_vector(embedding)?, modality)?
            .into_data())
    }

    /// Logits for each embedding row: `E Wᵀ`.
    pub fn batch_logits(&self, embeddings: &Matrix, modality: Modality) -> Result<Matrix> {
        let w = self.weight(modality);
        if embeddings.cols() != w.cols() {
            return Err(Error::shape(format!(
                "head expects {}-dim embeddings, got {}",
                w.cols(),
                embeddings.cols()
            )));
        }
        embeddings.matmul_transposed(w)
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        match self {
            ClassifierHead::Shared { weight } => ClassifierHead::Shared { weight: z(weight) },
            ClassifierHead::Separate { face, voice } => ClassifierHead::Separate {
                face: z(face),
                voice: z(voice),
            },
        }
    }
}

/// Two encoders plus classifier head. Gradients and optimizer moments reuse
/// this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub face_encoder: MlpEncoder,
    pub voice_encoder: MlpEncoder,
    pub head: ClassifierHead,
}

/// Dimensions needed to build a fresh model.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub face_dim: usize,
    pub voice_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub head_mode: HeadMode,
}

impl ModelState {
    pub fn new(
        face_encoder: MlpEncoder,
        voice_encoder: MlpEncoder,
        head: ClassifierHead,
    ) -> Result<Self> {
        let d = head.dim();
        if face_encoder.output_dim() != d || voice_encoder.output_dim() != d {
            return Err(Error::shape(format!(
                "encoders emit {}/{} dims but head expects {d}",
                face_encoder.output_dim(),
                voice_encoder.output_dim()
            )));
        }
        if head.num_classes() < 2 {
            return Err(Error::validation("classifier needs at least 2 classes"));
        }
        if let ClassifierHead::Separate { face, voice } = &head {
            if face.shape() != voice.shape() {
                return Err(Error::shape("separate head matrices differ in shape"));
            }
        }
        Ok(Self {
            face_encoder,
            voice_encoder,
            head,
        })
    }

    /// Freshly initialised model; every tensor draws from its own labelled
    /// substream of `rng`.
    pub fn init(arch: &Architecture, rng: &RandomSource) -> Result<Self> {
        if arch.embedding_dim == 0 || arch.face_dim == 0 || arch.voice_dim == 0 {
            return Err(Error::validation("model dimensions must be positive"));
        }
        let face = MlpEncoder::init(
            arch.face_dim,
            &arch.hidden,
            arch.embedding_dim,
            &rng.split("face_encoder"),
        );
        let voice = MlpEncoder::init(
            arch.voice_dim,
            &arch.hidden,
            arch.embedding_dim,
            &rng.split("voice_encoder"),
        );
        let head = ClassifierHead::init(
            arch.head_mode,
            arch.num_classes,
            arch.embedding_dim,
            &rng.split("head"),
        );
        Self::new(face, voice, head)
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.dim()
    }

    pub fn encoder(&self, modality: Modality) -> &MlpEncoder {
        match modality {
            Modality::Face => &self.face_encoder,
            Modality::Voice => &self.voice_encoder,
        }
    }

    /// Zero-valued copy with the same layout.
    pub fn zeros_like(&self) -> Self {
        Self {
            face_encoder: self.face_encoder.zeros_like(),
            voice_encoder: self.voice_encoder.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Every parameter tensor with its canonical name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (prefix, enc) in [
            ("face_encoder", &self.face_encoder),
            ("voice_encoder", &self.voice_encoder),
        ] {
            for (l, layer) in enc.layers.iter().enumerate() {
                out.push((format!("{prefix}.layer{l}.weight"), &layer.weight));
                out.push((format!("{prefix}.layer{l}.bias"), &layer.bias));
            }
        }
        match &self.head {
            ClassifierHead::Shared { weight } => out.push(("head.shared.W".into(), weight)),
            ClassifierHead::Separate { face, voice } => {
                out.push(("head.face.W".into(), face));
                out.push(("head.voice.W".into(), voice));
            }
        }
        out
    }

    /// Mutable counterpart of [`ModelState::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (prefix, enc) in [
            ("face_encoder", &mut self.face_encoder),
            ("voice_encoder", &mut self.voice_encoder),
        ] {
            for (l, layer) in enc.layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.layer{l}.weight"), &mut layer.weight));
                out.push((format!("{prefix}.layer{l}.bias"), &mut layer.bias));
            }
        }
        match &mut self.head {
            ClassifierHead::Shared { weight } => out.push(("head.shared.W".into(), weight)),
            ClassifierHead::Separate { face, voice } => {
                out.push(("head.face.W".into(), face));
                out.push(("head.voice.W".into(), voice));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// True when `other` has the same tensor names and shapes.
    pub fn same_layout(&self, other: &ModelState) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ma), (nb, mb))| na == nb && ma.shape() == mb.shape())
    }

    /// All parameters concatenated in [`ModelState::tensors`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, m)| m.data().to_vec())
            .collect()
    }

    /// Inverse of [`ModelState::flatten`].
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        for (_, m) in self.tensors_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Rebuilds a model from named tensors as produced by
    /// [`ModelState::tensors`].
    pub fn from_named_tensors(tensors: Vec<(String, Matrix)>) -> Result<Self> {
        let mut face: Vec<(usize, bool, Matrix)> = Vec::new();
        let mut voice: Vec<(usize, bool, Matrix)> = Vec::new();
        let mut shared = None;
        let mut head_face = None;
        let mut head_voice = None;
        for (name, m) in tensors {
            match name.as_str() {
                "head.shared.W" => shared = Some(m),
                "head.face.W" => head_face = Some(m),
                "head.voice.W" => head_voice = Some(m),
                _ => {
                    let parts: Vec<&str> = name.split('.').collect();
                    let bad = || Error::validation(format!("unknown tensor name {name:?}"));
                    if parts.len() != 3 {
                        return Err(bad());
                    }
                    let layer: usize = parts[1]
                        .strip_prefix("layer")
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(bad)?;
                    let is_weight = match parts[2] {
                        "weight" => true,
                        "bias" => false,
                        _ => return Err(bad()),
                    };
                    match parts[0] {
                        "face_encoder" => face.push((layer, is_weight, m)),
                        "voice_encoder" => voice.push((layer, is_weight, m)),
                        _ => return Err(bad()),
                    }
                }
            }
        }
        let head = match (shared, head_face, head_voice) {
            (Some(weight), None, None) => ClassifierHead::Shared { weight },
            (None, Some(face), Some(voice)) => ClassifierHead::Separate { face, voice },
            _ => return Err(Error::validation("head tensors do not describe one mode")),
        };
        Self::new(assemble_encoder(face)?, assemble_encoder(voice)?, head)
    }
}

fn assemble_encoder(mut parts: Vec<(usize, bool, Matrix)>) -> Result<MlpEncoder> {
    // weight before bias within each layer
    parts.sort_by_key(|(l, w, _)| (*l, !*w));
    if !parts.len().is_multiple_of(2) {
        return Err(Error::validation("encoder tensors are incomplete"));
    }
    let mut layers = Vec::with_capacity(parts.len() / 2);
    let mut it = parts.into_iter();
    while let (Some((lw, is_w, weight)), Some((lb, is_b, bias))) = (it.next(), it.next()) {
        let expected = layers.len();
        if lw != expected || lb != expected || !is_w || is_b {
            return Err(Error::validation(format!(
                "encoder layer {expected} is incomplete"
            )));
        }
        layers.push(Dense::new(weight, bias)?);
    }
    MlpEncoder::new(layers)
}
