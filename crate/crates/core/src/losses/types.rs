use serde::{Deserialize, Serialize};

use crate::error::{MmsError, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Label,
    Prediction,
}

/// `B×1×H×W` per-pixel masks held in double precision.
///
/// Labels are exactly binary; predictions are probabilities in `[0, 1]` (sigmoid outputs sit
/// strictly inside, the closed interval admits hand-built extremes).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBatch {
    batch: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    kind: MaskKind,
}

impl MaskBatch {
    pub fn labels(batch: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::check_layout(batch, height, width, &values)?;
        if let Some(v) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(MmsError::Validation(format!(
                "label masks must be binary, found {v}"
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            values,
            kind: MaskKind::Label,
        })
    }

    pub fn predictions(batch: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::check_layout(batch, height, width, &values)?;
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MmsError::Validation(format!(
                "prediction values must lie in [0, 1], found {v}"
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            values,
            kind: MaskKind::Prediction,
        })
    }

    /// Reads a `B×1×H×W` tensor.
    pub fn from_tensor(t: &Tensor, kind: MaskKind) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(MmsError::Shape(format!(
                "mask tensors have one channel, got {c}"
            )));
        }
        let values = t.data().iter().map(|v| *v as f64).collect();
        match kind {
            MaskKind::Label => Self::labels(b, h, w, values),
            MaskKind::Prediction => Self::predictions(b, h, w, values),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.batch, 1, self.height, self.width],
            self.values.iter().map(|v| *v as f32).collect(),
        )
        .expect("mask layout is consistent by construction")
    }

    fn check_layout(batch: usize, height: usize, width: usize, values: &[f64]) -> Result<()> {
        if batch == 0 || height == 0 || width == 0 {
            return Err(MmsError::Validation(format!(
                "empty mask batch {batch}x{height}x{width}"
            )));
        }
        if values.len() != batch * height * width {
            return Err(MmsError::Validation(format!(
                "mask batch {batch}x1x{height}x{width} needs {} values, got {}",
                batch * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(MmsError::Validation("mask batch contains NaN".into()));
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, b: usize) -> &[f64] {
        let n = self.pixels();
        &self.values[b * n..(b + 1) * n]
    }

    pub fn same_shape(&self, other: &MaskBatch) -> bool {
        (self.batch, self.height, self.width) == (other.batch, other.height, other.width)
    }
}

/// Per-pixel hard-pixel weights, same layout as the [`MaskBatch`] they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub(crate) batch: usize,
    pub(crate) height: usize,
    pub(crate) width: usize,
    pub(crate) values: Vec<f64>,
}

impl WeightMap {
    pub fn new(batch: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * height * width {
            return Err(MmsError::Validation(format!(
                "weight map {batch}x1x{height}x{width} needs {} values, got {}",
                batch * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MmsError::Validation(
                "weight map values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            batch,
            height,
            width,
            values,
        })
    }

    pub fn uniform(batch: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            height,
            width,
            values: vec![1.0; batch * height * width],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn image(&self, b: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[b * n..(b + 1) * n]
    }

    pub fn matches(&self, m: &MaskBatch) -> bool {
        (self.batch, self.height, self.width) == (m.batch(), m.height(), m.width())
    }
}

/// `B×D` global feature vectors, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVectorBatch {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureVectorBatch {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != rows * dim {
            return Err(MmsError::Validation(format!(
                "feature batch {rows}x{dim} needs {} values, got {}",
                rows * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MmsError::Validation("feature batch contains non-finite values".into()));
        }
        Ok(Self { rows, dim, values })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [rows, dim] => Self::new(*rows, *dim, t.data().iter().map(|v| *v as f64).collect()),
            s => Err(MmsError::Shape(format!("feature vectors are rank 2, got {s:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Largest deviation of any row norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.rows)
            .map(|i| (norm(self.row(i)) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `B×D×h×w` dense feature maps with a unit-norm length-D fiber per location.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapBatch {
    batch: usize,
    dim: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMapBatch {
    pub fn new(batch: usize, dim: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if batch == 0 || dim == 0 || height == 0 || width == 0 {
            return Err(MmsError::Validation(format!(
                "empty feature map {batch}x{dim}x{height}x{width}"
            )));
        }
        if values.len() != batch * dim * height * width {
            return Err(MmsError::Validation(format!(
                "feature map {batch}x{dim}x{height}x{width} needs {} values, got {}",
                batch * dim * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MmsError::Validation("feature map contains non-finite values".into()));
        }
        Ok(Self {
            batch,
            dim,
            height,
            width,
            values,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, d, h, w) = t.dims4()?;
        Self::new(b, d, h, w, t.data().iter().map(|v| *v as f64).collect())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn same_shape(&self, other: &FeatureMapBatch) -> bool {
        (self.batch, self.dim, self.height, self.width)
            == (other.batch, other.dim, other.height, other.width)
    }

    /// Fibers of image `b` as a `locations × dim` row-major matrix.
    pub(crate) fn fibers(&self, b: usize) -> Vec<f64> {
        let hw = self.locations();
        let base = b * self.dim * hw;
        let mut out = vec![0.0; hw * self.dim];
        for d in 0..self.dim {
            for s in 0..hw {
                out[s * self.dim + d] = self.values[base + d * hw + s];
            }
        }
        out
    }

    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.batch)
            .flat_map(|b| {
                let f = self.fibers(b);
                f.chunks(self.dim)
                    .map(|fiber| (norm(fiber) - 1.0).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// The four non-negative weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, lambda4: f64) -> Result<Self> {
        let lw = Self {
            lambda1,
            lambda2,
            lambda3,
            lambda4,
        };
        lw.validate()?;
        Ok(lw)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(MmsError::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Supervised-only weighting, `(1, 0, 0, 0)`.
    pub fn supervised_only() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        }
    }

    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.25,
            lambda2: 0.25,
            lambda3: 0.25,
            lambda4: 0.25,
        }
    }
}

/// InfoNCE softmax temperature, strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(MmsError::Parameter(format!("temperature must be > 0, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.07)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = MmsError;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// How many negative keys each pixel query sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "NegativeKeysRepr", into = "NegativeKeysRepr")]
pub enum NegativeKeys {
    /// Every other location of the opposite map.
    All,
    /// This many locations sampled uniformly without replacement.
    Sampled(usize),
}

impl Default for NegativeKeys {
    fn default() -> Self {
        NegativeKeys::Sampled(256)
    }
}

impl std::fmt::Display for NegativeKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NegativeKeys::All => f.write_str("all"),
            NegativeKeys::Sampled(k) => write!(f, "{k}"),
        }
    }
}

impl std::str::FromStr for NegativeKeys {
    type Err = MmsError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(NegativeKeys::All);
        }
        s.parse::<usize>()
            .map_err(|_| MmsError::Parameter(format!("k_neg must be `all` or a count, got `{s}`")))
            .and_then(|k| NegativeKeys::try_from(NegativeKeysRepr::Count(k)))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NegativeKeysRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<NegativeKeysRepr> for NegativeKeys {
    type Error = MmsError;

    fn try_from(r: NegativeKeysRepr) -> Result<Self> {
        match r {
            NegativeKeysRepr::Count(0) => {
                Err(MmsError::Parameter("k_neg must be positive".into()))
            }
            NegativeKeysRepr::Count(k) => Ok(NegativeKeys::Sampled(k)),
            NegativeKeysRepr::Name(s) if s.eq_ignore_ascii_case("all") => Ok(NegativeKeys::All),
            NegativeKeysRepr::Name(s) => Err(MmsError::Parameter(format!(
                "k_neg must be `all` or a count, got `{s}`"
            ))),
        }
    }
}

impl From<NegativeKeys> for NegativeKeysRepr {
    fn from(k: NegativeKeys) -> Self {
        match k {
            NegativeKeys::All => NegativeKeysRepr::Name("all".into()),
            NegativeKeys::Sampled(k) => NegativeKeysRepr::Count(k),
        }
    }
}

/// A loss value with its gradient with respect to the single differentiable input.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// A loss value with gradients with respect to both operands.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}
