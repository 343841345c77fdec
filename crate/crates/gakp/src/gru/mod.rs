//! Gated recurrent unit that scores track/detection pairs.
//!
//! The network reads a short sequence of pair features — a track's recent
//! appearance-plus-geometry descriptors followed by the candidate detection
//! — and emits a similarity in `(0, 1)`. One forward step computes
//!
//! ```text
//! r_t = sigmoid(W_r [h_{t-1}; x_t] + b_r)
//! z_t = sigmoid(W_z [h_{t-1}; x_t] + b_z)
//! c_t = tanh(W_h [r_t * h_{t-1}; x_t] + b_h)
//! h_t = (1 - z_t) * h_{t-1} + z_t * c_t
//! ```
//!
//! with `*` elementwise, `h_0 = 0`, and the similarity taken from the last
//! hidden state as `sigmoid(w_o h_T + b_o)`. Everything — forward, backward,
//! optimizer, serialization — is implemented here directly on `nalgebra`
//! types; there is no external learning framework.

pub mod mining;
pub mod train;

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::appearance::{Embedding, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Geometry components carried next to the appearance embedding.
pub const SPATIAL_DIM: usize = 6;

/// Length of one pair-feature vector: appearance plus geometry.
pub const PAIR_FEATURE_DIM: usize = EMBEDDING_DIM + SPATIAL_DIM;

/// Default hidden width, matching the input width.
pub const DEFAULT_HIDDEN: usize = PAIR_FEATURE_DIM;

/// Longest sequence a sample may carry: six history steps plus the
/// candidate.
pub const MAX_SEQUENCE_LEN: usize = 7;

/// Header of the model file format.
pub const MODEL_MAGIC: &[u8; 8] = b"GAKPGRU1";

const MODEL_VERSION: u32 = 1;

/// One step of a pair sequence: what a detection looked like and where it
/// was, normalized to the image so the network never sees raw pixels.
///
/// The spatial block is `[u/W, v/H, w/W, h/H, du/W, dv/H]` with `(u, v)` the
/// box center and `(du, dv)` its per-frame center velocity against the
/// previous step.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeature {
    pub appearance: Embedding,
    pub spatial: [f64; SPATIAL_DIM],
}

impl PairFeature {
    pub fn new(appearance: Embedding, spatial: [f64; SPATIAL_DIM]) -> Result<Self> {
        if spatial.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(
                "pair feature",
                format!("non-finite spatial component in {spatial:?}"),
            ));
        }
        Ok(PairFeature {
            appearance,
            spatial,
        })
    }

    /// Builds the feature for a box observed in an image of the given size,
    /// with the velocity block derived from the previous box and the frame
    /// gap to it (zero when there is no previous observation).
    pub fn from_box(
        bbox: &BoundingBox,
        previous: Option<(&BoundingBox, u32)>,
        appearance: Embedding,
        image_size: (f64, f64),
    ) -> Result<Self> {
        let (img_w, img_h) = image_size;
        if !(img_w > 0.0) || !(img_h > 0.0) {
            return Err(Error::input(
                "pair feature",
                format!("non-positive image size {img_w}x{img_h}"),
            ));
        }
        let (u, v) = bbox.center();
        let (du, dv) = match previous {
            Some((prev, gap)) if gap > 0 => {
                let (pu, pv) = prev.center();
                ((u - pu) / gap as f64, (v - pv) / gap as f64)
            }
            _ => (0.0, 0.0),
        };
        PairFeature::new(
            appearance,
            [
                u / img_w,
                v / img_h,
                bbox.width / img_w,
                bbox.height / img_h,
                du / img_w,
                dv / img_h,
            ],
        )
    }

    /// Concatenates appearance and spatial block into the network input.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut values = Vec::with_capacity(PAIR_FEATURE_DIM);
        values.extend_from_slice(self.appearance.values());
        values.extend_from_slice(&self.spatial);
        DVector::from_vec(values)
    }
}

/// A labeled training sequence: up to six history steps and the candidate
/// as the final element.
#[derive(Debug, Clone)]
pub struct AssociationSample {
    pub sequence: Vec<PairFeature>,
    pub label: bool,
}

impl AssociationSample {
    pub fn new(sequence: Vec<PairFeature>, label: bool) -> Result<Self> {
        if sequence.is_empty() || sequence.len() > MAX_SEQUENCE_LEN {
            return Err(Error::input(
                "association sample",
                format!(
                    "sequence length {} outside 1..={MAX_SEQUENCE_LEN}",
                    sequence.len()
                ),
            ));
        }
        Ok(AssociationSample { sequence, label })
    }
}

/// The network parameters. Weight matrices act on `[h; x]` concatenations,
/// except `w_h` which acts on `[r * h; x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruModel {
    hidden_size: usize,
    input_size: usize,
    pub(crate) w_r: DMatrix<f64>,
    pub(crate) w_z: DMatrix<f64>,
    pub(crate) w_h: DMatrix<f64>,
    pub(crate) b_r: DVector<f64>,
    pub(crate) b_z: DVector<f64>,
    pub(crate) b_h: DVector<f64>,
    pub(crate) w_o: DMatrix<f64>,
    pub(crate) b_o: DVector<f64>,
}

/// Result of a full forward pass.
#[derive(Debug, Clone)]
pub struct GruForward {
    /// `sigmoid` of the output projection of the final hidden state.
    pub similarity: f64,
    /// Hidden states after each step, `h_1..h_T`.
    pub hiddens: Vec<DVector<f64>>,
}

impl GruModel {
    /// Randomly initialized model: weights uniform in
    /// `[-1/sqrt(hidden), 1/sqrt(hidden)]`, biases zero.
    pub fn new(hidden_size: usize, input_size: usize, seed: u64) -> Self {
        assert!(hidden_size > 0 && input_size > 0, "zero-sized model");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let concat = hidden_size + input_size;
        let mut init =
            |rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        let w_r = init(hidden_size, concat);
        let w_z = init(hidden_size, concat);
        let w_h = init(hidden_size, concat);
        let w_o = init(1, hidden_size);
        GruModel {
            hidden_size,
            input_size,
            w_r,
            w_z,
            w_h,
            b_r: DVector::zeros(hidden_size),
            b_z: DVector::zeros(hidden_size),
            b_h: DVector::zeros(hidden_size),
            w_o,
            b_o: DVector::zeros(1),
        }
    }

    /// All-zero model; mostly useful in tests (its output is exactly 0.5
    /// for any input).
    pub fn zeros(hidden_size: usize, input_size: usize) -> Self {
        assert!(hidden_size > 0 && input_size > 0, "zero-sized model");
        GruModel {
            hidden_size,
            input_size,
            w_r: DMatrix::zeros(hidden_size, hidden_size + input_size),
            w_z: DMatrix::zeros(hidden_size, hidden_size + input_size),
            w_h: DMatrix::zeros(hidden_size, hidden_size + input_size),
            b_r: DVector::zeros(hidden_size),
            b_z: DVector::zeros(hidden_size),
            b_h: DVector::zeros(hidden_size),
            w_o: DMatrix::zeros(1, hidden_size),
            b_o: DVector::zeros(1),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Flat views over all parameter tensors in a fixed order (`w_r, w_z,
    /// w_h, b_r, b_z, b_h, w_o, b_o`). The optimizer, serialization and
    /// gradient checks all walk parameters through this.
    pub fn parameters(&self) -> [&[f64]; 8] {
        [
            self.w_r.as_slice(),
            self.w_z.as_slice(),
            self.w_h.as_slice(),
            self.b_r.as_slice(),
            self.b_z.as_slice(),
            self.b_h.as_slice(),
            self.w_o.as_slice(),
            self.b_o.as_slice(),
        ]
    }

    /// Mutable twin of [`GruModel::parameters`].
    pub fn parameters_mut(&mut self) -> [&mut [f64]; 8] {
        let GruModel {
            w_r,
            w_z,
            w_h,
            b_r,
            b_z,
            b_h,
            w_o,
            b_o,
            ..
        } = self;
        [
            w_r.as_mut_slice(),
            w_z.as_mut_slice(),
            w_h.as_mut_slice(),
            b_r.as_mut_slice(),
            b_z.as_mut_slice(),
            b_h.as_mut_slice(),
            w_o.as_mut_slice(),
            b_o.as_mut_slice(),
        ]
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_size {
            return Err(Error::input(
                "gru forward",
                format!("input length {} does not match model input {}", x.len(), self.input_size),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("gru forward", "non-finite input component"));
        }
        Ok(())
    }

    /// One recurrence step.
    pub(crate) fn step(&self, h: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let mut u = DVector::zeros(self.hidden_size + self.input_size);
        u.rows_mut(0, self.hidden_size).copy_from(h);
        u.rows_mut(self.hidden_size, self.input_size).copy_from(x);

        let mut r = &self.w_r * &u + &self.b_r;
        r.apply(|a| *a = sigmoid(*a));
        let mut z = &self.w_z * &u + &self.b_z;
        z.apply(|a| *a = sigmoid(*a));

        let mut v = DVector::zeros(self.hidden_size + self.input_size);
        v.rows_mut(0, self.hidden_size)
            .copy_from(&r.component_mul(h));
        v.rows_mut(self.hidden_size, self.input_size).copy_from(x);

        let mut c = &self.w_h * &v + &self.b_h;
        c.apply(|a| *a = a.tanh());

        let mut next = DVector::zeros(self.hidden_size);
        for i in 0..self.hidden_size {
            next[i] = (1.0 - z[i]) * h[i] + z[i] * c[i];
        }
        next
    }

    /// Similarity readout from a hidden state.
    pub fn output(&self, hidden: &DVector<f64>) -> f64 {
        sigmoid((&self.w_o * hidden)[0] + self.b_o[0])
    }

    /// Runs the recurrence over a sequence of raw input vectors.
    pub fn forward(&self, inputs: &[DVector<f64>]) -> Result<GruForward> {
        if inputs.is_empty() {
            return Err(Error::input("gru forward", "empty input sequence"));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let mut hiddens = Vec::with_capacity(inputs.len());
        let mut h = DVector::zeros(self.hidden_size);
        for x in inputs {
            h = self.step(&h, x);
            hiddens.push(h.clone());
        }
        Ok(GruForward {
            similarity: self.output(&h),
            hiddens,
        })
    }

    /// Scores a pair-feature sequence (history then candidate).
    pub fn score_features(&self, sequence: &[PairFeature]) -> Result<f64> {
        let inputs: Vec<DVector<f64>> = sequence.iter().map(PairFeature::to_vector).collect();
        Ok(self.forward(&inputs)?.similarity)
    }

    /// Hidden state after feeding only a track's history. Candidates for the
    /// same track can then be scored with a single additional step each,
    /// which is how the cost matrix avoids re-running the shared prefix.
    /// An empty history yields the initial (zero) hidden state.
    pub fn encode_history(&self, history: &[PairFeature]) -> Result<DVector<f64>> {
        let mut h = DVector::zeros(self.hidden_size);
        for feature in history {
            let x = feature.to_vector();
            self.check_input(&x)?;
            h = self.step(&h, &x);
        }
        Ok(h)
    }

    /// Scores one candidate on top of an encoded history. Bit-identical to
    /// running [`GruModel::forward`] over the full sequence.
    pub fn score_candidate(&self, history_state: &DVector<f64>, candidate: &PairFeature) -> Result<f64> {
        let x = candidate.to_vector();
        self.check_input(&x)?;
        let h = self.step(history_state, &x);
        Ok(self.output(&h))
    }

    /// Writes the model in the binary format: magic, version, sizes, then
    /// every tensor (in [`GruModel::parameters`] order) as little-endian
    /// `f64`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.parameter_count() * 8);
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.hidden_size as u32).to_le_bytes());
        buf.extend_from_slice(&(self.input_size as u32).to_le_bytes());
        for tensor in self.parameters() {
            for v in tensor {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a model written by [`GruModel::save`], validating the header,
    /// the exact payload length, and that every parameter is finite.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 20 {
            return Err(Error::format("model file truncated before header end"));
        }
        if &bytes[0..8] != MODEL_MAGIC {
            return Err(Error::format("model file has wrong magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(Error::format(format!(
                "unsupported model version {version}, expected {MODEL_VERSION}"
            )));
        }
        let hidden = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let input = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        if hidden == 0 || input == 0 {
            return Err(Error::format("model file declares a zero dimension"));
        }
        let mut model = GruModel::zeros(hidden, input);
        let expected = 20 + model.parameter_count() * 8;
        if bytes.len() != expected {
            return Err(Error::format(format!(
                "model file holds {} bytes, expected {expected} for {hidden}x{input}",
                bytes.len()
            )));
        }
        let mut offset = 20;
        for tensor in model.parameters_mut() {
            for v in tensor.iter_mut() {
                let raw: [u8; 8] = bytes[offset..offset + 8].try_into().unwrap();
                *v = f64::from_le_bytes(raw);
                if !v.is_finite() {
                    return Err(Error::format("model file contains non-finite parameter"));
                }
                offset += 8;
            }
        }
        Ok(model)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
