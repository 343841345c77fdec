//! Turning track/detection pairs into assignment costs.
//!
//! Four interchangeable ways to fill the cost matrix — plain overlap,
//! overlap plus motion, a weighted sum of explicit mismatch terms, and the
//! learned recurrent similarity — all gated by the squared Mahalanobis
//! distance of the motion filter, then solved by the Hungarian algorithm
//! in [`hungarian`].

pub mod hungarian;

pub use hungarian::{hungarian as solve, Assignment, CostMatrix};

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::appearance::{appearance_distance, Embedding};
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::{box_to_measurement, iou, measurement_to_box, BoundingBox, Measurement};
use crate::gru::{GruModel, PairFeature};
use crate::kalman::{gate, initiate, mahalanobis, predict, update, MotionModelConfig, MotionState};
use crate::mot::files::MotRow;
use crate::parallel;

/// How cost-matrix cells are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssociationMode {
    /// `1 − IoU` against the track's last observed box; no motion model
    /// beyond the shared gate.
    IouOnly,
    /// `1 − IoU` against the predicted box, plus the gate-normalized
    /// Mahalanobis distance.
    IouMotion,
    /// Weighted sum of squared mismatch terms (distance, overlap, velocity,
    /// acceleration, appearance).
    Explicit,
    /// `1 − similarity` from the recurrent association network.
    Implicit,
}

impl FromStr for AssociationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "iou" | "iou_only" => Ok(AssociationMode::IouOnly),
            "iou+motion" | "iou_motion" => Ok(AssociationMode::IouMotion),
            "explicit" => Ok(AssociationMode::Explicit),
            "implicit" => Ok(AssociationMode::Implicit),
            other => Err(Error::input(
                "association mode",
                format!("unknown mode '{other}' (expected iou, iou+motion, explicit or implicit)"),
            )),
        }
    }
}

impl fmt::Display for AssociationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AssociationMode::IouOnly => "iou",
            AssociationMode::IouMotion => "iou+motion",
            AssociationMode::Explicit => "explicit",
            AssociationMode::Implicit => "implicit",
        })
    }
}

/// Term weights of the explicit cost. The Mahalanobis term is the
/// reference and always enters with weight 1.
#[derive(Debug, Clone)]
pub struct ExplicitWeights {
    pub lambda_iou: f64,
    pub lambda_v: f64,
    pub lambda_a: f64,
    pub lambda_f: f64,
    /// Score overlap as `+λ·IoU²` instead of the default mismatch form
    /// `λ·(1−IoU)²`. With this set, more overlap costs more — kept only
    /// for comparison runs.
    pub literal_iou: bool,
}

impl Default for ExplicitWeights {
    fn default() -> Self {
        ExplicitWeights {
            lambda_iou: 1.0,
            lambda_v: 1.0,
            lambda_a: 1.0,
            lambda_f: 1.0,
            literal_iou: false,
        }
    }
}

impl ExplicitWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_iou", self.lambda_iou),
            ("lambda_v", self.lambda_v),
            ("lambda_a", self.lambda_a),
            ("lambda_f", self.lambda_f),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::input(
                    "explicit weights",
                    format!("{name} = {v} is not a non-negative finite number"),
                ));
            }
        }
        Ok(())
    }
}

/// Snapshot of one track as the cost functions see it.
#[derive(Debug, Clone)]
pub struct TrackObservables {
    /// State predicted to the current frame.
    pub state: MotionState,
    /// Box from the most recent successful update.
    pub last_box: BoundingBox,
    /// Velocity estimate one update earlier; feeds the acceleration term
    /// and is absent until the track has been updated twice.
    pub previous_velocity: Option<(f64, f64)>,
    /// Appearance of the last matched detection.
    pub embedding: Option<Embedding>,
    /// Recent pair features, oldest first, for the recurrent scorer.
    pub history: Vec<PairFeature>,
    /// Frames since the last successful update (≥ 1 during matching).
    pub frames_since_update: u32,
}

impl TrackObservables {
    /// Box implied by the predicted state.
    pub fn predicted_box(&self) -> Result<BoundingBox> {
        let m = self.state.mean;
        let z = Measurement::new(m[0], m[1], m[2], m[3])?;
        Ok(measurement_to_box(&z))
    }

    /// Current velocity estimate of the predicted state.
    pub fn velocity(&self) -> (f64, f64) {
        (self.state.mean[4], self.state.mean[5])
    }
}

/// Weighted sum of squared mismatch terms between a predicted track and a
/// detection: squared Mahalanobis distance, overlap mismatch, velocity
/// mismatch against the finite-difference velocity the association would
/// imply, acceleration mismatch (that implied velocity against the track's
/// previous velocity estimate, differenced over the frame gap), and squared
/// appearance distance. Terms with zero weight are skipped entirely, so
/// embeddings are only required when `lambda_f > 0`.
pub fn explicit_cost(
    track: &TrackObservables,
    detection: &Detection,
    weights: &ExplicitWeights,
    cfg: &MotionModelConfig,
) -> Result<f64> {
    weights.validate()?;
    let z = box_to_measurement(&detection.bbox);
    let mut cost = mahalanobis(&track.state, &z, cfg)?;
    let dt = track.frames_since_update.max(1) as f64;

    if weights.lambda_iou > 0.0 {
        let overlap = iou(&track.predicted_box()?, &detection.bbox);
        let term = if weights.literal_iou {
            overlap * overlap
        } else {
            (1.0 - overlap) * (1.0 - overlap)
        };
        cost += weights.lambda_iou * term;
    }

    let (lu, lv) = track.last_box.center();
    let (zu, zv) = detection.bbox.center();
    let implied = ((zu - lu) / dt, (zv - lv) / dt);

    if weights.lambda_v > 0.0 {
        let (vu, vv) = track.velocity();
        let (du, dv) = (vu - implied.0, vv - implied.1);
        cost += weights.lambda_v * (du * du + dv * dv);
    }
    if weights.lambda_a > 0.0 {
        if let Some((pu, pv)) = track.previous_velocity {
            let (au, av) = ((implied.0 - pu) / dt, (implied.1 - pv) / dt);
            cost += weights.lambda_a * (au * au + av * av);
        }
    }
    if weights.lambda_f > 0.0 {
        let (Some(te), Some(de)) = (&track.embedding, &detection.embedding) else {
            return Err(Error::input(
                "explicit cost",
                "appearance term enabled but an embedding is missing",
            ));
        };
        let df = appearance_distance(te, de);
        cost += weights.lambda_f * df * df;
    }

    if cost.is_finite() {
        Ok(cost)
    } else {
        Err(Error::numerical(format!(
            "explicit cost not finite ({cost})"
        )))
    }
}

/// Builds the final sequence step for scoring a detection against a track.
pub fn candidate_feature(
    track: &TrackObservables,
    detection: &Detection,
    image_size: (f64, f64),
) -> Result<PairFeature> {
    let Some(embedding) = &detection.embedding else {
        return Err(Error::input(
            "candidate feature",
            "detection has no embedding",
        ));
    };
    PairFeature::from_box(
        &detection.bbox,
        Some((&track.last_box, track.frames_since_update.max(1))),
        embedding.clone(),
        image_size,
    )
}

/// `1 − similarity` on top of an encoded track history; the encoding is
/// computed once per track and shared across its row of candidates.
pub fn implicit_cost(
    model: &GruModel,
    history_state: &DVector<f64>,
    candidate: &PairFeature,
) -> Result<f64> {
    Ok(1.0 - model.score_candidate(history_state, candidate)?)
}

/// Read-only inputs shared by every cell of one matrix.
#[derive(Clone, Copy)]
pub struct CostContext<'a> {
    pub motion: &'a MotionModelConfig,
    pub weights: &'a ExplicitWeights,
    /// Required for [`AssociationMode::Implicit`], ignored otherwise.
    pub model: Option<&'a GruModel>,
    /// Frame dimensions the recurrent scorer normalizes by.
    pub image_size: (f64, f64),
}

/// Fills the tracks × detections cost matrix for the chosen mode. Every
/// cell is first gated on squared Mahalanobis distance; gated cells skip
/// their (possibly expensive) cost evaluation entirely. Rows are filled in
/// parallel; costs do not depend on evaluation order, so the result is
/// identical either way.
pub fn build_cost_matrix(
    tracks: &[TrackObservables],
    detections: &[Detection],
    mode: AssociationMode,
    ctx: &CostContext<'_>,
) -> Result<CostMatrix> {
    if mode == AssociationMode::Implicit && ctx.model.is_none() {
        return Err(Error::input(
            "cost matrix",
            "implicit mode requires an association model",
        ));
    }
    let rows: Vec<Result<Vec<(f64, bool)>>> =
        parallel::map_slice(tracks, |track| row_costs(track, detections, mode, ctx));
    let cells = rows.into_iter().collect::<Result<Vec<_>>>()?;
    CostMatrix::from_fn(tracks.len(), detections.len(), |r, c| cells[r][c])
}

fn row_costs(
    track: &TrackObservables,
    detections: &[Detection],
    mode: AssociationMode,
    ctx: &CostContext<'_>,
) -> Result<Vec<(f64, bool)>> {
    let encoded = match (mode, ctx.model) {
        (AssociationMode::Implicit, Some(model)) => Some(model.encode_history(&track.history)?),
        _ => None,
    };
    let mut row = Vec::with_capacity(detections.len());
    for det in detections {
        let z = box_to_measurement(&det.bbox);
        let m2 = mahalanobis(&track.state, &z, ctx.motion)?;
        if !gate(m2, ctx.motion) {
            // Never read by the solver; keep it finite and uniform.
            row.push((0.0, true));
            continue;
        }
        let cost = match mode {
            AssociationMode::IouOnly => 1.0 - iou(&track.last_box, &det.bbox),
            AssociationMode::IouMotion => {
                let overlap = iou(&track.predicted_box()?, &det.bbox);
                (1.0 - overlap) + (m2 / ctx.motion.gate_threshold).sqrt()
            }
            AssociationMode::Explicit => explicit_cost(track, det, ctx.weights, ctx.motion)?,
            AssociationMode::Implicit => {
                let model = ctx.model.expect("checked by build_cost_matrix");
                let feature = candidate_feature(track, det, ctx.image_size)?;
                implicit_cost(model, encoded.as_ref().expect("encoded above"), &feature)?
            }
        };
        row.push((cost, false));
    }
    Ok(row)
}

/// The five squared mismatch terms of the explicit cost, in weight order:
/// Mahalanobis, overlap, velocity, acceleration, appearance.
pub type ExplicitTerms = [f64; 5];

/// Computes the raw explicit terms for one pair; used to fit weights.
/// Unlike [`explicit_cost`] this always evaluates the appearance term and
/// therefore requires embeddings on both sides.
pub fn explicit_terms(
    track: &TrackObservables,
    detection: &Detection,
    cfg: &MotionModelConfig,
) -> Result<ExplicitTerms> {
    let (Some(te), Some(de)) = (&track.embedding, &detection.embedding) else {
        return Err(Error::input("explicit terms", "embedding missing"));
    };
    let z = box_to_measurement(&detection.bbox);
    let m2 = mahalanobis(&track.state, &z, cfg)?;
    let overlap = iou(&track.predicted_box()?, &detection.bbox);
    let dt = track.frames_since_update.max(1) as f64;
    let (lu, lv) = track.last_box.center();
    let (zu, zv) = detection.bbox.center();
    let implied = ((zu - lu) / dt, (zv - lv) / dt);
    let (vu, vv) = track.velocity();
    let (du, dv) = (vu - implied.0, vv - implied.1);
    let accel2 = match track.previous_velocity {
        Some((pu, pv)) => {
            let (au, av) = ((implied.0 - pu) / dt, (implied.1 - pv) / dt);
            au * au + av * av
        }
        None => 0.0,
    };
    let df = appearance_distance(te, de);
    Ok([
        m2,
        (1.0 - overlap) * (1.0 - overlap),
        du * du + dv * dv,
        accel2,
        df * df,
    ])
}

/// Extracts labeled explicit-term vectors from a ground-truth table and
/// aligned detections. A measurement-driven filter runs along each
/// ground-truth track (so predicted states and velocities are realistic),
/// and each frame's candidate detection is labeled with the same
/// overlap rule the sequence miner uses.
pub fn mine_explicit_terms(
    gt: &[MotRow],
    detections: &[MotRow],
    embeddings: &[Embedding],
    cfg: &MotionModelConfig,
    iou_positive: f64,
) -> Result<Vec<(ExplicitTerms, bool)>> {
    if detections.len() != embeddings.len() {
        return Err(Error::input(
            "explicit term mining",
            format!(
                "{} detections but {} embeddings",
                detections.len(),
                embeddings.len()
            ),
        ));
    }
    let mut det_frames: std::collections::BTreeMap<u32, Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        det_frames.entry(d.frame).or_default().push(i);
    }
    let mut tracks: std::collections::BTreeMap<i64, Vec<&MotRow>> =
        std::collections::BTreeMap::new();
    for row in gt {
        tracks.entry(row.id).or_default().push(row);
    }

    struct Reference {
        state: MotionState,
        frame: u32,
        last_box: BoundingBox,
        previous_velocity: Option<(f64, f64)>,
        embedding: Option<Embedding>,
    }

    let mut out = Vec::new();
    for (_, mut rows) in tracks {
        rows.sort_by_key(|r| r.frame);
        let mut reference: Option<Reference> = None;
        for row in rows {
            let z = box_to_measurement(&row.bbox);
            if let Some(r) = &mut reference {
                let gap = row.frame.saturating_sub(r.frame).max(1);
                let mut state = r.state.clone();
                for _ in 0..gap {
                    state = predict(&state, cfg, 0.5)?;
                }
                if let (Some(frame_dets), Some(_)) = (det_frames.get(&row.frame), &r.embedding) {
                    let observables = TrackObservables {
                        state: state.clone(),
                        last_box: r.last_box.clone(),
                        previous_velocity: r.previous_velocity,
                        embedding: r.embedding.clone(),
                        history: Vec::new(),
                        frames_since_update: gap,
                    };
                    if let Some((idx, label)) =
                        crate::gru::mining::select_candidate(row, frame_dets, detections, iou_positive)
                    {
                        let det = Detection::new(
                            detections[idx].bbox.clone(),
                            detections[idx].confidence,
                            Some(embeddings[idx].clone()),
                        );
                        out.push((explicit_terms(&observables, &det, cfg)?, label));
                        if label {
                            r.embedding = Some(embeddings[idx].clone());
                        }
                    }
                }
                r.previous_velocity = Some((state.mean[4], state.mean[5]));
                r.state = update(&state, &z, cfg, 0.5)?;
                r.frame = row.frame;
                r.last_box = row.bbox.clone();
            } else {
                // Seed the track appearance from its best first-frame match.
                let embedding = det_frames.get(&row.frame).and_then(|frame_dets| {
                    crate::gru::mining::select_candidate(row, frame_dets, detections, iou_positive)
                        .filter(|&(_, label)| label)
                        .map(|(idx, _)| embeddings[idx].clone())
                });
                reference = Some(Reference {
                    state: initiate(&z, cfg),
                    frame: row.frame,
                    last_box: row.bbox.clone(),
                    previous_velocity: None,
                    embedding,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::input(
            "explicit term mining",
            "no labeled pairs could be mined",
        ));
    }
    Ok(out)
}

/// Fits the explicit weights by logistic regression on labeled term
/// vectors: positives should receive low cost, so the model is
/// `P(match) = σ(b − Σ wₖ·termₖ)`, fitted by full-batch gradient descent
/// on standardized features. The fitted weights are normalized so the
/// Mahalanobis term keeps weight 1 and clamped to be non-negative. If the
/// data leaves the Mahalanobis direction uninformative (weight ≤ 0) the
/// defaults are returned instead.
pub fn fit_explicit_weights(samples: &[(ExplicitTerms, bool)]) -> Result<ExplicitWeights> {
    let positives = samples.iter().filter(|(_, l)| *l).count();
    if positives == 0 || positives == samples.len() {
        return Err(Error::input(
            "weight fitting",
            format!(
                "need both labels, got {positives} positives of {}",
                samples.len()
            ),
        ));
    }

    // Standardize by mean absolute value so one learning rate fits all
    // terms regardless of their raw scale.
    let n = samples.len() as f64;
    let mut scale = [0.0f64; 5];
    for (terms, _) in samples {
        for (s, t) in scale.iter_mut().zip(terms) {
            *s += t.abs();
        }
    }
    for s in &mut scale {
        *s = (*s / n).max(1e-12);
    }

    let mut w = [0.0f64; 5];
    let mut bias = 0.0f64;
    let lr = 0.5;
    for _ in 0..2000 {
        let mut gw = [0.0f64; 5];
        let mut gb = 0.0f64;
        for (terms, label) in samples {
            let mut logit = bias;
            for k in 0..5 {
                logit -= w[k] * terms[k] / scale[k];
            }
            let p = 1.0 / (1.0 + (-logit).exp());
            let err = p - if *label { 1.0 } else { 0.0 };
            gb += err;
            for k in 0..5 {
                gw[k] -= err * terms[k] / scale[k];
            }
        }
        bias -= lr * gb / n;
        for k in 0..5 {
            w[k] -= lr * gw[k] / n;
        }
    }

    let raw: Vec<f64> = (0..5).map(|k| w[k] / scale[k]).collect();
    if !(raw[0] > 1e-12) {
        log::warn!(
            "fitted Mahalanobis weight {:.3e} not positive; keeping default weights",
            raw[0]
        );
        return Ok(ExplicitWeights::default());
    }
    let lambda = |k: usize| (raw[k] / raw[0]).max(0.0);
    let weights = ExplicitWeights {
        lambda_iou: lambda(1),
        lambda_v: lambda(2),
        lambda_a: lambda(3),
        lambda_f: lambda(4),
        literal_iou: false,
    };
    weights.validate()?;
    Ok(weights)
}
