//! The per-frame tracking loop: predict, score, assign, update, and manage
//! track birth and death.
//!
//! Each live track carries the similarity of its last association; that
//! value rescales the filter's noise on the next predict and update, so
//! confident matches tighten the filter while doubtful ones loosen it.
//! Numerical failures (overflowing states, degenerate boxes) delete the
//! offending track and are logged — they never abort the sequence.

use std::time::Instant;

use crate::appearance::Embedding;
use crate::association::{
    build_cost_matrix, candidate_feature, solve, AssociationMode, CostContext, CostMatrix,
    ExplicitWeights, TrackObservables,
};
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::{box_to_measurement, measurement_to_box, BoundingBox, Measurement};
use crate::gru::{GruModel, PairFeature, MAX_SEQUENCE_LEN};
use crate::kalman::{initiate, predict, update, MotionModelConfig};
use crate::mot::files::{FrameDetections, MotRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    /// Newly spawned; must be matched on `n_init` frames to be confirmed
    /// and is dropped on its first miss.
    Tentative,
    Confirmed,
    Deleted,
}

/// One tracked target.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u32,
    pub status: TrackStatus,
    pub state: crate::kalman::MotionState,
    /// Box of the last matched detection.
    pub last_box: BoundingBox,
    /// Velocity estimate one update earlier (for the acceleration term).
    pub previous_velocity: Option<(f64, f64)>,
    /// Appearance of the last matched detection carrying an embedding.
    pub embedding: Option<Embedding>,
    /// Recent matched features, oldest first.
    pub history: Vec<PairFeature>,
    /// Similarity of the last association; rescales filter noise.
    pub last_similarity: f64,
    /// Frames since the last successful update.
    pub frames_since_update: u32,
    /// Total successful updates.
    pub hit_count: u32,
}

#[derive(Debug, Clone)]
pub struct TrackerConfig {
    pub mode: AssociationMode,
    pub motion: MotionModelConfig,
    pub weights: ExplicitWeights,
    /// Matches required before a track is reported.
    pub n_init: u32,
    /// Misses tolerated before a confirmed track is dropped.
    pub max_age: u32,
    /// Detections below this confidence are discarded up front.
    pub min_confidence: f64,
    /// History steps kept per track for the recurrent scorer.
    pub history_length: usize,
    /// Frame dimensions the recurrent scorer normalizes by.
    pub image_size: (f64, f64),
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            mode: AssociationMode::Implicit,
            motion: MotionModelConfig::default(),
            weights: ExplicitWeights::default(),
            n_init: 3,
            max_age: 30,
            min_confidence: 0.0,
            history_length: MAX_SEQUENCE_LEN - 1,
            image_size: (1280.0, 720.0),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_init < 1 {
            return Err(Error::input("tracker config", "n_init must be at least 1"));
        }
        if self.max_age < 1 {
            return Err(Error::input("tracker config", "max_age must be at least 1"));
        }
        if self.history_length + 1 > MAX_SEQUENCE_LEN {
            return Err(Error::input(
                "tracker config",
                format!(
                    "history length {} leaves no room for the candidate in {MAX_SEQUENCE_LEN} steps",
                    self.history_length
                ),
            ));
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return Err(Error::input("tracker config", "non-positive image size"));
        }
        self.motion.validate()?;
        self.weights.validate()
    }
}

pub struct Tracker {
    cfg: TrackerConfig,
    model: Option<GruModel>,
    tracks: Vec<Track>,
    next_id: u32,
    last_frame: Option<u32>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, model: Option<GruModel>) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == AssociationMode::Implicit && model.is_none() {
            return Err(Error::input(
                "tracker",
                "implicit mode requires an association model",
            ));
        }
        Ok(Tracker {
            cfg,
            model,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
        })
    }

    /// Live (non-deleted) tracks.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Processes one frame and returns the result rows of every confirmed
    /// track matched in it. Frame numbers must be strictly increasing; gaps
    /// are allowed and coast the filter across the missing frames.
    pub fn step(&mut self, frame: u32, detections: &[Detection]) -> Result<Vec<MotRow>> {
        let gap = match self.last_frame {
            None => 1,
            Some(last) if frame > last => frame - last,
            Some(last) => {
                return Err(Error::input(
                    "tracker",
                    format!("frame {frame} does not advance past {last}"),
                ));
            }
        };
        self.last_frame = Some(frame);

        let detections: Vec<Detection> = detections
            .iter()
            .filter(|d| d.confidence >= self.cfg.min_confidence)
            .cloned()
            .collect();

        // Predict every live track to this frame with its own similarity.
        for track in &mut self.tracks {
            for _ in 0..gap {
                match predict(&track.state, &self.cfg.motion, track.last_similarity) {
                    Ok(state) => track.state = state,
                    Err(err) => {
                        log::warn!("track {} deleted: prediction failed: {err}", track.id);
                        track.status = TrackStatus::Deleted;
                        break;
                    }
                }
            }
        }

        // Snapshot the live tracks for cost evaluation; tracks whose
        // predicted state cannot even form a box are dropped here.
        // Confirmed and tentative tracks go to separate matching rounds.
        let mut live_confirmed: Vec<usize> = Vec::new();
        let mut observed_confirmed: Vec<TrackObservables> = Vec::new();
        let mut live_tentative: Vec<usize> = Vec::new();
        let mut observed_tentative: Vec<TrackObservables> = Vec::new();
        for (i, track) in self.tracks.iter_mut().enumerate() {
            if track.status == TrackStatus::Deleted {
                continue;
            }
            let obs = TrackObservables {
                state: track.state.clone(),
                last_box: track.last_box.clone(),
                previous_velocity: track.previous_velocity,
                embedding: track.embedding.clone(),
                history: track.history.clone(),
                frames_since_update: track.frames_since_update + gap,
            };
            match obs.predicted_box() {
                Ok(_) => {
                    if track.status == TrackStatus::Confirmed {
                        live_confirmed.push(i);
                        observed_confirmed.push(obs);
                    } else {
                        live_tentative.push(i);
                        observed_tentative.push(obs);
                    }
                }
                Err(err) => {
                    log::warn!("track {} deleted: degenerate prediction: {err}", track.id);
                    track.status = TrackStatus::Deleted;
                }
            }
        }

        let ctx = CostContext {
            motion: &self.cfg.motion,
            weights: &self.cfg.weights,
            model: self.model.as_ref(),
            image_size: self.cfg.image_size,
        };
        // Two matching rounds: confirmed tracks claim detections first, then
        // tentative tracks compete only for the leftovers. Without the split,
        // a newborn duplicate can outbid an established track on a thin score
        // margin and starve it.
        let (matched_confirmed, unmatched_confirmed, leftover) = match_stage(
            &mut self.tracks,
            live_confirmed,
            observed_confirmed,
            &detections,
            self.cfg.mode,
            &ctx,
        )?;
        let leftover_dets: Vec<Detection> =
            leftover.iter().map(|&c| detections[c].clone()).collect();
        let (matched_tentative, unmatched_tentative, unmatched_local) = match_stage(
            &mut self.tracks,
            live_tentative,
            observed_tentative,
            &leftover_dets,
            self.cfg.mode,
            &ctx,
        )?;

        let mut matched = matched_confirmed;
        matched.extend(
            matched_tentative
                .into_iter()
                .map(|(idx, c, cost, obs)| (idx, leftover[c], cost, obs)),
        );
        let unmatched_detections: Vec<usize> =
            unmatched_local.iter().map(|&c| leftover[c]).collect();
        let mut unmatched_tracks = unmatched_confirmed;
        unmatched_tracks.extend(unmatched_tentative);

        let mut output = Vec::new();
        for (idx, c, cost, obs) in &matched {
            let track = &mut self.tracks[*idx];
            let det = &detections[*c];
            let similarity = match self.cfg.mode {
                AssociationMode::Implicit => 1.0 - *cost,
                // No similarity signal in these modes; neutral keeps the
                // filter's base noise.
                _ => 0.5,
            };
            let z = box_to_measurement(&det.bbox);
            let predicted_velocity = (track.state.mean[4], track.state.mean[5]);
            match update(&track.state, &z, &self.cfg.motion, similarity) {
                Ok(state) => track.state = state,
                Err(err) => {
                    log::warn!("track {} deleted: update failed: {err}", track.id);
                    track.status = TrackStatus::Deleted;
                    continue;
                }
            }
            track.previous_velocity = Some(predicted_velocity);
            track.last_similarity = similarity;
            track.frames_since_update = 0;
            track.hit_count += 1;
            if det.embedding.is_some() {
                if let Ok(feature) = candidate_feature(obs, det, self.cfg.image_size) {
                    track.history.push(feature);
                    let extra = track.history.len().saturating_sub(self.cfg.history_length);
                    track.history.drain(..extra);
                }
                track.embedding = det.embedding.clone();
            }
            track.last_box = det.bbox.clone();
            if track.status == TrackStatus::Tentative && track.hit_count >= self.cfg.n_init {
                track.status = TrackStatus::Confirmed;
            }
            if track.status == TrackStatus::Confirmed {
                if let Some(row) = state_row(track, frame) {
                    output.push(row);
                }
            }
        }

        // Births: every unclaimed detection opens a tentative track.
        for &c in &unmatched_detections {
            let det = &detections[c];
            let z = box_to_measurement(&det.bbox);
            let history = det
                .embedding
                .as_ref()
                .and_then(|e| {
                    PairFeature::from_box(&det.bbox, None, e.clone(), self.cfg.image_size).ok()
                })
                .map(|f| vec![f])
                .unwrap_or_default();
            let status = if self.cfg.n_init <= 1 {
                TrackStatus::Confirmed
            } else {
                TrackStatus::Tentative
            };
            let track = Track {
                id: self.next_id,
                status,
                state: initiate(&z, &self.cfg.motion),
                last_box: det.bbox.clone(),
                previous_velocity: None,
                embedding: det.embedding.clone(),
                history,
                last_similarity: 0.5,
                frames_since_update: 0,
                hit_count: 1,
            };
            self.next_id += 1;
            if status == TrackStatus::Confirmed {
                if let Some(row) = state_row(&track, frame) {
                    output.push(row);
                }
            }
            self.tracks.push(track);
        }

        // Aging and deletion of the unmatched.
        for &idx in &unmatched_tracks {
            let track = &mut self.tracks[idx];
            track.frames_since_update += gap;
            // A miss carries no association to take a similarity from, so
            // coasting predictions fall back to the base noise (a confident
            // last match would otherwise keep the search cone too tight to
            // ever reacquire the target).
            track.last_similarity = 0.5;
            match track.status {
                TrackStatus::Tentative => track.status = TrackStatus::Deleted,
                TrackStatus::Confirmed if track.frames_since_update > self.cfg.max_age => {
                    track.status = TrackStatus::Deleted;
                }
                _ => {}
            }
        }

        self.tracks.retain(|t| t.status != TrackStatus::Deleted);
        output.sort_by_key(|row| row.id);
        Ok(output)
    }
}

/// One matching round over a subset of tracks. `live` maps matrix rows to
/// indices into `tracks`. Builds the cost matrix — salvaging by deleting
/// tracks whose costs cannot be evaluated — and solves it. Returns matches as
/// (track index, detection column, cost, observables snapshot), then
/// unmatched track indices, then unmatched detection columns.
#[allow(clippy::type_complexity)]
fn match_stage(
    tracks: &mut [Track],
    mut live: Vec<usize>,
    mut observed: Vec<TrackObservables>,
    detections: &[Detection],
    mode: AssociationMode,
    ctx: &CostContext<'_>,
) -> Result<(
    Vec<(usize, usize, f64, TrackObservables)>,
    Vec<usize>,
    Vec<usize>,
)> {
    let matrix = match build_cost_matrix(&observed, detections, mode, ctx) {
        Ok(matrix) => matrix,
        Err(_) => {
            // Rare: isolate the failing rows, delete those tracks, and
            // assemble the matrix from the survivors.
            let mut rows: Vec<Vec<(f64, bool)>> = Vec::new();
            let mut kept: Vec<usize> = Vec::new();
            let mut kept_obs: Vec<TrackObservables> = Vec::new();
            for (slot, obs) in observed.iter().enumerate() {
                match build_cost_matrix(std::slice::from_ref(obs), detections, mode, ctx) {
                    Ok(row) => {
                        rows.push(
                            (0..detections.len())
                                .map(|c| (row.cost(0, c), row.is_gated(0, c)))
                                .collect(),
                        );
                        kept.push(live[slot]);
                        kept_obs.push(obs.clone());
                    }
                    Err(err) => {
                        let track = &mut tracks[live[slot]];
                        log::warn!("track {} deleted: cost evaluation failed: {err}", track.id);
                        track.status = TrackStatus::Deleted;
                    }
                }
            }
            live = kept;
            observed = kept_obs;
            CostMatrix::from_fn(live.len(), detections.len(), |r, c| rows[r][c])?
        }
    };

    let assignment = solve(&matrix);
    let mut matched = Vec::with_capacity(assignment.matches.len());
    for &(r, c) in &assignment.matches {
        matched.push((live[r], c, matrix.cost(r, c), observed[r].clone()));
    }
    let unmatched_tracks = assignment
        .unmatched_tracks
        .iter()
        .map(|&r| live[r])
        .collect();
    Ok((matched, unmatched_tracks, assignment.unmatched_detections))
}

/// Result row from a track's current (updated) state.
fn state_row(track: &Track, frame: u32) -> Option<MotRow> {
    let m = track.state.mean;
    let z = Measurement::new(m[0], m[1], m[2], m[3]).ok()?;
    Some(MotRow {
        frame,
        id: i64::from(track.id),
        bbox: measurement_to_box(&z),
        confidence: 1.0,
    })
}

/// A full tracking run over pre-grouped frames.
#[derive(Debug)]
pub struct SequenceResult {
    pub rows: Vec<MotRow>,
    pub frames: usize,
    pub seconds: f64,
    /// Frames per second of wall-clock processing.
    pub fps: f64,
}

/// Runs the tracker over every frame batch in order and reports timing.
pub fn run_sequence(
    frames: &[FrameDetections],
    cfg: &TrackerConfig,
    model: Option<&GruModel>,
) -> Result<SequenceResult> {
    let mut tracker = Tracker::new(cfg.clone(), model.cloned())?;
    let start = Instant::now();
    let mut rows = Vec::new();
    for batch in frames {
        rows.extend(tracker.step(batch.frame, &batch.detections)?);
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(SequenceResult {
        frames: frames.len(),
        fps: if seconds > 0.0 {
            frames.len() as f64 / seconds
        } else {
            0.0
        },
        seconds,
        rows,
    })
}
