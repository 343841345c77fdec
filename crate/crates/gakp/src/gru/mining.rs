//! Mining labeled association sequences from detections and ground truth.
//!
//! For every ground-truth box, the highest-confidence detection overlapping
//! it by more than the positive threshold becomes a positive candidate; if
//! instead the best available overlap is strictly below that threshold (but
//! nonzero), that best-overlap detection becomes a hard negative. Each
//! candidate is packaged with the track's recent history — the positive
//! detections matched to it on earlier frames — into a training sequence,
//! and a configurable number of jittered copies imitate crop variation.

use std::collections::BTreeMap;

use rand::Rng;

use crate::appearance::{perturb, stream_rng, Embedding};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::gru::{AssociationSample, PairFeature, MAX_SEQUENCE_LEN};
use crate::mot::files::MotRow;

#[derive(Debug, Clone)]
pub struct MiningConfig {
    /// Overlap above which a detection can be the true continuation.
    pub iou_positive: f64,
    /// History steps kept before the candidate.
    pub history_length: usize,
    /// Jittered copies added per mined sample.
    pub augmentations: usize,
    /// Scale range for candidate-box jitter, about the box center.
    pub scale_jitter: (f64, f64),
    /// Appearance noise for jittered copies.
    pub appearance_sigma: f64,
    /// Width and height the spatial features are normalized by.
    pub image_size: (f64, f64),
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            iou_positive: 0.5,
            history_length: MAX_SEQUENCE_LEN - 1,
            augmentations: 2,
            scale_jitter: (0.8, 1.2),
            appearance_sigma: 0.02,
            image_size: (1280.0, 720.0),
            seed: 7,
        }
    }
}

impl MiningConfig {
    fn validate(&self) -> Result<()> {
        if !(self.iou_positive > 0.0 && self.iou_positive < 1.0) {
            return Err(Error::input(
                "mining config",
                format!("positive threshold {} outside (0, 1)", self.iou_positive),
            ));
        }
        if self.history_length + 1 > MAX_SEQUENCE_LEN {
            return Err(Error::input(
                "mining config",
                format!(
                    "history length {} leaves no room for the candidate in {MAX_SEQUENCE_LEN} steps",
                    self.history_length
                ),
            ));
        }
        let (lo, hi) = self.scale_jitter;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::input(
                "mining config",
                format!("scale jitter range ({lo}, {hi}) invalid"),
            ));
        }
        if !(self.appearance_sigma >= 0.0) {
            return Err(Error::input("mining config", "negative appearance sigma"));
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return Err(Error::input("mining config", "non-positive image size"));
        }
        Ok(())
    }
}

/// Mined samples plus the label balance, which training wants to know.
#[derive(Debug)]
pub struct MinedSamples {
    pub samples: Vec<AssociationSample>,
    pub positives: usize,
    pub negatives: usize,
}

/// Builds labeled sequences from a ground-truth table and a detection table
/// whose embeddings are aligned by index. Tracks are visited in ascending
/// identity order and frames in ascending order, so output order — and with
/// a fixed seed, content — is fully deterministic.
pub fn mine_training_pairs(
    gt: &[MotRow],
    detections: &[MotRow],
    embeddings: &[Embedding],
    cfg: &MiningConfig,
) -> Result<MinedSamples> {
    cfg.validate()?;
    if detections.len() != embeddings.len() {
        return Err(Error::input(
            "mining",
            format!(
                "{} detections but {} embeddings",
                detections.len(),
                embeddings.len()
            ),
        ));
    }

    // Detections per frame, keeping indices so embeddings stay attached.
    let mut det_frames: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        det_frames.entry(d.frame).or_default().push(i);
    }
    let mut tracks: BTreeMap<i64, Vec<&MotRow>> = BTreeMap::new();
    for row in gt {
        tracks.entry(row.id).or_default().push(row);
    }
    if !tracks
        .values()
        .flatten()
        .any(|r| det_frames.contains_key(&r.frame))
    {
        return Err(Error::input(
            "mining",
            "ground truth and detections share no frames",
        ));
    }

    let mut rng = stream_rng(&[cfg.seed, u64::from_le_bytes(*b"pairmine")]);
    let mut out = MinedSamples {
        samples: Vec::new(),
        positives: 0,
        negatives: 0,
    };

    for (_, mut rows) in tracks {
        rows.sort_by_key(|r| r.frame);
        // Matched positives so far: their features (velocity already baked
        // in) plus box and frame for the candidate's velocity block.
        let mut history: Vec<(u32, BoundingBox, PairFeature)> = Vec::new();

        for row in rows {
            let Some(frame_dets) = det_frames.get(&row.frame) else {
                continue;
            };
            let candidate = select_candidate(row, frame_dets, detections, cfg.iou_positive);
            let Some((det_index, label)) = candidate else {
                continue;
            };
            let det = &detections[det_index];
            let embedding = &embeddings[det_index];

            let start = history.len().saturating_sub(cfg.history_length);
            let window = &history[start..];
            let previous = window.last().map(|(f, b, _)| (b, row.frame - f));

            let feature = PairFeature::from_box(
                &det.bbox,
                previous.map(|(b, gap)| (b, gap)),
                embedding.clone(),
                cfg.image_size,
            )?;
            let mut sequence: Vec<PairFeature> =
                window.iter().map(|(_, _, f)| f.clone()).collect();
            sequence.push(feature.clone());
            out.samples.push(AssociationSample::new(sequence, label)?);

            for _ in 0..cfg.augmentations {
                let scale = rng.random_range(cfg.scale_jitter.0..=cfg.scale_jitter.1);
                let jittered = scale_about_center(&det.bbox, scale)?;
                let noisy = perturb(embedding, cfg.appearance_sigma, &mut rng);
                let jittered_feature = PairFeature::from_box(
                    &jittered,
                    previous.map(|(b, gap)| (b, gap)),
                    noisy,
                    cfg.image_size,
                )?;
                let mut sequence: Vec<PairFeature> =
                    window.iter().map(|(_, _, f)| f.clone()).collect();
                sequence.push(jittered_feature);
                out.samples.push(AssociationSample::new(sequence, label)?);
            }

            let emitted = 1 + cfg.augmentations;
            if label {
                out.positives += emitted;
                history.push((row.frame, det.bbox.clone(), feature));
            } else {
                out.negatives += emitted;
            }
        }
    }
    Ok(out)
}

/// Applies the mining rule to one ground-truth box: the detection index and
/// label, or `None` when nothing overlaps (or the best overlap sits exactly
/// on the threshold, which neither rule claims). Shared with the explicit
/// weight fitting so both mine identical labels.
pub(crate) fn select_candidate(
    gt: &MotRow,
    frame_dets: &[usize],
    detections: &[MotRow],
    iou_positive: f64,
) -> Option<(usize, bool)> {
    let mut best_positive: Option<(usize, f64)> = None; // by confidence
    let mut best_overlap: Option<(usize, f64)> = None; // by IoU
    for &i in frame_dets {
        let overlap = iou(&gt.bbox, &detections[i].bbox);
        if overlap > iou_positive
            && best_positive.is_none_or(|(_, conf)| detections[i].confidence > conf)
        {
            best_positive = Some((i, detections[i].confidence));
        }
        if overlap > 0.0 && best_overlap.is_none_or(|(_, o)| overlap > o) {
            best_overlap = Some((i, overlap));
        }
    }
    if let Some((i, _)) = best_positive {
        return Some((i, true));
    }
    match best_overlap {
        Some((i, o)) if o < iou_positive => Some((i, false)),
        _ => None,
    }
}

fn scale_about_center(bbox: &BoundingBox, scale: f64) -> Result<BoundingBox> {
    let (u, v) = bbox.center();
    let w = bbox.width * scale;
    let h = bbox.height * scale;
    BoundingBox::new(u - w / 2.0, v - h / 2.0, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::EmbeddingSynthesizer;
    use crate::mot::synth::{generate_synthetic, SyntheticSceneConfig};
    use approx::assert_relative_eq;

    fn gt_row(frame: u32, id: i64, left: f64, top: f64, w: f64, h: f64) -> MotRow {
        MotRow {
            frame,
            id,
            bbox: BoundingBox::new(left, top, w, h).unwrap(),
            confidence: 1.0,
        }
    }

    fn det_row(frame: u32, left: f64, top: f64, w: f64, h: f64, conf: f64) -> MotRow {
        MotRow {
            frame,
            id: -1,
            bbox: BoundingBox::new(left, top, w, h).unwrap(),
            confidence: conf,
        }
    }

    fn embeddings_for(n: usize) -> Vec<Embedding> {
        let synth = EmbeddingSynthesizer::new(99);
        (0..n).map(|i| synth.draw(i as u64, 0, 0.02)).collect()
    }

    fn no_augment() -> MiningConfig {
        MiningConfig {
            augmentations: 0,
            ..MiningConfig::default()
        }
    }

    #[test]
    fn identical_detection_is_one_positive() {
        let gt = vec![gt_row(1, 5, 100.0, 100.0, 40.0, 80.0)];
        let dets = vec![det_row(1, 100.0, 100.0, 40.0, 80.0, 1.0)];
        let embs = embeddings_for(1);
        let mined = mine_training_pairs(&gt, &dets, &embs, &no_augment()).unwrap();
        assert_eq!(mined.positives, 1);
        assert_eq!(mined.negatives, 0);
        assert_eq!(mined.samples.len(), 1);
        assert!(mined.samples[0].label);
        assert_eq!(mined.samples[0].sequence.len(), 1);
    }

    #[test]
    fn weak_best_overlap_is_one_negative() {
        // Shift by 20 px: intersection 20*80 = 1600, union 4800, IoU = 1/3.
        let gt = vec![gt_row(1, 5, 100.0, 100.0, 40.0, 80.0)];
        let dets = vec![det_row(1, 120.0, 100.0, 40.0, 80.0, 0.9)];
        assert_relative_eq!(iou(&gt[0].bbox, &dets[0].bbox), 1.0 / 3.0);
        let embs = embeddings_for(1);
        let mined = mine_training_pairs(&gt, &dets, &embs, &no_augment()).unwrap();
        assert_eq!(mined.positives, 0);
        assert_eq!(mined.negatives, 1);
        assert!(!mined.samples[0].label);
    }

    #[test]
    fn no_overlap_yields_nothing_and_threshold_tie_is_dropped() {
        let gt = vec![gt_row(1, 5, 100.0, 100.0, 40.0, 80.0)];
        // Far away: no sample at all (frame shared, so no input error).
        let dets = vec![det_row(1, 900.0, 500.0, 40.0, 80.0, 0.9)];
        let embs = embeddings_for(1);
        let mined = mine_training_pairs(&gt, &dets, &embs, &no_augment()).unwrap();
        assert!(mined.samples.is_empty());

        // IoU exactly at the threshold satisfies neither strict inequality.
        // A contained box of half the area gives IoU = 0.5 exactly in
        // floating point (1600 / 3200).
        let dets = vec![det_row(1, 100.0, 100.0, 40.0, 40.0, 0.9)];
        assert_eq!(iou(&gt[0].bbox, &dets[0].bbox), 0.5);
        let mined = mine_training_pairs(&gt, &dets, &embs, &no_augment()).unwrap();
        assert!(mined.samples.is_empty());
    }

    #[test]
    fn positive_prefers_confidence_negative_prefers_overlap() {
        let gt = vec![gt_row(1, 5, 100.0, 100.0, 40.0, 80.0)];
        // Both overlap well; the slightly worse-overlapping one has higher
        // confidence and must win the positive slot.
        let dets = vec![
            det_row(1, 100.0, 100.0, 40.0, 80.0, 0.6),
            det_row(1, 102.0, 100.0, 40.0, 80.0, 0.9),
        ];
        let embs = embeddings_for(2);
        let mined = mine_training_pairs(&gt, &dets, &embs, &no_augment()).unwrap();
        assert_eq!(mined.samples.len(), 1);
        assert!(mined.samples[0].label);
        assert_eq!(
            mined.samples[0].sequence[0].appearance.values(),
            embs[1].values()
        );

        // Both weak; the larger overlap must win the negative slot even at
        // lower confidence.
        let dets = vec![
            det_row(1, 125.0, 100.0, 40.0, 80.0, 0.9),
            det_row(1, 122.0, 100.0, 40.0, 80.0, 0.2),
        ];
        let mined = mine_training_pairs(&gt, &dets, &embs, &no_augment()).unwrap();
        assert_eq!(mined.samples.len(), 1);
        assert!(!mined.samples[0].label);
        assert_eq!(
            mined.samples[0].sequence[0].appearance.values(),
            embs[1].values()
        );
    }

    #[test]
    fn history_accumulates_from_positives_only() {
        // Track moving right 5 px/frame, detected well on frames 1-9 except
        // a weak-overlap frame 4 (negative) and a missing frame 5.
        let mut gt = Vec::new();
        let mut dets = Vec::new();
        for f in 1..=9u32 {
            let x = 100.0 + 5.0 * f as f64;
            gt.push(gt_row(f, 1, x, 100.0, 40.0, 80.0));
            match f {
                4 => dets.push(det_row(f, x + 25.0, 100.0, 40.0, 80.0, 0.9)),
                5 => {}
                _ => dets.push(det_row(f, x + 1.0, 100.0, 40.0, 80.0, 0.9)),
            }
        }
        let embs = embeddings_for(dets.len());
        let mined = mine_training_pairs(&gt, &dets, &embs, &no_augment()).unwrap();
        // Frames 1,2,3 positive; 4 negative; 5 skipped; 6..9 positive.
        let labels: Vec<bool> = mined.samples.iter().map(|s| s.label).collect();
        assert_eq!(
            labels,
            vec![true, true, true, false, true, true, true, true]
        );
        // Sequence lengths: history counts positives before each sample.
        let lens: Vec<usize> = mined.samples.iter().map(|s| s.sequence.len()).collect();
        assert_eq!(lens, vec![1, 2, 3, 4, 4, 5, 6, 7]);
        // The history window is capped: with 7 positives mined the last
        // sample still fits MAX_SEQUENCE_LEN.
        assert!(lens.iter().all(|&l| l <= MAX_SEQUENCE_LEN));
        // Velocity bridges the gap: frame 6's candidate is compared to the
        // last positive (frame 3), 15 px over 3 frames = 5 px/frame,
        // normalized by the 1280 px image width.
        let frame6 = &mined.samples[4];
        let du = frame6.sequence.last().unwrap().spatial[4];
        assert_relative_eq!(du, 5.0 / 1280.0, max_relative = 1e-9);
    }

    #[test]
    fn mined_labels_match_exhaustive_pair_oracle() {
        let cfg = SyntheticSceneConfig {
            identities: 8,
            frames: 40,
            seed: 17,
            ..SyntheticSceneConfig::default()
        };
        let scene = generate_synthetic(&cfg).unwrap();
        let mining = MiningConfig {
            augmentations: 0,
            image_size: (cfg.image_width, cfg.image_height),
            ..MiningConfig::default()
        };
        let mined =
            mine_training_pairs(&scene.ground_truth, &scene.detections, &scene.embeddings, &mining)
                .unwrap();

        // Independent brute-force pass: for every gt box (identity-major,
        // frame-minor, the documented order) scan all detections in its
        // frame and apply the labeling rule directly.
        let mut ids: Vec<i64> = scene.ground_truth.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut expected: Vec<(bool, Vec<f64>)> = Vec::new();
        for id in ids {
            let mut rows: Vec<&MotRow> =
                scene.ground_truth.iter().filter(|r| r.id == id).collect();
            rows.sort_by_key(|r| r.frame);
            for row in rows {
                let in_frame: Vec<usize> = scene
                    .detections
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| d.frame == row.frame)
                    .map(|(i, _)| i)
                    .collect();
                let mut best_conf: Option<usize> = None;
                let mut best_iou: Option<(usize, f64)> = None;
                for &i in &in_frame {
                    let o = iou(&row.bbox, &scene.detections[i].bbox);
                    if o > 0.5
                        && best_conf.is_none_or(|b| {
                            scene.detections[i].confidence > scene.detections[b].confidence
                        })
                    {
                        best_conf = Some(i);
                    }
                    if o > 0.0 && best_iou.is_none_or(|(_, bo)| o > bo) {
                        best_iou = Some((i, o));
                    }
                }
                if let Some(i) = best_conf {
                    expected.push((true, scene.embeddings[i].values().to_vec()));
                } else if let Some((i, o)) = best_iou {
                    if o < 0.5 {
                        expected.push((false, scene.embeddings[i].values().to_vec()));
                    }
                }
            }
        }

        assert_eq!(mined.samples.len(), expected.len());
        assert!(mined.positives > 0 && mined.negatives > 0);
        assert_eq!(
            mined.positives + mined.negatives,
            mined.samples.len()
        );
        for (sample, (label, emb)) in mined.samples.iter().zip(&expected) {
            assert_eq!(sample.label, *label);
            assert_eq!(sample.sequence.last().unwrap().appearance.values(), &emb[..]);
        }
    }

    #[test]
    fn augmentation_jitters_scale_and_appearance_only() {
        let gt = vec![gt_row(1, 5, 100.0, 100.0, 40.0, 80.0)];
        let dets = vec![det_row(1, 100.0, 100.0, 40.0, 80.0, 1.0)];
        let embs = embeddings_for(1);
        let cfg = MiningConfig {
            augmentations: 3,
            ..MiningConfig::default()
        };
        let mined = mine_training_pairs(&gt, &dets, &embs, &cfg).unwrap();
        assert_eq!(mined.samples.len(), 4);
        assert_eq!(mined.positives, 4);
        let base = &mined.samples[0].sequence[0];
        for aug in &mined.samples[1..] {
            let f = &aug.sequence[0];
            // Center and velocity survive the jitter.
            assert_relative_eq!(f.spatial[0], base.spatial[0], max_relative = 1e-12);
            assert_relative_eq!(f.spatial[1], base.spatial[1], max_relative = 1e-12);
            assert_eq!(f.spatial[4], 0.0);
            assert_eq!(f.spatial[5], 0.0);
            // Width and height scale together, inside the configured range.
            let scale = f.spatial[2] / base.spatial[2];
            assert_relative_eq!(f.spatial[3] / base.spatial[3], scale, max_relative = 1e-12);
            assert!((0.8..=1.2).contains(&scale));
            // Appearance perturbed but still unit length.
            assert_ne!(f.appearance.values(), base.appearance.values());
            let norm: f64 = f.appearance.values().iter().map(|v| v * v).sum::<f64>();
            assert_relative_eq!(norm, 1.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn deterministic_for_a_fixed_seed() {
        let cfg = SyntheticSceneConfig {
            identities: 5,
            frames: 20,
            ..SyntheticSceneConfig::default()
        };
        let scene = generate_synthetic(&cfg).unwrap();
        let mining = MiningConfig {
            image_size: (cfg.image_width, cfg.image_height),
            ..MiningConfig::default()
        };
        let a = mine_training_pairs(&scene.ground_truth, &scene.detections, &scene.embeddings, &mining)
            .unwrap();
        let b = mine_training_pairs(&scene.ground_truth, &scene.detections, &scene.embeddings, &mining)
            .unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.sequence.len(), y.sequence.len());
            for (fx, fy) in x.sequence.iter().zip(&y.sequence) {
                assert_eq!(fx.spatial, fy.spatial);
                assert_eq!(fx.appearance.values(), fy.appearance.values());
            }
        }
    }

    #[test]
    fn input_validation() {
        let gt = vec![gt_row(1, 5, 100.0, 100.0, 40.0, 80.0)];
        let dets = vec![det_row(2, 100.0, 100.0, 40.0, 80.0, 1.0)];
        let embs = embeddings_for(1);
        // Disjoint frames.
        assert!(mine_training_pairs(&gt, &dets, &embs, &no_augment()).is_err());
        // Embedding count mismatch.
        let dets = vec![det_row(1, 100.0, 100.0, 40.0, 80.0, 1.0)];
        assert!(mine_training_pairs(&gt, &dets, &[], &no_augment()).is_err());
        // Bad configs.
        for bad in [
            MiningConfig {
                iou_positive: 0.0,
                ..MiningConfig::default()
            },
            MiningConfig {
                history_length: MAX_SEQUENCE_LEN,
                ..MiningConfig::default()
            },
            MiningConfig {
                scale_jitter: (1.2, 0.8),
                ..MiningConfig::default()
            },
            MiningConfig {
                appearance_sigma: -0.1,
                ..MiningConfig::default()
            },
        ] {
            assert!(mine_training_pairs(&gt, &dets, &embs, &bad).is_err());
        }
    }
}
