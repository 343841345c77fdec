//! CLEAR-MOT scoring plus IDF1.
//!
//! Per frame, ground-truth boxes are matched to hypothesis boxes at an IoU
//! threshold, preferring last frame's correspondence before solving the
//! remainder optimally. False positives, misses, identity switches (counted
//! against the last known match of each ground-truth track, even across
//! gaps) and fragmentations accumulate over the sequence. IDF1 comes from a
//! separate trajectory-level bipartite matching of identity overlap.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::association::hungarian::{hungarian, CostMatrix};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::mot::files::MotRow;

/// Sequence-level tracking quality summary.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mota: f64,
    pub idf1: f64,
    /// Ground-truth tracks tracked on at least 80% of their frames.
    pub mostly_tracked: usize,
    /// Ground-truth tracks tracked on at most 20% of their frames.
    pub mostly_lost: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub id_switches: usize,
    pub fragmentations: usize,
    /// Total ground-truth boxes.
    pub gt_count: usize,
    pub gt_tracks: usize,
    /// Processing speed of the run being scored; filled in by the caller,
    /// zero when unknown.
    pub hz: f64,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "mota,idf1,mostly_tracked,mostly_lost,false_positives,false_negatives,id_switches,fragmentations,gt_count,gt_tracks,hz"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{},{},{},{},{},{},{},{},{:.2}",
            self.mota,
            self.idf1,
            self.mostly_tracked,
            self.mostly_lost,
            self.false_positives,
            self.false_negatives,
            self.id_switches,
            self.fragmentations,
            self.gt_count,
            self.gt_tracks,
            self.hz
        )
    }
}

/// Multi-object tracking accuracy:
/// `1 - (FP + FN + IDs) / GT`. Can be negative; that is standard.
pub fn mota(
    false_positives: usize,
    false_negatives: usize,
    id_switches: usize,
    gt_count: usize,
) -> f64 {
    1.0 - (false_positives + false_negatives + id_switches) as f64 / gt_count as f64
}

/// Scores tracker output against ground truth at an IoU threshold
/// (typically 0.5). Requires non-empty ground truth with per-frame unique
/// ids on both sides.
pub fn evaluate(gt: &[MotRow], results: &[MotRow], iou_threshold: f64) -> Result<EvalReport> {
    if gt.is_empty() {
        return Err(Error::input("evaluation", "empty ground truth"));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::input(
            "evaluation",
            format!("iou threshold {iou_threshold} outside (0, 1]"),
        ));
    }
    let gt_frames = group_frames(gt, "ground truth")?;
    let hyp_frames = group_frames(results, "results")?;

    let all_frames: BTreeSet<u32> = gt_frames.keys().chain(hyp_frames.keys()).copied().collect();

    let mut false_positives = 0usize;
    let mut false_negatives = 0usize;
    let mut id_switches = 0usize;
    let mut fragmentations = 0usize;

    // Last hypothesis id each gt track was matched to, surviving gaps.
    let mut last_match: HashMap<i64, i64> = HashMap::new();
    // Whether the track was matched on the previous frame where it was
    // present (fragmentation bookkeeping).
    let mut tracked_last_presence: HashMap<i64, bool> = HashMap::new();
    let mut frames_present: HashMap<i64, usize> = HashMap::new();
    let mut frames_matched: HashMap<i64, usize> = HashMap::new();

    let empty: Vec<&MotRow> = Vec::new();
    for &frame in &all_frames {
        let gts = gt_frames.get(&frame).unwrap_or(&empty);
        let hyps = hyp_frames.get(&frame).unwrap_or(&empty);
        for g in gts {
            *frames_present.entry(g.id).or_default() += 1;
        }

        let mut gt_matched = vec![false; gts.len()];
        let mut hyp_matched = vec![false; hyps.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();

        // Stage 1: keep last frame's correspondence when it still overlaps.
        for (gi, g) in gts.iter().enumerate() {
            if let Some(&prev_hyp) = last_match.get(&g.id) {
                if let Some(hi) = hyps
                    .iter()
                    .position(|h| h.id == prev_hyp)
                    .filter(|&hi| !hyp_matched[hi])
                {
                    if iou(&g.bbox, &hyps[hi].bbox) >= iou_threshold {
                        gt_matched[gi] = true;
                        hyp_matched[hi] = true;
                        pairs.push((gi, hi));
                    }
                }
            }
        }

        // Stage 2: optimal matching over the remainder.
        let open_gts: Vec<usize> = (0..gts.len()).filter(|&i| !gt_matched[i]).collect();
        let open_hyps: Vec<usize> = (0..hyps.len()).filter(|&i| !hyp_matched[i]).collect();
        if !open_gts.is_empty() && !open_hyps.is_empty() {
            let matrix = CostMatrix::from_fn(open_gts.len(), open_hyps.len(), |r, c| {
                let overlap = iou(&gts[open_gts[r]].bbox, &hyps[open_hyps[c]].bbox);
                (1.0 - overlap, overlap < iou_threshold)
            })?;
            for (r, c) in hungarian(&matrix).matches {
                let (gi, hi) = (open_gts[r], open_hyps[c]);
                gt_matched[gi] = true;
                hyp_matched[hi] = true;
                pairs.push((gi, hi));
            }
        }

        for (gi, hi) in pairs {
            let g = gts[gi];
            let h = hyps[hi];
            match last_match.get(&g.id) {
                Some(&prev) if prev != h.id => id_switches += 1,
                _ => {}
            }
            // A track resuming after a miss on its previous present frame
            // fragments, whether or not the identity also changed.
            if let Some(false) = tracked_last_presence.get(&g.id) {
                fragmentations += 1;
            }
            last_match.insert(g.id, h.id);
            *frames_matched.entry(g.id).or_default() += 1;
        }

        false_negatives += gt_matched.iter().filter(|m| !**m).count();
        false_positives += hyp_matched.iter().filter(|m| !**m).count();

        for (gi, g) in gts.iter().enumerate() {
            tracked_last_presence.insert(g.id, gt_matched[gi]);
        }
    }

    let gt_count = gt.len();
    let gt_ids: BTreeSet<i64> = gt.iter().map(|r| r.id).collect();
    let mut mostly_tracked = 0usize;
    let mut mostly_lost = 0usize;
    for id in &gt_ids {
        let present = *frames_present.get(id).unwrap_or(&0) as f64;
        let matched = *frames_matched.get(id).unwrap_or(&0) as f64;
        let ratio = matched / present;
        if ratio >= 0.8 {
            mostly_tracked += 1;
        }
        if ratio <= 0.2 {
            mostly_lost += 1;
        }
    }

    Ok(EvalReport {
        mota: mota(false_positives, false_negatives, id_switches, gt_count),
        idf1: idf1(gt, results, iou_threshold)?,
        mostly_tracked,
        mostly_lost,
        false_positives,
        false_negatives,
        id_switches,
        fragmentations,
        gt_count,
        gt_tracks: gt_ids.len(),
        hz: 0.0,
    })
}

/// Identity F1: trajectory-level bipartite matching that maximizes the
/// number of frames where a ground-truth track and a hypothesis track
/// overlap, then `2 * IDTP / (|gt boxes| + |hyp boxes|)`.
fn idf1(gt: &[MotRow], results: &[MotRow], iou_threshold: f64) -> Result<f64> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let gt_ids: Vec<i64> = gt
        .iter()
        .map(|r| r.id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let hyp_ids: Vec<i64> = results
        .iter()
        .map(|r| r.id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let gt_index: HashMap<i64, usize> = gt_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let hyp_index: HashMap<i64, usize> =
        hyp_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();

    let gt_frames = group_frames(gt, "ground truth")?;
    let hyp_frames = group_frames(results, "results")?;

    let mut overlap = vec![vec![0u32; hyp_ids.len()]; gt_ids.len()];
    for (frame, gts) in &gt_frames {
        if let Some(hyps) = hyp_frames.get(frame) {
            for g in gts {
                for h in hyps {
                    if iou(&g.bbox, &h.bbox) >= iou_threshold {
                        overlap[gt_index[&g.id]][hyp_index[&h.id]] += 1;
                    }
                }
            }
        }
    }

    let matrix = CostMatrix::from_fn(gt_ids.len(), hyp_ids.len(), |r, c| {
        let o = overlap[r][c];
        (-(o as f64), o == 0)
    })?;
    let idtp: u32 = hungarian(&matrix)
        .matches
        .iter()
        .map(|&(r, c)| overlap[r][c])
        .sum();
    Ok(2.0 * idtp as f64 / (gt.len() + results.len()) as f64)
}

fn group_frames<'a>(
    rows: &'a [MotRow],
    what: &'static str,
) -> Result<BTreeMap<u32, Vec<&'a MotRow>>> {
    let mut frames: BTreeMap<u32, Vec<&MotRow>> = BTreeMap::new();
    for row in rows {
        let bucket = frames.entry(row.frame).or_default();
        if bucket.iter().any(|r| r.id == row.id) {
            return Err(Error::input(
                "evaluation",
                format!("{what}: duplicate id {} in frame {}", row.id, row.frame),
            ));
        }
        bucket.push(row);
    }
    Ok(frames)
}
