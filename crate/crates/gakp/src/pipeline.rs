//! End-to-end orchestration shared by the command-line binary and the
//! integration tests: mine labeled pairs, train the association network,
//! run one tracking mode over a sequence, and compare all four modes on a
//! common scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::appearance::{Embedding, EmbeddingSynthesizer, EMBEDDING_DIM};
use crate::association::{
    fit_explicit_weights, mine_explicit_terms, AssociationMode, ExplicitWeights,
};
use crate::config::RunConfig;
use crate::error::Result;
use crate::geometry::BoundingBox;
use crate::gru::mining::{mine_training_pairs, MinedSamples};
use crate::gru::train::{train, AdamState, TrainReport};
use crate::gru::{AssociationSample, GruModel, SPATIAL_DIM};
use crate::mot::eval::{evaluate, EvalReport};
use crate::mot::files::{assemble_frames, FrameDetections, MotRow};
use crate::mot::synth::{generate_synthetic, SyntheticScene, SyntheticSceneConfig};
use crate::tracker::{run_sequence, SequenceResult};

/// Pads the minority class by cycling through its samples in order until the
/// classes hold equally many. Mining on clean detections yields far more
/// positives than negatives, and a lopsided set trains a scorer with a
/// baked-in "match" prior whose saturated scores carry no ranking margin;
/// duplication is deterministic where subsampling would need a tie-break
/// policy.
pub fn balance_classes(mut mined: MinedSamples) -> MinedSamples {
    let minority_label = mined.positives < mined.negatives;
    let (mut minority, majority) = if minority_label {
        (mined.positives, mined.negatives)
    } else {
        (mined.negatives, mined.positives)
    };
    if minority == 0 {
        return mined;
    }
    let pool: Vec<AssociationSample> = mined
        .samples
        .iter()
        .filter(|s| s.label == minority_label)
        .cloned()
        .collect();
    let mut next = 0;
    while minority < majority {
        mined.samples.push(pool[next % pool.len()].clone());
        minority += 1;
        next += 1;
    }
    if minority_label {
        mined.positives = minority;
    } else {
        mined.negatives = minority;
    }
    mined
}

/// Mines training pairs and balances the label classes.
pub fn mine_balanced(
    gt: &[MotRow],
    detections: &[MotRow],
    embeddings: &[Embedding],
    cfg: &RunConfig,
) -> Result<MinedSamples> {
    let mined = mine_training_pairs(gt, detections, embeddings, &cfg.mining_config())?;
    Ok(balance_classes(mined))
}

/// Builds a fresh network and trains it on the given samples.
pub fn train_model(
    samples: &[AssociationSample],
    cfg: &RunConfig,
) -> Result<(GruModel, TrainReport)> {
    let mut model = GruModel::new(cfg.hidden_size, EMBEDDING_DIM + SPATIAL_DIM, cfg.seed);
    let mut adam = AdamState::new(&model, cfg.adam_config());
    let report = train(&mut model, samples, &mut adam, &cfg.train_options())?;
    Ok((model, report))
}

#[derive(Debug)]
pub struct TrainingOutcome {
    pub model: GruModel,
    pub report: TrainReport,
    pub positives: usize,
    pub negatives: usize,
}

/// Mining plus training in one step, for callers that start from tables.
pub fn train_from_tables(
    gt: &[MotRow],
    detections: &[MotRow],
    embeddings: &[Embedding],
    cfg: &RunConfig,
) -> Result<TrainingOutcome> {
    let mined = mine_balanced(gt, detections, embeddings, cfg)?;
    let (model, report) = train_model(&mined.samples, cfg)?;
    Ok(TrainingOutcome {
        model,
        report,
        positives: mined.positives,
        negatives: mined.negatives,
    })
}

/// Fits explicit cost weights from ground truth, for the `tune` command.
pub fn fit_weights_from_tables(
    gt: &[MotRow],
    detections: &[MotRow],
    embeddings: &[Embedding],
    cfg: &RunConfig,
) -> Result<ExplicitWeights> {
    let terms = mine_explicit_terms(
        gt,
        detections,
        embeddings,
        &cfg.motion_config(),
        cfg.iou_positive,
    )?;
    fit_explicit_weights(&terms)
}

/// Runs one association mode over a sequence with the configured tracker.
pub fn run_mode(
    frames: &[FrameDetections],
    mode: AssociationMode,
    cfg: &RunConfig,
    model: Option<&GruModel>,
) -> Result<SequenceResult> {
    let mut tracker_cfg = cfg.tracker_config();
    tracker_cfg.mode = mode;
    run_sequence(frames, &tracker_cfg, model)
}

/// Derives a sibling of a benchmark scene for mining training pairs: twice
/// the crowd, more misses and clutter, under a different seed, with the same
/// localization noise. Misses and spurious boxes are what create negative
/// pairs (another identity or a stray box overlapping a vacated spot at
/// 0 < IoU < threshold), and the doubled density makes those negatives
/// spatially indistinguishable from positives, so appearance is the only
/// signal that separates the classes — exactly the comparison the scorer
/// must perform at inference. Localization noise stays equal so the
/// positive-pair geometry matches what the scorer will see; the changed
/// seed keeps train and test data disjoint.
pub fn training_scene(benchmark: &SyntheticSceneConfig) -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        identities: benchmark.identities * 2,
        miss_probability: benchmark.miss_probability.max(0.2),
        false_positives_per_frame: benchmark.false_positives_per_frame.max(4.0),
        seed: benchmark.seed.wrapping_add(0x9E37_79B9),
        ..benchmark.clone()
    }
}

/// One mode's scores in a four-mode comparison.
#[derive(Debug)]
pub struct AblationRow {
    pub mode: AssociationMode,
    pub eval: EvalReport,
}

pub const ABLATION_MODES: [AssociationMode; 4] = [
    AssociationMode::IouOnly,
    AssociationMode::IouMotion,
    AssociationMode::Explicit,
    AssociationMode::Implicit,
];

/// Learned pieces for running the full mode comparison on a benchmark
/// scene: the trained pair scorer (implicit mode) and fitted per-term
/// weights (explicit mode), both mined from the benchmark's training
/// sibling.
#[derive(Debug)]
pub struct BenchmarkArtifacts {
    pub model: GruModel,
    pub weights: ExplicitWeights,
    pub report: TrainReport,
    pub positives: usize,
    pub negatives: usize,
}

/// Mines and trains on the sibling of `benchmark` (see [`training_scene`]).
/// Weight fitting falls back to the configured weights if the sibling
/// yields too few labeled pairs to fit.
///
/// Mining here raises the positive-overlap threshold to at least 0.6: the
/// labeling rule marks the best box under the threshold as a negative, so
/// the raised bar turns another identity's box sitting on a track (overlap
/// just past 0.5, as during a crossing) into a hard negative instead of a
/// poisoned positive. The cost of losing sloppy true boxes in the 0.5-0.6
/// band is small next to teaching the scorer that appearance outvotes
/// position.
pub fn prepare_artifacts(
    benchmark: &SyntheticSceneConfig,
    cfg: &RunConfig,
) -> Result<BenchmarkArtifacts> {
    let mut cfg = cfg.clone();
    cfg.image_width = benchmark.image_width;
    cfg.image_height = benchmark.image_height;
    cfg.iou_positive = cfg.iou_positive.max(0.6);
    let mining_scene = generate_synthetic(&training_scene(benchmark))?;
    let outcome = train_from_tables(
        &mining_scene.ground_truth,
        &mining_scene.detections,
        &mining_scene.embeddings,
        &cfg,
    )?;
    let weights = fit_weights_from_tables(
        &mining_scene.ground_truth,
        &mining_scene.detections,
        &mining_scene.embeddings,
        &cfg,
    )
    .unwrap_or_else(|e| {
        log::warn!("weight fitting failed ({e}); using configured weights");
        cfg.weights()
    });
    Ok(BenchmarkArtifacts {
        model: outcome.model,
        weights,
        report: outcome.report,
        positives: outcome.positives,
        negatives: outcome.negatives,
    })
}

/// Runs all four association modes over one scene with pre-built artifacts
/// and scores each against the scene's ground truth. Explicit mode runs
/// with the artifacts' fitted term weights, so the comparison pits the
/// learned scorer against a tuned hand-crafted cost rather than an
/// arbitrarily weighted one.
pub fn ablate_with(
    scene: &SyntheticScene,
    cfg: &RunConfig,
    artifacts: &BenchmarkArtifacts,
) -> Result<Vec<AblationRow>> {
    let frames = assemble_frames(&scene.detections, Some(&scene.embeddings))?;
    let mut cfg = cfg.clone();
    cfg.image_width = scene.config.image_width;
    cfg.image_height = scene.config.image_height;
    cfg.lambda_iou = artifacts.weights.lambda_iou;
    cfg.lambda_v = artifacts.weights.lambda_v;
    cfg.lambda_a = artifacts.weights.lambda_a;
    cfg.lambda_f = artifacts.weights.lambda_f;
    cfg.literal_iou = artifacts.weights.literal_iou;
    let mut rows = Vec::with_capacity(ABLATION_MODES.len());
    for mode in ABLATION_MODES {
        let model = (mode == AssociationMode::Implicit).then_some(&artifacts.model);
        let run = run_mode(&frames, mode, &cfg, model)?;
        let mut eval = evaluate(&scene.ground_truth, &run.rows, 0.5)?;
        eval.hz = run.fps;
        rows.push(AblationRow { mode, eval });
    }
    Ok(rows)
}

/// [`prepare_artifacts`] followed by [`ablate_with`] on one scene.
pub fn ablate(scene: &SyntheticScene, cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let artifacts = prepare_artifacts(&scene.config, cfg)?;
    ablate_with(scene, cfg, &artifacts)
}

/// A hand-built two-target crossing: the targets walk toward each other
/// horizontally and pass around frame 20. One frame past the cross, each
/// detection lands a pixel from the OTHER track's previous box, so summed
/// 1-IoU strongly prefers swapping the labels — while staying within the
/// motion gate, which caps how far a detection may sit from the prediction.
/// Appearance keeps the identities apart, so the scene separates
/// association modes.
#[derive(Debug, Clone)]
pub struct CrossingScene {
    pub ground_truth: Vec<MotRow>,
    pub frames: Vec<FrameDetections>,
}

pub fn crossing_scene(seed: u64) -> Result<CrossingScene> {
    const FRAMES: u32 = 40;
    const WIDTH: f64 = 56.0;
    const HEIGHT: f64 = 80.0;
    let synth = EmbeddingSynthesizer::new(0xC0551);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(3));
    let mut ground_truth = Vec::new();
    let mut detections = Vec::new();
    let mut embeddings = Vec::new();
    for frame in 1..=FRAMES {
        let t = f64::from(frame - 1);
        for (id, x) in [(1_i64, 400.0 + 6.0 * t), (2, 595.0 - 4.0 * t)] {
            let bbox = BoundingBox {
                left: x - WIDTH / 2.0,
                top: 300.0 - HEIGHT / 2.0,
                width: WIDTH,
                height: HEIGHT,
            };
            ground_truth.push(MotRow {
                frame,
                id,
                bbox: bbox.clone(),
                confidence: 1.0,
            });
            let jitter_x: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
            let jitter_y: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
            detections.push(MotRow {
                frame,
                id: -1,
                bbox: BoundingBox {
                    left: bbox.left + jitter_x,
                    top: bbox.top + jitter_y,
                    ..bbox
                },
                confidence: 1.0,
            });
            embeddings.push(synth.draw(
                id as u64,
                seed.wrapping_mul(u64::from(FRAMES) + 1).wrapping_add(u64::from(frame)),
                0.03,
            ));
        }
    }
    let frames = assemble_frames(&detections, Some(&embeddings))?;
    Ok(CrossingScene {
        ground_truth,
        frames,
    })
}
