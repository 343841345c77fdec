//! Synthetic scenes with known ground truth: constant-velocity walkers that
//! bounce off the image border, imperfect detections, and per-identity
//! appearance embeddings. Everything derives from one seed, so a config
//! reproduces its scene bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::appearance::{Embedding, EmbeddingSynthesizer};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::mot::files::MotRow;

/// Scene parameters. Ranges are inclusive and sampled uniformly.
#[derive(Debug, Clone)]
pub struct SyntheticSceneConfig {
    pub image_width: f64,
    pub image_height: f64,
    pub identities: u32,
    pub frames: u32,
    /// Frame at which an identity enters.
    pub birth_frames: (u32, u32),
    /// Frame at which an identity leaves (clamped to at least its birth).
    pub death_frames: (u32, u32),
    /// Speed magnitude in pixels per frame; direction is uniform.
    pub speed_range: (f64, f64),
    /// Per-frame Gaussian jitter applied to the true center.
    pub motion_noise: f64,
    /// Gaussian center error of detections against the true box.
    pub detection_noise: f64,
    /// Probability that a visible identity produces no detection.
    pub miss_probability: f64,
    /// Ground-truth overlap above which the target farther from the camera
    /// (smaller box bottom) is occluded and yields no detection. Crossings
    /// therefore read as one target coasting behind the other, as a real
    /// detector would report them. 1.0 disables occlusion.
    pub occlusion_iou: f64,
    /// Expected spurious detections per frame (Poisson).
    pub false_positives_per_frame: f64,
    /// Noise on appearance draws of real detections.
    pub appearance_sigma: f64,
    pub box_height_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            image_width: 960.0,
            image_height: 540.0,
            identities: 20,
            frames: 100,
            birth_frames: (1, 1),
            death_frames: (100, 100),
            speed_range: (10.0, 18.0),
            motion_noise: 0.3,
            detection_noise: 1.75,
            miss_probability: 0.1,
            occlusion_iou: 0.3,
            false_positives_per_frame: 1.0,
            appearance_sigma: 0.08,
            box_height_range: (70.0, 110.0),
            seed: 42,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::input("scene config", msg));
        if !(self.image_width > 0.0) || !(self.image_height > 0.0) {
            return err(format!(
                "image size {}x{} must be positive",
                self.image_width, self.image_height
            ));
        }
        if self.identities == 0 {
            return err("need at least one identity".into());
        }
        if self.frames == 0 {
            return err("need at least one frame".into());
        }
        for (name, (lo, hi)) in [
            ("birth_frames", self.birth_frames),
            ("death_frames", self.death_frames),
        ] {
            if lo == 0 || lo > hi {
                return err(format!("{name} range ({lo}, {hi}) is invalid"));
            }
        }
        for (name, (lo, hi)) in [
            ("speed_range", self.speed_range),
            ("box_height_range", self.box_height_range),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || lo > hi {
                return err(format!("{name} range ({lo}, {hi}) is invalid"));
            }
        }
        if self.box_height_range.0 < 4.0 {
            return err("boxes below 4 pixels tall are not supported".into());
        }
        for (name, value) in [
            ("motion_noise", self.motion_noise),
            ("detection_noise", self.detection_noise),
            ("appearance_sigma", self.appearance_sigma),
            ("false_positives_per_frame", self.false_positives_per_frame),
        ] {
            if !value.is_finite() || value < 0.0 {
                return err(format!("{name} {value} must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.miss_probability) {
            return err(format!(
                "miss_probability {} outside [0, 1]",
                self.miss_probability
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion_iou) {
            return err(format!(
                "occlusion_iou {} outside [0, 1]",
                self.occlusion_iou
            ));
        }
        Ok(())
    }

    /// Parses `key=value` lines ('#' starts a comment). Unknown keys are
    /// rejected so typos surface instead of silently keeping defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SyntheticSceneConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::input("scene config", format!("line {}: expected key=value", idx + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::input("scene config", format!("line {}: {e}", idx + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::input("scene config", format!("bad value {value:?} for {key}")))
        }
        match key {
            "image_width" => self.image_width = num(key, value)?,
            "image_height" => self.image_height = num(key, value)?,
            "identities" => self.identities = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "birth_frame_min" => self.birth_frames.0 = num(key, value)?,
            "birth_frame_max" => self.birth_frames.1 = num(key, value)?,
            "death_frame_min" => self.death_frames.0 = num(key, value)?,
            "death_frame_max" => self.death_frames.1 = num(key, value)?,
            "speed_min" => self.speed_range.0 = num(key, value)?,
            "speed_max" => self.speed_range.1 = num(key, value)?,
            "motion_noise" => self.motion_noise = num(key, value)?,
            "detection_noise" => self.detection_noise = num(key, value)?,
            "miss_probability" => self.miss_probability = num(key, value)?,
            "occlusion_iou" => self.occlusion_iou = num(key, value)?,
            "false_positives_per_frame" => self.false_positives_per_frame = num(key, value)?,
            "appearance_sigma" => self.appearance_sigma = num(key, value)?,
            "box_height_min" => self.box_height_range.0 = num(key, value)?,
            "box_height_max" => self.box_height_range.1 = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => {
                return Err(Error::input(
                    "scene config",
                    format!("unknown key {other:?}"),
                ))
            }
        }
        Ok(())
    }
}

/// Generated scene: ground truth, detector output, and one embedding per
/// detection row (in row order).
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub ground_truth: Vec<MotRow>,
    pub detections: Vec<MotRow>,
    pub embeddings: Vec<Embedding>,
    pub config: SyntheticSceneConfig,
}

struct Walker {
    id: u32,
    birth: u32,
    death: u32,
    u: f64,
    v: f64,
    du: f64,
    dv: f64,
    gamma: f64,
    height: f64,
}

impl Walker {
    fn bbox(&self) -> BoundingBox {
        let width = self.gamma * self.height;
        BoundingBox {
            left: self.u - width / 2.0,
            top: self.v - self.height / 2.0,
            width,
            height: self.height,
        }
    }
}

/// Generates a scene. All randomness flows from the config seed in a fixed
/// order, so the output is a pure function of the config.
pub fn generate_synthetic(cfg: &SyntheticSceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let synth = EmbeddingSynthesizer::new(cfg.seed ^ 0x5eed_e4b);
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    };

    let mut walkers: Vec<Walker> = (1..=cfg.identities)
        .map(|id| {
            let birth = rng.random_range(cfg.birth_frames.0..=cfg.birth_frames.1.min(cfg.frames));
            let death = rng
                .random_range(cfg.death_frames.0..=cfg.death_frames.1)
                .clamp(birth, cfg.frames);
            let height = uniform(&mut rng, cfg.box_height_range);
            let gamma = uniform(&mut rng, (0.35, 0.55));
            let width = gamma * height;
            let speed = uniform(&mut rng, cfg.speed_range);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Walker {
                id,
                birth,
                death,
                u: rng.random_range(width / 2.0..cfg.image_width - width / 2.0),
                v: rng.random_range(height / 2.0..cfg.image_height - height / 2.0),
                du: speed * angle.cos(),
                dv: speed * angle.sin(),
                gamma,
                height,
            }
        })
        .collect();

    let mut ground_truth = Vec::new();
    let mut detections = Vec::new();
    let mut embeddings = Vec::new();
    let mut false_positive_id: u64 = 1_000_000;

    for frame in 1..=cfg.frames {
        let mut visible: Vec<usize> = Vec::new();
        for (i, w) in walkers.iter_mut().enumerate() {
            if frame < w.birth || frame > w.death {
                continue;
            }
            if frame > w.birth {
                // Advance with jitter, reflecting at the borders so targets
                // stay in view and paths cross repeatedly.
                w.u += w.du + cfg.motion_noise * normal(&mut rng);
                w.v += w.dv + cfg.motion_noise * normal(&mut rng);
                let half_w = w.gamma * w.height / 2.0;
                let half_h = w.height / 2.0;
                reflect(&mut w.u, &mut w.du, half_w, cfg.image_width - half_w);
                reflect(&mut w.v, &mut w.dv, half_h, cfg.image_height - half_h);
            }
            visible.push(i);
            ground_truth.push(MotRow {
                frame,
                id: w.id as i64,
                bbox: w.bbox(),
                confidence: 1.0,
            });
        }

        for &i in &visible {
            let w = &walkers[i];
            let bbox = w.bbox();
            // A target overlapped past the threshold by a nearer target
            // (larger box bottom, i.e. closer to the camera) is occluded.
            let occluded = cfg.occlusion_iou < 1.0
                && visible.iter().any(|&j| {
                    if j == i {
                        return false;
                    }
                    let other = &walkers[j];
                    let other_box = other.bbox();
                    let nearer = (other_box.bottom(), other.id) > (bbox.bottom(), w.id);
                    nearer && iou(&bbox, &other_box) > cfg.occlusion_iou
                });
            if occluded || rng.random_bool(cfg.miss_probability) {
                continue;
            }
            let du = cfg.detection_noise * normal(&mut rng);
            let dv = cfg.detection_noise * normal(&mut rng);
            let dh = 0.5 * cfg.detection_noise * normal(&mut rng);
            let height = (w.height + dh).max(4.0);
            let width = (w.gamma * height).max(2.0);
            let det_bbox = BoundingBox {
                left: w.u + du - width / 2.0,
                top: w.v + dv - height / 2.0,
                width,
                height,
            };
            // Confidence tracks localization quality, as a detector's would;
            // ties in overlap-based heuristics then resolve toward the
            // better-placed box.
            let confidence = 0.5 + 0.5 * iou(&det_bbox, &bbox);
            detections.push(MotRow {
                frame,
                id: -1,
                bbox: det_bbox,
                confidence,
            });
            embeddings.push(synth.draw(w.id as u64, frame as u64, cfg.appearance_sigma));
        }

        if cfg.false_positives_per_frame > 0.0 {
            let poisson = Poisson::new(cfg.false_positives_per_frame)
                .map_err(|e| Error::input("scene config", e.to_string()))?;
            let count = poisson.sample(&mut rng) as u64;
            for _ in 0..count {
                let height = uniform(&mut rng, cfg.box_height_range);
                let gamma = uniform(&mut rng, (0.35, 0.55));
                let width = gamma * height;
                let u = rng.random_range(width / 2.0..cfg.image_width - width / 2.0);
                let v = rng.random_range(height / 2.0..cfg.image_height - height / 2.0);
                detections.push(MotRow {
                    frame,
                    id: -1,
                    bbox: BoundingBox {
                        left: u - width / 2.0,
                        top: v - height / 2.0,
                        width,
                        height,
                    },
                    confidence: rng.random_range(0.2..0.7),
                });
                // Each clutter box gets its own throwaway identity, so its
                // appearance matches nothing else in the scene.
                embeddings.push(synth.draw(false_positive_id, 0, 0.0));
                false_positive_id += 1;
            }
        }
    }

    Ok(SyntheticScene {
        ground_truth,
        detections,
        embeddings,
        config: cfg.clone(),
    })
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        // Box wider than the image; park in the middle.
        *pos = (lo + hi) / 2.0;
        return;
    }
    if *pos < lo {
        *pos = lo + (lo - *pos);
        *vel = -*vel;
    }
    if *pos > hi {
        *pos = hi - (*pos - hi);
        *vel = -*vel;
    }
    *pos = pos.clamp(lo, hi);
}
