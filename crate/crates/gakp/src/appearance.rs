//! Appearance embeddings: storage, distances, deterministic synthesis, and
//! the detection-aligned sidecar file formats.
//!
//! Real deployments would compute embeddings with a re-identification CNN;
//! here they arrive precomputed (one per detection, in detection-file order)
//! or are synthesized per identity for closed-loop experiments.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Length of every appearance embedding.
pub const EMBEDDING_DIM: usize = 128;

/// Header of the binary embedding sidecar format.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"GAKPEMB1";

/// A unit-norm appearance descriptor of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: DVector<f64>,
}

impl Embedding {
    /// Wraps an already-normalized vector; rejects wrong dimension, non-finite
    /// entries, and norms farther than `1e-6` from one.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let e = Embedding::check_dim_finite(values)?;
        let norm = e.values.norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::input(
                "embedding",
                format!("norm {norm} is not within 1e-6 of unit length"),
            ));
        }
        Ok(e)
    }

    /// Normalizes an arbitrary vector onto the unit sphere; rejects wrong
    /// dimension, non-finite entries, and (near-)zero norm.
    pub fn from_unnormalized(values: Vec<f64>) -> Result<Self> {
        let mut e = Embedding::check_dim_finite(values)?;
        let norm = e.values.norm();
        if norm < 1e-12 {
            return Err(Error::input("embedding", "cannot normalize zero vector"));
        }
        e.values /= norm;
        Ok(e)
    }

    fn check_dim_finite(values: Vec<f64>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::input(
                "embedding",
                format!("expected {EMBEDDING_DIM} components, got {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("embedding", "non-finite component"));
        }
        Ok(Embedding {
            values: DVector::from_vec(values),
        })
    }

    pub fn values(&self) -> &[f64] {
        self.values.as_slice()
    }
}

/// Euclidean distance between two embeddings. Both inputs are unit norm, so
/// the result lies in `[0, 2]` and equals `sqrt(2 - 2 cos)`.
pub fn appearance_distance(a: &Embedding, b: &Embedding) -> f64 {
    (&a.values - &b.values).norm()
}

/// A batch of (anchor, positive, negative) embedding triplets with a shared
/// margin, for auditing how separable an embedding set is.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchors: Vec<Embedding>,
    pub positives: Vec<Embedding>,
    pub negatives: Vec<Embedding>,
    pub margin: f64,
}

impl TripletBatch {
    pub fn new(
        anchors: Vec<Embedding>,
        positives: Vec<Embedding>,
        negatives: Vec<Embedding>,
        margin: f64,
    ) -> Result<Self> {
        if anchors.is_empty() || anchors.len() != positives.len() || anchors.len() != negatives.len()
        {
            return Err(Error::input(
                "triplet batch",
                format!(
                    "need equal non-zero triplet counts, got {}/{}/{}",
                    anchors.len(),
                    positives.len(),
                    negatives.len()
                ),
            ));
        }
        if !margin.is_finite() || margin < 0.0 {
            return Err(Error::input("triplet batch", format!("bad margin {margin}")));
        }
        Ok(TripletBatch {
            anchors,
            positives,
            negatives,
            margin,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Mean hinge triplet loss: `mean(max(0, d(a,p) - d(a,n) + margin))`.
pub fn triplet_loss(batch: &TripletBatch) -> f64 {
    let total: f64 = (0..batch.len())
        .map(|i| {
            let dp = appearance_distance(&batch.anchors[i], &batch.positives[i]);
            let dn = appearance_distance(&batch.anchors[i], &batch.negatives[i]);
            (dp - dn + batch.margin).max(0.0)
        })
        .sum();
    total / batch.len() as f64
}

/// Deterministic embedding source: every identity gets a fixed direction on
/// the unit sphere derived from the seed, and draws add seeded Gaussian
/// noise before renormalizing. The same `(seed, identity, draw)` triple
/// always produces the same vector.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingSynthesizer {
    seed: u64,
}

impl EmbeddingSynthesizer {
    pub fn new(seed: u64) -> Self {
        EmbeddingSynthesizer { seed }
    }

    /// The noise-free direction of an identity.
    pub fn identity_mean(&self, identity: u64) -> Embedding {
        let mut rng = stream_rng(&[self.seed, identity, u64::MAX]);
        sample_unit_vector(&mut rng)
    }

    /// A noisy observation of an identity. `noise_sigma = 0` returns the
    /// identity mean exactly.
    pub fn draw(&self, identity: u64, draw_index: u64, noise_sigma: f64) -> Embedding {
        let mean = self.identity_mean(identity);
        if noise_sigma == 0.0 {
            return mean;
        }
        let mut rng = stream_rng(&[self.seed, identity, draw_index]);
        perturb(&mean, noise_sigma, &mut rng)
    }
}

/// Adds isotropic Gaussian noise to an embedding and renormalizes.
pub fn perturb(embedding: &Embedding, sigma: f64, rng: &mut impl Rng) -> Embedding {
    let noisy: Vec<f64> = embedding
        .values()
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    // A zero post-noise norm has probability zero; fall back to the input
    // rather than failing.
    Embedding::from_unnormalized(noisy).unwrap_or_else(|_| embedding.clone())
}

fn sample_unit_vector(rng: &mut impl Rng) -> Embedding {
    loop {
        let values: Vec<f64> = (0..EMBEDDING_DIM)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok(e) = Embedding::from_unnormalized(values) {
            return e;
        }
    }
}

/// Seeds a ChaCha stream from a list of words, so independent substreams can
/// be derived from (seed, identity, index) tuples without collisions between
/// neighboring tuples.
pub(crate) fn stream_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    for (i, part) in parts.iter().enumerate() {
        // splitmix64-style finalizer decorrelates neighboring part values.
        let mut x = part.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(i as u64 + 1));
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^= x >> 31;
        for (j, byte) in x.to_le_bytes().iter().enumerate() {
            seed[(i * 8 + j) % 32] ^= byte;
        }
    }
    ChaCha8Rng::from_seed(seed)
}

/// Writes embeddings in the binary sidecar format: magic, count and
/// dimension as little-endian `u32`, then row-major little-endian `f32`.
pub fn write_embeddings_binary(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    let mut buf =
        Vec::with_capacity(16 + embeddings.len() * EMBEDDING_DIM * std::mem::size_of::<f32>());
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(embeddings.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(EMBEDDING_DIM as u32).to_le_bytes());
    for e in embeddings {
        for v in e.values() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Writes embeddings as plain CSV, one row of 128 components per line.
pub fn write_embeddings_csv(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for e in embeddings {
        let line = e
            .values()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a sidecar embedding file, sniffing the binary magic and falling
/// back to CSV. Vectors are renormalized on load (the binary format stores
/// `f32`, and external CSVs may be loosely normalized).
pub fn read_embeddings(path: &Path) -> Result<Vec<Embedding>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(EMBEDDING_MAGIC) {
        read_binary(&bytes)
    } else {
        read_csv(path, &bytes)
    }
}

/// Reads a sidecar and checks that it holds exactly one embedding per
/// detection.
pub fn read_embeddings_for(path: &Path, detection_count: usize) -> Result<Vec<Embedding>> {
    let embeddings = read_embeddings(path)?;
    if embeddings.len() != detection_count {
        return Err(Error::format(format!(
            "{}: {} embeddings for {} detections",
            path.display(),
            embeddings.len(),
            detection_count
        )));
    }
    Ok(embeddings)
}

fn read_binary(bytes: &[u8]) -> Result<Vec<Embedding>> {
    if bytes.len() < 16 {
        return Err(Error::format("embedding file truncated before header end"));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if dim != EMBEDDING_DIM {
        return Err(Error::format(format!(
            "embedding file declares dimension {dim}, expected {EMBEDDING_DIM}"
        )));
    }
    let expected = 16 + count * dim * std::mem::size_of::<f32>();
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "embedding file holds {} bytes, expected {expected} for {count} rows",
            bytes.len()
        )));
    }
    let mut embeddings = Vec::with_capacity(count);
    let mut offset = 16;
    for row in 0..count {
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            let raw: [u8; 4] = bytes[offset..offset + 4].try_into().unwrap();
            values.push(f32::from_le_bytes(raw) as f64);
            offset += 4;
        }
        embeddings.push(Embedding::from_unnormalized(values).map_err(|e| {
            Error::format(format!("embedding row {row}: {e}"))
        })?);
    }
    Ok(embeddings)
}

fn read_csv(path: &Path, bytes: &[u8]) -> Result<Vec<Embedding>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::format(format!("{}: not valid UTF-8", path.display())))?;
    let mut embeddings = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(',')
            .map(|field| {
                field.trim().parse::<f64>().map_err(|_| {
                    Error::parse(
                        path.display().to_string(),
                        idx + 1,
                        format!("bad float {field:?}"),
                    )
                })
            })
            .collect::<Result<_>>()?;
        embeddings.push(Embedding::from_unnormalized(values).map_err(|e| {
            Error::parse(path.display().to_string(), idx + 1, e.to_string())
        })?);
    }
    Ok(embeddings)
}
