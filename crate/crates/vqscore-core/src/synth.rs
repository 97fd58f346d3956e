//! Deterministic synthetic corpora with planted quality defects.
//!
//! Records are built around 16 unit-vector topic centroids per embedding
//! space. A clean record keeps frames, covers, and text near one topic. Each
//! defect class moves exactly the statistic its detector branch is built
//! around: incoherence makes the frame sequence drift along a dedicated
//! direction, symmetrically around the topic centroid, so the frame mean is
//! untouched and only order-aware statistics (first versus last frame)
//! expose it; mismatch pulls text toward a foreign topic and leaves a trace
//! on a marker direction; visual and textual defects shift their embeddings
//! along fixed directions. The graded task stays linearly separable from
//! (mean frame, last minus first frame, text) by construction.
//!
//! All randomness is derived from `(seed, record index)`, so any record can
//! be regenerated in isolation and generation order is irrelevant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use thiserror::Error;

use crate::corpus::{QualityGrade, VideoRecord, MAX_FRAMES};

/// Fixed number of topic centroids per embedding space.
pub const TOPIC_COUNT: usize = 16;

/// Per-coordinate Gaussian noise around each planted embedding.
pub const NOISE_SIGMA: f32 = 0.05;

/// Total drift of an incoherent frame sequence, as a multiple of the defect
/// displacement. The drift is symmetric around the topic centroid, so it
/// never moves the frame mean.
pub const INCOHERENCE_SPAN: f32 = 2.0;

/// Marker-trace strength for text mismatch, as a fraction of the defect
/// magnitude.
pub const MISMATCH_TRACE: f32 = 0.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic corpus config: {0}")]
    InvalidConfig(String),
}

/// Probability of planting each defect class in a record, independently.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefectProbabilities {
    pub incoherence: f64,
    pub text_mismatch: f64,
    pub visual_defect: f64,
    pub text_defect: f64,
}

impl Default for DefectProbabilities {
    fn default() -> Self {
        DefectProbabilities {
            incoherence: 0.15,
            text_mismatch: 0.15,
            visual_defect: 0.15,
            text_defect: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_records: usize,
    pub d_t: usize,
    pub d_f: usize,
    /// Frames per generated video.
    pub m: usize,
    pub defect_probabilities: DefectProbabilities,
    /// Displacement applied by a severe defect; mild defects use half.
    pub defect_magnitude: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_records: 2500,
            d_t: 64,
            d_f: 64,
            m: 8,
            defect_probabilities: DefectProbabilities::default(),
            defect_magnitude: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_records == 0 {
            return Err(SynthError::InvalidConfig("n_records must be positive".into()));
        }
        if self.d_t == 0 || self.d_f == 0 {
            return Err(SynthError::InvalidConfig("embedding dims must be positive".into()));
        }
        if self.m == 0 || self.m > MAX_FRAMES {
            return Err(SynthError::InvalidConfig(format!(
                "m must be in 1..={MAX_FRAMES}, got {}",
                self.m
            )));
        }
        let p = &self.defect_probabilities;
        for (name, v) in [
            ("incoherence", p.incoherence),
            ("text_mismatch", p.text_mismatch),
            ("visual_defect", p.visual_defect),
            ("text_defect", p.text_defect),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::InvalidConfig(format!(
                    "probability {name} = {v} outside [0, 1]"
                )));
            }
        }
        if !(self.defect_magnitude > 0.0) || !self.defect_magnitude.is_finite() {
            return Err(SynthError::InvalidConfig(format!(
                "defect_magnitude {} must be positive and finite",
                self.defect_magnitude
            )));
        }
        Ok(())
    }
}

/// Which defects a generated record carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DefectFlags {
    pub incoherence: bool,
    pub text_mismatch: bool,
    pub visual_defect: bool,
    pub text_defect: bool,
}

impl DefectFlags {
    pub fn count(self) -> usize {
        self.incoherence as usize
            + self.text_mismatch as usize
            + self.visual_defect as usize
            + self.text_defect as usize
    }

    pub fn any(self) -> bool {
        self.count() > 0
    }
}

/// Grade implied by a record's defects. `mild` is the per-record coin that
/// halves the displacement; it matters only for single-defect records.
pub fn assign_grade(flags: DefectFlags, mild: bool) -> QualityGrade {
    match flags.count() {
        0 => QualityGrade::Excellent,
        1 if mild => QualityGrade::Good,
        1 => QualityGrade::Fair,
        _ => QualityGrade::Bad,
    }
}

/// The fixed geometry a corpus is planted in: topic centroids plus the four
/// defect and marker directions, all derived from the seed alone.
#[derive(Debug, Clone)]
pub struct SynthStructure {
    pub frame_centroids: Vec<Vec<f32>>,
    pub text_centroids: Vec<Vec<f32>>,
    /// Direction added to frames and covers by a visual defect.
    pub visual_direction: Vec<f32>,
    /// Direction along which an incoherent frame sequence drifts.
    pub incoherence_marker: Vec<f32>,
    /// Direction added to text by a textual defect.
    pub text_direction: Vec<f32>,
    /// Marker trace left on text by a frame-text mismatch.
    pub mismatch_marker: Vec<f32>,
}

const STRUCTURE_STREAM: u64 = 0x7374727563747572;
const RECORD_STREAM: u64 = 0x7265636f72647321;

/// 64-bit finalizer with full avalanche; the basis of all seed derivation.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn structure_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ STRUCTURE_STREAM))
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ splitmix64(RECORD_STREAM ^ index as u64));
    ChaCha8Rng::seed_from_u64(mixed)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let std_normal = Normal::new(0.0f32, 1.0).expect("valid normal");
    (0..d).map(|_| std_normal.sample(rng)).collect()
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

fn normalize(mut v: Vec<f32>) -> Vec<f32> {
    let n = norm(&v);
    for x in v.iter_mut() {
        *x /= n;
    }
    v
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_scaled(dst: &mut [f32], src: &[f32], s: f32) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += v * s;
    }
}

/// Draws a unit vector orthogonal to `basis` (assumed orthonormal). In
/// dimensions too small for another orthogonal direction, falls back to a
/// plain random unit vector.
fn orthogonal_unit(rng: &mut ChaCha8Rng, basis: &[Vec<f32>], d: usize) -> Vec<f32> {
    for _ in 0..16 {
        let mut v = gaussian_vec(rng, d);
        for b in basis {
            let p = dot(&v, b);
            add_scaled(&mut v, b, -p);
        }
        if norm(&v) > 1e-3 {
            return normalize(v);
        }
    }
    normalize(gaussian_vec(rng, d))
}

/// Orthonormal basis spanning `vectors`, via modified Gram-Schmidt.
fn orthonormal_span(vectors: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let mut basis: Vec<Vec<f32>> = Vec::new();
    for v in vectors {
        let mut r = v.clone();
        for b in &basis {
            let p = dot(&r, b);
            add_scaled(&mut r, b, -p);
        }
        if norm(&r) > 1e-4 {
            basis.push(normalize(r));
        }
    }
    basis
}

/// Builds the planted geometry for a config. Pure function of
/// `(seed, d_t, d_f)`.
pub fn synth_structure(config: &SynthConfig) -> SynthStructure {
    let mut rng = structure_rng(config.seed);
    let frame_centroids: Vec<Vec<f32>> = (0..TOPIC_COUNT)
        .map(|_| normalize(gaussian_vec(&mut rng, config.d_f)))
        .collect();
    // with equal dims the text space shares the frame topics, which makes
    // frame-text agreement a real signal; otherwise topics correspond by
    // index only and agreement is learned, not innate
    let text_centroids: Vec<Vec<f32>> = if config.d_t == config.d_f {
        frame_centroids.clone()
    } else {
        (0..TOPIC_COUNT)
            .map(|_| normalize(gaussian_vec(&mut rng, config.d_t)))
            .collect()
    };

    let mut frame_basis = orthonormal_span(&frame_centroids);
    let visual_direction = orthogonal_unit(&mut rng, &frame_basis, config.d_f);
    frame_basis.push(visual_direction.clone());
    let incoherence_marker = orthogonal_unit(&mut rng, &frame_basis, config.d_f);

    let mut text_basis = orthonormal_span(&text_centroids);
    let text_direction = orthogonal_unit(&mut rng, &text_basis, config.d_t);
    text_basis.push(text_direction.clone());
    let mismatch_marker = orthogonal_unit(&mut rng, &text_basis, config.d_t);

    SynthStructure {
        frame_centroids,
        text_centroids,
        visual_direction,
        incoherence_marker,
        text_direction,
        mismatch_marker,
    }
}

fn lerp(from: &[f32], to: &[f32], t: f32) -> Vec<f32> {
    from.iter()
        .zip(to)
        .map(|(a, b)| a + (b - a) * t)
        .collect()
}

/// Generates record `index` of the corpus defined by `config`. Depends only
/// on `(config, index)`, never on other records.
pub fn generate_record(
    config: &SynthConfig,
    structure: &SynthStructure,
    index: usize,
) -> (VideoRecord, DefectFlags) {
    let mut rng = record_rng(config.seed, index);
    let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid normal");
    let p = &config.defect_probabilities;

    // fixed draw order; every record consumes the same stream layout
    let topic = rng.gen_range(0..TOPIC_COUNT);
    let incoherence_draw = rng.gen_bool(p.incoherence);
    let flags = DefectFlags {
        // a single frame has no order to break
        incoherence: config.m > 1 && incoherence_draw,
        text_mismatch: rng.gen_bool(p.text_mismatch),
        visual_defect: rng.gen_bool(p.visual_defect),
        text_defect: rng.gen_bool(p.text_defect),
    };
    let mild = rng.gen_bool(0.5);
    let mismatch_pick = rng.gen_range(0..TOPIC_COUNT - 1);

    let severity = if flags.count() == 1 && mild { 0.5 } else { 1.0 };
    let shift = config.defect_magnitude * severity;

    let home = &structure.frame_centroids[topic];
    let mut frame_embeddings = Vec::with_capacity(config.m);
    for j in 0..config.m {
        let mut frame = home.clone();
        if flags.incoherence {
            // frames slide from -span/2 to +span/2 along the drift
            // direction; the offsets cancel in the mean, so only the order
            // of the frames carries the defect
            let t = j as f32 / (config.m - 1) as f32 - 0.5;
            add_scaled(
                &mut frame,
                &structure.incoherence_marker,
                t * shift * INCOHERENCE_SPAN,
            );
        }
        if flags.visual_defect {
            add_scaled(&mut frame, &structure.visual_direction, shift);
        }
        for x in frame.iter_mut() {
            *x += noise.sample(&mut rng);
        }
        frame_embeddings.push(frame);
    }

    let mut cover_embeddings: [Vec<f32>; 2] = [home.clone(), home.clone()];
    for cover in cover_embeddings.iter_mut() {
        if flags.visual_defect {
            add_scaled(cover, &structure.visual_direction, shift);
        }
        for x in cover.iter_mut() {
            *x += noise.sample(&mut rng);
        }
    }

    let text_home = &structure.text_centroids[topic];
    let mut text_embedding = if flags.text_mismatch {
        let other = (topic + 1 + mismatch_pick) % TOPIC_COUNT;
        lerp(text_home, &structure.text_centroids[other], severity)
    } else {
        text_home.clone()
    };
    if flags.text_defect {
        add_scaled(&mut text_embedding, &structure.text_direction, shift);
    }
    if flags.text_mismatch {
        add_scaled(
            &mut text_embedding,
            &structure.mismatch_marker,
            shift * MISMATCH_TRACE,
        );
    }
    for x in text_embedding.iter_mut() {
        *x += noise.sample(&mut rng);
    }

    let record = VideoRecord {
        id: format!("synth-{index:06}"),
        text_embedding,
        frame_embeddings,
        cover_embeddings,
        grade: Some(assign_grade(flags, mild)),
    };
    (record, flags)
}

/// Generates the full corpus for `config`, with the planted defect flags of
/// each record.
pub fn generate_corpus(
    config: &SynthConfig,
) -> Result<(Vec<VideoRecord>, Vec<DefectFlags>), SynthError> {
    config.validate()?;
    let structure = synth_structure(config);
    let mut records = Vec::with_capacity(config.n_records);
    let mut flags = Vec::with_capacity(config.n_records);
    for index in 0..config.n_records {
        let (record, f) = generate_record(config, &structure, index);
        records.push(record);
        flags.push(f);
    }
    Ok((records, flags))
}
