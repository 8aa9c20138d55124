//! Synthetic stand-in for videos, queries and the frozen answering model.
//!
//! Every event owns a latent unit vector; its frames are noisy copies of it.
//! Queries live on the other side of a hidden linear "modality gap" map, so
//! raw frame/query cosine is informative but imperfect. The answerer is a
//! threshold rule over which frames were sampled.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};

/// Data style of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Comprehensive,
    Needle,
}

impl Style {
    pub fn as_str(self) -> &'static str {
        match self {
            Style::Comprehensive => "comprehensive",
            Style::Needle => "needle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub feature_dim: usize,
    /// Inclusive range of event lengths in frames.
    pub frames_per_event: (usize, usize),
    /// Relative norm of per-frame noise around the event latent.
    pub event_noise: f64,
    /// Relative norm of query noise.
    pub query_noise: f64,
    /// Scale `ε_M` of the gaussian part of the modality-gap map.
    pub modality_gap_scale: f64,
    pub n_choices: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            frames_per_event: (8, 16),
            event_noise: 0.3,
            query_noise: 0.3,
            modality_gap_scale: 0.5,
            n_choices: 4,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        let (lo, hi) = self.frames_per_event;
        if lo == 0 || lo > hi {
            return Err(Error::invalid(format!(
                "bad frames-per-event range {lo}..={hi}"
            )));
        }
        for (name, v) in [
            ("event noise", self.event_noise),
            ("query noise", self.query_noise),
            ("modality gap", self.modality_gap_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.n_choices < 2 || self.n_choices > u8::MAX as usize {
            return Err(Error::invalid(format!(
                "answer choices must be in 2..=255, got {}",
                self.n_choices
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    /// Unit-norm frame features, one row per frame.
    pub frames: Matrix,
    /// Half-open `(start, end)` ranges partitioning the frames.
    pub event_boundaries: Vec<(usize, usize)>,
    pub event_vectors: Vec<Vec<f64>>,
}

impl SyntheticVideo {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

/// Frames that must be sampled, and how many of them, for the answerer to
/// see the evidence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequiredGroup {
    /// Sorted, distinct frame indices.
    pub indices: Vec<usize>,
    pub threshold: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryItem {
    pub embedding: Vec<f64>,
    pub required_groups: Vec<RequiredGroup>,
    pub n_choices: usize,
    pub correct_option: usize,
    pub style: Style,
}

/// Parameters of the threshold answerer standing in for the frozen model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub needle_threshold: usize,
    pub comprehensive_threshold: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            needle_threshold: 4,
            comprehensive_threshold: 1,
        }
    }
}

impl OracleConfig {
    pub fn threshold_for(&self, style: Style) -> usize {
        match style {
            Style::Needle => self.needle_threshold,
            Style::Comprehensive => self.comprehensive_threshold,
        }
    }
}

pub fn normalize(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateInput(
            "cannot normalize a zero vector".into(),
        ));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

fn gaussian_vec<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(dim, 1.0, rng);
        if normalize(&mut v).is_ok() {
            return v;
        }
    }
}

/// A synthetic world: configuration plus its hidden modality-gap map
/// `M = I + ε_M · G`, where `G` has i.i.d. standard normal entries drawn
/// from the world seed.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    gap: Matrix,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gap = Matrix::identity(d);
        for v in gap.as_mut_slice() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v += config.modality_gap_scale * g;
        }
        Ok(Self { config, gap })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn modality_gap(&self) -> &Matrix {
        &self.gap
    }

    pub fn generate_clip<R: Rng + ?Sized>(
        &self,
        n_events: usize,
        rng: &mut R,
    ) -> Result<SyntheticVideo> {
        if n_events == 0 {
            return Err(Error::invalid("a clip needs at least one event"));
        }
        let (lo, hi) = self.config.frames_per_event;
        let lengths: Vec<usize> = (0..n_events).map(|_| rng.gen_range(lo..=hi)).collect();
        self.generate_clip_with_lengths(&lengths, rng)
    }

    /// Like [`World::generate_clip`] with explicit event lengths.
    pub fn generate_clip_with_lengths<R: Rng + ?Sized>(
        &self,
        lengths: &[usize],
        rng: &mut R,
    ) -> Result<SyntheticVideo> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::invalid("events must be nonempty"));
        }
        let d = self.config.feature_dim;
        let total: usize = lengths.iter().sum();
        let noise_std = self.config.event_noise / (d as f64).sqrt();
        let mut frames = Matrix::zeros(total, d);
        let mut event_boundaries = Vec::with_capacity(lengths.len());
        let mut event_vectors = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            let latent = unit_vector(d, rng);
            for t in start..start + len {
                let row = frames.row_mut(t);
                if self.config.event_noise == 0.0 {
                    row.copy_from_slice(&latent);
                    continue;
                }
                loop {
                    let noise = gaussian_vec(d, noise_std, rng);
                    for ((r, l), n) in row.iter_mut().zip(&latent).zip(&noise) {
                        *r = l + n;
                    }
                    if normalize(row).is_ok() {
                        break;
                    }
                }
            }
            event_boundaries.push((start, start + len));
            event_vectors.push(latent);
            start += len;
        }
        Ok(SyntheticVideo {
            frames,
            event_boundaries,
            event_vectors,
        })
    }

    /// Query about `target_events`: `normalize(M · mean(latents) + noise)`,
    /// one required group per target event.
    pub fn make_query<R: Rng + ?Sized>(
        &self,
        video: &SyntheticVideo,
        target_events: &[usize],
        style: Style,
        threshold: usize,
        rng: &mut R,
    ) -> Result<QueryItem> {
        if target_events.is_empty() {
            return Err(Error::invalid("a query needs at least one target event"));
        }
        if threshold == 0 {
            return Err(Error::invalid("group threshold must be at least 1"));
        }
        let d = self.config.feature_dim;
        let mut mean = vec![0.0; d];
        let mut required_groups = Vec::with_capacity(target_events.len());
        for &e in target_events {
            let (Some(latent), Some(&(start, end))) =
                (video.event_vectors.get(e), video.event_boundaries.get(e))
            else {
                return Err(Error::invalid(format!(
                    "event {e} does not exist in a clip with {} events",
                    video.event_vectors.len()
                )));
            };
            for (m, l) in mean.iter_mut().zip(latent) {
                *m += l / target_events.len() as f64;
            }
            required_groups.push(RequiredGroup {
                indices: (start..end).collect(),
                threshold,
            });
        }
        let mut embedding = self.gap.mul_vec(&mean);
        if self.config.query_noise > 0.0 {
            let scale = self.config.query_noise * norm(&embedding) / (d as f64).sqrt();
            let noise = gaussian_vec(d, scale, rng);
            embedding.iter_mut().zip(&noise).for_each(|(e, n)| *e += n);
        }
        normalize(&mut embedding)?;
        let correct_option = rng.gen_range(0..self.config.n_choices);
        Ok(QueryItem {
            embedding,
            required_groups,
            n_choices: self.config.n_choices,
            correct_option,
            style,
        })
    }
}

/// Number of sampled frames inside each required group.
pub fn group_hits(query: &QueryItem, sampled: &[usize]) -> Vec<usize> {
    let mut sorted = sampled.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    query
        .required_groups
        .iter()
        .map(|g| {
            g.indices
                .iter()
                .filter(|i| sorted.binary_search(i).is_ok())
                .count()
        })
        .collect()
}

/// Whether every group's threshold is met.
pub fn evidence_complete(query: &QueryItem, sampled: &[usize]) -> bool {
    group_hits(query, sampled)
        .iter()
        .zip(&query.required_groups)
        .all(|(&hits, g)| hits >= g.threshold)
}

/// The frozen answerer: correct when the evidence is complete, otherwise a
/// uniform guess over all options.
pub fn oracle_answer<R: Rng + ?Sized>(query: &QueryItem, sampled: &[usize], rng: &mut R) -> usize {
    if evidence_complete(query, sampled) {
        query.correct_option
    } else {
        rng.gen_range(0..query.n_choices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    fn world(cfg: WorldConfig) -> World {
        World::new(cfg).unwrap()
    }

    #[test]
    fn noiseless_frames_equal_latent() {
        let w = world(WorldConfig {
            event_noise: 0.0,
            feature_dim: 8,
            ..WorldConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = w.generate_clip(3, &mut rng).unwrap();
        for (e, &(s, t)) in clip.event_boundaries.iter().enumerate() {
            for f in s..t {
                assert_eq!(clip.frames.row(f), clip.event_vectors[e].as_slice());
            }
        }
    }

    #[test]
    fn fixed_lengths_partition_frames() {
        let w = world(WorldConfig {
            frames_per_event: (10, 10),
            ..WorldConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clip = w.generate_clip(3, &mut rng).unwrap();
        assert_eq!(clip.len(), 30);
        assert_eq!(clip.event_boundaries, vec![(0, 10), (10, 20), (20, 30)]);
        for t in 0..30 {
            assert!((norm(clip.frames.row(t)) - 1.0).abs() < 1e-9);
        }
        assert!(w.generate_clip(0, &mut rng).is_err());
    }

    #[test]
    fn clean_query_equals_latent() {
        let w = world(WorldConfig {
            modality_gap_scale: 0.0,
            query_noise: 0.0,
            ..WorldConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clip = w.generate_clip(4, &mut rng).unwrap();
        let q = w
            .make_query(&clip, &[2], Style::Needle, 4, &mut rng)
            .unwrap();
        for (a, b) in q.embedding.iter().zip(&clip.event_vectors[2]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(q.correct_option < 4);
    }

    #[test]
    fn query_groups_follow_boundaries() {
        let w = world(WorldConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clip = w.generate_clip(4, &mut rng).unwrap();
        let q = w
            .make_query(&clip, &[0, 3], Style::Comprehensive, 1, &mut rng)
            .unwrap();
        assert_eq!(q.required_groups.len(), 2);
        let (s0, e0) = clip.event_boundaries[0];
        let (s3, e3) = clip.event_boundaries[3];
        assert_eq!(q.required_groups[0].indices, (s0..e0).collect::<Vec<_>>());
        assert_eq!(q.required_groups[1].indices, (s3..e3).collect::<Vec<_>>());
        assert!(w
            .make_query(&clip, &[], Style::Needle, 1, &mut rng)
            .is_err());
        assert!(w
            .make_query(&clip, &[7], Style::Needle, 1, &mut rng)
            .is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let w = world(WorldConfig::default());
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clip = w.generate_clip(3, &mut rng).unwrap();
            let q = w
                .make_query(&clip, &[1], Style::Needle, 4, &mut rng)
                .unwrap();
            (clip, q)
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn oracle_threshold_boundary() {
        let q = QueryItem {
            embedding: vec![1.0],
            required_groups: vec![RequiredGroup {
                indices: (20..28).collect(),
                threshold: 4,
            }],
            n_choices: 4,
            correct_option: 2,
            style: Style::Needle,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            assert_eq!(oracle_answer(&q, &[0, 20, 21, 22, 23], &mut rng), 2);
            assert_eq!(oracle_answer(&q, &(0..40).collect::<Vec<_>>(), &mut rng), 2);
        }
        assert!(!evidence_complete(&q, &[20, 21, 22]));
        assert_eq!(group_hits(&q, &[21, 21, 27, 3]), vec![2]);
    }

    #[test]
    fn within_event_similarity_dominates() {
        let w = world(WorldConfig {
            feature_dim: 16,
            frames_per_event: (4, 4),
            event_noise: 0.3,
            ..WorldConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut within, mut across) = (0.0, 0.0);
        for _ in 0..1000 {
            let c = w.generate_clip(2, &mut rng).unwrap();
            within += dot(c.frames.row(0), c.frames.row(1));
            across += dot(c.frames.row(0), c.frames.row(4));
        }
        assert!(within / 1000.0 > across / 1000.0 + 0.5);
    }
}
