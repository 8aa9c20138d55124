//! Training data construction: needle-in-a-haystack splicing, comprehensive
//! multi-event samples, the too-easy/too-hard difficulty filter, and the
//! TSDS binary dataset format.
//!
//! TSDS layout (little-endian):
//!
//! ```text
//! header   magic "TSDS" | version u32 | record_count u64 | feature_dim u32
//! record   style u8 | T_c u32 | n_choices u8 | correct u8 | n_groups u16
//!          n_groups × (threshold u16 | count u32 | count × u32 index)
//!          target_mask ⌈T_c/8⌉ bytes, LSB-first
//!          query D × f32
//!          frames T_c·D × f32, row-major
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};
use crate::worldsim::{OracleConfig, QueryItem, RequiredGroup, Style, SyntheticVideo, World};

pub const MAGIC: &[u8; 4] = b"TSDS";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// One training or evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct SpliceSample {
    pub frames: Matrix,
    pub query: QueryItem,
    /// Frame-level pseudo-labels: `true` for frames of the target footage.
    pub target_mask: Vec<bool>,
    pub style: Style,
}

impl SpliceSample {
    pub fn answer_key(&self) -> usize {
        self.query.correct_option
    }

    pub fn candidate_count(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn target_count(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub feature_dim: usize,
    pub samples: Vec<SpliceSample>,
}

impl Dataset {
    pub fn new(feature_dim: usize, samples: Vec<SpliceSample>) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|s| s.feature_dim() != feature_dim) {
            return Err(Error::shape(format!(
                "record with dimension {} in a dimension-{feature_dim} dataset",
                bad.feature_dim()
            )));
        }
        Ok(Self {
            feature_dim,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Splices the target clip among distractor clips at event granularity.
///
/// Every clip is cut into its events, the segments are shuffled uniformly,
/// and the query's groups are re-indexed to the spliced positions.
#[allow(clippy::needless_range_loop)]
pub fn build_needle_sample<R: Rng + ?Sized>(
    target: &SyntheticVideo,
    distractors: &[SyntheticVideo],
    query: &QueryItem,
    rng: &mut R,
) -> Result<SpliceSample> {
    let dim = target.frames.cols();
    if let Some(bad) = distractors.iter().find(|v| v.frames.cols() != dim) {
        return Err(Error::shape(format!(
            "distractor has dimension {}, target has {dim}",
            bad.frames.cols()
        )));
    }
    if query.embedding.len() != dim {
        return Err(Error::shape("query and target dimensions differ"));
    }
    // (clip, start, end); clip 0 is the target
    let mut segments: Vec<(usize, usize, usize)> = Vec::new();
    for (clip, video) in std::iter::once(target).chain(distractors).enumerate() {
        segments.extend(video.event_boundaries.iter().map(|&(s, e)| (clip, s, e)));
    }
    segments.shuffle(rng);

    let total: usize = segments.iter().map(|(_, s, e)| e - s).sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut target_mask = Vec::with_capacity(total);
    let mut relocated = vec![usize::MAX; target.len()];
    for &(clip, start, end) in &segments {
        let video = if clip == 0 {
            target
        } else {
            &distractors[clip - 1]
        };
        for t in start..end {
            if clip == 0 {
                relocated[t] = target_mask.len();
            }
            target_mask.push(clip == 0);
            data.extend_from_slice(video.frames.row(t));
        }
    }

    let mut query = query.clone();
    for group in &mut query.required_groups {
        for i in &mut group.indices {
            *i = *relocated.get(*i).ok_or_else(|| {
                Error::invalid(format!("required frame {i} is outside the target clip"))
            })?;
        }
        group.indices.sort_unstable();
    }
    Ok(SpliceSample {
        frames: Matrix::from_vec(total, dim, data)?,
        query,
        target_mask,
        style: Style::Needle,
    })
}

/// Wraps a single clip whose query spans several of its events.
pub fn build_comprehensive_sample(
    video: &SyntheticVideo,
    query: &QueryItem,
) -> Result<SpliceSample> {
    let mut target_mask = vec![false; video.len()];
    for g in &query.required_groups {
        for &i in &g.indices {
            *target_mask
                .get_mut(i)
                .ok_or_else(|| Error::invalid(format!("required frame {i} outside the clip")))? =
                true;
        }
    }
    Ok(SpliceSample {
        frames: video.frames.clone(),
        query: query.clone(),
        target_mask,
        style: Style::Comprehensive,
    })
}

/// `count` evenly spaced indices over `len` frames (bin centres).
pub fn uniform_indices(len: usize, count: usize) -> Vec<usize> {
    (0..count)
        .map(|i| (2 * i + 1) * len / (2 * count))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Uniform frames that must not already answer the query.
    pub easy_probe: usize,
    /// Frame budget within which the query must be answerable.
    pub hard_budget: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            easy_probe: 4,
            hard_budget: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVerdict {
    Keep,
    DropTooEasy,
    DropTooHard,
}

/// Smallest greedy selection meeting every group threshold, or `None` when
/// some group is smaller than its threshold.
pub fn greedy_cover(query: &QueryItem) -> Option<Vec<usize>> {
    let mut picked: Vec<usize> = Vec::new();
    for g in &query.required_groups {
        if g.indices.len() < g.threshold {
            return None;
        }
        let mut have = g.indices.iter().filter(|i| picked.contains(i)).count();
        for &i in &g.indices {
            if have >= g.threshold {
                break;
            }
            if !picked.contains(&i) {
                picked.push(i);
                have += 1;
            }
        }
    }
    picked.sort_unstable();
    Some(picked)
}

pub fn difficulty_filter(sample: &SpliceSample, filter: &FilterConfig) -> FilterVerdict {
    let len = sample.candidate_count();
    let probe = uniform_indices(len, filter.easy_probe.min(len));
    if crate::worldsim::evidence_complete(&sample.query, &probe) {
        return FilterVerdict::DropTooEasy;
    }
    match greedy_cover(&sample.query) {
        Some(cover) if cover.len() <= filter.hard_budget.min(len) => FilterVerdict::Keep,
        _ => FilterVerdict::DropTooHard,
    }
}

/// Mix of data styles to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleMix {
    Needle,
    Comprehensive,
    Mixed,
}

impl StyleMix {
    pub fn as_str(self) -> &'static str {
        match self {
            StyleMix::Needle => "needle",
            StyleMix::Comprehensive => "comprehensive",
            StyleMix::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub n_samples: usize,
    pub style: StyleMix,
    /// Candidate frames per record `T_c`.
    pub candidate_frames: usize,
    /// Length of the needle clip.
    pub target_frames: usize,
    /// Inclusive range of events per distractor clip.
    pub distractor_events: (usize, usize),
    /// Inclusive range of target events in a comprehensive query.
    pub comprehensive_events: (usize, usize),
    /// Maximum generation attempts; `None` means `max(100, 20·n_samples)`.
    pub attempt_budget: Option<usize>,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            style: StyleMix::Mixed,
            candidate_frames: 128,
            target_frames: 8,
            distractor_events: (1, 3),
            comprehensive_events: (2, 3),
            attempt_budget: None,
        }
    }
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        if self.target_frames == 0 || self.target_frames >= self.candidate_frames {
            return Err(Error::invalid(format!(
                "target clip of {} frames does not fit {} candidates with distractors",
                self.target_frames, self.candidate_frames
            )));
        }
        let (a, b) = self.distractor_events;
        let (c, d) = self.comprehensive_events;
        if a == 0 || a > b || c == 0 || c > d {
            return Err(Error::invalid("bad event-count range"));
        }
        if self.candidate_frames > u32::MAX as usize {
            return Err(Error::invalid("too many candidate frames"));
        }
        Ok(())
    }

    pub fn attempts(&self) -> usize {
        self.attempt_budget
            .unwrap_or_else(|| (20 * self.n_samples).max(100))
    }
}

/// Counts from one dataset build.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub attempts: usize,
    pub kept: usize,
    pub kept_needle: usize,
    pub kept_comprehensive: usize,
    pub dropped_too_easy: usize,
    pub dropped_too_hard: usize,
}

impl GenerationStats {
    /// `key=value` lines in a fixed order.
    pub fn report(&self) -> String {
        format!(
            "attempts={}\nkept={}\nkept_needle={}\nkept_comprehensive={}\ndropped_too_easy={}\ndropped_too_hard={}\n",
            self.attempts,
            self.kept,
            self.kept_needle,
            self.kept_comprehensive,
            self.dropped_too_easy,
            self.dropped_too_hard
        )
    }
}

/// Splits `total` frames into event lengths drawn from `range`, truncating
/// the last one.
fn event_lengths<R: Rng + ?Sized>(total: usize, range: (usize, usize), rng: &mut R) -> Vec<usize> {
    let mut lengths = Vec::new();
    let mut left = total;
    while left > 0 {
        let len = rng.gen_range(range.0..=range.1).min(left);
        lengths.push(len);
        left -= len;
    }
    lengths
}

fn quantize(sample: &mut SpliceSample) {
    for v in sample.frames.as_mut_slice() {
        *v = *v as f32 as f64;
    }
    for v in &mut sample.query.embedding {
        *v = *v as f32 as f64;
    }
}

fn needle_attempt<R: Rng + ?Sized>(
    world: &World,
    recipe: &Recipe,
    oracle: &OracleConfig,
    rng: &mut R,
) -> Result<SpliceSample> {
    let target = world.generate_clip_with_lengths(&[recipe.target_frames], rng)?;
    let query = world.make_query(&target, &[0], Style::Needle, oracle.needle_threshold, rng)?;
    let mut left = recipe.candidate_frames - recipe.target_frames;
    let mut distractors = Vec::new();
    while left > 0 {
        let n_events = rng.gen_range(recipe.distractor_events.0..=recipe.distractor_events.1);
        let (lo, hi) = world.config().frames_per_event;
        let mut lengths = Vec::new();
        for _ in 0..n_events {
            if left == 0 {
                break;
            }
            let len = rng.gen_range(lo..=hi).min(left);
            lengths.push(len);
            left -= len;
        }
        distractors.push(world.generate_clip_with_lengths(&lengths, rng)?);
    }
    build_needle_sample(&target, &distractors, &query, rng)
}

fn comprehensive_attempt<R: Rng + ?Sized>(
    world: &World,
    recipe: &Recipe,
    oracle: &OracleConfig,
    rng: &mut R,
) -> Result<SpliceSample> {
    let lengths = event_lengths(
        recipe.candidate_frames,
        world.config().frames_per_event,
        rng,
    );
    let clip = world.generate_clip_with_lengths(&lengths, rng)?;
    let (lo, hi) = recipe.comprehensive_events;
    let k = rng.gen_range(lo..=hi).min(lengths.len());
    let mut targets = rand::seq::index::sample(rng, lengths.len(), k).into_vec();
    targets.sort_unstable();
    let query = world.make_query(
        &clip,
        &targets,
        Style::Comprehensive,
        oracle.comprehensive_threshold,
        rng,
    )?;
    build_comprehensive_sample(&clip, &query)
}

/// Generates, filters and collects samples until `recipe.n_samples` are
/// kept. Stored values are rounded to 32-bit precision so the in-memory
/// dataset equals what a TSDS round-trip yields.
pub fn build_dataset<R: Rng + ?Sized>(
    world: &World,
    recipe: &Recipe,
    oracle: &OracleConfig,
    filter: &FilterConfig,
    rng: &mut R,
) -> Result<(Dataset, GenerationStats)> {
    recipe.validate()?;
    let mut stats = GenerationStats::default();
    let mut samples = Vec::with_capacity(recipe.n_samples);
    let budget = recipe.attempts();
    while samples.len() < recipe.n_samples {
        if stats.attempts >= budget {
            return Err(Error::GenerationExhausted {
                attempts: stats.attempts,
                kept: samples.len(),
                requested: recipe.n_samples,
            });
        }
        stats.attempts += 1;
        let style = match recipe.style {
            StyleMix::Needle => Style::Needle,
            StyleMix::Comprehensive => Style::Comprehensive,
            StyleMix::Mixed if rng.gen_bool(0.5) => Style::Needle,
            StyleMix::Mixed => Style::Comprehensive,
        };
        let mut sample = match style {
            Style::Needle => needle_attempt(world, recipe, oracle, rng)?,
            Style::Comprehensive => comprehensive_attempt(world, recipe, oracle, rng)?,
        };
        match difficulty_filter(&sample, filter) {
            FilterVerdict::DropTooEasy => stats.dropped_too_easy += 1,
            FilterVerdict::DropTooHard => stats.dropped_too_hard += 1,
            FilterVerdict::Keep => {
                quantize(&mut sample);
                match style {
                    Style::Needle => stats.kept_needle += 1,
                    Style::Comprehensive => stats.kept_comprehensive += 1,
                }
                samples.push(sample);
            }
        }
    }
    stats.kept = samples.len();
    Ok((Dataset::new(world.config().feature_dim, samples)?, stats))
}

// ---------------------------------------------------------------------------
// TSDS encoding

fn style_code(style: Style) -> u8 {
    match style {
        Style::Comprehensive => 0,
        Style::Needle => 1,
    }
}

/// Serializes a dataset to TSDS bytes.
pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.feature_dim == 0 || dataset.feature_dim > u32::MAX as usize {
        return Err(Error::invalid("feature dimension must fit in 1..=u32::MAX"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.samples.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dataset.feature_dim as u32).to_le_bytes());
    for (r, s) in dataset.samples.iter().enumerate() {
        encode_record(&mut out, s, dataset.feature_dim)
            .map_err(|e| Error::invalid(format!("record {r}: {e}")))?;
    }
    Ok(out)
}

fn encode_record(out: &mut Vec<u8>, s: &SpliceSample, dim: usize) -> Result<()> {
    let tc = s.candidate_count();
    let q = &s.query;
    if s.feature_dim() != dim || q.embedding.len() != dim {
        return Err(Error::shape("record dimension differs from the header"));
    }
    if s.target_mask.len() != tc {
        return Err(Error::shape("target mask length differs from frame count"));
    }
    if q.n_choices > u8::MAX as usize || q.correct_option >= q.n_choices {
        return Err(Error::invalid("answer options do not fit the format"));
    }
    if q.required_groups.len() > u16::MAX as usize || tc > u32::MAX as usize {
        return Err(Error::invalid("record too large for the format"));
    }
    out.push(style_code(s.style));
    out.extend_from_slice(&(tc as u32).to_le_bytes());
    out.push(q.n_choices as u8);
    out.push(q.correct_option as u8);
    out.extend_from_slice(&(q.required_groups.len() as u16).to_le_bytes());
    for g in &q.required_groups {
        if g.threshold > u16::MAX as usize {
            return Err(Error::invalid("group threshold does not fit u16"));
        }
        out.extend_from_slice(&(g.threshold as u16).to_le_bytes());
        out.extend_from_slice(&(g.indices.len() as u32).to_le_bytes());
        for &i in &g.indices {
            out.extend_from_slice(&(i as u32).to_le_bytes());
        }
    }
    let mut mask = vec![0u8; tc.div_ceil(8)];
    for (i, _) in s.target_mask.iter().enumerate().filter(|(_, &m)| m) {
        mask[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&mask);
    for &v in &q.embedding {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in s.frames.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::at_byte(
                    self.pos,
                    format!(
                        "truncated {what}: need {n} bytes, {} left",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::at_byte(start, format!("{what} size overflows")))?;
        let raw = self.take(len, what)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(Error::at_byte(
                        start + 4 * i,
                        format!("non-finite value in {what}"),
                    ))
                }
            })
            .collect()
    }
}

/// Parses TSDS bytes. Any defect yields a format error carrying the byte
/// offset where it was detected; nothing partial is returned.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::at_byte(0, format!("bad magic {magic:02x?}")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::at_byte(4, format!("unsupported version {version}")));
    }
    let count = r.u64("record count")?;
    let dim_at = r.pos;
    let dim = r.u32("feature dimension")? as usize;
    if dim == 0 {
        return Err(Error::at_byte(dim_at, "feature dimension is zero"));
    }
    let mut samples = Vec::new();
    for _ in 0..count {
        samples.push(decode_record(&mut r, dim)?);
    }
    if r.remaining() != 0 {
        return Err(Error::at_byte(
            r.pos,
            format!("{} trailing bytes", r.remaining()),
        ));
    }
    Ok(Dataset {
        feature_dim: dim,
        samples,
    })
}

fn decode_record(r: &mut Reader<'_>, dim: usize) -> Result<SpliceSample> {
    let at = r.pos;
    let style = match r.u8("style")? {
        0 => Style::Comprehensive,
        1 => Style::Needle,
        other => return Err(Error::at_byte(at, format!("unknown style {other}"))),
    };
    let tc_at = r.pos;
    let tc = r.u32("frame count")? as usize;
    if tc == 0 {
        return Err(Error::at_byte(tc_at, "record has no frames"));
    }
    let choices_at = r.pos;
    let n_choices = r.u8("choice count")? as usize;
    let correct = r.u8("correct option")? as usize;
    if n_choices < 2 || correct >= n_choices {
        return Err(Error::at_byte(
            choices_at,
            format!("correct option {correct} invalid for {n_choices} choices"),
        ));
    }
    let groups_at = r.pos;
    let n_groups = r.u16("group count")? as usize;
    if n_groups == 0 {
        return Err(Error::at_byte(groups_at, "record has no required groups"));
    }
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let g_at = r.pos;
        let threshold = r.u16("group threshold")? as usize;
        let n = r.u32("group size")? as usize;
        if threshold == 0 || n == 0 || n > tc {
            return Err(Error::at_byte(
                g_at,
                format!("group of {n} frames with threshold {threshold} in a {tc}-frame record"),
            ));
        }
        let raw = r.take(n * 4, "group indices")?;
        let mut indices = Vec::with_capacity(n);
        for (j, c) in raw.chunks_exact(4).enumerate() {
            let i = u32::from_le_bytes(c.try_into().unwrap()) as usize;
            let ok = i < tc && indices.last().is_none_or(|&p| p < i);
            if !ok {
                return Err(Error::at_byte(
                    r.pos - raw.len() + 4 * j,
                    format!("group index {i} out of order or range"),
                ));
            }
            indices.push(i);
        }
        groups.push(RequiredGroup { indices, threshold });
    }
    let mask_at = r.pos;
    let mask_bytes = r.take(tc.div_ceil(8), "target mask")?;
    let target_mask: Vec<bool> = (0..tc)
        .map(|i| mask_bytes[i / 8] >> (i % 8) & 1 == 1)
        .collect();
    if !tc.is_multiple_of(8) && mask_bytes[tc / 8] >> (tc % 8) != 0 {
        return Err(Error::at_byte(
            mask_at + tc / 8,
            "padding bits set in target mask",
        ));
    }
    let query_at = r.pos;
    let embedding = r.f32s(dim, "query embedding")?;
    if norm(&embedding) == 0.0 {
        return Err(Error::at_byte(query_at, "query embedding is zero"));
    }
    let frames_at = r.pos;
    let values = tc
        .checked_mul(dim)
        .ok_or_else(|| Error::at_byte(frames_at, "frame matrix size overflows"))?;
    let data = r.f32s(values, "frames")?;
    let frames = Matrix::from_vec(tc, dim, data)?;
    if let Some(t) = (0..tc).find(|&t| norm(frames.row(t)) == 0.0) {
        return Err(Error::at_byte(
            frames_at + 4 * t * dim,
            format!("frame {t} is all zeros"),
        ));
    }
    Ok(SpliceSample {
        frames,
        query: QueryItem {
            embedding,
            required_groups: groups,
            n_choices,
            correct_option: correct,
            style,
        },
        target_mask,
        style,
    })
}

/// Writes the TSDS encoding and returns its length in bytes.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<usize> {
    let bytes = encode_dataset(dataset)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::WorldConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_world() -> World {
        World::new(WorldConfig {
            feature_dim: 8,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn query_with(groups: Vec<RequiredGroup>, dim: usize) -> QueryItem {
        QueryItem {
            embedding: vec![1.0; dim],
            required_groups: groups,
            n_choices: 4,
            correct_option: 1,
            style: Style::Comprehensive,
        }
    }

    fn sample_with(len: usize, groups: Vec<RequiredGroup>) -> SpliceSample {
        let mut mask = vec![false; len];
        for g in &groups {
            for &i in &g.indices {
                mask[i] = true;
            }
        }
        SpliceSample {
            frames: Matrix::from_vec(len, 2, vec![1.0; 2 * len]).unwrap(),
            query: query_with(groups, 2),
            target_mask: mask,
            style: Style::Comprehensive,
        }
    }

    #[test]
    fn needle_without_distractors_is_all_target() {
        let w = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = w.generate_clip(2, &mut rng).unwrap();
        let q = w
            .make_query(&clip, &[0, 1], Style::Needle, 1, &mut rng)
            .unwrap();
        let s = build_needle_sample(&clip, &[], &q, &mut rng).unwrap();
        assert!(s.target_mask.iter().all(|&m| m));
    }

    #[test]
    fn needle_conserves_frames() {
        let w = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = w.generate_clip_with_lengths(&[10], &mut rng).unwrap();
        let distractors = vec![
            w.generate_clip_with_lengths(&[30, 20], &mut rng).unwrap(),
            w.generate_clip_with_lengths(&[15, 15, 10], &mut rng)
                .unwrap(),
        ];
        let q = w
            .make_query(&target, &[0], Style::Needle, 4, &mut rng)
            .unwrap();
        let s = build_needle_sample(&target, &distractors, &q, &mut rng).unwrap();
        assert_eq!(s.candidate_count(), 100);
        assert_eq!(s.target_count(), 10);
        let group = &s.query.required_groups[0].indices;
        for (k, &i) in group.iter().enumerate() {
            assert!(s.target_mask[i]);
            assert_eq!(s.frames.row(i), target.frames.row(k));
        }
    }

    #[test]
    fn needle_rejects_dimension_mismatch() {
        let w = small_world();
        let w4 = World::new(WorldConfig {
            feature_dim: 4,
            ..WorldConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = w.generate_clip(1, &mut rng).unwrap();
        let other = w4.generate_clip(1, &mut rng).unwrap();
        let q = w
            .make_query(&target, &[0], Style::Needle, 4, &mut rng)
            .unwrap();
        assert!(matches!(
            build_needle_sample(&target, &[other], &q, &mut rng),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn filter_rejection_rules() {
        let f = FilterConfig::default();
        let whole = sample_with(
            32,
            vec![RequiredGroup {
                indices: (0..32).collect(),
                threshold: 1,
            }],
        );
        assert_eq!(difficulty_filter(&whole, &f), FilterVerdict::DropTooEasy);

        let tiny = sample_with(
            32,
            vec![RequiredGroup {
                indices: vec![5, 6],
                threshold: 4,
            }],
        );
        assert_eq!(difficulty_filter(&tiny, &f), FilterVerdict::DropTooHard);

        let needle = sample_with(
            128,
            vec![RequiredGroup {
                indices: (40..48).collect(),
                threshold: 4,
            }],
        );
        assert_eq!(difficulty_filter(&needle, &f), FilterVerdict::Keep);
    }

    #[test]
    fn filter_budget_too_small() {
        let groups = (0..5)
            .map(|g| RequiredGroup {
                indices: (g * 20..g * 20 + 20).collect(),
                threshold: 15,
            })
            .collect();
        let s = sample_with(128, groups);
        assert_eq!(greedy_cover(&s.query).unwrap().len(), 75);
        assert_eq!(
            difficulty_filter(&s, &FilterConfig::default()),
            FilterVerdict::DropTooHard
        );
    }

    #[test]
    fn uniform_indices_are_bin_centres() {
        assert_eq!(uniform_indices(128, 4), vec![16, 48, 80, 112]);
        assert_eq!(uniform_indices(10, 10), (0..10).collect::<Vec<_>>());
        assert_eq!(uniform_indices(128, 16)[..3], [4, 12, 20]);
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let bytes = encode_dataset(&Dataset::new(64, vec![]).unwrap()).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(decode_dataset(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_dataset(&Dataset::new(4, vec![]).unwrap()).unwrap();
        bytes[0] = b'X';
        match decode_dataset(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_names_offset() {
        let w = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let recipe = Recipe {
            n_samples: 2,
            candidate_frames: 32,
            ..Recipe::default()
        };
        let (ds, _) = build_dataset(
            &w,
            &recipe,
            &OracleConfig::default(),
            &FilterConfig::default(),
            &mut rng,
        )
        .unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        let cut = bytes.len() - 3;
        match decode_dataset(&bytes[..cut]) {
            Err(Error::Format {
                unit: "byte",
                offset,
                ..
            }) => assert!(offset as usize <= cut),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn needle_only_recipe() {
        let w = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let recipe = Recipe {
            n_samples: 20,
            style: StyleMix::Needle,
            ..Recipe::default()
        };
        let (ds, stats) = build_dataset(
            &w,
            &recipe,
            &OracleConfig::default(),
            &FilterConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(ds.samples.iter().all(|s| s.style == Style::Needle));
        assert!(ds
            .samples
            .iter()
            .all(|s| s.candidate_count() == 128 && s.target_count() == 8));
        assert_eq!(stats.kept_needle, 20);
    }

    #[test]
    fn impossible_recipe_exhausts() {
        let w = small_world();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let recipe = Recipe {
            n_samples: 3,
            style: StyleMix::Needle,
            attempt_budget: Some(10),
            ..Recipe::default()
        };
        let oracle = OracleConfig {
            needle_threshold: 9,
            ..OracleConfig::default()
        };
        assert!(matches!(
            build_dataset(&w, &recipe, &oracle, &FilterConfig::default(), &mut rng),
            Err(Error::GenerationExhausted { attempts: 10, .. })
        ));
    }
}
