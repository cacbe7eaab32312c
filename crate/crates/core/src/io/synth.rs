//! Seeded synthetic stand-ins for vision/text encoder outputs.
//!
//! The video is cut into `segments` equal-length runs. Each run gets one base
//! vector (orthogonalised against the previous run's base) and every token of
//! every frame in the run is `base + noise` with `|noise| = noise · |base|`.
//! Adjacent-frame similarity therefore stays near 1 inside a run and dips at
//! the planted boundaries.

use thiserror::Error;

use super::{FrameEmbeddings, TextEmbedding};
use crate::rng::Rng64;
use crate::tensor::{dot, norm};

/// Vocabulary the prompt ids are drawn from; matches the toy model.
pub const DEFAULT_VOCAB: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventProfile {
    /// Number of planted ground-truth segments `G`.
    pub segments: usize,
    /// Prompt length `M`.
    pub prompt_len: usize,
    /// Noise norm as a fraction of the base norm.
    pub noise: f64,
    pub vocab: u32,
}

impl EventProfile {
    pub fn new(segments: usize) -> Self {
        Self {
            segments,
            prompt_len: 16,
            noise: 0.05,
            vocab: DEFAULT_VOCAB,
        }
    }

    pub fn with_prompt_len(mut self, prompt_len: usize) -> Self {
        self.prompt_len = prompt_len;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("cannot plant {segments} segments in {frames} frames")]
    TooManySegments { segments: usize, frames: usize },
    #[error("dimensions, segment count and prompt length must be positive")]
    ZeroDimension,
    #[error("noise fraction must be finite and non-negative")]
    BadNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub frames: FrameEmbeddings,
    pub text: TextEmbedding,
    /// First frame of each planted segment after the first.
    pub boundaries: Vec<usize>,
    /// Segment whose base vector the text embedding was drawn near.
    pub text_segment: usize,
}

/// Start frames of segments `1..G` for an equal split of `frames` into `segments`.
pub fn planted_boundaries(frames: usize, segments: usize) -> Vec<usize> {
    (1..segments).map(|g| g * frames / segments).collect()
}

fn random_direction(rng: &mut Rng64, d: usize) -> Vec<f64> {
    loop {
        let v = rng.fill_unit(d, 1.0);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn base_vectors(rng: &mut Rng64, segments: usize, d: usize) -> Vec<Vec<f64>> {
    let mut bases: Vec<Vec<f64>> = Vec::with_capacity(segments);
    for _ in 0..segments {
        let mut b = rng.fill_unit(d, 1.0);
        if let Some(prev) = bases.last() {
            if d > 1 {
                let proj = dot(&b, prev) / dot(prev, prev);
                b.iter_mut().zip(prev).for_each(|(x, p)| *x -= proj * p);
            }
        }
        if norm(&b) < 1e-9 {
            b = random_direction(rng, d);
        }
        bases.push(b);
    }
    bases
}

fn perturb<'a>(rng: &mut Rng64, base: &'a [f64], scale: f64) -> impl Iterator<Item = f64> + 'a {
    let r = scale * norm(base);
    let n = random_direction(rng, base.len());
    base.iter().zip(n).map(move |(b, x)| b + r * x)
}

pub fn gen_synthetic(
    frames: usize,
    height: usize,
    width: usize,
    dim: usize,
    seed: u64,
    profile: EventProfile,
) -> Result<SyntheticVideo, SynthError> {
    if frames == 0 || height == 0 || width == 0 || dim == 0 || profile.segments == 0 {
        return Err(SynthError::ZeroDimension);
    }
    if profile.prompt_len == 0 || profile.vocab == 0 {
        return Err(SynthError::ZeroDimension);
    }
    if profile.segments > frames {
        return Err(SynthError::TooManySegments {
            segments: profile.segments,
            frames,
        });
    }
    if !profile.noise.is_finite() || profile.noise < 0.0 {
        return Err(SynthError::BadNoise);
    }

    let mut rng = Rng64::new(seed);
    let bases = base_vectors(&mut rng.fork(1), profile.segments, dim);
    let boundaries = planted_boundaries(frames, profile.segments);

    let mut noise_rng = rng.fork(2);
    let mut tokens = Vec::with_capacity(frames * height * width * dim);
    let mut segment = 0;
    for f in 0..frames {
        if segment < boundaries.len() && f == boundaries[segment] {
            segment += 1;
        }
        for _ in 0..height * width {
            tokens.extend(perturb(&mut noise_rng, &bases[segment], profile.noise));
        }
    }

    let mut text_rng = rng.fork(3);
    let text_segment = text_rng.below(profile.segments as u64) as usize;
    let vector: Vec<f64> = perturb(&mut text_rng, &bases[text_segment], profile.noise).collect();
    let ids = (0..profile.prompt_len)
        .map(|_| text_rng.below(profile.vocab as u64) as u32)
        .collect();

    Ok(SyntheticVideo {
        frames: FrameEmbeddings::new(frames, height, width, dim, tokens).expect("generator respects its own shape"),
        text: TextEmbedding::new(vector, ids).expect("perturbed base has nonzero norm"),
        boundaries,
        text_segment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::encode_embeddings;
    use crate::tensor::cosine;

    fn adjacent_sims(v: &FrameEmbeddings) -> Vec<f64> {
        (0..v.frames() - 1)
            .map(|i| cosine(&v.frame_mean(i), &v.frame_mean(i + 1)).unwrap())
            .collect()
    }

    #[test]
    fn deterministic() {
        let a = gen_synthetic(12, 3, 3, 8, 7, EventProfile::new(3)).unwrap();
        let b = gen_synthetic(12, 3, 3, 8, 7, EventProfile::new(3)).unwrap();
        assert_eq!(
            encode_embeddings(&a.frames).unwrap(),
            encode_embeddings(&b.frames).unwrap()
        );
        assert_eq!(a.text, b.text);
        let c = gen_synthetic(12, 3, 3, 8, 8, EventProfile::new(3)).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn single_segment_has_no_dip() {
        // |noise| <= 0.05|b| bounds each frame-mean's angle to the base by
        // asin(0.05), so adjacent cosines stay above cos(2 asin 0.05).
        let bound = (2.0 * 0.05f64.asin()).cos();
        for seed in 0..20 {
            let v = gen_synthetic(30, 4, 4, 32, seed, EventProfile::new(1)).unwrap();
            let sims = adjacent_sims(&v.frames);
            let min = sims.iter().copied().fold(f64::INFINITY, f64::min);
            let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(min >= bound, "seed {seed}: {min}");
            assert!(max - min < 1.0 - bound);
        }
    }

    #[test]
    fn planted_boundaries_are_the_minima() {
        for seed in 0..20 {
            let v = gen_synthetic(30, 4, 4, 32, seed, EventProfile::new(3)).unwrap();
            assert_eq!(v.boundaries, vec![10, 20]);
            let sims = adjacent_sims(&v.frames);
            let mut order: Vec<usize> = (0..sims.len()).collect();
            order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]));
            let mut cuts: Vec<usize> = order[..2].iter().map(|i| i + 1).collect();
            cuts.sort();
            assert_eq!(cuts, v.boundaries, "seed {seed}");
        }
    }

    #[test]
    fn text_sits_near_its_segment() {
        let v = gen_synthetic(30, 2, 2, 32, 3, EventProfile::new(3)).unwrap();
        let seg_start = if v.text_segment == 0 {
            0
        } else {
            v.boundaries[v.text_segment - 1]
        };
        let c = cosine(&v.frames.frame_mean(seg_start), v.text.vector()).unwrap();
        assert!(c > 0.99);
        assert_eq!(v.text.prompt_ids().len(), 16);
        assert!(v.text.prompt_ids().iter().all(|&i| i < DEFAULT_VOCAB));
    }

    #[test]
    fn errors() {
        assert_eq!(
            gen_synthetic(2, 1, 1, 1, 0, EventProfile::new(3)),
            Err(SynthError::TooManySegments { segments: 3, frames: 2 })
        );
        assert_eq!(
            gen_synthetic(0, 1, 1, 1, 0, EventProfile::new(1)),
            Err(SynthError::ZeroDimension)
        );
    }
}
