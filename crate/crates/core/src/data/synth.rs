//! Deterministic synthetic AVVP data.
//!
//! Each category owns a unit-norm audio prototype and a unit-norm visual
//! prototype. A snippet's feature in a modality is the sum of the prototypes
//! of the events active there, plus Gaussian noise. Video `i` draws from its
//! own random stream, so generation order does not affect the output.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, RngExt};

use super::annotations::{FullAnnotation, Vocabulary, WeakAnnotation};
use crate::error::{Error, Result};
use crate::metrics::{Modality, VideoParse};
use crate::tensorgrad::{rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_videos: usize,
    pub num_categories: usize,
    pub snippets: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub min_events: usize,
    pub max_events: usize,
    /// Probability that an event is audible but not visible.
    pub audio_only_prob: f64,
    /// Probability that an event is visible but not audible.
    pub visual_only_prob: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 1,
            num_videos: 240,
            num_categories: 6,
            snippets: 10,
            feature_dim: 64,
            noise_sigma: 0.1,
            min_events: 1,
            max_events: 3,
            audio_only_prob: 0.3,
            visual_only_prob: 0.15,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.num_videos == 0 {
            return bad("num_videos must be at least 1".into());
        }
        if self.snippets == 0 || self.feature_dim == 0 {
            return bad("snippets and feature_dim must be positive".into());
        }
        Vocabulary::llp(self.num_categories)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        if self.min_events > self.max_events || self.max_events > self.num_categories {
            return bad(format!(
                "events per video must satisfy min ≤ max ≤ S, got {}..={} with S={}",
                self.min_events, self.max_events, self.num_categories
            ));
        }
        let (a, v) = (self.audio_only_prob, self.visual_only_prob);
        if !((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&v) && a + v <= 1.0) {
            return bad(format!("modality probabilities must lie in [0, 1] and sum to at most 1, got {a} and {v}"));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::llp(self.num_categories)
    }
}

/// Per-category prototypes, `S×d` for each modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub audio: Tensor,
    pub visual: Tensor,
}

/// Unit-norm rows; mutually orthogonal whenever `rows ≤ dim`.
fn unit_rows<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    let raw = Tensor::randn(&[rows, dim], 1.0, rng);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut v = raw.row(i).to_vec();
        if i < dim {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    Tensor::from_rows(&basis).expect("rows share one length")
}

impl Prototypes {
    pub fn generate(spec: &SyntheticSpec) -> Prototypes {
        let mut r = rng::stream(spec.seed, 0);
        let audio = unit_rows(spec.num_categories, spec.feature_dim, &mut r);
        let visual = unit_rows(spec.num_categories, spec.feature_dim, &mut r);
        Prototypes { audio, visual }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    pub audio: Tensor,
    pub visual: Tensor,
    pub weak: WeakAnnotation,
    pub full: Vec<FullAnnotation>,
}

impl SyntheticVideo {
    pub fn truth(&self, categories: usize) -> VideoParse {
        truth_from_full(&self.full, self.audio.shape()[0], categories)
    }
}

/// Ground-truth grids from full annotations; audio-visual is the cell-wise
/// conjunction of audio and visual.
pub fn truth_from_full(full: &[FullAnnotation], snippets: usize, categories: usize) -> VideoParse {
    let mut audio = vec![vec![false; categories]; snippets];
    let mut visual = audio.clone();
    for a in full {
        let grid = match a.modality {
            Modality::Audio => &mut audio,
            _ => &mut visual,
        };
        for row in &mut grid[a.start..=a.end] {
            row[a.category] = true;
        }
    }
    VideoParse::from_modalities(audio, visual).expect("grids share one shape")
}

pub fn video_id(index: usize) -> String {
    format!("syn{index:05}")
}

fn random_span<R: Rng + ?Sized>(snippets: usize, rng: &mut R) -> (usize, usize) {
    let len = rng.random_range(1..=snippets);
    let start = rng.random_range(0..=snippets - len);
    (start, start + len - 1)
}

/// Generates video `index` of the dataset described by `spec`.
pub fn gen_video(spec: &SyntheticSpec, protos: &Prototypes, index: usize) -> SyntheticVideo {
    let mut r = rng::stream(spec.seed, index as u64 + 1);
    let (t, d, s) = (spec.snippets, spec.feature_dim, spec.num_categories);
    let id = video_id(index);
    let n_events = r.random_range(spec.min_events..=spec.max_events);
    let mut categories = index::sample(&mut r, s, n_events).into_vec();
    categories.sort_unstable();

    let mut full = Vec::new();
    for &c in &categories {
        let u: f64 = r.random();
        let (audible, visible) = if u < spec.audio_only_prob {
            (true, false)
        } else if u < spec.audio_only_prob + spec.visual_only_prob {
            (false, true)
        } else {
            (true, true)
        };
        for (on, modality) in [(audible, Modality::Audio), (visible, Modality::Visual)] {
            if on {
                let (start, end) = random_span(t, &mut r);
                full.push(FullAnnotation {
                    video_id: id.clone(),
                    category: c,
                    modality,
                    start,
                    end,
                });
            }
        }
    }

    let mut audio = Tensor::randn(&[t, d], spec.noise_sigma, &mut r);
    let mut visual = Tensor::randn(&[t, d], spec.noise_sigma, &mut r);
    for a in &full {
        let (target, proto) = match a.modality {
            Modality::Audio => (&mut audio, &protos.audio),
            _ => (&mut visual, &protos.visual),
        };
        let p = proto.row(a.category).to_vec();
        for ti in a.start..=a.end {
            let row = &mut target.data_mut()[ti * d..(ti + 1) * d];
            row.iter_mut().zip(&p).for_each(|(x, y)| *x += y);
        }
    }

    let events: BTreeSet<usize> = full.iter().map(|a| a.category).collect();
    SyntheticVideo {
        weak: WeakAnnotation {
            video_id: id.clone(),
            events,
        },
        id,
        audio,
        visual,
        full,
    }
}

/// All `spec.num_videos` videos in index order.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    let protos = Prototypes::generate(spec);
    Ok((0..spec.num_videos).map(|i| gen_video(spec, &protos, i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototypes_are_orthonormal() {
        let p = Prototypes::generate(&SyntheticSpec::default());
        for m in [&p.audio, &p.visual] {
            for i in 0..6 {
                for j in 0..6 {
                    let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn validation() {
        let ok = SyntheticSpec::default();
        assert!(ok.validate().is_ok());
        assert!(SyntheticSpec { num_videos: 0, ..ok.clone() }.validate().is_err());
        assert!(SyntheticSpec { audio_only_prob: 0.7, visual_only_prob: 0.4, ..ok.clone() }.validate().is_err());
        assert!(SyntheticSpec { max_events: 7, ..ok }.validate().is_err());
    }
}
