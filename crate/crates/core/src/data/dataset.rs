//! In-memory datasets, split directories and batching.
//!
//! A split directory holds `categories.txt`, `features.avft` (entries
//! `<video_id>/audio` and `<video_id>/visual`, each `T×d`), `weak.tsv` and,
//! for evaluation data, `full.tsv`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::annotations::{self, FullAnnotation, Vocabulary, WeakAnnotation};
use super::container::{read_container, write_container, Dtype};
use super::synth::{truth_from_full, SyntheticVideo};
use crate::error::{Error, Result};
use crate::metrics::VideoParse;
use crate::parser::SnippetBatch;
use crate::tensorgrad::{rng, Tensor};

pub const CATEGORIES_FILE: &str = "categories.txt";
pub const FEATURES_FILE: &str = "features.avft";
pub const WEAK_FILE: &str = "weak.tsv";
pub const FULL_FILE: &str = "full.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub audio: Tensor,
    pub visual: Tensor,
    pub weak: BTreeSet<usize>,
    pub full: Vec<FullAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub snippets: usize,
    pub feature_dim: usize,
    pub videos: Vec<VideoRecord>,
    /// Whether temporal annotations are available.
    pub has_full: bool,
}

impl Dataset {
    pub fn new(vocab: Vocabulary, videos: Vec<VideoRecord>, has_full: bool) -> Result<Self> {
        let (snippets, feature_dim) = videos
            .first()
            .map_or((0, 0), |v| (v.audio.shape()[0], v.audio.shape().get(1).copied().unwrap_or(0)));
        let mut ids = BTreeSet::new();
        for v in &videos {
            if !ids.insert(v.id.as_str()) {
                return Err(Error::invalid(format!("duplicate video id `{}`", v.id)));
            }
            for (name, t) in [("audio", &v.audio), ("visual", &v.visual)] {
                if t.shape() != [snippets, feature_dim] {
                    return Err(Error::shape(
                        "dataset",
                        format!("{}/{name} is {:?}, expected [{snippets}, {feature_dim}]", v.id, t.shape()),
                    ));
                }
            }
            if let Some(&c) = v.weak.iter().find(|&&c| c >= vocab.len()) {
                return Err(Error::invalid(format!("{}: category {c} outside vocabulary", v.id)));
            }
        }
        Ok(Dataset {
            vocab,
            snippets,
            feature_dim,
            videos,
            has_full,
        })
    }

    pub fn from_synthetic(vocab: Vocabulary, videos: Vec<SyntheticVideo>) -> Result<Self> {
        let records = videos
            .into_iter()
            .map(|v| VideoRecord {
                id: v.id,
                audio: v.audio,
                visual: v.visual,
                weak: v.weak.events,
                full: v.full,
            })
            .collect();
        Dataset::new(vocab, records, true)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn num_categories(&self) -> usize {
        self.vocab.len()
    }

    /// Ground-truth grids of video `i`.
    pub fn truth(&self, i: usize) -> VideoParse {
        truth_from_full(&self.videos[i].full, self.snippets, self.num_categories())
    }

    /// Multi-hot weak label vector of video `i`.
    pub fn weak_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_categories()];
        for &c in &self.videos[i].weak {
            row[c] = 1.0;
        }
        row
    }

    pub fn batch(&self, indices: &[usize]) -> Result<SnippetBatch> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let pick = |f: fn(&VideoRecord) -> &Tensor| {
            Tensor::stack(&indices.iter().map(|&i| f(&self.videos[i]).clone()).collect::<Vec<_>>())
        };
        let labels: Vec<f64> = indices.iter().flat_map(|&i| self.weak_row(i)).collect();
        SnippetBatch::new(
            pick(|v| &v.audio)?,
            pick(|v| &v.visual)?,
            Tensor::new(vec![indices.len(), self.num_categories()], labels)?,
        )
    }

    /// Shuffled index batches for `epoch`, deterministic in `(seed, epoch)`.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
        if self.is_empty() {
            return Err(Error::invalid("cannot batch an empty dataset"));
        }
        batch_indices(self.len(), batch_size, &mut rng::stream(seed, epoch as u64))
    }

    /// Sequential index batches without shuffling.
    pub fn chunks(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Replaces every video's features, keeping ids and annotations.
    pub fn with_features(&self, features: Vec<(Tensor, Tensor)>) -> Result<Dataset> {
        if features.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} feature pairs for {} videos",
                features.len(),
                self.len()
            )));
        }
        let videos = self
            .videos
            .iter()
            .zip(features)
            .map(|(v, (audio, visual))| VideoRecord {
                audio,
                visual,
                ..v.clone()
            })
            .collect();
        Dataset::new(self.vocab.clone(), videos, self.has_full)
    }

    pub fn save(&self, dir: &Path, dtype: Dtype) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join(CATEGORIES_FILE))?;
        let names: Vec<(String, &Tensor)> = self
            .videos
            .iter()
            .flat_map(|v| [(format!("{}/audio", v.id), &v.audio), (format!("{}/visual", v.id), &v.visual)])
            .collect();
        write_container(
            &dir.join(FEATURES_FILE),
            names.iter().map(|(n, t)| (n.as_str(), *t)),
            dtype,
        )?;
        let weak: Vec<WeakAnnotation> = self
            .videos
            .iter()
            .map(|v| WeakAnnotation {
                video_id: v.id.clone(),
                events: v.weak.clone(),
            })
            .collect();
        annotations::write_text(&dir.join(WEAK_FILE), &annotations::format_weak(&weak, &self.vocab))?;
        if self.has_full {
            let full: Vec<FullAnnotation> = self.videos.iter().flat_map(|v| v.full.iter().cloned()).collect();
            annotations::write_text(&dir.join(FULL_FILE), &annotations::format_full(&full, &self.vocab))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let vocab = Vocabulary::load(&dir.join(CATEGORIES_FILE))?;
        let features_path = dir.join(FEATURES_FILE);
        let features = read_container(&features_path)?;
        let weak = annotations::parse_weak(&dir.join(WEAK_FILE), &vocab)?;
        if features.entries.len() != 2 * weak.len() {
            return Err(Error::Format {
                path: features_path,
                detail: format!("{} entries for {} videos", features.entries.len(), weak.len()),
            });
        }
        let mut videos = Vec::with_capacity(weak.len());
        for w in weak {
            videos.push(VideoRecord {
                audio: features.get(&format!("{}/audio", w.video_id), &features_path)?.clone(),
                visual: features.get(&format!("{}/visual", w.video_id), &features_path)?.clone(),
                id: w.video_id,
                weak: w.events,
                full: Vec::new(),
            });
        }
        let full_path = dir.join(FULL_FILE);
        let has_full = full_path.exists();
        let mut ds = Dataset::new(vocab, videos, has_full).map_err(|e| Error::Format {
            path: features_path.clone(),
            detail: e.to_string(),
        })?;
        if has_full {
            let rows = annotations::parse_full(&full_path, &ds.vocab, ds.snippets.max(1))?;
            let index: HashMap<String, usize> =
                ds.videos.iter().enumerate().map(|(i, v)| (v.id.clone(), i)).collect();
            for row in rows {
                let i = *index.get(&row.video_id).ok_or_else(|| Error::Format {
                    path: full_path.clone(),
                    detail: format!("video `{}` is not in {WEAK_FILE}", row.video_id),
                })?;
                ds.videos[i].full.push(row);
            }
        }
        Ok(ds)
    }
}

/// Splits a shuffled `0..n` into batches of `batch_size`; the last batch may
/// be shorter.
pub fn batch_indices<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if n == 0 {
        return Err(Error::invalid("cannot batch an empty dataset"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
