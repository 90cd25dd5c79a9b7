//! Training objectives.
//!
//! Parser training minimizes `L_wsl + λ_g·L_g + L_ad` on the tape, where the
//! discriminator's input passed through gradient reversal with weight `λ_ad`.
//! Encoder parameters therefore descend on `L_wsl + λ_g·L_g − λ_ad·L_ad` while
//! the discriminator descends on `L_ad`.
//!
//! Grounding pretraining uses hinge losses on rescaled cosine similarity
//! `sim'(x, y) = (1 + cos(x, y)) / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::{ParserConfig, ParserGraph};
use crate::tensorgrad::{Tensor, Var};

/// Component values of one parser objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_wsl: f64,
    pub l_g: f64,
    pub l_ad: f64,
    /// The value differentiated on the tape, `l_wsl + λ_g·l_g + l_ad`
    /// (before gradient reversal flips the sign of `l_ad` for the encoder).
    pub l_total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_wsl, self.l_g, self.l_ad, self.l_total]
            .iter()
            .all(|x| x.is_finite())
    }

    /// `L_wsl + λ_g·L_g − λ_ad·L_ad`, the objective the encoder sees.
    pub fn encoder_objective(&self, cfg: &ParserConfig) -> f64 {
        self.l_wsl + cfg.lambda_g * self.l_g - cfg.lambda_ad * self.l_ad
    }

    /// Running mean helper: `self` scaled by `1/n`.
    pub fn averaged(sum: &LossReport, n: usize) -> LossReport {
        let k = 1.0 / n.max(1) as f64;
        LossReport {
            l_wsl: sum.l_wsl * k,
            l_g: sum.l_g * k,
            l_ad: sum.l_ad * k,
            l_total: sum.l_total * k,
        }
    }

    pub fn accumulate(&mut self, other: &LossReport) {
        self.l_wsl += other.l_wsl;
        self.l_g += other.l_g;
        self.l_ad += other.l_ad;
        self.l_total += other.l_total;
    }
}

/// Mean binary cross-entropy of video-level probabilities against weak labels.
pub fn wsl_loss<'t>(video_probs: Var<'t>, weak_labels: &Tensor) -> Result<Var<'t>> {
    video_probs.bce(weak_labels)
}

/// `y(1 − eps) + (1 − y)·eps`.
pub fn smooth_labels(labels: &Tensor, eps: f64) -> Tensor {
    labels.map(|y| y * (1.0 - eps) + (1.0 - y) * eps)
}

/// Per-modality BCE against label-smoothed weak labels, summed over the two
/// modalities.
pub fn guided_loss<'t>(
    audio_probs: Var<'t>,
    visual_probs: Var<'t>,
    weak_labels: &Tensor,
    eps: f64,
) -> Result<Var<'t>> {
    if !(0.0..0.5).contains(&eps) {
        return Err(Error::invalid(format!("smoothing eps must lie in [0, 0.5), got {eps}")));
    }
    let target = smooth_labels(weak_labels, eps);
    audio_probs.bce(&target)?.add(visual_probs.bce(&target)?)
}

/// `B×T×2` discriminator targets: 1 for audio-side features, 0 for visual.
pub fn modality_targets(batch: usize, snippets: usize) -> Tensor {
    Tensor::from_fn(&[batch, snippets, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 })
}

/// Mean BCE of the modality discriminator over all snippet features.
pub fn adversarial_loss<'t>(disc_probs: Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    disc_probs.bce(targets)
}

/// `l_wsl + λ_g·l_g + l_ad`; `l_ad` must already carry gradient reversal on its
/// feature path.
pub fn total_loss<'t>(
    l_wsl: Var<'t>,
    l_g: Var<'t>,
    l_ad: Option<Var<'t>>,
    cfg: &ParserConfig,
) -> Result<Var<'t>> {
    let base = l_wsl.add(l_g.scale(cfg.lambda_g))?;
    match l_ad {
        Some(ad) => base.add(ad),
        None => Ok(base),
    }
}

/// Full parser objective for a forward graph.
pub fn parser_objective<'t>(
    graph: &ParserGraph<'t>,
    weak_labels: &Tensor,
    cfg: &ParserConfig,
) -> Result<(Var<'t>, LossReport)> {
    let l_wsl = wsl_loss(graph.video_probs, weak_labels)?;
    let l_g = guided_loss(graph.audio_probs, graph.visual_probs, weak_labels, cfg.smoothing_eps)?;
    let l_ad = match graph.disc_probs {
        Some(d) => {
            let s = d.shape();
            Some(adversarial_loss(d, &modality_targets(s[0], s[1]))?)
        }
        None => None,
    };
    let total = total_loss(l_wsl, l_g, l_ad, cfg)?;
    let report = LossReport {
        l_wsl: l_wsl.item(),
        l_g: l_g.item(),
        l_ad: l_ad.map_or(0.0, |v| v.item()),
        l_total: total.item(),
    };
    Ok((total, report))
}

/// Hinge margins in rescaled-similarity space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Positive pairs are penalized below this similarity.
    pub p: f64,
    /// Negative pairs are penalized above this similarity.
    pub n: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig { p: 0.9, n: 0.1 }
    }
}

impl MarginConfig {
    /// Checks `0 < n < p < 1`.
    pub fn validate(&self) -> Result<()> {
        if !(self.n > 0.0 && self.p < 1.0 && self.n < self.p) {
            return Err(Error::invalid(format!(
                "margins must satisfy 0 < n < p < 1, got p={} n={}",
                self.p, self.n
            )));
        }
        Ok(())
    }
}

/// Anchor/partner snippet index pairs within one video.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which grounding objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AvgVariant {
    /// Uni-modal: audio–audio and visual–visual pairs.
    Uni,
    /// Cross-modal: audio–visual and visual–audio pairs.
    Cross,
    /// Sum of both.
    Multi,
}

impl AvgVariant {
    pub fn name(self) -> &'static str {
        match self {
            AvgVariant::Uni => "uni",
            AvgVariant::Cross => "cross",
            AvgVariant::Multi => "multi",
        }
    }
}

impl std::str::FromStr for AvgVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni" | "u-avg" => Ok(AvgVariant::Uni),
            "cross" | "x-avg" => Ok(AvgVariant::Cross),
            "multi" | "m-avg" => Ok(AvgVariant::Multi),
            other => Err(Error::invalid(format!(
                "unknown grounding variant `{other}` (expected uni, cross or multi)"
            ))),
        }
    }
}

/// Uni-modal, cross-modal and combined grounding losses for one video,
/// each normalized by the number of sampled pairs.
pub struct AvgLosses<'t> {
    pub uni: Var<'t>,
    pub cross: Var<'t>,
    pub multi: Var<'t>,
    pub pair_count: usize,
    /// No pairs were available; all three losses are constant zero.
    pub empty: bool,
}

impl<'t> AvgLosses<'t> {
    pub fn select(&self, variant: AvgVariant) -> Var<'t> {
        match variant {
            AvgVariant::Uni => self.uni,
            AvgVariant::Cross => self.cross,
            AvgVariant::Multi => self.multi,
        }
    }
}

/// `(1 + cos) / 2` for aligned rows of `x` and `y`.
pub fn rescaled_similarity<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    Ok(x.cosine(y)?.scale(0.5).add_scalar(0.5))
}

/// Sum of hinge terms for one ordered modality pairing.
fn hinge_terms<'t>(
    left: Var<'t>,
    right: Var<'t>,
    pairs: &PairSet,
    margin: &MarginConfig,
) -> Result<Option<Var<'t>>> {
    let mut parts = Vec::new();
    if !pairs.positives.is_empty() {
        let (i, j): (Vec<usize>, Vec<usize>) = pairs.positives.iter().copied().unzip();
        let sim = rescaled_similarity(left.gather_rows(&i)?, right.gather_rows(&j)?)?;
        parts.push(sim.scale(-1.0).add_scalar(margin.p).relu().sum());
    }
    if !pairs.negatives.is_empty() {
        let (i, j): (Vec<usize>, Vec<usize>) = pairs.negatives.iter().copied().unzip();
        let sim = rescaled_similarity(left.gather_rows(&i)?, right.gather_rows(&j)?)?;
        parts.push(sim.add_scalar(-margin.n).relu().sum());
    }
    Ok(match parts.as_slice() {
        [] => None,
        [one] => Some(*one),
        [a, b] => Some(a.add(*b)?),
        _ => unreachable!(),
    })
}

/// Grounding losses for one video.
///
/// `audio` and `visual` are the `T×D` contextualized snippet embeddings; each
/// pair `(i, j)` compares anchor `i` with partner `j`.
pub fn avg_losses<'t>(
    audio: Var<'t>,
    visual: Var<'t>,
    pairs: &PairSet,
    margin: &MarginConfig,
) -> Result<AvgLosses<'t>> {
    if audio.shape() != visual.shape() || audio.shape().len() != 2 {
        return Err(Error::shape(
            "avg_losses",
            format!("audio {:?} and visual {:?} must both be T×D", audio.shape(), visual.shape()),
        ));
    }
    let t = audio.shape()[0];
    if let Some(&(i, j)) = pairs
        .positives
        .iter()
        .chain(&pairs.negatives)
        .find(|&&(i, j)| i >= t || j >= t)
    {
        return Err(Error::invalid(format!("pair ({i}, {j}) outside {t} snippets")));
    }
    let tape = audio.tape();
    if pairs.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(AvgLosses {
            uni: zero,
            cross: zero,
            multi: zero.add(zero)?,
            pair_count: 0,
            empty: true,
        });
    }
    let norm = 1.0 / pairs.len() as f64;
    let sum2 = |a: Option<Var<'t>>, b: Option<Var<'t>>| -> Result<Var<'t>> {
        match (a, b) {
            (Some(a), Some(b)) => a.add(b),
            _ => unreachable!("non-empty pair sets always produce terms"),
        }
    };
    let uni = sum2(
        hinge_terms(audio, audio, pairs, margin)?,
        hinge_terms(visual, visual, pairs, margin)?,
    )?
    .scale(norm);
    let cross = sum2(
        hinge_terms(audio, visual, pairs, margin)?,
        hinge_terms(visual, audio, pairs, margin)?,
    )?
    .scale(norm);
    Ok(AvgLosses {
        uni,
        cross,
        multi: uni.add(cross)?,
        pair_count: pairs.len(),
        empty: false,
    })
}
