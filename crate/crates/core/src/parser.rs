//! Hybrid-attention audio-visual parser.
//!
//! Per video:
//!
//! 1. modality-specific self-attention, `s = f + SelfAttn(f)` (unshared
//!    parameters for audio and visual);
//! 2. cross-modal attention over the self-attended streams with one shared
//!    block, `c_a = Cross(s_a, s_v)` and `c_v = Cross(s_v, s_a)`;
//! 3. fusion `s + c` with skip connections, or `c` alone without;
//! 4. a shared `d→S` sigmoid classifier gives snippet probabilities `P`;
//! 5. attentive MMIL pooling aggregates `P` to video-level predictions;
//! 6. optionally, a modality discriminator behind gradient reversal reads the
//!    fused snippet features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionConfig, AttentionVariant};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport};
use crate::tensorgrad::{glorot, linear, rng, Bound, ParamSet, Tape, Tensor, Var, PROB_EPS};

pub const AUDIO: usize = 0;
pub const VISUAL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParserConfig {
    pub num_categories: usize,
    pub snippets_per_video: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub lambda_g: f64,
    pub lambda_ad: f64,
    pub decision_threshold: f64,
    pub smoothing_eps: f64,
    pub use_skip: bool,
    pub use_adv: bool,
    pub use_gcaa: bool,
    pub global_from_query: bool,
}

impl Default for ParserConfig {
    fn default() -> Self {
        ParserConfig {
            num_categories: 25,
            snippets_per_video: 10,
            model_dim: 512,
            num_heads: 4,
            lambda_g: 0.6,
            lambda_ad: 0.4,
            decision_threshold: 0.5,
            smoothing_eps: 0.1,
            use_skip: true,
            use_adv: true,
            use_gcaa: true,
            global_from_query: true,
        }
    }
}

impl ParserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 || self.snippets_per_video == 0 {
            return Err(Error::invalid("num_categories and snippets_per_video must be positive"));
        }
        self.attention().validate()?;
        if self.use_adv && self.model_dim < 2 {
            return Err(Error::invalid("the discriminator needs model_dim >= 2"));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "decision_threshold must lie in (0, 1), got {}",
                self.decision_threshold
            )));
        }
        if !(0.0..0.5).contains(&self.smoothing_eps) {
            return Err(Error::invalid(format!(
                "smoothing_eps must lie in [0, 0.5), got {}",
                self.smoothing_eps
            )));
        }
        if !(self.lambda_g >= 0.0 && self.lambda_ad >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            variant: if self.use_gcaa {
                AttentionVariant::Gcaa
            } else {
                AttentionVariant::Plain
            },
            global_from_query: self.global_from_query,
        }
    }

    pub fn with_variant(mut self, variant: ModelVariant) -> Self {
        let (skip, adv, gcaa) = variant.flags();
        self.use_skip = skip;
        self.use_adv = adv;
        self.use_gcaa = gcaa;
        self
    }
}

/// The four ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    Base,
    BaseGcaa,
    BaseAdvSkip,
    BaseAdvSkipGcaa,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Base,
        ModelVariant::BaseGcaa,
        ModelVariant::BaseAdvSkip,
        ModelVariant::BaseAdvSkipGcaa,
    ];

    /// `(use_skip, use_adv, use_gcaa)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            ModelVariant::Base => (false, false, false),
            ModelVariant::BaseGcaa => (false, false, true),
            ModelVariant::BaseAdvSkip => (true, true, false),
            ModelVariant::BaseAdvSkipGcaa => (true, true, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelVariant::Base => "Base",
            ModelVariant::BaseGcaa => "Base + GCAA",
            ModelVariant::BaseAdvSkip => "Base + Adv+Skip",
            ModelVariant::BaseAdvSkipGcaa => "Base + Adv+Skip+GCAA",
        }
    }
}

/// Features and weak labels for `B` videos.
#[derive(Debug, Clone)]
pub struct SnippetBatch {
    /// `B×T×d`
    pub audio: Tensor,
    /// `B×T×d`
    pub visual: Tensor,
    /// `B×S`, entries in {0, 1}
    pub weak_labels: Tensor,
}

impl SnippetBatch {
    pub fn new(audio: Tensor, visual: Tensor, weak_labels: Tensor) -> Result<Self> {
        if audio.rank() != 3 || audio.shape() != visual.shape() {
            return Err(Error::shape(
                "snippet_batch",
                format!("audio {:?} and visual {:?} must both be B×T×d", audio.shape(), visual.shape()),
            ));
        }
        if weak_labels.rank() != 2 || weak_labels.shape()[0] != audio.shape()[0] {
            return Err(Error::shape(
                "snippet_batch",
                format!("weak labels {:?} do not match batch size {}", weak_labels.shape(), audio.shape()[0]),
            ));
        }
        if weak_labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("weak labels must be 0 or 1"));
        }
        Ok(SnippetBatch {
            audio,
            visual,
            weak_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snippets(&self) -> usize {
        self.audio.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.audio.shape()[2]
    }

    pub fn num_categories(&self) -> usize {
        self.weak_labels.shape()[1]
    }
}

/// Forward-pass variables for a batch.
pub struct ParserGraph<'t> {
    /// `B×T×2×S`
    pub snippet_probs: Var<'t>,
    /// `B×T×2×S`, softmax over T
    pub temporal_attention: Var<'t>,
    /// `B×T×2×S`, softmax over the modality axis
    pub modality_attention: Var<'t>,
    /// `B×S`
    pub video_probs: Var<'t>,
    /// `B×S`
    pub audio_probs: Var<'t>,
    /// `B×S`
    pub visual_probs: Var<'t>,
    /// `B×T×2×d`
    pub fused: Var<'t>,
    /// `B×T×2`, present when the discriminator is enabled
    pub disc_probs: Option<Var<'t>>,
}

/// Plain-value counterpart of [`ParserGraph`].
#[derive(Debug, Clone)]
pub struct ParserOutput {
    pub snippet_probs: Tensor,
    pub temporal_attention: Tensor,
    pub modality_attention: Tensor,
    pub video_probs: Tensor,
    pub audio_probs: Tensor,
    pub visual_probs: Tensor,
    pub fused: Tensor,
}

impl ParserGraph<'_> {
    pub fn to_output(&self) -> ParserOutput {
        ParserOutput {
            snippet_probs: self.snippet_probs.value().clone(),
            temporal_attention: self.temporal_attention.value().clone(),
            modality_attention: self.modality_attention.value().clone(),
            video_probs: self.video_probs.value().clone(),
            audio_probs: self.audio_probs.value().clone(),
            visual_probs: self.visual_probs.value().clone(),
            fused: self.fused.value().clone(),
        }
    }
}

/// Pooled predictions for one video.
pub struct Pooled<'t> {
    /// `[S]`
    pub video: Var<'t>,
    /// `[S]`
    pub audio: Var<'t>,
    /// `[S]`
    pub visual: Var<'t>,
    /// `T×2×S`
    pub temporal_attention: Var<'t>,
    /// `T×2×S`
    pub modality_attention: Var<'t>,
}

/// Attentive MMIL pooling for one video.
///
/// `probs` is `T×2×S`; `time_logits` and `modality_logits` have the same
/// shape. Temporal attention normalizes over T, modality attention over the
/// two modalities; the video-level probability is the doubly weighted sum,
/// clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn mmil_pool<'t>(probs: Var<'t>, time_logits: Var<'t>, modality_logits: Var<'t>) -> Result<Pooled<'t>> {
    let shape = probs.shape();
    if shape.len() != 3 || shape[1] != 2 || time_logits.shape() != shape || modality_logits.shape() != shape {
        return Err(Error::shape(
            "mmil_pool",
            format!(
                "probabilities {:?}, temporal logits {:?}, modality logits {:?} must all be T×2×S",
                shape,
                time_logits.shape(),
                modality_logits.shape()
            ),
        ));
    }
    let s = shape[2];
    let a_time = time_logits.softmax(0)?;
    let a_mod = modality_logits.softmax(1)?;
    let video = a_time
        .mul(a_mod)?
        .mul(probs)?
        .sum_axis(0)?
        .sum_axis(0)?
        .clamp(PROB_EPS, 1.0 - PROB_EPS);
    let per_modality = a_time.mul(probs)?.sum_axis(0)?; // 2×S
    Ok(Pooled {
        video,
        audio: per_modality.narrow(0, AUDIO, 1)?.reshape(&[s])?,
        visual: per_modality.narrow(0, VISUAL, 1)?.reshape(&[s])?,
        temporal_attention: a_time,
        modality_attention: a_mod,
    })
}

/// Modality discriminator over `n×d` features, behind gradient reversal.
/// Returns `[n]` probabilities of the audio class.
pub fn discriminate<'t>(bound: &Bound<'t>, features: Var<'t>, lambda_ad: f64) -> Result<Var<'t>> {
    let n = features.shape()[0];
    let reversed = features.grad_reverse(lambda_ad)?;
    let hidden = linear(reversed, bound.get("disc.w1")?, bound.get("disc.b1")?)?.relu();
    linear(hidden, bound.get("disc.w2")?, bound.get("disc.b2")?)?
        .sigmoid()
        .reshape(&[n])
}

/// Per-video inputs to one forward pass.
struct VideoFeatures<'t> {
    audio: Var<'t>,
    visual: Var<'t>,
}

/// The parser network and its parameters.
#[derive(Debug, Clone)]
pub struct Parser {
    cfg: ParserConfig,
    self_audio: AttentionBlock,
    self_visual: AttentionBlock,
    cross: AttentionBlock,
    pub params: ParamSet,
}

impl Parser {
    pub fn new(cfg: ParserConfig, seed: u64) -> Result<Self> {
        let mut parser = Self::skeleton(cfg)?;
        let mut rng = rng::seeded(seed);
        parser.init(&mut rng);
        Ok(parser)
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(cfg: ParserConfig, params: ParamSet) -> Result<Self> {
        let mut parser = Self::skeleton(cfg)?;
        let mut reference = ParamSet::new();
        parser.init(&mut rng::seeded(0));
        std::mem::swap(&mut reference, &mut parser.params);
        for (name, p) in reference.iter() {
            let got = params.get(name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::shape(
                    "parser_params",
                    format!("`{name}` has shape {:?}, expected {:?}", got.shape(), p.value.shape()),
                ));
            }
        }
        if params.len() != reference.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, found {}",
                reference.len(),
                params.len()
            )));
        }
        parser.params = params;
        Ok(parser)
    }

    fn skeleton(cfg: ParserConfig) -> Result<Self> {
        cfg.validate()?;
        let att = cfg.attention();
        Ok(Parser {
            cfg,
            self_audio: AttentionBlock::new("self_audio", att)?,
            self_visual: AttentionBlock::new("self_visual", att)?,
            cross: AttentionBlock::new("cross", att)?,
            params: ParamSet::new(),
        })
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (d, s) = (self.cfg.model_dim, self.cfg.num_categories);
        let mut p = ParamSet::new();
        self.self_audio.init(&mut p, rng);
        self.self_visual.init(&mut p, rng);
        self.cross.init(&mut p, rng);
        p.insert("cls.w", glorot(d, s, rng));
        p.insert("cls.b", Tensor::zeros(&[s]));
        p.insert("pool.w_time", glorot(d, s, rng));
        p.insert("pool.b_time", Tensor::zeros(&[s]));
        p.insert("pool.w_mod", glorot(d, s, rng));
        p.insert("pool.b_mod", Tensor::zeros(&[s]));
        if self.cfg.use_adv {
            let h = d / 2;
            p.insert("disc.w1", glorot(d, h, rng));
            p.insert("disc.b1", Tensor::zeros(&[h]));
            p.insert("disc.w2", glorot(h, 1, rng));
            p.insert("disc.b2", Tensor::zeros(&[1]));
        }
        self.params = p;
    }

    pub fn config(&self) -> &ParserConfig {
        &self.cfg
    }

    fn check_batch(&self, batch: &SnippetBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if batch.feature_dim() != self.cfg.model_dim || batch.num_categories() != self.cfg.num_categories {
            return Err(Error::shape(
                "parser_forward",
                format!(
                    "batch has d={} S={}, parser expects d={} S={}",
                    batch.feature_dim(),
                    batch.num_categories(),
                    self.cfg.model_dim,
                    self.cfg.num_categories
                ),
            ));
        }
        Ok(())
    }

    /// Self-attended stream `f + SelfAttn(f)` for one modality.
    pub fn self_attend<'t>(&self, bound: &Bound<'t>, features: Var<'t>, modality: usize) -> Result<Var<'t>> {
        let block = if modality == AUDIO {
            &self.self_audio
        } else {
            &self.self_visual
        };
        features.add(block.attend(bound, features, features)?.output)
    }

    /// Cross-modal attention of `query` over `other`, shared across directions.
    pub fn cross_attend<'t>(&self, bound: &Bound<'t>, query: Var<'t>, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.cross.attend(bound, query, other)?.output)
    }

    /// Fused `T×2×d` features of one video.
    fn fuse<'t>(&self, bound: &Bound<'t>, video: &VideoFeatures<'t>) -> Result<Var<'t>> {
        let sa = self.self_attend(bound, video.audio, AUDIO)?;
        let sv = self.self_attend(bound, video.visual, VISUAL)?;
        let ca = self.cross_attend(bound, sa, sv)?;
        let cv = self.cross_attend(bound, sv, sa)?;
        let (fa, fv) = if self.cfg.use_skip {
            (sa.add(ca)?, sv.add(cv)?)
        } else {
            (ca, cv)
        };
        let (t, d) = (self.cfg_t(video), self.cfg.model_dim);
        Var::concat(&[fa.reshape(&[t, 1, d])?, fv.reshape(&[t, 1, d])?], 1)
    }

    fn cfg_t(&self, video: &VideoFeatures<'_>) -> usize {
        video.audio.shape()[0]
    }

    /// Forward pass with parameters already bound on `tape`.
    pub fn forward_bound<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, batch: &SnippetBatch) -> Result<ParserGraph<'t>> {
        self.check_batch(batch)?;
        let audio = tape.constant(batch.audio.clone());
        let visual = tape.constant(batch.visual.clone());
        self.forward_features(bound, audio, visual)
    }

    /// Forward pass over `B×T×d` feature variables, so that the features
    /// themselves can be differentiated.
    pub fn forward_features<'t>(&self, bound: &Bound<'t>, audio_in: Var<'t>, visual_in: Var<'t>) -> Result<ParserGraph<'t>> {
        let shape = audio_in.shape();
        if shape.len() != 3 || shape[2] != self.cfg.model_dim || visual_in.shape() != shape {
            return Err(Error::shape(
                "parser_forward",
                format!("features {:?} and {:?} must be B×T×{}", shape, visual_in.shape(), self.cfg.model_dim),
            ));
        }
        let (n, t, d, s) = (shape[0], shape[1], self.cfg.model_dim, self.cfg.num_categories);
        let mut probs = Vec::new();
        let mut a_time = Vec::new();
        let mut a_mod = Vec::new();
        let mut video = Vec::new();
        let mut audio = Vec::new();
        let mut visual = Vec::new();
        let mut fused_all = Vec::new();
        let mut disc = Vec::new();
        for b in 0..n {
            let feats = VideoFeatures {
                audio: audio_in.narrow(0, b, 1)?.reshape(&[t, d])?,
                visual: visual_in.narrow(0, b, 1)?.reshape(&[t, d])?,
            };
            let fused = self.fuse(bound, &feats)?;
            let flat = fused.reshape(&[2 * t, d])?;
            let p = linear(flat, bound.get("cls.w")?, bound.get("cls.b")?)?
                .sigmoid()
                .reshape(&[t, 2, s])?;
            let lt = linear(flat, bound.get("pool.w_time")?, bound.get("pool.b_time")?)?.reshape(&[t, 2, s])?;
            let lm = linear(flat, bound.get("pool.w_mod")?, bound.get("pool.b_mod")?)?.reshape(&[t, 2, s])?;
            let pooled = mmil_pool(p, lt, lm)?;
            if self.cfg.use_adv {
                disc.push(discriminate(bound, flat, self.cfg.lambda_ad)?.reshape(&[1, t, 2])?);
            }
            probs.push(p.reshape(&[1, t, 2, s])?);
            a_time.push(pooled.temporal_attention.reshape(&[1, t, 2, s])?);
            a_mod.push(pooled.modality_attention.reshape(&[1, t, 2, s])?);
            video.push(pooled.video.reshape(&[1, s])?);
            audio.push(pooled.audio.reshape(&[1, s])?);
            visual.push(pooled.visual.reshape(&[1, s])?);
            fused_all.push(fused.reshape(&[1, t, 2, d])?);
        }
        Ok(ParserGraph {
            snippet_probs: Var::concat(&probs, 0)?,
            temporal_attention: Var::concat(&a_time, 0)?,
            modality_attention: Var::concat(&a_mod, 0)?,
            video_probs: Var::concat(&video, 0)?,
            audio_probs: Var::concat(&audio, 0)?,
            visual_probs: Var::concat(&visual, 0)?,
            fused: Var::concat(&fused_all, 0)?,
            disc_probs: if disc.is_empty() {
                None
            } else {
                Some(Var::concat(&disc, 0)?)
            },
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, batch: &SnippetBatch) -> Result<(Bound<'t>, ParserGraph<'t>)> {
        let bound = self.params.bind(tape);
        let graph = self.forward_bound(tape, &bound, batch)?;
        Ok((bound, graph))
    }

    /// Inference-only forward pass.
    pub fn predict(&self, batch: &SnippetBatch) -> Result<ParserOutput> {
        let tape = Tape::new();
        let (_, graph) = self.forward(&tape, batch)?;
        Ok(graph.to_output())
    }

    /// Training objective on the tape plus its component values.
    pub fn loss<'t>(&self, graph: &ParserGraph<'t>, batch: &SnippetBatch) -> Result<(Var<'t>, LossReport)> {
        losses::parser_objective(graph, &batch.weak_labels, &self.cfg)
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &SnippetBatch, optimizer: &mut crate::tensorgrad::Optimizer) -> Result<LossReport> {
        let tape = Tape::new();
        let (bound, graph) = self.forward(&tape, batch)?;
        let (loss, report) = self.loss(&graph, batch)?;
        if !report.is_finite() {
            return Err(Error::NonFinite(format!("parser loss {report:?}")));
        }
        let grads = tape.backward(loss)?;
        self.params.store_grads(&bound, &grads);
        optimizer.step(&mut self.params)?;
        Ok(report)
    }
}

/// Binary snippet decisions for `B` videos, each `B×T×S`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetDecoding {
    pub audio: Vec<Vec<Vec<bool>>>,
    pub visual: Vec<Vec<Vec<bool>>>,
    pub audio_visual: Vec<Vec<Vec<bool>>>,
}

/// Thresholds snippet probabilities; audio-visual is the conjunction of the
/// audio and visual decisions. Categories whose video-level probability is
/// below the threshold are suppressed everywhere.
pub fn decode(out: &ParserOutput, threshold: f64) -> Result<SnippetDecoding> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let shape = out.snippet_probs.shape();
    if shape.len() != 4 || shape[2] != 2 || out.video_probs.shape() != [shape[0], shape[3]] {
        return Err(Error::shape("decode", format!("unexpected output shape {shape:?}")));
    }
    let (b, t, s) = (shape[0], shape[1], shape[3]);
    let mut dec = SnippetDecoding {
        audio: vec![vec![vec![false; s]; t]; b],
        visual: vec![vec![vec![false; s]; t]; b],
        audio_visual: vec![vec![vec![false; s]; t]; b],
    };
    for v in 0..b {
        for c in 0..s {
            if out.video_probs.get(&[v, c]) < threshold {
                continue;
            }
            for ti in 0..t {
                let a = out.snippet_probs.get(&[v, ti, AUDIO, c]) >= threshold;
                let vi = out.snippet_probs.get(&[v, ti, VISUAL, c]) >= threshold;
                dec.audio[v][ti][c] = a;
                dec.visual[v][ti][c] = vi;
                dec.audio_visual[v][ti][c] = a && vi;
            }
        }
    }
    Ok(dec)
}
