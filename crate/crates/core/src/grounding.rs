//! Audio-visual grounding pretraining.
//!
//! Ground truth comes from a per-video snippet graph: snippets `j` and `k` are
//! linked when either their visual or their audio features are similar enough,
//! and snippets in the same connected component count as corresponding.
//! A small transformer encodes the `2T` audio and visual snippets jointly and
//! is trained with hinge losses on the sampled pairs.

use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionConfig, AttentionVariant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{avg_losses, rescaled_similarity, AvgVariant, MarginConfig, PairSet};
use crate::tensorgrad::{glorot, linear, rng, Bound, Optimizer, ParamSet, Tape, Tensor, Var};

/// Edge thresholds on rescaled cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityThresholds {
    pub v_threshold: f64,
    pub a_threshold: f64,
}

impl Default for SimilarityThresholds {
    fn default() -> Self {
        SimilarityThresholds {
            v_threshold: 0.8,
            a_threshold: 0.8,
        }
    }
}

impl SimilarityThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("v_threshold", self.v_threshold), ("a_threshold", self.a_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Undirected graph over the `T` snippets of one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnippetGraph {
    adj: Vec<Vec<bool>>,
    /// Number of snippet feature vectors with zero norm seen while building.
    pub zero_norm: usize,
}

impl SnippetGraph {
    pub fn new(nodes: usize) -> Self {
        SnippetGraph {
            adj: vec![vec![false; nodes]; nodes],
            zero_norm: 0,
        }
    }

    pub fn nodes(&self) -> usize {
        self.adj.len()
    }

    /// Adds an undirected edge; self-loops are ignored.
    pub fn add_edge(&mut self, i: usize, j: usize) {
        if i != j {
            self.adj[i][j] = true;
            self.adj[j][i] = true;
        }
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i][j]
    }

    /// Edges `(j, k)` with `j < k`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.nodes();
        (0..n)
            .flat_map(|j| (j + 1..n).map(move |k| (j, k)))
            .filter(|&(j, k)| self.adj[j][k])
            .collect()
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adj
    }
}

/// `(1 + cos) / 2`, with zero-norm vectors given similarity 0. The flag
/// reports whether a zero norm was encountered.
pub fn rescaled_cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    ((1.0 + dot / (na * nb)) / 2.0, false)
}

/// Links snippets whose visual or audio features are similar.
pub fn build_snippet_graph(visual: &Tensor, audio: &Tensor, th: &SimilarityThresholds) -> Result<SnippetGraph> {
    th.validate()?;
    if visual.rank() != 2 || visual.shape()[0] != audio.shape()[0] || audio.rank() != 2 {
        return Err(Error::shape(
            "build_snippet_graph",
            format!("visual {:?} and audio {:?} must both be T×d", visual.shape(), audio.shape()),
        ));
    }
    let t = visual.shape()[0];
    let mut g = SnippetGraph::new(t);
    let zero_rows = |m: &Tensor| (0..t).filter(|&i| m.row(i).iter().all(|&x| x == 0.0)).count();
    g.zero_norm = zero_rows(visual) + zero_rows(audio);
    for j in 0..t {
        for k in j + 1..t {
            let (sv, _) = rescaled_cosine(visual.row(j), visual.row(k));
            let (sa, _) = rescaled_cosine(audio.row(j), audio.row(k));
            if sv >= th.v_threshold || sa >= th.a_threshold {
                g.add_edge(j, k);
            }
        }
    }
    Ok(g)
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Components as sorted node lists, ordered by smallest member.
pub fn connected_components(g: &SnippetGraph) -> Vec<Vec<usize>> {
    let n = g.nodes();
    let mut uf = UnionFind::new(n);
    for (j, k) in g.edges() {
        uf.union(j, k);
    }
    let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = uf.find(i);
        by_root[r].push(i);
    }
    let mut comps: Vec<Vec<usize>> = by_root.into_iter().filter(|c| !c.is_empty()).collect();
    comps.sort_by_key(|c| c[0]);
    comps
}

/// Symmetric `T×T` same-component indicator with unit diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundingLabels {
    gt: Vec<Vec<bool>>,
}

impl GroundingLabels {
    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.gt[i][j]
    }

    pub fn matrix(&self) -> &[Vec<bool>] {
        &self.gt
    }

    /// Reflexive, symmetric and transitive.
    pub fn is_equivalence(&self) -> bool {
        let n = self.len();
        (0..n).all(|i| self.gt[i][i])
            && (0..n).all(|i| (0..n).all(|j| self.gt[i][j] == self.gt[j][i]))
            && (0..n).all(|i| {
                (0..n).all(|j| !self.gt[i][j] || (0..n).all(|k| !self.gt[j][k] || self.gt[i][k]))
            })
    }
}

/// Labels from a partition of `0..n`.
pub fn grounding_labels(partition: &[Vec<usize>], n: usize) -> Result<GroundingLabels> {
    let mut owner = vec![usize::MAX; n];
    for (c, comp) in partition.iter().enumerate() {
        for &u in comp {
            if u >= n || owner[u] != usize::MAX {
                return Err(Error::invalid(format!("node {u} is out of range or in two components")));
            }
            owner[u] = c;
        }
    }
    if let Some(u) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(Error::invalid(format!("node {u} is not covered by the partition")));
    }
    let gt = (0..n).map(|i| (0..n).map(|j| owner[i] == owner[j]).collect()).collect();
    Ok(GroundingLabels { gt })
}

/// Graph, components and labels for one video in one call.
pub fn ground_truth(visual: &Tensor, audio: &Tensor, th: &SimilarityThresholds) -> Result<GroundingLabels> {
    let g = build_snippet_graph(visual, audio, th)?;
    grounding_labels(&connected_components(&g), g.nodes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledPairs {
    pub pairs: PairSet,
    /// The video is a single component, so only positives were drawn.
    pub no_negatives: bool,
}

/// Up to `k` positives (`j ≠ i`, same component) and `k` negatives per anchor
/// `i`, without replacement.
pub fn sample_pairs<R: Rng + ?Sized>(labels: &GroundingLabels, k: usize, rng: &mut R) -> Result<SampledPairs> {
    if k == 0 {
        return Err(Error::invalid("pairs per anchor must be at least 1"));
    }
    let n = labels.len();
    let mut pairs = PairSet::default();
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels.get(i, j)).collect();
        let neg: Vec<usize> = (0..n).filter(|&j| !labels.get(i, j)).collect();
        for (cands, out) in [(pos, &mut pairs.positives), (neg, &mut pairs.negatives)] {
            let take = k.min(cands.len());
            let mut picked = index::sample(rng, cands.len(), take).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|p| (i, cands[p])));
        }
    }
    Ok(SampledPairs {
        no_negatives: pairs.negatives.is_empty(),
        pairs,
    })
}

/// How exported embeddings relate to the original features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportMode {
    /// Embeddings replace the original features.
    Substitute,
    /// Embeddings are appended to the original features.
    Concat,
}

impl FromStr for ExportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "substitute" => Ok(ExportMode::Substitute),
            "concat" => Ok(ExportMode::Concat),
            other => Err(Error::invalid(format!(
                "unknown export mode `{other}` (expected substitute or concat)"
            ))),
        }
    }
}

impl ExportMode {
    pub fn name(self) -> &'static str {
        match self {
            ExportMode::Substitute => "substitute",
            ExportMode::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub input_dim: usize,
    pub snippets: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub margins: MarginConfig,
    pub pairs_per_anchor: usize,
    pub thresholds: SimilarityThresholds,
    pub variant: AvgVariant,
    pub layer_norm_eps: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            input_dim: 64,
            snippets: 10,
            num_layers: 2,
            model_dim: 256,
            num_heads: 4,
            ff_dim: 512,
            margins: MarginConfig::default(),
            pairs_per_anchor: 4,
            thresholds: SimilarityThresholds::default(),
            variant: AvgVariant::Multi,
            layer_norm_eps: 1e-5,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.snippets == 0 || self.num_layers == 0 || self.ff_dim == 0 {
            return Err(Error::invalid(
                "input_dim, snippets, num_layers and ff_dim must be positive",
            ));
        }
        if self.pairs_per_anchor == 0 {
            return Err(Error::invalid("pairs_per_anchor must be at least 1"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::invalid("layer_norm_eps must be positive"));
        }
        self.attention().validate()?;
        self.margins.validate()?;
        self.thresholds.validate()
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            variant: AttentionVariant::Plain,
            global_from_query: true,
        }
    }
}

/// One video's inputs for a pretraining step.
#[derive(Debug, Clone)]
pub struct PretrainSample {
    pub audio: Tensor,
    pub visual: Tensor,
    pub labels: GroundingLabels,
}

impl PretrainSample {
    pub fn new(audio: Tensor, visual: Tensor, th: &SimilarityThresholds) -> Result<Self> {
        let labels = ground_truth(&visual, &audio, th)?;
        Ok(PretrainSample { audio, visual, labels })
    }
}

/// Loss values of one pretraining evaluation, averaged over the videos that
/// had at least one pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub loss: f64,
    pub uni: f64,
    pub cross: f64,
    pub multi: f64,
    pub pairs: usize,
    /// Videos that contributed positives only.
    pub flagged: usize,
}

/// The grounding objective on the tape and its report.
pub struct PretrainObjective<'t> {
    pub loss: Var<'t>,
    pub uni: Var<'t>,
    pub cross: Var<'t>,
    pub multi: Var<'t>,
    pub report: PretrainReport,
}

/// Transformer encoder over the concatenated audio and visual snippets.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    cfg: PretrainConfig,
    blocks: Vec<AttentionBlock>,
    pub params: ParamSet,
}

impl Pretrainer {
    pub fn new(cfg: PretrainConfig, seed: u64) -> Result<Self> {
        let mut p = Self::skeleton(cfg)?;
        p.params = p.init_params(&mut rng::seeded(seed));
        Ok(p)
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(cfg: PretrainConfig, params: ParamSet) -> Result<Self> {
        let mut p = Self::skeleton(cfg)?;
        let reference = p.init_params(&mut rng::seeded(0));
        if reference.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, found {}",
                reference.len(),
                params.len()
            )));
        }
        for (name, r) in reference.iter() {
            let got = params.get(name)?;
            if got.shape() != r.value.shape() {
                return Err(Error::shape(
                    "pretrainer_params",
                    format!("`{name}` has shape {:?}, expected {:?}", got.shape(), r.value.shape()),
                ));
            }
        }
        p.params = params;
        Ok(p)
    }

    fn skeleton(cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_layers)
            .map(|l| AttentionBlock::new(format!("layer{l}.attn"), cfg.attention()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pretrainer {
            cfg,
            blocks,
            params: ParamSet::new(),
        })
    }

    fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let c = &self.cfg;
        let (d_in, d, ff) = (c.input_dim, c.model_dim, c.ff_dim);
        let mut p = ParamSet::new();
        for m in ["audio", "visual"] {
            p.insert(format!("proj.{m}.w"), glorot(d_in, d, rng));
            p.insert(format!("proj.{m}.b"), Tensor::zeros(&[d]));
        }
        p.insert("embed.position", Tensor::randn(&[c.snippets, d], 0.1, rng));
        p.insert("embed.modality", Tensor::randn(&[2, d], 0.1, rng));
        for (l, block) in self.blocks.iter().enumerate() {
            block.init(&mut p, rng);
            p.insert(format!("layer{l}.ln1.g"), Tensor::ones(&[d]));
            p.insert(format!("layer{l}.ln1.b"), Tensor::zeros(&[d]));
            p.insert(format!("layer{l}.ff.w1"), glorot(d, ff, rng));
            p.insert(format!("layer{l}.ff.b1"), Tensor::zeros(&[ff]));
            p.insert(format!("layer{l}.ff.w2"), glorot(ff, d, rng));
            p.insert(format!("layer{l}.ff.b2"), Tensor::zeros(&[d]));
            p.insert(format!("layer{l}.ln2.g"), Tensor::ones(&[d]));
            p.insert(format!("layer{l}.ln2.b"), Tensor::zeros(&[d]));
        }
        p
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.cfg
    }

    fn norm<'t>(&self, bound: &Bound<'t>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        x.layer_norm(self.cfg.layer_norm_eps)
            .mul_row(bound.get(&format!("{name}.g"))?)?
            .add_row(bound.get(&format!("{name}.b"))?)
    }

    fn embed<'t>(&self, bound: &Bound<'t>, x: Var<'t>, modality: usize) -> Result<Var<'t>> {
        let name = if modality == 0 { "audio" } else { "visual" };
        let d = self.cfg.model_dim;
        let type_row = bound.get("embed.modality")?.narrow(0, modality, 1)?.reshape(&[d])?;
        linear(
            x,
            bound.get(&format!("proj.{name}.w"))?,
            bound.get(&format!("proj.{name}.b"))?,
        )?
        .add(bound.get("embed.position")?)?
        .add_row(type_row)
    }

    /// `2T×model_dim` embeddings: rows `0..T` audio, `T..2T` visual.
    pub fn encode_bound<'t>(&self, bound: &Bound<'t>, audio: Var<'t>, visual: Var<'t>) -> Result<Var<'t>> {
        let (t, d_in) = (self.cfg.snippets, self.cfg.input_dim);
        for (name, x) in [("audio", audio), ("visual", visual)] {
            if x.shape() != [t, d_in] {
                return Err(Error::shape(
                    "pretrain_encode",
                    format!("{name} is {:?}, expected [{t}, {d_in}]", x.shape()),
                ));
            }
        }
        let mut x = Var::concat(&[self.embed(bound, audio, 0)?, self.embed(bound, visual, 1)?], 0)?;
        for (l, block) in self.blocks.iter().enumerate() {
            let attended = block.attend(bound, x, x)?.output;
            let h = self.norm(bound, x.add(attended)?, &format!("layer{l}.ln1"))?;
            let ff = linear(
                linear(
                    h,
                    bound.get(&format!("layer{l}.ff.w1"))?,
                    bound.get(&format!("layer{l}.ff.b1"))?,
                )?
                .relu(),
                bound.get(&format!("layer{l}.ff.w2"))?,
                bound.get(&format!("layer{l}.ff.b2"))?,
            )?;
            x = self.norm(bound, h.add(ff)?, &format!("layer{l}.ln2"))?;
        }
        Ok(x)
    }

    /// Audio and visual embeddings, each `T×model_dim`.
    pub fn encode(&self, audio: &Tensor, visual: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let out = self.encode_bound(&bound, tape.constant(audio.clone()), tape.constant(visual.clone()))?;
        let t = self.cfg.snippets;
        let a = out.narrow(0, 0, t)?.value().clone();
        let v = out.narrow(0, t, t)?.value().clone();
        Ok((a, v))
    }

    /// Grounding losses averaged over the videos that have pairs.
    pub fn objective<'t>(
        &self,
        bound: &Bound<'t>,
        inputs: &[(Var<'t>, Var<'t>, &PairSet)],
    ) -> Result<PretrainObjective<'t>> {
        if inputs.is_empty() {
            return Err(Error::invalid("empty pretraining batch"));
        }
        let t = self.cfg.snippets;
        let mut per_video = Vec::new();
        let mut report = PretrainReport::default();
        for &(audio, visual, pairs) in inputs {
            if pairs.negatives.is_empty() {
                report.flagged += 1;
            }
            if pairs.is_empty() {
                continue;
            }
            let emb = self.encode_bound(bound, audio, visual)?;
            let l = avg_losses(emb.narrow(0, 0, t)?, emb.narrow(0, t, t)?, pairs, &self.cfg.margins)?;
            report.pairs += l.pair_count;
            per_video.push((l.uni, l.cross));
        }
        let tape = inputs[0].0.tape();
        let (uni, cross) = if per_video.is_empty() {
            let zero = tape.constant(Tensor::scalar(0.0));
            (zero, zero)
        } else {
            let k = 1.0 / per_video.len() as f64;
            let mut u = per_video[0].0;
            let mut x = per_video[0].1;
            for &(ui, xi) in &per_video[1..] {
                u = u.add(ui)?;
                x = x.add(xi)?;
            }
            (u.scale(k), x.scale(k))
        };
        let multi = uni.add(cross)?;
        let loss = match self.cfg.variant {
            AvgVariant::Uni => uni,
            AvgVariant::Cross => cross,
            AvgVariant::Multi => multi,
        };
        report.uni = uni.item();
        report.cross = cross.item();
        report.multi = multi.item();
        report.loss = loss.item();
        Ok(PretrainObjective {
            loss,
            uni,
            cross,
            multi,
            report,
        })
    }

    /// Samples pairs for each video of `batch`.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: &[&PretrainSample], rng: &mut R) -> Result<Vec<PairSet>> {
        batch
            .iter()
            .map(|s| Ok(sample_pairs(&s.labels, self.cfg.pairs_per_anchor, rng)?.pairs))
            .collect()
    }

    /// Objective value without taking a step.
    pub fn evaluate(&self, batch: &[&PretrainSample], pairs: &[PairSet]) -> Result<PretrainReport> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let inputs: Vec<_> = batch
            .iter()
            .zip(pairs)
            .map(|(s, p)| (tape.constant(s.audio.clone()), tape.constant(s.visual.clone()), p))
            .collect();
        Ok(self.objective(&bound, &inputs)?.report)
    }

    /// Samples pairs, evaluates the selected loss, backpropagates and steps.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        batch: &[&PretrainSample],
        optimizer: &mut Optimizer,
        rng: &mut R,
    ) -> Result<PretrainReport> {
        let pairs = self.sample_batch(batch, rng)?;
        self.step_with_pairs(batch, &pairs, optimizer)
    }

    pub fn step_with_pairs(
        &mut self,
        batch: &[&PretrainSample],
        pairs: &[PairSet],
        optimizer: &mut Optimizer,
    ) -> Result<PretrainReport> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let inputs: Vec<_> = batch
            .iter()
            .zip(pairs)
            .map(|(s, p)| (tape.constant(s.audio.clone()), tape.constant(s.visual.clone()), p))
            .collect();
        let obj = self.objective(&bound, &inputs)?;
        if !obj.report.loss.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss {}", obj.report.loss)));
        }
        let grads = tape.backward(obj.loss)?;
        self.params.store_grads(&bound, &grads);
        optimizer.step(&mut self.params)?;
        Ok(obj.report)
    }

    /// Mean rescaled similarity over positive and over negative pairs,
    /// across all four modality pairings.
    pub fn pair_similarity(&self, batch: &[&PretrainSample], pairs: &[PairSet]) -> Result<(f64, f64)> {
        let (mut pos, mut neg) = ((0.0, 0usize), (0.0, 0usize));
        let t = self.cfg.snippets;
        for (s, p) in batch.iter().zip(pairs) {
            let tape = Tape::new();
            let bound = self.params.bind(&tape);
            let emb = self.encode_bound(&bound, tape.constant(s.audio.clone()), tape.constant(s.visual.clone()))?;
            let a = emb.narrow(0, 0, t)?;
            let v = emb.narrow(0, t, t)?;
            for (set, acc) in [(&p.positives, &mut pos), (&p.negatives, &mut neg)] {
                if set.is_empty() {
                    continue;
                }
                let (i, j): (Vec<usize>, Vec<usize>) = set.iter().copied().unzip();
                for (x, y) in [(a, a), (v, v), (a, v), (v, a)] {
                    let sim = rescaled_similarity(x.gather_rows(&i)?, y.gather_rows(&j)?)?;
                    acc.0 += sim.sum().item();
                    acc.1 += set.len();
                }
            }
        }
        let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
        Ok((mean(pos), mean(neg)))
    }

    /// Per-video embeddings for `dataset`, as parser input features.
    pub fn export(&self, dataset: &Dataset, mode: ExportMode) -> Result<Dataset> {
        let features = dataset
            .videos
            .iter()
            .map(|v| {
                let (a, vis) = self.encode(&v.audio, &v.visual)?;
                match mode {
                    ExportMode::Substitute => Ok((a, vis)),
                    ExportMode::Concat => Ok((concat_columns(&v.audio, &a)?, concat_columns(&v.visual, &vis)?)),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        dataset.with_features(features)
    }
}

fn concat_columns(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let out = Var::concat(&[tape.constant(a.clone()), tape.constant(b.clone())], 1)?;
    let v = out.value().clone();
    Ok(v)
}

/// Videos whose snippets each belong to one of two clusters. Every snippet of
/// cluster `c` carries the cluster's audio and visual prototype plus noise,
/// so the grounding graph recovers the clusters.
pub fn two_cluster_samples(
    videos: usize,
    snippets: usize,
    dim: usize,
    noise: f64,
    seed: u64,
    th: &SimilarityThresholds,
) -> Result<Vec<PretrainSample>> {
    let mut r = rng::seeded(seed);
    let protos_a = Tensor::randn(&[2, dim], 1.0, &mut r);
    let protos_v = Tensor::randn(&[2, dim], 1.0, &mut r);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..videos)
        .map(|_| {
            let split = r.random_range(1..snippets.max(2));
            let cluster: Vec<usize> = (0..snippets).map(|t| usize::from(t >= split)).collect();
            let mut make = |protos: &Tensor| {
                let noise_t = Tensor::randn(&[snippets, dim], noise, &mut r);
                Tensor::from_fn(&[snippets, dim], |i| {
                    let (t, k) = (i / dim, i % dim);
                    protos.get(&[cluster[t], k]) * scale + noise_t.data()[i]
                })
            };
            let audio = make(&protos_a);
            let visual = make(&protos_v);
            PretrainSample::new(audio, visual, th)
        })
        .collect()
}
