//! Scaled dot-product attention, multi-head wrapping, and global
//! context-aware attention (GCAA).
//!
//! GCAA enriches each query-side snippet with the mean of its sequence before
//! the usual multi-head attention:
//!
//! ```text
//! g   = mean_t x_t
//! h_t = tanh(x_t · W_local + g · W_global + b)
//! out = MultiHead(Q from h, K and V from the key/value sequence)
//! ```
//!
//! Self-attention is `attend(x, x)`; cross-modal attention passes the other
//! modality as the key/value sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorgrad::{glorot, linear, Bound, ParamSet, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Plain,
    Gcaa,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub variant: AttentionVariant,
    /// Compute the GCAA global vector from the query sequence (default) or,
    /// when false, from the key/value sequence.
    pub global_from_query: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            model_dim: 512,
            num_heads: 4,
            variant: AttentionVariant::Gcaa,
            global_from_query: true,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 {
            return Err(Error::invalid("model_dim and num_heads must be positive"));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Query/key/value/output projections, each `d×d` with a bias.
#[derive(Clone, Copy)]
pub struct MultiHeadWeights<'t> {
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub bk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
}

#[derive(Clone, Copy)]
pub struct GcaaWeights<'t> {
    pub w_local: Var<'t>,
    pub w_global: Var<'t>,
    pub bias: Var<'t>,
    pub heads: MultiHeadWeights<'t>,
}

pub struct AttentionOutput<'t> {
    pub output: Var<'t>,
    /// Per-head `T_q×T_k` attention weights.
    pub weights: Vec<Var<'t>>,
}

/// `softmax(Q·Kᵀ/√d)` with the softmax over the key axis.
pub fn attention_weights<'t>(q: Var<'t>, k: Var<'t>) -> Result<Var<'t>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape(
            "sdpa",
            format!("query {qs:?} and key {ks:?} disagree on feature dimension"),
        ));
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    q.matmul(k.transpose()?)?.scale(scale).softmax(1)
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d)·V`.
pub fn sdpa<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    Ok(sdpa_with_weights(q, k, v)?.0)
}

pub fn sdpa_with_weights<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (ks, vs) = (k.shape(), v.shape());
    if vs.len() != 2 || ks[0] != vs[0] {
        return Err(Error::shape(
            "sdpa",
            format!("key {ks:?} and value {vs:?} disagree on sequence length"),
        ));
    }
    let w = attention_weights(q, k)?;
    Ok((w.matmul(v)?, w))
}

/// Mean over the time axis of a `T×d` sequence, returned as `[d]`.
pub fn global_context<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("global_context", format!("expected T×d, got {s:?}")));
    }
    x.mean_axis(0)
}

/// Projects, splits into `num_heads` disjoint column slices, attends per
/// head, concatenates, and applies the output projection.
pub fn multi_head<'t>(
    query: Var<'t>,
    kv: Var<'t>,
    w: &MultiHeadWeights<'t>,
    num_heads: usize,
) -> Result<AttentionOutput<'t>> {
    let d = query.shape()[1];
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::invalid(format!(
            "model_dim {d} is not divisible by num_heads {num_heads}"
        )));
    }
    let q = linear(query, w.wq, w.bq)?;
    let k = linear(kv, w.wk, w.bk)?;
    let v = linear(kv, w.wv, w.bv)?;
    let hd = d / num_heads;
    let mut heads = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (out, att) = sdpa_with_weights(
            q.narrow(1, h * hd, hd)?,
            k.narrow(1, h * hd, hd)?,
            v.narrow(1, h * hd, hd)?,
        )?;
        heads.push(out);
        weights.push(att);
    }
    let joined = if num_heads == 1 {
        heads[0]
    } else {
        Var::concat(&heads, 1)?
    };
    Ok(AttentionOutput {
        output: linear(joined, w.wo, w.bo)?,
        weights,
    })
}

/// Query enrichment `tanh(x·W_local + g·W_global + b)`.
pub fn enrich_queries<'t>(x: Var<'t>, context: Var<'t>, w: &GcaaWeights<'t>) -> Result<Var<'t>> {
    let d = x.shape()[1];
    let g = global_context(context)?.reshape(&[1, d])?;
    let g_proj = g.matmul(w.w_global)?;
    x.matmul(w.w_local)?.add_row(g_proj)?.add_row(w.bias).map(|h| h.tanh())
}

/// Global context-aware attention from `query_seq` over `kv_seq`.
pub fn gcaa_attend<'t>(
    query_seq: Var<'t>,
    kv_seq: Var<'t>,
    w: &GcaaWeights<'t>,
    num_heads: usize,
    global_from_query: bool,
) -> Result<AttentionOutput<'t>> {
    let (qs, ks) = (query_seq.shape(), kv_seq.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape(
            "gcaa_attend",
            format!("query {qs:?} and key/value {ks:?} sequences are incompatible"),
        ));
    }
    let context = if global_from_query { query_seq } else { kv_seq };
    let h = enrich_queries(query_seq, context, w)?;
    multi_head(h, kv_seq, &w.heads, num_heads)
}

/// Named attention parameters under a common prefix.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub prefix: String,
    pub cfg: AttentionConfig,
}

impl AttentionBlock {
    pub fn new(prefix: impl Into<String>, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AttentionBlock {
            prefix: prefix.into(),
            cfg,
        })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        let d = self.cfg.model_dim;
        for proj in ["q", "k", "v", "o"] {
            params.insert(self.name(&format!("w{proj}")), glorot(d, d, rng));
            params.insert(self.name(&format!("b{proj}")), Tensor::zeros(&[d]));
        }
        if self.cfg.variant == AttentionVariant::Gcaa {
            params.insert(self.name("w_local"), glorot(d, d, rng));
            params.insert(self.name("w_global"), glorot(d, d, rng));
            params.insert(self.name("b_ctx"), Tensor::zeros(&[d]));
        }
    }

    pub fn heads<'t>(&self, bound: &Bound<'t>) -> Result<MultiHeadWeights<'t>> {
        Ok(MultiHeadWeights {
            wq: bound.get(&self.name("wq"))?,
            bq: bound.get(&self.name("bq"))?,
            wk: bound.get(&self.name("wk"))?,
            bk: bound.get(&self.name("bk"))?,
            wv: bound.get(&self.name("wv"))?,
            bv: bound.get(&self.name("bv"))?,
            wo: bound.get(&self.name("wo"))?,
            bo: bound.get(&self.name("bo"))?,
        })
    }

    pub fn gcaa<'t>(&self, bound: &Bound<'t>) -> Result<GcaaWeights<'t>> {
        Ok(GcaaWeights {
            w_local: bound.get(&self.name("w_local"))?,
            w_global: bound.get(&self.name("w_global"))?,
            bias: bound.get(&self.name("b_ctx"))?,
            heads: self.heads(bound)?,
        })
    }

    /// Attends from `query_seq` over `kv_seq` with this block's variant.
    pub fn attend<'t>(
        &self,
        bound: &Bound<'t>,
        query_seq: Var<'t>,
        kv_seq: Var<'t>,
    ) -> Result<AttentionOutput<'t>> {
        match self.cfg.variant {
            AttentionVariant::Plain => multi_head(query_seq, kv_seq, &self.heads(bound)?, self.cfg.num_heads),
            AttentionVariant::Gcaa => gcaa_attend(
                query_seq,
                kv_seq,
                &self.gcaa(bound)?,
                self.cfg.num_heads,
                self.cfg.global_from_query,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorgrad::{rng, Tape};

    fn block_params(variant: AttentionVariant, d: usize, heads: usize, seed: u64) -> (AttentionBlock, ParamSet) {
        let cfg = AttentionConfig {
            model_dim: d,
            num_heads: heads,
            variant,
            global_from_query: true,
        };
        let block = AttentionBlock::new("att", cfg).unwrap();
        let mut params = ParamSet::new();
        block.init(&mut params, &mut rng::seeded(seed));
        (block, params)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = AttentionConfig {
            model_dim: 10,
            num_heads: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(AttentionConfig::default().validate().is_ok());
    }

    #[test]
    fn sdpa_rejects_dimension_mismatch() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 3]));
        let k = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(sdpa(q, k, k), Err(Error::Shape { .. })));
    }

    #[test]
    fn global_context_of_basis_rows() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        assert_eq!(global_context(x).unwrap().value().data(), &[0.5, 0.5]);
        let single = tape.constant(Tensor::from_rows(&[vec![3.0, -2.0]]).unwrap());
        assert_eq!(global_context(single).unwrap().value().data(), &[3.0, -2.0]);
    }

    #[test]
    fn single_key_returns_projected_value() {
        let (block, params) = block_params(AttentionVariant::Gcaa, 8, 2, 3);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut r = rng::seeded(9);
        let kv = Tensor::randn(&[1, 8], 1.0, &mut r);
        let expected = {
            let w = block.heads(&bound).unwrap();
            let kv = tape.constant(kv.clone());
            linear(linear(kv, w.wv, w.bv).unwrap(), w.wo, w.bo).unwrap().value().clone()
        };
        for qseed in 0..3 {
            let q = tape.constant(Tensor::randn(&[1, 8], 2.0, &mut rng::seeded(qseed)));
            let out = block.attend(&bound, q, tape.constant(kv.clone())).unwrap().output;
            assert!(out.value().max_abs_diff(&expected) < 1e-12);
        }
    }
}
