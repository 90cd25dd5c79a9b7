//! Finite-difference gradient suites over the primitives, the attention
//! blocks, the parser objective and the grounding pretrainer.

use rand::{Rng, RngExt};

use crate::attention::{AttentionBlock, AttentionConfig, AttentionVariant};
use crate::grounding::{PretrainConfig, Pretrainer};
use crate::losses::{self, PairSet};
use crate::parser::{Parser, ParserConfig, SnippetBatch};
use crate::tensorgrad::{
    check_gradients, check_gradients_against, rng, Bound, GradCheckConfig, GradCheckReport, Picks, Tape, Tensor,
    Var,
};
use crate::Result;

type CaseFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// Input domain for a primitive case, chosen to keep central differences
/// away from kinks and clamps.
#[derive(Clone, Copy)]
enum Domain {
    Normal,
    /// `|x| ≥ 0.2`.
    AwayFromZero,
    /// `|x|` at least 0.1 away from 0.5.
    AwayFromHalf,
    /// `(0.1, 0.9)`.
    Probability,
}

fn sample<R: Rng + ?Sized>(shape: &[usize], domain: Domain, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| match domain {
        Domain::Normal => rng.random_range(-1.0..1.0),
        Domain::AwayFromZero => {
            let m = rng.random_range(0.2..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        }
        Domain::AwayFromHalf => {
            let m = if rng.random::<bool>() {
                rng.random_range(0.0..0.4)
            } else {
                rng.random_range(0.6..1.0)
            };
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        }
        Domain::Probability => rng.random_range(0.1..0.9),
    })
}

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    domain: Domain,
    f: CaseFn,
}

/// Lambda used by the gradient-reversal primitive case.
const GRL_LAMBDA: f64 = 0.4;

fn cases() -> Vec<Case> {
    use Domain::*;
    macro_rules! case {
        ($name:expr, $shapes:expr, $domain:expr, |$x:ident| $body:expr) => {
            Case {
                name: $name,
                shapes: $shapes,
                domain: $domain,
                f: |_tape, $x| $body,
            }
        };
    }
    vec![
        case!("add", &[&[3, 4], &[3, 4]], Normal, |x| x[0].add(x[1])),
        case!("sub", &[&[3, 4], &[3, 4]], Normal, |x| x[0].sub(x[1])),
        case!("mul", &[&[3, 4], &[3, 4]], Normal, |x| x[0].mul(x[1])),
        case!("scale", &[&[3, 4]], Normal, |x| Ok(x[0].scale(1.7))),
        case!("add_scalar", &[&[3, 4]], Normal, |x| Ok(x[0].add_scalar(-0.3))),
        case!("add_row", &[&[3, 4], &[4]], Normal, |x| x[0].add_row(x[1])),
        case!("mul_row", &[&[3, 4], &[4]], Normal, |x| x[0].mul_row(x[1])),
        case!("matmul", &[&[3, 4], &[4, 2]], Normal, |x| x[0].matmul(x[1])),
        case!("transpose", &[&[3, 4]], Normal, |x| x[0].transpose()),
        case!("reshape", &[&[3, 4]], Normal, |x| x[0].reshape(&[2, 6])),
        case!("concat", &[&[2, 3], &[2, 2]], Normal, |x| Var::concat(&[x[0], x[1]], 1)),
        case!("narrow", &[&[4, 3]], Normal, |x| x[0].narrow(0, 1, 2)),
        case!("sum", &[&[3, 4]], Normal, |x| Ok(x[0].sum())),
        case!("mean", &[&[3, 4]], Normal, |x| Ok(x[0].mean())),
        case!("sum_axis", &[&[3, 4]], Normal, |x| x[0].sum_axis(0)),
        case!("mean_axis", &[&[2, 3, 4]], Normal, |x| x[0].mean_axis(1)),
        case!("softmax", &[&[3, 4]], Normal, |x| x[0].softmax(1)),
        case!("softmax_outer", &[&[3, 2, 4]], Normal, |x| x[0].softmax(0)),
        case!("sigmoid", &[&[3, 4]], Normal, |x| Ok(x[0].sigmoid())),
        case!("tanh", &[&[3, 4]], Normal, |x| Ok(x[0].tanh())),
        case!("relu", &[&[3, 4]], AwayFromZero, |x| Ok(x[0].relu())),
        case!("clamp", &[&[3, 4]], AwayFromHalf, |x| Ok(x[0].clamp(-0.5, 0.5))),
        case!("cosine", &[&[3, 4], &[3, 4]], Normal, |x| x[0].cosine(x[1])),
        case!("gather_rows", &[&[4, 3]], Normal, |x| x[0].gather_rows(&[2, 0, 2])),
        case!("layer_norm", &[&[3, 5]], Normal, |x| Ok(x[0].layer_norm(1e-5))),
        case!("bce", &[&[3, 4]], Probability, |x| {
            x[0].bce(&Tensor::from_fn(&[3, 4], |i| (i % 3) as f64 / 2.0))
        }),
    ]
}

/// Pins a closure to the higher-ranked objective signature.
fn objective_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Projects an arbitrary output onto a scalar with fixed random weights.
fn project<'t>(out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let w = out.tape().constant(weights.reshape(&out.shape())?);
    Ok(out.mul(w)?.sum())
}

fn output_shape(case: &Case, inputs: &[(String, Tensor)]) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|(_, t)| tape.constant(t.clone())).collect();
    Ok((case.f)(&tape, &vars)?.shape())
}

/// Every primitive, plus gradient reversal checked against `−λ·f`.
pub fn primitive_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (ci, case) in cases().iter().enumerate() {
        let mut r = rng::stream(seed, ci as u64);
        let inputs: Vec<(String, Tensor)> = case
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("x{i}"), sample(s, case.domain, &mut r)))
            .collect();
        let shape = output_shape(case, &inputs)?;
        let weights = Tensor::randn(&shape, 1.0, &mut r);
        let f = case.f;
        let w = weights.clone();
        reports.push(check_gradients(case.name, &inputs, Picks::All, cfg, move |tape, x| {
            project(f(tape, x)?, &w)
        })?);
    }

    let mut r = rng::stream(seed, 1000);
    let inputs = vec![("x0".to_string(), sample(&[3, 4], Domain::Normal, &mut r))];
    let weights = Tensor::randn(&[3, 4], 1.0, &mut r);
    reports.push(check_gradients_against(
        "grad_reverse",
        &inputs,
        Picks::All,
        cfg,
        &|_| true,
        &|_: &Tape, x: &[Var<'_>]| project(x[0].grad_reverse(GRL_LAMBDA)?, &weights),
        &|_: &Tape, x: &[Var<'_>]| project(x[0].scale(-GRL_LAMBDA), &weights),
    )?);
    Ok(reports)
}

fn with_params(params: &crate::tensorgrad::ParamSet, extra: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    params
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.clone()))
        .chain(extra)
        .collect()
}

/// Plain and global-context-aware multi-head attention, all parameters and
/// both input sequences.
pub fn attention_suite(seed: u64, picks: usize, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for (vi, variant) in [AttentionVariant::Plain, AttentionVariant::Gcaa].into_iter().enumerate() {
        let mut r = rng::stream(seed, 2000 + vi as u64);
        let block = AttentionBlock::new(
            "att",
            AttentionConfig {
                model_dim: 8,
                num_heads: 2,
                variant,
                global_from_query: true,
            },
        )?;
        let mut params = crate::tensorgrad::ParamSet::new();
        block.init(&mut params, &mut r);
        for (_, p) in params.iter_mut() {
            p.value = p.value.map(|x| x + 0.05);
        }
        let inputs = with_params(
            &params,
            vec![
                ("query".to_string(), Tensor::randn(&[4, 8], 1.0, &mut r)),
                ("kv".to_string(), Tensor::randn(&[5, 8], 1.0, &mut r)),
            ],
        );
        let weights = Tensor::randn(&[4, 8], 1.0, &mut r);
        let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
        let name = match variant {
            AttentionVariant::Plain => "attention",
            AttentionVariant::Gcaa => "gcaa",
        };
        reports.push(check_gradients(
            name,
            &inputs,
            Picks::Random {
                count: picks,
                seed: seed ^ 0xa77e,
            },
            cfg,
            |_tape, x| {
                let bound = Bound::from_vars(&names, x);
                let out = block.attend(&bound, bound.get("query")?, bound.get("kv")?)?.output;
                project(out, &weights)
            },
        )?);
    }
    Ok(reports)
}

fn parser_inputs(seed: u64) -> Result<(Parser, SnippetBatch)> {
    let cfg = ParserConfig {
        num_categories: 3,
        snippets_per_video: 4,
        model_dim: 8,
        num_heads: 2,
        ..Default::default()
    };
    let parser = Parser::new(cfg, seed)?;
    let mut r = rng::stream(seed, 3000);
    let batch = SnippetBatch::new(
        Tensor::randn(&[2, 4, 8], 1.0, &mut r),
        Tensor::randn(&[2, 4, 8], 1.0, &mut r),
        Tensor::from_fn(&[2, 3], |_| f64::from(r.random::<bool>())),
    )?;
    Ok((parser, batch))
}

/// Full parser objective. Encoder parameters and inputs are checked against
/// `L_wsl + λ_g·L_g − λ_ad·L_ad`; discriminator parameters against the tape
/// objective itself.
pub fn parser_suite(seed: u64, picks: usize, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let (parser, batch) = parser_inputs(seed)?;
    let pcfg = *parser.config();
    let inputs = with_params(
        &parser.params,
        vec![
            ("input.audio".to_string(), batch.audio.clone()),
            ("input.visual".to_string(), batch.visual.clone()),
        ],
    );
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let tape_objective = objective_fn(|_, x| {
        let (params, inputs) = x.split_at(x.len() - 2);
        let bound = Bound::from_vars(&names[..params.len()], params);
        let graph = parser.forward_features(&bound, inputs[0], inputs[1])?;
        Ok(losses::parser_objective(&graph, &batch.weak_labels, &pcfg)?.0)
    });
    let encoder_objective = objective_fn(|_, x| {
        let (params, inputs) = x.split_at(x.len() - 2);
        let bound = Bound::from_vars(&names[..params.len()], params);
        let g = parser.forward_features(&bound, inputs[0], inputs[1])?;
        let l_wsl = losses::wsl_loss(g.video_probs, &batch.weak_labels)?;
        let l_g = losses::guided_loss(g.audio_probs, g.visual_probs, &batch.weak_labels, pcfg.smoothing_eps)?;
        let mut total = l_wsl.add(l_g.scale(pcfg.lambda_g))?;
        if let Some(d) = g.disc_probs {
            let s = d.shape();
            let l_ad = losses::adversarial_loss(d, &losses::modality_targets(s[0], s[1]))?;
            total = total.sub(l_ad.scale(pcfg.lambda_ad))?;
        }
        Ok(total)
    });
    let picks_for = |salt: u64| Picks::Random {
        count: picks,
        seed: seed ^ salt,
    };
    let is_disc = |n: &str| n.starts_with("disc.");
    Ok(vec![
        check_gradients_against(
            "parser.encoder",
            &inputs,
            picks_for(0x9a45),
            cfg,
            &|n| !is_disc(n),
            &tape_objective,
            &encoder_objective,
        )?,
        check_gradients_against(
            "parser.discriminator",
            &inputs,
            picks_for(0xd15c),
            cfg,
            &is_disc,
            &tape_objective,
            &tape_objective,
        )?,
    ])
}

/// The multi-variant grounding loss over every pretraining parameter.
pub fn pretrainer_suite(seed: u64, picks: usize, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let pcfg = PretrainConfig {
        input_dim: 5,
        snippets: 4,
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ff_dim: 12,
        ..Default::default()
    };
    let model = Pretrainer::new(pcfg, seed)?;
    let mut r = rng::stream(seed, 4000);
    let audio = Tensor::randn(&[4, 5], 1.0, &mut r);
    let visual = Tensor::randn(&[4, 5], 1.0, &mut r);
    let pairs = PairSet {
        positives: vec![(0, 1), (1, 0), (2, 3)],
        negatives: vec![(0, 2), (1, 3), (3, 0)],
    };
    let inputs = with_params(&model.params, Vec::new());
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    Ok(vec![check_gradients(
        "pretrainer",
        &inputs,
        Picks::Random {
            count: picks,
            seed: seed ^ 0x7e57,
        },
        cfg,
        |tape, x| {
            let bound = Bound::from_vars(&names, x);
            let a = tape.constant(audio.clone());
            let v = tape.constant(visual.clone());
            Ok(model.objective(&bound, &[(a, v, &pairs)])?.loss)
        },
    )?])
}

/// One merged report per suite over `seeds`.
pub fn run_all(seeds: &[u64], picks: usize, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut prim = Vec::new();
    let mut att = Vec::new();
    let mut par = Vec::new();
    let mut pre = Vec::new();
    for &s in seeds {
        prim.extend(primitive_suite(s, cfg)?);
        att.extend(attention_suite(s, picks, cfg)?);
        par.extend(parser_suite(s, picks, cfg)?);
        pre.extend(pretrainer_suite(s, picks, cfg)?);
    }
    Ok(vec![
        GradCheckReport::merge("primitives", &prim),
        GradCheckReport::merge("attention", &att),
        GradCheckReport::merge("parser", &par),
        GradCheckReport::merge("pretrainer", &pre),
    ])
}
