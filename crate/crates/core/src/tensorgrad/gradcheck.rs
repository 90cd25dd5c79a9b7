//! Central finite-difference verification of tape gradients.

use rand::seq::index;

use super::rng;
use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator so that vanishing
    /// gradients are compared absolutely.
    pub denom_floor: f64,
    /// Backward rule to corrupt on the analytic pass (fault injection).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-6,
            fault: None,
        }
    }
}

/// Which scalar entries to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Picks {
    All,
    /// `count` entries drawn uniformly without replacement across all inputs.
    Random { count: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct EntryCheck {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<EntryCheck>,
    pub failures: Vec<EntryCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Folds several reports into one suite-level summary.
    pub fn merge(name: impl Into<String>, reports: &[GradCheckReport]) -> GradCheckReport {
        let mut out = GradCheckReport {
            name: name.into(),
            checked: 0,
            max_rel_err: 0.0,
            worst: None,
            failures: Vec::new(),
        };
        for r in reports {
            out.checked += r.checked;
            if r.max_rel_err >= out.max_rel_err {
                out.max_rel_err = r.max_rel_err;
                out.worst = r.worst.clone();
            }
            out.failures.extend(r.failures.iter().cloned().map(|mut f| {
                f.input = format!("{}:{}", r.name, f.input);
                f
            }));
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` receives one leaf per input, in order, and must return a scalar.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[(String, Tensor)],
    picks: Picks,
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_gradients_against(name, inputs, picks, cfg, &|_| true, &f, &f)
}

/// Like [`check_gradients`], but differentiates `analytic` on the tape and
/// `numeric` by finite differences. Used where the backward pass realizes a
/// different objective than the forward value, as with gradient reversal.
/// Only inputs whose name satisfies `include` are perturbed.
pub fn check_gradients_against<F, G>(
    name: &str,
    inputs: &[(String, Tensor)],
    picks: Picks,
    cfg: &GradCheckConfig,
    include: &dyn Fn(&str) -> bool,
    analytic_fn: &F,
    numeric_fn: &G,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    G: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let f = analytic_fn;
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = numeric_fn(&tape, &vars)?;
        if out.value().numel() != 1 {
            return Err(Error::shape("gradcheck", "objective must be scalar"));
        }
        Ok(out.item())
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        tape.inject_fault(cfg.fault);
        let vars: Vec<Var<'_>> = inputs.iter().map(|(_, v)| tape.leaf(v.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };

    let mut entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(_, (name, _))| include(name))
        .flat_map(|(i, (_, t))| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if let Picks::Random { count, seed } = picks {
        if count < entries.len() {
            let mut rng = rng::seeded(seed);
            let mut chosen: Vec<usize> = index::sample(&mut rng, entries.len(), count).into_vec();
            chosen.sort_unstable();
            entries = chosen.into_iter().map(|k| entries[k]).collect();
        }
    }

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    for (i, j) in entries {
        let orig = values[i].data()[j];
        values[i].data_mut()[j] = orig + cfg.step;
        let plus = eval(&values)?;
        values[i].data_mut()[j] = orig - cfg.step;
        let minus = eval(&values)?;
        values[i].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic[i].data()[j];
        let rel_err = relative_error(a, numeric, cfg.denom_floor);
        let entry = EntryCheck {
            input: inputs[i].0.clone(),
            index: j,
            analytic: a,
            numeric,
            rel_err,
        };
        report.checked += 1;
        if rel_err >= report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst = Some(entry.clone());
        }
        if !(rel_err <= cfg.tolerance) {
            report.failures.push(entry);
        }
    }
    Ok(report)
}
