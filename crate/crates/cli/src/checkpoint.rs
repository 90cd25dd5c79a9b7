//! Model checkpoints in the `AVFT` container.
//!
//! Parameters are stored under their own names; configuration fields are
//! stored as one-element entries named `config.<field>`.

use std::path::Path;

use avparse::data::container::{read_container, write_container, Container, Dtype};
use avparse::grounding::{PretrainConfig, Pretrainer, SimilarityThresholds};
use avparse::losses::{AvgVariant, MarginConfig};
use avparse::parser::{Parser, ParserConfig};
use avparse::tensorgrad::{ParamSet, Tensor};

use crate::CliError;

fn write(path: &Path, params: &ParamSet, fields: &[(&str, f64)]) -> Result<(), CliError> {
    let config: Vec<(String, Tensor)> = fields
        .iter()
        .map(|(k, v)| (format!("config.{k}"), Tensor::scalar(*v)))
        .collect();
    let entries = config
        .iter()
        .map(|(k, t)| (k.as_str(), t))
        .chain(params.iter().map(|(n, p)| (n, &p.value)));
    write_container(path, entries, Dtype::F64).map_err(CliError::from)
}

struct Fields<'a> {
    c: &'a Container,
    path: &'a Path,
}

impl Fields<'_> {
    fn f64(&self, key: &str) -> Result<f64, CliError> {
        Ok(self.c.get(&format!("config.{key}"), self.path)?.item())
    }

    fn usize(&self, key: &str) -> Result<usize, CliError> {
        let v = self.f64(key)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(CliError::io_detail(self.path, format!("config.{key} = {v} is not a count")));
        }
        Ok(v as usize)
    }

    fn bool(&self, key: &str) -> Result<bool, CliError> {
        Ok(self.f64(key)? != 0.0)
    }

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, t) in &self.c.entries {
            if !name.starts_with("config.") {
                p.insert(name.clone(), t.clone());
            }
        }
        p
    }
}

pub fn save_parser(path: &Path, parser: &Parser) -> Result<(), CliError> {
    let c = parser.config();
    let b = |x: bool| f64::from(u8::from(x));
    write(
        path,
        &parser.params,
        &[
            ("num_categories", c.num_categories as f64),
            ("snippets_per_video", c.snippets_per_video as f64),
            ("model_dim", c.model_dim as f64),
            ("num_heads", c.num_heads as f64),
            ("lambda_g", c.lambda_g),
            ("lambda_ad", c.lambda_ad),
            ("decision_threshold", c.decision_threshold),
            ("smoothing_eps", c.smoothing_eps),
            ("use_skip", b(c.use_skip)),
            ("use_adv", b(c.use_adv)),
            ("use_gcaa", b(c.use_gcaa)),
            ("global_from_query", b(c.global_from_query)),
        ],
    )
}

pub fn load_parser(path: &Path) -> Result<Parser, CliError> {
    let c = read_container(path)?;
    let f = Fields { c: &c, path };
    let cfg = ParserConfig {
        num_categories: f.usize("num_categories")?,
        snippets_per_video: f.usize("snippets_per_video")?,
        model_dim: f.usize("model_dim")?,
        num_heads: f.usize("num_heads")?,
        lambda_g: f.f64("lambda_g")?,
        lambda_ad: f.f64("lambda_ad")?,
        decision_threshold: f.f64("decision_threshold")?,
        smoothing_eps: f.f64("smoothing_eps")?,
        use_skip: f.bool("use_skip")?,
        use_adv: f.bool("use_adv")?,
        use_gcaa: f.bool("use_gcaa")?,
        global_from_query: f.bool("global_from_query")?,
    };
    Parser::from_params(cfg, f.params()).map_err(|e| CliError::io_detail(path, e.to_string()))
}

fn variant_code(v: AvgVariant) -> f64 {
    match v {
        AvgVariant::Uni => 0.0,
        AvgVariant::Cross => 1.0,
        AvgVariant::Multi => 2.0,
    }
}

pub fn save_pretrainer(path: &Path, model: &Pretrainer) -> Result<(), CliError> {
    let c = model.config();
    write(
        path,
        &model.params,
        &[
            ("input_dim", c.input_dim as f64),
            ("snippets", c.snippets as f64),
            ("num_layers", c.num_layers as f64),
            ("model_dim", c.model_dim as f64),
            ("num_heads", c.num_heads as f64),
            ("ff_dim", c.ff_dim as f64),
            ("margin_pos", c.margins.p),
            ("margin_neg", c.margins.n),
            ("pairs_per_anchor", c.pairs_per_anchor as f64),
            ("v_threshold", c.thresholds.v_threshold),
            ("a_threshold", c.thresholds.a_threshold),
            ("variant", variant_code(c.variant)),
            ("layer_norm_eps", c.layer_norm_eps),
        ],
    )
}

pub fn load_pretrainer(path: &Path) -> Result<Pretrainer, CliError> {
    let c = read_container(path)?;
    let f = Fields { c: &c, path };
    let variant = match f.usize("variant")? {
        0 => AvgVariant::Uni,
        1 => AvgVariant::Cross,
        2 => AvgVariant::Multi,
        other => return Err(CliError::io_detail(path, format!("unknown variant code {other}"))),
    };
    let cfg = PretrainConfig {
        input_dim: f.usize("input_dim")?,
        snippets: f.usize("snippets")?,
        num_layers: f.usize("num_layers")?,
        model_dim: f.usize("model_dim")?,
        num_heads: f.usize("num_heads")?,
        ff_dim: f.usize("ff_dim")?,
        margins: MarginConfig {
            p: f.f64("margin_pos")?,
            n: f.f64("margin_neg")?,
        },
        pairs_per_anchor: f.usize("pairs_per_anchor")?,
        thresholds: SimilarityThresholds {
            v_threshold: f.f64("v_threshold")?,
            a_threshold: f.f64("a_threshold")?,
        },
        variant,
        layer_norm_eps: f.f64("layer_norm_eps")?,
    };
    Pretrainer::from_params(cfg, f.params()).map_err(|e| CliError::io_detail(path, e.to_string()))
}
