//! Run configuration: flat `key = value` lines under `[head]`, `[solver]`,
//! `[data]` and `[output]` headers. Keys above the first header are global.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cvx_attn::arrangements::ArrangementMode;
use cvx_attn::heads::{Activation, HeadKind, HeadSpec, Loss, MixFn, Parametrization};
use cvx_attn::linalg::TokenGrid;
use cvx_attn::solvers::SolverConfig;
use cvx_attn::synth::{Recipe, SynthDims};
use cvx_attn::{Error, Result};

const KEYS: &[&str] = &[
    "seed",
    "preset",
    "head.kind",
    "head.activation",
    "head.beta",
    "head.m",
    "head.blocks",
    "head.loss",
    "head.grid",
    "head.param",
    "solver.name",
    "solver.max_iters",
    "solver.rel_tol",
    "solver.abs_tol",
    "solver.gap_tol",
    "solver.armijo",
    "solver.restarts",
    "solver.rank",
    "solver.deterministic",
    "solver.init_scale",
    "solver.schedule",
    "solver.mode",
    "solver.budget",
    "data.path",
    "data.recipe",
    "data.n",
    "data.s",
    "data.d",
    "data.c",
    "data.m",
    "data.blocks",
    "output.dir",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    /// FISTA for dense linear/gated programs, Burer-Monteiro otherwise.
    Auto,
    Fista,
    Bm,
    Nc,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Synthetic(Recipe),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub spec: HeadSpec,
    pub solver: SolverKind,
    pub solver_cfg: SolverConfig,
    pub mode: Option<ArrangementMode>,
    pub budget: usize,
    pub data: Option<DataSource>,
    pub dims: SynthDims,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Raw entries keyed `section.key`, with the line each came from.
#[derive(Debug, Clone, Default)]
pub struct Entries {
    values: BTreeMap<String, (String, usize)>,
}

impl Entries {
    pub fn parse(text: &str) -> Result<Entries> {
        let mut section = String::new();
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(name) = body.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| config_err(line, "unterminated section header"))?.trim();
                if !["head", "solver", "data", "output"].contains(&name) {
                    return Err(config_err(line, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| config_err(line, "expected key = value"))?;
            let key = key.trim();
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            if !KEYS.contains(&full.as_str()) {
                return Err(config_err(line, format!("unknown key `{full}`")));
            }
            if values.insert(full.clone(), (value.trim().to_string(), line)).is_some() {
                return Err(config_err(line, format!("duplicate key `{full}`")));
            }
        }
        Ok(Entries { values })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        debug_assert!(KEYS.contains(&key), "{key}");
        self.values.insert(key.to_string(), (value.into(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn get<T>(&self, key: &str, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some((v, line)) => parse(v).map(Some).map_err(|msg| config_err(*line, format!("{key}: {msg}"))),
        }
    }

    /// Fills unset keys from a named preset.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "paper" => {
                let kind = self.values.get("head.kind").map(|v| v.0.clone()).unwrap_or_default();
                let attention = kind == "sa" || kind == "sa_blockdiag";
                let defaults = [
                    ("head.beta", "2e-2"),
                    ("head.m", if attention { "5" } else { "100" }),
                    ("head.blocks", if kind == "bfno" { "5" } else { "1" }),
                    ("solver.schedule", "cosine"),
                ];
                for (k, v) in defaults {
                    if !self.contains(k) {
                        self.set(k, v);
                    }
                }
                Ok(())
            }
            other => Err(Error::InvalidArgument(format!("unknown preset `{other}`"))),
        }
    }
}

fn config_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

pub fn parse_kind(v: &str) -> std::result::Result<HeadKind, String> {
    Ok(match v {
        "mlp" => HeadKind::Mlp,
        "sa" | "self_attention" => HeadKind::SelfAttention,
        "sa_blockdiag" => HeadKind::SaBlockdiag,
        "mixer" => HeadKind::Mixer,
        "fno" => HeadKind::Fno,
        "bfno" => HeadKind::Bfno,
        other => {
            let mix = other.strip_prefix("generic_").ok_or_else(|| format!("unknown head kind `{other}`"))?;
            HeadKind::Generic(MixFn::parse(mix).ok_or_else(|| format!("unknown mixing function `{mix}`"))?)
        }
    })
}

pub fn parse_activation(v: &str) -> std::result::Result<Activation, String> {
    match v {
        "linear" => Ok(Activation::Linear),
        "relu" => Ok(Activation::Relu),
        "gated_relu" | "gated" => Ok(Activation::GatedRelu),
        other => Err(format!("unknown activation `{other}`")),
    }
}

pub fn parse_mode(v: &str) -> std::result::Result<ArrangementMode, String> {
    match v {
        "exhaustive" => Ok(ArrangementMode::Exhaustive),
        "sampled" => Ok(ArrangementMode::Sampled),
        "gated" => Ok(ArrangementMode::Gated),
        other => Err(format!("unknown arrangement mode `{other}`")),
    }
}

fn parse_loss(v: &str) -> std::result::Result<Loss, String> {
    match v {
        "squared" => Ok(Loss::Squared),
        "cross_entropy" | "ce" => Ok(Loss::CrossEntropy),
        other => Err(format!("unknown loss `{other}`")),
    }
}

fn parse_grid(v: &str) -> std::result::Result<TokenGrid, String> {
    let (h, w) = v.split_once('x').ok_or_else(|| format!("expected HxW, got `{v}`"))?;
    Ok(TokenGrid { h: num(h.trim())?, w: num(w.trim())? })
}

fn parse_param(v: &str) -> std::result::Result<Parametrization, String> {
    match v {
        "dense" => Ok(Parametrization::Dense),
        other => other
            .strip_prefix("bm")
            .map(|b| b.trim_start_matches([':', '(']).trim_end_matches(')'))
            .and_then(|b| b.parse().ok())
            .map(Parametrization::Bm)
            .ok_or_else(|| format!("expected dense or bm:<rank>, got `{other}`")),
    }
}

fn parse_solver(v: &str) -> std::result::Result<SolverKind, String> {
    match v {
        "auto" => Ok(SolverKind::Auto),
        "fista" => Ok(SolverKind::Fista),
        "bm" => Ok(SolverKind::Bm),
        "nc" => Ok(SolverKind::Nc),
        other => Err(format!("unknown solver `{other}`")),
    }
}

/// `gaussian_classes(k=3, sep=5)`, `planted_head(sa, linear)`,
/// `blockdiag_gram(B=2)`; arguments may be positional or named.
pub fn parse_recipe(v: &str) -> std::result::Result<Recipe, String> {
    let v = v.trim();
    let (name, rest) = v.split_once('(').unwrap_or((v, ")"));
    let args = rest.trim().strip_suffix(')').ok_or_else(|| format!("unbalanced parentheses in `{v}`"))?;
    let args: Vec<(Option<&str>, &str)> = args
        .split(',')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(|a| match a.split_once('=') {
            Some((k, x)) => (Some(k.trim()), x.trim()),
            None => (None, a),
        })
        .collect();
    let arg = |pos: usize, names: &[&str]| -> Option<&str> {
        args.iter()
            .find(|(k, _)| k.is_some_and(|k| names.contains(&k)))
            .or_else(|| args.get(pos).filter(|(k, _)| k.is_none()))
            .map(|(_, x)| *x)
    };
    match name.trim() {
        "gaussian_classes" => Ok(Recipe::GaussianClasses {
            k: arg(0, &["k"]).map(num).transpose()?.unwrap_or(2),
            sep: arg(1, &["sep", "separation"]).map(num).transpose()?.unwrap_or(5.0),
        }),
        "planted_head" => Ok(Recipe::PlantedHead {
            kind: parse_kind(arg(0, &["kind", "head"]).unwrap_or("sa"))?,
            activation: parse_activation(arg(1, &["activation", "act"]).unwrap_or("linear"))?,
        }),
        "blockdiag_gram" => Ok(Recipe::BlockdiagGram { blocks: arg(0, &["B", "b", "blocks"]).map(num).transpose()?.unwrap_or(2) }),
        other => Err(format!("unknown recipe `{other}`")),
    }
}

impl RunConfig {
    pub fn load(path: &Path, preset: Option<&str>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Entries::parse(&text)?;
        Self::from_entries(&mut entries, preset, path.parent())
    }

    /// Defaults only (plus an optional preset), for commands run without a file.
    pub fn empty(preset: Option<&str>) -> Result<RunConfig> {
        Self::from_entries(&mut Entries::default(), preset, None)
    }

    /// Data paths are resolved against `base`, the config file's directory.
    pub fn from_entries(e: &mut Entries, preset: Option<&str>, base: Option<&Path>) -> Result<RunConfig> {
        let preset = match preset {
            Some(p) => Some(p.to_string()),
            None => e.get("preset", |v| Ok(v.to_string()))?,
        };
        if let Some(p) = &preset {
            e.apply_preset(p)?;
        }
        let mut warnings = Vec::new();
        let seed = e.get("seed", num)?.unwrap_or(0);

        let kind = e.get("head.kind", parse_kind)?.unwrap_or(HeadKind::SelfAttention);
        let activation = e.get("head.activation", parse_activation)?.unwrap_or(Activation::Linear);
        let beta = e.get("head.beta", num)?.unwrap_or(1e-3);
        let mut spec = HeadSpec::new(kind, activation, beta);
        if let Some(m) = e.get("head.m", num)? {
            spec = spec.with_m(m);
        }
        if let Some(b) = e.get("head.blocks", num)? {
            spec = spec.with_blocks(b);
        }
        if let Some(l) = e.get("head.loss", parse_loss)? {
            spec = spec.with_loss(l);
        }
        if let Some(g) = e.get("head.grid", parse_grid)? {
            spec = spec.with_grid(g);
        }
        if let Some(p) = e.get("head.param", parse_param)? {
            spec = spec.with_param(p);
        }

        let d = SolverConfig::default();
        let mut solver_cfg = SolverConfig {
            max_iters: e.get("solver.max_iters", num)?.unwrap_or(d.max_iters),
            rel_tol: e.get("solver.rel_tol", num)?.unwrap_or(d.rel_tol),
            abs_tol: e.get("solver.abs_tol", num)?.unwrap_or(d.abs_tol),
            gap_tol: e.get("solver.gap_tol", num)?.unwrap_or(d.gap_tol),
            armijo: e.get("solver.armijo", num)?.unwrap_or(d.armijo),
            restarts: e.get("solver.restarts", num)?.unwrap_or(d.restarts),
            rank: e.get("solver.rank", num)?,
            seed,
            deterministic: e.get("solver.deterministic", boolean)?.unwrap_or(true),
            init_scale: e.get("solver.init_scale", num)?.unwrap_or(d.init_scale),
            threads: 1,
        };
        if let Parametrization::Bm(b) = spec.param {
            solver_cfg.rank.get_or_insert(b);
        }
        match e.get("solver.schedule", |v| Ok(v.to_string()))?.as_deref() {
            None | Some("constant") | Some("backtracking") => {}
            Some("cosine") => warnings.push("schedule = cosine is not supported; steps come from backtracking line search".into()),
            Some(other) => return Err(config_err(e.values["solver.schedule"].1, format!("solver.schedule: unknown schedule `{other}`"))),
        }

        let path = e.get("data.path", |v| Ok(PathBuf::from(v)))?;
        let recipe = e.get("data.recipe", parse_recipe)?;
        let data = match (path, recipe) {
            (Some(_), Some(_)) => return Err(config_err(e.values["data.recipe"].1, "set either data.path or data.recipe, not both")),
            (Some(p), None) => Some(DataSource::File(match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            })),
            (None, Some(r)) => Some(DataSource::Synthetic(r)),
            (None, None) => None,
        };
        let sd = SynthDims::default();
        let dims = SynthDims {
            n: e.get("data.n", num)?.unwrap_or(sd.n),
            s: e.get("data.s", num)?.unwrap_or(sd.s),
            d: e.get("data.d", num)?.unwrap_or(sd.d),
            c: e.get("data.c", num)?.unwrap_or(sd.c),
            m: e.get("data.m", num)?.unwrap_or(sd.m),
            blocks: e.get("data.blocks", num)?.unwrap_or(sd.blocks),
        };

        Ok(RunConfig {
            spec,
            solver: e.get("solver.name", parse_solver)?.unwrap_or(SolverKind::Auto),
            solver_cfg,
            mode: e.get("solver.mode", parse_mode)?,
            budget: e.get("solver.budget", num)?.unwrap_or(256),
            data,
            dims,
            out_dir: e.get("output.dir", |v| Ok(PathBuf::from(v)))?.unwrap_or_else(|| PathBuf::from("out")),
            seed,
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, preset: Option<&str>) -> Result<RunConfig> {
        RunConfig::from_entries(&mut Entries::parse(text)?, preset, None)
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = load("seed = 1\n[head]\nkind = mixer\nwidth = 3\n", None).unwrap_err();
        assert!(matches!(err, Error::Config { line: 4, .. }), "{err}");
    }

    #[test]
    fn bad_value_reports_its_line() {
        let err = load("[head]\n\nbeta = lots\n", None).unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
    }

    #[test]
    fn preset_fills_only_unset_keys() {
        let cfg = load("[head]\nkind = sa\nbeta = 0.5\n", Some("paper")).unwrap();
        assert_eq!(cfg.spec.beta, 0.5);
        assert_eq!(cfg.spec.m, 5);
        assert_eq!(cfg.warnings.len(), 1);
        let cfg = load("preset = paper\n[head]\nkind = bfno\n[solver]\nschedule = constant\n", None).unwrap();
        assert_eq!((cfg.spec.beta, cfg.spec.m, cfg.spec.blocks), (2e-2, 100, 5));
        assert!(cfg.warnings.is_empty());
    }

    #[test]
    fn recipes_positional_and_named() {
        assert_eq!(parse_recipe("gaussian_classes(k=3, sep=5)").unwrap(), Recipe::GaussianClasses { k: 3, sep: 5.0 });
        assert_eq!(parse_recipe("gaussian_classes(4,2.5)").unwrap(), Recipe::GaussianClasses { k: 4, sep: 2.5 });
        assert_eq!(parse_recipe("blockdiag_gram(B=2)").unwrap(), Recipe::BlockdiagGram { blocks: 2 });
        assert_eq!(
            parse_recipe("planted_head(mixer, relu)").unwrap(),
            Recipe::PlantedHead { kind: HeadKind::Mixer, activation: Activation::Relu }
        );
        assert!(parse_recipe("moons(3)").is_err());
    }

    #[test]
    fn kinds_round_trip_through_names() {
        for kind in [HeadKind::Mlp, HeadKind::SelfAttention, HeadKind::Bfno, HeadKind::Generic(MixFn::LocalPool { radius: 2 })] {
            let name = HeadSpec::new(kind.clone(), Activation::Linear, 0.0).kind_name();
            assert_eq!(parse_kind(&name).unwrap(), kind);
        }
    }
}
