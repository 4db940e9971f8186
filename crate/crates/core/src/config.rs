//! Line-oriented `key = value` run configuration.
//!
//! ```text
//! # comment
//! nonlinearity = F2
//! q = 3
//! L = 3.141592653589793
//! N = 32
//! initial = mode 1 1 1
//! amplitude = 0.5
//! ```
//!
//! Defaults for omitted keys are those of [`RunConfig::default`] and
//! [`RunSettings::default`]. Every error names the offending key and line.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::dynamics::{InitialData, InitialShape, NonlinearityKind, NonlinearitySpec, RunSettings};
use crate::error::{Error, Result};
use crate::field::Grid;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: NonlinearityKind,
    pub q: f64,
    pub side: f64,
    pub n: usize,
    pub initial: InitialData,
    pub settings: RunSettings,
    /// Interval between checkpoints, a whole multiple of `record_every`.
    pub checkpoint_every: Option<f64>,
    pub seed: u64,
    pub output: PathBuf,
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Accept any `q >= 1` regardless of the nonlinearity's admissible window.
    pub allow_q_override: bool,
    pub dealias: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kind: NonlinearityKind::F1,
            q: 3.0,
            side: PI,
            n: 32,
            initial: InitialData::mode([1, 1, 1], 0.5),
            settings: RunSettings::default(),
            checkpoint_every: None,
            seed: 0,
            output: PathBuf::from("trajectory.csv"),
            checkpoint_dir: None,
            resume: None,
            allow_q_override: false,
            dealias: false,
        }
    }
}

const KEYS: &[&str] = &[
    "nonlinearity",
    "q",
    "L",
    "N",
    "initial",
    "amplitude",
    "dt0",
    "t_end",
    "rtol",
    "atol",
    "sup_blowup",
    "dt_min",
    "record_every",
    "checkpoint_every",
    "monitor_a",
    "seed",
    "output",
    "checkpoint_dir",
    "resume",
    "allow_q_override",
    "dealias",
];

pub(crate) fn at(line: usize, key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: `{key}`: {msg}"))
}

pub(crate) fn parse_value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| at(line, key, format!("cannot parse `{raw}`")))
}

fn parse_bool(line: usize, key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(at(line, key, format!("expected true or false, got `{raw}`"))),
    }
}

fn parse_initial(line: usize, raw: &str, seed: u64) -> Result<InitialShape> {
    let mut words = raw.split_whitespace();
    let head = words.next().unwrap_or("");
    let rest: Vec<&str> = words.collect();
    let nums = |items: &[&str]| -> Result<Vec<f64>> {
        items.iter().map(|w| parse_value::<f64>(line, "initial", w)).collect()
    };
    let index = |w: &str| -> Result<usize> {
        let k = parse_value::<usize>(line, "initial", w)?;
        if k == 0 {
            return Err(at(line, "initial", "mode indices start at 1"));
        }
        Ok(k)
    };
    match head {
        "zero" if rest.is_empty() => Ok(InitialShape::Zero),
        "mode" if rest.len() == 3 => Ok(InitialShape::Modes(vec![(
            [index(rest[0])?, index(rest[1])?, index(rest[2])?],
            1.0,
        )])),
        "modes" => {
            let joined = rest.join(" ");
            let mut modes = Vec::new();
            for term in joined.split(';').map(str::trim).filter(|t| !t.is_empty()) {
                let w: Vec<&str> = term.split_whitespace().collect();
                if w.len() != 4 {
                    return Err(at(line, "initial", format!("expected `k1 k2 k3 weight`, got `{term}`")));
                }
                modes.push(([index(w[0])?, index(w[1])?, index(w[2])?], nums(&w[3..])?[0]));
            }
            if modes.is_empty() {
                return Err(at(line, "initial", "`modes` needs at least one term"));
            }
            Ok(InitialShape::Modes(modes))
        }
        "gaussian" if rest.len() == 1 || rest.len() == 4 => {
            let v = nums(&rest)?;
            if !(v[0] > 0.0) {
                return Err(at(line, "initial", "gaussian width must be positive"));
            }
            let center = (v.len() == 4).then(|| [v[1], v[2], v[3]]);
            Ok(InitialShape::Gaussian { sigma: v[0], center })
        }
        "random" if rest.len() == 1 => {
            let kmax = index(rest[0])?;
            Ok(InitialShape::Random { kmax, seed })
        }
        _ => Err(at(
            line,
            "initial",
            format!(
                "unrecognised descriptor `{raw}` (expected `zero`, `mode k1 k2 k3`, \
                 `modes k1 k2 k3 w; ...`, `gaussian sigma [cx cy cz]` or `random kmax`)"
            ),
        )),
    }
}

/// Splits `key = value` lines, dropping `#` comments; keys must be in `allowed`
/// and may appear once. Values are returned with their line numbers.
pub(crate) fn parse_entries<'t>(
    text: &'t str,
    allowed: &[&str],
) -> Result<HashMap<&'t str, (usize, &'t str)>> {
    let mut entries = HashMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !allowed.contains(&key) {
            return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
        }
        if value.is_empty() {
            return Err(at(line, key, "missing value"));
        }
        if let Some((first, _)) = entries.insert(key, (line, value)) {
            return Err(at(line, key, format!("duplicate key, first set on line {first}")));
        }
    }
    Ok(entries)
}

/// Parses and validates a configuration file's contents.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let entries = parse_entries(text, KEYS)?;
    let mut cfg = RunConfig::default();
    let get = |k: &str| entries.get(k).copied();

    macro_rules! set {
        ($key:literal, $target:expr) => {
            if let Some((line, raw)) = get($key) {
                $target = parse_value(line, $key, raw)?;
            }
        };
    }

    if let Some((line, raw)) = get("nonlinearity") {
        cfg.kind = raw.parse().map_err(|e: Error| at(line, "nonlinearity", strip(&e)))?;
    }
    set!("q", cfg.q);
    set!("L", cfg.side);
    set!("N", cfg.n);
    set!("amplitude", cfg.initial.amplitude);
    set!("seed", cfg.seed);
    set!("dt0", cfg.settings.dt0);
    set!("t_end", cfg.settings.t_end);
    set!("rtol", cfg.settings.rtol);
    set!("atol", cfg.settings.atol);
    set!("sup_blowup", cfg.settings.sup_blowup);
    set!("dt_min", cfg.settings.dt_min);
    set!("record_every", cfg.settings.record_every);
    set!("monitor_a", cfg.settings.monitor_a);
    if let Some((line, raw)) = get("checkpoint_every") {
        cfg.checkpoint_every = Some(parse_value(line, "checkpoint_every", raw)?);
    }
    if let Some((line, raw)) = get("initial") {
        cfg.initial.shape = parse_initial(line, raw, cfg.seed)?;
    }
    if let Some((_, raw)) = get("output") {
        cfg.output = PathBuf::from(raw);
    }
    if let Some((_, raw)) = get("checkpoint_dir") {
        cfg.checkpoint_dir = Some(PathBuf::from(raw));
    }
    if let Some((_, raw)) = get("resume") {
        cfg.resume = Some(PathBuf::from(raw));
    }
    if let Some((line, raw)) = get("allow_q_override") {
        cfg.allow_q_override = parse_bool(line, "allow_q_override", raw)?;
    }
    if let Some((line, raw)) = get("dealias") {
        cfg.dealias = parse_bool(line, "dealias", raw)?;
    }

    // Range checks, reported against the line of the key that carries the value.
    let line_of = |k: &str| get(k).map_or(0, |(l, _)| l);
    let cite = |k: &str, e: &Error| -> Error {
        match line_of(k) {
            0 => Error::Config(format!("`{k}` (default): {}", strip(e))),
            l => at(l, k, strip(e)),
        }
    };
    let q_key = if get("q").is_some() { "q" } else { "nonlinearity" };
    cfg.spec().map_err(|e| cite(q_key, &e))?;
    Grid::new(cfg.side, cfg.n).map_err(|e| {
        let key = if cfg.n < 2 { "N" } else { "L" };
        cite(key, &e)
    })?;
    if !cfg.initial.amplitude.is_finite() {
        return Err(cite("amplitude", &Error::Config("must be finite".into())));
    }
    if let InitialShape::Modes(modes) = &cfg.initial.shape {
        if let Some((k, _)) = modes.iter().find(|(k, _)| k.iter().any(|&ki| ki > cfg.n)) {
            return Err(cite("initial", &Error::Config(format!("mode {k:?} exceeds N = {}", cfg.n))));
        }
    }
    validate_settings(&cfg.settings, &line_of)?;
    if let Some(ce) = cfg.checkpoint_every {
        if cfg.checkpoint_dir.is_none() {
            return Err(at(line_of("checkpoint_every"), "checkpoint_every", "requires checkpoint_dir"));
        }
        let re = cfg.settings.record_every;
        let k = (ce / re).round();
        if !(ce > 0.0 && k >= 1.0 && (k * re - ce).abs() <= 1e-9 * ce) {
            return Err(at(
                line_of("checkpoint_every"),
                "checkpoint_every",
                format!("must be a positive whole multiple of record_every = {re}"),
            ));
        }
    }
    Ok(cfg)
}

pub(crate) fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Domain(m) | Error::NumericalFailure(m) => m.clone(),
        other => other.to_string(),
    }
}

fn validate_settings(s: &RunSettings, line_of: &dyn Fn(&str) -> usize) -> Result<()> {
    let positive = [
        ("t_end", s.t_end),
        ("dt0", s.dt0),
        ("rtol", s.rtol),
        ("sup_blowup", s.sup_blowup),
        ("dt_min", s.dt_min),
        ("record_every", s.record_every),
    ];
    let fail = |key: &str, msg: String| match line_of(key) {
        0 => Error::Config(format!("`{key}` (default): {msg}")),
        l => at(l, key, msg),
    };
    for (key, v) in positive {
        if !(v.is_finite() && v > 0.0) {
            return Err(fail(key, format!("must be positive and finite, got {v}")));
        }
    }
    if !(s.atol.is_finite() && s.atol >= 0.0) {
        return Err(fail("atol", format!("must be non-negative, got {}", s.atol)));
    }
    if !(s.monitor_a >= 1.0 && s.monitor_a.is_finite()) {
        return Err(fail("monitor_a", format!("must be >= 1, got {}", s.monitor_a)));
    }
    if s.dt_min >= s.dt0 {
        return Err(fail("dt_min", format!("must be smaller than dt0 = {}", s.dt0)));
    }
    s.validate()
}

impl RunConfig {
    pub fn spec(&self) -> Result<NonlinearitySpec> {
        if self.allow_q_override {
            NonlinearitySpec::unchecked(self.kind, self.q)
        } else {
            NonlinearitySpec::new(self.kind, self.q)
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.side, self.n)
    }

    /// Records between checkpoints.
    pub fn checkpoint_stride(&self) -> Option<u64> {
        self.checkpoint_every
            .map(|ce| (ce / self.settings.record_every).round() as u64)
    }

    /// Resolves relative paths against `base`, normally the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        if let Some(p) = self.checkpoint_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.resume.as_mut() {
            fix(p);
        }
    }

    /// SHA-256 over the settings that determine the trajectory after a restart.
    /// `t_end`, `dt0`, the initial data and output paths are excluded.
    pub fn dynamics_digest(&self) -> [u8; 32] {
        let s = &self.settings;
        let mut h = Sha256::new();
        h.update(b"newtonflow-dynamics-v1");
        h.update([self.kind.code(), u8::from(self.dealias)]);
        h.update((self.n as u64).to_le_bytes());
        for v in [self.q, self.side, s.rtol, s.atol, s.sup_blowup, s.dt_min, s.record_every, s.monitor_a] {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}
