//! Flat `key = value` run configuration. Every key has a default and can be
//! overridden on the command line by a flag of the same name.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use spdegp::operator::Scheme;
use spdegp::params::{NoiseModel, COMPONENTS};
use spdegp::precision::P0Mode;

use crate::CliError;

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("nx", "16", "grid columns"),
    ("ny", "16", "grid rows"),
    ("dx", "1", "column spacing"),
    ("dy", "1", "row spacing"),
    ("dt", "1", "time step"),
    ("steps", "6", "number of frames"),
    ("scheme", "ufdm1", "advection discretization: centered, ufdm1 or ufdm3"),
    ("alpha", "4", "even operator power"),
    ("theta", "preset", "parameter source: preset, uniform, dir or init"),
    ("theta_dir", "", "parameter directory when theta = dir"),
    ("kappa", "0.33", "uniform source: kappa"),
    ("m1", "0", "uniform source: advection along x"),
    ("m2", "0", "uniform source: advection along y"),
    ("gamma", "1", "uniform source: isotropic diffusion"),
    ("beta", "0", "uniform source: anisotropic diffusion"),
    ("v1", "0", "uniform source: anisotropy direction x"),
    ("v2", "0", "uniform source: anisotropy direction y"),
    ("tau", "1", "uniform source: noise amplitude"),
    ("noise", "white", "spatial noise: white or colored"),
    ("noise_kappa", "1", "colored noise range parameter"),
    ("noise_alpha", "2", "colored noise power"),
    ("p0", "recursion", "initial-state precision: recursion or innovation"),
    ("p0_stab", "200", "recursion steps for the initial covariance"),
    ("truth", "", "truth raster"),
    ("background", "", "background raster (zero when empty)"),
    ("obs", "tracks", "observation source: tracks, mask, file, full or none"),
    ("obs_path", "", "mask raster (obs = mask) or value raster with NaN gaps (obs = file)"),
    ("obs_noise", "0.01", "observation noise variance"),
    ("track_width", "2", "swath width in nodes"),
    ("track_spacing", "8", "swath spacing in nodes"),
    ("track_angle", "30", "swath angle in degrees"),
    ("track_phase", "1.7", "swath drift per frame in nodes"),
    ("solver", "direct", "interpolation solver: direct or gradient"),
    ("step_rule", "backtracking", "gradient step rule: fixed, backtracking or exact"),
    ("eta", "1", "gradient step size (initial step for backtracking)"),
    ("iters", "500", "gradient iterations"),
    ("lambda", "1", "observation weight of the variational cost"),
    ("members", "100", "ensemble size"),
    ("lambda_mix", "0.01", "likelihood weight of the fit loss (inf: likelihood only)"),
    ("fit_p", "1", "coarse parameter lattice size per axis"),
    ("fit_iters", "50", "fit iterations"),
    ("lr", "0.01", "fit initial learning rate"),
    ("fit_active", "all", "fitted components, comma separated, or all"),
    ("fit_init", "1,0,0,1,0.5,0,0,1", "initial kappa,m1,m2,gamma,beta,v1,v2,tau"),
    ("estimate", "", "estimate raster for score"),
    ("test_range", "", "scored frame range a..b (all frames when empty)"),
    ("oracle_cap", "4096", "largest instance accepted by oracle-check"),
    ("corrupt", "none", "oracle-check negative control: none or asymmetry"),
    ("seed", "0", "base seed"),
    ("out", "out", "output directory"),
];

/// Keys that do not enter the configuration hash.
const UNHASHED: &[&str] = &["seed", "out"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThetaSource {
    Preset,
    Uniform([f64; 8]),
    Dir,
    Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsSource {
    Tracks,
    Mask,
    File,
    Full,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Direct,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRuleKind {
    Fixed,
    Backtracking,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    None,
    Asymmetry,
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub raw: BTreeMap<String, String>,
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    pub steps: usize,
    pub scheme: Scheme,
    pub alpha: u32,
    pub theta: ThetaSource,
    pub theta_dir: Option<PathBuf>,
    pub noise: NoiseModel,
    pub p0: P0Mode,
    pub truth: Option<PathBuf>,
    pub background: Option<PathBuf>,
    pub obs: ObsSource,
    pub obs_path: Option<PathBuf>,
    pub obs_noise: f64,
    pub track_width: f64,
    pub track_spacing: f64,
    pub track_angle: f64,
    pub track_phase: f64,
    pub solver: Solver,
    pub step_rule: StepRuleKind,
    pub eta: f64,
    pub iters: usize,
    pub lambda: f64,
    pub members: usize,
    pub lambda_mix: f64,
    pub fit_p: usize,
    pub fit_iters: usize,
    pub lr: f64,
    pub fit_active: [bool; 8],
    pub fit_init: [f64; 8],
    pub estimate: Option<PathBuf>,
    pub test_range: Option<(usize, usize)>,
    pub oracle_cap: usize,
    pub corrupt: Corruption,
    pub seed: u64,
    pub out: PathBuf,
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str, errors: &mut Vec<String>) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if is_known(k.trim()) => {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
            Some((k, _)) => errors.push(format!("line {}: unknown key '{}'", n + 1, k.trim())),
            None => errors.push(format!("line {}: expected 'key = value'", n + 1)),
        }
    }
    map
}

/// Parse `--key value` and `--key=value` pairs; dashes in keys map to underscores.
pub fn parse_overrides(args: &[String], errors: &mut Vec<String>) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            errors.push(format!("unexpected argument '{arg}'"));
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.replace('-', "_"), Some(v.to_string())),
            None => (flag.replace('-', "_"), it.next().cloned()),
        };
        if !is_known(&key) {
            errors.push(format!("unknown flag '--{}'", key.replace('_', "-")));
            continue;
        }
        match value {
            Some(v) => {
                map.insert(key, v);
            }
            None => errors.push(format!("flag '--{}' needs a value", key.replace('_', "-"))),
        }
    }
    map
}

struct Reader<'a> {
    raw: &'a BTreeMap<String, String>,
    errors: Vec<String>,
}

impl<'a> Reader<'a> {
    fn text(&self, key: &str) -> &'a str {
        &self.raw[key]
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.text(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, fallback: T) -> T {
        match self.text(key).parse() {
            Ok(v) => v,
            Err(_) => {
                self.errors.push(format!("{key}: cannot parse '{}'", self.text(key)));
                fallback
            }
        }
    }

    fn positive(&mut self, key: &str) -> f64 {
        let v: f64 = self.parse(key, 1.0);
        if !(v > 0.0 && v.is_finite()) {
            self.errors.push(format!("{key}: must be positive and finite, got {v}"));
        }
        v
    }

    fn at_least(&mut self, key: &str, min: usize) -> usize {
        let v: usize = self.parse(key, min);
        if v < min {
            self.errors.push(format!("{key}: must be at least {min}, got {v}"));
        }
        v
    }

    fn choice<T: Copy>(&mut self, key: &str, options: &[(&str, T)]) -> T {
        let v = self.text(key).to_ascii_lowercase();
        match options.iter().find(|(name, _)| *name == v) {
            Some((_, t)) => *t,
            None => {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                self.errors.push(format!("{key}: '{v}' is not one of {}", names.join(", ")));
                options[0].1
            }
        }
    }

    fn list8(&mut self, key: &str) -> [f64; 8] {
        let parts: Vec<Option<f64>> = self.text(key).split(',').map(|s| s.trim().parse().ok()).collect();
        match <[Option<f64>; 8]>::try_from(parts) {
            Ok(v) if v.iter().all(Option::is_some) => v.map(|x| x.unwrap()),
            _ => {
                self.errors.push(format!("{key}: expected 8 comma-separated numbers"));
                [1.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0, 1.0]
            }
        }
    }
}

impl RunConfig {
    /// Merge defaults, the optional file and the overrides, then validate,
    /// reporting every violation at once.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut errors = Vec::new();
        let mut raw: BTreeMap<String, String> = KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            raw.extend(parse_text(&text, &mut errors));
        }
        raw.extend(parse_overrides(overrides, &mut errors));
        let cfg = Self::from_raw(raw, &mut errors);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(errors.join("\n")))
        }
    }

    fn from_raw(raw: BTreeMap<String, String>, errors: &mut Vec<String>) -> Self {
        let mut r = Reader { raw: &raw, errors: Vec::new() };
        let nx = r.at_least("nx", 3);
        let ny = r.at_least("ny", 3);
        let (dx, dy, dt) = (r.positive("dx"), r.positive("dy"), r.positive("dt"));
        let steps = r.at_least("steps", 1);
        let scheme = r.parse("scheme", Scheme::Ufdm1);
        let alpha: u32 = r.parse("alpha", 2);
        if alpha == 0 || !alpha.is_multiple_of(2) {
            r.errors.push(format!("alpha: must be a positive even integer, got {alpha}"));
        }
        let uniform = COMPONENTS.map(|c| r.parse(c, 0.0));
        let theta = r.choice(
            "theta",
            &[("preset", ThetaSource::Preset), ("uniform", ThetaSource::Uniform(uniform)), ("dir", ThetaSource::Dir), ("init", ThetaSource::Init)],
        );
        let theta_dir = r.path("theta_dir");
        if theta == ThetaSource::Dir && theta_dir.is_none() {
            r.errors.push("theta_dir: required when theta = dir".into());
        }
        let noise = match r.choice("noise", &[("white", false), ("colored", true)]) {
            false => NoiseModel::White,
            true => {
                let kappa_s = r.positive("noise_kappa");
                let alpha_s: u32 = r.parse("noise_alpha", 2);
                if alpha_s == 0 || !alpha_s.is_multiple_of(2) {
                    r.errors.push(format!("noise_alpha: must be a positive even integer, got {alpha_s}"));
                }
                NoiseModel::Colored { kappa_s, alpha_s }
            }
        };
        let n_stab = r.at_least("p0_stab", 1);
        let p0 = r.choice("p0", &[("recursion", P0Mode::Recursion { n_stab }), ("innovation", P0Mode::Innovation)]);
        let obs = r.choice(
            "obs",
            &[("tracks", ObsSource::Tracks), ("mask", ObsSource::Mask), ("file", ObsSource::File), ("full", ObsSource::Full), ("none", ObsSource::None)],
        );
        let obs_path = r.path("obs_path");
        if matches!(obs, ObsSource::Mask | ObsSource::File) && obs_path.is_none() {
            r.errors.push("obs_path: required when obs = mask or file".into());
        }
        let obs_noise: f64 = r.parse("obs_noise", 0.0);
        if !(obs_noise >= 0.0 && obs_noise.is_finite()) {
            r.errors.push(format!("obs_noise: must be non-negative, got {obs_noise}"));
        }
        let track_width = r.positive("track_width");
        let track_spacing = r.positive("track_spacing");
        let track_angle: f64 = r.parse("track_angle", 0.0);
        let track_phase: f64 = r.parse("track_phase", 0.0);
        let solver = r.choice("solver", &[("direct", Solver::Direct), ("gradient", Solver::Gradient)]);
        let step_rule = r.choice(
            "step_rule",
            &[("backtracking", StepRuleKind::Backtracking), ("fixed", StepRuleKind::Fixed), ("exact", StepRuleKind::Exact)],
        );
        let eta = r.positive("eta");
        let iters: usize = r.parse("iters", 0);
        let lambda = r.positive("lambda");
        let members = r.at_least("members", 2);
        let lambda_mix: f64 = r.parse("lambda_mix", 0.0);
        if !(lambda_mix >= 0.0) {
            r.errors.push(format!("lambda_mix: must be non-negative, got {lambda_mix}"));
        }
        let fit_p = r.at_least("fit_p", 1);
        let fit_iters: usize = r.parse("fit_iters", 0);
        let lr = r.positive("lr");
        let fit_active = match r.text("fit_active").trim() {
            "all" => [true; 8],
            list => {
                let mut active = [false; 8];
                for name in list.split(',').map(str::trim) {
                    match COMPONENTS.iter().position(|c| *c == name) {
                        Some(i) => active[i] = true,
                        None => r.errors.push(format!("fit_active: unknown component '{name}'")),
                    }
                }
                active
            }
        };
        let fit_init = r.list8("fit_init");
        let estimate = r.path("estimate");
        let test_range = match r.text("test_range") {
            "" => None,
            s => match s.split_once("..").map(|(a, b)| (a.trim().parse::<usize>(), b.trim().parse::<usize>())) {
                Some((Ok(a), Ok(b))) if a < b => Some((a, b)),
                _ => {
                    r.errors.push(format!("test_range: expected 'a..b' with a < b, got '{s}'"));
                    None
                }
            },
        };
        let oracle_cap = r.at_least("oracle_cap", 1);
        let corrupt = r.choice("corrupt", &[("none", Corruption::None), ("asymmetry", Corruption::Asymmetry)]);
        let seed: u64 = r.parse("seed", 0);
        let out = PathBuf::from(r.text("out"));
        let truth = r.path("truth");
        let background = r.path("background");
        errors.append(&mut r.errors);
        RunConfig {
            nx,
            ny,
            dx,
            dy,
            dt,
            steps,
            scheme,
            alpha,
            theta,
            theta_dir,
            noise,
            p0,
            truth,
            background,
            obs,
            obs_path,
            obs_noise,
            track_width,
            track_spacing,
            track_angle,
            track_phase,
            solver,
            step_rule,
            eta,
            iters,
            lambda,
            members,
            lambda_mix,
            fit_p,
            fit_iters,
            lr,
            fit_active,
            fit_init,
            estimate,
            test_range,
            oracle_cap,
            corrupt,
            seed,
            out,
            raw,
        }
    }

    /// SHA-256 over the resolved keys, excluding the seed and output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.raw.iter().filter(|(k, _)| !UNHASHED.contains(&k.as_str())) {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        format!("{:x}", h.finalize())
    }

    /// The resolved configuration in the input format.
    pub fn to_text(&self) -> String {
        self.raw.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Key reference for `--help`.
pub fn key_help() -> String {
    let mut s = String::from("Config keys (file `key = value`, or `--key value` on the command line):\n");
    for (k, d, doc) in KEYS {
        let default = if d.is_empty() { String::new() } else { format!(" [default: {d}]") };
        s.push_str(&format!("  {k:<14} {doc}{default}\n"));
    }
    s
}
