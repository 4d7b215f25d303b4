//! Experiment configuration: TOML file, flag overrides and cell layout.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lagsid::dynamics::{BasinConfig, Mode, PhysicalParams, SamplingConfig, SystemId, SystemSpec};
use lagsid::identify::FitConfig;
use lagsid::library::CandidateLibrary;
use serde::{Deserialize, Serialize};

/// Everything a run needs. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Systems to run, default `["single_pendulum"]`.
    pub systems: Vec<SystemId>,
    /// Noise levels as fractions of each coordinate's standard deviation,
    /// default `[0.0]`.
    pub noise: Vec<f64>,
    /// One trial per seed; the seed drives initial conditions, forcing,
    /// noise, missing entries and collocation times. Default `0..5`.
    pub seeds: Vec<u64>,
    /// Fraction of measurement entries removed, default 0.
    pub missing: f64,
    /// Output directory, default `runs`.
    pub out: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub params: PhysicalParams,
    pub sampling: SamplingConfig,
    /// Loss weights, optimizer, thresholding and control-point count.
    pub fit: FitConfig,
    pub ablate: AblateConfig,
    pub basin: BasinRun,
    /// Per-system candidate library files replacing the built-in ones.
    /// Terms are matched to the true Lagrangian by name.
    pub libraries: BTreeMap<SystemId, PathBuf>,
    /// Per-system known term of passive systems, by name.
    pub known_terms: BTreeMap<SystemId, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            systems: vec![SystemId::SinglePendulum],
            noise: vec![0.0],
            seeds: (0..5).collect(),
            missing: 0.0,
            out: PathBuf::from("runs"),
            workers: 0,
            params: PhysicalParams::default(),
            sampling: SamplingConfig::default(),
            fit: FitConfig::default(),
            ablate: AblateConfig::default(),
            basin: BasinRun::default(),
            libraries: BTreeMap::new(),
            known_terms: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Missing fraction of group B.
    pub missing: f64,
    /// Time samples per curve file; 0 writes every measurement row.
    pub curve_points: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            missing: 0.05,
            curve_points: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasinRun {
    /// Noise level of the identification run.
    pub noise: f64,
    pub seed: u64,
    pub grid: BasinConfig,
}

impl Default for BasinRun {
    fn default() -> Self {
        Self {
            noise: 0.0,
            seed: 0,
            grid: BasinConfig::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub systems: Option<Vec<SystemId>>,
    pub noise: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub no_reg: bool,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(base) = path.and_then(Path::parent) {
            for lib in cfg.libraries.values_mut() {
                if lib.is_relative() {
                    *lib = base.join(&*lib);
                }
            }
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.systems {
            self.systems = v.clone();
        }
        if let Some(v) = &o.noise {
            self.noise = v.clone();
        }
        if let Some(v) = &o.seeds {
            self.seeds = v.clone();
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        if o.no_reg {
            self.fit.weights.beta = 0.0;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.systems.is_empty() {
            bail!("no systems selected");
        }
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        if self.noise.is_empty() {
            bail!("noise list is empty");
        }
        for &n in self.noise.iter().chain([&self.basin.noise]) {
            if !(n >= 0.0 && n.is_finite()) {
                bail!("noise level must be a non-negative number, got {n}");
            }
        }
        for m in [self.missing, self.ablate.missing] {
            if !(0.0..1.0).contains(&m) {
                bail!("missing fraction must lie in [0, 1), got {m}");
            }
        }
        self.params.validate()?;
        self.fit.weights.validate()?;
        self.basin.grid.validate()?;
        if self.fit.optimizer.max_iter == 0 {
            bail!("optimizer.max_iter must be positive");
        }
        for &id in &self.systems {
            self.system_spec(id)?;
        }
        for id in self.libraries.keys().chain(self.known_terms.keys()) {
            if !self.systems.contains(id) && *id != SystemId::MagneticPendulum {
                eprintln!("warning: settings for `{id}` are unused by the selected systems");
            }
        }
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(())
    }

    /// Benchmark system with any library or known-term override applied.
    pub fn system_spec(&self, id: SystemId) -> Result<SystemSpec> {
        let mut spec = SystemSpec::new(id, self.params.clone())?;
        if let Some(path) = self.libraries.get(&id) {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let lib = CandidateLibrary::from_text(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            spec =
                with_library(spec, lib).with_context(|| format!("library {}", path.display()))?;
        }
        if let Some(name) = self.known_terms.get(&id) {
            spec = with_known_term(spec, name)?;
        }
        Ok(spec)
    }

    pub fn out_dir(&self, sub: &str) -> PathBuf {
        self.out.join(sub)
    }
}

/// Swaps in `lib`, carrying the true coefficients over by term name.
fn with_library(mut spec: SystemSpec, lib: CandidateLibrary) -> Result<SystemSpec> {
    if lib.dof() != spec.dof() {
        bail!(
            "library has {} coordinates, `{}` has {}",
            lib.dof(),
            spec.id,
            spec.dof()
        );
    }
    let mut coeffs = vec![0.0; lib.len()];
    for (term, &c) in spec.library.terms().iter().zip(&spec.true_coeffs) {
        match lib.index_of(term.name()) {
            Some(k) => coeffs[k] = c,
            None if c != 0.0 => bail!("library lacks true term `{}`", term.name()),
            None => {}
        }
    }
    let mode = match spec.mode {
        Mode::Active => Mode::Active,
        Mode::Passive { known } => {
            let name = spec.library.term(known).name();
            let k = lib
                .index_of(name)
                .ok_or_else(|| anyhow!("library lacks the known term `{name}`"))?;
            Mode::Passive { known: k }
        }
    };
    spec.library = lib;
    spec.true_coeffs = coeffs;
    spec.mode = mode;
    Ok(spec)
}

/// Makes `name` the known term, rescaling the truth so its coefficient is 1.
fn with_known_term(mut spec: SystemSpec, name: &str) -> Result<SystemSpec> {
    if spec.id.is_active() {
        bail!(
            "`{}` is driven by a known force and takes no known term",
            spec.id
        );
    }
    let k = spec
        .library
        .index_of(name)
        .ok_or_else(|| anyhow!("`{}` has no term `{name}`", spec.id))?;
    let c = spec.true_coeffs[k];
    if c == 0.0 {
        bail!(
            "known term `{name}` is absent from the true Lagrangian of `{}`",
            spec.id
        );
    }
    for v in &mut spec.true_coeffs {
        *v /= c;
    }
    spec.mode = Mode::Passive { known: k };
    Ok(spec)
}

/// One (system, noise, missing, seed) combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub system: SystemId,
    pub noise: f64,
    pub missing: f64,
    pub seed: u64,
}

impl Cell {
    /// File stem, e.g. `single_pendulum_noise0.01_seed3`.
    pub fn name(&self) -> String {
        let mut s = format!("{}_noise{}", self.system, self.noise);
        if self.missing > 0.0 {
            s.push_str(&format!("_miss{}", self.missing));
        }
        s.push_str(&format!("_seed{}", self.seed));
        s
    }
}

impl ExperimentConfig {
    pub fn cells(&self, missing: f64) -> Vec<Cell> {
        let mut out = Vec::new();
        for &system in &self.systems {
            for &noise in &self.noise {
                for &seed in &self.seeds {
                    out.push(Cell {
                        system,
                        noise,
                        missing,
                        seed,
                    });
                }
            }
        }
        out
    }
}

/// Parses `0,1,2`, `0..5` (exclusive) or a mix.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a
                .trim()
                .parse()
                .with_context(|| format!("bad seed range `{part}`"))?;
            let b: u64 = b
                .trim()
                .parse()
                .with_context(|| format!("bad seed range `{part}`"))?;
            out.extend(a..b);
        } else {
            out.push(part.parse().with_context(|| format!("bad seed `{part}`"))?);
        }
    }
    if out.is_empty() {
        bail!("seed list `{s}` is empty");
    }
    Ok(out)
}

pub fn parse_noise(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<f64>()
                .with_context(|| format!("bad noise level `{p}`"))
        })
        .collect()
}

/// Comma-separated system ids, or `all`.
pub fn parse_systems(s: &str) -> Result<Vec<SystemId>> {
    if s.trim() == "all" {
        return Ok(SystemId::ALL.to_vec());
    }
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<SystemId>().map_err(anyhow::Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3,7").unwrap(), vec![0, 1, 2, 7]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn cell_names() {
        let c = Cell {
            system: SystemId::ChaosPendulum,
            noise: 0.1,
            missing: 0.05,
            seed: 2,
        };
        assert_eq!(c.name(), "chaos_pendulum_noise0.1_miss0.05_seed2");
    }

    #[test]
    fn flags_override_file() {
        let mut cfg: ExperimentConfig =
            toml::from_str("seeds = [9]\nnoise = [0.01]\n[fit.weights]\nbeta = 0.5\n").unwrap();
        assert_eq!(cfg.fit.weights.alpha, 100.0);
        cfg.apply(&Overrides {
            seeds: Some(vec![1, 2]),
            no_reg: true,
            ..Overrides::default()
        });
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.noise, vec![0.01]);
        assert_eq!(cfg.fit.weights.beta, 0.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("sedes = [1]").is_err());
    }

    #[test]
    fn known_term_rescales_truth() {
        let spec = SystemSpec::with_defaults(SystemId::ChaosPendulum).unwrap();
        let name = spec.true_terms()[1].to_string();
        let moved = with_known_term(spec.clone(), &name).unwrap();
        let k = moved.library.index_of(&name).unwrap();
        assert_eq!(moved.mode, Mode::Passive { known: k });
        assert_eq!(moved.true_coeffs[k], 1.0);
        let ratio = spec.true_coeffs[0] / spec.true_coeffs[k];
        assert!((moved.true_coeffs[0] - ratio).abs() < 1e-12);
    }

    #[test]
    fn custom_library_maps_truth_by_name() {
        let spec = SystemSpec::with_defaults(SystemId::SinglePendulum).unwrap();
        let lib = CandidateLibrary::from_text("cos(q1)\nqd1^2\nq1^2\n").unwrap();
        let moved = with_library(spec.clone(), lib).unwrap();
        assert_eq!(moved.true_coeffs[0], spec.true_coeffs[1]);
        assert_eq!(moved.true_coeffs[1], spec.true_coeffs[0]);
        assert_eq!(moved.true_coeffs[2], 0.0);
        let lacking = CandidateLibrary::from_text("qd1^2\nq1^2\n").unwrap();
        assert!(with_library(spec, lacking).is_err());
    }
}
