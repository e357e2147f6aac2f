use std::path::{Path, PathBuf};

use serde::Deserialize;

use pnlab_core::PeriodicProfile;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    EpsSweep,
    PinningTable,
    CellIdentity,
    GammaDemo,
    FacetDemo,
    MonotoneShift,
    ComparisonBatch,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::EpsSweep,
        Self::PinningTable,
        Self::CellIdentity,
        Self::GammaDemo,
        Self::FacetDemo,
        Self::MonotoneShift,
        Self::ComparisonBatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::EpsSweep => "eps-sweep",
            Self::PinningTable => "pinning-table",
            Self::CellIdentity => "cell-identity",
            Self::GammaDemo => "gamma-demo",
            Self::FacetDemo => "facet-demo",
            Self::MonotoneShift => "monotone-shift",
            Self::ComparisonBatch => "comparison-batch",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Self::EpsSweep => "distance between oscillating and homogenized heat flows along an eps ladder",
            Self::PinningTable => "pinning intervals over (profile, p, T) with endpoint and sandwich checks",
            Self::CellIdentity => "cell average flux against <f> under grid doubling",
            Self::GammaDemo => "global energy minimizers approaching the affine limit as eps shrinks",
            Self::FacetDemo => "extremal steady states and contact sets over an amplitude ladder",
            Self::MonotoneShift => "long-time limit of an up-shift run and dynamic slope audits",
            Self::ComparisonBatch => "comparison gaps for randomized ordered data pairs",
        }
    }
}

/// Profile table. `kind` is one of `sine`, `sawtooth`, `zero`, `csv`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    #[serde(default = "ProfileSpec::default_kind")]
    pub kind: String,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default = "ProfileSpec::default_harmonics")]
    pub harmonics: usize,
    pub path: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

impl Default for ProfileSpec {
    fn default() -> Self {
        Self {
            kind: Self::default_kind(),
            amplitude: 1.0,
            offset: 0.0,
            phase: 0.0,
            harmonics: Self::default_harmonics(),
            path: None,
        }
    }
}

impl ProfileSpec {
    fn default_kind() -> String {
        "sine".into()
    }

    fn default_harmonics() -> usize {
        5
    }

    pub fn build(&self, base: &Path) -> Result<PeriodicProfile, ConfigError> {
        self.build_with_amplitude(self.amplitude, base)
    }

    pub fn build_with_amplitude(&self, amplitude: f64, base: &Path) -> Result<PeriodicProfile, ConfigError> {
        match self.kind.as_str() {
            "sine" => Ok(PeriodicProfile::sine(amplitude, self.offset, self.phase)),
            "sawtooth" => PeriodicProfile::sawtooth_smooth(amplitude, self.offset, self.phase, self.harmonics)
                .map_err(|e| ConfigError::Invalid(e.to_string())),
            "zero" => Ok(PeriodicProfile::zero()),
            "csv" => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("csv profile needs `path`".into()))?;
                PeriodicProfile::from_csv(&base.join(path)).map_err(|e| ConfigError::Invalid(e.to_string()))
            }
            other => Err(ConfigError::Invalid(format!("unknown profile kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Facet threshold in units of `hy`.
    #[serde(default = "Tolerances::default_facet")]
    pub facet_hy: f64,
    /// Steady-state rate for extremal relaxations.
    #[serde(default = "Tolerances::default_steady")]
    pub steady: f64,
    /// Audit tolerance for the extremal conditions.
    #[serde(default = "Tolerances::default_audit")]
    pub audit: f64,
    /// Slope audit threshold; `10 (h + dt)` when absent.
    pub rate: Option<f64>,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            facet_hy: Self::default_facet(),
            steady: Self::default_steady(),
            audit: Self::default_audit(),
            rate: None,
        }
    }
}

impl Tolerances {
    fn default_facet() -> f64 {
        10.0
    }
    fn default_steady() -> f64 {
        1e-8
    }
    fn default_audit() -> f64 {
        1e-2
    }
}

/// One experiment. Empty lists fall back to the experiment's defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Relative paths resolve against `PNLAB_OUTPUT_ROOT` when it is set.
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub profile: ProfileSpec,
    /// Extra profiles for table experiments.
    #[serde(default)]
    pub profiles: Vec<ProfileSpec>,
    #[serde(default)]
    pub grid_sizes: Vec<usize>,
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(rename = "T", default)]
    pub t: Vec<f64>,
    #[serde(default)]
    pub p: Vec<f64>,
    #[serde(default)]
    pub amplitudes: Vec<f64>,
    pub t_end: Option<f64>,
    pub pairs: Option<usize>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn fill(list: &mut Vec<f64>, default: &[f64]) {
    if list.is_empty() {
        list.extend_from_slice(default);
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.apply_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Minimal config for `kind` with every default filled in.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut cfg: Self = toml::from_str(&format!("experiment = \"{}\"", kind.name())).expect("static config");
        cfg.apply_defaults();
        cfg
    }

    fn apply_defaults(&mut self) {
        use ExperimentKind::*;
        match self.experiment {
            EpsSweep => {
                fill(&mut self.eps, &[0.2, 0.1, 0.05, 0.025]);
                if self.grid_sizes.is_empty() {
                    self.grid_sizes.push(33);
                }
                self.t_end.get_or_insert(0.5);
            }
            PinningTable => {
                fill(&mut self.t, &[10.0, 50.0, 200.0]);
                fill(&mut self.p, &[0.0, 0.5, 1.3]);
            }
            CellIdentity => {
                fill(&mut self.p, &[0.5, 1.0]);
                fill(&mut self.t, &[2.0, 4.0]);
                if self.grid_sizes.is_empty() {
                    self.grid_sizes.extend([65, 129]);
                }
            }
            GammaDemo => {
                fill(&mut self.eps, &[0.2, 0.1, 0.05, 0.025]);
                if self.grid_sizes.is_empty() {
                    self.grid_sizes.push(65);
                }
            }
            FacetDemo => {
                fill(&mut self.amplitudes, &[0.5, 2.0, 8.0]);
                if self.grid_sizes.is_empty() {
                    self.grid_sizes.push(65);
                }
            }
            MonotoneShift => {
                fill(&mut self.amplitudes, &[8.0]);
                if self.grid_sizes.is_empty() {
                    self.grid_sizes.push(65);
                }
                self.t_end.get_or_insert(8.0);
            }
            ComparisonBatch => {
                if self.grid_sizes.is_empty() {
                    self.grid_sizes.push(65);
                }
                self.pairs.get_or_insert(20);
                self.t_end.get_or_insert(0.1);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.grid_sizes.iter().any(|&n| n < 5) {
            return bad(format!("grid sizes must be at least 5, got {:?}", self.grid_sizes));
        }
        if self.eps.iter().any(|&e| !(e > 0.0)) {
            return bad(format!("eps values must be positive, got {:?}", self.eps));
        }
        if self.t.iter().any(|&t| !(t > 0.0)) {
            return bad(format!("T values must be positive, got {:?}", self.t));
        }
        if self.amplitudes.iter().any(|a| !a.is_finite()) {
            return bad("amplitudes must be finite".into());
        }
        if let Some(t) = self.t_end {
            if !(t > 0.0) {
                return bad(format!("t_end must be positive, got {t}"));
            }
        }
        if self.pairs == Some(0) {
            return bad("pairs must be positive".into());
        }
        if !(self.tolerances.facet_hy > 0.0) || !(self.tolerances.steady > 0.0) || !(self.tolerances.audit > 0.0) {
            return bad("tolerances must be positive".into());
        }
        Ok(())
    }

    /// Profiles for table experiments: `profiles` when given, else `profile`.
    pub fn profile_list(&self) -> Vec<ProfileSpec> {
        if self.profiles.is_empty() {
            vec![self.profile.clone()]
        } else {
            self.profiles.clone()
        }
    }

    pub fn output_path(&self) -> PathBuf {
        let dir = self
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("pnlab-out").join(self.experiment.name()));
        match std::env::var_os("PNLAB_OUTPUT_ROOT") {
            Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
            _ => dir,
        }
    }
}
