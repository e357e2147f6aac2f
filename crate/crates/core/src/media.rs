//! One-periodic laminar heterogeneity `f(u)` and the explicit homogenized
//! pinning coefficients derived from it.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("invalid profile parameter: {0}")]
    InvalidParameter(String),
    #[error("tabulated profile needs at least 3 samples per period, got {0}")]
    TooFewSamples(usize),
    #[error("failed to read profile table {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed profile table, line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Closed-form or sampled description of one period of `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProfileKind {
    /// `offset + amplitude * sin(2 pi (u + phase))`
    Sine {
        amplitude: f64,
        offset: f64,
        phase: f64,
    },
    /// Truncated Fourier sawtooth `sum_k sin(2 pi k (u + phase)) / k`,
    /// rescaled so that its peak equals `amplitude`.
    SawtoothSmooth {
        amplitude: f64,
        offset: f64,
        phase: f64,
        harmonics: usize,
    },
    /// Uniform samples `f(k / n)`, `k = 0..n`, linearly interpolated.
    Tabulated { samples: Vec<f64> },
}

/// The heterogeneity `f` together with its cached statistics.
///
/// Immutable once built, so it can be shared freely between workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicProfile {
    kind: ProfileKind,
    min_f: f64,
    max_f: f64,
    mean_f: f64,
    /// Sawtooth: reciprocal of the raw series peak. Unused otherwise.
    scale: f64,
    /// Tabulated: running integral at the sample nodes, `cumulative[n] = mean`.
    cumulative: Vec<f64>,
}

impl PeriodicProfile {
    pub fn sine(amplitude: f64, offset: f64, phase: f64) -> Self {
        let a = amplitude.abs();
        Self {
            kind: ProfileKind::Sine {
                amplitude,
                offset,
                phase,
            },
            min_f: offset - a,
            max_f: offset + a,
            mean_f: offset,
            scale: 1.0,
            cumulative: Vec::new(),
        }
    }

    /// `f(u) = sin(2 pi u)`.
    pub fn unit_sine() -> Self {
        Self::sine(1.0, 0.0, 0.0)
    }

    pub fn constant(c: f64) -> Self {
        Self::sine(0.0, c, 0.0)
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn sawtooth_smooth(
        amplitude: f64,
        offset: f64,
        phase: f64,
        harmonics: usize,
    ) -> Result<Self, MediaError> {
        if harmonics == 0 {
            return Err(MediaError::InvalidParameter(
                "sawtooth needs at least one harmonic".into(),
            ));
        }
        let peak = sawtooth_raw_peak(harmonics);
        let a = amplitude.abs();
        Ok(Self {
            kind: ProfileKind::SawtoothSmooth {
                amplitude,
                offset,
                phase,
                harmonics,
            },
            // The raw series is odd, so its trough is minus its peak.
            min_f: offset - a,
            max_f: offset + a,
            mean_f: offset,
            scale: 1.0 / peak,
            cumulative: Vec::new(),
        })
    }

    pub fn tabulated(samples: Vec<f64>) -> Result<Self, MediaError> {
        let n = samples.len();
        if n < 3 {
            return Err(MediaError::TooFewSamples(n));
        }
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(MediaError::InvalidParameter(format!(
                "non-finite sample {bad}"
            )));
        }
        let h = 1.0 / n as f64;
        let mut cumulative = Vec::with_capacity(n + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for k in 0..n {
            acc += 0.5 * h * (samples[k] + samples[(k + 1) % n]);
            cumulative.push(acc);
        }
        let mean_f = acc;
        let (min_f, max_f) = refined_extrema(&samples);
        Ok(Self {
            kind: ProfileKind::Tabulated { samples },
            min_f,
            max_f,
            mean_f,
            scale: 1.0,
            cumulative,
        })
    }

    /// Samples `self` at `n` uniform points of one period.
    pub fn tabulate(&self, n: usize) -> Result<Self, MediaError> {
        let samples = (0..n).map(|k| self.eval(k as f64 / n as f64)).collect();
        Self::tabulated(samples)
    }

    /// Reads a two-column `(u, f(u))` CSV covering one period with uniform
    /// spacing. A trailing row at `u = 1` duplicating `u = 0` is dropped.
    pub fn from_csv(path: &Path) -> Result<Self, MediaError> {
        let text = std::fs::read_to_string(path).map_err(|source| MediaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut rows: Vec<(f64, f64)> = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
                return Err(MediaError::Parse {
                    line: line_no + 1,
                    msg: "expected two columns".into(),
                });
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(u), Ok(v)) => rows.push((u, v)),
                // header row
                _ if rows.is_empty() => continue,
                _ => {
                    return Err(MediaError::Parse {
                        line: line_no + 1,
                        msg: format!("cannot parse `{line}`"),
                    })
                }
            }
        }
        if let Some(&(u_last, _)) = rows.last() {
            if rows.len() > 1 && (u_last - rows[0].0 - 1.0).abs() < 1e-9 {
                rows.pop();
            }
        }
        let n = rows.len();
        if n < 3 {
            return Err(MediaError::TooFewSamples(n));
        }
        let h = 1.0 / n as f64;
        for (k, &(u, _)) in rows.iter().enumerate() {
            if (u - rows[0].0 - k as f64 * h).abs() > 1e-6 {
                return Err(MediaError::Parse {
                    line: k + 1,
                    msg: format!("samples must be uniform over one period, got u = {u}"),
                });
            }
        }
        Self::tabulated(rows.into_iter().map(|(_, v)| v).collect())
    }

    pub fn kind(&self) -> &ProfileKind {
        &self.kind
    }

    pub fn min_f(&self) -> f64 {
        self.min_f
    }

    pub fn max_f(&self) -> f64 {
        self.max_f
    }

    pub fn mean_f(&self) -> f64 {
        self.mean_f
    }

    /// `max |f|`
    pub fn sup_norm(&self) -> f64 {
        self.min_f.abs().max(self.max_f.abs())
    }

    pub fn samples_per_period(&self) -> Option<usize> {
        match &self.kind {
            ProfileKind::Tabulated { samples } => Some(samples.len()),
            _ => None,
        }
    }

    pub fn eval(&self, u: f64) -> f64 {
        match &self.kind {
            ProfileKind::Sine {
                amplitude,
                offset,
                phase,
            } => offset + amplitude * (2.0 * PI * (u + phase)).sin(),
            ProfileKind::SawtoothSmooth {
                amplitude,
                offset,
                phase,
                harmonics,
            } => offset + amplitude * self.scale * sawtooth_raw(u + phase, *harmonics),
            ProfileKind::Tabulated { samples } => {
                let n = samples.len();
                let (k, s) = locate(u, n);
                samples[k] + s * (samples[(k + 1) % n] - samples[k])
            }
        }
    }

    /// Derivative of `f`; one-sided slope of the interpolant for tabulated
    /// profiles.
    pub fn derivative(&self, u: f64) -> f64 {
        match &self.kind {
            ProfileKind::Sine {
                amplitude, phase, ..
            } => 2.0 * PI * amplitude * (2.0 * PI * (u + phase)).cos(),
            ProfileKind::SawtoothSmooth {
                amplitude,
                phase,
                harmonics,
                ..
            } => amplitude * self.scale * sawtooth_raw_derivative(u + phase, *harmonics),
            ProfileKind::Tabulated { samples } => {
                let n = samples.len();
                let (k, _) = locate(u, n);
                (samples[(k + 1) % n] - samples[k]) * n as f64
            }
        }
    }

    /// `F(u) = \int_0^u f`, satisfying `F(u + 1) = F(u) + mean_f`.
    pub fn antiderivative(&self, u: f64) -> f64 {
        match &self.kind {
            ProfileKind::Sine {
                amplitude,
                offset,
                phase,
            } => {
                offset * u
                    + amplitude * ((2.0 * PI * phase).cos() - (2.0 * PI * (u + phase)).cos())
                        / (2.0 * PI)
            }
            ProfileKind::SawtoothSmooth {
                amplitude,
                offset,
                phase,
                harmonics,
            } => {
                let mut acc = 0.0;
                for k in 1..=*harmonics {
                    let kf = k as f64;
                    acc += ((2.0 * PI * kf * phase).cos() - (2.0 * PI * kf * (u + phase)).cos())
                        / (2.0 * PI * kf * kf);
                }
                offset * u + amplitude * self.scale * acc
            }
            ProfileKind::Tabulated { samples } => {
                let n = samples.len();
                let periods = u.floor();
                let (k, s) = locate(u, n);
                let h = 1.0 / n as f64;
                let f0 = samples[k];
                let f1 = samples[(k + 1) % n];
                periods * self.mean_f + self.cumulative[k] + h * (f0 * s + 0.5 * (f1 - f0) * s * s)
            }
        }
    }

    /// The same profile shifted to zero mean.
    pub fn normalize(&self) -> Self {
        let shift = self.mean_f;
        match &self.kind {
            ProfileKind::Sine {
                amplitude, phase, ..
            } => Self::sine(*amplitude, 0.0, *phase),
            ProfileKind::SawtoothSmooth {
                amplitude,
                phase,
                harmonics,
                ..
            } => Self {
                kind: ProfileKind::SawtoothSmooth {
                    amplitude: *amplitude,
                    offset: 0.0,
                    phase: *phase,
                    harmonics: *harmonics,
                },
                min_f: self.min_f - shift,
                max_f: self.max_f - shift,
                mean_f: 0.0,
                scale: self.scale,
                cumulative: Vec::new(),
            },
            ProfileKind::Tabulated { samples } => {
                let shifted = samples.iter().map(|v| v - shift).collect();
                Self::tabulated(shifted).expect("shifted samples stay valid")
            }
        }
    }
}

impl fmt::Display for PeriodicProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ProfileKind::Sine {
                amplitude,
                offset,
                phase,
            } => write!(f, "{offset}+{amplitude}*sin(2pi(u+{phase}))"),
            ProfileKind::SawtoothSmooth {
                amplitude,
                offset,
                phase,
                harmonics,
            } => write!(f, "{offset}+{amplitude}*saw{harmonics}(u+{phase})"),
            ProfileKind::Tabulated { samples } => write!(f, "tabulated[{}]", samples.len()),
        }
    }
}

/// `(min f, max f, <f>)`
pub fn profile_stats(profile: &PeriodicProfile) -> (f64, f64, f64) {
    (profile.min_f, profile.max_f, profile.mean_f)
}

pub fn normalize(profile: &PeriodicProfile) -> PeriodicProfile {
    profile.normalize()
}

pub fn antiderivative(profile: &PeriodicProfile, u: f64) -> f64 {
    profile.antiderivative(u)
}

/// Lower and upper homogenized coefficients at tangential slope `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinnedCoefficients {
    pub l_lower: f64,
    pub l_upper: f64,
    pub slope_p: f64,
}

/// `[min f, max f]` at zero slope, `{<f>}` otherwise. The zero test is exact.
pub fn pinned_coefficients(profile: &PeriodicProfile, p: f64) -> PinnedCoefficients {
    if p == 0.0 {
        PinnedCoefficients {
            l_lower: profile.min_f,
            l_upper: profile.max_f,
            slope_p: p,
        }
    } else {
        PinnedCoefficients {
            l_lower: profile.mean_f,
            l_upper: profile.mean_f,
            slope_p: p,
        }
    }
}

fn locate(u: f64, n: usize) -> (usize, f64) {
    let x = u.rem_euclid(1.0) * n as f64;
    let k = x.floor();
    let s = x - k;
    let k = k as usize;
    if k >= n {
        (0, 0.0)
    } else {
        (k, s)
    }
}

fn sawtooth_raw(u: f64, harmonics: usize) -> f64 {
    (1..=harmonics)
        .map(|k| (2.0 * PI * k as f64 * u).sin() / k as f64)
        .sum()
}

fn sawtooth_raw_derivative(u: f64, harmonics: usize) -> f64 {
    (1..=harmonics)
        .map(|k| 2.0 * PI * (2.0 * PI * k as f64 * u).cos())
        .sum()
}

fn sawtooth_raw_second(u: f64, harmonics: usize) -> f64 {
    (1..=harmonics)
        .map(|k| -4.0 * PI * PI * k as f64 * (2.0 * PI * k as f64 * u).sin())
        .sum()
}

/// Peak of the raw sawtooth series: coarse scan, then Newton on the slope.
fn sawtooth_raw_peak(harmonics: usize) -> f64 {
    let n = 4096;
    let mut best_u = 0.0;
    let mut best = f64::NEG_INFINITY;
    for k in 0..n {
        let u = k as f64 / n as f64;
        let v = sawtooth_raw(u, harmonics);
        if v > best {
            best = v;
            best_u = u;
        }
    }
    let mut u = best_u;
    for _ in 0..50 {
        let d2 = sawtooth_raw_second(u, harmonics);
        if d2 >= 0.0 {
            break;
        }
        let step = sawtooth_raw_derivative(u, harmonics) / d2;
        u -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    sawtooth_raw(u, harmonics).max(best)
}

/// Sample extrema with a parabola through the discrete extremum and its two
/// periodic neighbours.
fn refined_extrema(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    let (mut kmin, mut kmax) = (0, 0);
    for k in 1..n {
        if samples[k] < samples[kmin] {
            kmin = k;
        }
        if samples[k] > samples[kmax] {
            kmax = k;
        }
    }
    let vertex = |k: usize| {
        let a = samples[(k + n - 1) % n];
        let b = samples[k];
        let c = samples[(k + 1) % n];
        let curv = a - 2.0 * b + c;
        (b, curv, c - a)
    };
    let (b, curv, slope) = vertex(kmax);
    let max_f = if curv < 0.0 {
        b - slope * slope / (8.0 * curv)
    } else {
        b
    };
    let (b, curv, slope) = vertex(kmin);
    let min_f = if curv > 0.0 {
        b - slope * slope / (8.0 * curv)
    } else {
        b
    };
    (min_f, max_f)
}
