//! TOML experiment configuration. Every section and key is optional;
//! command-line flags override what the file sets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anneal::AnnealConfig;
use crate::error::{Error, Result};
use crate::experiments::{PipelineConfig, DEFAULT_PLATEAU_DELTA};
use crate::model::DEFAULT_DT;

/// Evenly spaced grid `start, start + step, …` up to `stop` inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Range {
    pub fn expand(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0)
            || !(self.stop >= self.start)
            || !self.start.is_finite()
            || !self.stop.is_finite()
        {
            return Err(Error::domain(format!(
                "range start {} stop {} step {} is empty or invalid",
                self.start, self.stop, self.step
            )));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        if n > 1_000_000 {
            return Err(Error::domain("range has more than a million points"));
        }
        // Rounded to 12 digits so that 1.0 + 3·0.05 prints as 1.15.
        Ok((0..=n)
            .map(|k| ((self.start + k as f64 * self.step) * 1e12).round() / 1e12)
            .collect())
    }
}

/// Either an explicit list or a range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Range(Range),
}

impl Grid {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            Grid::List(v) => Ok(v.clone()),
            Grid::Range(r) => r.expand(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub w: Vec<f64>,
    pub tau: Grid,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            w: vec![0.0, 0.1, 0.25, 0.5],
            tau: Grid::Range(Range {
                start: 0.5,
                stop: 4.0,
                step: 0.1,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimesSection {
    pub delta: f64,
}

impl Default for RegimesSection {
    fn default() -> Self {
        RegimesSection {
            delta: DEFAULT_PLATEAU_DELTA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub w: Vec<f64>,
    pub tau: Grid,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            w: vec![0.0, 0.1, 0.2],
            tau: Grid::Range(Range {
                start: 10.0,
                stop: 100.0,
                step: 10.0,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramSection {
    pub w: f64,
    pub tau: Grid,
    pub samples: usize,
    pub bins: usize,
}

impl Default for HistogramSection {
    fn default() -> Self {
        HistogramSection {
            w: 0.0,
            tau: Grid::List(vec![0.5, 1.0, 2.0, 3.0]),
            samples: 10_000,
            bins: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrapolateSection {
    pub w: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub degree: usize,
    pub bootstrap: usize,
}

impl Default for ExtrapolateSection {
    fn default() -> Self {
        ExtrapolateSection {
            w: 0.25,
            tau_min: 3.0,
            tau_max: f64::INFINITY,
            degree: 3,
            bootstrap: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dt: f64,
    pub pipeline: PipelineConfig,
    pub anneal: AnnealConfig,
    pub sweep: SweepSection,
    pub regimes: RegimesSection,
    pub baseline: BaselineSection,
    pub histogram: HistogramSection,
    pub extrapolate: ExtrapolateSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dt: DEFAULT_DT,
            pipeline: PipelineConfig::default(),
            anneal: AnnealConfig::default(),
            sweep: SweepSection::default(),
            regimes: RegimesSection::default(),
            baseline: BaselineSection::default(),
            histogram: HistogramSection::default(),
            extrapolate: ExtrapolateSection::default(),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before
        .rsplit('\n')
        .next()
        .map(|l| l.chars().count())
        .unwrap_or(0)
        + 1;
    (line, col)
}

impl ExperimentConfig {
    /// Parses and validates a config document. The top-level `seed` and `dt`
    /// are copied into the pipeline and annealer sections.
    pub fn from_toml(text: &str, source_name: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    format!("line {line}, column {col}")
                }
                None => "document".into(),
            };
            Error::parse(source_name, location, e.message().to_string())
        })?;
        cfg.apply_globals(None, None);
        cfg.validate()
            .map_err(|e| Error::parse(source_name, "document", e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Overrides from the command line, then propagates the global values.
    pub fn apply_globals(&mut self, seed: Option<u64>, dt: Option<f64>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(d) = dt {
            self.dt = d;
        }
        self.pipeline.seed = self.seed;
        self.pipeline.dt = self.dt;
        self.anneal.seed = self.seed;
        self.anneal.dt = self.dt;
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.anneal.validate()?;
        self.sweep.tau.values()?;
        self.baseline.tau.values()?;
        self.histogram.tau.values()?;
        if !(self.regimes.delta > 0.0) {
            return Err(Error::domain("regimes.delta must be > 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("", "mem").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn globals_reach_every_section() {
        let cfg =
            ExperimentConfig::from_toml("seed = 7\ndt = 0.01\n[anneal]\nsweeps = 10\n", "mem")
                .unwrap();
        assert_eq!(cfg.pipeline.seed, 7);
        assert_eq!(cfg.anneal.dt, 0.01);
        assert_eq!(cfg.anneal.sweeps, 10);
    }

    #[test]
    fn grids_accept_lists_and_ranges() {
        let cfg = ExperimentConfig::from_toml(
            "[sweep]\nw = [0.25]\ntau = { start = 1.0, stop = 1.2, step = 0.05 }\n[histogram]\ntau = [0.5]\n",
            "mem",
        )
        .unwrap();
        assert_eq!(
            cfg.sweep.tau.values().unwrap(),
            vec![1.0, 1.05, 1.1, 1.15, 1.2]
        );
        assert_eq!(cfg.histogram.tau.values().unwrap(), vec![0.5]);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        match ExperimentConfig::from_toml("seed = 1\n[anneal]\nsweepz = 3\n", "c.toml") {
            Err(Error::Parse {
                location, message, ..
            }) => {
                assert!(location.starts_with("line 3"), "{location}");
                assert!(message.contains("sweepz"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("dt = -1.0\n", "c").is_err());
        assert!(ExperimentConfig::from_toml(
            "[sweep]\ntau = { start = 2.0, stop = 1.0, step = 0.1 }\n",
            "c"
        )
        .is_err());
    }
}
