//! Multi-run studies: the theorem sweep and the consensus-strategy comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Method, TrainConfig};
use super::metrics::RunSummary;
use super::train::{build_suite, mix_seed, run_on_suite};
use crate::error::{DcrlError, Result};
use crate::oracle::{check_theorem, TheoremReport, TheoremThresholds};
use crate::policy::{Answer, QuestionId};
use crate::taskgen::{sample_spec, SuiteConfig};
use crate::unlearning::UnlearnConfig;

const THEOREM_STREAM: u64 = 0x0074_686d;

/// Candidates drawn per accepted scenario before the sweep gives up.
const MAX_DRAWS_PER_SCENARIO: usize = 20;

/// One JSONL row of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremRow {
    pub question_id: QuestionId,
    pub true_answer: Answer,
    pub spurious_answer: Option<Answer>,
    pub gap: Option<f64>,
    pub r_true: f64,
    pub r_sp: Option<f64>,
    pub score_true: f64,
    pub score_spurious: Option<f64>,
    pub mv_pick: Option<Answer>,
    pub dc_pick_exact: Option<Answer>,
    pub dc_pick_monte_carlo: Option<Answer>,
    pub conclusion_holds: bool,
    pub monte_carlo_correct: bool,
}

impl From<&TheoremReport> for TheoremRow {
    fn from(r: &TheoremReport) -> Self {
        Self {
            question_id: r.question_id,
            true_answer: r.true_answer.clone(),
            spurious_answer: r.spurious_answer.clone(),
            gap: r.assumptions.gap,
            r_true: r.assumptions.r_true,
            r_sp: r.assumptions.r_sp,
            score_true: r.score_true,
            score_spurious: r.score_spurious,
            mv_pick: r.mv_pick.clone(),
            dc_pick_exact: r.dc_pick_exact.clone(),
            dc_pick_monte_carlo: r.dc_pick_monte_carlo.clone(),
            conclusion_holds: r.conclusion_holds(),
            monte_carlo_correct: r.dc_pick_monte_carlo.as_ref() == Some(&r.true_answer),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremSweep {
    pub reports: Vec<TheoremReport>,
    /// Candidates dropped because calibration missed the assumptions.
    pub rejected: usize,
}

impl TheoremSweep {
    fn rate(&self, f: impl Fn(&TheoremReport) -> bool) -> f64 {
        if self.reports.is_empty() {
            return 0.0;
        }
        self.reports.iter().filter(|r| f(r)).count() as f64 / self.reports.len() as f64
    }

    /// Majority vote picks the spurious answer and the exact election the true one.
    pub fn closed_form_rate(&self) -> f64 {
        self.rate(TheoremReport::conclusion_holds)
    }

    pub fn monte_carlo_rate(&self) -> f64 {
        self.rate(|r| r.dc_pick_monte_carlo.as_ref() == Some(&r.true_answer))
    }

    pub fn rows(&self) -> Vec<TheoremRow> {
        self.reports.iter().map(TheoremRow::from).collect()
    }
}

/// Draws spurious scenarios from `suite` until `n` of them satisfy both
/// assumptions at `thresholds`, checking each in parallel. Candidate `i`
/// uses its own RNG stream, so the result does not depend on thread count.
pub fn theorem_sweep(
    n: usize,
    seed: u64,
    suite: &SuiteConfig,
    unlearn: &UnlearnConfig,
    thresholds: &TheoremThresholds,
) -> Result<TheoremSweep> {
    suite.validate()?;
    unlearn.validate()?;
    let mut reports = Vec::with_capacity(n);
    let mut rejected = 0;
    let mut next = 0usize;
    while reports.len() < n {
        if next >= n.max(1) * MAX_DRAWS_PER_SCENARIO {
            return Err(DcrlError::InvalidConfig(format!(
                "only {} of {n} scenarios met the assumptions after {next} draws",
                reports.len()
            )));
        }
        let want = n - reports.len();
        let batch: Vec<TheoremReport> = (next..next + want)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, THEOREM_STREAM, i as u64]));
                let spec = sample_spec(suite, i as QuestionId, true, &mut rng)?;
                check_theorem(&spec, unlearn, thresholds)
            })
            .collect::<Result<_>>()?;
        next += want;
        for r in batch {
            if r.assumptions_hold() {
                reports.push(r);
            } else {
                rejected += 1;
            }
        }
    }
    Ok(TheoremSweep { reports, rejected })
}

/// Grid of scenario families for the theorem sweep. Each cell fixes a
/// mode-mass range and a gap range; everything else comes from `suite`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoremGrid {
    pub suite: SuiteConfig,
    pub unlearn: UnlearnConfig,
    pub thresholds: TheoremThresholds,
    pub mode_cells: Vec<[f64; 2]>,
    pub gap_cells: Vec<[f64; 2]>,
    pub per_cell: usize,
    pub seed: u64,
}

impl Default for TheoremGrid {
    fn default() -> Self {
        Self {
            suite: SuiteConfig::default(),
            unlearn: UnlearnConfig::default(),
            thresholds: TheoremThresholds::default(),
            mode_cells: vec![[0.5, 0.6], [0.6, 0.75]],
            gap_cells: vec![[2.0, 2.5], [2.5, 3.0], [3.0, 4.0]],
            per_cell: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub mode_mass: [f64; 2],
    pub gap: [f64; 2],
    #[serde(flatten)]
    pub row: TheoremRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub rejected: usize,
    pub closed_form_rate: f64,
    pub monte_carlo_rate: f64,
}

impl TheoremGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        let grid: Self = serde_json::from_str(text)?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode_cells.is_empty() || self.gap_cells.is_empty() || self.per_cell == 0 {
            return Err(DcrlError::InvalidConfig(
                "theorem grid needs cells and a positive per_cell".into(),
            ));
        }
        for m in &self.mode_cells {
            for g in &self.gap_cells {
                self.cell(*m, *g).validate()?;
            }
        }
        self.unlearn.validate()
    }

    fn cell(&self, mode: [f64; 2], gap: [f64; 2]) -> SuiteConfig {
        SuiteConfig {
            mode_mass: mode,
            spurious_gap: gap,
            ..self.suite.clone()
        }
    }

    pub fn run(&self) -> Result<GridReport> {
        self.validate()?;
        let mut rows = Vec::new();
        let mut rejected = 0;
        let (mut cf, mut mc) = (0usize, 0usize);
        for (i, &m) in self.mode_cells.iter().enumerate() {
            for (j, &g) in self.gap_cells.iter().enumerate() {
                let seed = mix_seed(&[self.seed, i as u64, j as u64]);
                let sweep = theorem_sweep(self.per_cell, seed, &self.cell(m, g), &self.unlearn, &self.thresholds)?;
                rejected += sweep.rejected;
                for row in sweep.rows() {
                    cf += usize::from(row.conclusion_holds);
                    mc += usize::from(row.monte_carlo_correct);
                    rows.push(GridRow {
                        mode_mass: m,
                        gap: g,
                        row,
                    });
                }
            }
        }
        let n = rows.len().max(1) as f64;
        Ok(GridReport {
            rows,
            rejected,
            closed_form_rate: cf as f64 / n,
            monte_carlo_rate: mc as f64 / n,
        })
    }
}

/// Runs every method on the same suite for each seed. The suite and the
/// rollout streams both follow the seed, so runs for one seed differ only
/// in the consensus strategy.
pub fn compare_methods(cfg: &TrainConfig, seeds: &[u64], methods: &[Method]) -> Result<Vec<RunSummary>> {
    let mut out = Vec::with_capacity(seeds.len() * methods.len());
    for &seed in seeds {
        let base = TrainConfig { seed, ..cfg.clone() };
        let suite = build_suite(&base)?;
        for &method in methods {
            let run = TrainConfig { method, ..base.clone() };
            out.push(run_on_suite(&run, &suite)?.summary);
        }
    }
    Ok(out)
}
