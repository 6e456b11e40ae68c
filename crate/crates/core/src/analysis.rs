//! Closed-form scenario weights under vanilla and pooled attention, a
//! sampled check of the inequalities they imply, and the encoder alpha sweep.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SbatModel};
use crate::synthdata::CaptionRecord;
use crate::training::{train, TrainConfig};

/// Normalized exponentials, computed after subtracting the maximum.
pub fn softmax_weights(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|p| (p - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Two scenarios of identical steps: `t1` steps with logit `p_s1`, then
/// `t2` steps with logit `p_s2`; `n` keys survive pooling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoScenarioConfig {
    pub t1: usize,
    pub t2: usize,
    pub p_s1: f64,
    pub p_s2: f64,
    pub n: usize,
}

impl TwoScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t1 == 0 || self.t2 == 0 || self.n < 2 {
            return Err(Error::Config(format!("need t1, t2 >= 1 and n >= 2: {self:?}")));
        }
        if !self.p_s1.is_finite() || !self.p_s2.is_finite() {
            return Err(Error::Config(format!("non-finite logits: {self:?}")));
        }
        Ok(())
    }
}

fn counted_weights(c1: usize, c2: usize, p1: f64, p2: f64) -> (f64, f64) {
    let w = softmax_weights(&[(c1 as f64).ln() + p1, (c2 as f64).ln() + p2]);
    (w[0], w[1])
}

/// Total vanilla attention weight of each scenario.
pub fn scenario_weights(cfg: &TwoScenarioConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    Ok(counted_weights(cfg.t1, cfg.t2, cfg.p_s1, cfg.p_s2))
}

/// Scenario weights after pooling keeps `kept_1` steps of scenario one and
/// `kept_2` of scenario two.
pub fn pooled_weights(cfg: &TwoScenarioConfig, kept_1: usize, kept_2: usize) -> Result<(f64, f64)> {
    cfg.validate()?;
    if kept_1 == 0 || kept_2 == 0 || kept_1 + kept_2 != cfg.n || kept_1 > cfg.t1 || kept_2 > cfg.t2 {
        return Err(Error::Config(format!(
            "cannot keep {kept_1} + {kept_2} of {} + {} steps with n = {}",
            cfg.t1, cfg.t2, cfg.n
        )));
    }
    Ok(counted_weights(kept_1, kept_2, cfg.p_s1, cfg.p_s2))
}

/// Pass and fail counts of one family of checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub passed: usize,
    pub failed: usize,
}

impl Tally {
    fn record(&mut self, ok: bool) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
    }
}

/// Direction of the change from vanilla to pooled weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Change {
    Increase,
    Tie,
    Decrease,
}

/// Differences within this band count as equality.
pub const TIE_TOLERANCE: f64 = 1e-12;

fn change(before: f64, after: f64) -> Change {
    let d = after - before;
    if d.abs() <= TIE_TOLERANCE {
        Change::Tie
    } else if d > 0.0 {
        Change::Increase
    } else {
        Change::Decrease
    }
}

/// A configuration whose outcome contradicted the expectation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub check: &'static str,
    pub config: TwoScenarioConfig,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct InequalityReport {
    pub samples: usize,
    pub seed: u64,
    /// One representative per scenario: scenario one loses weight.
    pub symmetric_s1_decrease: Tally,
    /// One representative per scenario: scenario two gains weight.
    pub symmetric_s2_increase: Tally,
    /// `n - 1 > 3`: strict increase expected.
    pub large_budget_increase: Tally,
    /// `n - 1 = 3`: equality expected.
    pub boundary_tie: Tally,
    /// `n - 1 < 3`: strict decrease expected.
    pub small_budget_decrease: Tally,
    pub witnesses: Vec<Witness>,
}

impl InequalityReport {
    pub fn failures(&self) -> usize {
        [
            self.symmetric_s1_decrease,
            self.symmetric_s2_increase,
            self.large_budget_increase,
            self.boundary_tie,
            self.small_budget_decrease,
        ]
        .iter()
        .map(|t| t.failed)
        .sum()
    }
}

impl fmt::Display for InequalityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples={} seed={}", self.samples, self.seed)?;
        for (name, t) in [
            ("symmetric_s1_decrease", self.symmetric_s1_decrease),
            ("symmetric_s2_increase", self.symmetric_s2_increase),
            ("large_budget_increase", self.large_budget_increase),
            ("boundary_tie", self.boundary_tie),
            ("small_budget_decrease", self.small_budget_decrease),
        ] {
            writeln!(f, "check={name} passed={} failed={}", t.passed, t.failed)?;
        }
        for w in &self.witnesses {
            writeln!(
                f,
                "witness check={} t1={} t2={} p_s1={} p_s2={} n={} before={} after={}",
                w.check, w.config.t1, w.config.t2, w.config.p_s1, w.config.p_s2, w.config.n, w.before, w.after
            )?;
        }
        write!(f, "failures={}", self.failures())
    }
}

/// Samples `samples` configurations for each family and checks:
/// with `p_s1 < p_s2`, `t1 > t2` and one kept step per scenario, scenario
/// two gains and scenario one loses weight; with `t1 = 3 t2`, `p_s1 > p_s2`
/// and `n - 1` steps kept from scenario one, its weight rises iff `n - 1 > 3`
/// and is unchanged at `n - 1 = 3`.
pub fn verify_inequalities(samples: usize, seed: u64) -> Result<InequalityReport> {
    if samples == 0 {
        return Err(Error::Config("samples must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = InequalityReport {
        samples,
        seed,
        ..InequalityReport::default()
    };
    for _ in 0..samples {
        let t2 = rng.gen_range(1..=50);
        let p_s1 = rng.gen_range(-5.0..5.0);
        let cfg = TwoScenarioConfig {
            t1: t2 + rng.gen_range(1..=100),
            t2,
            p_s1,
            p_s2: p_s1 + rng.gen_range(1e-3..5.0),
            n: 2,
        };
        let (a1, a2) = scenario_weights(&cfg)?;
        let (b1, b2) = pooled_weights(&cfg, 1, 1)?;
        for (check, tally, before, after, ok) in [
            ("symmetric_s1_decrease", &mut rep.symmetric_s1_decrease, a1, b1, b1 < a1),
            ("symmetric_s2_increase", &mut rep.symmetric_s2_increase, a2, b2, b2 > a2),
        ] {
            tally.record(ok);
            if !ok {
                rep.witnesses.push(Witness { check, config: cfg, before, after });
            }
        }
    }
    for s in 0..samples {
        let t2 = rng.gen_range(1..=20);
        let t1 = 3 * t2;
        // Every fourth sample sits on the n - 1 = 3 boundary.
        let n = if s % 4 == 0 { 4 } else { rng.gen_range(2..=t1 + 1) };
        let p_s2 = rng.gen_range(-5.0..5.0);
        let cfg = TwoScenarioConfig {
            t1,
            t2,
            p_s1: p_s2 + rng.gen_range(1e-3..5.0),
            p_s2,
            n,
        };
        let (before, _) = scenario_weights(&cfg)?;
        let (after, _) = pooled_weights(&cfg, n - 1, 1)?;
        let got = change(before, after);
        let (check, tally, want) = match (n - 1).cmp(&3) {
            std::cmp::Ordering::Greater => ("large_budget_increase", &mut rep.large_budget_increase, Change::Increase),
            std::cmp::Ordering::Equal => ("boundary_tie", &mut rep.boundary_tie, Change::Tie),
            std::cmp::Ordering::Less => ("small_budget_decrease", &mut rep.small_budget_decrease, Change::Decrease),
        };
        tally.record(got == want);
        if got != want {
            rep.witnesses.push(Witness { check, config: cfg, before, after });
        }
    }
    Ok(rep)
}

/// One line of the alpha sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub epochs: usize,
    pub val_loss: f64,
    pub val_token_accuracy: f64,
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "alpha={} epochs={} val_loss={} val_token_accuracy={}",
            self.alpha, self.epochs, self.val_loss, self.val_token_accuracy
        )
    }
}

/// Trains one model per encoder alpha from the same seed (`train.seed`
/// initializes the weights and orders the batches) and reports the final
/// validation metrics. The decoder keeps its configured alpha. With `out`,
/// the table is written one row per line.
pub fn sweep_alpha(
    template: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[CaptionRecord],
    val_set: &[CaptionRecord],
    alphas: &[f64],
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::Config("no alpha values given".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = ModelConfig {
            alpha_enc: alpha,
            ..template.clone()
        };
        let mut model = SbatModel::<f32>::new(cfg, train_cfg.seed)?;
        let rep = train(&mut model, train_set, val_set, train_cfg, None)?;
        let last = rep.last();
        rows.push(SweepRow {
            alpha,
            epochs: rep.epochs.len(),
            val_loss: last.val_loss,
            val_token_accuracy: last.val_token_accuracy,
        });
    }
    if let Some(path) = out {
        let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(rows)
}
