//! Scenario weights before and after boundary-aware pooling, and the
//! sampled inequality check.

use sbat::analysis::{pooled_weights, scenario_weights, verify_inequalities, TwoScenarioConfig};

fn main() -> sbat::Result<()> {
    let cfg = TwoScenarioConfig {
        t1: 3,
        t2: 1,
        p_s1: 0.0,
        p_s2: 3f64.ln(),
        n: 2,
    };
    let (a1, a2) = scenario_weights(&cfg)?;
    let (b1, b2) = pooled_weights(&cfg, 1, 1)?;
    println!("query on scenario two: vanilla ({a1:.3}, {a2:.3}) -> pooled ({b1:.3}, {b2:.3})");
    for n in 3..=6 {
        let c = TwoScenarioConfig {
            t1: 9,
            t2: 3,
            p_s1: 1.0,
            p_s2: 0.0,
            n,
        };
        let (before, _) = scenario_weights(&c)?;
        let (after, _) = pooled_weights(&c, n - 1, 1)?;
        println!("query on scenario one, n={n}: {before:.6} -> {after:.6}");
    }
    println!("{}", verify_inequalities(10_000, 0)?);
    Ok(())
}
