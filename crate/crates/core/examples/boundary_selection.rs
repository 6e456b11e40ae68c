//! Shows which keys boundary-aware selection keeps on a piecewise-constant
//! sequence, next to the local band and equidistant sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbat::attention::{xavier, AttentionMode, LogitMatrix};
use sbat::numkit::Tensor;
use sbat::synthdata::gen_scenario_sequence;

fn project(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = x
        .to_f64_rows()
        .iter()
        .map(|r| (0..w.cols()).map(|c| (0..w.rows()).map(|i| r[i] * w.at(i, c)).sum()).collect())
        .collect();
    Tensor::from_f64_rows(&rows).unwrap()
}

fn show(name: &str, mode: AttentionMode, p: &LogitMatrix<f64>) -> sbat::Result<()> {
    println!("{name}:");
    if let Some((mask, margin)) = mode.select(p)? {
        for i in [0, p.rows() / 2, p.rows() - 1] {
            println!("  row {i:>2}: {:?}", mask.columns(i));
        }
        println!("  selection margin {margin:.3e}");
    }
    Ok(())
}

fn main() -> sbat::Result<()> {
    let rec = gen_scenario_sequence(20, 3, 16, 0.0, 11)?;
    println!("true segment starts: {:?}", rec.spec.as_ref().unwrap().boundaries);
    let x: Tensor<f64> = rec.image()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = project(&x, &xavier(16, 8, &mut rng));
    let k = project(&x, &xavier(16, 8, &mut rng));
    let p = sbat::attention::scaled_logits(&q, &k)?;
    show("boundary, alpha=1", AttentionMode::Boundary { budget: 3, alpha: 1.0, radius: None }, &p)?;
    show("boundary, alpha=0.8, r=1", AttentionMode::Boundary { budget: 3, alpha: 0.8, radius: Some(1) }, &p)?;
    show("equidistant", AttentionMode::Equidistant { budget: 3 }, &p)?;
    Ok(())
}
