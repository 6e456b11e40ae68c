//! Writes PGM heatmaps and numeric dumps of the encoder self-attention of
//! a random model in vanilla and boundary mode.
//!
//! `cargo run --example export_attention -- [out_dir]`

use sbat::inference::export_attention;
use sbat::model::{ModelConfig, SbatModel, Variant};
use sbat::synthdata::gen_scenario_sequence;

fn main() -> sbat::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-heatmaps".into());
    let rec = gen_scenario_sequence(24, 3, 16, 0.0, 4)?;
    println!("segment starts {:?}", rec.spec.as_ref().unwrap().boundaries);
    for variant in [Variant::Vanilla, Variant::SbatNoLocal] {
        let cfg = ModelConfig {
            d_model: 32,
            heads: 2,
            blocks: 2,
            d_feat: 16,
            n_enc: Some(3),
            r: None,
            alpha_enc: 1.0,
            variant,
            max_src_len: 24,
            positional_encoding: false,
            ..ModelConfig::default()
        };
        let model = SbatModel::<f64>::new(cfg, 1)?;
        let dir = std::path::Path::new(&out).join(variant.name());
        for h in export_attention(&model, &rec, &dir)? {
            let cols: Vec<usize> = (0..24).filter(|&j| h.weights[12][j] > 0.0).collect();
            println!("{} block {} head {}: row 12 attends {:?}", variant, h.block, h.head, cols);
        }
        println!("files in {}", dir.display());
    }
    Ok(())
}
