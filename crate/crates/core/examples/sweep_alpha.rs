//! Trains one small model per encoder alpha and prints the table.
//!
//! `cargo run --release --example sweep_alpha`

use sbat::analysis::sweep_alpha;
use sbat::model::ModelConfig;
use sbat::synthdata::{generate_splits, DatasetConfig};
use sbat::training::TrainConfig;

fn main() -> sbat::Result<()> {
    let data = DatasetConfig {
        count: 100,
        t: 12,
        k_max: 3,
        d_feat: 8,
        ..DatasetConfig::default()
    };
    let [train_set, val_set, _] = generate_splits(&data)?;
    let template = ModelConfig {
        d_model: 16,
        heads: 2,
        blocks: 1,
        vocab_size: 3 + data.num_scenes,
        d_feat: 8,
        n_enc: Some(3),
        n_dec: Some(3),
        max_src_len: 12,
        max_tgt_len: 6,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        lr_initial: 1e-3,
        lr_drop: 2e-4,
        batch_size: 8,
        max_epochs: 5,
        ..TrainConfig::default()
    };
    for row in sweep_alpha(&template, &tc, &train_set, &val_set, &[0.0, 0.4, 0.8, 1.0], None)? {
        println!("{row}");
    }
    Ok(())
}
