//! Trains a small SBAT model on generated data and saves the best
//! checkpoint.
//!
//! `cargo run --release --example train_toy -- [out_dir] [epochs]`

use sbat::model::{ModelConfig, SbatModel, Variant};
use sbat::synthdata::{generate_splits, DatasetConfig};
use sbat::training::{train, Artifacts, TrainConfig};

fn main() -> sbat::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "target/example-train".into());
    let epochs = args.next().map_or(15, |e| e.parse().expect("epochs"));
    let data = DatasetConfig {
        count: 200,
        t: 16,
        k_max: 4,
        d_feat: 16,
        ..DatasetConfig::default()
    };
    let [train_set, val_set, _] = generate_splits(&data)?;
    let cfg = ModelConfig {
        d_model: 32,
        heads: 4,
        blocks: 1,
        vocab_size: 3 + data.num_scenes,
        d_feat: 16,
        n_enc: Some(4),
        n_dec: Some(4),
        variant: Variant::Sbat,
        max_src_len: 16,
        max_tgt_len: 8,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        lr_initial: 1e-3,
        lr_drop: 2e-4,
        batch_size: 16,
        max_epochs: epochs,
        ..TrainConfig::default()
    };
    let mut model = SbatModel::<f32>::new(cfg, tc.seed)?;
    println!("{} parameters", model.config().parameter_count());
    let report = train(&mut model, &train_set, &val_set, &tc, Some(&Artifacts::new(&out)))?;
    for e in &report.epochs {
        println!(
            "epoch {:>3}  train {:.4}  val {:.4}  acc {:.3}  lr {:e}",
            e.epoch, e.train_loss, e.val_loss, e.val_token_accuracy, e.lr
        );
    }
    println!("best epoch {} -> {out}/best.ckpt", report.best_epoch);
    Ok(())
}
