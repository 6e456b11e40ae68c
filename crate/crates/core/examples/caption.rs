//! Greedy and beam-search captions from a checkpoint, or from a briefly
//! trained model when none is given.
//!
//! `cargo run --release --example caption -- [path/to/best.ckpt]`

use sbat::inference::{beam_search, greedy, CaptionScorer};
use sbat::model::{load_checkpoint, ModelConfig, SbatModel};
use sbat::synthdata::{generate_splits, DatasetConfig, Vocab};
use sbat::training::{train, TrainConfig};

fn main() -> sbat::Result<()> {
    let data = DatasetConfig {
        count: 120,
        t: 12,
        k_max: 3,
        d_feat: 8,
        ..DatasetConfig::default()
    };
    let [train_set, val_set, test_set] = generate_splits(&data)?;
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path.as_ref())?.model,
        None => {
            let cfg = ModelConfig {
                d_model: 32,
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
            let mut m = SbatModel::<f32>::new(cfg, 0)?;
            let tc = TrainConfig {
                lr_initial: 1e-3,
                lr_drop: 2e-4,
                batch_size: 8,
                max_epochs: 12,
                ..TrainConfig::default()
            };
            train(&mut m, &train_set, &val_set, &tc, None)?;
            m
        }
    };
    let vocab = Vocab::from_records(train_set.iter().chain(&val_set).chain(&test_set));
    let max_len = model.config().max_tgt_len;
    for r in test_set.iter().take(5) {
        let scorer = CaptionScorer::new(&model, r)?;
        let g = greedy(&scorer, max_len)?;
        let b = beam_search(&scorer, 5, max_len)?;
        println!("{}", r.id);
        println!("  gold   {}", vocab.render(&r.captions[0]));
        println!("  greedy {}  ({:.3})", vocab.render(&g.tokens), g.log_prob);
        println!("  beam 5 {}  ({:.3})", vocab.render(&b.tokens), b.log_prob);
    }
    Ok(())
}
