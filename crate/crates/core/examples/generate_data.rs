//! Writes a small synthetic dataset and prints one record.
//!
//! `cargo run --example generate_data -- [out_dir]`

use sbat::synthdata::{gen_dataset, load_split, DatasetConfig};

fn main() -> sbat::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-data".into());
    let cfg = DatasetConfig {
        count: 40,
        t: 16,
        d_feat: 8,
        ..DatasetConfig::default()
    };
    let vocab = gen_dataset(&cfg, out.as_ref())?;
    let train = load_split(out.as_ref(), "train")?;
    println!("wrote {} train records to {out}", train.len());
    let r = &train[0];
    let spec = r.spec.as_ref().expect("generated records carry their spec");
    println!("{}: T={} boundaries={:?} scenes={:?}", r.id, r.steps(), spec.boundaries, spec.scenario_ids);
    println!("caption: {}", vocab.render(&r.captions[0]));
    Ok(())
}
