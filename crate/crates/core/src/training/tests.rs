use rand::Rng;

use super::*;
use crate::model::{load_checkpoint, ModelConfig, TokenSequence, Variant, BOS, EOS, PAD};
use crate::numkit::Tensor;
use crate::synthdata::{gen_scenario_sequence, SceneBank};

fn tiny_model(vocab: usize, d_feat: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        blocks: 1,
        vocab_size: vocab,
        d_feat,
        n_enc: Some(3),
        n_dec: Some(3),
        r: Some(1),
        variant: Variant::Sbat,
        max_src_len: 16,
        max_tgt_len: 12,
        ..ModelConfig::default()
    }
}

fn toy_records(count: usize, seed: u64) -> Vec<CaptionRecord> {
    let bank = SceneBank::new(SceneBank::DEFAULT_SCENES, 8, 7).unwrap();
    (0..count)
        .map(|i| {
            let s = seed + i as u64;
            bank.record(format!("r{i}"), 10, 2 + (s % 3) as usize, 0.05, s).unwrap()
        })
        .collect()
}

#[test]
fn xent_of_perfect_predictions_is_zero() {
    let mut g = Graph::<f64>::new();
    let p = g.input(Tensor::from_f64_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap());
    let l = xent_loss(&mut g, p, &[Some(1), Some(0)]).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
}

#[test]
fn xent_of_uniform_predictions_with_padding() {
    let mut g = Graph::<f64>::new();
    let p = g.input(Tensor::filled(&[4, 4], 0.25));
    let l = xent_loss(&mut g, p, &[Some(0), None, Some(3), Some(2)]).unwrap();
    assert!((g.value(l).data()[0] - 3.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn xent_gradient_wrt_logits_is_p_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let targets = [Some(4), None, Some(1)];
    let loss_at = |rows: &[Vec<f64>]| {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::from_f64_rows(rows).unwrap());
        let p = g.softmax_rows(z).unwrap();
        let l = xent_loss(&mut g, p, &targets).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::from_f64_rows(&rows).unwrap());
    let p = g.softmax_rows(z).unwrap();
    let probs = g.value(p).to_f64_rows();
    let l = xent_loss(&mut g, p, &targets).unwrap();
    let grads = g.backward(l).unwrap();
    let dz = grads.of(z).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let analytic = match targets[i] {
                Some(t) => probs[i][j] - f64::from(u8::from(j == t)),
                None => 0.0,
            };
            let mut plus = rows.clone();
            let mut minus = rows.clone();
            plus[i][j] += 1e-5;
            minus[i][j] -= 1e-5;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / 2e-5;
            assert!((dz[i * 5 + j] - analytic).abs() < 1e-12);
            assert!((dz[i * 5 + j] - numeric).abs() < 1e-6, "{i},{j}");
        }
    }
}

#[test]
fn epoch_order_is_a_pure_permutation() {
    let a = epoch_order(50, 4, 3);
    assert_eq!(a, epoch_order(50, 4, 3));
    assert_ne!(a, epoch_order(50, 4, 4));
    assert_ne!(a, epoch_order(50, 5, 3));
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
}

#[test]
fn frozen_metric_drops_learning_rate_once() {
    let mut s = PlateauSchedule::new(1e-4, 2e-5, 10, PatienceMetric::TokenAccuracy);
    let mut lrs = Vec::new();
    for _ in 0..30 {
        lrs.push(s.lr());
        s.observe(0.5);
    }
    // Epoch 1 sets the best, epochs 2..=11 stagnate, epoch 12 runs at the lower rate.
    assert!(lrs[..11].iter().all(|&lr| lr == 1e-4));
    assert!(lrs[11..].iter().all(|&lr| lr == 2e-5));
    assert_eq!(s.drop_epoch(), Some(11));
}

#[test]
fn improvements_reset_patience() {
    let mut s = PlateauSchedule::new(1e-3, 1e-4, 3, PatienceMetric::ValLoss);
    for v in [5.0, 5.0, 5.0, 4.0, 4.5, 4.1, 3.9, 4.0] {
        s.observe(v);
    }
    assert_eq!(s.drop_epoch(), None);
    assert_eq!(s.best(), Some(3.9));
    s.observe(4.0);
    s.observe(3.95);
    assert_eq!(s.drop_epoch(), Some(10));
    s.observe(1.0);
    for _ in 0..10 {
        s.observe(2.0);
    }
    assert_eq!(s.drop_epoch(), Some(10));
    assert_eq!(s.lr(), 1e-4);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { lr_drop: 1e-3, ..Default::default() },
        TrainConfig { patience_epochs: 0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { clip_norm: Some(0.0), ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn first_five_steps_decrease_the_batch_loss() {
    let records = toy_records(8, 100);
    let batch: Vec<&CaptionRecord> = records.iter().collect();
    let mut model = SbatModel::<f32>::new(tiny_model(3 + SceneBank::DEFAULT_SCENES, 8), 5).unwrap();
    let adam = Adam::default();
    let mut losses = Vec::new();
    for _ in 0..6 {
        losses.push(train_step(&mut model, &batch, &adam, Some(5.0)).unwrap().loss);
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn single_record_is_memorized() {
    let record = gen_scenario_sequence(8, 2, 8, 0.05, 3).unwrap();
    // Two scenes -> remap to tokens 3 and 4 so that the vocabulary has 5 entries.
    let mut record = record;
    record.captions = vec![TokenSequence(vec![BOS, 3, 4, EOS])];
    record.spec = None;
    let set = vec![record];
    let mut model = SbatModel::<f32>::new(tiny_model(5, 8), 1).unwrap();
    let cfg = TrainConfig {
        lr_initial: 1e-3,
        lr_drop: 2e-4,
        batch_size: 1,
        max_epochs: 200,
        seed: 2,
        metric_for_patience: PatienceMetric::ValLoss,
        ..Default::default()
    };
    let report = train(&mut model, &set, &set, &cfg, None).unwrap();
    assert!(report.last().train_loss < 0.01, "{:?}", report.last());
    assert_eq!(token_accuracy(&model, &set).unwrap(), 1.0);
}

#[test]
fn untrained_accuracy_is_chance_level() {
    let v = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let records: Vec<CaptionRecord> = (0..100)
        .map(|i| {
            let mut r = gen_scenario_sequence(10, 2 + i % 3, 8, 0.05, i as u64).unwrap();
            let mut ids = vec![BOS];
            // Uniform over every non-PAD token.
            ids.extend((0..10).map(|_| {
                let t = rng.gen_range(0..v as u32 - 1);
                if t >= PAD { t + 1 } else { t }
            }));
            r.captions = vec![TokenSequence(ids)];
            r.spec = None;
            r
        })
        .collect();
    let model = SbatModel::<f32>::new(tiny_model(v, 8), 9).unwrap();
    let m = evaluate(&model, &records).unwrap();
    assert_eq!(m.positions, 1000);
    assert!((m.token_accuracy() - 1.0 / v as f64).abs() < 0.05, "{}", m.token_accuracy());
}

#[test]
fn empty_set_scores_zero() {
    let model = SbatModel::<f32>::new(tiny_model(8, 8), 9).unwrap();
    assert_eq!(token_accuracy(&model, &[]).unwrap(), 0.0);
}

#[test]
fn bleu_identity_and_zero_overlap() {
    let hyp = vec![vec![3, 4, 5, 6, 7], vec![4, 4, 5, 6]];
    let refs: Vec<Vec<Vec<u32>>> = hyp.iter().map(|h| vec![h.clone()]).collect();
    assert_eq!(bleu4(&hyp, &refs).unwrap(), 1.0);
    assert_eq!(bleu4(&[vec![1, 2, 3, 4]], &[vec![vec![1, 2, 3, 5]]]).unwrap(), 0.0);
    assert!(bleu4(&[], &[]).is_err());
}

#[test]
fn bleu_matches_hand_counted_fixture() {
    // Clipped n-gram matches / totals per order, summed over the corpus:
    //   1: (4+4+2)/(5+4+3) = 10/12   2: (3+3+1)/(4+3+2) = 7/9
    //   3: (2+2+0)/(3+2+1) = 4/6     4: (1+1)/(2+1)      = 2/3
    // Hypothesis length 12, closest reference lengths 5+5+3 = 13.
    let hyp = vec![vec![1, 2, 3, 4, 5], vec![7, 8, 9, 7], vec![1, 1, 1]];
    let refs = vec![
        vec![vec![1, 2, 3, 4, 6]],
        vec![vec![7, 8, 9, 7, 8]],
        vec![vec![1, 2], vec![1, 1, 3]],
    ];
    let expected = (1.0f64 - 13.0 / 12.0).exp() * (70.0f64 / 243.0).powf(0.25);
    assert!((bleu4(&hyp, &refs).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn training_is_reproducible_and_checkpoint_round_trips() {
    let records = toy_records(12, 40);
    let (tr, va) = records.split_at(9);
    let cfg = TrainConfig {
        lr_initial: 1e-3,
        lr_drop: 1e-4,
        batch_size: 4,
        max_epochs: 3,
        seed: 8,
        ..Default::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut finals = Vec::new();
    for d in &dirs {
        let mut model = SbatModel::<f32>::new(tiny_model(3 + SceneBank::DEFAULT_SCENES, 8), 4).unwrap();
        let art = Artifacts::new(d.path());
        let report = train(&mut model, tr, va, &cfg, Some(&art)).unwrap();
        assert_eq!(read_log(&art.log_path()).unwrap(), report.epochs);
        finals.push(report);
    }
    assert_eq!(finals[0], finals[1]);
    for f in ["train_log.jsonl", "best.ckpt", "best.bin"] {
        assert_eq!(
            std::fs::read(dirs[0].path().join(f)).unwrap(),
            std::fs::read(dirs[1].path().join(f)).unwrap(),
            "{f}"
        );
    }
    let best = &finals[0].epochs[finals[0].best_epoch - 1];
    let loaded = load_checkpoint(&dirs[0].path().join("best.ckpt")).unwrap();
    let m = evaluate(&loaded.model, va).unwrap();
    assert_eq!(m.loss(), best.val_loss);
    assert_eq!(m.token_accuracy(), best.val_token_accuracy);
}

#[test]
fn non_finite_loss_aborts() {
    let records = toy_records(4, 1);
    let mut model = SbatModel::<f32>::new(tiny_model(3 + SceneBank::DEFAULT_SCENES, 8), 4).unwrap();
    let id = model.params().find("output.b").unwrap();
    model.params_mut().get_mut(id).value.data_mut()[0] = f32::NAN;
    let cfg = TrainConfig {
        max_epochs: 1,
        ..Default::default()
    };
    assert!(matches!(
        train(&mut model, &records, &records, &cfg, None),
        Err(Error::NonFinite { epoch: 1, batch: 1 })
    ));
}

#[test]
fn empty_splits_are_rejected() {
    let records = toy_records(2, 1);
    let mut model = SbatModel::<f32>::new(tiny_model(3 + SceneBank::DEFAULT_SCENES, 8), 4).unwrap();
    assert!(train(&mut model, &[], &records, &TrainConfig::default(), None).is_err());
    assert!(train(&mut model, &records, &[], &TrainConfig::default(), None).is_err());
}
