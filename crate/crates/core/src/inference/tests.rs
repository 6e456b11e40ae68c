use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{ModelConfig, Variant, PAD};
use crate::synthdata::gen_scenario_sequence;

/// Scorer defined by a function from prefix to probabilities.
struct FnScorer<F>(usize, F);

impl<F: Fn(&[TokenId]) -> Vec<f64>> NextTokenScorer for FnScorer<F> {
    fn vocab_size(&self) -> usize {
        self.0
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok((self.1)(prefix).into_iter().map(f64::ln).collect())
    }
}

const A: TokenId = 3;
const B: TokenId = 4;

/// Greedy takes `a` (0.55) and then faces a flat distribution; the best
/// sequence is `b b EOS` with probability 0.45 * 0.9 * 0.99.
fn trap(prefix: &[TokenId]) -> Vec<f64> {
    match prefix {
        [BOS] => vec![0.0, 0.0, 0.0, 0.55, 0.45],
        [BOS, A, ..] => vec![0.05, 0.3, 0.05, 0.3, 0.3],
        [BOS, B] => vec![0.02, 0.02, 0.02, 0.04, 0.9],
        [BOS, B, B] => vec![0.0025, 0.99, 0.0025, 0.0025, 0.0025],
        _ => vec![0.2; 5],
    }
}

/// Seeded random distribution per prefix.
fn random_scorer(seed: u64) -> FnScorer<impl Fn(&[TokenId]) -> Vec<f64>> {
    FnScorer(5, move |prefix: &[TokenId]| {
        let key = prefix.iter().fold(seed, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64 + 1));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let w: Vec<f64> = (0..5).map(|_| (3.0 * rng.gen::<f64>()).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    })
}

/// Best hypothesis over every token string of length `max_len`, each cut
/// at its first EOS.
fn enumerate(scorer: &impl NextTokenScorer, max_len: usize) -> Beam {
    let v = scorer.vocab_size();
    let mut best: Option<Beam> = None;
    let mut best_open: Option<Beam> = None;
    for code in 0..v.pow(max_len as u32) {
        let mut tokens = vec![BOS];
        let mut lp = 0.0;
        let mut finished = false;
        let mut c = code;
        for _ in 0..max_len {
            let t = c % v;
            c /= v;
            lp += scorer.next_log_probs(&tokens).unwrap()[t];
            tokens.push(t as TokenId);
            if t as TokenId == EOS {
                finished = true;
                break;
            }
        }
        let beam = Beam {
            tokens: TokenSequence(tokens),
            log_prob: lp,
            finished,
        };
        let slot = if finished { &mut best } else { &mut best_open };
        if slot.as_ref().is_none_or(|b| rank(&beam, b) == Ordering::Less) {
            *slot = Some(beam);
        }
    }
    best.or(best_open).unwrap()
}

#[test]
fn width_five_escapes_the_greedy_trap() {
    let s = FnScorer(5, trap);
    let oracle = enumerate(&s, 4);
    assert_eq!(oracle.tokens.ids(), [BOS, B, B, EOS]);
    let beam = beam_search(&s, 5, 4).unwrap();
    assert_eq!(beam, oracle);
    assert!((beam.log_prob - (0.45f64 * 0.9 * 0.99).ln()).abs() < 1e-12);
    let g = greedy(&s, 4).unwrap();
    assert_eq!(g.tokens.ids(), [BOS, A, EOS]);
    assert_eq!(beam_search(&s, 1, 4).unwrap(), g);
}

#[test]
fn certain_eos_stops_after_one_step() {
    let s = FnScorer(5, |_: &[TokenId]| vec![0.0, 1.0, 0.0, 0.0, 0.0]);
    for w in [1, 3, 5] {
        let b = beam_search(&s, w, 6).unwrap();
        assert_eq!(b.tokens.ids(), [BOS, EOS]);
        assert_eq!(b.log_prob, 0.0);
        assert!(b.finished);
    }
}

#[test]
fn no_eos_within_budget_returns_best_open_beam() {
    let s = FnScorer(5, |_: &[TokenId]| vec![0.0, 0.0, 0.0, 0.3, 0.7]);
    let b = beam_search(&s, 3, 3).unwrap();
    assert!(!b.finished);
    assert_eq!(b.tokens.ids(), [BOS, B, B, B]);
}

#[test]
fn ties_prefer_the_smaller_sequence() {
    let s = FnScorer(5, |_: &[TokenId]| vec![0.0, 0.2, 0.0, 0.4, 0.4]);
    assert_eq!(beam_search(&s, 4, 1).unwrap().tokens.ids(), [BOS, EOS]);
    assert_eq!(greedy(&s, 1).unwrap().tokens.ids(), [BOS, A]);
}

#[test]
fn zero_width_is_rejected() {
    assert!(beam_search(&FnScorer(5, trap), 0, 4).is_err());
}

proptest! {
    #[test]
    fn width_one_is_greedy(seed in any::<u64>(), len in 1usize..6) {
        let s = random_scorer(seed);
        prop_assert_eq!(beam_search(&s, 1, len).unwrap(), greedy(&s, len).unwrap());
    }

    #[test]
    fn no_width_beats_the_exhaustive_optimum(seed in any::<u64>(), width in 1usize..8) {
        let s = random_scorer(seed);
        let best = enumerate(&s, 4);
        let b = beam_search(&s, width, 4).unwrap();
        if b.finished {
            prop_assert!(best.finished);
            prop_assert!(b.log_prob <= best.log_prob);
        }
    }

    #[test]
    fn scores_never_rise_along_a_beam(seed in any::<u64>(), width in 1usize..6) {
        let s = random_scorer(seed);
        let b = beam_search(&s, width, 5).unwrap();
        let ids = b.tokens.ids();
        let mut total = 0.0;
        for k in 1..ids.len() {
            let next = total + s.next_log_probs(&ids[..k]).unwrap()[ids[k] as usize];
            prop_assert!(next <= total);
            total = next;
        }
        prop_assert_eq!(total, b.log_prob);
    }

    #[test]
    fn unpruned_search_is_exact(seed in any::<u64>()) {
        let s = random_scorer(seed);
        prop_assert_eq!(beam_search(&s, 625, 4).unwrap(), enumerate(&s, 4));
    }
}

fn tiny_model(variant: Variant) -> SbatModel<f64> {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        blocks: 2,
        vocab_size: 8,
        d_feat: 6,
        n_enc: Some(3),
        n_dec: Some(3),
        r: if variant == Variant::Vanilla { None } else { Some(1) },
        variant,
        max_src_len: 16,
        max_tgt_len: 8,
        ..ModelConfig::default()
    };
    SbatModel::new(cfg, 11).unwrap()
}

#[test]
fn model_scorer_is_a_log_distribution() {
    let m = tiny_model(Variant::Sbat);
    let rec = gen_scenario_sequence(12, 3, 6, 0.05, 1).unwrap();
    let s = CaptionScorer::new(&m, &rec).unwrap();
    let lp = s.next_log_probs(&[BOS, 3]).unwrap();
    assert_eq!(lp.len(), 8);
    assert!((lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    let b = caption(&m, &rec, 3, 7).unwrap();
    assert!(b.tokens.len() <= 8);
    assert_eq!(b.tokens.ids()[0], BOS);
    assert!(b.tokens.ids().iter().all(|&t| (t as usize) < 8));
}

#[test]
fn export_writes_consistent_files() {
    let dir = tempfile::tempdir().unwrap();
    let rec = gen_scenario_sequence(12, 3, 6, 0.05, 2).unwrap();
    for variant in [Variant::Vanilla, Variant::Sbat] {
        let out = dir.path().join(variant.name());
        let maps = export_attention(&tiny_model(variant), &rec, &out).unwrap();
        assert_eq!(maps.len(), 2 * 2);
        for h in &maps {
            let dump = read_matrix(&h.dump).unwrap();
            let mask = read_matrix(&h.mask_dump).unwrap();
            assert_eq!(dump.len(), 12);
            for (i, row) in dump.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (j, &w) in row.iter().enumerate() {
                    if mask[i][j] == 0.0 {
                        assert_eq!(w, 0.0);
                    } else {
                        assert!(w > 0.0);
                    }
                    assert_eq!(w, h.weights[i][j]);
                }
            }
            let allowed: usize = mask.iter().flatten().filter(|&&x| x == 1.0).count();
            match variant {
                Variant::Vanilla => assert_eq!(allowed, 144),
                _ => assert!(allowed < 144),
            }
            let pgm = std::fs::read_to_string(&h.pgm).unwrap();
            let mut lines = pgm.lines();
            assert_eq!(lines.next(), Some("P2"));
            assert_eq!(lines.next(), Some("12 12"));
            assert_eq!(lines.next(), Some("255"));
            for row in lines {
                let px: Vec<u32> = row.split(' ').map(|p| p.parse().unwrap()).collect();
                assert_eq!(px.len(), 12);
                assert_eq!(px.iter().max(), Some(&255));
            }
        }
    }
}

#[test]
fn pgm_scales_each_row_to_its_maximum() {
    let p = to_pgm(&[vec![0.0, 0.25, 0.5], vec![0.1, 0.1, 0.0]]);
    assert_eq!(p, "P2\n3 2\n255\n0 128 255\n255 255 0\n");
}

#[test]
fn wider_beams_can_score_lower() {
    // Width 2 keeps a strong first token whose continuations are poor and
    // drops the prefix greedy completes.
    let s = random_scorer(410);
    let w1 = beam_search(&s, 1, 5).unwrap();
    let w2 = beam_search(&s, 2, 5).unwrap();
    assert_eq!(w1.tokens.ids(), [BOS, B, A, EOS]);
    assert_eq!(w2.tokens.ids(), [BOS, B, BOS, PAD, EOS]);
    assert!(w2.log_prob < w1.log_prob - 0.6, "{} vs {}", w2.log_prob, w1.log_prob);
}
