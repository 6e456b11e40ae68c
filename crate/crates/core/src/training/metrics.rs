use std::collections::HashMap;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, SbatModel, TokenId};
use crate::numkit::{Graph, Real};
use crate::synthdata::CaptionRecord;

/// Teacher-forced loss and accuracy over a set of records.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    /// Summed cross-entropy over every scored position.
    pub total_loss: f64,
    /// Number of scored (non-PAD) positions.
    pub positions: usize,
    /// Positions whose argmax matches the gold token.
    pub correct: usize,
}

impl EvalMetrics {
    /// Mean cross-entropy per scored position.
    pub fn loss(&self) -> f64 {
        if self.positions == 0 {
            0.0
        } else {
            self.total_loss / self.positions as f64
        }
    }

    pub fn token_accuracy(&self) -> f64 {
        if self.positions == 0 {
            0.0
        } else {
            self.correct as f64 / self.positions as f64
        }
    }

    fn merge(self, other: EvalMetrics) -> EvalMetrics {
        EvalMetrics {
            total_loss: self.total_loss + other.total_loss,
            positions: self.positions + other.positions,
            correct: self.correct + other.correct,
        }
    }
}

fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Scores one record; the loss uses the same floor as training.
pub fn evaluate_record<R: Real>(model: &SbatModel<R>, record: &CaptionRecord) -> Result<EvalMetrics> {
    let (image, motion) = (record.image()?, record.motion()?);
    let caption = record.primary_caption()?;
    let mut g = Graph::new();
    let tf = model.forward_teacher_forced(&mut g, &image, &motion, caption.ids(), ForwardOptions::default(), None)?;
    let loss = g.nll(tf.probs, &tf.targets)?;
    let probs = g.value(tf.probs);
    let mut m = EvalMetrics {
        total_loss: g.value(loss).data()[0].as_f64(),
        ..Default::default()
    };
    for (i, t) in tf.targets.iter().enumerate() {
        if let Some(t) = *t {
            m.positions += 1;
            m.correct += usize::from(argmax(probs.row(i)) == t);
        }
    }
    Ok(m)
}

/// Teacher-forced metrics over `records`, evaluated in parallel and summed
/// in record order.
pub fn evaluate<R: Real>(model: &SbatModel<R>, records: &[CaptionRecord]) -> Result<EvalMetrics> {
    let parts = records
        .par_iter()
        .map(|r| evaluate_record(model, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().fold(EvalMetrics::default(), EvalMetrics::merge))
}

/// Fraction of non-PAD gold positions predicted correctly under teacher
/// forcing. An empty set scores 0.
pub fn token_accuracy<R: Real>(model: &SbatModel<R>, records: &[CaptionRecord]) -> Result<f64> {
    let m = evaluate(model, records)?;
    if m.positions == 0 {
        warn!("token accuracy requested on a set with no scored positions");
    }
    Ok(m.token_accuracy())
}

fn ngrams(words: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut out = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-4 with uniform weights, clipped counts against the maximum
/// over references, and the closest-reference brevity penalty. Any zero
/// n-gram precision gives 0 (no smoothing).
pub fn bleu4(hypotheses: &[Vec<TokenId>], references: &[Vec<Vec<TokenId>>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Config("BLEU of an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Config(format!(
            "{} hypotheses but {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Config("hypothesis without references".into()));
        }
        hyp_len += hyp.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let counts = ngrams(hyp, n);
            let mut max_ref: HashMap<&[TokenId], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}
