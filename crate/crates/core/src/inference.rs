//! Greedy and beam-search decoding, and attention heatmap export.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::{AttentionMask, HeadTrace};
use crate::error::{Error, Result};
use crate::model::{EncodedFeatures, ForwardOptions, ForwardTrace, SbatModel, TokenId, TokenSequence, BOS, EOS};
use crate::numkit::{Graph, Real};
use crate::synthdata::CaptionRecord;

/// Anything that yields next-token log-probabilities for a prefix that
/// starts with BOS.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// Scores prefixes with a model over fixed encoder outputs.
pub struct CaptionScorer<'a, R> {
    model: &'a SbatModel<R>,
    enc: EncodedFeatures<R>,
}

impl<'a, R: Real> CaptionScorer<'a, R> {
    pub fn new(model: &'a SbatModel<R>, record: &CaptionRecord) -> Result<Self> {
        let enc = model.encode_values(&record.image()?, &record.motion()?)?;
        Ok(CaptionScorer { model, enc })
    }
}

impl<R: Real> NextTokenScorer for CaptionScorer<'_, R> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self
            .model
            .next_token_probs(&self.enc, prefix)?
            .into_iter()
            .map(f64::ln)
            .collect())
    }
}

/// A partial or finished hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    pub tokens: TokenSequence,
    /// Sum of the log-probabilities of every token after BOS.
    pub log_prob: f64,
    pub finished: bool,
}

/// Higher score first; equal scores put the lexicographically smaller
/// sequence first.
fn rank(a: &Beam, b: &Beam) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Picks the most likely token at each step (smallest id on ties) until
/// EOS or `max_len` generated tokens.
pub fn greedy(scorer: &impl NextTokenScorer, max_len: usize) -> Result<Beam> {
    let mut beam = Beam {
        tokens: TokenSequence(vec![BOS]),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(beam.tokens.ids())?;
        let t = argmax(&lp);
        beam.tokens.0.push(t as TokenId);
        beam.log_prob += lp[t];
        if t as TokenId == EOS {
            beam.finished = true;
            break;
        }
    }
    Ok(beam)
}

/// Length-wise beam search without length normalization. Finished beams
/// stay in the pool unchanged and compete with fresh extensions; the search
/// ends when every kept beam is finished or after `max_len` generated
/// tokens. Returns the best finished beam, else the best unfinished one.
pub fn beam_search(scorer: &impl NextTokenScorer, width: usize, max_len: usize) -> Result<Beam> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut beams = vec![Beam {
        tokens: TokenSequence(vec![BOS]),
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut pool = Vec::with_capacity(beams.len() * scorer.vocab_size());
        for b in beams {
            if b.finished {
                pool.push(b);
                continue;
            }
            let lp = scorer.next_log_probs(b.tokens.ids())?;
            for (t, &l) in lp.iter().enumerate() {
                let mut tokens = b.tokens.clone();
                tokens.0.push(t as TokenId);
                pool.push(Beam {
                    tokens,
                    log_prob: b.log_prob + l,
                    finished: t as TokenId == EOS,
                });
            }
        }
        pool.sort_by(rank);
        pool.truncate(width);
        beams = pool;
    }
    let best_finished = beams.iter().filter(|b| b.finished).min_by(|a, b| rank(a, b));
    Ok(best_finished
        .or_else(|| beams.iter().min_by(|a, b| rank(a, b)))
        .cloned()
        .expect("at least one beam"))
}

/// Caption for one record with a model.
pub fn caption<R: Real>(model: &SbatModel<R>, record: &CaptionRecord, width: usize, max_len: usize) -> Result<Beam> {
    let scorer = CaptionScorer::new(model, record)?;
    beam_search(&scorer, width, max_len)
}

/// One exported head of the image-stream encoder self-attention.
#[derive(Clone, Debug)]
pub struct Heatmap {
    pub block: usize,
    pub head: usize,
    /// Post-softmax weights, `T x T`.
    pub weights: Vec<Vec<f64>>,
    /// Admissible columns, `None` for dense attention.
    pub mask: Option<AttentionMask>,
    pub pgm: PathBuf,
    pub dump: PathBuf,
    pub mask_dump: PathBuf,
}

/// Plain PGM, each row scaled linearly so that 0 maps to 0 and the row
/// maximum to 255.
pub fn to_pgm(weights: &[Vec<f64>]) -> String {
    let h = weights.len();
    let w = weights.first().map_or(0, Vec::len);
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in weights {
        let max = row.iter().cloned().fold(0.0, f64::max);
        let px: Vec<String> = row
            .iter()
            .map(|&v| {
                let p = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                (p.clamp(0.0, 255.0) as u8).to_string()
            })
            .collect();
        out.push_str(&px.join(" "));
        out.push('\n');
    }
    out
}

fn matrix_text(rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(out, "{}", r.join(" "));
    }
    out
}

/// Whitespace-separated numeric matrix, as written by [`export_attention`].
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: e.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Image-stream self-attention of every encoder block and head.
pub fn encoder_attention<R: Real>(model: &SbatModel<R>, record: &CaptionRecord) -> Result<Vec<Vec<HeadTrace<R>>>> {
    let mut g = Graph::new();
    let mut trace = ForwardTrace::new();
    model.encode(
        &mut g,
        &record.image::<R>()?,
        &record.motion::<R>()?,
        ForwardOptions::default(),
        Some(&mut trace),
    )?;
    Ok(trace.image_self)
}

/// Writes `block{b}_head{h}.pgm`, `.txt` (weights) and `_mask.txt` (0/1)
/// for each encoder block and head into `out_dir`.
pub fn export_attention<R: Real>(model: &SbatModel<R>, record: &CaptionRecord, out_dir: &Path) -> Result<Vec<Heatmap>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut maps = Vec::new();
    for (block, heads) in encoder_attention(model, record)?.into_iter().enumerate() {
        for (head, h) in heads.into_iter().enumerate() {
            let weights = h.weights.to_f64_rows();
            let stem = format!("block{block}_head{head}");
            let pgm = out_dir.join(format!("{stem}.pgm"));
            let dump = out_dir.join(format!("{stem}.txt"));
            let mask_dump = out_dir.join(format!("{stem}_mask.txt"));
            let write = |p: &Path, s: String| fs::write(p, s).map_err(|e| Error::io(p, e));
            write(&pgm, to_pgm(&weights))?;
            write(
                &dump,
                matrix_text(weights.iter().map(|r| r.iter().map(|v| format!("{v:e}")).collect())),
            )?;
            let (rows, cols) = (weights.len(), weights.first().map_or(0, Vec::len));
            write(
                &mask_dump,
                matrix_text((0..rows).map(|i| {
                    (0..cols)
                        .map(|j| {
                            let ok = h.mask.as_ref().is_none_or(|m| m.allowed(i, j));
                            if ok { "1" } else { "0" }.to_string()
                        })
                        .collect()
                })),
            )?;
            maps.push(Heatmap {
                block,
                head,
                weights,
                mask: h.mask,
                pgm,
                dump,
                mask_dump,
            });
        }
    }
    Ok(maps)
}

#[cfg(test)]
mod tests;
