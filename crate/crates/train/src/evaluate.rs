//! Corpus evaluation: greedy and beam + LM decoding scored by CER.

use mqnet_core::ctc::{greedy_decode, LogProbMatrix};
use mqnet_core::Model;
use mqnet_decoder::{beam_search, BeamConfig, CerTotals, NGramLM, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: String,
    pub greedy: String,
    pub greedy_cer: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beam: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beam_cer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceResult>,
    /// Corpus CER: total edits over total reference characters.
    pub greedy_cer: f64,
    pub beam_cer: Option<f64>,
    pub missing_audio: Vec<String>,
    pub missing_transcripts: Vec<String>,
}

/// Decodes one utterance greedily and, when `beam` is given, with beam search
/// (using `lm` if present).
pub fn decode(
    model: &Model,
    features: &mqnet_core::Tensor,
    vocab: &Vocabulary,
    lm: Option<&NGramLM>,
    beam: Option<&BeamConfig>,
) -> Result<(String, Option<String>)> {
    let lp = LogProbMatrix::new(model.infer(features)?)?;
    let greedy = vocab.decode(greedy_decode(&lp).ids());
    let beam = match beam {
        Some(cfg) => Some(vocab.decode(beam_search(&lp, lm, cfg)?.ids())),
        None => None,
    };
    Ok((greedy, beam))
}

pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    vocab: &Vocabulary,
    lm: Option<&NGramLM>,
    beam: Option<&BeamConfig>,
) -> Result<EvalReport> {
    if corpus.utterances.is_empty() {
        return Err(TrainError::Evaluate("no utterance has both audio and a transcript".into()));
    }
    if model.vocab_size() != vocab.len() {
        return Err(TrainError::Evaluate(format!(
            "model predicts {} labels, vocabulary has {}",
            model.vocab_size(),
            vocab.len()
        )));
    }
    let mut greedy_totals = CerTotals::default();
    let mut beam_totals = CerTotals::default();
    let mut utterances = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let (greedy, hyp) = decode(model, &u.features, vocab, lm, beam)?;
        let greedy_cer = greedy_totals.add(&u.text, &greedy)?;
        let beam_cer = match &hyp {
            Some(h) => Some(beam_totals.add(&u.text, h)?),
            None => None,
        };
        utterances.push(UtteranceResult {
            id: u.id.clone(),
            reference: u.text.clone(),
            greedy,
            greedy_cer,
            beam: hyp,
            beam_cer,
        });
    }
    Ok(EvalReport {
        utterances,
        greedy_cer: greedy_totals.rate(),
        beam_cer: beam.map(|_| beam_totals.rate()),
        missing_audio: corpus.missing_audio.clone(),
        missing_transcripts: corpus.missing_transcripts.clone(),
    })
}

/// Default `(alpha, beta)` candidates for [`tune_beam`].
pub const TUNING_GRID: [(f64, f64); 20] = {
    const A: [f64; 4] = [0.0, 0.5, 1.0, 1.8];
    const B: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 3.5];
    let mut out = [(0.0, 0.0); 20];
    let mut i = 0;
    while i < 20 {
        out[i] = (A[i / 5], B[i % 5]);
        i += 1;
    }
    out
};

/// Picks the `(alpha, beta)` pair with the lowest corpus beam CER on a
/// development set; ties go to the earlier candidate. Returns it with its CER.
pub fn tune_beam(
    model: &Model,
    dev: &Corpus,
    vocab: &Vocabulary,
    lm: &NGramLM,
    candidates: &[(f64, f64)],
    beam: usize,
) -> Result<(BeamConfig, f64)> {
    if dev.utterances.is_empty() || candidates.is_empty() {
        return Err(TrainError::Evaluate("tuning needs dev utterances and candidates".into()));
    }
    let lps = dev
        .utterances
        .iter()
        .map(|u| Ok(LogProbMatrix::new(model.infer(&u.features)?)?))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(BeamConfig, f64)> = None;
    for &(alpha, beta) in candidates {
        let cfg = BeamConfig { alpha, beta, beam };
        let mut totals = CerTotals::default();
        for (u, lp) in dev.utterances.iter().zip(&lps) {
            totals.add(&u.text, &vocab.decode(beam_search(lp, Some(lm), &cfg)?.ids()))?;
        }
        let rate = totals.rate();
        if best.as_ref().is_none_or(|(_, b)| rate < *b) {
            best = Some((cfg, rate));
        }
    }
    Ok(best.expect("at least one candidate"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mqnet_core::ModelConfig;

    #[test]
    fn empty_corpus_is_rejected() {
        let model = Model::build(&ModelConfig::tiny(2, 4, 4, 1), 0).unwrap();
        let vocab = Vocabulary::new(vec!['a', 'b']).unwrap();
        let corpus = Corpus {
            utterances: Vec::new(),
            missing_audio: vec!["x".into()],
            missing_transcripts: Vec::new(),
        };
        assert!(matches!(
            evaluate(&model, &corpus, &vocab, None, None),
            Err(TrainError::Evaluate(_))
        ));
    }

    #[test]
    fn grid_covers_every_pair_once() {
        assert_eq!(TUNING_GRID[0], (0.0, 0.0));
        assert!(TUNING_GRID.contains(&(1.8, 3.5)));
        for (i, a) in TUNING_GRID.iter().enumerate() {
            assert!(TUNING_GRID[i + 1..].iter().all(|b| b != a));
        }
    }
}
