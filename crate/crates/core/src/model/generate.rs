//! Greedy and beam decoding over any next-token scorer.

use std::cmp::Ordering;

use crate::error::Result;
use crate::text::TokenId;

/// Incremental next-token distribution. `start` scores the first token;
/// `extend` appends one token to a state and scores the next one. Scores are
/// natural-log probabilities over the whole vocabulary.
pub trait TokenScorer {
    type State: Clone;
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;
    fn extend(&self, state: &Self::State, token: TokenId) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeSettings {
    /// 1 selects greedy decoding.
    pub beams: usize,
    /// Cap on emitted tokens, forced ones included, EOS excluded.
    pub max_len: usize,
    pub eos: Option<TokenId>,
    /// Tokens emitted verbatim before free decoding starts.
    pub forced_prefix: Vec<TokenId>,
}

impl DecodeSettings {
    pub fn new(beams: usize, max_len: usize) -> Self {
        Self {
            beams,
            max_len,
            eos: Some(crate::text::EOS),
            forced_prefix: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Emitted tokens without the terminating EOS.
    pub tokens: Vec<TokenId>,
    /// The length cap was reached before EOS.
    pub truncated: bool,
    /// Mean log-probability per emitted token (EOS counted when emitted).
    pub mean_log_prob: f64,
}

pub fn decode<S: TokenScorer>(scorer: &S, settings: &DecodeSettings) -> Result<Generation> {
    if settings.beams <= 1 {
        greedy(scorer, settings)
    } else {
        beam_search(scorer, settings)
    }
}

/// Argmax with the lowest id winning ties.
fn argmax(scores: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn greedy<S: TokenScorer>(scorer: &S, settings: &DecodeSettings) -> Result<Generation> {
    let mut tokens = Vec::new();
    let mut sum = 0.0;
    let mut finished = false;
    if settings.max_len > 0 {
        let (mut state, mut scores) = scorer.start()?;
        loop {
            let i = tokens.len();
            let tok = settings.forced_prefix.get(i).copied().unwrap_or_else(|| argmax(&scores));
            sum += scores[tok];
            if settings.eos == Some(tok) && i >= settings.forced_prefix.len() {
                finished = true;
                break;
            }
            tokens.push(tok);
            if tokens.len() >= settings.max_len {
                break;
            }
            (state, scores) = scorer.extend(&state, tok)?;
        }
    }
    let n = tokens.len() + usize::from(finished);
    Ok(Generation {
        truncated: !finished,
        mean_log_prob: if n == 0 { 0.0 } else { sum / n as f64 },
        tokens,
    })
}

struct Hyp<St> {
    tokens: Vec<TokenId>,
    sum: f64,
    finished: bool,
    /// State and next-token scores; `None` once finished.
    next: Option<(St, Vec<f64>)>,
}

impl<St> Hyp<St> {
    fn score(&self) -> f64 {
        let n = self.tokens.len() + usize::from(self.finished);
        if n == 0 {
            0.0
        } else {
            self.sum / n as f64
        }
    }
}

struct Candidate {
    parent: usize,
    token: Option<TokenId>,
    tokens: Vec<TokenId>,
    sum: f64,
    finished: bool,
}

impl Candidate {
    fn score(&self) -> f64 {
        let n = self.tokens.len() + usize::from(self.finished);
        self.sum / n.max(1) as f64
    }
}

/// Higher mean log-probability first; ties go to the smaller token sequence,
/// then to finished hypotheses.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| b.finished.cmp(&a.finished))
}

pub fn beam_search<S: TokenScorer>(scorer: &S, settings: &DecodeSettings) -> Result<Generation> {
    let width = settings.beams.max(1);
    if settings.max_len == 0 {
        return Ok(Generation {
            tokens: Vec::new(),
            truncated: true,
            mean_log_prob: 0.0,
        });
    }
    let mut beam: Vec<Hyp<S::State>> = vec![Hyp {
        tokens: Vec::new(),
        sum: 0.0,
        finished: false,
        next: Some(scorer.start()?),
    }];
    for step in 0..settings.max_len {
        let mut cands = Vec::new();
        for (pi, h) in beam.iter().enumerate() {
            let Some((_, scores)) = &h.next else {
                cands.push(Candidate {
                    parent: pi,
                    token: None,
                    tokens: h.tokens.clone(),
                    sum: h.sum,
                    finished: true,
                });
                continue;
            };
            let choices: Vec<TokenId> = match settings.forced_prefix.get(step) {
                Some(&t) => vec![t],
                None => (0..scores.len()).collect(),
            };
            let free = step >= settings.forced_prefix.len();
            for t in choices {
                let ends = free && settings.eos == Some(t);
                let mut tokens = h.tokens.clone();
                if !ends {
                    tokens.push(t);
                }
                cands.push(Candidate {
                    parent: pi,
                    token: Some(t),
                    tokens,
                    sum: h.sum + scores[t],
                    finished: ends,
                });
            }
        }
        cands.sort_by(rank);
        cands.truncate(width);
        let last = step + 1 == settings.max_len;
        let mut next_beam = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &beam[c.parent];
            let next = match (c.finished, c.token, &parent.next) {
                (false, Some(t), Some((st, _))) if !last => Some(scorer.extend(st, t)?),
                _ => None,
            };
            next_beam.push(Hyp {
                tokens: c.tokens,
                sum: c.sum,
                finished: c.finished,
                next,
            });
        }
        beam = next_beam;
        if beam.iter().all(|h| h.finished) {
            break;
        }
    }
    let best = &beam[0];
    Ok(Generation {
        tokens: best.tokens.clone(),
        truncated: !best.finished,
        mean_log_prob: best.score(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Log-probabilities depend only on the previous token.
    struct Bigram {
        table: Vec<Vec<f64>>,
        first: Vec<f64>,
    }

    impl Bigram {
        fn new(first: &[f64], table: &[&[f64]]) -> Self {
            let norm = |r: &[f64]| {
                let z = r.iter().map(|x| x.exp()).sum::<f64>().ln();
                r.iter().map(|x| x - z).collect::<Vec<_>>()
            };
            Self {
                first: norm(first),
                table: table.iter().map(|r| norm(r)).collect(),
            }
        }
    }

    impl TokenScorer for Bigram {
        type State = TokenId;
        fn start(&self) -> Result<(TokenId, Vec<f64>)> {
            Ok((usize::MAX, self.first.clone()))
        }
        fn extend(&self, _: &TokenId, t: TokenId) -> Result<(TokenId, Vec<f64>)> {
            Ok((t, self.table[t].clone()))
        }
    }

    fn toy() -> Bigram {
        // Greedy picks 0 first, but the best length-2 path starts with 1.
        Bigram::new(&[1.0, 0.9, 0.0], &[&[0.0, 0.0, 0.1], &[5.0, 0.0, 0.0], &[0.0, 0.0, 0.0]])
    }

    fn settings(beams: usize, max_len: usize) -> DecodeSettings {
        DecodeSettings {
            beams,
            max_len,
            eos: None,
            forced_prefix: Vec::new(),
        }
    }

    #[test]
    fn max_len_one_gives_one_token() {
        let g = greedy(&toy(), &settings(1, 1)).unwrap();
        assert_eq!(g.tokens.len(), 1);
        assert!(g.truncated);
    }

    #[test]
    fn beam_finds_what_greedy_misses() {
        let m = toy();
        assert_eq!(greedy(&m, &settings(1, 2)).unwrap().tokens, vec![0, 2]);
        assert_eq!(beam_search(&m, &settings(3, 2)).unwrap().tokens, vec![1, 0]);
    }

    #[test]
    fn eos_stops_and_is_not_emitted() {
        let m = Bigram::new(&[0.0, 3.0, 0.0], &[&[0.0; 3], &[0.0, 0.0, 4.0], &[0.0; 3]]);
        let s = DecodeSettings {
            eos: Some(2),
            ..settings(1, 5)
        };
        let g = greedy(&m, &s).unwrap();
        assert_eq!(g.tokens, vec![1]);
        assert!(!g.truncated);
        let b = beam_search(&m, &DecodeSettings { beams: 2, ..s }).unwrap();
        assert_eq!(b.tokens, vec![1]);
    }

    #[test]
    fn forced_prefix_is_verbatim() {
        let s = DecodeSettings {
            forced_prefix: vec![2, 2],
            ..settings(1, 3)
        };
        let g = greedy(&toy(), &s).unwrap();
        assert_eq!(&g.tokens[..2], &[2, 2]);
        let b = beam_search(&toy(), &DecodeSettings { beams: 3, ..s }).unwrap();
        assert_eq!(&b.tokens[..2], &[2, 2]);
    }
}
