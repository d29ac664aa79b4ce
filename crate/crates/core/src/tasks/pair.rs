use std::io::{BufRead, Write};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{digit_len, digit_tokens, format_prompt, sample_problem, tokenize, Problem, TaskClass};
use crate::error::{LabError, Result};

const COUNTERFACTUAL_DRAWS: usize = 10_000;

/// Aligned clean and corrupted prompts.
///
/// Both token sequences end with the clean answer `y_clean`, so logits at
/// `answer_span.start - 1 .. answer_span.end - 1` score `y_clean` in either
/// run.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub class: TaskClass,
    pub examples: Vec<Problem>,
    pub clean: Problem,
    pub corrupt: Problem,
    pub clean_tokens: Vec<usize>,
    pub corrupted_tokens: Vec<usize>,
    /// Tokens shared by both prompts: BOS plus the solved examples.
    pub prefix_len: usize,
    pub answer_span: Range<usize>,
    pub y_clean: Vec<usize>,
    pub y_corrupt: Vec<usize>,
    pub seed: Option<u64>,
}

impl PromptPair {
    pub fn from_problems(class: TaskClass, examples: Vec<Problem>, clean: Problem, corrupt: Problem) -> Result<Self> {
        class.validate()?;
        for p in examples.iter().chain([&clean, &corrupt]) {
            if !class.contains(p.a, p.b) || p.a.checked_add(p.b) != Some(p.sum) {
                return Err(LabError::InvalidClass(format!(
                    "{} + {} = {} is not a problem of class {class}",
                    p.a, p.b, p.sum
                )));
            }
        }
        let y_clean = digit_tokens(clean.sum);
        let y_corrupt = digit_tokens(corrupt.sum);
        let clean_text = format_prompt(&examples, (clean.a, clean.b), class.k)?;
        let corrupt_text = format_prompt(&examples, (corrupt.a, corrupt.b), class.k)?;
        let answer = clean.sum.to_string();
        let clean_tokens = tokenize(&format!("{clean_text} {answer}"))?;
        let corrupted_tokens = tokenize(&format!("{corrupt_text} {answer}"))?;
        let prefix_len = 1 + clean_text.rfind('\n').map_or(0, |i| i + 1);
        let end = clean_tokens.len();
        Ok(Self {
            class,
            examples,
            clean,
            corrupt,
            answer_span: end - y_clean.len()..end,
            clean_tokens,
            corrupted_tokens,
            prefix_len,
            y_clean,
            y_corrupt,
            seed: None,
        })
    }

    /// Checks the alignment invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(LabError::InvalidClass(format!("prompt pair: {m}")));
        if self.clean_tokens.len() != self.corrupted_tokens.len() {
            return fail("clean and corrupted lengths differ");
        }
        if self.clean_tokens[..self.prefix_len] != self.corrupted_tokens[..self.prefix_len] {
            return fail("few-shot prefixes differ");
        }
        if self.y_clean == self.y_corrupt || self.y_clean.len() != self.y_corrupt.len() {
            return fail("answers must differ and have equal length");
        }
        if self.clean_tokens[self.answer_span.clone()] != self.y_clean[..] {
            return fail("answer span does not hold the clean answer");
        }
        Ok(())
    }

    /// Pair whose corrupted prompt is the clean prompt itself.
    pub fn degenerate(&self) -> Self {
        Self {
            corrupt: self.clean,
            corrupted_tokens: self.clean_tokens.clone(),
            y_corrupt: self.y_clean.clone(),
            ..self.clone()
        }
    }

    /// Positions whose logits predict the answer tokens.
    pub fn prediction_rows(&self) -> Vec<usize> {
        self.answer_span.clone().map(|i| i - 1).collect()
    }
}

/// Uniform draw from the class conditioned on a different operand pair, a
/// different sum and a sum of the same digit length.
pub fn sample_counterfactual<R: Rng + ?Sized>(clean: &Problem, class: &TaskClass, rng: &mut R) -> Result<Problem> {
    let len = digit_len(clean.sum);
    for _ in 0..COUNTERFACTUAL_DRAWS {
        let p = sample_problem(class, rng);
        if (p.a, p.b) != (clean.a, clean.b) && p.sum != clean.sum && digit_len(p.sum) == len {
            return Ok(p);
        }
    }
    Err(LabError::CounterfactualExhausted {
        a: clean.a,
        b: clean.b,
        draws: COUNTERFACTUAL_DRAWS,
    })
}

pub fn build_prompt_pair<R: Rng + ?Sized>(class: &TaskClass, rng: &mut R) -> Result<PromptPair> {
    let examples: Vec<Problem> = (0..class.k).map(|_| sample_problem(class, rng)).collect();
    let clean = sample_problem(class, rng);
    let corrupt = sample_counterfactual(&clean, class, rng)?;
    PromptPair::from_problems(*class, examples, clean, corrupt)
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    m: u32,
    n: u32,
    k: usize,
    max_digits: u32,
    seed: Option<u64>,
    examples: Vec<Problem>,
    clean: Problem,
    corrupt: Problem,
}

/// One JSON object per line.
pub fn write_pairs_jsonl<W: Write>(pairs: &[PromptPair], mut out: W) -> Result<()> {
    for p in pairs {
        let rec = PairRecord {
            m: p.class.m,
            n: p.class.n,
            k: p.class.k,
            max_digits: p.class.max_digits,
            seed: p.seed,
            examples: p.examples.clone(),
            clean: p.clean,
            corrupt: p.corrupt,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs_jsonl<R: BufRead>(input: R) -> Result<Vec<PromptPair>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)?;
        let class = TaskClass::with_shots(rec.m, rec.n, rec.k, rec.max_digits)?;
        let mut pair = PromptPair::from_problems(class, rec.examples, rec.clean, rec.corrupt)?;
        pair.seed = rec.seed;
        out.push(pair);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from;
    use crate::tasks::{all_classes, detokenize};

    #[test]
    fn counterfactual_keeps_answer_length() {
        let class = TaskClass::new(2, 2).unwrap();
        let clean = Problem::new(43, 90);
        let mut rng = rng_from(0);
        for _ in 0..200 {
            let c = sample_counterfactual(&clean, &class, &mut rng).unwrap();
            assert_eq!(digit_len(c.sum), 3);
            assert_ne!(c.sum, 133);
        }
    }

    #[test]
    fn counterfactual_in_smallest_class() {
        let class = TaskClass::new(1, 1).unwrap();
        let clean = Problem::new(1, 1);
        let mut rng = rng_from(4);
        for _ in 0..200 {
            let c = sample_counterfactual(&clean, &class, &mut rng).unwrap();
            assert_ne!((c.a, c.b), (1, 1));
            assert_ne!(c.sum, 2);
            assert!(c.sum < 10);
        }
    }

    #[test]
    fn counterfactual_is_seeded() {
        let class = TaskClass::new(3, 5).unwrap();
        let clean = Problem::new(123, 45678);
        let draw = |s| sample_counterfactual(&clean, &class, &mut rng_from(s)).unwrap();
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn pairs_are_aligned_in_every_class() {
        let mut rng = rng_from(1);
        for class in all_classes(8, 2) {
            for _ in 0..20 {
                let p = build_prompt_pair(&class, &mut rng).unwrap();
                p.validate().unwrap();
                assert_eq!(p.clean_tokens.len(), p.corrupted_tokens.len());
                assert_eq!(p.clean_tokens[..p.prefix_len], p.corrupted_tokens[..p.prefix_len]);
                assert!(p.clean_tokens.len() <= class.max_prompt_tokens());
            }
        }
    }

    #[test]
    fn answer_span_follows_formatter() {
        let class = TaskClass::new(3, 2).unwrap();
        let mut rng = rng_from(2);
        for _ in 0..100 {
            let p = build_prompt_pair(&class, &mut rng).unwrap();
            let prompt = format_prompt(&p.examples, (p.clean.a, p.clean.b), 2).unwrap();
            let answer = p.clean.sum.to_string();
            // BOS, the prompt text and the separating space come first
            assert_eq!(p.answer_span.start, 1 + prompt.len() + 1);
            assert_eq!(p.answer_span.len(), answer.len());
            let text = detokenize(&p.clean_tokens[p.answer_span.clone()]).unwrap();
            assert_eq!(text, answer);
            let before = detokenize(&p.clean_tokens[..p.answer_span.start]).unwrap();
            assert!(before.ends_with("= "));
        }
    }

    #[test]
    fn prefix_is_bos_plus_examples() {
        let class = TaskClass::new(2, 2).unwrap();
        let pair = PromptPair::from_problems(
            class,
            vec![Problem::new(15, 85), Problem::new(65, 12)],
            Problem::new(43, 90),
            Problem::new(51, 77),
        )
        .unwrap();
        let prefix = detokenize(&pair.clean_tokens[..pair.prefix_len]).unwrap();
        assert_eq!(prefix, "15 + 85 = 100\n65 + 12 = 77\n");
        assert_eq!(
            detokenize(&pair.corrupted_tokens).unwrap(),
            "15 + 85 = 100\n65 + 12 = 77\n51 + 77 = 133"
        );
        assert_eq!(pair.y_corrupt, vec![1, 2, 8]);
    }

    #[test]
    fn out_of_class_problems_are_rejected() {
        let class = TaskClass::new(2, 2).unwrap();
        let r = PromptPair::from_problems(class, vec![], Problem::new(4, 90), Problem::new(51, 77));
        assert!(r.is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let class = TaskClass::new(4, 1).unwrap();
        let mut rng = rng_from(3);
        let mut pairs: Vec<PromptPair> = (0..5).map(|_| build_prompt_pair(&class, &mut rng).unwrap()).collect();
        pairs[2].seed = Some(42);
        let mut buf = Vec::new();
        write_pairs_jsonl(&pairs, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 5);
        let back = read_pairs_jsonl(&buf[..]).unwrap();
        assert_eq!(back, pairs);
    }
}
