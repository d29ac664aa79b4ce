use rand::Rng;

use super::{digit_len, digit_tokens, sample_prompt, tokenize, TaskClass};
use crate::error::Result;
use crate::model::Model;

/// Anything that continues a token prompt by `n` tokens.
pub trait AnswerPredictor {
    fn predict(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>>;
}

impl AnswerPredictor for Model {
    fn predict(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
        self.generate_greedy(prompt, n)
    }
}

/// Exact-match accuracy over `n_samples` fresh prompts: the predictor emits
/// exactly as many tokens as the true sum has digits.
pub fn eval_accuracy<P, R>(predictor: &P, class: &TaskClass, n_samples: usize, rng: &mut R) -> Result<f64>
where
    P: AnswerPredictor + ?Sized,
    R: Rng + ?Sized,
{
    let mut hits = 0usize;
    for _ in 0..n_samples {
        let (_, query, text) = sample_prompt(class, rng);
        let prompt = tokenize(&text)?;
        let out = predictor.predict(&prompt, digit_len(query.sum) as usize)?;
        if out == digit_tokens(query.sum) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_samples.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::seeds::rng_from;
    use crate::tasks::{detokenize, parse_prompt, PAD};

    struct Oracle;

    impl AnswerPredictor for Oracle {
        fn predict(&self, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
            let text = detokenize(prompt)?;
            let (_, (a, b)) = parse_prompt(text.trim_end())?;
            let out = digit_tokens(a + b);
            assert_eq!(out.len(), n);
            Ok(out)
        }
    }

    struct Padder;

    impl AnswerPredictor for Padder {
        fn predict(&self, _prompt: &[usize], n: usize) -> Result<Vec<usize>> {
            Ok(vec![PAD; n])
        }
    }

    #[test]
    fn oracle_scores_one() {
        let class = TaskClass::new(3, 5).unwrap();
        let acc = eval_accuracy(&Oracle, &class, 200, &mut rng_from(0)).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn pad_stub_scores_zero() {
        let class = TaskClass::new(2, 2).unwrap();
        assert_eq!(eval_accuracy(&Padder, &class, 100, &mut rng_from(0)).unwrap(), 0.0);
    }

    #[test]
    fn untrained_model_fails_long_sums() {
        let model = init_model(&ModelConfig::default()).unwrap();
        let class = TaskClass::new(8, 8).unwrap();
        let acc = eval_accuracy(&model, &class, 20, &mut rng_from(0)).unwrap();
        assert!(acc < 0.05);
    }
}
