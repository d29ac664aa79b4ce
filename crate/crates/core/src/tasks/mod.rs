//! m,n-digit addition problems: classes, partitions, prompts, tokenization
//! and clean/counterfactual pairs.

mod eval;
mod pair;
mod tokenizer;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub use eval::{eval_accuracy, AnswerPredictor};
pub use pair::{build_prompt_pair, read_pairs_jsonl, sample_counterfactual, write_pairs_jsonl, PromptPair};
pub use tokenizer::{detokenize, digit_tokens, tokenize, BOS, EQUALS, NEWLINE, PAD, PLUS, SPACE, VOCAB_SIZE};

pub const DEFAULT_MAX_DIGITS: u32 = 8;
pub const DEFAULT_SHOTS: usize = 2;

/// An (m, n, k) addition subtask: `a` has `m` digits, `b` has `n`, and
/// prompts carry `k` solved examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskClass {
    pub m: u32,
    pub n: u32,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_d")]
    pub max_digits: u32,
}

fn default_k() -> usize {
    DEFAULT_SHOTS
}

fn default_d() -> u32 {
    DEFAULT_MAX_DIGITS
}

impl TaskClass {
    pub fn new(m: u32, n: u32) -> Result<Self> {
        Self::with_shots(m, n, DEFAULT_SHOTS, DEFAULT_MAX_DIGITS)
    }

    pub fn with_shots(m: u32, n: u32, k: usize, max_digits: u32) -> Result<Self> {
        let c = Self { m, n, k, max_digits };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=18).contains(&self.max_digits) {
            return Err(LabError::InvalidClass(format!(
                "max digits {} outside 1..=18",
                self.max_digits
            )));
        }
        if self.m < 1 || self.n < 1 || self.m > self.max_digits || self.n > self.max_digits {
            return Err(LabError::InvalidClass(format!(
                "({}, {}) outside 1..={}",
                self.m, self.n, self.max_digits
            )));
        }
        Ok(())
    }

    pub fn a_range(&self) -> (u64, u64) {
        digit_range(self.m)
    }

    pub fn b_range(&self) -> (u64, u64) {
        digit_range(self.n)
    }

    pub fn partition(&self) -> Partition {
        classify_partition(self.m, self.n)
    }

    /// Whether `(a, b)` lies in this class.
    pub fn contains(&self, a: u64, b: u64) -> bool {
        digit_len(a) == self.m && digit_len(b) == self.n
    }

    /// Token length of a full prompt with the longest possible answer.
    pub fn max_prompt_tokens(&self) -> usize {
        let line = (self.m + self.n + self.m.max(self.n) + 1) as usize + 7;
        (self.k + 1) * line
    }
}

impl fmt::Display for TaskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.m, self.n)
    }
}

/// Every class with `1 <= m, n <= max_digits`, ordered by `m` then `n`.
pub fn all_classes(max_digits: u32, k: usize) -> Vec<TaskClass> {
    (1..=max_digits)
        .flat_map(|m| (1..=max_digits).map(move |n| TaskClass { m, n, k, max_digits }))
        .collect()
}

fn digit_range(digits: u32) -> (u64, u64) {
    (10u64.pow(digits - 1), 10u64.pow(digits) - 1)
}

pub fn digit_len(x: u64) -> u32 {
    if x == 0 {
        1
    } else {
        x.ilog10() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    AGreater,
    BGreater,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Symmetric,
    Boundary(Orientation),
    Interior,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::Symmetric,
        Partition::Boundary(Orientation::AGreater),
        Partition::Boundary(Orientation::BGreater),
        Partition::Interior,
    ];

    /// Short file-friendly label.
    pub fn label(&self) -> &'static str {
        match self {
            Partition::Symmetric => "symmetric",
            Partition::Boundary(Orientation::AGreater) => "boundary_a_greater",
            Partition::Boundary(Orientation::BGreater) => "boundary_b_greater",
            Partition::Interior => "interior",
        }
    }
}

/// Symmetric when `m == n`, else boundary when one operand has a single
/// digit, else interior.
pub fn classify_partition(m: u32, n: u32) -> Partition {
    if m == n {
        Partition::Symmetric
    } else if n == 1 {
        Partition::Boundary(Orientation::AGreater)
    } else if m == 1 {
        Partition::Boundary(Orientation::BGreater)
    } else {
        Partition::Interior
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Problem {
    pub a: u64,
    pub b: u64,
    pub sum: u64,
}

impl Problem {
    pub fn new(a: u64, b: u64) -> Self {
        Self { a, b, sum: a + b }
    }
}

pub fn sample_problem<R: Rng + ?Sized>(class: &TaskClass, rng: &mut R) -> Problem {
    let (alo, ahi) = class.a_range();
    let (blo, bhi) = class.b_range();
    let a = rng.random_range(alo..=ahi);
    let b = rng.random_range(blo..=bhi);
    Problem::new(a, b)
}

/// `A + B = S` lines for the examples, then `A + B =` for the query.
pub fn format_prompt(examples: &[Problem], query: (u64, u64), k: usize) -> Result<String> {
    if examples.len() != k {
        return Err(LabError::ExampleCount {
            expected: k,
            got: examples.len(),
        });
    }
    let (qm, qn) = (digit_len(query.0), digit_len(query.1));
    let mut out = String::new();
    for ex in examples {
        if digit_len(ex.a) != qm || digit_len(ex.b) != qn {
            return Err(LabError::MixedClasses {
                expected: format!("{qm},{qn}"),
                found: format!("{},{}", digit_len(ex.a), digit_len(ex.b)),
            });
        }
        out.push_str(&format!("{} + {} = {}\n", ex.a, ex.b, ex.sum));
    }
    out.push_str(&format!("{} + {} =", query.0, query.1));
    Ok(out)
}

/// Inverse of [`format_prompt`]: the solved examples and the query operands.
pub fn parse_prompt(text: &str) -> Result<(Vec<Problem>, (u64, u64))> {
    let bad = || LabError::InvalidClass(format!("unparseable prompt {text:?}"));
    let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
    let mut lines: Vec<&str> = text.split('\n').collect();
    let last = lines.pop().ok_or_else(bad)?;
    let mut examples = Vec::with_capacity(lines.len());
    for line in lines {
        let (lhs, s) = line.split_once(" = ").ok_or_else(bad)?;
        let (a, b) = lhs.split_once(" + ").ok_or_else(bad)?;
        examples.push(Problem {
            a: num(a)?,
            b: num(b)?,
            sum: num(s)?,
        });
    }
    let lhs = last.strip_suffix(" =").ok_or_else(bad)?;
    let (a, b) = lhs.split_once(" + ").ok_or_else(bad)?;
    Ok((examples, (num(a)?, num(b)?)))
}

/// Fresh few-shot examples and a query from `class`; returns the examples,
/// the query problem and the prompt text ending in `"= "`.
pub fn sample_prompt<R: Rng + ?Sized>(class: &TaskClass, rng: &mut R) -> (Vec<Problem>, Problem, String) {
    let examples: Vec<Problem> = (0..class.k).map(|_| sample_problem(class, rng)).collect();
    let query = sample_problem(class, rng);
    let mut text = format_prompt(&examples, (query.a, query.b), class.k).expect("examples share the class");
    text.push(' ');
    (examples, query, text)
}
