use crate::error::{LabError, Result};

pub const PLUS: usize = 10;
pub const EQUALS: usize = 11;
pub const SPACE: usize = 12;
pub const NEWLINE: usize = 13;
pub const BOS: usize = 14;
pub const PAD: usize = 15;
pub const VOCAB_SIZE: usize = 16;

fn encode(c: char) -> Result<usize> {
    match c {
        '0'..='9' => Ok(c as usize - '0' as usize),
        '+' => Ok(PLUS),
        '=' => Ok(EQUALS),
        ' ' => Ok(SPACE),
        '\n' => Ok(NEWLINE),
        _ => Err(LabError::Tokenize(c)),
    }
}

/// Character-level encoding with one leading BOS.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(text.len() + 1);
    out.push(BOS);
    for c in text.chars() {
        out.push(encode(c)?);
    }
    Ok(out)
}

/// Inverse of [`tokenize`]. BOS and PAD render as nothing.
pub fn detokenize(tokens: &[usize]) -> Result<String> {
    let mut out = String::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            0..=9 => out.push((b'0' + t as u8) as char),
            PLUS => out.push('+'),
            EQUALS => out.push('='),
            SPACE => out.push(' '),
            NEWLINE => out.push('\n'),
            BOS | PAD => {}
            _ => {
                return Err(LabError::TokenOutOfRange {
                    token: t,
                    vocab: VOCAB_SIZE,
                })
            }
        }
    }
    Ok(out)
}

/// Tokens of the decimal digits of `x`, without BOS.
pub fn digit_tokens(x: u64) -> Vec<usize> {
    x.to_string().bytes().map(|b| (b - b'0') as usize).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_prompt() {
        let t = tokenize("1 + 2 =").unwrap();
        assert_eq!(t, vec![BOS, 1, SPACE, PLUS, SPACE, 2, SPACE, EQUALS]);
        assert_eq!(detokenize(&t).unwrap(), "1 + 2 =");
    }

    #[test]
    fn letters_are_rejected() {
        assert!(matches!(tokenize("a + b"), Err(LabError::Tokenize('a'))));
    }

    #[test]
    fn digits_of_sum() {
        assert_eq!(digit_tokens(133), vec![1, 3, 3]);
        assert_eq!(digit_tokens(0), vec![0]);
    }

    proptest! {
        #[test]
        fn round_trip(text in "[0-9+= \n]{0,60}") {
            let t = tokenize(&text).unwrap();
            prop_assert_eq!(t.len(), text.chars().count() + 1);
            prop_assert_eq!(detokenize(&t).unwrap(), text);
        }
    }
}
