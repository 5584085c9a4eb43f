//! Edit distance, alignments and error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Operation counts of one minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub hits: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl Alignment {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Backtraces a minimum-cost alignment, preferring hits/substitutions, then
/// deletions, then insertions.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Alignment {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut a = Alignment::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                if same {
                    a.hits += 1;
                } else {
                    a.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            a.deletions += 1;
            i -= 1;
        } else {
            a.insertions += 1;
            j -= 1;
        }
    }
    a
}

/// Characters of a token sequence, tokens concatenated without separators.
pub fn characters<S: AsRef<str>>(tokens: &[S]) -> Vec<char> {
    tokens.iter().flat_map(|t| t.as_ref().chars()).collect()
}

fn rate(edits: usize, length: usize, unit: &str) -> Result<f64> {
    if length == 0 {
        return Err(Error::InvalidInput(format!("total reference length in {unit} is zero")));
    }
    Ok(edits as f64 / length as f64)
}

/// Total word edits over total reference words.
pub fn wer<'a, S, I>(pairs: I) -> Result<f64>
where
    S: AsRef<str> + PartialEq + 'a,
    I: IntoIterator<Item = (&'a [S], &'a [S])>,
{
    let (mut edits, mut words) = (0, 0);
    for (r, h) in pairs {
        edits += edit_distance(r, h);
        words += r.len();
    }
    rate(edits, words, "words")
}

/// Total character edits over total reference characters.
pub fn cer<'a, S, I>(pairs: I) -> Result<f64>
where
    S: AsRef<str> + 'a,
    I: IntoIterator<Item = (&'a [S], &'a [S])>,
{
    let (mut edits, mut chars) = (0, 0);
    for (r, h) in pairs {
        let (rc, hc) = (characters(r), characters(h));
        edits += edit_distance(&rc, &hc);
        chars += rc.len();
    }
    rate(edits, chars, "characters")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn naive(a: &[u8], b: &[u8]) -> usize {
        match (a, b) {
            ([], _) => b.len(),
            (_, []) => a.len(),
            ([x, ra @ ..], [y, rb @ ..]) => {
                let sub = naive(ra, rb) + usize::from(x != y);
                sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
            }
        }
    }

    #[test]
    fn examples() {
        assert_eq!(edit_distance(&words("a b c"), &words("a b c")), 0);
        assert_eq!(edit_distance(&["a"], &[] as &[&str]), 1);
        let r = words("play some jazz music");
        let h = words("play sum jazz");
        assert_eq!(edit_distance(&r, &h), 2);
        let a = align(&r, &h);
        assert_eq!((a.hits, a.substitutions, a.deletions, a.insertions), (2, 1, 1, 0));
    }

    #[test]
    fn rates() {
        let r = vec![words("a b c d")];
        let h = vec![words("a x c d")];
        let pairs = || r.iter().zip(&h).map(|(a, b)| (a.as_slice(), b.as_slice()));
        assert_eq!(wer(pairs()).unwrap(), 0.25);
        assert_eq!(wer(r.iter().map(|a| (a.as_slice(), a.as_slice()))).unwrap(), 0.0);
        let c = cer([(&["abc"][..], &["abd"][..])]).unwrap();
        assert!((c - 1.0 / 3.0).abs() < 1e-15);
        let empty: Vec<&str> = vec![];
        assert!(wer([(&empty[..], &empty[..])]).is_err());
    }

    proptest! {
        #[test]
        fn matches_naive_recursion(a in prop::collection::vec(0u8..3, 0..6), b in prop::collection::vec(0u8..3, 0..6)) {
            prop_assert_eq!(edit_distance(&a, &b), naive(&a, &b));
            prop_assert_eq!(align(&a, &b).errors(), naive(&a, &b));
        }

        #[test]
        fn is_a_metric(
            a in prop::collection::vec(0u8..4, 0..7),
            b in prop::collection::vec(0u8..4, 0..7),
            c in prop::collection::vec(0u8..4, 0..7),
        ) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }

        #[test]
        fn alignment_accounts_for_both_lengths(a in prop::collection::vec(0u8..3, 0..8), b in prop::collection::vec(0u8..3, 0..8)) {
            let al = align(&a, &b);
            prop_assert_eq!(al.hits + al.substitutions + al.deletions, a.len());
            prop_assert_eq!(al.hits + al.substitutions + al.insertions, b.len());
        }
    }
}
