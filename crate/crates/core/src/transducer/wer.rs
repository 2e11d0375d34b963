//! Word error rate arithmetic. On synthetic data every label symbol is one
//! word.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Substitution, deletion and insertion counts of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }
}

/// Minimum unit-cost alignment of `hyp` against `reference`.
///
/// Among minimum-cost alignments the one with the most substitutions wins.
/// That fixes all three counts (`D - I = |ref| - |hyp|`), so swapping the
/// arguments keeps `S` and swaps `D` and `I`.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // (cost, -substitutions), compared lexicographically
    let mut prev: Vec<(usize, isize)> = (0..=m).map(|j| (j, 0)).collect();
    let mut cur = vec![(0usize, 0isize); m + 1];
    for i in 1..=n {
        cur[0] = (i, 0);
        for j in 1..=m {
            let (dc, ds) = prev[j - 1];
            let diag = if reference[i - 1] == hyp[j - 1] { (dc, ds) } else { (dc + 1, ds - 1) };
            let del = (prev[j].0 + 1, prev[j].1);
            let ins = (cur[j - 1].0 + 1, cur[j - 1].1);
            cur[j] = diag.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (cost, neg_s) = prev[m];
    let substitutions = (-neg_s) as usize;
    let gaps = cost - substitutions;
    // deletions + insertions = gaps, deletions - insertions = n - m
    let deletions = ((gaps as isize + n as isize - m as isize) / 2) as usize;
    EditCounts { substitutions, deletions, insertions: gaps - deletions }
}

/// Scores of one locale (one synthetic language).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocaleWer {
    pub locale: String,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    /// Percent.
    pub wer: f64,
}

impl LocaleWer {
    pub fn new(locale: impl Into<String>, counts: EditCounts, ref_words: usize) -> Result<Self> {
        let locale = locale.into();
        if ref_words == 0 {
            return Err(Error::input(format!("locale {locale} has no reference words")));
        }
        Ok(LocaleWer {
            locale,
            substitutions: counts.substitutions,
            deletions: counts.deletions,
            insertions: counts.insertions,
            ref_words,
            wer: 100.0 * counts.errors() as f64 / ref_words as f64,
        })
    }

    /// Accumulates edit counts over `(reference, hypothesis)` pairs.
    pub fn score<'a, I>(locale: impl Into<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [usize], &'a [usize])>,
    {
        let mut counts = EditCounts::default();
        let mut words = 0;
        for (r, h) in pairs {
            counts += edit_distance(r, h);
            words += r.len();
        }
        Self::new(locale, counts, words)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub locales: Vec<LocaleWer>,
    /// Word-weighted average of the locale WERs, percent.
    pub overall: f64,
}

impl WerReport {
    pub fn new(locales: Vec<LocaleWer>) -> Result<Self> {
        let pairs: Vec<(f64, usize)> = locales.iter().map(|l| (l.wer, l.ref_words)).collect();
        let overall = weighted_overall_wer(&pairs)?;
        Ok(WerReport { locales, overall })
    }

    /// Columns `locale,S,D,I,ref_words,wer`, one row per locale.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("locale,S,D,I,ref_words,wer\n");
        for l in &self.locales {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                l.locale, l.substitutions, l.deletions, l.insertions, l.ref_words, l.wer
            );
        }
        out
    }
}

/// `sum(wer_i * words_i) / sum(words_i)`.
pub fn weighted_overall_wer(per_locale: &[(f64, usize)]) -> Result<f64> {
    if per_locale.is_empty() {
        return Err(Error::input("overall WER of an empty locale list"));
    }
    if let Some((_, _)) = per_locale.iter().find(|(_, w)| *w == 0) {
        return Err(Error::input("every locale needs at least one reference word"));
    }
    let total: f64 = per_locale.iter().map(|&(_, w)| w as f64).sum();
    Ok(per_locale.iter().map(|&(wer, w)| wer * w as f64).sum::<f64>() / total)
}

/// Relative WER reduction in percent; positive when `new` improves.
pub fn relative_reduction(baseline: f64, new: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::input(format!("baseline WER {baseline} must be positive")));
    }
    Ok(100.0 * (baseline - new) / baseline)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    /// Plain Levenshtein distance.
    fn levenshtein(a: &[u8], b: &[u8]) -> usize {
        let mut d = vec![vec![0; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in d[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn identical_sequences() {
        assert_eq!(edit_distance(&words("a b c"), &words("a b c")), EditCounts::default());
        assert_eq!(edit_distance::<u8>(&[], &[]), EditCounts::default());
    }

    #[test]
    fn single_deletion() {
        let c = edit_distance(&words("the cat sat"), &words("the sat"));
        assert_eq!(c, EditCounts { substitutions: 0, deletions: 1, insertions: 0 });
        let w = LocaleWer::new("x", c, 3).unwrap();
        assert!((w.wer - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn swapped_pair_costs_two() {
        assert_eq!(edit_distance(&words("a b"), &words("b a")).errors(), 2);
    }

    #[test]
    fn empty_sides() {
        assert_eq!(edit_distance(&[1, 2, 3], &[]), EditCounts { substitutions: 0, deletions: 3, insertions: 0 });
        assert_eq!(edit_distance(&[], &[1, 2]), EditCounts { substitutions: 0, deletions: 0, insertions: 2 });
    }

    proptest! {
        #[test]
        fn cost_matches_levenshtein(a in proptest::collection::vec(0u8..4, 0..12), b in proptest::collection::vec(0u8..4, 0..12)) {
            let c = edit_distance(&a, &b);
            prop_assert_eq!(c.errors(), levenshtein(&a, &b));
            prop_assert_eq!(c.deletions as isize - c.insertions as isize, a.len() as isize - b.len() as isize);
        }

        #[test]
        fn swap_keeps_substitutions(a in proptest::collection::vec(0u8..4, 0..12), b in proptest::collection::vec(0u8..4, 0..12)) {
            let x = edit_distance(&a, &b);
            let y = edit_distance(&b, &a);
            prop_assert_eq!(x.substitutions, y.substitutions);
            prop_assert_eq!(x.deletions, y.insertions);
            prop_assert_eq!(x.insertions, y.deletions);
        }

        #[test]
        fn overall_wer_is_scale_invariant(
            items in proptest::collection::vec((0.0f64..100.0, 1usize..10_000), 1..8),
            k in 1usize..50,
        ) {
            let a = weighted_overall_wer(&items).unwrap();
            let scaled: Vec<(f64, usize)> = items.iter().map(|&(w, n)| (w, n * k)).collect();
            prop_assert!((a - weighted_overall_wer(&scaled).unwrap()).abs() <= 1e-12);
        }
    }

    #[test]
    fn weighted_overall_table_row() {
        let wers = [20.44, 18.74, 32.0, 25.03, 21.98, 18.52, 20.81, 23.19, 22.1];
        let counts = [446215, 211163, 108736, 273150, 178392, 291183, 267438, 44070, 262894];
        let items: Vec<(f64, usize)> = wers.into_iter().zip(counts).collect();
        let overall = weighted_overall_wer(&items).unwrap();
        assert!((overall - 21.65).abs() <= 0.01, "{overall}");
    }

    #[test]
    fn weighted_overall_small_cases() {
        assert_eq!(weighted_overall_wer(&[(12.5, 7)]).unwrap(), 12.5);
        assert_eq!(weighted_overall_wer(&[(10.0, 1), (20.0, 1)]).unwrap(), 15.0);
        assert!(matches!(weighted_overall_wer(&[]), Err(Error::Input(_))));
        assert!(weighted_overall_wer(&[(1.0, 0)]).is_err());
    }

    #[test]
    fn relative_reduction_examples() {
        assert!((relative_reduction(19.13, 18.45).unwrap() - 3.55).abs() <= 0.01);
        assert!((relative_reduction(21.43, 20.67).unwrap() - 3.546).abs() <= 0.001);
        assert_eq!(relative_reduction(17.0, 17.0).unwrap(), 0.0);
        assert!(relative_reduction(0.0, 1.0).is_err());
        assert!(relative_reduction(-1.0, 1.0).is_err());
    }

    #[test]
    fn report_csv_and_json() {
        let a = LocaleWer::score("l0", [(&[1usize, 2, 3][..], &[1usize, 3][..])]).unwrap();
        let b = LocaleWer::score("l1", [(&[0usize][..], &[0usize][..])]).unwrap();
        let r = WerReport::new(vec![a, b]).unwrap();
        assert!((r.overall - 25.0).abs() < 1e-12);
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("locale,S,D,I,ref_words,wer"));
        assert!(lines.next().unwrap().starts_with("l0,0,1,0,3,33.33"));
        let back: WerReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
