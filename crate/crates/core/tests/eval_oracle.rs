//! Second-implementation oracle for the edit-distance dynamic program, plus
//! the metric-level properties (symmetry, triangle inequality, reorder
//! invariance).

mod common;

use std::collections::HashMap;

use asrlab::eval::{edit_distance, error_rate, score_corpus, Unit};
use asrlab::rng::DetRng;

/// Plain recursive Levenshtein with memoization — deliberately written in a
/// different style from the production dynamic program so the two can
/// disagree if either is wrong. Returns total distance only.
fn oracle_distance(r: &[u8], h: &[u8]) -> usize {
    fn go(r: &[u8], h: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == r.len() {
            return h.len() - j;
        }
        if j == h.len() {
            return r.len() - i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let d = if r[i] == h[j] {
            go(r, h, i + 1, j + 1, memo)
        } else {
            let sub = go(r, h, i + 1, j + 1, memo);
            let del = go(r, h, i + 1, j, memo);
            let ins = go(r, h, i, j + 1, memo);
            1 + sub.min(del).min(ins)
        };
        memo.insert((i, j), d);
        d
    }
    go(r, h, 0, 0, &mut HashMap::new())
}

fn random_seq(rng: &mut DetRng, max_len: usize, alphabet: u8) -> Vec<u8> {
    let len = rng.below(max_len + 1);
    (0..len).map(|_| rng.below(alphabet as usize) as u8).collect()
}

#[test]
fn dp_matches_memoized_oracle_on_500_random_pairs() {
    let mut rng = DetRng::new(20240917);
    for case in 0..500 {
        // Small alphabets force heavy tie territory.
        let alphabet = 2 + (case % 5) as u8;
        let r = random_seq(&mut rng, 12, alphabet);
        let h = random_seq(&mut rng, 12, alphabet);
        let got = edit_distance(&r, &h).total();
        let want = oracle_distance(&r, &h);
        assert_eq!(got, want, "case {case}: ref {r:?} hyp {h:?}");
    }
}

#[test]
fn total_distance_is_symmetric() {
    let mut rng = DetRng::new(31);
    for case in 0..200 {
        let a = random_seq(&mut rng, 10, 3);
        let b = random_seq(&mut rng, 10, 3);
        assert_eq!(
            edit_distance(&a, &b).total(),
            edit_distance(&b, &a).total(),
            "case {case}"
        );
    }
}

#[test]
fn triangle_inequality_on_random_triples() {
    let mut rng = DetRng::new(32);
    for case in 0..200 {
        let a = random_seq(&mut rng, 8, 3);
        let b = random_seq(&mut rng, 8, 3);
        let c = random_seq(&mut rng, 8, 3);
        let ab = edit_distance(&a, &b).total();
        let bc = edit_distance(&b, &c).total();
        let ac = edit_distance(&a, &c).total();
        assert!(ac <= ab + bc, "case {case}: d(a,c)={ac} > {ab}+{bc}");
    }
}

#[test]
fn corpus_rate_is_invariant_under_reordering() {
    let mut pairs: Vec<(String, String)> = vec![
        ("今天天气好".into(), "今天气好".into()),
        ("你好世界".into(), "你好世界".into()),
        ("一二三四五六".into(), "一三四五六七".into()),
        ("声音识别".into(), "声音识".into()),
    ];
    let fwd = error_rate(&score_corpus(&pairs, Unit::Char)).unwrap();
    pairs.reverse();
    let rev = error_rate(&score_corpus(&pairs, Unit::Char)).unwrap();
    assert_eq!(fwd, rev);
    pairs.swap(0, 2);
    let swapped = error_rate(&score_corpus(&pairs, Unit::Char)).unwrap();
    assert_eq!(fwd, swapped);
}
