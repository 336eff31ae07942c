//! Linear-chain CRF over `L` labels with virtual START and END states.
//!
//! Emissions are a row-major `n x L` matrix. Transitions are a row-major
//! `(L + 2) x (L + 2)` matrix `T[from][to]` where index `L` is START and
//! `L + 1` is END; rows into START and out of END are never read. The score of
//! a path `y` is
//! `T[START][y0] + sum_t E[t][y_t] + sum_t T[y_t][y_t+1] + T[y_last][END]`,
//! and an empty sequence scores `T[START][END]`.

use crate::linalg::log_sum_exp;

#[inline]
fn start(l: usize) -> usize {
    l
}

#[inline]
fn end(l: usize) -> usize {
    l + 1
}

fn check(emissions: &[f64], transitions: &[f64], l: usize) -> usize {
    assert!(l > 0, "at least one label");
    assert_eq!(transitions.len(), (l + 2) * (l + 2), "transitions are (L+2)x(L+2)");
    assert_eq!(emissions.len() % l, 0, "emissions are n x L");
    emissions.len() / l
}

/// Unnormalized path score.
pub fn score_sequence(emissions: &[f64], transitions: &[f64], n_labels: usize, labels: &[usize]) -> f64 {
    let n = check(emissions, transitions, n_labels);
    assert_eq!(labels.len(), n, "one label per position");
    let w = n_labels + 2;
    let mut prev = start(n_labels);
    let mut score = 0.0;
    for (t, &y) in labels.iter().enumerate() {
        assert!(y < n_labels, "label {y} out of range");
        score += transitions[prev * w + y] + emissions[t * n_labels + y];
        prev = y;
    }
    score + transitions[prev * w + end(n_labels)]
}

/// Forward log-potentials: `alpha[t][j]` is the log-sum of scores of all
/// prefixes ending in `j` at `t`, emission at `t` included.
pub(crate) fn forward(emissions: &[f64], transitions: &[f64], l: usize, alpha: &mut [f64]) -> f64 {
    let n = emissions.len() / l;
    let w = l + 2;
    if n == 0 {
        return transitions[start(l) * w + end(l)];
    }
    let mut scratch = vec![0.0; l];
    for j in 0..l {
        alpha[j] = transitions[start(l) * w + j] + emissions[j];
    }
    for t in 1..n {
        let (done, rest) = alpha.split_at_mut(t * l);
        let prev = &done[(t - 1) * l..];
        for j in 0..l {
            for i in 0..l {
                scratch[i] = prev[i] + transitions[i * w + j];
            }
            rest[j] = emissions[t * l + j] + log_sum_exp(&scratch);
        }
    }
    let last = &alpha[(n - 1) * l..n * l];
    for j in 0..l {
        scratch[j] = last[j] + transitions[j * w + end(l)];
    }
    log_sum_exp(&scratch)
}

/// Backward log-potentials: `beta[t][i]` is the log-sum of scores of all
/// suffixes after `t` given `y_t = i`, END transition included.
fn backward(emissions: &[f64], transitions: &[f64], l: usize, beta: &mut [f64]) {
    let n = emissions.len() / l;
    let w = l + 2;
    let mut scratch = vec![0.0; l];
    for i in 0..l {
        beta[(n - 1) * l + i] = transitions[i * w + end(l)];
    }
    for t in (0..n - 1).rev() {
        let (head, tail) = beta.split_at_mut((t + 1) * l);
        let next = &tail[..l];
        for i in 0..l {
            for j in 0..l {
                scratch[j] = transitions[i * w + j] + emissions[(t + 1) * l + j] + next[j];
            }
            head[t * l + i] = log_sum_exp(&scratch);
        }
    }
}

/// Log partition function `log sum_y exp(score(y))`.
pub fn crf_log_partition(emissions: &[f64], transitions: &[f64], n_labels: usize) -> f64 {
    let n = check(emissions, transitions, n_labels);
    let mut alpha = vec![0.0; n * n_labels];
    forward(emissions, transitions, n_labels, &mut alpha)
}

/// Negative log-likelihood of `gold`.
pub fn crf_nll(emissions: &[f64], transitions: &[f64], n_labels: usize, gold: &[usize]) -> f64 {
    crf_log_partition(emissions, transitions, n_labels) - score_sequence(emissions, transitions, n_labels, gold)
}

/// Adds `scale * d logZ / d(emissions, transitions)` into the gradient
/// buffers, given the forward pass `alpha` and its result `log_z`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_partition_grad(
    emissions: &[f64],
    transitions: &[f64],
    l: usize,
    alpha: &[f64],
    log_z: f64,
    scale: f64,
    d_emissions: Option<&mut [f64]>,
    d_transitions: Option<&mut [f64]>,
) {
    let n = emissions.len() / l;
    let w = l + 2;
    if n == 0 {
        if let Some(dt) = d_transitions {
            dt[start(l) * w + end(l)] += scale;
        }
        return;
    }
    let mut beta = vec![0.0; n * l];
    backward(emissions, transitions, l, &mut beta);
    if let Some(de) = d_emissions {
        for k in 0..n * l {
            de[k] += scale * (alpha[k] + beta[k] - log_z).exp();
        }
    }
    if let Some(dt) = d_transitions {
        for j in 0..l {
            dt[start(l) * w + j] += scale * (alpha[j] + beta[j] - log_z).exp();
            dt[j * w + end(l)] += scale * (alpha[(n - 1) * l + j] + transitions[j * w + end(l)] - log_z).exp();
        }
        for t in 0..n - 1 {
            let a = &alpha[t * l..(t + 1) * l];
            let e = &emissions[(t + 1) * l..(t + 2) * l];
            let b = &beta[(t + 1) * l..(t + 2) * l];
            for i in 0..l {
                for j in 0..l {
                    dt[i * w + j] += scale * (a[i] + transitions[i * w + j] + e[j] + b[j] - log_z).exp();
                }
            }
        }
    }
}

/// Highest-scoring path and its score. Ties resolve to the lower label index
/// at every back-pointer and at the final state.
pub fn viterbi_decode(emissions: &[f64], transitions: &[f64], n_labels: usize) -> (Vec<usize>, f64) {
    let l = n_labels;
    let n = check(emissions, transitions, l);
    let w = l + 2;
    if n == 0 {
        return (Vec::new(), transitions[start(l) * w + end(l)]);
    }
    let mut delta: Vec<f64> = (0..l).map(|j| transitions[start(l) * w + j] + emissions[j]).collect();
    let mut next = vec![0.0; l];
    let mut back = vec![0usize; n * l];
    for t in 1..n {
        for j in 0..l {
            let mut best = (0, delta[0] + transitions[j]);
            for i in 1..l {
                let s = delta[i] + transitions[i * w + j];
                if s > best.1 {
                    best = (i, s);
                }
            }
            back[t * l + j] = best.0;
            next[j] = best.1 + emissions[t * l + j];
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut best = (0, delta[0] + transitions[end(l)]);
    for j in 1..l {
        let s = delta[j] + transitions[j * w + end(l)];
        if s > best.1 {
            best = (j, s);
        }
    }
    let mut path = vec![best.0; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t * l + path[t]];
    }
    (path, best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..l).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn random(n: usize, l: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = (0..n * l).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = (0..(l + 2) * (l + 2)).map(|_| rng.gen_range(-2.0..2.0)).collect();
        (e, t)
    }

    #[test]
    fn two_label_hand_example() {
        // L = 2; transitions 4x4 with START = 2, END = 3.
        let e = [1.0, 0.0, 0.0, 2.0];
        let mut t = [0.0; 16];
        t[2 * 4] = 0.5; // START -> 0
        t[1] = -1.0; // 0 -> 1
        t[4 + 3] = 0.25; // 1 -> END
        assert_eq!(score_sequence(&e, &t, 2, &[0, 1]), 0.5 + 1.0 - 1.0 + 2.0 + 0.25);
        let scores = [0.5 + 1.0, 0.5 + 1.0 - 1.0 + 2.0 + 0.25, 0.0, 2.0 + 0.25];
        let expect = scores.iter().map(|s: &f64| s.exp()).sum::<f64>().ln();
        assert!((crf_log_partition(&e, &t, 2) - expect).abs() < 1e-12);
        assert_eq!(viterbi_decode(&e, &t, 2), (vec![0, 1], 2.75));
    }

    #[test]
    fn empty_sequence_uses_start_to_end() {
        let mut t = vec![0.0; 9];
        t[3 + 2] = 0.7;
        assert_eq!(crf_log_partition(&[], &t, 1), 0.7);
        assert_eq!(viterbi_decode(&[], &t, 1), (vec![], 0.7));
    }

    #[test]
    fn all_equal_scores_decode_to_lowest_labels() {
        let l = 4;
        let (path, _) = viterbi_decode(&vec![0.0; 5 * l], &vec![0.0; (l + 2) * (l + 2)], l);
        assert_eq!(path, vec![0; 5]);
    }

    #[test]
    fn log_partition_is_stable_for_large_scores() {
        let l = 3;
        let e = vec![800.0; 4 * l];
        let t = vec![0.0; 25];
        let z = crf_log_partition(&e, &t, l);
        assert!((z - (3200.0 + 4.0 * 3f64.ln())).abs() < 1e-9, "{z}");
    }

    #[test]
    fn gradient_equals_marginals_by_enumeration() {
        let (l, n) = (3, 4);
        let (e, t) = random(n, l, 9);
        let w = l + 2;
        let paths = all_paths(n, l);
        let z = crf_log_partition(&e, &t, l);
        let mut want_e = vec![0.0; n * l];
        let mut want_t = vec![0.0; w * w];
        for p in &paths {
            let prob = (score_sequence(&e, &t, l, p) - z).exp();
            let mut prev = l;
            for (k, &y) in p.iter().enumerate() {
                want_e[k * l + y] += prob;
                want_t[prev * w + y] += prob;
                prev = y;
            }
            want_t[prev * w + l + 1] += prob;
        }
        let mut alpha = vec![0.0; n * l];
        let z2 = forward(&e, &t, l, &mut alpha);
        let (mut ge, mut gt) = (vec![0.0; n * l], vec![0.0; w * w]);
        accumulate_partition_grad(&e, &t, l, &alpha, z2, 1.0, Some(&mut ge), Some(&mut gt));
        for (a, b) in ge.iter().zip(&want_e).chain(gt.iter().zip(&want_t)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn partition_and_viterbi_match_enumeration(l in 1usize..4, n in 1usize..5, seed in 0u64..1000) {
            let (e, t) = random(n, l, seed);
            let scores: Vec<(f64, Vec<usize>)> = all_paths(n, l)
                .into_iter()
                .map(|p| (score_sequence(&e, &t, l, &p), p))
                .collect();
            let brute_z = log_sum_exp(&scores.iter().map(|s| s.0).collect::<Vec<_>>());
            prop_assert!((crf_log_partition(&e, &t, l) - brute_z).abs() < 1e-9);
            let best = scores.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
            let (path, score) = viterbi_decode(&e, &t, l);
            prop_assert!((score - best).abs() < 1e-9);
            prop_assert!((score_sequence(&e, &t, l, &path) - score).abs() < 1e-9);
        }

        #[test]
        fn nll_is_non_negative(l in 1usize..4, n in 1usize..5, seed in 0u64..1000, gold_seed in 0usize..1000) {
            let (e, t) = random(n, l, seed);
            let gold: Vec<usize> = (0..n).map(|k| (gold_seed / (k + 1)) % l).collect();
            prop_assert!(crf_nll(&e, &t, l, &gold) >= -1e-12);
        }
    }
}
