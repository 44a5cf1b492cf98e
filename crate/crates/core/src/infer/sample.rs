//! Nucleus (top-p) sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The nucleus of a distribution: the smallest probability-sorted prefix
/// whose cumulative mass reaches `p`, renormalized. Sort ties break by
/// token id, so the set is a deterministic function of the input.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
    debug_assert!(p > 0.0 && p <= 1.0);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push((i, probs[i]));
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    for (_, q) in kept.iter_mut() {
        *q /= mass;
    }
    kept
}

/// Draw one token from the nucleus with the provided generator.
pub fn top_p_sample(probs: &[f64], p: f64, rng: &mut ChaCha8Rng) -> usize {
    let kept = nucleus(probs, p);
    let mut dart = rng.gen::<f64>();
    for &(i, q) in &kept {
        dart -= q;
        if dart <= 0.0 {
            return i;
        }
    }
    kept.last().unwrap().0
}

/// Softmax restricted to allowed ids; disallowed ids get probability 0.
pub fn masked_softmax(logits: &[f64], allowed: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        if allowed(i) && l > max {
            max = l;
        }
    }
    let mut probs = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        if allowed(i) {
            let e = (l - max).exp();
            probs[i] = e;
            sum += e;
        }
    }
    for q in probs.iter_mut() {
        *q /= sum;
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn nucleus_keeps_smallest_prefix_reaching_p() {
        let dist = [0.5, 0.3, 0.15, 0.05];
        let kept = nucleus(&dist, 0.9);
        let ids: Vec<usize> = kept.iter().map(|&(i, _)| i).collect();
        assert_eq!(ids, vec![0, 1, 2], "cumulative 0.95 >= 0.9 after three");
        let expect = [10.0 / 19.0, 6.0 / 19.0, 3.0 / 19.0];
        for ((_, q), e) in kept.iter().zip(expect) {
            assert!((q - e).abs() < 1e-12);
        }
    }

    #[test]
    fn p_one_keeps_everything() {
        let dist = [0.5, 0.3, 0.15, 0.05];
        let kept = nucleus(&dist, 1.0);
        assert_eq!(kept.len(), 4);
        for (i, &(id, q)) in kept.iter().enumerate() {
            assert_eq!(id, i);
            assert!((q - dist[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_distribution_always_wins() {
        let dist = [0.0, 1.0, 0.0];
        let mut rng = rng_from(0);
        for _ in 0..20 {
            assert_eq!(top_p_sample(&dist, 0.9, &mut rng), 1);
        }
    }

    #[test]
    fn ties_break_by_token_id() {
        let dist = [0.25, 0.25, 0.25, 0.25];
        let kept = nucleus(&dist, 0.5);
        let ids: Vec<usize> = kept.iter().map(|&(i, _)| i).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let dist = [0.4, 0.3, 0.2, 0.1];
        let a: Vec<usize> = {
            let mut rng = rng_from(5);
            (0..30).map(|_| top_p_sample(&dist, 0.9, &mut rng)).collect()
        };
        let b: Vec<usize> = {
            let mut rng = rng_from(5);
            (0..30).map(|_| top_p_sample(&dist, 0.9, &mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let logits = [1.0, 2.0, 3.0];
        let probs = masked_softmax(&logits, |i| i != 1);
        assert_eq!(probs[1], 0.0);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs[2] > probs[0]);
    }
}
