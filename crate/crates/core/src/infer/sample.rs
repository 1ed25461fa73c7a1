use rand::Rng;

use crate::tokenizer::TokenId;

/// Highest logit, lowest id among ties.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Softmax of `logits / temperature`, in f64.
pub fn softmax(logits: &[f32], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&z| ((z as f64 - max) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// The smallest set of most-probable tokens whose mass reaches `top_p`,
/// renormalized. Ordered by probability, then id.
pub fn top_p_filter(probs: &[f64], top_p: f64) -> Vec<(TokenId, f64)> {
    let mut order: Vec<(TokenId, f64)> = probs.iter().enumerate().map(|(i, &p)| (i as TokenId, p)).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = 0;
    for &(_, p) in &order {
        mass += p;
        keep += 1;
        if mass >= top_p {
            break;
        }
    }
    order.truncate(keep.max(1));
    let total: f64 = order.iter().map(|x| x.1).sum();
    order.iter_mut().for_each(|x| x.1 /= total);
    order
}

/// Draws from `logits`; temperature 0 is greedy.
pub fn sample<R: Rng + ?Sized>(logits: &[f32], temperature: f64, top_p: f64, rng: &mut R) -> TokenId {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let kept = top_p_filter(&softmax(logits, temperature), top_p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(id, p) in &kept {
        acc += p;
        if u < acc {
            return id;
        }
    }
    kept.last().expect("filter keeps at least one token").0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn argmax_ties_pick_lowest_id() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
    }

    #[test]
    fn top_p_prefix() {
        let kept = top_p_filter(&[0.1, 0.5, 0.15, 0.25], 0.7);
        let ids: Vec<TokenId> = kept.iter().map(|x| x.0).collect();
        assert_eq!(ids, [1, 3]);
        assert!((kept[0].1 - 0.5 / 0.75).abs() < 1e-12);
        assert_eq!(top_p_filter(&[0.1, 0.9], 1e-9).len(), 1);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let logits: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin()).collect();
        let draw = |seed| {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            (0..20).map(|_| sample(&logits, 1.0, 1.0, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    proptest! {
        #[test]
        fn filter_is_a_distribution(logits in proptest::collection::vec(-20.0f32..20.0, 1..64), p in 0.0f64..=1.0, t in 0.05f64..4.0) {
            let kept = top_p_filter(&softmax(&logits, t), p);
            prop_assert!(!kept.is_empty());
            let total: f64 = kept.iter().map(|x| x.1).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }
}
