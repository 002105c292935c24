//! Reference implementations the acceptance suite checks the library against.
//!
//! Nothing here calls into the code under test except for plain parameter
//! structs. Each oracle takes a different route to the same quantity: exact
//! arithmetic instead of stable floating point, rank counting instead of
//! sorting, differences instead of derivatives.

use astro_float::{BigFloat, Consts, RoundingMode};
use sbsr_core::objectives::CircleTParams;

pub mod circle {
    use super::*;

    /// Working precision of the exact evaluation, in bits.
    pub const PRECISION: usize = 384;
    const RM: RoundingMode = RoundingMode::ToEven;

    fn big(x: f64) -> BigFloat {
        BigFloat::from_f64(x, PRECISION)
    }

    /// The loss for one anchor evaluated directly from its definition, with
    /// no log-sum-exp shift and no softplus rewrite.
    pub fn exact(s_p: f64, s_n: &[f64], p: &CircleTParams) -> BigFloat {
        let mut cc = Consts::new().expect("constants cache");
        let zero = big(0.0);
        let one = big(1.0);
        let gamma = big(p.gamma);

        let mut sum = big(0.0);
        for &s in s_n {
            sum = sum.add(&big(s), PRECISION, RM);
        }
        let mean = sum.div(&big(s_n.len().max(1) as f64), PRECISION, RM);
        let decay = mean.neg().div(&big(p.tau), PRECISION, RM).exp(PRECISION, RM, &mut cc);
        let lambda = one
            .add(&big(p.beta).mul(&decay, PRECISION, RM), PRECISION, RM)
            .min(&big(p.lambda_max));

        let sp = big(s_p);
        let alpha_p = big(2.0).sub(&big(p.delta_p), PRECISION, RM).sub(&sp, PRECISION, RM).max(&zero);
        let pos = lambda
            .mul(&alpha_p, PRECISION, RM)
            .mul(&sp.sub(&big(p.delta_p), PRECISION, RM), PRECISION, RM);

        let mut total = one.clone();
        for &s in s_n {
            let sn = big(s);
            let alpha_n = sn.add(&big(p.delta_n), PRECISION, RM).max(&zero);
            let neg = alpha_n.mul(&sn.sub(&big(p.delta_n), PRECISION, RM), PRECISION, RM);
            let arg = gamma.mul(&neg.sub(&pos, PRECISION, RM), PRECISION, RM);
            total = total.add(&arg.exp(PRECISION, RM, &mut cc), PRECISION, RM);
        }
        total.ln(PRECISION, RM, &mut cc)
    }

    /// `|value - exact| / |exact|`, or `|value|` when the exact loss is zero.
    pub fn relative_error(value: f64, exact: &BigFloat) -> BigFloat {
        let diff = big(value).sub(exact, PRECISION, RM).abs();
        if exact.is_zero() {
            diff
        } else {
            diff.div(&exact.abs(), PRECISION, RM)
        }
    }

    pub fn below(x: &BigFloat, bound: f64) -> bool {
        x.cmp(&big(bound)).is_some_and(|c| c < 0)
    }

    fn logsumexp(xs: &[f64]) -> f64 {
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = xs.iter().map(|x| (x - max).exp()).sum();
        max + total.ln()
    }

    fn softplus(z: f64) -> f64 {
        z.max(0.0) + (-z.abs()).exp().ln_1p()
    }

    /// Decoupled-margin circle loss with unit positive scaling, in its general
    /// form over a set of positives and a set of negatives.
    pub fn unit_scaled(positives: &[f64], negatives: &[f64], p: &CircleTParams) -> f64 {
        if negatives.is_empty() || positives.is_empty() {
            return 0.0;
        }
        let neg: Vec<f64> = negatives
            .iter()
            .map(|&s| p.gamma * (s + p.delta_n).max(0.0) * (s - p.delta_n))
            .collect();
        let pos: Vec<f64> = positives
            .iter()
            .map(|&s| -(p.gamma * (2.0 - p.delta_p - s).max(0.0) * (s - p.delta_p)))
            .collect();
        softplus(logsumexp(&neg) + logsumexp(&pos))
    }
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut up = x.to_vec();
    let mut down = x.to_vec();
    up[i] += h;
    down[i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

pub mod metrics {
    /// Retrieval quality of one query, each value computed from its definition.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Definitional {
        pub nn: f64,
        pub ft: f64,
        pub st: f64,
        pub e: f64,
        pub dcg: f64,
        pub rr: f64,
        pub ap: f64,
    }

    /// 1-based rank of every gallery item: one plus the number of items that
    /// beat it (higher score, or equal score and smaller id).
    pub fn ranks(scores: &[f64], ids: &[String]) -> Vec<usize> {
        (0..scores.len())
            .map(|i| {
                1 + (0..scores.len())
                    .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i]))
                    .count()
            })
            .collect()
    }

    fn gain(rank: usize) -> f64 {
        if rank == 1 {
            1.0
        } else {
            1.0 / (rank as f64).log2()
        }
    }

    /// `None` when no gallery item carries the query's label.
    pub fn query(scores: &[f64], ids: &[String], labels: &[String], label: &str, cutoff: usize) -> Option<Definitional> {
        let rank = ranks(scores, ids);
        let relevant: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == label).map(|i| rank[i]).collect();
        let c = relevant.len();
        if c == 0 {
            return None;
        }
        let n = scores.len();
        let within = |k: usize| relevant.iter().filter(|&&r| r <= k).count() as f64;
        let k = cutoff.min(n);
        let (precision, recall) = (within(k) / k as f64, within(k) / c as f64);
        let e = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let ideal: f64 = (1..=c).map(gain).sum();
        let dcg = relevant.iter().map(|&r| gain(r)).sum::<f64>() / ideal;
        let ap = relevant.iter().map(|&r| within(r) / r as f64).sum::<f64>() / c as f64;
        Some(Definitional {
            nn: if relevant.contains(&1) { 1.0 } else { 0.0 },
            ft: within(c) / c as f64,
            st: within(2 * c) / c as f64,
            e,
            dcg,
            rr: 1.0 / *relevant.iter().min().unwrap() as f64,
            ap,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_loss_of_empty_negatives_is_zero() {
        let p = CircleTParams::default();
        assert!(circle::exact(0.5, &[], &p).is_zero());
    }

    #[test]
    fn unit_scaled_positive_set_of_one() {
        let p = CircleTParams::default();
        let v = circle::unit_scaled(&[0.9], &[0.3, 0.1], &p);
        let a = [0.3f64, 0.1].map(|s| 32.0 * (s + 0.25) * (s - 0.25));
        let b = 32.0 * (2.0 - 0.75 - 0.9) * (0.9 - 0.75);
        let direct = (1.0 + a.iter().map(|x| (x - b).exp()).sum::<f64>()).ln();
        assert!((v - direct).abs() < 1e-12);
    }

    #[test]
    fn ranks_break_ties_by_id() {
        let ids: Vec<String> = ["b", "a", "c"].map(String::from).to_vec();
        assert_eq!(metrics::ranks(&[0.5, 0.5, 0.9], &ids), vec![3, 2, 1]);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let ids: Vec<String> = (0..6).map(|i| format!("g{i}")).collect();
        let labels: Vec<String> = ["x", "x", "y", "y", "y", "z"].map(String::from).to_vec();
        let scores = [0.9, 0.8, 0.1, 0.0, -0.1, -0.5];
        let m = metrics::query(&scores, &ids, &labels, "x", 32).unwrap();
        assert_eq!((m.nn, m.ft, m.dcg, m.rr, m.ap), (1.0, 1.0, 1.0, 1.0, 1.0));
    }
}
