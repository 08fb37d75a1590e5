//! Associative prefix scan.
//!
//! The recursion pairs neighbours, scans the half-length sequence, then
//! fills the even positions. Each level's combines are independent of one
//! another, so total work is O(n) and depth is O(log n).

/// An associative binary operator. `a.combine(b)` applies `a` first, then `b`.
pub trait Associative: Clone {
    fn combine(&self, later: &Self) -> Self;
}

/// Inclusive prefix scan: `out[i] = items[0] ∘ items[1] ∘ … ∘ items[i]`.
pub fn inclusive_scan<T: Associative>(items: &[T]) -> Vec<T> {
    let n = items.len();
    if n <= 1 {
        return items.to_vec();
    }
    let pairs: Vec<T> = items
        .chunks_exact(2)
        .map(|p| p[0].combine(&p[1]))
        .collect();
    let sub = inclusive_scan(&pairs);
    let mut out = Vec::with_capacity(n);
    out.push(items[0].clone());
    for i in 1..n {
        if i % 2 == 1 {
            out.push(sub[i / 2].clone());
        } else {
            out.push(sub[i / 2 - 1].combine(&items[i]));
        }
    }
    out
}

/// Solve `h_t = a_t ⊙ h_{t-1} + b_t` with `h_{-1} = 0` in place by an
/// up-sweep/down-sweep scan. `a` and `b` are `[steps × width]` row-major;
/// on return `b` holds every `h_t` and `a` holds the running products.
pub fn linear_recurrence_scan(a: &mut [f64], b: &mut [f64], width: usize) {
    let steps = if width == 0 { 0 } else { b.len() / width };
    let combine = |a: &mut [f64], b: &mut [f64], src: usize, dst: usize| {
        let (s, d) = (src * width, dst * width);
        for k in 0..width {
            b[d + k] += a[d + k] * b[s + k];
            a[d + k] *= a[s + k];
        }
    };
    let mut d = 1;
    while 2 * d <= steps {
        let mut i = 2 * d - 1;
        while i < steps {
            combine(a, b, i - d, i);
            i += 2 * d;
        }
        d *= 2;
    }
    while d >= 1 {
        let mut i = 3 * d - 1;
        while i < steps {
            combine(a, b, i - d, i);
            i += 2 * d;
        }
        d /= 2;
    }
}

/// Sequential reference for [`linear_recurrence_scan`].
pub fn linear_recurrence_seq(a: &[f64], b: &[f64], width: usize) -> Vec<f64> {
    let mut h = vec![0.0; width];
    let mut out = Vec::with_capacity(b.len());
    for (a, b) in a.chunks(width).zip(b.chunks(width)) {
        for ((h, a), b) in h.iter_mut().zip(a).zip(b) {
            *h = a * *h + b;
        }
        out.extend_from_slice(&h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Concat(String);

    impl Associative for Concat {
        fn combine(&self, later: &Self) -> Self {
            Concat(format!("{}{}", self.0, later.0))
        }
    }

    #[test]
    fn prefix_order_is_preserved() {
        let items: Vec<Concat> = "abcdefg".chars().map(|c| Concat(c.to_string())).collect();
        let out = inclusive_scan(&items);
        let expect = ["a", "ab", "abc", "abcd", "abcde", "abcdef", "abcdefg"];
        assert_eq!(out.iter().map(|c| c.0.as_str()).collect::<Vec<_>>(), expect);
    }

    proptest! {
        #[test]
        fn tree_matches_sequential(t in 1usize..70, w in 1usize..4, seed in any::<u64>()) {
            let mut s = seed | 1;
            let mut next = || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; (s % 2000) as f64 / 1000.0 - 1.0 };
            let a: Vec<f64> = (0..t * w).map(|_| next()).collect();
            let b: Vec<f64> = (0..t * w).map(|_| next()).collect();
            let q = linear_recurrence_seq(&a, &b, w);
            let (mut pa, mut p) = (a.clone(), b.clone());
            linear_recurrence_scan(&mut pa, &mut p, w);
            for (x, y) in p.iter().zip(&q) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
