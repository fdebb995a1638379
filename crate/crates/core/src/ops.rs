use ndarray::{Array1, Array2, ArrayView1};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `target += a ⊗ b`.
pub(crate) fn add_outer(target: &mut Array2<f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) {
    for (mut row, &scale) in target.rows_mut().into_iter().zip(a.iter()) {
        if scale != 0.0 {
            row.scaled_add(scale, &b);
        }
    }
}

/// Softmax restricted to positions where `mask` is set; other entries are 0.
pub(crate) fn masked_softmax(logits: &Array1<f64>, mask: &[bool]) -> Array1<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = Array1::zeros(logits.len());
    let mut total = 0.0;
    for ((o, &v), &m) in out.iter_mut().zip(logits.iter()).zip(mask) {
        if m {
            *o = (v - max).exp();
            total += *o;
        }
    }
    out /= total;
    out
}

pub(crate) fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    masked_softmax(logits, &vec![true; logits.len()])
}

/// Max-shifted `log Σ exp(v)` over an iterator; `-inf` when empty.
pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive_and_is_stable() {
        for x in [-30.0, -1.0, 0.0, 0.5, 10.0] {
            assert!((softplus(x) - (1.0f64 + x.exp()).ln()).abs() < 1e-12);
        }
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_large_values() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(v.iter().copied()) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(std::iter::empty::<f64>()), f64::NEG_INFINITY);
    }
}
