//! Independent reference implementations used to cross-check the fast paths.
//!
//! Everything in this module is written as the most direct transcription of
//! the underlying definition (step-by-step recurrences, quadratic attention,
//! exhaustive pairwise metrics) and deliberately shares no code with the
//! implementations it verifies.

/// Naive step-by-step selective-scan recurrence.
///
/// Shapes: `x` is `steps x d` (projected inputs), `dt` is `steps x d`,
/// `b`/`c` are `steps x n`, `a` is `d x n` (negative real decay). Returns the
/// full hidden state sequence (`steps x d x n`, flattened row-major) and the
/// per-step readouts `y[t][ch] = sum_s c[t][s] * h[t][ch][s]` (`steps x d`).
#[allow(clippy::too_many_arguments)]
pub fn scan_reference(
    steps: usize,
    d: usize,
    n: usize,
    x: &[f64],
    dt: &[f64],
    b: &[f64],
    c: &[f64],
    a: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(x.len(), steps * d);
    assert_eq!(dt.len(), steps * d);
    assert_eq!(b.len(), steps * n);
    assert_eq!(c.len(), steps * n);
    assert_eq!(a.len(), d * n);

    let mut h = vec![0.0f64; steps * d * n];
    let mut y = vec![0.0f64; steps * d];
    let mut prev = vec![0.0f64; d * n];
    for t in 0..steps {
        for ch in 0..d {
            let dt_tc = dt[t * d + ch];
            let x_tc = x[t * d + ch];
            for s in 0..n {
                let decay = (dt_tc * a[ch * n + s]).exp();
                let update = dt_tc * b[t * n + s] * x_tc;
                let cur = decay * prev[ch * n + s] + update;
                h[(t * d + ch) * n + s] = cur;
                prev[ch * n + s] = cur;
            }
        }
        for ch in 0..d {
            let mut acc = 0.0;
            for s in 0..n {
                acc += c[t * n + s] * h[(t * d + ch) * n + s];
            }
            y[t * d + ch] = acc;
        }
    }
    (h, y)
}

/// Direct O(n*m) kernelized attention with explicit normalized weights:
/// `out_i = sum_j w_ij v_j` where `w_ij = phi(q_i).phi(k_j) / sum_l phi(q_i).phi(k_l)`
/// and `phi(x) = elu(x) + 1`.
pub fn linear_attention_reference(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    m: usize,
    d: usize,
) -> Vec<f64> {
    assert_eq!(q.len(), n * d);
    assert_eq!(k.len(), m * d);
    assert_eq!(v.len(), m * d);
    let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
    let mut out = vec![0.0f64; n * d];
    for i in 0..n {
        let mut weights = vec![0.0f64; m];
        let mut denom = 0.0;
        for j in 0..m {
            let mut dot = 0.0;
            for t in 0..d {
                dot += phi(q[i * d + t]) * phi(k[j * d + t]);
            }
            weights[j] = dot;
            denom += dot;
        }
        for j in 0..m {
            let w = weights[j] / denom;
            for t in 0..d {
                out[i * d + t] += w * v[j * d + t];
            }
        }
    }
    out
}

/// Plain softmax attention, one head, for cross-checking the gated encoder.
pub fn softmax_attention_reference(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    m: usize,
    d: usize,
) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f64; n * d];
    for i in 0..n {
        let mut logits = vec![0.0f64; m];
        for j in 0..m {
            let mut dot = 0.0;
            for t in 0..d {
                dot += q[i * d + t] * k[j * d + t];
            }
            logits[j] = dot * scale;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            denom += *l;
        }
        for j in 0..m {
            let w = logits[j] / denom;
            for t in 0..d {
                out[i * d + t] += w * v[j * d + t];
            }
        }
    }
    out
}

/// Exhaustive pairwise AUROC: fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let mut correct = 0.0f64;
    let mut total = 0.0f64;
    for (i, (&sp, &lp)) in scores.iter().zip(labels).enumerate() {
        if !lp {
            continue;
        }
        for (j, (&sn, &ln)) in scores.iter().zip(labels).enumerate() {
            if ln || i == j {
                continue;
            }
            total += 1.0;
            if sp > sn {
                correct += 1.0;
            } else if sp == sn {
                correct += 0.5;
            }
        }
    }
    correct / total
}

/// Average precision by explicit re-ranking: selection-sorts indices by
/// (score descending, input order ascending) and averages precision at each
/// positive's rank.
pub fn average_precision_reference(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut order = Vec::with_capacity(n);
    while !remaining.is_empty() {
        let mut best = 0usize;
        for (pos, &idx) in remaining.iter().enumerate() {
            let cur = remaining[best];
            if scores[idx] > scores[cur] || (scores[idx] == scores[cur] && idx < cur) {
                best = pos;
            }
        }
        order.push(remaining.remove(best));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    ap / n_pos as f64
}

/// Best F1 by exhaustively evaluating all n+1 top-k prediction sets of the
/// (score descending, input order ascending) ranking, recomputing precision
/// and recall from scratch at each cut.
pub fn f1_max_reference(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let n_pos = labels.iter().filter(|&&l| l).count();
    let mut best = 0.0f64;
    for cut in 0..=n {
        let predicted: &[usize] = &order[..cut];
        let tp = predicted.iter().filter(|&&i| labels[i]).count();
        if cut == 0 || tp == 0 {
            continue;
        }
        let precision = tp as f64 / cut as f64;
        let recall = tp as f64 / n_pos as f64;
        let f1 = 2.0 * precision * recall / (precision + recall);
        if f1 > best {
            best = f1;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_reference_single_step_is_the_update_term() {
        let (h, _y) = scan_reference(
            1,
            2,
            2,
            &[1.0, 2.0],
            &[0.5, 0.25],
            &[3.0, 4.0],
            &[1.0, 1.0],
            &[-1.0, -2.0, -1.0, -2.0],
        );
        // h[0][ch][s] = dt[ch] * b[s] * x[ch]
        assert_eq!(h[0], 0.5 * 3.0 * 1.0);
        assert_eq!(h[1], 0.5 * 4.0 * 1.0);
        assert_eq!(h[2], 0.25 * 3.0 * 2.0);
        assert_eq!(h[3], 0.25 * 4.0 * 2.0);
    }

    #[test]
    fn pairwise_auroc_hand_case() {
        // positives {0.8, 0.3}, negatives {0.2, 0.4}: 3 of 4 pairs correct.
        let scores = [0.8, 0.3, 0.2, 0.4];
        let labels = [true, true, false, false];
        assert_eq!(auroc_pairwise(&scores, &labels), 0.75);
    }

    #[test]
    fn ap_reference_hand_case() {
        // ranking [pos, neg, pos] -> (1/1 + 2/3) / 2 = 5/6.
        let scores = [0.9, 0.5, 0.1];
        let labels = [true, false, true];
        let ap = average_precision_reference(&scores, &labels);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn f1_reference_clean_split_is_one() {
        let scores = [0.9, 0.8, 0.1];
        let labels = [true, true, false];
        assert_eq!(f1_max_reference(&scores, &labels), 1.0);
    }
}
