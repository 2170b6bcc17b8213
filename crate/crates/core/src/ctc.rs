//! CTC decoding and scoring over per-frame class posteriors.
//!
//! Posteriors are `[V, T]` tensors: one distribution over `V` classes per
//! frame, one class designated as the blank. A frame-level path maps to a
//! label sequence by collapsing repeats and then dropping blanks; the
//! probability of a label sequence is the sum over all paths that collapse
//! to it, computed exactly by the standard forward recursion in log space.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("posteriors must be a float [V, T] tensor, got {0}")]
    BadPosteriors(String),
    #[error("blank index {blank} out of range for {classes} classes")]
    BadBlank { blank: usize, classes: usize },
    #[error("target symbol {symbol} out of range for {classes} classes")]
    BadSymbol { symbol: usize, classes: usize },
}

fn check_posteriors(posteriors: &Tensor, blank: usize) -> Result<(usize, usize), CtcError> {
    let shape = posteriors.shape();
    if shape.len() != 2 {
        return Err(CtcError::BadPosteriors(format!("{shape:?}")));
    }
    let (v, t) = (shape[0], shape[1]);
    if posteriors.as_f32().is_err() {
        return Err(CtcError::BadPosteriors("quantized tensor".into()));
    }
    if blank >= v {
        return Err(CtcError::BadBlank { blank, classes: v });
    }
    Ok((v, t))
}

/// Collapses a frame-level path: merge adjacent repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Best-path decoding: per-frame argmax (ties resolve to the lowest class
/// index), then collapse. Works on any per-frame scores with the same argmax
/// as the probabilities.
pub fn greedy_decode(posteriors: &Tensor, blank: usize) -> Result<Vec<usize>, CtcError> {
    let (v, t) = check_posteriors(posteriors, blank)?;
    let p = posteriors.as_f32().expect("checked float");
    let mut path = Vec::with_capacity(t);
    for frame in 0..t {
        let mut best = 0usize;
        for c in 1..v {
            if p[c * t + frame] > p[best * t + frame] {
                best = c;
            }
        }
        path.push(best);
    }
    Ok(collapse_path(&path, blank))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Natural log of the total probability that the posteriors assign to
/// `target`, summed over every frame path that collapses to it.
///
/// A target containing the blank symbol gets probability zero (`-inf` here):
/// collapsing removes blanks, so no path can produce it.
pub fn sequence_log_prob(
    posteriors: &Tensor,
    target: &[usize],
    blank: usize,
) -> Result<f64, CtcError> {
    let (v, t) = check_posteriors(posteriors, blank)?;
    for &s in target {
        if s >= v {
            return Err(CtcError::BadSymbol { symbol: s, classes: v });
        }
    }
    if target.contains(&blank) {
        return Ok(f64::NEG_INFINITY);
    }
    if t == 0 {
        return Ok(if target.is_empty() { 0.0 } else { f64::NEG_INFINITY });
    }
    if target.len() > t {
        // More labels than frames: even the shortest paths cannot fit.
        return Ok(f64::NEG_INFINITY);
    }
    let p = posteriors.as_f32().expect("checked float");
    let lp = |c: usize, frame: usize| f64::from(p[c * t + frame]).max(0.0).ln();

    // Extended sequence: blanks interleaved around every label.
    let s_len = 2 * target.len() + 1;
    let ext = |i: usize| if i % 2 == 0 { blank } else { target[i / 2] };

    let mut alpha = vec![f64::NEG_INFINITY; s_len];
    alpha[0] = lp(blank, 0);
    if s_len > 1 {
        alpha[1] = lp(ext(1), 0);
    }
    for frame in 1..t {
        let mut next = vec![f64::NEG_INFINITY; s_len];
        for i in 0..s_len {
            let mut terms = vec![alpha[i]];
            if i >= 1 {
                terms.push(alpha[i - 1]);
            }
            if i >= 2 && ext(i) != blank && ext(i) != ext(i - 2) {
                terms.push(alpha[i - 2]);
            }
            let stay = log_sum_exp(&terms);
            next[i] = if stay == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                stay + lp(ext(i), frame)
            };
        }
        alpha = next;
    }
    let mut ends = vec![alpha[s_len - 1]];
    if s_len > 1 {
        ends.push(alpha[s_len - 2]);
    }
    Ok(log_sum_exp(&ends))
}

/// Probability-domain convenience wrapper around [`sequence_log_prob`].
pub fn sequence_prob(
    posteriors: &Tensor,
    target: &[usize],
    blank: usize,
) -> Result<f64, CtcError> {
    Ok(sequence_log_prob(posteriors, target, blank)?.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn posteriors(v: usize, t: usize, cols: &[&[f32]]) -> Tensor {
        assert_eq!(cols.len(), t);
        let mut data = vec![0.0f32; v * t];
        for (frame, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), v);
            for (c, &x) in col.iter().enumerate() {
                data[c * t + frame] = x;
            }
        }
        Tensor::from_f32(vec![v, t], data).unwrap()
    }

    /// Every length-T path over V classes, with its probability.
    fn brute_force_prob(p: &Tensor, target: &[usize], blank: usize) -> f64 {
        let v = p.shape()[0];
        let t = p.shape()[1];
        let pv = p.as_f32().unwrap();
        let mut total = 0.0f64;
        let mut path = vec![0usize; t];
        loop {
            if collapse_path(&path, blank) == target {
                let prob: f64 =
                    path.iter().enumerate().map(|(f, &c)| f64::from(pv[c * t + f])).product();
                total += prob;
            }
            // Odometer increment.
            let mut i = 0;
            loop {
                if i == t {
                    return total;
                }
                path[i] += 1;
                if path[i] < v {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn collapse_merges_repeats_then_drops_blanks() {
        assert_eq!(collapse_path(&[0, 1, 1, 0, 1, 2, 2], 0), vec![1, 1, 2]);
        assert_eq!(collapse_path(&[0, 0, 0], 0), Vec::<usize>::new());
        assert_eq!(collapse_path(&[], 0), Vec::<usize>::new());
        assert_eq!(collapse_path(&[3, 3, 3], 0), vec![3]);
    }

    #[test]
    fn greedy_picks_argmax_with_low_index_ties() {
        let p = posteriors(
            3,
            4,
            &[
                &[0.1, 0.8, 0.1],
                &[0.4, 0.4, 0.2],
                &[0.2, 0.1, 0.7],
                &[0.9, 0.05, 0.05],
            ],
        );
        // Frame 1 ties between blank (0) and class 1: blank wins by index.
        assert_eq!(greedy_decode(&p, 0).unwrap(), vec![1, 2]);
    }

    #[test]
    fn two_frame_worked_example() {
        // P("a") = p0(a) + p0(blank) p1(a) + p0(a) p1(a) collapses:
        // paths aa, a-, -a give 0.6*0.5 + 0.6*0.5 + 0.4*0.5 = 0.8.
        let p = posteriors(2, 2, &[&[0.4, 0.6], &[0.5, 0.5]]);
        let got = sequence_prob(&p, &[1], 0).unwrap();
        assert!((got - 0.8).abs() < 1e-6, "got {got}");
        // Exactly, over the f32-rounded probabilities:
        let exact = f64::from(0.6f32) + f64::from(0.4f32) * f64::from(0.5f32);
        assert!((got - exact).abs() < 1e-12, "got {got} want {exact}");
    }

    #[test]
    fn forward_matches_brute_force_enumeration() {
        let mut rng = crate::rng::rng_for_seed(31);
        use rand::Rng;
        for trial in 0..40 {
            let v = rng.gen_range(2..=4usize);
            let t = rng.gen_range(1..=5usize);
            let cols: Vec<Vec<f32>> = (0..t)
                .map(|_| {
                    let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|&x| (x / s) as f32).collect()
                })
                .collect();
            let refs: Vec<&[f32]> = cols.iter().map(|c| c.as_slice()).collect();
            let p = posteriors(v, t, &refs);
            let max_len = t.min(3);
            let target_len = rng.gen_range(0..=max_len);
            let target: Vec<usize> =
                (0..target_len).map(|_| rng.gen_range(1..v)).collect();
            let want = brute_force_prob(&p, &target, 0);
            let got = sequence_prob(&p, &target, 0).unwrap();
            assert!(
                (got - want).abs() < 1e-9,
                "trial {trial}: v={v} t={t} target={target:?} got {got} want {want}"
            );
        }
    }

    #[test]
    fn blank_in_target_has_zero_probability() {
        let p = posteriors(2, 3, &[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(sequence_log_prob(&p, &[0], 0).unwrap(), f64::NEG_INFINITY);
        assert_eq!(sequence_prob(&p, &[1, 0, 1], 0).unwrap(), 0.0);
    }

    #[test]
    fn impossible_and_empty_targets() {
        let p = posteriors(2, 2, &[&[0.3, 0.7], &[0.6, 0.4]]);
        // Empty target: all-blank path.
        let want = f64::from(0.3f32) * f64::from(0.6f32);
        assert!((sequence_prob(&p, &[], 0).unwrap() - want).abs() < 1e-12);
        // Three labels cannot fit in two frames.
        assert_eq!(sequence_prob(&p, &[1, 1, 1], 0).unwrap(), 0.0);
        // Two identical labels need a separating blank: aa-collapse is "a".
        let brute = brute_force_prob(&p, &[1, 1], 0);
        assert_eq!(brute, 0.0);
        assert_eq!(sequence_prob(&p, &[1, 1], 0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = posteriors(2, 2, &[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(matches!(greedy_decode(&p, 2), Err(CtcError::BadBlank { .. })));
        assert!(matches!(
            sequence_log_prob(&p, &[5], 0),
            Err(CtcError::BadSymbol { .. })
        ));
        let bad = Tensor::from_f32(vec![4], vec![0.0; 4]).unwrap();
        assert!(matches!(greedy_decode(&bad, 0), Err(CtcError::BadPosteriors(_))));
    }
}
