use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Confidences are floored here before the log.
pub const CONFIDENCE_FLOOR: f64 = 1e-6;

/// Additive logit bias for masked rows and columns. Large enough to zero
/// their softmax mass, small enough to keep every intermediate finite.
pub const MASK_BIAS: f64 = -1e4;

/// Returned instead of a loss when there is nothing to supervise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipSample;

/// Confidences at ground-truth entries of one matrix. `gt` holds
/// `(row, col)` pairs into a `rows × cols` matrix.
#[derive(Debug, Clone, Copy)]
pub struct GtSlice<'a> {
    pub p: Var,
    pub cols: usize,
    pub gt: &'a [(usize, usize)],
}

/// `softmax` over both axes, multiplied. Entries where `bias` holds
/// [`MASK_BIAS`] get (numerically) zero confidence.
pub fn tape_dual_softmax<T: Real>(
    tape: &mut Tape<T>,
    scores: Var,
    bias: Option<Tensor<T>>,
) -> Result<Var, TensorError> {
    let s = match bias {
        Some(b) => {
            let b = tape.constant(b);
            tape.add(scores, b)?
        }
        None => scores,
    };
    let a = tape.softmax(s, 0)?;
    let b = tape.softmax(s, 1)?;
    tape.mul(a, b)
}

/// Row/column mask as a logit bias.
pub fn mask_bias<T: Real>(valid0: &[bool], valid1: &[bool]) -> Tensor<T> {
    let big = T::lit(MASK_BIAS);
    let n1 = valid1.len();
    Tensor::from_fn(&[valid0.len(), n1], |k| {
        if valid0[k / n1] && valid1[k % n1] {
            T::zero()
        } else {
            big
        }
    })
}

/// Mean of `−(1−P)^γ log P` over the pooled GT entries of every slice;
/// `γ = 0` (or `None`) is plain negative log-likelihood.
pub fn pooled_nll<T: Real>(
    tape: &mut Tape<T>,
    slices: &[GtSlice],
    focal_gamma: Option<u32>,
) -> Result<Result<Var, SkipSample>, TensorError> {
    let total: usize = slices.iter().map(|s| s.gt.len()).sum();
    if total == 0 {
        return Ok(Err(SkipSample));
    }
    let mut acc: Option<Var> = None;
    for s in slices.iter().filter(|s| !s.gt.is_empty()) {
        let index = s.gt.iter().map(|&(i, j)| Some(i * s.cols + j)).collect();
        let picked = tape.gather(s.p, index, vec![1, s.gt.len()])?;
        let picked = tape.clamp(picked, T::lit(CONFIDENCE_FLOOR), T::one())?;
        let mut term = tape.log(picked)?;
        if let Some(g) = focal_gamma.filter(|&g| g > 0) {
            let ones = tape.constant(Tensor::full(&[1, s.gt.len()], T::one()));
            let q = tape.sub(ones, picked)?;
            for _ in 0..g {
                term = tape.mul(term, q)?;
            }
        }
        let sum = tape.sum(term)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sum)?,
            None => sum,
        });
    }
    let sum = acc.expect("at least one non-empty slice");
    Ok(Ok(tape.scale(sum, T::lit(-1.0 / total as f64))?))
}

/// Coarse loss over one confidence matrix.
pub fn loss_coarse<T: Real>(
    tape: &mut Tape<T>,
    p: Var,
    gt: &[(usize, usize)],
    focal_gamma: Option<u32>,
) -> Result<Result<Var, SkipSample>, TensorError> {
    let (_, cols) = tape.value(p).dims2("loss_coarse")?;
    pooled_nll(tape, &[GtSlice { p, cols, gt }], focal_gamma)
}

/// Fine loss pooled over every window's confidence matrix.
pub fn loss_fine<T: Real>(
    tape: &mut Tape<T>,
    windows: &[(Var, &[(usize, usize)])],
    focal_gamma: Option<u32>,
) -> Result<Result<Var, SkipSample>, TensorError> {
    let mut slices = Vec::with_capacity(windows.len());
    for &(p, gt) in windows {
        let (_, cols) = tape.value(p).dims2("loss_fine")?;
        slices.push(GtSlice { p, cols, gt });
    }
    pooled_nll(tape, &slices, focal_gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn coarse(p: &[&[f64]], gt: &[(usize, usize)], focal: Option<u32>) -> Result<f64, SkipSample> {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_rows(p));
        loss_coarse(&mut tape, p, gt, focal)
            .unwrap()
            .map(|v| tape.value(v).data()[0])
    }

    #[test]
    fn hand_values() {
        assert_eq!(coarse(&[&[1.0, 0.0], &[0.0, 1.0]], &[(0, 0), (1, 1)], None), Ok(0.0));
        let e = (-1.0f64).exp();
        assert!((coarse(&[&[e]], &[(0, 0)], None).unwrap() - 1.0).abs() < 1e-12);
        let l = coarse(&[&[0.5, 0.1], &[0.2, 0.25]], &[(0, 0), (1, 1)], None).unwrap();
        assert!((l - 1.5 * LN_2).abs() < 1e-12);
        assert_eq!(coarse(&[&[0.5]], &[], None), Err(SkipSample));
    }

    #[test]
    fn floor_and_focal() {
        let l = coarse(&[&[0.0]], &[(0, 0)], None).unwrap();
        assert!((l + CONFIDENCE_FLOOR.ln()).abs() < 1e-9);
        // (1 − 0.5)² · ln 2
        let l = coarse(&[&[0.5]], &[(0, 0)], Some(2)).unwrap();
        assert!((l - 0.25 * LN_2).abs() < 1e-12);
        assert_eq!(
            coarse(&[&[0.5]], &[(0, 0)], Some(0)),
            coarse(&[&[0.5]], &[(0, 0)], None)
        );
    }

    #[test]
    fn monotone_in_gt_confidence() {
        let base = coarse(&[&[0.3, 0.2], &[0.1, 0.4]], &[(0, 0), (1, 1)], None).unwrap();
        let up = coarse(&[&[0.31, 0.2], &[0.1, 0.4]], &[(0, 0), (1, 1)], None).unwrap();
        let other = coarse(&[&[0.3, 0.9], &[0.1, 0.4]], &[(0, 0), (1, 1)], None).unwrap();
        assert!(up < base);
        assert_eq!(other, base);
    }

    #[test]
    fn fine_pools_like_a_flat_list() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_rows(&[&[0.9, 0.05], &[0.05, 0.7]]));
        let b = tape.constant(Tensor::from_rows(&[&[0.3]]));
        let ga = [(0, 0), (1, 1)];
        let gb = [(0, 0)];
        let l = loss_fine(&mut tape, &[(a, &ga), (b, &gb), (b, &[])], None)
            .unwrap()
            .unwrap();
        let want = -(0.9f64.ln() + 0.7f64.ln() + 0.3f64.ln()) / 3.0;
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
        assert_eq!(loss_fine(&mut tape, &[(a, &[])], None).unwrap(), Err(SkipSample));
    }

    #[test]
    fn dual_softmax_matches_plain_and_masks() {
        let s = Tensor::from_rows(&[&[1.0, 2.0, 0.5], &[0.0, -1.0, 3.0]]);
        let mut tape = Tape::<f64>::new();
        let sv = tape.constant(s.clone());
        let p = tape_dual_softmax(&mut tape, sv, None).unwrap();
        let m = crate::matching::Matrix {
            rows: 2,
            cols: 3,
            data: s.data().to_vec(),
        };
        let want = crate::matching::dual_softmax(&m).unwrap();
        for (a, b) in tape.value(p).data().iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let bias = mask_bias::<f64>(&[true, true], &[true, false, true]);
        let p = tape_dual_softmax(&mut tape, sv, Some(bias)).unwrap();
        let v = tape.value(p);
        assert!(v.at2(0, 1) < 1e-300 && v.at2(1, 1) < 1e-300);
    }
}
