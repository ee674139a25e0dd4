use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-input `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, floor)`.
    pub max_rel_error: f64,
    /// Number of scalar entries probed.
    pub probes: usize,
}

const SCALE_FLOOR: f64 = 1e-6;

/// Checks the gradient of the scalar built by `build` w.r.t. each input.
///
/// `build` receives a fresh tape and one leaf per input and must return a
/// scalar. `probe` optionally restricts which flat entries of each input are
/// perturbed (all entries when `None`).
pub fn finite_diff_check<F>(
    build: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    probe: Option<&dyn Fn(usize, usize) -> Vec<usize>>,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let entries = match probe {
            Some(p) => p(k, input.len()),
            None => (0..input.len()).collect(),
        };
        let mut diff = 0.0f64;
        let mut scale = SCALE_FLOOR;
        for &j in &entries {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            diff = diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            probes += 1;
        }
        worst = worst.max(diff / scale);
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_layer_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 2]),
            rand_tensor(&mut rng, &[2]),
        ];
        let w = rand_tensor(&mut rng, &[3, 2]);
        let rep = finite_diff_check(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                let w = t.constant(w.clone());
                let y = t.mul(y, w)?;
                t.sum(y)
            },
            &inputs,
            1e-5,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    }

    #[test]
    fn softmax_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[6]);
        let w = rand_tensor(&mut rng, &[6]);
        let rep = finite_diff_check(
            |t, v| {
                let s = t.softmax(v[0], 0)?;
                let w = t.constant(w.clone());
                let s = t.mul(s, w)?;
                t.sum(s)
            },
            &[x],
            1e-5,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // relu at exactly zero has a one-sided derivative; the check must see it.
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let rep = finite_diff_check(
            |t, v| {
                let r = t.relu(v[0])?;
                t.sum(r)
            },
            &[x],
            1e-5,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error > 0.1);
    }
}
