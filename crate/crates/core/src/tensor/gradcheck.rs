//! Central-finite-difference validation of analytic gradients.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{Tape, Var};

/// Compares analytic gradients against central finite differences.
///
/// `build` constructs a scalar loss from fresh constants on a fresh tape; it is
/// re-run twice per probed coordinate. At most `max_coords` coordinates per
/// input are probed, chosen deterministically from `seed`. Returns the maximum
/// relative error observed.
pub fn max_rel_error<F>(
    build: F,
    inputs: &[ArrayD<f64>],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars);
        assert_eq!(tape.value(out).len(), 1, "gradcheck loss must be scalar");
        tape.value(out).iter().next().copied().unwrap()
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.len();
        if n == 0 {
            continue;
        }
        let analytic = grads.wrt(vars[idx]);
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.gen_range(0..n)).collect()
        };
        for flat in coords {
            let a = analytic
                .map(|g| g.as_slice().unwrap()[flat])
                .unwrap_or(0.0);
            let orig = work[idx].as_slice().unwrap()[flat];
            work[idx].as_slice_mut().unwrap()[flat] = orig + eps;
            let up = eval(&work);
            work[idx].as_slice_mut().unwrap()[flat] = orig - eps;
            let down = eval(&work);
            work[idx].as_slice_mut().unwrap()[flat] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD, IxDyn};

    #[test]
    fn quadratic_gradient_checks_out() {
        let x = arr1(&[0.5, -1.2, 2.0]).into_dyn();
        let err = max_rel_error(
            |t, vars| {
                let sq = t.mul(vars[0], vars[0]);
                t.sum_all(sq)
            },
            &[x],
            1e-6,
            16,
            7,
        );
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn conv_attention_chain_gradient_checks_out() {
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |ix| {
            ((ix[1] * 16 + ix[2] * 4 + ix[3]) as f64 * 0.37).sin() * 0.5
        });
        let w = ArrayD::from_shape_fn(IxDyn(&[4, 2, 3, 3]), |ix| {
            ((ix[0] * 18 + ix[1] * 9 + ix[2] * 3 + ix[3]) as f64 * 0.21).cos() * 0.3
        });
        let err = max_rel_error(
            |t, vars| {
                let b = t.constant(ArrayD::zeros(IxDyn(&[4])));
                let y = t.conv2d(vars[0], vars[1], b, 1, 1);
                let y = t.leaky_relu(y, 0.1);
                let a = t.window_attention(y, y, y, 2, 2);
                let u = t.bilinear_up2(a);
                let p = t.adaptive_avg_pool(u, 3, 3);
                let s = t.softmax_axis(p, 1);
                t.mean_all(s)
            },
            &[x, w],
            1e-5,
            24,
            11,
        );
        assert!(err < 1e-3, "rel err {err}");
    }
}
