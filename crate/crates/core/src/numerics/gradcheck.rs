use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};

/// Denominator floor of the relative error, so that gradients that are
/// numerically zero on both sides compare as equal.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords: usize,
    /// Coordinates left out because a perturbation crossed a relu or clip
    /// boundary, where central differences do not estimate the derivative.
    pub skipped: usize,
}

/// Compares reverse-mode gradients of `loss` with central differences
/// sampled at `±h/2` and `±h`. At most `max_coords` coordinates per parameter are checked, chosen by
/// `seed` when there are more.
pub fn grad_check<F>(
    stores: &mut [ParamStore<f64>],
    loss: F,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&[ParamStore<f64>]) -> (Tape<f64>, Var),
{
    let (tape, out) = loss(stores);
    let grads = tape.backward(out);
    let analytic: Vec<_> = stores.iter().map(|s| grads.for_store(s)).collect();
    let base = tape.kink_pattern();
    let eval = |stores: &[ParamStore<f64>]| {
        let (t, v) = loss(stores);
        (t.scalar(v), t.kink_pattern() == base)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coords: 0,
        skipped: 0,
    };
    for si in 0..stores.len() {
        let ids: Vec<_> = stores[si].ids().collect();
        for id in ids {
            let n = stores[si].value(id).data().len();
            let coords: Vec<usize> = if n <= max_coords {
                (0..n).collect()
            } else {
                let mut c = sample(&mut rng, n, max_coords).into_vec();
                c.sort_unstable();
                c
            };
            for k in coords {
                let orig = stores[si].value(id).data()[k];
                stores[si].value_mut(id).data_mut()[k] = orig + h;
                let mut f = [0.0; 4];
                let mut smooth = true;
                for (slot, step) in f.iter_mut().zip([-h, -h / 2.0, h / 2.0, h]) {
                    stores[si].value_mut(id).data_mut()[k] = orig + step;
                    let (v, s) = eval(stores);
                    *slot = v;
                    smooth &= s;
                }
                stores[si].value_mut(id).data_mut()[k] = orig;
                if !smooth {
                    report.skipped += 1;
                    continue;
                }
                // five-point central stencil with half-step h/2
                let numeric = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (6.0 * h);
                let a = analytic[si][id.index()]
                    .as_ref()
                    .map_or(0.0, |g| g.data()[k]);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                report.coords += 1;
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    if rel >= report.max_rel_err {
                        report.worst = Some((stores[si].name(id).to_string(), k));
                        report.worst_values = (a, numeric);
                    }
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn mlp_store(seed: u64) -> ParamStore<f64> {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let mut s = ParamStore::new();
        let mut mat = |r: usize, c: usize| {
            let d: Vec<f64> = (0..r * c).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_vec(r, c, d)
        };
        let (w1, b1, w2) = (mat(4, 6), mat(1, 6), mat(6, 3));
        s.add("w1", w1);
        s.add("b1", b1);
        s.add("w2", w2);
        s
    }

    fn mlp_loss(stores: &[ParamStore<f64>]) -> (Tape<f64>, Var) {
        let s = &stores[0];
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_f64(
            2,
            4,
            &[0.3, -1.2, 0.7, 0.1, 1.0, 0.4, -0.5, 0.9],
        ));
        let w1 = t.param(s, s.id("w1").unwrap());
        let b1 = t.param(s, s.id("b1").unwrap());
        let w2 = t.param(s, s.id("w2").unwrap());
        let h = t.matmul(x, w1).unwrap();
        let h = t.add(h, b1).unwrap();
        let h = t.relu(h);
        let logits = t.matmul(h, w2).unwrap();
        let lp = t
            .masked_log_softmax(logits, &[true, true, false, true, true, true])
            .unwrap();
        let picked = t.pick(lp, &[(0, 1), (1, 2)]).unwrap();
        let total = t.segment_sum(picked, &[0, 0], 1).unwrap();
        let sq = t.square(total);
        let e = t.exp(picked);
        let le = t.log(e);
        let extra = t.mean(le);
        let sum = t.add(sq, extra).unwrap();
        (t, sum)
    }

    #[test]
    fn mlp_gradients_match() {
        for seed in 0..5 {
            let mut stores = vec![mlp_store(seed)];
            let r = grad_check(&mut stores, mlp_loss, 1e-5, 64, seed);
            assert!(r.max_rel_err <= 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn linear_function_is_exact() {
        let mut s = ParamStore::new();
        s.add("w", Matrix::from_f64(1, 3, &[1.0, 2.0, 3.0]));
        let mut stores = vec![s];
        let r = grad_check(
            &mut stores,
            |st| {
                let mut t = Tape::new();
                let w = t.param(&st[0], st[0].id("w").unwrap());
                let k = t.scale(w, 2.5);
                let l = t.sum(k);
                (t, l)
            },
            1e-3,
            10,
            0,
        );
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.coords, 3);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut s = ParamStore::new();
        s.add("w", Matrix::from_f64(1, 3, &[-1.0, -2.0, -3.0]));
        let mut stores = vec![s];
        let r = grad_check(
            &mut stores,
            |st| {
                let mut t = Tape::new();
                let w = t.param(&st[0], st[0].id("w").unwrap());
                let k = t.relu(w);
                let l = t.sum(k);
                (t, l)
            },
            1e-3,
            10,
            0,
        );
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        let mut s = ParamStore::new();
        s.add("w", Matrix::from_f64(1, 3, &[1e-5, 0.5, -0.5]));
        let mut stores = vec![s];
        let r = grad_check(
            &mut stores,
            |st| {
                let mut t = Tape::new();
                let w = t.param(&st[0], st[0].id("w").unwrap());
                let k = t.relu(w);
                let l = t.sum(k);
                (t, l)
            },
            1e-3,
            10,
            0,
        );
        assert_eq!((r.coords, r.skipped), (2, 1));
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
