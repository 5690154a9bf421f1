//! Central finite-difference checks of reverse-mode gradients.

use crate::tensor::{ParamId, ParamStore, Tape, Var};
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between backprop and central differences over the
/// given coordinates (`None` = every element of every parameter).
pub fn gradcheck<F>(store: &ParamStore, coords: Option<&[(ParamId, usize)]>, loss: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    check(store, coords, false, loss).0
}

/// Like [`gradcheck`], but a coordinate whose one-sided differences disagree
/// (a ReLU kink inside the stencil) is compared against the one-sided
/// difference that does not cross it. Returns `(worst error, kinks seen)`.
pub fn gradcheck_kink_aware<F>(store: &ParamStore, coords: Option<&[(ParamId, usize)]>, loss: F) -> (f64, usize)
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    check(store, coords, true, loss)
}

fn check<F>(store: &ParamStore, coords: Option<&[(ParamId, usize)]>, kink_aware: bool, loss: F) -> (f64, usize)
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut tape = Tape::new();
    let l = loss(&mut tape, &analytic);
    tape.backward(l, &mut analytic).expect("loss is a scalar");

    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = store.ids().flat_map(|id| (0..store.value(id).len()).map(move |k| (id, k))).collect();
            &all
        }
    };
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let v = loss(&mut t, s);
        t.value(v).item()
    };
    let mut worst = 0.0f64;
    let mut kinks = 0;
    let mut probe = store.clone();
    for &(id, k) in coords {
        let orig = probe.value(id).data()[k];
        probe.value_mut(id).data_mut()[k] = orig + STEP;
        let up = eval(&probe);
        probe.value_mut(id).data_mut()[k] = orig - STEP;
        let down = eval(&probe);
        probe.value_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.grad(id).map_or(0.0, |g| g.data()[k]);
        let mut err = rel_err(a, numeric);
        if kink_aware && err >= TOL {
            let base = eval(&probe);
            let (right, left) = ((up - base) / STEP, (base - down) / STEP);
            if rel_err(right, left) > TOL {
                kinks += 1;
                err = rel_err(a, right).min(rel_err(a, left));
            }
        }
        worst = worst.max(err);
    }
    (worst, kinks)
}

/// `count` parameter coordinates drawn uniformly with replacement.
pub fn random_coords<R: Rng + ?Sized>(store: &ParamStore, count: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.ids().collect();
    (0..count)
        .map(|_| {
            let id = ids[rng.gen_range(0..ids.len())];
            (id, rng.gen_range(0..store.value(id).len()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn smooth_product_checks_out() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.3, -1.2, 2.0]));
        let b = store.add("b", Tensor::vector(vec![1.5, 0.4, -0.7]));
        let worst = gradcheck(&store, None, |tape, s| {
            let x = tape.param(s, a).unwrap();
            let y = tape.param(s, b).unwrap();
            let p = tape.mul(x, y).unwrap();
            let e = tape.exp(p).unwrap();
            tape.sum(e).unwrap()
        });
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn kink_inside_stencil_is_detected() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1e-7]));
        let loss = |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, a).unwrap();
            let r = tape.relu(x).unwrap();
            tape.sum(r).unwrap()
        };
        assert!(gradcheck(&store, None, loss) > TOL);
        let (worst, kinks) = gradcheck_kink_aware(&store, None, loss);
        assert_eq!(kinks, 1);
        assert!(worst < 1e-8);
    }
}
