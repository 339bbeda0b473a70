//! Central-difference gradient checking against the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// `(f(h) - f(-h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Upper bound on probed coordinates; larger parameter sets are sampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: 1e-5,
            max_coords: 400,
            seed: 0,
        }
    }
}

/// Magnitude below which gradients are compared absolutely. Central
/// differences of an O(1) loss carry roughly 1e-16 / eps of roundoff, so a
/// true zero shows up as ~1e-11 at the default step.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Relative error used by the checker; two values that are both exactly zero
/// count as agreeing.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Maximum relative error between tape gradients and central differences of
/// `f` over (a sample of) the trainable coordinates of `store`.
///
/// `f` builds the scalar on a fresh tape each call and must be deterministic;
/// two baseline evaluations that disagree are rejected.
pub fn finite_diff_check<Fun>(store: &mut ParamStore<f64>, f: Fun, opts: CheckOptions) -> Result<f64>
where
    Fun: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    Ok(finite_diff_probes(store, f, opts)?
        .iter()
        .map(Probe::relative_error)
        .fold(0.0, f64::max))
}

/// One probed coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Every probed coordinate of [`finite_diff_check`].
pub fn finite_diff_probes<Fun>(store: &mut ParamStore<f64>, f: Fun, opts: CheckOptions) -> Result<Vec<Probe>>
where
    Fun: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Validation(format!(
            "finite-difference eps {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(s);
        let v = f(&mut tape)?;
        Ok(tape.scalar(v))
    };

    let base_a = eval(store)?;
    let base_b = eval(store)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {base_a} vs {base_b}"
        )));
    }

    let grads = {
        let mut tape = Tape::new(&*store);
        let v = f(&mut tape)?;
        tape.backward(v)?
    };

    let coords: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.numel()).map(move |i| (id, i)))
        .collect();
    let chosen: Vec<(ParamId, usize)> = if coords.len() > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };

    let mut probes = Vec::with_capacity(chosen.len());
    for (id, i) in chosen {
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
        let orig = store.get(id).value.data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + opts.eps;
        let plus = eval(store);
        store.get_mut(id).value.data_mut()[i] = orig - opts.eps;
        let minus = eval(store);
        store.get_mut(id).value.data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * opts.eps);
        probes.push(Probe {
            name: store.get(id).name.clone(),
            index: i,
            analytic,
            numeric,
        });
    }
    Ok(probes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::tensor::Tensor;

    fn store_with(shape: &[usize]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("w", shape, Init::Normal(1.0)).unwrap();
        s.initialize(3);
        (s, id)
    }

    #[test]
    fn quadratic_is_exact() {
        let (mut s, id) = store_with(&[5]);
        for eps in [1e-7, 1e-5, 1e-3] {
            let err = finite_diff_check(
                &mut s,
                |tp| {
                    let w = tp.param(id);
                    let sq = tp.mul(w, w)?;
                    Ok(tp.sum(sq))
                },
                CheckOptions {
                    eps,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(err <= 1e-8, "eps {eps}: {err}");
        }
    }

    #[test]
    fn constant_function_reports_zero() {
        let (mut s, _) = store_with(&[3]);
        let err = finite_diff_check(
            &mut s,
            |tp| Ok(tp.constant(Tensor::scalar(4.0))),
            CheckOptions::default(),
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let (mut s, id) = store_with(&[2]);
        let counter = Cell::new(0.0);
        let res = finite_diff_check(
            &mut s,
            |tp| {
                counter.set(counter.get() + 1.0);
                let w = tp.param(id);
                let sum = tp.sum(w);
                Ok(tp.add_scalar(sum, counter.get()))
            },
            CheckOptions::default(),
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn eps_range_enforced() {
        let (mut s, id) = store_with(&[2]);
        let res = finite_diff_check(
            &mut s,
            |tp| {
                let w = tp.param(id);
                Ok(tp.sum(w))
            },
            CheckOptions {
                eps: 1e-2,
                ..Default::default()
            },
        );
        assert!(matches!(res, Err(Error::Validation(_))));
    }

    #[test]
    fn composite_mlp_gradient() {
        let mut s = ParamStore::<f64>::new();
        let w1 = s.register("l1.w", &[4, 6], Init::FanIn).unwrap();
        let b1 = s.register("l1.b", &[6], Init::Normal(0.1)).unwrap();
        let w2 = s.register("l2.w", &[6, 1], Init::FanIn).unwrap();
        s.initialize(11);
        let x = Tensor::from_f64(&[3, 4], &[0.1, -0.4, 0.7, 1.2, -1.0, 0.3, 0.5, -0.2, 0.9, 0.8, -0.6, 0.05])
            .unwrap();
        let err = finite_diff_check(
            &mut s,
            |tp| {
                let xv = tp.constant(x.clone());
                let (w1, b1, w2) = (tp.param(w1), tp.param(b1), tp.param(w2));
                let h = tp.matmul(xv, w1)?;
                let h = tp.add_row(h, b1)?;
                let h = tp.gelu(h);
                let o = tp.matmul(h, w2)?;
                let o = tp.sigmoid(o);
                Ok(tp.mean(o))
            },
            CheckOptions::default(),
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
