use super::{ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central differences.
///
/// `f` records a scalar computation of the parameters on a fresh tape. Returns
/// the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over
/// every parameter entry. Gradients in `store` are reset first.
pub fn finite_diff_check<T, F>(mut f: F, store: &mut ParamStore<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>, &mut Tape<T>) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("finite difference step {eps} outside (0, 1e-2]")));
    }
    let eval = |f: &mut F, store: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(store, &mut tape)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        let x = v.item().to_f64().unwrap_or(f64::NAN);
        if !x.is_finite() {
            return Err(Error::NumericalInstability("non-finite objective".into()));
        }
        Ok(x)
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    tape.backward(out, store)?;
    drop(tape);

    let step = T::from_f64_lossy(eps);
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).numel() {
            let analytic = store.grad(id)[k].to_f64().unwrap_or(f64::NAN);
            if !analytic.is_finite() {
                return Err(Error::NumericalInstability(format!(
                    "non-finite gradient for {}[{k}]",
                    store.name(id)
                )));
            }
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + step;
            let plus = eval(&mut f, store);
            store.value_mut(id).data_mut()[k] = orig - step;
            let minus = eval(&mut f, store);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn dot_store(seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::randn(&[8], 1.0, seed)).unwrap();
        store.insert("b", Tensor::randn(&[8], 1.0, seed + 1)).unwrap();
        store
    }

    fn dot_fn(store: &ParamStore<f64>, tape: &mut Tape<f64>) -> Result<Var> {
        let a = tape.param(store, store.expect_id("a")?)?;
        let b = tape.param(store, store.expect_id("b")?)?;
        tape.dot(a, b)
    }

    #[test]
    fn bilinear_is_exact() {
        let mut store = dot_store(5);
        let err = finite_diff_check(dot_fn, &mut store, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn zero_step_rejected() {
        let mut store = dot_store(5);
        assert!(finite_diff_check(dot_fn, &mut store, 0.0).is_err());
        assert!(finite_diff_check(dot_fn, &mut store, 0.1).is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        // A constant leaf that secretly depends on a parameter breaks the check.
        let mut store = dot_store(9);
        let err = finite_diff_check(
            |s: &ParamStore<f64>, tape: &mut Tape<f64>| {
                let a = tape.param(s, s.expect_id("a")?)?;
                let frozen = tape.constant(s.value(s.expect_id("b")?).clone())?;
                tape.dot(a, frozen)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn overflow_reports_instability() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::full(&[2], 1e300)).unwrap();
        let err = finite_diff_check(
            |s: &ParamStore<f64>, tape: &mut Tape<f64>| {
                let a = tape.param(s, s.expect_id("a")?)?;
                let sq = tape.mul(a, a)?;
                tape.sum(sq)
            },
            &mut store,
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("numerical-instability"));
    }
}
