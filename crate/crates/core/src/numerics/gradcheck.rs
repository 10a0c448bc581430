use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Magnitude below which [`max_relative_error`] compares absolute differences.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Central-difference gradient `(f(w+εe) − f(w−εe)) / 2ε`, one coordinate at a
/// time. Kinks are not detected: at `|w|` with `w = 0` the result is 0.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamSet, eps: f64) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = params.clone();
    let mut grads = ParamSet::new();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let len = params.get(&name).map_or(0, Tensor::len);
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let plus = f(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let minus = f(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * eps);
        }
        let shape = params.get(&name).unwrap().shape().to_vec();
        grads.insert(name, Tensor::from_parts(shape, g));
    }
    Ok(grads)
}

/// Largest coordinate-wise `|a − b| / max(|a|, |b|, floor)` over two
/// compatible gradient sets. Returns infinity for incompatible sets.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet) -> f64 {
    if !a.is_compatible(b) {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, ta), (_, tb))| ta.data().iter().zip(tb.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamSet {
        std::iter::once((name.to_string(), Tensor::scalar(v))).collect()
    }

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff_grad(|p| Ok(p.get("w").unwrap().item()?.powi(2)), &one("w", 3.0), 1e-5)
            .unwrap();
        assert!((g.get("w").unwrap().item().unwrap() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn kink_gives_symmetric_zero() {
        let g = finite_diff_grad(|p| Ok(p.get("w").unwrap().item()?.abs()), &one("w", 0.0), 1e-5)
            .unwrap();
        assert_eq!(g.get("w").unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_grad(|_| Ok(0.0), &one("w", 0.0), 0.0).is_err());
    }

    #[test]
    fn relative_error_uses_floor() {
        let a = one("w", 1e-9);
        let b = one("w", 2e-9);
        assert!(max_relative_error(&a, &b) < 1e-4);
        assert!((max_relative_error(&one("w", 1.0), &one("w", 1.1)) - 0.1 / 1.1).abs() < 1e-12);
        assert_eq!(max_relative_error(&a, &one("v", 1.0)), f64::INFINITY);
    }
}
