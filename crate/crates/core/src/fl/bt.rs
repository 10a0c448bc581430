use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};

/// Added to every denominator of the cross-correlation so zero-norm columns
/// produce zeros instead of NaN.
pub const CORR_EPS: f64 = 1e-12;

/// `d × d` cross-correlation between local and global projections.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCorr(pub Tensor);

impl CrossCorr {
    pub fn dim(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.data()[i * self.dim() + j]
    }
}

/// `Cᵢⱼ = Σ_b zl[b,i]·zg[b,j] / (‖zl[:,i]‖·‖zg[:,j]‖ + ε)` over the batch.
///
/// Columns are not mean-centered unless `centered` is set, in which case each
/// column's batch mean is subtracted first (the usual Barlow Twins form).
pub fn cross_corr_node(
    g: &mut Graph,
    z_local: NodeId,
    z_glob: NodeId,
    centered: bool,
) -> Result<NodeId> {
    let (sl, sg) = (g.shape(z_local).to_vec(), g.shape(z_glob).to_vec());
    if sl != sg || sl.len() != 2 {
        return Err(Error::Shape {
            node: g.len(),
            op: "cross_correlation",
            detail: format!("{sl:?} vs {sg:?}"),
        });
    }
    if sl[0] < 2 {
        return Err(Error::contract(format!(
            "cross-correlation over a batch of {} is vacuous; need at least 2",
            sl[0]
        )));
    }
    let (zl, zg) = if centered {
        let ml = g.col_mean(z_local)?;
        let mg = g.col_mean(z_glob)?;
        (g.sub_row(z_local, ml)?, g.sub_row(z_glob, mg)?)
    } else {
        (z_local, z_glob)
    };
    let zlt = g.transpose(zl)?;
    let num = g.matmul(zlt, zg)?;
    let nl = g.col_norm(zl)?;
    let ng = g.col_norm(zg)?;
    let denom = g.outer(nl, ng)?;
    let denom = g.offset(denom, CORR_EPS)?;
    g.div(num, denom)
}

/// `Σᵢ (1 − Cᵢᵢ)² + λ Σᵢ Σ_{j≠i} Cᵢⱼ²`.
pub fn bt_loss_node(g: &mut Graph, corr: NodeId, lambda: f64) -> Result<NodeId> {
    let d = g.shape(corr)[0];
    let mut identity = Tensor::zeros(vec![d, d]);
    let mut weights = Tensor::full(vec![d, d], lambda);
    for i in 0..d {
        identity.data_mut()[i * d + i] = 1.0;
        weights.data_mut()[i * d + i] = 1.0;
    }
    let eye = g.constant(identity);
    let w = g.constant(weights);
    let diff = g.sub(corr, eye)?;
    let sq = g.square(diff)?;
    let weighted = g.mul(sq, w)?;
    g.sum(weighted)
}

pub fn cross_correlation(z_local: &Tensor, z_glob: &Tensor, centered: bool) -> Result<CrossCorr> {
    let mut g = Graph::new();
    let a = g.constant(z_local.clone());
    let b = g.constant(z_glob.clone());
    let c = cross_corr_node(&mut g, a, b, centered)?;
    Ok(CrossCorr(g.value(c).clone()))
}

pub fn bt_loss(corr: &CrossCorr, lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let c = g.constant(corr.0.clone());
    let l = bt_loss_node(&mut g, c, lambda)?;
    g.value(l).item()
}

/// The invariance part `Σᵢ (1 − Cᵢᵢ)²` alone.
pub fn invariance_term(corr: &CrossCorr) -> f64 {
    (0..corr.dim()).map(|i| (1.0 - corr.get(i, i)).powi(2)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, ParamSet};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// Straight-line evaluation of the cross-correlation formula.
    fn oracle(zl: &Tensor, zg: &Tensor) -> Vec<f64> {
        let (b, d) = zl.dims2().unwrap();
        let at = |t: &Tensor, r: usize, c: usize| t.data()[r * d + c];
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut num = 0.0;
                let (mut nl, mut ng) = (0.0, 0.0);
                for r in 0..b {
                    num += at(zl, r, i) * at(zg, r, j);
                    nl += at(zl, r, i).powi(2);
                    ng += at(zg, r, j).powi(2);
                }
                out[i * d + j] = num / (nl.sqrt() * ng.sqrt() + CORR_EPS);
            }
        }
        out
    }

    #[test]
    fn anti_correlated_pair() {
        let z = Tensor::matrix(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let c = cross_correlation(&z, &z, false).unwrap();
        let expected = [1.0, -1.0, -1.0, 1.0];
        for (got, want) in c.0.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_columns_give_identity() {
        let z = Tensor::matrix(&[&[2.0, 0.0, 0.0], &[0.0, -3.0, 0.0], &[0.0, 0.0, 0.5], &[0.0, 0.0, 0.0]]);
        let c = cross_correlation(&z, &z, false).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c.get(i, j) - want).abs() < 1e-10);
            }
        }
        assert!(bt_loss(&c, 0.005).unwrap() < 1e-20);
    }

    #[test]
    fn zero_column_is_guarded() {
        let zl = Tensor::matrix(&[&[0.0, 1.0], &[0.0, 2.0]]);
        let zg = Tensor::matrix(&[&[1.0, 3.0], &[-1.0, 0.5]]);
        let c = cross_correlation(&zl, &zg, false).unwrap();
        assert!(c.0.all_finite());
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(0, 1), 0.0);
    }

    #[test]
    fn bt_loss_reference_values() {
        let c = CrossCorr(Tensor::matrix(&[&[1.0, -1.0], &[-1.0, 1.0]]));
        assert!((bt_loss(&c, 0.005).unwrap() - 0.01).abs() <= 1e-15);
        let zero = CrossCorr(Tensor::zeros(vec![2, 2]));
        assert_eq!(bt_loss(&zero, 0.005).unwrap(), 2.0);
        let eye = CrossCorr(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(bt_loss(&eye, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn contracts() {
        let one = Tensor::matrix(&[&[1.0, 2.0]]);
        assert!(matches!(cross_correlation(&one, &one, false), Err(Error::Contract(_))));
        let a = Tensor::zeros(vec![3, 2]);
        let b = Tensor::zeros(vec![3, 3]);
        assert!(matches!(cross_correlation(&a, &b, false), Err(Error::Shape { .. })));
    }

    #[test]
    fn centered_variant_removes_column_means() {
        let zl = Tensor::matrix(&[&[1.0, 5.0], &[3.0, 5.5], &[2.0, 4.5]]);
        let shifted = zl.map(|v| v + 10.0);
        let a = cross_correlation(&zl, &zl, true).unwrap();
        let b = cross_correlation(&shifted, &shifted, true).unwrap();
        assert!(a.0.max_abs_diff(&b.0) < 1e-9);
        assert!(cross_correlation(&zl, &zl, false).unwrap().0.max_abs_diff(&a.0) > 1e-3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = rng::stream(seed, &[5]);
            let mut rand = |b: usize, d: usize| {
                Tensor::new(vec![b, d], (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
            };
            let mut p = ParamSet::new();
            p.insert("z", rand(4, 3));
            let zg = rand(4, 3);
            for centered in [false, true] {
                let f = |p: &ParamSet| -> Result<(Graph, NodeId)> {
                    let mut g = Graph::new();
                    let z = g.param("z", p.get("z").unwrap().clone())?;
                    let c = g.constant(zg.clone());
                    let corr = cross_corr_node(&mut g, z, c, centered)?;
                    let l = bt_loss_node(&mut g, corr, 0.005)?;
                    Ok((g, l))
                };
                let (g, root) = f(&p).unwrap();
                let analytic = g.backward(root).unwrap();
                let numeric = finite_diff_grad(|q| f(q)?.0.value(root).item(), &p, 1e-5).unwrap();
                let err = max_relative_error(&analytic, &numeric);
                assert!(err < 1e-4, "seed {seed} centered {centered}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn matches_oracle_and_stays_bounded(
            b in 2usize..6,
            d in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = rng::stream(seed, &[]);
            let mut rand = || {
                Tensor::new(vec![b, d], (0..b * d).map(|_| rng.random_range(-3.0..3.0)).collect())
                    .unwrap()
            };
            let (zl, zg) = (rand(), rand());
            let c = cross_correlation(&zl, &zg, false).unwrap();
            for (got, want) in c.0.data().iter().zip(oracle(&zl, &zg)) {
                prop_assert!((got - want).abs() < 1e-12);
                prop_assert!(got.abs() <= 1.0 + 1e-9);
            }
            prop_assert!(bt_loss(&c, 0.005).unwrap() >= 0.0);
            let same = cross_correlation(&zl, &zl, false).unwrap();
            prop_assert!(invariance_term(&same) < 1e-10);
        }
    }
}
