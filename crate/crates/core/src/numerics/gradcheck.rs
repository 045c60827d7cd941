use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Largest relative disagreement between the analytic gradient of `f` at `x`
/// and central finite differences with step `h`, over all coordinates.
///
/// The error per coordinate is `|analytic − fd| / max(1, |analytic|, |fd|)`;
/// differences are formed in 64-bit.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, h: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// [`grad_check`] restricted to the listed coordinates of `x`.
pub fn grad_check_coords<S, F>(f: F, x: &Tensor<S>, h: f64, coords: &[usize]) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let leaf = graph.input(x.shape(), x.data().to_vec(), true)?;
    let out = f(&mut graph, leaf)?;
    graph.backward(out)?;
    let analytic = graph
        .grad(leaf)
        .map(<[S]>::to_vec)
        .unwrap_or_else(|| vec![S::zero(); x.numel()]);

    let eval = |data: Vec<S>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.input(x.shape(), data, false)?;
        let out = f(&mut g, leaf)?;
        if g.value(out).len() != 1 {
            return Err(Error::Usage("grad_check needs a scalar-valued function".into()));
        }
        Ok(g.item_f64(out))
    };

    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        let xi = x.data()[i].to_f64c();
        plus[i] = S::from_f64c(xi + h);
        minus[i] = S::from_f64c(xi - h);
        // Use the steps actually representable in S.
        let span = plus[i].to_f64c() - minus[i].to_f64c();
        let fd = (eval(plus)? - eval(minus)?) / span;
        let a = analytic[i].to_f64c();
        let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
