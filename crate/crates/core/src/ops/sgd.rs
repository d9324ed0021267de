use super::ParamMap;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Plain stochastic gradient descent with L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

/// `p <- p - lr * (g + weight_decay * p)` for every parameter; the decay term
/// applies only where `decays(name)` holds.
///
/// All gradients are validated before any parameter is touched.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamMap<T>,
    grads: &ParamMap<T>,
    cfg: &SgdConfig,
    decays: impl Fn(&str) -> bool,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if let Some(extra) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::invalid(format!("gradient `{extra}` has no parameter")));
    }
    let lr = T::from_f64(cfg.lr);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let wd = T::from_f64(if decays(name) { cfg.weight_decay } else { 0.0 });
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * (gv + wd * *pv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> ParamMap<f64> {
        let mut m = ParamMap::new();
        m.insert("w".into(), Tensor::from_vec(&[1], vec![v]).unwrap());
        m
    }

    #[test]
    fn update_rule_examples() {
        let mut p = single(1.0);
        sgd_step(&mut p, &single(1.0), &SgdConfig { lr: 0.0, weight_decay: 0.3 }, |_| true).unwrap();
        assert_eq!(p["w"].data(), &[1.0]);

        sgd_step(&mut p, &single(1.0), &SgdConfig { lr: 2e-4, weight_decay: 0.0 }, |_| true).unwrap();
        assert!((p["w"].data()[0] - 0.9998).abs() < 1e-15);

        let mut p = single(2.0);
        sgd_step(&mut p, &single(0.0), &SgdConfig { lr: 0.1, weight_decay: 0.5 }, |_| true).unwrap();
        assert!((p["w"].data()[0] - 1.9).abs() < 1e-15);

        let mut p = single(2.0);
        sgd_step(&mut p, &single(0.0), &SgdConfig { lr: 0.1, weight_decay: 0.5 }, |_| false).unwrap();
        assert_eq!(p["w"].data(), &[2.0]);
    }

    #[test]
    fn rejects_missing_or_mismatched() {
        let mut p = single(1.0);
        let cfg = SgdConfig { lr: 0.1, weight_decay: 0.0 };
        assert!(sgd_step(&mut p, &ParamMap::new(), &cfg, |_| true).is_err());
        let mut g = ParamMap::new();
        g.insert("w".into(), Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        assert!(sgd_step(&mut p, &g, &cfg, |_| true).is_err());
        assert_eq!(p["w"].data(), &[1.0]);
    }
}
