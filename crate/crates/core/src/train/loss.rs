use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::log_sigmoid;
use crate::tensor::Tensor;

/// Multi-label soft margin loss averaged over classes:
/// `-(1/K) Σ_c [y_c log σ(z_c) + (1 - y_c) log σ(-z_c)]`.
pub fn soft_margin_loss(z: &Tensor, y: &[bool]) -> Result<f64> {
    if z.numel() != y.len() {
        return Err(Error::shape(
            "soft_margin_loss",
            format!("{} logits for {} labels", z.numel(), y.len()),
        ));
    }
    let total: f64 = z
        .data()
        .iter()
        .zip(y)
        .map(|(&zc, &yc)| if yc { log_sigmoid(zc) } else { log_sigmoid(-zc) })
        .sum();
    Ok(-total / y.len() as f64)
}

/// Graph form over a batch: `z: [batch, K]`, `y: [batch, K]` of 0/1,
/// averaged over batch and classes.
pub fn soft_margin_loss_graph(g: &mut Graph, z: Var, y: &Tensor) -> Result<Var> {
    if g.dims(z) != y.dims() {
        return Err(Error::shape(
            "soft_margin_loss",
            format!("logits {:?} vs labels {:?}", g.dims(z), y.dims()),
        ));
    }
    let n = y.numel() as f64;
    let pos = g.log_sigmoid(z)?;
    let neg_z = g.scale(z, -1.0)?;
    let neg = g.log_sigmoid(neg_z)?;
    let yv = g.constant(y.clone());
    let not_y = g.constant(y.map(|v| 1.0 - v));
    let a = g.mul(pos, yv)?;
    let b = g.mul(neg, not_y)?;
    let s = g.add(a, b)?;
    let total = g.sum(s)?;
    g.scale(total, -1.0 / n)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_logits_give_ln2() {
        let z = Tensor::zeros(&[4]);
        for y in [[true, false, true, false], [false; 4], [true; 4]] {
            assert!((soft_margin_loss(&z, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_positive_term_vanishes() {
        let z = Tensor::new(&[1], vec![20.0]).unwrap();
        assert!(soft_margin_loss(&z, &[true]).unwrap() < 1e-8);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let z = Tensor::from_fn(&[4], |_| rng.random_range(-6.0..6.0));
            let y: Vec<bool> = (0..4).map(|_| rng.random_bool(0.5)).collect();
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let direct = -(0..4)
                .map(|c| {
                    let s = sig(z.data()[c]);
                    if y[c] { s.ln() } else { (1.0 - s).ln() }
                })
                .sum::<f64>()
                / 4.0;
            let got = soft_margin_loss(&z, &y).unwrap();
            assert!((got - direct).abs() < 1e-10);
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn graph_form_agrees_and_rejects_mismatch() {
        let z = Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let l = soft_margin_loss_graph(&mut g, zv, &y).unwrap();
        let a = soft_margin_loss(&Tensor::new(&[2], vec![0.5, -1.0]).unwrap(), &[true, false]).unwrap();
        let b = soft_margin_loss(&Tensor::new(&[2], vec![2.0, 0.0]).unwrap(), &[false, true]).unwrap();
        assert!((g.value(l).item().unwrap() - (a + b) / 2.0).abs() < 1e-14);
        assert!(soft_margin_loss_graph(&mut g, zv, &Tensor::zeros(&[2, 3])).is_err());
        assert!(soft_margin_loss(&z, &[true]).is_err());
    }
}
