//! Central finite differences against reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs())
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("output {:?} is not scalar", t.shape()),
        ));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(Error::NonFinite("grad_check"));
    }
    Ok(x)
}

/// Max relative error between autodiff and central differences of a scalar
/// function of the given leaves, over every coordinate.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |pt: &[Tensor], track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = pt.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = f(&mut g, &leaves)?;
        Ok((g, leaves, out))
    };
    let (g, leaves, out) = eval(point, true)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let ad = grads.get(*leaf).expect("leaf gradient").data().to_vec();
        for (c, &ad_c) in ad.iter().enumerate() {
            let x0 = point[li].data()[c];
            probe[li].data_mut()[c] = x0 + step;
            let (gp, _, op) = eval(&probe, false)?;
            probe[li].data_mut()[c] = x0 - step;
            let (gm, _, om) = eval(&probe, false)?;
            probe[li].data_mut()[c] = x0;
            let fd = (scalar_of(&gp, op)? - scalar_of(&gm, om)?) / (2.0 * step);
            worst = worst.max(relative_error(ad_c, fd));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub worst_param: String,
    pub coordinates: usize,
}

/// Gradient check over every trainable parameter of a store.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = g.param_grads(&grads);

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_error: 0.0,
        worst_param: String::new(),
        coordinates: 0,
    };
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let zeros;
        let ad = match analytic.iter().find(|(i, _)| *i == id) {
            Some((_, t)) => t.data(),
            None => {
                zeros = vec![0.0; p.value.len()];
                &zeros
            }
        };
        for (c, &ad_c) in ad.iter().enumerate() {
            let x0 = p.value.data()[c];
            probe.get_mut(id).value.data_mut()[c] = x0 + step;
            let mut gp = Graph::no_grad();
            let op = f(&mut gp, &probe)?;
            probe.get_mut(id).value.data_mut()[c] = x0 - step;
            let mut gm = Graph::no_grad();
            let om = f(&mut gm, &probe)?;
            probe.get_mut(id).value.data_mut()[c] = x0;
            let fd = (scalar_of(&gp, op)? - scalar_of(&gm, om)?) / (2.0 * step);
            let err = relative_error(ad_c, fd);
            report.coordinates += 1;
            if err > report.max_error {
                report.max_error = err;
                report.worst_param = format!("{}[{c}]", p.name);
            }
        }
    }
    Ok(report)
}
