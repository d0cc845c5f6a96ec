//! Central finite differences over named parameter sets.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Central-difference estimate of `d f / d params` at step `h`.
pub fn finite_difference<F>(
    params: &BTreeMap<String, Tensor<f64>>,
    h: f64,
    mut f: F,
) -> BTreeMap<String, Tensor<f64>>
where
    F: FnMut(&BTreeMap<String, Tensor<f64>>) -> f64,
{
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    for (name, p) in params {
        let mut g = Tensor::zeros(p.shape());
        for i in 0..p.numel() {
            let orig = p.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.insert(name.clone(), g);
    }
    out
}

/// Norm-wise relative error `|a-b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
