#![allow(dead_code)]

use motif_core::nn::ParamTree;
use rand::Rng;
use rand_distr::StandardNormal;

pub mod checks;
pub mod oracle;

pub const FD_STEP: f64 = 1e-3;

/// Adds `N(0, std²)` noise to every parameter so no gradient is trivially zero.
pub fn perturb<P: ParamTree<f64>, R: Rng>(p: &mut P, std: f64, rng: &mut R) {
    for (_, mut t) in p.named_mut() {
        for v in t.iter_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` of the analytic gradient against
/// central differences, per tensor, over up to `per_tensor` sampled entries.
pub fn grad_errors<P, R>(
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
    per_tensor: usize,
    rng: &mut R,
) -> Vec<(String, f64)>
where
    P: ParamTree<f64> + Clone,
    R: Rng,
{
    let names: Vec<(String, usize)> = params.named().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.named().iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let mut out = Vec::new();
    for (ti, (name, len)) in names.iter().enumerate() {
        let idx: Vec<usize> = if *len <= per_tensor {
            (0..*len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..*len)).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut tensors = p.named_mut();
                let v = tensors[ti].1.iter_mut().nth(i).expect("index in range");
                *v += delta;
                drop(tensors);
                loss(&p)
            };
            let num = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = grads[ti][i];
            diff += (a - num).powi(2);
            na += a * a;
            nn += num * num;
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel = if denom < 1e-12 { 0.0 } else { diff.sqrt() / denom };
        out.push((name.clone(), rel));
    }
    out
}

pub fn worst(errors: &[(String, f64)]) -> (String, f64) {
    errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, e| if e.1 > acc.1 { e } else { acc })
}
