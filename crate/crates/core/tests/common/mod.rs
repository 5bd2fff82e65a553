#![allow(dead_code)]

pub mod gradsuite;

use npnorm::tensorcore::{Graph, NodeId, Rng, Tensor};

/// Analytic gradient of `build` (which must return a scalar node) against
/// central finite differences with step `h`, for every parameter slot.
/// Returns the worst `|a - n|_2 / (|a|_2 + |n|_2)` over slots.
pub fn gradcheck<F>(params: &[Tensor], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |ps: &[Tensor]| -> (Graph, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().enumerate().map(|(i, p)| g.param(i, p.clone())).collect();
        let loss = build(&mut g, &ids);
        (g, loss)
    };
    let (g, loss) = eval(params);
    let analytic = g.backward(loss, params.len()).unwrap();
    let mut worst = 0.0f64;
    for (slot, p) in params.iter().enumerate() {
        let mut numeric = vec![0.0; p.len()];
        for i in 0..p.len() {
            let mut plus = params.to_vec();
            plus[slot].data_mut()[i] += h;
            let mut minus = params.to_vec();
            minus[slot].data_mut()[i] -= h;
            let (gp, lp) = eval(&plus);
            let (gm, lm) = eval(&minus);
            numeric[i] = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
        }
        let a = analytic.params[slot].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if na + nn < 1e-12 { diff } else { diff / (na + nn) };
        worst = worst.max(rel);
    }
    worst
}

pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n)).unwrap()
}

/// `sum(out * r)` with a fixed random projection, so every output element
/// carries a distinct weight.
pub fn project(g: &mut Graph, out: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(out).to_vec();
    let r = g.input(randn(&shape, &mut Rng::new(seed)));
    let p = g.mul(out, r).unwrap();
    g.sum(p)
}
