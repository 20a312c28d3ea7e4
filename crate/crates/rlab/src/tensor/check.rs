//! Central finite-difference verification of analytic gradients.
//!
//! Verification support: compares reverse-mode gradients against a
//! two-sided difference quotient of the forward pass, probing random
//! coordinates of parameters and designated inputs. Independent of the
//! backward implementation by construction — it only ever calls `forward`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{collect_gradients, Graph, NodeId, ParameterStore, Tensor, TensorError};

#[derive(Debug)]
pub struct FdReport {
    pub probes: usize,
    pub max_rel_err: f64,
}

/// One probe target: a coordinate of a parameter or of a bound input.
enum Coord {
    Param { entry: usize, offset: usize },
    Input { binding: usize, offset: usize },
}

/// Probes `probes` random coordinates of every parameter and of the named
/// inputs, comparing the analytic gradient of the scalar `loss` node with a
/// central difference at step `h`. Coordinates where both gradients are
/// below 1e-8 in magnitude are compared absolutely.
pub fn finite_diff_check(
    graph: &Graph,
    store: &ParameterStore,
    bindings: &[(&str, &Tensor)],
    loss: NodeId,
    probe_inputs: &[&str],
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<FdReport, TensorError> {
    let mut run = graph.forward_to(store, bindings, &[loss])?;
    graph.backward(store, &mut run, loss)?;
    let grads = collect_gradients(graph, &run, store);

    let param_names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
    let input_grads: Vec<(usize, Tensor)> = probe_inputs
        .iter()
        .map(|name| {
            let id = graph.input_id(name)?;
            let pos = bindings
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| TensorError::InputNotBound((*name).into()))?;
            let g = run
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(bindings[pos].1.shape()));
            Ok((pos, g))
        })
        .collect::<Result<_, TensorError>>()?;

    // Candidate coordinate pool.
    let mut pool: Vec<Coord> = Vec::new();
    for (i, (_, t)) in store.iter().enumerate() {
        for offset in 0..t.numel() {
            pool.push(Coord::Param { entry: i, offset });
        }
    }
    for (pos, _) in &input_grads {
        for offset in 0..bindings[*pos].1.numel() {
            pool.push(Coord::Input { binding: *pos, offset });
        }
    }
    assert!(!pool.is_empty(), "nothing to probe");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    for _ in 0..probes {
        let coord = &pool[rng.gen_range(0..pool.len())];
        let (analytic, fd) = match coord {
            Coord::Param { entry, offset } => {
                let name = param_names[*entry];
                let analytic = grads.get(name).map_or(0.0, |g| g.data()[*offset]);
                let eval = |delta: f64| -> Result<f64, TensorError> {
                    let mut s = store.clone();
                    let mut v = s.value(name)?.clone();
                    v.data_mut()[*offset] += delta;
                    s.set_value(name, v)?;
                    let r = graph.forward_to(&s, bindings, &[loss])?;
                    Ok(r.value(loss)?.data()[0])
                };
                (analytic, (eval(h)? - eval(-h)?) / (2.0 * h))
            }
            Coord::Input { binding, offset } => {
                let analytic = input_grads
                    .iter()
                    .find(|(p, _)| p == binding)
                    .map_or(0.0, |(_, g)| g.data()[*offset]);
                let eval = |delta: f64| -> Result<f64, TensorError> {
                    let mut t = bindings[*binding].1.clone();
                    t.data_mut()[*offset] += delta;
                    let mut b: Vec<(&str, &Tensor)> = bindings.to_vec();
                    b[*binding] = (bindings[*binding].0, &t);
                    let r = graph.forward_to(store, &b, &[loss])?;
                    Ok(r.value(loss)?.data()[0])
                };
                (analytic, (eval(h)? - eval(-h)?) / (2.0 * h))
            }
        };
        let denom = analytic.abs().max(fd.abs());
        let rel = if denom < 1e-8 { (analytic - fd).abs() } else { (analytic - fd).abs() / denom };
        max_rel = max_rel.max(rel);
    }
    Ok(FdReport { probes, max_rel_err: max_rel })
}
