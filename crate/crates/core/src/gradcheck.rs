//! Gradient checking: seeded random graphs whose backward pass is compared
//! against the central finite-difference oracle.

use rand::Rng as _;

use crate::error::Result;
use crate::rng::{stream, Rng};
use crate::tensor::{finite_difference_gradient, Bindings, Graph, NodeId, Tensor};

/// Relative error with the guarded denominator `max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Run backward and the finite-difference oracle on the same graph and
/// return the worst per-coordinate relative error over all trainable
/// params.
pub fn max_grad_rel_error(
    graph: &Graph,
    bindings: &Bindings,
    loss: NodeId,
    h: f64,
) -> Result<f64> {
    let exec = graph.forward(bindings)?;
    let grads = graph.backward(&exec, loss)?;
    let fd = finite_difference_gradient(graph, bindings, loss, h)?;
    let mut worst = 0.0f64;
    for (pid, (name, fd_grad)) in graph.trainable_params().into_iter().zip(&fd) {
        debug_assert_eq!(graph.node_name(pid), name);
        let analytic = grads
            .get(pid)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; fd_grad.numel()]);
        for (a, n) in analytic.iter().zip(fd_grad.data()) {
            worst = worst.max(rel_error(*a, *n));
        }
    }
    Ok(worst)
}

/// A randomly composed small graph ending in a scalar cross-entropy loss,
/// together with the bindings to run it. Draws layer count, widths, batch
/// size, nonlinearities, and an optional two-branch concat from the given
/// seed; all values land in [-2, 2].
pub fn random_case(seed: u64) -> (Graph, Bindings, NodeId) {
    let mut rng = stream(seed, "gradcheck-case", &[]);
    let batch = rng.gen_range(1..=4usize);
    let d_in = rng.gen_range(1..=5usize);
    let n_classes = rng.gen_range(2..=5usize);

    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let x = g.input("x");
    bindings = bindings.tensor("x", rand_tensor(&mut rng, batch, d_in));

    let mut cur = x;
    let mut width = d_in;
    let layers = rng.gen_range(1..=3usize);
    for li in 0..layers {
        let next = rng.gen_range(1..=5usize);
        cur = dense(&mut g, &mut rng, cur, width, next, &format!("l{li}"));
        width = next;
        match rng.gen_range(0..4u8) {
            0 => cur = g.relu(cur),
            1 => cur = g.tanh(cur),
            2 => cur = g.scale(cur, rng.gen_range(0.5..1.5)),
            _ => {}
        }
    }

    // Occasionally fork into two branches and concat, mirroring the
    // two-modality pipeline shape.
    if rng.gen_bool(0.3) {
        let wa = rng.gen_range(1..=3usize);
        let wb = rng.gen_range(1..=3usize);
        let a = dense(&mut g, &mut rng, cur, width, wa, "branch_a");
        let b = dense(&mut g, &mut rng, cur, width, wb, "branch_b");
        let a = g.tanh(a);
        cur = g.concat(a, b);
        width = wa + wb;
    }

    // Occasionally collapse the batch before the classifier head.
    let head_batch = if batch > 1 && rng.gen_bool(0.25) {
        cur = g.mean_batch(cur);
        1
    } else {
        batch
    };

    let logits = dense(&mut g, &mut rng, cur, width, n_classes, "head");
    let loss = g.softmax_cross_entropy(logits, "y");
    let labels = (0..head_batch).map(|_| rng.gen_range(0..n_classes)).collect();
    bindings = bindings.labels("y", labels);
    (g, bindings, loss)
}

fn dense(g: &mut Graph, rng: &mut Rng, x: NodeId, d_in: usize, d_out: usize, tag: &str) -> NodeId {
    let w = g.param(&format!("{tag}_w"), rand_tensor(rng, d_in, d_out), true);
    let b = g.param(&format!("{tag}_b"), rand_tensor(rng, 1, d_out), true);
    let xw = g.matmul(x, w);
    g.add(xw, b)
}

fn rand_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_layer_net_matches_finite_differences() {
        // 2-layer net with 8 params: [1,2] dense -> tanh -> [2,1] dense,
        // checked against the central-difference oracle at h=1e-5.
        let mut rng = stream(11, "two-layer", &[]);
        let mut g = Graph::new();
        let x = g.input("x");
        let h1 = dense(&mut g, &mut rng, x, 1, 2, "l0");
        let h1 = g.tanh(h1);
        let logits = dense(&mut g, &mut rng, h1, 2, 2, "l1");
        let loss = g.softmax_cross_entropy(logits, "y");
        assert_eq!(
            g.trainable_params()
                .iter()
                .map(|&p| g.param_value(p).unwrap().numel())
                .sum::<usize>(),
            2 + 2 + 4 + 2 + 2 // counting the input-layer 1x2 weight as 2
        );
        let bindings = Bindings::new()
            .tensor("x", rand_tensor(&mut rng, 1, 1))
            .labels("y", vec![1]);
        let worst = max_grad_rel_error(&g, &bindings, loss, 1e-5).unwrap();
        assert!(worst < 1e-4, "worst rel error {worst}");
    }

    #[test]
    fn random_graphs_match_finite_differences() {
        for seed in 0..25 {
            let (g, bindings, loss) = random_case(seed);
            let worst = max_grad_rel_error(&g, &bindings, loss, 1e-5).unwrap();
            assert!(worst < 1e-4, "seed {seed}: worst rel error {worst}");
        }
    }
}
