//! Diagonal empirical Fisher estimation over the flat adapter vector.
//!
//! Two modes with one definition between them:
//!
//! - exact: one extra forward/backward pair per sample at fixed
//!   parameters, `F[i] = mean over samples of g_sample[i]^2`. This is the
//!   reference estimate and its cost is counted explicitly.
//! - EF (training-time): the squared minibatch gradients that training
//!   already produced, accumulated across the round's steps and divided
//!   by the step count. Zero extra passes, by construction.
//!
//! Entries are means (not sums) over samples/steps, so estimates are
//! comparable across clients of different sizes; dataset-size weighting
//! happens separately at aggregation time.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{
    client_backward, client_forward, encode_batch, server_forward_loss, AdapterParams, FrozenCore,
    FrozenPipeline,
};

/// Nonnegative diagonal aligned coordinate-for-coordinate with the flat
/// adapter vector it was estimated at.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    values: Vec<f64>,
    sample_count: usize,
}

impl FisherDiagonal {
    pub fn new(values: Vec<f64>, sample_count: usize) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::InvalidArgument(
                "FisherDiagonal needs sample_count >= 1".into(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "FisherDiagonal entries must be nonnegative and finite, got {v}"
            )));
        }
        Ok(Self {
            values,
            sample_count,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

/// Forward/backward pass bookkeeping, split by what the passes were for.
/// The EF-vs-exact cost contract is asserted on these numbers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounter {
    /// Passes spent on training steps (one forward + one backward each).
    pub train_forward: u64,
    pub train_backward: u64,
    /// Extra passes spent on exact Fisher estimation.
    pub fisher_forward: u64,
    pub fisher_backward: u64,
}

impl PassCounter {
    pub fn total_forward(&self) -> u64 {
        self.train_forward + self.fisher_forward
    }

    pub fn total_backward(&self) -> u64 {
        self.train_backward + self.fisher_backward
    }

    pub fn add(&mut self, other: &PassCounter) {
        self.train_forward += other.train_forward;
        self.train_backward += other.train_backward;
        self.fisher_forward += other.fisher_forward;
        self.fisher_backward += other.fisher_backward;
    }
}

/// Mean of squared per-sample gradients, from any gradient source. The
/// model-specific estimator and the test oracles share this accumulator,
/// which uses Kahan compensation so summation order cannot leak into the
/// estimate beyond strict rounding.
pub fn fisher_from_sample_grads<I>(n_coords: usize, grads: I) -> Result<FisherDiagonal>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut sum = vec![0.0f64; n_coords];
    let mut comp = vec![0.0f64; n_coords];
    let mut n = 0usize;
    for g in grads {
        if g.len() != n_coords {
            return Err(Error::LengthMismatch {
                what: "per-sample gradient".into(),
                expected: n_coords,
                got: g.len(),
            });
        }
        for (i, v) in g.iter().enumerate() {
            let sq = v * v;
            let y = sq - comp[i];
            let t = sum[i] + y;
            comp[i] = (t - sum[i]) - y;
            sum[i] = t;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("fisher estimation needs samples".into()));
    }
    for v in &mut sum {
        *v /= n as f64;
    }
    FisherDiagonal::new(sum, n)
}

/// Exact diagonal Fisher at fixed parameters: one batch-size-1 split
/// forward/backward per sample, squared and averaged. Costs exactly
/// `samples.len()` extra pass pairs, recorded on `counter`.
pub fn estimate_fisher_exact(
    pipeline: &FrozenPipeline,
    core: &FrozenCore,
    adapters: &AdapterParams,
    samples: &[Sample],
    counter: &mut PassCounter,
) -> Result<FisherDiagonal> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("fisher estimation needs samples".into()));
    }
    let n_coords = adapters.trainable_count();
    let mut grads = Vec::with_capacity(samples.len());
    for s in samples {
        let (img, bow, labels) = encode_batch(&[s], pipeline.dims())?;
        let pass = client_forward(&img, &bow, pipeline, adapters)?;
        let server = server_forward_loss(&pass.activation(), &labels, core)?;
        counter.fisher_forward += 1;
        let g = client_backward(&pass, &server.boundary_grad)?;
        counter.fisher_backward += 1;
        grads.push(g);
    }
    fisher_from_sample_grads(n_coords, grads)
}

/// Training-time (EF) accumulator: feed it each step's minibatch gradient
/// as training produces it, then finalize into the mean of squares over
/// steps. Performs no passes of its own.
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    sum: Vec<f64>,
    comp: Vec<f64>,
    steps: usize,
    samples_seen: usize,
}

impl FisherAccumulator {
    pub fn new(n_coords: usize) -> Self {
        Self {
            sum: vec![0.0; n_coords],
            comp: vec![0.0; n_coords],
            steps: 0,
            samples_seen: 0,
        }
    }

    pub fn accumulate(&mut self, minibatch_grad: &[f64], batch_size: usize) -> Result<()> {
        if minibatch_grad.len() != self.sum.len() {
            return Err(Error::LengthMismatch {
                what: "minibatch gradient".into(),
                expected: self.sum.len(),
                got: minibatch_grad.len(),
            });
        }
        for (i, v) in minibatch_grad.iter().enumerate() {
            let sq = v * v;
            let y = sq - self.comp[i];
            let t = self.sum[i] + y;
            self.comp[i] = (t - self.sum[i]) - y;
            self.sum[i] = t;
        }
        self.steps += 1;
        self.samples_seen += batch_size;
        Ok(())
    }

    pub fn finalize(mut self) -> Result<FisherDiagonal> {
        if self.steps == 0 {
            return Err(Error::EmptyInput(
                "EF accumulator finalized with no steps".into(),
            ));
        }
        for v in &mut self.sum {
            *v /= self.steps as f64;
        }
        FisherDiagonal::new(self.sum, self.samples_seen.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_adapters, init_frozen, ModelDims};
    use crate::rng::stream;
    use crate::tensor::{max_abs_diff, Bindings, Graph, Tensor};
    use rand::Rng as _;

    /// Scalar logistic model built on the graph engine: p(class 0) =
    /// sigma(w * x) via logits [w*x, 0].
    fn logistic_grad(w: f64, x: f64, label: usize) -> f64 {
        let mut g = Graph::new();
        let wp = g.param("w", Tensor::matrix(1, 1, vec![w]).unwrap(), true);
        let xin = g.input("x");
        let zero = g.input("zero");
        let wx = g.matmul(xin, wp);
        let logits = g.concat(wx, zero);
        let loss = g.softmax_cross_entropy(logits, "y");
        let bindings = Bindings::new()
            .tensor("x", Tensor::matrix(1, 1, vec![x]).unwrap())
            .tensor("zero", Tensor::matrix(1, 1, vec![0.0]).unwrap())
            .labels("y", vec![label]);
        let exec = g.forward(&bindings).unwrap();
        let grads = g.backward(&exec, loss).unwrap();
        grads.get(wp).unwrap().data()[0]
    }

    #[test]
    fn logistic_toy_matches_hand_formula() {
        // Hand oracle: dL/dw = (sigma(w x) - y) x with y = 1 for class 0.
        let w = 0.7;
        let cases = [(1.5, 0usize), (-0.8, 1), (2.2, 1), (0.4, 0)];
        let sigma = |z: f64| 1.0 / (1.0 + (-z).exp());
        let hand: Vec<f64> = cases
            .iter()
            .map(|&(x, label)| {
                let y = if label == 0 { 1.0 } else { 0.0 };
                let g = (sigma(w * x) - y) * x;
                g * g
            })
            .collect();
        let expected = hand.iter().sum::<f64>() / hand.len() as f64;

        let grads = cases.iter().map(|&(x, label)| vec![logistic_grad(w, x, label)]);
        let fisher = fisher_from_sample_grads(1, grads).unwrap();
        assert!(
            (fisher.values()[0] - expected).abs() < 1e-10,
            "estimate {} vs hand {expected}",
            fisher.values()[0]
        );
        assert_eq!(fisher.sample_count(), 4);
    }

    #[test]
    fn single_sample_is_squared_gradient() {
        let g = vec![0.3, -1.2, 0.0];
        let fisher = fisher_from_sample_grads(3, [g.clone()]).unwrap();
        let expected: Vec<f64> = g.iter().map(|v| v * v).collect();
        assert_eq!(fisher.values(), expected.as_slice());
    }

    #[test]
    fn loss_scaling_scales_fisher_quadratically() {
        let mut rng = stream(5, "fisher-scale", &[]);
        let grads: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let c = 3.5;
        let scaled: Vec<Vec<f64>> = grads
            .iter()
            .map(|g| g.iter().map(|v| c * v).collect())
            .collect();
        let base = fisher_from_sample_grads(4, grads).unwrap();
        let scaled = fisher_from_sample_grads(4, scaled).unwrap();
        let want: Vec<f64> = base.values().iter().map(|v| c * c * v).collect();
        assert!(max_abs_diff(scaled.values(), &want) < 1e-12);
    }

    #[test]
    fn exact_estimate_is_nonnegative_and_permutation_invariant() {
        let dims = ModelDims::default();
        let (p, c) = init_frozen(50, &dims).unwrap();
        let mut adapters = init_adapters(4, dims.d_model, 51).unwrap();
        let mut rng = stream(52, "fisher-perturb", &[]);
        for v in adapters
            .a_i
            .up
            .data_mut()
            .iter_mut()
            .chain(adapters.a_t.up.data_mut())
        {
            *v = rng.gen_range(-0.3..0.3);
        }
        let samples = crate::data::generate_synthetic_task(
            &crate::data::TaskSpec {
                samples: 12,
                ..Default::default()
            },
            9,
        )
        .unwrap();

        let mut counter = PassCounter::default();
        let f = estimate_fisher_exact(&p, &c, &adapters, &samples, &mut counter).unwrap();
        assert!(f.values().iter().all(|&v| v >= 0.0));
        assert_eq!(counter.fisher_forward, 12);
        assert_eq!(counter.fisher_backward, 12);
        assert_eq!(f.sample_count(), 12);

        let mut reversed = samples.clone();
        reversed.reverse();
        let mut c2 = PassCounter::default();
        let f2 = estimate_fisher_exact(&p, &c, &adapters, &reversed, &mut c2).unwrap();
        assert!(max_abs_diff(f.values(), f2.values()) < 1e-12);
    }

    #[test]
    fn ef_accumulator_means_over_steps() {
        let g = vec![0.5, -2.0];
        let mut acc = FisherAccumulator::new(2);
        acc.accumulate(&g, 8).unwrap();
        let f = acc.finalize().unwrap();
        assert_eq!(f.values(), &[0.25, 4.0]);
        assert_eq!(f.sample_count(), 8);

        let mut acc = FisherAccumulator::new(2);
        acc.accumulate(&g, 8).unwrap();
        acc.accumulate(&g, 8).unwrap();
        let f = acc.finalize().unwrap();
        // Mean of equal squares is the square.
        assert_eq!(f.values(), &[0.25, 4.0]);
        assert_eq!(f.sample_count(), 16);
    }

    #[test]
    fn ef_length_mismatch_is_rejected() {
        let mut acc = FisherAccumulator::new(2);
        assert!(acc.accumulate(&[1.0, 2.0, 3.0], 4).is_err());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let dims = ModelDims::default();
        let (p, c) = init_frozen(60, &dims).unwrap();
        let adapters = init_adapters(2, dims.d_model, 61).unwrap();
        let mut counter = PassCounter::default();
        assert!(estimate_fisher_exact(&p, &c, &adapters, &[], &mut counter).is_err());
    }
}
