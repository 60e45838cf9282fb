//! Recurrent baseline: one standard LSTM layer over the window's rows, the
//! final hidden state through a dense layer and a sigmoid.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, GradCheckReport, ParamVars, ParameterSet, Tape, Tensor, Var};
use crate::preprocess::EncodedWindow;

use super::{glorot, ModelError, WindowBatch};

/// Gate order inside the packed `4·hidden` axis: input, forget, cell, output.
const GATES: usize = 4;

/// A single-layer LSTM classifier sized against the same encoded windows the
/// transformer consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmBaseline {
    feature_width: usize,
    window: usize,
    hidden: usize,
    params: ParameterSet,
}

impl LstmBaseline {
    /// Glorot-uniform weights, zero biases, fixed draw order per seed.
    pub fn build(
        feature_width: usize,
        window: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if feature_width < 1 || window < 1 || hidden < 1 {
            return Err(ModelError::BadConfig {
                reason: "lstm needs feature_width, window, and hidden ≥ 1".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        params.insert("lstm.wx", glorot(&mut rng, feature_width, GATES * hidden));
        params.insert("lstm.wh", glorot(&mut rng, hidden, GATES * hidden));
        params.insert("lstm.b", Tensor::zeros(vec![GATES * hidden]));
        params.insert("out.w", glorot(&mut rng, hidden, 1));
        params.insert("out.b", Tensor::zeros(vec![1]));
        Ok(Self { feature_width, window, hidden, params })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Probability that the window's final flow is an attack.
    pub fn forward(&self, window: &EncodedWindow) -> Result<f64, ModelError> {
        Ok(self.forward_batch(&WindowBatch::from_refs(&[window])?)?[0])
    }

    pub fn forward_batch(&self, batch: &WindowBatch) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let vars = tape.register(&self.params)?;
        let probs = self.probability_graph(&tape, &vars, batch)?;
        Ok(probs.value().data().to_vec())
    }

    /// Unrolled recurrence as a tape graph; returns `windows × 1`
    /// probabilities, differentiable in every parameter.
    pub fn probability_graph<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        batch: &WindowBatch,
    ) -> Result<Var<'t>, ModelError> {
        if batch.width != self.feature_width {
            return Err(ModelError::WidthMismatch {
                expected: self.feature_width,
                got: batch.width,
            });
        }
        if batch.window_len != self.window {
            return Err(ModelError::WindowMismatch {
                expected: self.window,
                got: batch.window_len,
            });
        }
        let n = self.hidden;
        let x = tape.leaf(batch.features.clone())?;
        let mut h = tape.leaf(Tensor::zeros(vec![batch.windows, n]))?;
        let mut c = tape.leaf(Tensor::zeros(vec![batch.windows, n]))?;
        for t in 0..self.window {
            let step: Vec<usize> =
                (0..batch.windows).map(|w| w * self.window + t).collect();
            let x_t = x.select_rows(&step)?;
            let z = x_t
                .matmul(vars["lstm.wx"])?
                .add(h.matmul(vars["lstm.wh"])?)?
                .add_row_vec(vars["lstm.b"])?;
            let i = z.slice_cols(0, n)?.sigmoid()?;
            let f = z.slice_cols(n, n)?.sigmoid()?;
            let g = z.slice_cols(2 * n, n)?.tanh()?;
            let o = z.slice_cols(3 * n, n)?.sigmoid()?;
            c = f.mul_elem(c)?.add(i.mul_elem(g)?)?;
            h = o.mul_elem(c.tanh()?)?;
        }
        let logit = h.matmul(vars["out.w"])?.add_row_vec(vars["out.b"])?;
        Ok(logit.sigmoid()?)
    }

    /// Probability graph plus mean BCE against the batch labels.
    pub fn loss_graph<'t>(
        &self,
        tape: &'t Tape,
        vars: &ParamVars<'t>,
        batch: &WindowBatch,
    ) -> Result<(Var<'t>, Var<'t>), ModelError> {
        let probs = self.probability_graph(tape, vars, batch)?;
        let loss = probs.bce_mean(&batch.labels)?;
        Ok((loss, probs))
    }

    /// Verifies the tape gradients of the mean BCE loss on `batch` against
    /// central finite differences, element by element over every parameter.
    pub fn check_gradients(
        &self,
        batch: &WindowBatch,
        tolerance: f64,
    ) -> Result<GradCheckReport, ModelError> {
        self.forward_batch(batch)?;
        Ok(grad_check(
            |tape, vars| {
                self.loss_graph(tape, vars, batch)
                    .map(|(loss, _)| loss)
                    .map_err(super::flatten_autograd)
            },
            &self.params,
            tolerance,
        )?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BinaryLabel;

    fn window(t: usize, width: usize, fill: f64) -> EncodedWindow {
        EncodedWindow {
            window: t,
            width,
            features: vec![fill; t * width],
            label: BinaryLabel::Attack,
            pad_count: 0,
        }
    }

    #[test]
    fn zero_weights_predict_exactly_half() {
        let mut lstm = LstmBaseline::build(3, 4, 5, 9).unwrap();
        let names: Vec<String> = lstm.params().names().cloned().collect();
        for name in names {
            let zeroed = Tensor::zeros(lstm.params().get(&name).unwrap().shape().to_vec());
            lstm.params_mut().set(&name, zeroed);
        }
        assert_eq!(lstm.forward(&window(4, 3, 0.8)).unwrap(), 0.5);
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let lstm = LstmBaseline::build(3, 4, 6, 11).unwrap();
        let w = window(4, 3, 0.4);
        let p = lstm.forward(&w).unwrap();
        assert_eq!(p, lstm.forward(&w).unwrap());
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn batched_forward_matches_single_windows() {
        let lstm = LstmBaseline::build(2, 3, 4, 5).unwrap();
        let a = EncodedWindow {
            window: 3,
            width: 2,
            features: vec![0.1, 0.9, 0.3, 0.2, 0.7, 0.4],
            label: BinaryLabel::Benign,
            pad_count: 0,
        };
        let b = EncodedWindow {
            window: 3,
            width: 2,
            features: vec![0.6, 0.0, 0.8, 0.5, 0.1, 1.0],
            label: BinaryLabel::Attack,
            pad_count: 0,
        };
        let batch = WindowBatch::from_refs(&[&a, &b]).unwrap();
        let both = lstm.forward_batch(&batch).unwrap();
        assert!((both[0] - lstm.forward(&a).unwrap()).abs() < 1e-12);
        assert!((both[1] - lstm.forward(&b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_window_shape() {
        let lstm = LstmBaseline::build(3, 4, 4, 1).unwrap();
        assert!(matches!(
            lstm.forward(&window(4, 2, 0.0)),
            Err(ModelError::WidthMismatch { .. })
        ));
        assert!(matches!(
            lstm.forward(&window(5, 3, 0.0)),
            Err(ModelError::WindowMismatch { .. })
        ));
    }
}
