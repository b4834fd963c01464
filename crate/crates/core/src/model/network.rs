use crate::balance::AssignmentTracker;
use crate::error::{Error, Result};
use crate::numeric::{gemm, nll, softmax_rows, Matrix, PROB_FLOOR};

use super::layers::{Linear, Stage, StageTrace, Unit};

/// A stack of expert stages followed by a linear map and softmax.
///
/// Every model kind except the single-layer softmax mixture is one of these:
/// the DMoE has two gated mixture stages, the baselines swap the second stage
/// for a single expert or a concatenation, drop it, or use plain layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub stages: Vec<Stage>,
    /// The final linear map `f^3`.
    pub output: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamPlace {
    Stage(usize, Unit),
    Output,
}

/// Batch forward pass, everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub stages: Vec<StageTrace>,
    pub logits: Matrix,
    /// Class probabilities, one row per example.
    pub probs: Matrix,
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.probs.rows()
    }

    /// Output of stage `s` (`z^1`, `z^2`, ...).
    pub fn hidden(&self, stage: usize) -> &Matrix {
        &self.stages[stage].output
    }

    /// Gate values used by each gated stage, in stage order.
    pub fn used_gates(&self) -> Vec<&Matrix> {
        self.stages.iter().filter_map(|s| s.gate_used.as_ref()).collect()
    }

    /// Gate values before balancing masks, in stage order.
    pub fn raw_gates(&self) -> Vec<&Matrix> {
        self.stages.iter().filter_map(|s| s.gate_raw.as_ref()).collect()
    }
}

impl Network {
    pub fn input_dim(&self) -> usize {
        self.stages
            .first()
            .map_or(self.output.input_dim(), Stage::input_dim)
    }

    pub fn classes(&self) -> usize {
        self.output.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(Stage::param_count).sum::<usize>() + self.output.param_count()
    }

    /// Expert counts of the gated stages, in order.
    pub fn gate_widths(&self) -> Vec<usize> {
        self.stages
            .iter()
            .filter_map(|s| s.gate.as_ref().map(|g| g.experts()))
            .collect()
    }

    pub fn zeros_like(&self) -> Network {
        Network {
            stages: self.stages.iter().map(Stage::zeros_like).collect(),
            output: Linear::zeros(self.output.input_dim(), self.output.output_dim()),
        }
    }

    /// Runs the batch `x` (one example per row). With an active `tracker`,
    /// each gated stage applies the balancing mask from the current totals.
    pub fn forward(&self, x: &Matrix, tracker: Option<&AssignmentTracker>) -> Result<ForwardTrace> {
        self.forward_reusing(x, tracker, None)
    }

    /// Forward pass that, given `reuse = Some((base, place))` from an earlier
    /// pass over the same `x`, recomputes only what `place` feeds into.
    pub(crate) fn forward_reusing(
        &self,
        x: &Matrix,
        tracker: Option<&AssignmentTracker>,
        reuse: Option<(&ForwardTrace, ParamPlace)>,
    ) -> Result<ForwardTrace> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if let Some(t) = tracker {
            let widths = self.gate_widths();
            if t.layers() != widths.len() || (0..t.layers()).any(|l| t.experts(l) != widths[l]) {
                return Err(Error::Shape(format!(
                    "tracker layout does not match gated layers {widths:?}"
                )));
            }
        }
        let mut traces: Vec<StageTrace> = Vec::with_capacity(self.stages.len());
        let mut gated = 0;
        for stage in &self.stages {
            let input = traces.last().map_or(x, |t| &t.output);
            let mask = match (&stage.gate, tracker) {
                (Some(_), Some(t)) => {
                    let m = t.over_margin(gated);
                    Some(m)
                }
                _ => None,
            };
            if stage.gate.is_some() {
                gated += 1;
            }
            let s = traces.len();
            let trace = match reuse {
                Some((base, ParamPlace::Stage(c, _))) if s < c => base.stages[s].clone(),
                Some((base, ParamPlace::Stage(c, unit))) if s == c => {
                    stage.forward_reusing(input, mask.as_deref(), Some((&base.stages[s], unit)))
                }
                Some((base, ParamPlace::Output)) => base.stages[s].clone(),
                _ => stage.forward(input, mask.as_deref()),
            };
            traces.push(trace);
        }
        let last = traces.last().map_or(x, |t| &t.output);
        let logits = self.output.forward(last);
        let mut probs = logits.clone();
        softmax_rows(&mut probs);
        Ok(ForwardTrace {
            stages: traces,
            logits,
            probs,
        })
    }

    /// Mean cross-entropy of a traced batch.
    pub fn batch_loss(trace: &ForwardTrace, labels: &[usize]) -> f64 {
        labels
            .iter()
            .enumerate()
            .map(|(r, &y)| nll(trace.probs.get(r, y)))
            .sum::<f64>()
            / labels.len().max(1) as f64
    }

    pub fn loss(&self, x: &Matrix, labels: &[usize], tracker: Option<&AssignmentTracker>) -> Result<f64> {
        let trace = self.forward(x, tracker)?;
        Ok(Self::batch_loss(&trace, labels))
    }

    /// Gradient of the mean cross-entropy over the batch, with the same
    /// layout as `self`. Masked gate entries in the trace stay masked.
    pub fn backward(&self, x: &Matrix, trace: &ForwardTrace, labels: &[usize]) -> Result<Network> {
        let batch = x.rows();
        if labels.len() != batch || trace.batch() != batch || trace.stages.len() != self.stages.len() {
            return Err(Error::Shape(format!(
                "trace/labels do not match a batch of {batch}"
            )));
        }
        let classes = self.classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Config(format!("label {bad} out of range for {classes} classes")));
        }
        let inv = 1.0 / batch as f64;
        let mut dlogits = trace.probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            let row = dlogits.row_mut(r);
            if row[y] < PROB_FLOOR {
                // the loss is clamped flat here
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v *= inv);
        }

        let mut grad = self.zeros_like();
        let last = trace.stages.last().map_or(x, |t| &t.output);
        gemm(1.0, &dlogits, true, last, false, 1.0, &mut grad.output.weight);
        for (b, s) in grad.output.bias.data_mut().iter_mut().zip(dlogits.column_sums()) {
            *b += s;
        }
        let mut dz = Matrix::zeros(batch, self.output.input_dim());
        gemm(1.0, &dlogits, false, &self.output.weight, false, 0.0, &mut dz);

        for s in (0..self.stages.len()).rev() {
            let input = if s == 0 { x } else { &trace.stages[s - 1].output };
            let want_dx = s > 0;
            let dx = self.stages[s].backward(input, &trace.stages[s], &dz, &mut grad.stages[s], want_dx);
            if let Some(dx) = dx {
                dz = dx;
            }
        }
        Ok(grad)
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.extend(s.named_params(&format!("layer{}", i + 1)));
        }
        out.push(("output.weight".to_string(), &self.output.weight));
        out.push(("output.bias".to_string(), &self.output.bias));
        out
    }

    /// Where each tensor of [`Network::params_mut`] sits, in order.
    pub(crate) fn param_places(&self) -> Vec<ParamPlace> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.extend(s.param_units().into_iter().map(|u| ParamPlace::Stage(i, u)));
        }
        out.extend([ParamPlace::Output; 2]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.extend(s.params_mut());
        }
        out.extend(self.output.params_mut());
        out
    }

    pub fn into_params(self) -> Vec<Matrix> {
        let mut out = Vec::new();
        for s in self.stages {
            out.extend(s.into_params());
        }
        out.extend(self.output.into_params());
        out
    }
}
