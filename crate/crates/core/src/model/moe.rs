use crate::balance::{mask_distribution, AssignmentTracker};
use crate::error::{Error, Result};
use crate::numeric::{nll, softmax_rows, Matrix, Rng, PROB_FLOOR};

use super::layers::{relu_backward, GatingParams, Linear};

/// Single-layer mixture that averages per-expert class distributions:
/// `p(c|x) = sum_i g_i(x) softmax(f_i(x))_c`.
///
/// Each expert is a rectified hidden layer followed by its own class map.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeClassifier {
    pub experts: Vec<Linear>,
    pub class_maps: Vec<Linear>,
    pub gate: Option<GatingParams>,
}

#[derive(Clone, Debug)]
pub struct MoeTrace {
    pub hidden: Vec<Matrix>,
    /// Per-expert class distributions.
    pub expert_probs: Vec<Matrix>,
    pub gate_hidden: Option<Matrix>,
    pub gate_raw: Option<Matrix>,
    pub gate_used: Matrix,
    pub probs: Matrix,
}

impl MoeClassifier {
    pub fn init(
        input: usize,
        hidden: usize,
        experts: usize,
        gate_hidden: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut ex = Vec::with_capacity(experts);
        let mut maps = Vec::with_capacity(experts);
        for _ in 0..experts {
            ex.push(Linear::init(input, hidden, rng));
            maps.push(Linear::init(hidden, classes, rng));
        }
        let gate = (experts > 1).then(|| GatingParams::init(input, gate_hidden, experts, rng));
        MoeClassifier {
            experts: ex,
            class_maps: maps,
            gate,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.experts[0].input_dim()
    }

    pub fn classes(&self) -> usize {
        self.class_maps[0].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(Linear::param_count).sum::<usize>()
            + self.class_maps.iter().map(Linear::param_count).sum::<usize>()
            + self.gate.as_ref().map_or(0, GatingParams::param_count)
    }

    pub fn gate_widths(&self) -> Vec<usize> {
        self.gate.iter().map(|g| g.experts()).collect()
    }

    pub fn forward(&self, x: &Matrix, tracker: Option<&AssignmentTracker>) -> Result<MoeTrace> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let batch = x.rows();
        let mut hidden = Vec::with_capacity(self.experts.len());
        let mut expert_probs = Vec::with_capacity(self.experts.len());
        for (e, map) in self.experts.iter().zip(&self.class_maps) {
            let h = e.forward_relu(x);
            let mut p = map.forward(&h);
            softmax_rows(&mut p);
            hidden.push(h);
            expert_probs.push(p);
        }
        let (gate_raw, gate_hidden, gate_used) = match &self.gate {
            Some(gate) => {
                let (raw, gh) = gate.forward(x);
                let mut used = raw.clone();
                if let Some(t) = tracker {
                    if t.layers() != 1 || t.experts(0) != gate.experts() {
                        return Err(Error::Shape("tracker layout does not match gate".into()));
                    }
                    let mask = t.over_margin(0);
                    for r in 0..batch {
                        mask_distribution(used.row_mut(r), &mask);
                    }
                }
                (Some(raw), Some(gh), used)
            }
            None => (None, None, Matrix::filled(batch, 1, 1.0)),
        };
        let mut probs = Matrix::zeros(batch, self.classes());
        for (i, p) in expert_probs.iter().enumerate() {
            for r in 0..batch {
                let w = gate_used.get(r, i);
                for (o, v) in probs.row_mut(r).iter_mut().zip(p.row(r)) {
                    *o += w * v;
                }
            }
        }
        Ok(MoeTrace {
            hidden,
            expert_probs,
            gate_hidden,
            gate_raw,
            gate_used,
            probs,
        })
    }

    /// Mean negative log mixture likelihood of the batch.
    pub fn batch_loss(trace: &MoeTrace, labels: &[usize]) -> f64 {
        labels
            .iter()
            .enumerate()
            .map(|(r, &y)| nll(trace.probs.get(r, y)))
            .sum::<f64>()
            / labels.len().max(1) as f64
    }

    pub fn loss(&self, x: &Matrix, labels: &[usize], tracker: Option<&AssignmentTracker>) -> Result<f64> {
        Ok(Self::batch_loss(&self.forward(x, tracker)?, labels))
    }

    pub fn zeros_like(&self) -> MoeClassifier {
        MoeClassifier {
            experts: self
                .experts
                .iter()
                .map(|e| Linear::zeros(e.input_dim(), e.output_dim()))
                .collect(),
            class_maps: self
                .class_maps
                .iter()
                .map(|e| Linear::zeros(e.input_dim(), e.output_dim()))
                .collect(),
            gate: self.gate.as_ref().map(|g| {
                GatingParams::zeros(g.hidden.input_dim(), g.hidden.output_dim(), g.experts())
            }),
        }
    }

    /// Gradient of [`MoeClassifier::batch_loss`].
    ///
    /// With posterior `r_i = g_i s_i[y] / p[y]`, the expert logits get
    /// `r_i (s_i - onehot(y))` and the gate logits `g_i - r_i`.
    pub fn backward(&self, x: &Matrix, trace: &MoeTrace, labels: &[usize]) -> Result<MoeClassifier> {
        let batch = x.rows();
        if labels.len() != batch || trace.probs.rows() != batch {
            return Err(Error::Shape(format!("trace/labels do not match a batch of {batch}")));
        }
        let classes = self.classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Config(format!("label {bad} out of range for {classes} classes")));
        }
        let inv = 1.0 / batch as f64;
        let n = self.experts.len();
        // posterior responsibilities, zero where the loss is clamped
        let mut post = Matrix::zeros(batch, n);
        for (r, &y) in labels.iter().enumerate() {
            let py = trace.probs.get(r, y);
            if py < PROB_FLOOR {
                continue;
            }
            for i in 0..n {
                post.set(r, i, trace.gate_used.get(r, i) * trace.expert_probs[i].get(r, y) / py);
            }
        }

        let mut grad = self.zeros_like();
        for i in 0..n {
            let mut dlogit = trace.expert_probs[i].clone();
            for (r, &y) in labels.iter().enumerate() {
                let w = post.get(r, i) * inv;
                let row = dlogit.row_mut(r);
                row[y] -= 1.0;
                row.iter_mut().for_each(|v| *v *= w);
            }
            let mut dh = self.class_maps[i]
                .backward(&trace.hidden[i], &dlogit, &mut grad.class_maps[i], true)
                .expect("requested dx");
            relu_backward(&mut dh, &trace.hidden[i]);
            self.experts[i].backward(x, &dh, &mut grad.experts[i], false);
        }
        if let (Some(gate), Some(ggrad)) = (&self.gate, grad.gate.as_mut()) {
            // express as dL/dg_used so the gate's masked-softmax backward applies:
            // dL/dg_i = -s_i[y] / p[y]
            let mut dg = Matrix::zeros(batch, n);
            for (r, &y) in labels.iter().enumerate() {
                let py = trace.probs.get(r, y);
                if py < PROB_FLOOR {
                    continue;
                }
                for i in 0..n {
                    dg.set(r, i, -trace.expert_probs[i].get(r, y) / py * inv);
                }
            }
            let gh = trace.gate_hidden.as_ref().expect("gated trace");
            gate.backward(x, gh, &trace.gate_used, &dg, ggrad, false);
        }
        Ok(grad)
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, (e, m)) in self.experts.iter().zip(&self.class_maps).enumerate() {
            out.push((format!("expert{i}.weight"), &e.weight));
            out.push((format!("expert{i}.bias"), &e.bias));
            out.push((format!("expert{i}.class_map.weight"), &m.weight));
            out.push((format!("expert{i}.class_map.bias"), &m.bias));
        }
        if let Some(g) = &self.gate {
            let names = ["gate.hidden.weight", "gate.hidden.bias", "gate.output.weight", "gate.output.bias"];
            for (name, m) in names.iter().zip(g.params()) {
                out.push((name.to_string(), m));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for (e, m) in self.experts.iter_mut().zip(self.class_maps.iter_mut()) {
            out.extend(e.params_mut());
            out.extend(m.params_mut());
        }
        if let Some(g) = &mut self.gate {
            out.extend(g.params_mut());
        }
        out
    }

    pub fn into_params(self) -> Vec<Matrix> {
        let mut out = Vec::new();
        for (e, m) in self.experts.into_iter().zip(self.class_maps) {
            out.extend(e.into_params());
            out.extend(m.into_params());
        }
        if let Some(g) = self.gate {
            out.extend(g.into_params());
        }
        out
    }
}
