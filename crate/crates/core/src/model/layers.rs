use crate::balance::mask_distribution;
use crate::numeric::{gemm, relu_in_place, softmax_rows, Matrix, Rng};

/// Affine map `x -> W x + b` applied row-wise to a batch.
///
/// `weight` is `output x input`; `bias` is `1 x output`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// An expert is a linear map followed by rectification.
pub type ExpertParams = Linear;

impl Linear {
    /// Weights uniform in `[-1/sqrt(input), 1/sqrt(input))`, biases zero.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Linear {
        let bound = 1.0 / (input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Linear {
            weight: Matrix::from_vec(output, input, data).expect("sized buffer"),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Linear {
        Linear {
            weight: Matrix::zeros(output, input),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `x W^T + b` for a batch `x` (one example per row).
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        gemm(1.0, x, false, &self.weight, true, 0.0, &mut out);
        out.add_row_broadcast(self.bias.data());
        out
    }

    pub(crate) fn forward_relu(&self, x: &Matrix) -> Matrix {
        let mut out = self.forward(x);
        relu_in_place(&mut out);
        out
    }

    /// Accumulates parameter gradients for upstream gradient `dy` (w.r.t. the
    /// pre-activation output) into `grad`, and returns `dx` when asked.
    pub(crate) fn backward(
        &self,
        x: &Matrix,
        dy: &Matrix,
        grad: &mut Linear,
        want_dx: bool,
    ) -> Option<Matrix> {
        gemm(1.0, dy, true, x, false, 1.0, &mut grad.weight);
        for (b, s) in grad.bias.data_mut().iter_mut().zip(dy.column_sums()) {
            *b += s;
        }
        want_dx.then(|| {
            let mut dx = Matrix::zeros(x.rows(), self.input_dim());
            gemm(1.0, dy, false, &self.weight, false, 0.0, &mut dx);
            dx
        })
    }

    pub(crate) fn params(&self) -> [&Matrix; 2] {
        [&self.weight, &self.bias]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub(crate) fn into_params(self) -> [Matrix; 2] {
        [self.weight, self.bias]
    }
}

/// Two-layer gating network: `softmax(B relu(A x + a) + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingParams {
    /// `A`, `a`
    pub hidden: Linear,
    /// `B`, `b`
    pub output: Linear,
}

impl GatingParams {
    pub fn init(input: usize, gate_hidden: usize, experts: usize, rng: &mut Rng) -> Self {
        let hidden = Linear::init(input, gate_hidden, rng);
        let output = Linear::init(gate_hidden, experts, rng);
        GatingParams { hidden, output }
    }

    pub fn zeros(input: usize, gate_hidden: usize, experts: usize) -> Self {
        GatingParams {
            hidden: Linear::zeros(input, gate_hidden),
            output: Linear::zeros(gate_hidden, experts),
        }
    }

    pub fn experts(&self) -> usize {
        self.output.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.output.param_count()
    }

    /// Gate distributions (one row per example) and the hidden activations.
    pub fn forward(&self, x: &Matrix) -> (Matrix, Matrix) {
        let hidden = self.hidden.forward_relu(x);
        let mut g = self.output.forward(&hidden);
        softmax_rows(&mut g);
        (g, hidden)
    }

    /// Backward from `dg` (gradient w.r.t. the gate values actually used,
    /// `used`). Masked entries of `used` are zero and receive no gradient;
    /// the surviving entries behave like a softmax over the unmasked logits.
    pub(crate) fn backward(
        &self,
        x: &Matrix,
        hidden: &Matrix,
        used: &Matrix,
        dg: &Matrix,
        grad: &mut GatingParams,
        want_dx: bool,
    ) -> Option<Matrix> {
        let mut dlogits = Matrix::zeros(used.rows(), used.cols());
        for r in 0..used.rows() {
            let g = used.row(r);
            let d = dg.row(r);
            let dot: f64 = g.iter().zip(d).map(|(a, b)| a * b).sum();
            for ((o, gi), di) in dlogits.row_mut(r).iter_mut().zip(g).zip(d) {
                *o = gi * (di - dot);
            }
        }
        let mut dhidden = self
            .output
            .backward(hidden, &dlogits, &mut grad.output, true)
            .expect("requested dx");
        relu_backward(&mut dhidden, hidden);
        self.hidden.backward(x, &dhidden, &mut grad.hidden, want_dx)
    }

    pub(crate) fn params(&self) -> [&Matrix; 4] {
        let [a, a_bias] = self.hidden.params();
        let [b, b_bias] = self.output.params();
        [a, a_bias, b, b_bias]
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Matrix; 4] {
        let [a, a_bias] = self.hidden.params_mut();
        let [b, b_bias] = self.output.params_mut();
        [a, a_bias, b, b_bias]
    }

    pub(crate) fn into_params(self) -> [Matrix; 4] {
        let [a, a_bias] = self.hidden.into_params();
        let [b, b_bias] = self.output.into_params();
        [a, a_bias, b, b_bias]
    }
}

/// Zeroes `d` wherever the rectified activation `out` is not positive.
pub(crate) fn relu_backward(d: &mut Matrix, out: &Matrix) {
    for (g, &y) in d.data_mut().iter_mut().zip(out.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// How a stage combines its experts' outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    /// `sum_i g_i(x) f_i(x)`
    Mixture,
    /// `[f_1(x), ..., f_n(x)]`
    Concat,
}

/// A separately computed part of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unit {
    Expert(usize),
    Gate,
}

/// One hidden layer of experts. A gate exists only for a mixture of two or
/// more experts; a single expert is used directly.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub experts: Vec<ExpertParams>,
    pub gate: Option<GatingParams>,
    pub combine: Combine,
}

/// Activations of one stage for a batch.
#[derive(Clone, Debug)]
pub struct StageTrace {
    /// `f_i(x)` for each expert, `batch x hidden`.
    pub expert_out: Vec<Matrix>,
    pub gate_hidden: Option<Matrix>,
    /// Gate output before the balancing mask.
    pub gate_raw: Option<Matrix>,
    /// Gate values used in the mixture (masked and renormalized).
    pub gate_used: Option<Matrix>,
    pub output: Matrix,
}

impl Stage {
    pub fn mixture(input: usize, hidden: usize, experts: usize, gate_hidden: usize, rng: &mut Rng) -> Stage {
        let experts_v = (0..experts).map(|_| Linear::init(input, hidden, rng)).collect();
        let gate = (experts > 1).then(|| GatingParams::init(input, gate_hidden, experts, rng));
        Stage {
            experts: experts_v,
            gate,
            combine: Combine::Mixture,
        }
    }

    pub fn concat(input: usize, hidden: usize, experts: usize, rng: &mut Rng) -> Stage {
        Stage {
            experts: (0..experts).map(|_| Linear::init(input, hidden, rng)).collect(),
            gate: None,
            combine: Combine::Concat,
        }
    }

    pub fn zeros_like(&self) -> Stage {
        Stage {
            experts: self
                .experts
                .iter()
                .map(|e| Linear::zeros(e.input_dim(), e.output_dim()))
                .collect(),
            gate: self.gate.as_ref().map(|g| {
                GatingParams::zeros(g.hidden.input_dim(), g.hidden.output_dim(), g.experts())
            }),
            combine: self.combine,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.experts[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        let h = self.experts[0].output_dim();
        match self.combine {
            Combine::Mixture => h,
            Combine::Concat => h * self.experts.len(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(Linear::param_count).sum::<usize>()
            + self.gate.as_ref().map_or(0, GatingParams::param_count)
    }

    /// `masked` marks experts excluded by the balancing constraint.
    pub fn forward(&self, x: &Matrix, masked: Option<&[bool]>) -> StageTrace {
        self.forward_reusing(x, masked, None)
    }

    /// Like [`Stage::forward`], but with `reuse = Some((trace, unit))` only
    /// `unit` is recomputed and every other unit's output is copied from
    /// `trace`, a pass over the same `x`.
    pub(crate) fn forward_reusing(
        &self,
        x: &Matrix,
        masked: Option<&[bool]>,
        reuse: Option<(&StageTrace, Unit)>,
    ) -> StageTrace {
        let expert_out: Vec<Matrix> = self
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| match reuse {
                Some((t, u)) if u != Unit::Expert(i) => t.expert_out[i].clone(),
                _ => e.forward_relu(x),
            })
            .collect();
        let batch = x.rows();
        match (&self.gate, self.combine) {
            (Some(gate), Combine::Mixture) => {
                let (raw, hidden) = match reuse {
                    Some((t, u)) if u != Unit::Gate => (
                        t.gate_raw.clone().expect("gated trace"),
                        t.gate_hidden.clone().expect("gated trace"),
                    ),
                    _ => gate.forward(x),
                };
                let mut used = raw.clone();
                if let Some(mask) = masked {
                    for r in 0..batch {
                        mask_distribution(used.row_mut(r), mask);
                    }
                }
                let h = self.output_dim();
                let mut output = Matrix::zeros(batch, h);
                for (i, f) in expert_out.iter().enumerate() {
                    for r in 0..batch {
                        let w = used.get(r, i);
                        if w == 0.0 {
                            continue;
                        }
                        for (o, v) in output.row_mut(r).iter_mut().zip(f.row(r)) {
                            *o += w * v;
                        }
                    }
                }
                StageTrace {
                    expert_out,
                    gate_hidden: Some(hidden),
                    gate_raw: Some(raw),
                    gate_used: Some(used),
                    output,
                }
            }
            (None, Combine::Mixture) => StageTrace {
                output: expert_out[0].clone(),
                expert_out,
                gate_hidden: None,
                gate_raw: None,
                gate_used: None,
            },
            (_, Combine::Concat) => {
                let h = self.experts[0].output_dim();
                let mut output = Matrix::zeros(batch, h * self.experts.len());
                for (i, f) in expert_out.iter().enumerate() {
                    for r in 0..batch {
                        output.row_mut(r)[i * h..(i + 1) * h].copy_from_slice(f.row(r));
                    }
                }
                StageTrace {
                    expert_out,
                    gate_hidden: None,
                    gate_raw: None,
                    gate_used: None,
                    output,
                }
            }
        }
    }

    /// Accumulates gradients into `grad` given `dz` w.r.t. the stage output.
    pub fn backward(
        &self,
        x: &Matrix,
        trace: &StageTrace,
        dz: &Matrix,
        grad: &mut Stage,
        want_dx: bool,
    ) -> Option<Matrix> {
        let batch = x.rows();
        let mut dx = want_dx.then(|| Matrix::zeros(batch, self.input_dim()));
        let mut add_dx = |d: Option<Matrix>| {
            if let (Some(acc), Some(d)) = (dx.as_mut(), d) {
                acc.axpy(1.0, &d);
            }
        };
        match (&self.gate, self.combine) {
            (Some(gate), Combine::Mixture) => {
                let used = trace.gate_used.as_ref().expect("gated trace");
                let n = self.experts.len();
                let mut dg = Matrix::zeros(batch, n);
                for (i, (expert, f)) in self.experts.iter().zip(&trace.expert_out).enumerate() {
                    let mut dh = Matrix::zeros(batch, f.cols());
                    for r in 0..batch {
                        let dzr = dz.row(r);
                        let fr = f.row(r);
                        dg.set(r, i, dzr.iter().zip(fr).map(|(a, b)| a * b).sum());
                        let w = used.get(r, i);
                        for ((o, d), y) in dh.row_mut(r).iter_mut().zip(dzr).zip(fr) {
                            *o = if *y > 0.0 { w * d } else { 0.0 };
                        }
                    }
                    add_dx(expert.backward(x, &dh, &mut grad.experts[i], want_dx));
                }
                let hidden = trace.gate_hidden.as_ref().expect("gated trace");
                let ggrad = grad.gate.as_mut().expect("gradient gate");
                add_dx(gate.backward(x, hidden, used, &dg, ggrad, want_dx));
            }
            (None, Combine::Mixture) => {
                let mut dh = dz.clone();
                relu_backward(&mut dh, &trace.expert_out[0]);
                add_dx(self.experts[0].backward(x, &dh, &mut grad.experts[0], want_dx));
            }
            (_, Combine::Concat) => {
                let h = self.experts[0].output_dim();
                for (i, (expert, f)) in self.experts.iter().zip(&trace.expert_out).enumerate() {
                    let mut dh = Matrix::zeros(batch, h);
                    for r in 0..batch {
                        dh.row_mut(r).copy_from_slice(&dz.row(r)[i * h..(i + 1) * h]);
                    }
                    relu_backward(&mut dh, f);
                    add_dx(expert.backward(x, &dh, &mut grad.experts[i], want_dx));
                }
            }
        }
        dx
    }

    pub(crate) fn named_params(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, e) in self.experts.iter().enumerate() {
            let [w, b] = e.params();
            out.push((format!("{prefix}.expert{i}.weight"), w));
            out.push((format!("{prefix}.expert{i}.bias"), b));
        }
        if let Some(g) = &self.gate {
            let names = ["gate.hidden.weight", "gate.hidden.bias", "gate.output.weight", "gate.output.bias"];
            for (name, m) in names.iter().zip(g.params()) {
                out.push((format!("{prefix}.{name}"), m));
            }
        }
        out
    }

    /// The unit owning each tensor of [`Stage::params_mut`], in order.
    pub(crate) fn param_units(&self) -> Vec<Unit> {
        let mut out = Vec::new();
        for i in 0..self.experts.len() {
            out.extend([Unit::Expert(i); 2]);
        }
        if self.gate.is_some() {
            out.extend([Unit::Gate; 4]);
        }
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for e in &mut self.experts {
            out.extend(e.params_mut());
        }
        if let Some(g) = &mut self.gate {
            out.extend(g.params_mut());
        }
        out
    }

    pub(crate) fn into_params(self) -> Vec<Matrix> {
        let mut out = Vec::new();
        for e in self.experts {
            out.extend(e.into_params());
        }
        if let Some(g) = self.gate {
            out.extend(g.into_params());
        }
        out
    }
}
