//! Mixture models: the two-layer deep mixture of experts, its baselines and
//! the single-layer softmax mixture.

mod layers;
mod moe;
mod network;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use layers::{Combine, ExpertParams, GatingParams, Linear, Stage, StageTrace};
pub use moe::{MoeClassifier, MoeTrace};
pub use network::{ForwardTrace, Network};

use crate::balance::AssignmentTracker;
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng};

/// One mixture layer: `experts x hidden`, with a gate of `gate_hidden` units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub experts: usize,
    pub hidden: usize,
    pub gate_hidden: usize,
}

impl LayerSpec {
    pub fn new(experts: usize, hidden: usize, gate_hidden: usize) -> Self {
        LayerSpec {
            experts,
            hidden,
            gate_hidden,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub classes: usize,
    pub layer1: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer2: Option<LayerSpec>,
}

impl Architecture {
    pub fn two_layer(input_dim: usize, classes: usize, layer1: LayerSpec, layer2: LayerSpec) -> Self {
        Architecture {
            input_dim,
            classes,
            layer1,
            layer2: Some(layer2),
        }
    }

    pub fn one_layer(input_dim: usize, classes: usize, layer1: LayerSpec) -> Self {
        Architecture {
            input_dim,
            classes,
            layer1,
            layer2: None,
        }
    }

    /// Short label such as `4x100-4x20`.
    pub fn label(&self) -> String {
        let l1 = format!("{}x{}", self.layer1.experts, self.layer1.hidden);
        match self.layer2 {
            Some(l2) => format!("{l1}-{}x{}", l2.experts, l2.hidden),
            None => l1,
        }
    }

    pub fn gate_label(&self) -> String {
        match self.layer2 {
            Some(l2) => format!("{}-{}", self.layer1.gate_hidden, l2.gate_hidden),
            None => self.layer1.gate_hidden.to_string(),
        }
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        let mut bad = Vec::new();
        if self.input_dim == 0 {
            bad.push("input_dim must be >= 1".to_string());
        }
        if self.classes == 0 {
            bad.push("classes must be >= 1".to_string());
        }
        let mut check = |name: &str, l: &LayerSpec| {
            for (field, v) in [("experts", l.experts), ("hidden", l.hidden), ("gate_hidden", l.gate_hidden)] {
                if v == 0 {
                    bad.push(format!("{name}.{field} must be >= 1"));
                }
            }
        };
        check("layer1", &self.layer1);
        match (kind.needs_layer2(), &self.layer2) {
            (true, Some(l2)) => check("layer2", l2),
            (true, None) => bad.push(format!("model kind {kind} needs layer2")),
            _ => {}
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Two gated mixture layers and a final linear layer.
    Dmoe,
    /// Layer-1 mixture, then one fixed layer-2 expert.
    SingleExpertL2,
    /// Layer-1 mixture, then all layer-2 experts concatenated.
    ConcatL2,
    /// Layer-1 mixture mapped straight to the linear output.
    OneLayer,
    /// Two plain rectified layers sized to match the DMoE parameter count.
    MatchedDnn,
    /// Single-layer mixture of per-expert softmax outputs.
    Moe,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Dmoe,
        ModelKind::SingleExpertL2,
        ModelKind::ConcatL2,
        ModelKind::OneLayer,
        ModelKind::MatchedDnn,
        ModelKind::Moe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dmoe => "dmoe",
            ModelKind::SingleExpertL2 => "single-expert-l2",
            ModelKind::ConcatL2 => "concat-l2",
            ModelKind::OneLayer => "one-layer",
            ModelKind::MatchedDnn => "matched-dnn",
            ModelKind::Moe => "moe",
        }
    }

    pub fn needs_layer2(self) -> bool {
        matches!(
            self,
            ModelKind::Dmoe | ModelKind::SingleExpertL2 | ModelKind::ConcatL2 | ModelKind::MatchedDnn
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }
}

/// Any trainable model, tagged with how it was built.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub arch: Architecture,
    pub body: ModelBody,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelBody {
    Network(Network),
    Moe(MoeClassifier),
}

/// Loss, outputs and gradients for one batch.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub probs: Matrix,
    pub raw_gates: Vec<Matrix>,
    pub used_gates: Vec<Matrix>,
    /// Aligned with [`Model::named_params`].
    pub grads: Vec<Matrix>,
}

/// Class probabilities and gate outputs (no balancing mask).
#[derive(Clone, Debug)]
pub struct Inference {
    pub probs: Matrix,
    pub gates: Vec<Matrix>,
}

impl Model {
    /// Builds and initializes a model of `kind`. Weights are uniform in
    /// `+-1/sqrt(fan_in)`, biases zero; parameters are drawn in layer order.
    pub fn build(kind: ModelKind, arch: Architecture, rng: &mut Rng) -> Result<Model> {
        arch.validate(kind)?;
        let d = arch.input_dim;
        let c = arch.classes;
        let l1 = arch.layer1;
        let body = match kind {
            ModelKind::Moe => ModelBody::Moe(MoeClassifier::init(d, l1.hidden, l1.experts, l1.gate_hidden, c, rng)),
            ModelKind::OneLayer => {
                let s1 = Stage::mixture(d, l1.hidden, l1.experts, l1.gate_hidden, rng);
                let output = Linear::init(l1.hidden, c, rng);
                ModelBody::Network(Network { stages: vec![s1], output })
            }
            ModelKind::Dmoe | ModelKind::SingleExpertL2 | ModelKind::ConcatL2 => {
                let l2 = arch.layer2.expect("validated");
                let s1 = Stage::mixture(d, l1.hidden, l1.experts, l1.gate_hidden, rng);
                let s2 = match kind {
                    ModelKind::Dmoe => Stage::mixture(l1.hidden, l2.hidden, l2.experts, l2.gate_hidden, rng),
                    ModelKind::SingleExpertL2 => Stage::mixture(l1.hidden, l2.hidden, 1, l2.gate_hidden, rng),
                    _ => Stage::concat(l1.hidden, l2.hidden, l2.experts, rng),
                };
                let output = Linear::init(s2.output_dim(), c, rng);
                ModelBody::Network(Network {
                    stages: vec![s1, s2],
                    output,
                })
            }
            ModelKind::MatchedDnn => {
                let l2 = arch.layer2.expect("validated");
                let h1 = matched_dnn_hidden(&arch)?;
                let s1 = Stage::mixture(d, h1, 1, 1, rng);
                let s2 = Stage::mixture(h1, l2.hidden, 1, 1, rng);
                let output = Linear::init(l2.hidden, c, rng);
                ModelBody::Network(Network {
                    stages: vec![s1, s2],
                    output,
                })
            }
        };
        Ok(Model { kind, arch, body })
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn param_count(&self) -> usize {
        match &self.body {
            ModelBody::Network(n) => n.param_count(),
            ModelBody::Moe(m) => m.param_count(),
        }
    }

    /// Expert counts of the gated layers, in order.
    pub fn gate_widths(&self) -> Vec<usize> {
        match &self.body {
            ModelBody::Network(n) => n.gate_widths(),
            ModelBody::Moe(m) => m.gate_widths(),
        }
    }

    pub fn as_network(&self) -> Option<&Network> {
        match &self.body {
            ModelBody::Network(n) => Some(n),
            ModelBody::Moe(_) => None,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        match &self.body {
            ModelBody::Network(n) => n.named_params(),
            ModelBody::Moe(m) => m.named_params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match &mut self.body {
            ModelBody::Network(n) => n.params_mut(),
            ModelBody::Moe(m) => m.params_mut(),
        }
    }

    pub fn loss(&self, x: &Matrix, labels: &[usize], tracker: Option<&AssignmentTracker>) -> Result<f64> {
        match &self.body {
            ModelBody::Network(n) => n.loss(x, labels, tracker),
            ModelBody::Moe(m) => m.loss(x, labels, tracker),
        }
    }

    /// Forward and backward over one batch.
    pub fn step(&self, x: &Matrix, labels: &[usize], tracker: Option<&AssignmentTracker>) -> Result<StepOutput> {
        match &self.body {
            ModelBody::Network(n) => {
                let trace = n.forward(x, tracker)?;
                let grads = n.backward(x, &trace, labels)?.into_params();
                Ok(StepOutput {
                    loss: Network::batch_loss(&trace, labels),
                    raw_gates: trace.raw_gates().into_iter().cloned().collect(),
                    used_gates: trace.used_gates().into_iter().cloned().collect(),
                    probs: trace.probs,
                    grads,
                })
            }
            ModelBody::Moe(m) => {
                let trace = m.forward(x, tracker)?;
                let grads = m.backward(x, &trace, labels)?.into_params();
                Ok(StepOutput {
                    loss: MoeClassifier::batch_loss(&trace, labels),
                    raw_gates: trace.gate_raw.iter().cloned().collect(),
                    used_gates: if m.gate.is_some() {
                        vec![trace.gate_used.clone()]
                    } else {
                        Vec::new()
                    },
                    probs: trace.probs,
                    grads,
                })
            }
        }
    }

    /// Plain evaluation: no balancing mask.
    pub fn infer(&self, x: &Matrix) -> Result<Inference> {
        match &self.body {
            ModelBody::Network(n) => {
                let trace = n.forward(x, None)?;
                Ok(Inference {
                    gates: trace.raw_gates().into_iter().cloned().collect(),
                    probs: trace.probs,
                })
            }
            ModelBody::Moe(m) => {
                let trace = m.forward(x, None)?;
                Ok(Inference {
                    gates: trace.gate_raw.into_iter().collect(),
                    probs: trace.probs,
                })
            }
        }
    }

    /// `params -= lr * grads`
    pub fn apply_gradients(&mut self, grads: &[Matrix], lr: f64) -> Result<()> {
        let params = self.params_mut();
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.into_iter().zip(grads) {
            crate::numeric::sgd_step_in_place(p, g, lr)?;
        }
        Ok(())
    }
}

/// Initializes a deep mixture of experts.
pub fn init_dmoe(arch: Architecture, rng: &mut Rng) -> Result<Model> {
    Model::build(ModelKind::Dmoe, arch, rng)
}

/// Builds one of the comparison models: `single-expert-l2`, `concat-l2`,
/// `one-layer` or `matched-dnn`.
pub fn build_baseline(kind: ModelKind, arch: Architecture, rng: &mut Rng) -> Result<Model> {
    match kind {
        ModelKind::SingleExpertL2 | ModelKind::ConcatL2 | ModelKind::OneLayer | ModelKind::MatchedDnn => {
            Model::build(kind, arch, rng)
        }
        other => Err(Error::Config(format!("`{other}` is not a baseline kind"))),
    }
}

/// Exact number of weights and biases, gates included.
pub fn count_params(model: &Model) -> usize {
    model.param_count()
}

/// Parameter count of a `kind` model over `arch`, without allocating it.
pub fn count_params_for(kind: ModelKind, arch: &Architecture) -> Result<usize> {
    arch.validate(kind)?;
    let lin = |i: usize, o: usize| i * o + o;
    let gate = |i: usize, l: &LayerSpec| {
        if l.experts > 1 {
            lin(i, l.gate_hidden) + lin(l.gate_hidden, l.experts)
        } else {
            0
        }
    };
    let d = arch.input_dim;
    let c = arch.classes;
    let l1 = arch.layer1;
    let mix1 = l1.experts * lin(d, l1.hidden) + gate(d, &l1);
    Ok(match kind {
        ModelKind::Moe => l1.experts * (lin(d, l1.hidden) + lin(l1.hidden, c)) + gate(d, &l1),
        ModelKind::OneLayer => mix1 + lin(l1.hidden, c),
        ModelKind::Dmoe => {
            let l2 = arch.layer2.expect("validated");
            mix1 + l2.experts * lin(l1.hidden, l2.hidden) + gate(l1.hidden, &l2) + lin(l2.hidden, c)
        }
        ModelKind::SingleExpertL2 => {
            let l2 = arch.layer2.expect("validated");
            mix1 + lin(l1.hidden, l2.hidden) + lin(l2.hidden, c)
        }
        ModelKind::ConcatL2 => {
            let l2 = arch.layer2.expect("validated");
            mix1 + l2.experts * lin(l1.hidden, l2.hidden) + lin(l2.experts * l2.hidden, c)
        }
        ModelKind::MatchedDnn => {
            let l2 = arch.layer2.expect("validated");
            dnn_params(d, matched_dnn_hidden(arch)?, l2.hidden, c)
        }
    })
}

/// Parameters of `input -> h1 -> h2 -> classes` with biases everywhere.
pub fn dnn_params(input: usize, h1: usize, h2: usize, classes: usize) -> usize {
    input * h1 + h1 + h1 * h2 + h2 + h2 * classes + classes
}

/// Largest first hidden width whose plain two-layer network has at most
/// `dmoe_total` parameters.
pub fn solve_matched_hidden(dmoe_total: usize, input_dim: usize, h2: usize, classes: usize) -> Result<usize> {
    let fixed = h2 + h2 * classes + classes;
    let per_unit = input_dim + 1 + h2;
    if dmoe_total < fixed + per_unit {
        return Err(Error::Config(format!(
            "{dmoe_total} parameters cannot fit a {input_dim}->h1->{h2}->{classes} network with h1 >= 1"
        )));
    }
    Ok((dmoe_total - fixed) / per_unit)
}

fn matched_dnn_hidden(arch: &Architecture) -> Result<usize> {
    let l2 = arch.layer2.ok_or_else(|| Error::Config("matched-dnn needs layer2".into()))?;
    let total = count_params_for(ModelKind::Dmoe, arch)?;
    solve_matched_hidden(total, arch.input_dim, l2.hidden, arch.classes)
}

/// Largest relative error between the analytic gradient of the mean batch
/// loss and central finite differences, over every parameter entry.
///
/// Parameters are perturbed in place one entry at a time and the forward pass
/// is rerun from the perturbed unit on; `tracker` (if any) fixes the
/// balancing mask for all evaluations.
pub fn check_gradients(
    model: &Model,
    x: &Matrix,
    labels: &[usize],
    tracker: Option<&AssignmentTracker>,
) -> Result<f64> {
    use crate::numeric::{relative_error, FD_STEP};

    let analytic = model.step(x, labels, tracker)?.grads;
    let base = match &model.body {
        ModelBody::Network(n) => Some((n.forward(x, tracker)?, n.param_places())),
        ModelBody::Moe(_) => None,
    };
    let loss = |probe: &Model, p: usize| -> Result<f64> {
        match (&probe.body, &base) {
            (ModelBody::Network(n), Some((trace, places))) => {
                let t = n.forward_reusing(x, tracker, Some((trace, places[p])))?;
                Ok(Network::batch_loss(&t, labels))
            }
            _ => probe.loss(x, labels, tracker),
        }
    };
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (p, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = probe.params_mut()[p].data()[k];
            probe.params_mut()[p].data_mut()[k] = orig + FD_STEP;
            let up = loss(&probe, p)?;
            probe.params_mut()[p].data_mut()[k] = orig - FD_STEP;
            let down = loss(&probe, p)?;
            probe.params_mut()[p].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("loss with tensor {p} entry {k} perturbed")));
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
    }
    Ok(worst)
}
