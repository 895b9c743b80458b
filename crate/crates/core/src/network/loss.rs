use crate::error::{Error, Result};
use crate::mi::{self, Estimator, HistogramSpec};
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::forward::Graph;
use super::params::{ModelParams, ParamKind};

/// How the zero-sum residual constraint is applied to a 3-channel filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RfMode {
    /// One constraint per filter over all channels.
    #[default]
    ChannelSummed,
    /// One constraint per filter and input channel.
    PerChannel,
}

/// Which tensors enter the l2 term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum L2Scope {
    /// Convolution kernels and fully connected weights.
    #[default]
    Weights,
    /// Every trainable tensor, biases and batch-norm affine terms included.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// λ, weight of the residual-filter penalty.
    pub rf_weight: f64,
    /// γ, weight of the mutual-information regulariser.
    pub mi_weight: f64,
    /// ω, weight of the l2 term.
    pub l2_weight: f64,
    pub rf_mode: RfMode,
    pub l2_scope: L2Scope,
    pub mi_bins: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            rf_weight: 1.0,
            mi_weight: 1.0,
            l2_weight: 5e-4,
            rf_mode: RfMode::ChannelSummed,
            l2_scope: L2Scope::Weights,
            mi_bins: mi::DEFAULT_BINS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.rf_weight),
            ("gamma", self.mi_weight),
            ("omega", self.l2_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        HistogramSpec::new(self.mi_bins, Estimator::Soft).map(|_| ())
    }
}

/// Per-filter sums of a `[k, k, c, filters]` bank: one per filter, or one per
/// filter and channel.
fn filter_sums<T: Scalar>(kernel: &Tensor<T>, mode: RfMode) -> (Vec<f64>, usize, usize) {
    let s = kernel.shape();
    let (c, f) = (s[2], s[3]);
    let groups = match mode {
        RfMode::ChannelSummed => f,
        RfMode::PerChannel => f * c,
    };
    let mut sums = vec![0.0; groups];
    for (i, v) in kernel.data().iter().enumerate() {
        let (ch, filt) = ((i / f) % c, i % f);
        let g = match mode {
            RfMode::ChannelSummed => filt,
            RfMode::PerChannel => filt * c + ch,
        };
        sums[g] += v.f64();
    }
    (sums, c, f)
}

/// `sqrt(Σ_k s_k²)` where `s_k` is the sum of all taps of filter `k`, and its
/// gradient. The gradient is zero at the origin.
pub fn rf_penalty<T: Scalar>(kernel: &Tensor<T>, mode: RfMode) -> Result<(f64, Tensor<T>)> {
    if kernel.rank() != 4 {
        return Err(Error::Dimension(format!(
            "filter bank must be [k, k, c, filters], got {:?}",
            kernel.shape()
        )));
    }
    let (sums, c, f) = filter_sums(kernel, mode);
    let norm = sums.iter().map(|s| s * s).sum::<f64>().sqrt();
    let grad = (0..kernel.len())
        .map(|i| {
            if norm == 0.0 {
                return T::zero();
            }
            let (ch, filt) = ((i / f) % c, i % f);
            let g = match mode {
                RfMode::ChannelSummed => filt,
                RfMode::PerChannel => filt * c + ch,
            };
            T::of(sums[g] / norm)
        })
        .collect();
    Ok((norm, Tensor::new(kernel.shape().to_vec(), grad)?))
}

fn in_l2(kind: ParamKind, scope: L2Scope) -> bool {
    match scope {
        L2Scope::Weights => kind.is_weight(),
        L2Scope::All => kind.is_trainable(),
    }
}

/// Euclidean norm over the selected parameter tensors.
pub fn weight_norm<T: Scalar>(params: &ModelParams<T>, scope: L2Scope) -> f64 {
    params
        .params()
        .iter()
        .filter(|p| in_l2(p.kind, scope))
        .map(|p| p.tensor.sum_sq())
        .sum::<f64>()
        .sqrt()
}

/// Loss components recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cross_entropy: Var,
    pub rf_penalty: Var,
    pub mi: Var,
    pub weight_norm: Var,
    pub total: Var,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub cross_entropy: f64,
    pub rf_penalty: f64,
    pub mi: f64,
    pub weight_norm: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).item().f64();
        LossValues {
            cross_entropy: v(self.cross_entropy),
            rf_penalty: v(self.rf_penalty),
            mi: v(self.mi),
            weight_norm: v(self.weight_norm),
            total: v(self.total),
        }
    }
}

/// `L_CE + λ R_RF + γ R_MI + ω ||W||₂` on a recorded forward pass.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &Graph<T>,
    params: &ModelParams<T>,
    labels: &Tensor<T>,
    config: &LossConfig,
) -> Result<LossTerms> {
    config.validate()?;
    let cross_entropy = tape.softmax_cross_entropy(graph.logits, labels)?;

    let layout = params.layout();
    let rf_var = graph.param_vars[layout.rf].expect("filter bank is trainable");
    let (rf, rf_grad) = rf_penalty(tape.value(rf_var), config.rf_mode)?;
    let rf_penalty = tape.scalar_fn(&[rf_var], T::of(rf), vec![rf_grad])?;

    let spec = HistogramSpec::new(config.mi_bins, Estimator::Soft)?;
    let (mi, mi_grad) = mi::mi_regularizer(
        tape.value(graph.input),
        tape.value(graph.pre_features),
        spec,
    )?;
    let mi = tape.scalar_fn(
        &[graph.pre_features],
        T::of(mi),
        vec![mi_grad.expect("soft estimator yields a gradient")],
    )?;

    let mut vars = Vec::new();
    let mut sum_sq = 0.0;
    for (p, v) in params.params().iter().zip(&graph.param_vars) {
        if let (true, Some(v)) = (in_l2(p.kind, config.l2_scope), v) {
            sum_sq += tape.value(*v).sum_sq();
            vars.push(*v);
        }
    }
    let norm = sum_sq.sqrt();
    let partials = vars
        .iter()
        .map(|v| {
            let t = tape.value(*v);
            if norm == 0.0 {
                Tensor::zeros(t.shape().to_vec())
            } else {
                t.map(|x| T::of(x.f64() / norm))
            }
        })
        .collect();
    let weight_norm = tape.scalar_fn(&vars, T::of(norm), partials)?;

    let total = tape.combine(&[
        (cross_entropy, 1.0),
        (rf_penalty, config.rf_weight),
        (mi, config.mi_weight),
        (weight_norm, config.l2_weight),
    ])?;
    Ok(LossTerms {
        cross_entropy,
        rf_penalty,
        mi,
        weight_norm,
        total,
    })
}
