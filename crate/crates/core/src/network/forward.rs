use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Mode, Padding, Scalar, Tape, Tensor, Var};

use super::params::{ConvBn, ModelParams, FEATURES, PATCH, PRE_FEATURE};

pub const KEEP_PROB: f64 = 0.8;
pub const BN_MOMENTUM: f64 = 0.99;

/// Recorded forward pass.
pub struct Graph<T> {
    pub input: Var,
    /// Tape variable for each parameter; `None` for running statistics.
    pub param_vars: Vec<Option<Var>>,
    pub pre_features: Var,
    pub features: Var,
    pub logits: Var,
    /// Batch statistics of each batch-norm layer, keyed by the index of its
    /// running mean.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

/// Values of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs<T> {
    /// `[m, 56, 56]`
    pub pre_features: Tensor<T>,
    /// `[m, 100]`
    pub features: Tensor<T>,
    /// `[m, classes]`
    pub logits: Tensor<T>,
}

pub fn check_patches<T: Scalar>(patches: &Tensor<T>) -> Result<usize> {
    let s = patches.shape();
    if s.len() != 4 || s[1] != PATCH || s[2] != PATCH || s[3] != 3 {
        return Err(Error::Dimension(format!(
            "expected patches of shape [m, {PATCH}, {PATCH}, 3], got {s:?}"
        )));
    }
    Ok(s[0])
}

struct Builder<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    params: &'a ModelParams<T>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    bn_stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Scalar> Builder<'_, T> {
    fn var(&self, idx: usize) -> Var {
        self.vars[idx].expect("trainable parameter registered")
    }

    fn conv_bn(&mut self, x: Var, unit: &ConvBn, padding: Padding) -> Result<Var> {
        let y = self
            .tape
            .conv2d(x, self.var(unit.kernel), Some(self.var(unit.bias)), padding)?;
        let running = BatchStats {
            mean: self.params.tensor(unit.mean).data().to_vec(),
            var: self.params.tensor(unit.var).data().to_vec(),
        };
        let (scale, shift) = (self.var(unit.scale), self.var(unit.shift));
        let (out, stats) = self.tape.batch_norm(y, scale, shift, self.mode, &running)?;
        if self.mode == Mode::Train {
            self.bn_stats.push((unit.mean, stats));
        }
        Ok(out)
    }
}

/// Records the network on `tape`. Parameters become leaves that require
/// gradients when `differentiable` is set.
pub fn build_graph<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    patches: Tensor<T>,
    mode: Mode,
    differentiable: bool,
    rng: &mut R,
) -> Result<Graph<T>> {
    let m = check_patches(&patches)?;
    let input = tape.constant(patches);
    let vars = params
        .params()
        .iter()
        .map(|p| {
            p.kind
                .is_trainable()
                .then(|| tape.leaf(p.tensor.clone(), differentiable))
        })
        .collect();
    let layout = params.layout();
    let mut b = Builder {
        tape,
        params,
        vars,
        mode,
        bn_stats: Vec::new(),
    };

    let mut x = b
        .tape
        .conv2d(input, b.var(layout.rf), None, Padding::Valid)?;
    for unit in &layout.block_a {
        let y = b.conv_bn(x, unit, Padding::Valid)?;
        x = b.tape.relu(y);
    }
    for (first, second) in &layout.block_b {
        let y = b.conv_bn(x, first, Padding::Same)?;
        let skip = b.tape.relu(y);
        let z = b.conv_bn(skip, second, Padding::Same)?;
        let sum = b.tape.add(skip, z)?;
        x = b.tape.relu(sum);
    }
    let bottleneck = layout.bottleneck;
    let pre = b.tape.conv2d(
        x,
        b.var(bottleneck.weight),
        Some(b.var(bottleneck.bias)),
        Padding::Valid,
    )?;
    debug_assert_eq!(b.tape.value(pre).shape(), &[m, PRE_FEATURE, PRE_FEATURE, 1]);

    let flat = b.tape.reshape(pre, &[m, PRE_FEATURE * PRE_FEATURE])?;
    let [fc1, fc2, fc3] = layout.fc;
    let h = b.tape.dense(flat, b.var(fc1.weight), b.var(fc1.bias))?;
    let h = b.tape.dropout(h, KEEP_PROB, mode, rng)?;
    let h = b.tape.relu(h);
    let features = b.tape.dense(h, b.var(fc2.weight), b.var(fc2.bias))?;
    let logits = b.tape.dense(features, b.var(fc3.weight), b.var(fc3.bias))?;
    debug_assert_eq!(b.tape.value(features).shape(), &[m, FEATURES]);

    Ok(Graph {
        input,
        param_vars: b.vars,
        pre_features: pre,
        features,
        logits,
        bn_stats: b.bn_stats,
    })
}

/// Forward pass without gradients.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    patches: Tensor<T>,
    params: &ModelParams<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutputs<T>> {
    let mut tape = Tape::new();
    let g = build_graph(&mut tape, params, patches, mode, false, rng)?;
    let m = tape.value(g.input).shape()[0];
    Ok(ForwardOutputs {
        pre_features: tape.value(g.pre_features).clone().reshape(vec![
            m,
            PRE_FEATURE,
            PRE_FEATURE,
        ])?,
        features: tape.value(g.features).clone(),
        logits: tape.value(g.logits).clone(),
    })
}

/// Folds batch statistics into the running estimates.
pub fn update_running_stats<T: Scalar>(
    params: &mut ModelParams<T>,
    stats: &[(usize, BatchStats<T>)],
    momentum: f64,
) {
    let (keep, take) = (T::of(momentum), T::of(1.0 - momentum));
    for (mean_idx, s) in stats {
        for (r, &b) in params
            .tensor_mut(*mean_idx)
            .data_mut()
            .iter_mut()
            .zip(&s.mean)
        {
            *r = keep * *r + take * b;
        }
        for (r, &b) in params
            .tensor_mut(mean_idx + 1)
            .data_mut()
            .iter_mut()
            .zip(&s.var)
        {
            *r = keep * *r + take * b;
        }
    }
}
