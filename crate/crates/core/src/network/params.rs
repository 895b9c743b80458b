use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PATCH: usize = 72;
pub const RF_FILTERS: usize = 64;
pub const RF_SIZE: usize = 5;
pub const WIDTH: usize = 19;
pub const BLOCK_A: usize = 5;
pub const BLOCK_B: usize = 12;
pub const PRE_FEATURE: usize = 56;
pub const FC1: usize = 75;
pub const FEATURES: usize = 100;

/// Standard deviation of the residual filter bank at initialisation.
const RF_INIT_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    RfKernel,
    ConvKernel,
    ConvBias,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
    FcWeight,
    FcBias,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::RfKernel => "rf_kernel",
            ParamKind::ConvKernel => "conv_kernel",
            ParamKind::ConvBias => "conv_bias",
            ParamKind::BnScale => "bn_scale",
            ParamKind::BnShift => "bn_shift",
            ParamKind::BnMean => "bn_mean",
            ParamKind::BnVar => "bn_var",
            ParamKind::FcWeight => "fc_weight",
            ParamKind::FcBias => "fc_bias",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        use ParamKind::*;
        [
            RfKernel, ConvKernel, ConvBias, BnScale, BnShift, BnMean, BnVar, FcWeight, FcBias,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }

    /// Running statistics are updated outside the optimiser.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }

    /// Convolution and fully connected weight matrices.
    pub fn is_weight(self) -> bool {
        matches!(
            self,
            ParamKind::RfKernel | ParamKind::ConvKernel | ParamKind::FcWeight
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Indices of a convolution + batch-norm unit.
#[derive(Clone, Copy, Debug)]
pub struct ConvBn {
    pub kernel: usize,
    pub bias: usize,
    pub scale: usize,
    pub shift: usize,
    pub mean: usize,
    pub var: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Fc {
    pub weight: usize,
    pub bias: usize,
}

/// Where each layer's tensors live in the flat parameter list.
#[derive(Clone, Debug)]
pub struct Layout {
    pub rf: usize,
    pub block_a: Vec<ConvBn>,
    pub block_b: Vec<(ConvBn, ConvBn)>,
    pub bottleneck: Fc,
    pub fc: [Fc; 3],
}

/// Name, kind and shape of every tensor in canonical order.
pub fn parameter_specs(classes: usize) -> Vec<(String, ParamKind, Vec<usize>)> {
    use ParamKind::*;
    let mut specs = vec![(
        "rf.kernel".to_string(),
        RfKernel,
        vec![RF_SIZE, RF_SIZE, 3, RF_FILTERS],
    )];
    let conv_bn = |specs: &mut Vec<_>, prefix: String, cin: usize| {
        specs.push((
            format!("{prefix}.kernel"),
            ConvKernel,
            vec![3, 3, cin, WIDTH],
        ));
        specs.push((format!("{prefix}.bias"), ConvBias, vec![WIDTH]));
        specs.push((format!("{prefix}.bn.scale"), BnScale, vec![WIDTH]));
        specs.push((format!("{prefix}.bn.shift"), BnShift, vec![WIDTH]));
        specs.push((format!("{prefix}.bn.mean"), BnMean, vec![WIDTH]));
        specs.push((format!("{prefix}.bn.var"), BnVar, vec![WIDTH]));
    };
    for i in 0..BLOCK_A {
        let cin = if i == 0 { RF_FILTERS } else { WIDTH };
        conv_bn(&mut specs, format!("block_a.{i}"), cin);
    }
    for i in 0..BLOCK_B {
        conv_bn(&mut specs, format!("block_b.{i}.sub1"), WIDTH);
        conv_bn(&mut specs, format!("block_b.{i}.sub2"), WIDTH);
    }
    specs.push(("bottleneck.kernel".into(), ConvKernel, vec![3, 3, WIDTH, 1]));
    specs.push(("bottleneck.bias".into(), ConvBias, vec![1]));
    let fcs = [
        ("fc1", PRE_FEATURE * PRE_FEATURE, FC1),
        ("fc2", FC1, FEATURES),
        ("fc3", FEATURES, classes),
    ];
    for (name, d, n) in fcs {
        specs.push((format!("{name}.weight"), FcWeight, vec![d, n]));
        specs.push((format!("{name}.bias"), FcBias, vec![n]));
    }
    specs
}

fn layout() -> Layout {
    let mut next = 1;
    let mut conv_bn = || {
        let c = ConvBn {
            kernel: next,
            bias: next + 1,
            scale: next + 2,
            shift: next + 3,
            mean: next + 4,
            var: next + 5,
        };
        next += 6;
        c
    };
    let block_a = (0..BLOCK_A).map(|_| conv_bn()).collect();
    let block_b = (0..BLOCK_B).map(|_| (conv_bn(), conv_bn())).collect();
    let fc_at = |i: usize| Fc {
        weight: i,
        bias: i + 1,
    };
    Layout {
        rf: 0,
        block_a,
        block_b,
        bottleneck: fc_at(next),
        fc: [fc_at(next + 2), fc_at(next + 4), fc_at(next + 6)],
    }
}

/// Every tensor of the network, in a fixed order shared with checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    classes: usize,
    params: Vec<Param<T>>,
}

fn check_classes(classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 camera models, got {classes}"
        )));
    }
    Ok(())
}

impl<T: Scalar> ModelParams<T> {
    /// Randomly initialised network for `classes` camera models.
    pub fn build(classes: usize, seed: u64) -> Result<Self> {
        check_classes(classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = parameter_specs(classes)
            .into_iter()
            .map(|(name, kind, shape)| {
                let numel: usize = shape.iter().product();
                let tensor = match kind {
                    ParamKind::RfKernel | ParamKind::ConvKernel | ParamKind::FcWeight => {
                        let std = if kind == ParamKind::RfKernel {
                            RF_INIT_STD
                        } else {
                            let fan_in: usize = shape[..shape.len() - 1].iter().product();
                            (2.0 / fan_in as f64).sqrt()
                        };
                        let normal = Normal::new(0.0, std).expect("positive std");
                        let data = (0..numel).map(|_| T::of(normal.sample(&mut rng))).collect();
                        Tensor::new(shape, data)?
                    }
                    ParamKind::BnScale | ParamKind::BnVar => Tensor::full(shape, T::one()),
                    _ => Tensor::zeros(shape),
                };
                Ok(Param { name, kind, tensor })
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { classes, params })
    }

    /// All weights and biases zero, batch norm at identity.
    pub fn zeroed(classes: usize) -> Result<Self> {
        check_classes(classes)?;
        let params = parameter_specs(classes)
            .into_iter()
            .map(|(name, kind, shape)| {
                let tensor = match kind {
                    ParamKind::BnScale | ParamKind::BnVar => Tensor::full(shape, T::one()),
                    _ => Tensor::zeros(shape),
                };
                Param { name, kind, tensor }
            })
            .collect();
        Ok(ModelParams { classes, params })
    }

    /// Assembles parameters loaded from elsewhere, checking names and shapes.
    pub fn from_params(classes: usize, params: Vec<Param<T>>) -> Result<Self> {
        check_classes(classes)?;
        let specs = parameter_specs(classes);
        if specs.len() != params.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, kind, shape), p) in specs.iter().zip(&params) {
            if *name != p.name || *kind != p.kind || shape.as_slice() != p.tensor.shape() {
                return Err(Error::Input(format!(
                    "parameter {} ({}, {:?}) does not match expected {} ({}, {:?})",
                    p.name,
                    p.kind.as_str(),
                    p.tensor.shape(),
                    name,
                    kind.as_str(),
                    shape
                )));
            }
        }
        Ok(ModelParams { classes, params })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layout(&self) -> Layout {
        layout()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.params[idx].tensor
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.params[idx].tensor
    }

    /// Indices of the tensors the optimiser updates.
    pub fn trainable(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].kind.is_trainable())
            .collect()
    }

    /// Total number of scalars, running statistics included.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            classes: self.classes,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }
}
