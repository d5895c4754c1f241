//! One convolutional branch: Conv1 → ReLU → L residual units → Conv2.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_same, relu, relu_backward, BatchNormCache,
    BatchNormLayer, BnMode, ConvLayer, ParamSet, ParamVisitor, ParamVisitorMut, Real, Tensor4,
};
use crate::nn::{scoped, scoped_mut};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UnitVariant {
    /// `X + conv_b(relu(conv_a(relu(X))))`
    #[default]
    Standard,
    /// `X + conv(relu(X))`
    Single,
    /// Standard with batch norm before each ReLU.
    Bn,
}

/// One "(BN) → ReLU → conv" step of a residual function.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    pub bn: Option<BatchNormLayer<T>>,
    pub conv: ConvLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualUnit<T> {
    pub variant: UnitVariant,
    pub stages: Vec<Stage<T>>,
}

impl<T: Real> ResidualUnit<T> {
    pub fn new<R: Rng + ?Sized>(variant: UnitVariant, filters: usize, rng: Option<&mut R>) -> Self {
        let count = if variant == UnitVariant::Single { 1 } else { 2 };
        let mut rng = rng;
        let stages = (0..count)
            .map(|_| Stage {
                bn: (variant == UnitVariant::Bn).then(|| BatchNormLayer::new(filters)),
                conv: match rng.as_deref_mut() {
                    Some(r) => ConvLayer::init(filters, filters, r),
                    None => ConvLayer::zeros(filters, filters),
                },
            })
            .collect();
        ResidualUnit { variant, stages }
    }

    fn stage_names(&self) -> &'static [(&'static str, &'static str)] {
        match self.variant {
            UnitVariant::Single => &[("conv", "bn")],
            _ => &[("conv_a", "bn_a"), ("conv_b", "bn_b")],
        }
    }
}

impl<T: Real> ParamSet<T> for ResidualUnit<T> {
    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        for (stage, (conv, bn)) in self.stages.iter().zip(self.stage_names()) {
            if let Some(layer) = &stage.bn {
                layer.visit_params(&mut scoped(bn, f));
            }
            stage.conv.visit_params(&mut scoped(conv, f));
        }
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        let names = self.stage_names();
        for (stage, (conv, bn)) in self.stages.iter_mut().zip(names) {
            if let Some(layer) = &mut stage.bn {
                layer.visit_params_mut(&mut scoped_mut(bn, f));
            }
            stage.conv.visit_params_mut(&mut scoped_mut(conv, f));
        }
    }

    fn visit_buffers(&self, f: &mut ParamVisitor<'_, T>) {
        for (stage, (_, bn)) in self.stages.iter().zip(self.stage_names()) {
            if let Some(layer) = &stage.bn {
                layer.visit_buffers(&mut scoped(bn, f));
            }
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        let names = self.stage_names();
        for (stage, (_, bn)) in self.stages.iter_mut().zip(names) {
            if let Some(layer) = &mut stage.bn {
                layer.visit_buffers_mut(&mut scoped_mut(bn, f));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<T> {
    pub conv1: ConvLayer<T>,
    pub units: Vec<ResidualUnit<T>>,
    pub conv2: ConvLayer<T>,
}

impl<T: Real> Branch<T> {
    /// `frames` input frames of 2 channels each; `rng = None` gives all-zero weights.
    pub fn new<R: Rng + ?Sized>(
        frames: usize,
        filters: usize,
        depth: usize,
        variant: UnitVariant,
        mut rng: Option<&mut R>,
    ) -> Self {
        let conv = |i, o, rng: Option<&mut R>| match rng {
            Some(r) => ConvLayer::init(i, o, r),
            None => ConvLayer::zeros(i, o),
        };
        let conv1 = conv(2 * frames, filters, rng.as_deref_mut());
        let units = (0..depth)
            .map(|_| ResidualUnit::new(variant, filters, rng.as_deref_mut()))
            .collect();
        let conv2 = conv(filters, 2, rng);
        Branch { conv1, units, conv2 }
    }

    pub fn input_channels(&self) -> usize {
        self.conv1.in_ch
    }
}

impl<T: Real> ParamSet<T> for Branch<T> {
    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        self.conv1.visit_params(&mut scoped("conv1", f));
        for (k, unit) in self.units.iter().enumerate() {
            unit.visit_params(&mut scoped(&format!("res{k}"), f));
        }
        self.conv2.visit_params(&mut scoped("conv2", f));
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        self.conv1.visit_params_mut(&mut scoped_mut("conv1", f));
        for (k, unit) in self.units.iter_mut().enumerate() {
            unit.visit_params_mut(&mut scoped_mut(&format!("res{k}"), f));
        }
        self.conv2.visit_params_mut(&mut scoped_mut("conv2", f));
    }

    fn visit_buffers(&self, f: &mut ParamVisitor<'_, T>) {
        for (k, unit) in self.units.iter().enumerate() {
            unit.visit_buffers(&mut scoped(&format!("res{k}"), f));
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        for (k, unit) in self.units.iter_mut().enumerate() {
            unit.visit_buffers_mut(&mut scoped_mut(&format!("res{k}"), f));
        }
    }
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    input: Tensor4<T>,
    bn: Option<(BatchNormCache<T>, BatchNormLayer<T>)>,
    pre: Tensor4<T>,
    activated: Tensor4<T>,
}

#[derive(Debug, Clone)]
pub struct BranchCache<T> {
    input: Tensor4<T>,
    conv1_out: Tensor4<T>,
    units: Vec<Vec<StageCache<T>>>,
    last_hidden: Tensor4<T>,
}

impl<T: Real> BranchCache<T> {
    /// Batch-norm layers carrying the running statistics updated by a train-mode pass.
    pub(crate) fn updated_norms(&self) -> impl Iterator<Item = &BatchNormLayer<T>> {
        self.units
            .iter()
            .flatten()
            .filter_map(|s| s.bn.as_ref().map(|(_, l)| l))
    }
}

pub fn branch_forward<T: Real>(
    branch: &Branch<T>,
    input: &Tensor4<T>,
    mode: BnMode,
) -> Result<(Tensor4<T>, BranchCache<T>)> {
    let conv1_out = conv2d_same(input, &branch.conv1)?;
    let mut h = relu(&conv1_out);
    let mut units = Vec::with_capacity(branch.units.len());
    for unit in &branch.units {
        let mut stages = Vec::with_capacity(unit.stages.len());
        let mut x = h.clone();
        for stage in &unit.stages {
            let (pre, bn) = match &stage.bn {
                Some(layer) => {
                    let mut layer = layer.clone();
                    let (y, cache) = batchnorm_forward(&x, &mut layer, mode)?;
                    (y, Some((cache, layer)))
                }
                None => (x.clone(), None),
            };
            let activated = relu(&pre);
            let out = conv2d_same(&activated, &stage.conv)?;
            stages.push(StageCache {
                input: x,
                bn,
                pre,
                activated,
            });
            x = out;
        }
        h.add_assign(&x)?;
        units.push(stages);
    }
    let out = conv2d_same(&h, &branch.conv2)?;
    Ok((
        out,
        BranchCache {
            input: input.clone(),
            conv1_out,
            units,
            last_hidden: h,
        },
    ))
}

/// Accumulates parameter gradients into `grads` (same layout as the branch).
pub fn branch_backward<T: Real>(
    branch: &Branch<T>,
    cache: &BranchCache<T>,
    grad_out: &Tensor4<T>,
    grads: &mut Branch<T>,
) -> Result<()> {
    let g2 = conv2d_backward(grad_out, &cache.last_hidden, &branch.conv2)?;
    accumulate(&mut grads.conv2.weight, &g2.weight);
    accumulate(&mut grads.conv2.bias, &g2.bias);
    let mut dh = g2.input;
    for (k, unit) in branch.units.iter().enumerate().rev() {
        let mut d = dh.clone();
        for (s, stage) in unit.stages.iter().enumerate().rev() {
            let sc = &cache.units[k][s];
            let gc = conv2d_backward(&d, &sc.activated, &stage.conv)?;
            let gstage = &mut grads.units[k].stages[s];
            accumulate(&mut gstage.conv.weight, &gc.weight);
            accumulate(&mut gstage.conv.bias, &gc.bias);
            let dpre = relu_backward(&gc.input, &sc.pre)?;
            d = match (&stage.bn, &sc.bn) {
                (Some(layer), Some((bc, _))) => {
                    let (dx, dgamma, dbeta) = batchnorm_backward(&dpre, bc, layer)?;
                    let gbn = gstage.bn.as_mut().expect("gradient layout mirrors the branch");
                    accumulate(&mut gbn.gamma, &dgamma);
                    accumulate(&mut gbn.beta, &dbeta);
                    dx
                }
                _ => dpre,
            };
            debug_assert_eq!(d.shape(), sc.input.shape());
        }
        dh.add_assign(&d)?;
    }
    let dz1 = relu_backward(&dh, &cache.conv1_out)?;
    let g1 = conv2d_backward(&dz1, &cache.input, &branch.conv1)?;
    accumulate(&mut grads.conv1.weight, &g1.weight);
    accumulate(&mut grads.conv1.bias, &g1.bias);
    Ok(())
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
