//! The three-branch residual network with external component and
//! parametric-matrix fusion.

mod branch;

pub use branch::{branch_backward, branch_forward, Branch, BranchCache, ResidualUnit, Stage, UnitVariant};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{SequenceConfig, TrainingInstance};
use crate::nn::{
    dense_backward, dense_forward, relu, relu_backward, scoped, scoped_mut, tanh_backward, tanh_forward, BnMode,
    DenseLayer, ParamSet, ParamVisitor, ParamVisitorMut, Real, Tensor4,
};

pub const BRANCH_NAMES: [&str; 3] = ["closeness", "period", "trend"];

/// Architecture; serialized beside every checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub rows: usize,
    pub cols: usize,
    /// Convolution filters `F`.
    pub filters: usize,
    /// Residual units per branch `L`.
    pub depth: usize,
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub variant: UnitVariant,
    /// Length of the external feature vector; 0 disables the component.
    #[serde(default)]
    pub external_dim: usize,
    #[serde(default = "default_external_hidden")]
    pub external_hidden: usize,
    #[serde(default = "yes")]
    pub use_external: bool,
    #[serde(default = "yes")]
    pub use_fusion: bool,
}

fn default_external_hidden() -> usize {
    10
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn new(rows: usize, cols: usize, filters: usize, depth: usize, sequence: SequenceConfig) -> Self {
        ModelConfig {
            rows,
            cols,
            filters,
            depth,
            sequence,
            variant: UnitVariant::Standard,
            external_dim: 0,
            external_hidden: default_external_hidden(),
            use_external: false,
            use_fusion: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sequence.validate()?;
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!("grid {}x{} is empty", self.rows, self.cols)));
        }
        if self.filters == 0 {
            return Err(Error::Config("filters must be at least 1".into()));
        }
        if self.has_external() && self.external_hidden == 0 {
            return Err(Error::Config("external_hidden must be at least 1".into()));
        }
        Ok(())
    }

    pub fn has_external(&self) -> bool {
        self.use_external && self.external_dim > 0
    }

    pub fn frame_len(&self) -> usize {
        2 * self.rows * self.cols
    }

    fn lengths(&self) -> [usize; 3] {
        let s = &self.sequence;
        [s.closeness_len, s.period_len, s.trend_len]
    }

    pub fn active_branches(&self) -> usize {
        self.lengths().iter().filter(|&&l| l > 0).count()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Two dense layers mapping `E_t` to a `2×I×J` correction.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalNet<T> {
    pub dense1: DenseLayer<T>,
    pub dense2: DenseLayer<T>,
}

impl<T: Real> ParamSet<T> for ExternalNet<T> {
    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        self.dense1.visit_params(&mut scoped("dense1", f));
        self.dense2.visit_params(&mut scoped("dense2", f));
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        self.dense1.visit_params_mut(&mut scoped_mut("dense1", f));
        self.dense2.visit_params_mut(&mut scoped_mut("dense2", f));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// Closeness, period, trend; `None` for a branch of length 0.
    pub branches: [Option<Branch<T>>; 3],
    /// `W_c, W_p, W_q`, each `2·I·J`. Fixed at ones when fusion is off.
    pub fusion: [Vec<T>; 3],
    pub external: Option<ExternalNet<T>>,
}

impl<T: Real> Model<T> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// Every learnable weight zero (fusion still at its initial value).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(config, None)
    }

    fn build<R: Rng + ?Sized>(config: ModelConfig, mut rng: Option<&mut R>) -> Result<Self> {
        config.validate()?;
        let lengths = config.lengths();
        let mut branch = |len: usize| {
            (len > 0).then(|| Branch::new(len, config.filters, config.depth, config.variant, rng.as_deref_mut()))
        };
        let branches = [branch(lengths[0]), branch(lengths[1]), branch(lengths[2])];
        let fill = if config.use_fusion {
            T::one() / T::from_f64_lossy(config.active_branches() as f64)
        } else {
            T::one()
        };
        let fusion = std::array::from_fn(|b| {
            let v = if lengths[b] > 0 { fill } else { T::zero() };
            vec![v; config.frame_len()]
        });
        let external = config.has_external().then(|| {
            let (d, h, o) = (config.external_dim, config.external_hidden, config.frame_len());
            match rng {
                Some(r) => ExternalNet {
                    dense1: DenseLayer::init(d, h, r),
                    dense2: DenseLayer::init(h, o, r),
                },
                None => ExternalNet {
                    dense1: DenseLayer::zeros(d, h),
                    dense2: DenseLayer::zeros(h, o),
                },
            }
        });
        Ok(Model {
            config,
            branches,
            fusion,
            external,
        })
    }

    /// A gradient accumulator with the same layout.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_params();
        g
    }

    /// Parameter-wise conversion to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::zeros(self.config).expect("config was validated");
        let mut src = Vec::new();
        self.visit_params(&mut |_, _, v| src.push(v.iter().map(|x| x.as_f64()).collect::<Vec<_>>()));
        self.visit_buffers(&mut |_, _, v| src.push(v.iter().map(|x| x.as_f64()).collect::<Vec<_>>()));
        let mut k = 0;
        let mut put = |_: &str, _: &[usize], v: &mut [U]| {
            v.iter_mut().zip(&src[k]).for_each(|(d, &s)| *d = U::from_f64_lossy(s));
            k += 1;
        };
        out.visit_params_mut(&mut put);
        out.visit_buffers_mut(&mut put);
        out.fusion = std::array::from_fn(|b| self.fusion[b].iter().map(|x| U::from_f64_lossy(x.as_f64())).collect());
        out
    }

    /// Copies batch-norm running statistics computed by a train-mode pass.
    pub fn absorb_running_stats(&mut self, cache: &ForwardCache<T>) {
        for (branch, bc) in self.branches.iter_mut().zip(&cache.branches) {
            let (Some(branch), Some(bc)) = (branch, bc) else {
                continue;
            };
            let mut updated = bc.updated_norms();
            for stage in branch.units.iter_mut().flat_map(|u| u.stages.iter_mut()) {
                if let Some(bn) = &mut stage.bn {
                    let src = updated.next().expect("cache mirrors the branch");
                    bn.running_mean.clone_from(&src.running_mean);
                    bn.running_var.clone_from(&src.running_var);
                }
            }
        }
    }
}

impl<T: Real> ParamSet<T> for Model<T> {
    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        for (name, b) in BRANCH_NAMES.iter().zip(&self.branches) {
            if let Some(b) = b {
                b.visit_params(&mut scoped(name, f));
            }
        }
        if self.config.use_fusion {
            let shape = [2, self.config.rows, self.config.cols];
            for (b, name) in BRANCH_NAMES.iter().enumerate() {
                if self.branches[b].is_some() {
                    f(&format!("fusion.{name}"), &shape, &self.fusion[b]);
                }
            }
        }
        if let Some(e) = &self.external {
            e.visit_params(&mut scoped("external", f));
        }
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        for (name, b) in BRANCH_NAMES.iter().zip(&mut self.branches) {
            if let Some(b) = b {
                b.visit_params_mut(&mut scoped_mut(name, f));
            }
        }
        if self.config.use_fusion {
            let shape = [2, self.config.rows, self.config.cols];
            for (b, name) in BRANCH_NAMES.iter().enumerate() {
                if self.branches[b].is_some() {
                    f(&format!("fusion.{name}"), &shape, &mut self.fusion[b]);
                }
            }
        }
        if let Some(e) = &mut self.external {
            e.visit_params_mut(&mut scoped_mut("external", f));
        }
    }

    fn visit_buffers(&self, f: &mut ParamVisitor<'_, T>) {
        for (name, b) in BRANCH_NAMES.iter().zip(&self.branches) {
            if let Some(b) = b {
                b.visit_buffers(&mut scoped(name, f));
            }
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        for (name, b) in BRANCH_NAMES.iter().zip(&mut self.branches) {
            if let Some(b) = b {
                b.visit_buffers_mut(&mut scoped_mut(name, f));
            }
        }
    }
}

/// Network inputs for `n` instances, already scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `(n, 2·len, I, J)` per branch; `None` for length 0.
    pub inputs: [Option<Tensor4<T>>; 3],
    /// `(n, external_dim, 1, 1)`.
    pub external: Option<Tensor4<T>>,
    /// `(n, 2, I, J)`.
    pub target: Tensor4<T>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.target.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks instances; each frame of a sequence contributes its two channels in order.
pub fn assemble_batch<T: Real>(instances: &[&TrainingInstance], config: &ModelConfig) -> Result<Batch<T>> {
    let n = instances.len();
    if n == 0 {
        return Err(Error::EmptyDataset("cannot assemble an empty batch".into()));
    }
    let (rows, cols) = (config.rows, config.cols);
    let frame = config.frame_len();
    let lengths = config.lengths();
    let check = |x: &crate::flows::FlowTensor| {
        if x.rows != rows || x.cols != cols || x.values.len() != frame {
            Err(Error::shape(format!(
                "frame at interval {} is {}x{}, model expects {rows}x{cols}",
                x.t, x.rows, x.cols
            )))
        } else {
            Ok(())
        }
    };
    let mut inputs: [Option<Tensor4<T>>; 3] = [None, None, None];
    for b in 0..3 {
        let len = lengths[b];
        if len == 0 {
            continue;
        }
        let mut data = Vec::with_capacity(n * len * frame);
        for inst in instances {
            let seq = match b {
                0 => &inst.closeness,
                1 => &inst.period,
                _ => &inst.trend,
            };
            if seq.len() != len {
                return Err(Error::shape(format!(
                    "{} sequence of instance {} has {} frames, model expects {len}",
                    BRANCH_NAMES[b],
                    inst.t,
                    seq.len()
                )));
            }
            for x in seq {
                check(x)?;
                data.extend(x.values.iter().map(|&v| T::from_f64_lossy(v as f64)));
            }
        }
        inputs[b] = Some(Tensor4::from_vec([n, 2 * len, rows, cols], data)?);
    }
    let external = if config.has_external() {
        let d = config.external_dim;
        let mut data = Vec::with_capacity(n * d);
        for inst in instances {
            if inst.external.len() != d {
                return Err(Error::shape(format!(
                    "instance {} has {} external features, model expects {d}",
                    inst.t,
                    inst.external.len()
                )));
            }
            data.extend(inst.external.values.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Some(Tensor4::from_vec([n, d, 1, 1], data)?)
    } else {
        None
    };
    let mut target = Vec::with_capacity(n * frame);
    for inst in instances {
        check(&inst.target)?;
        target.extend(inst.target.values.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Batch {
        inputs,
        external,
        target: Tensor4::from_vec([n, 2, rows, cols], target)?,
    })
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    branches: [Option<BranchCache<T>>; 3],
    branch_out: [Option<Tensor4<T>>; 3],
    external: Option<ExternalCache<T>>,
    output: Tensor4<T>,
}

#[derive(Debug, Clone)]
struct ExternalCache<T> {
    input: Tensor4<T>,
    hidden_pre: Tensor4<T>,
    hidden: Tensor4<T>,
}

/// `W_c∘Xc + W_p∘Xp + W_q∘Xq`, each weight broadcast over the batch.
pub fn fuse<T: Real>(outputs: &[Option<Tensor4<T>>; 3], weights: &[Vec<T>; 3]) -> Result<Tensor4<T>> {
    let shape = outputs
        .iter()
        .flatten()
        .next()
        .map(|x| x.shape())
        .ok_or_else(|| Error::shape("fusion needs at least one branch output"))?;
    let frame = shape[1] * shape[2] * shape[3];
    let mut out = Tensor4::zeros(shape);
    for (x, w) in outputs.iter().zip(weights) {
        let Some(x) = x else { continue };
        x.expect_shape(shape, "fusion input")?;
        if w.len() != frame {
            return Err(Error::shape(format!(
                "fusion matrix has {} entries, expected {frame}",
                w.len()
            )));
        }
        for s in 0..shape[0] {
            let o = out.sample_mut(s);
            for ((o, &xv), &wv) in o.iter_mut().zip(x.sample(s)).zip(w) {
                *o += wv * xv;
            }
        }
    }
    Ok(out)
}

pub fn external_forward<T: Real>(net: &ExternalNet<T>, e: &Tensor4<T>, rows: usize, cols: usize) -> Result<Tensor4<T>> {
    let (out, _) = external_forward_cached(net, e, rows, cols)?;
    Ok(out)
}

fn external_forward_cached<T: Real>(
    net: &ExternalNet<T>,
    e: &Tensor4<T>,
    rows: usize,
    cols: usize,
) -> Result<(Tensor4<T>, ExternalCache<T>)> {
    let hidden_pre = dense_forward(e, &net.dense1)?;
    let hidden = relu(&hidden_pre);
    let out = dense_forward(&hidden, &net.dense2)?.reshape([e.batch(), 2, rows, cols])?;
    Ok((
        out,
        ExternalCache {
            input: e.clone(),
            hidden_pre,
            hidden,
        },
    ))
}

/// `tanh(X_Res + X_Ext)`. In train mode batch norm uses batch statistics;
/// the updated running estimates are carried in the cache.
pub fn model_forward<T: Real>(
    model: &Model<T>,
    batch: &Batch<T>,
    mode: BnMode,
) -> Result<(Tensor4<T>, ForwardCache<T>)> {
    let cfg = &model.config;
    let n = batch.len();
    batch.target.expect_shape([n, 2, cfg.rows, cfg.cols], "batch target")?;
    let mut branches: [Option<BranchCache<T>>; 3] = [None, None, None];
    let mut branch_out: [Option<Tensor4<T>>; 3] = [None, None, None];
    for b in 0..3 {
        match (&model.branches[b], &batch.inputs[b]) {
            (Some(branch), Some(x)) => {
                x.expect_shape([n, branch.input_channels(), cfg.rows, cfg.cols], BRANCH_NAMES[b])?;
                let (y, c) = branch_forward(branch, x, mode)?;
                branches[b] = Some(c);
                branch_out[b] = Some(y);
            }
            (None, None) => {}
            _ => {
                return Err(Error::shape(format!(
                    "{} input does not match the model's sequence lengths",
                    BRANCH_NAMES[b]
                )))
            }
        }
    }
    let mut pre = fuse(&branch_out, &model.fusion)?;
    let external = match (&model.external, &batch.external) {
        (Some(net), Some(e)) => {
            let (x_ext, c) = external_forward_cached(net, e, cfg.rows, cfg.cols)?;
            pre.add_assign(&x_ext)?;
            Some(c)
        }
        (None, _) => None,
        (Some(_), None) => return Err(Error::shape("model expects external features; batch has none")),
    };
    let output = tanh_forward(&pre);
    Ok((
        output.clone(),
        ForwardCache {
            branches,
            branch_out,
            external,
            output,
        },
    ))
}

/// Eval-mode prediction in scaled units.
pub fn predict<T: Real>(model: &Model<T>, batch: &Batch<T>) -> Result<Tensor4<T>> {
    Ok(model_forward(model, batch, BnMode::Eval)?.0)
}

/// Element-mean squared error per instance, averaged over the batch.
pub fn mse_loss<T: Real>(prediction: &Tensor4<T>, target: &Tensor4<T>) -> Result<f64> {
    target.expect_shape(prediction.shape(), "loss target")?;
    let sum: f64 = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    Ok(sum / prediction.len().max(1) as f64)
}

/// Gradient of [`mse_loss`] with respect to the prediction.
pub fn mse_grad<T: Real>(prediction: &Tensor4<T>, target: &Tensor4<T>) -> Result<Tensor4<T>> {
    let scale = T::from_f64_lossy(2.0 / prediction.len().max(1) as f64);
    prediction.zip_map(target, |p, t| scale * (p - t))
}

/// Gradients of the loss for every learnable group, laid out like `model`.
pub fn model_backward<T: Real>(
    model: &Model<T>,
    cache: &ForwardCache<T>,
    grad_output: &Tensor4<T>,
) -> Result<Model<T>> {
    let mut grads = model.zeros_like();
    let d_pre = tanh_backward(grad_output, &cache.output)?;
    for b in 0..3 {
        let (Some(branch), Some(bc), Some(xb)) = (&model.branches[b], &cache.branches[b], &cache.branch_out[b]) else {
            continue;
        };
        if model.config.use_fusion {
            let gw = &mut grads.fusion[b];
            for s in 0..d_pre.batch() {
                for ((g, &d), &x) in gw.iter_mut().zip(d_pre.sample(s)).zip(xb.sample(s)) {
                    *g += d * x;
                }
            }
        }
        let w = &model.fusion[b];
        let mut d_branch = d_pre.clone();
        for s in 0..d_branch.batch() {
            d_branch.sample_mut(s).iter_mut().zip(w).for_each(|(d, &wv)| *d *= wv);
        }
        let gb = grads.branches[b].as_mut().expect("gradient layout mirrors the model");
        branch_backward(branch, bc, &d_branch, gb)?;
    }
    if let (Some(net), Some(ec)) = (&model.external, &cache.external) {
        let n = d_pre.batch();
        let d_out = d_pre.clone().reshape([n, model.config.frame_len(), 1, 1])?;
        let g2 = dense_backward(&d_out, &ec.hidden, &net.dense2)?;
        let d_hidden = relu_backward(&g2.input, &ec.hidden_pre)?;
        let g1 = dense_backward(&d_hidden, &ec.input, &net.dense1)?;
        let ge = grads.external.as_mut().expect("gradient layout mirrors the model");
        ge.dense1.weight = g1.weight;
        ge.dense1.bias = g1.bias;
        ge.dense2.weight = g2.weight;
        ge.dense2.bias = g2.bias;
    }
    Ok(grads)
}

/// Train-mode forward + backward; returns the loss and gradients.
pub fn loss_and_grad<T: Real>(model: &Model<T>, batch: &Batch<T>) -> Result<(f64, Model<T>, ForwardCache<T>)> {
    let (pred, cache) = model_forward(model, batch, BnMode::Train)?;
    let loss = mse_loss(&pred, &batch.target)?;
    let grad = mse_grad(&pred, &batch.target)?;
    let grads = model_backward(model, &cache, &grad)?;
    Ok((loss, grads, cache))
}
