//! Learnable layers over persistent parameter storage.
//!
//! A [`ParamSet`] owns parameter values and gradient buffers across training
//! steps; a [`Session`] is one forward/backward pass: it binds parameter
//! values onto a fresh [`Graph`], and after backward scatters the leaf
//! gradients back into the set (accumulating). Binding is cached per
//! parameter, so a parameter used twice in one pass receives the summed
//! gradient of both uses.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::graph::{BnMode, ConvSpec, Graph, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    /// Declaration shape, recorded in checkpoints.
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    /// Running statistics are stored here too but are not trainable.
    pub trainable: bool,
}

/// All parameters of one model, in declaration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        dims: Vec<usize>,
        value: Vec<f64>,
        trainable: bool,
    ) -> ParamId {
        let expected: usize = dims.iter().product();
        debug_assert_eq!(value.len(), expected);
        self.params.push(Parameter {
            name: name.into(),
            dims,
            value,
            grad: None,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.params[id.0].value
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (gi, &ni) in g.iter_mut().zip(grad) {
                    *gi += ni;
                }
            }
            None => p.grad = Some(grad.to_vec()),
        }
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalar parameters.
    pub fn trainable_len(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// One forward/backward pass over a fresh graph.
pub struct Session {
    pub graph: Graph,
    bound: HashMap<ParamId, Tensor>,
}

impl Session {
    pub fn new() -> Self {
        Session {
            graph: Graph::new(),
            bound: HashMap::new(),
        }
    }

    /// Records an input tensor.
    pub fn input(&mut self, shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        self.graph.leaf(shape, data)
    }

    /// Binds a parameter value as a leaf, reusing the leaf on repeat binds.
    pub fn bind(&mut self, params: &ParamSet, id: ParamId) -> Result<Tensor> {
        if let Some(&t) = self.bound.get(&id) {
            return Ok(t);
        }
        let p = params.get(id);
        let t = self
            .graph
            .leaf(flat_shape(p.value.len()), p.value.clone())?;
        self.bound.insert(id, t);
        Ok(t)
    }

    /// Backward from `loss`, then accumulates every bound trainable
    /// parameter's gradient into `params`.
    pub fn backward(&mut self, loss: Tensor, params: &mut ParamSet) -> Result<()> {
        self.graph.backward(loss)?;
        for (&id, &tensor) in &self.bound {
            if params.get(id).trainable {
                let grad = self.graph.grad(tensor)?.to_vec();
                params.accumulate_grad(id, &grad);
            }
        }
        Ok(())
    }
}

impl Default for Session {
    fn default() -> Self {
        Session::new()
    }
}

/// Parameters are bound as flat (1, 1, 1, 1, len) leaves; the consuming op
/// carries the semantic shape.
fn flat_shape(len: usize) -> Shape {
    Shape::new(1, 1, 1, 1, len)
}

fn kaiming_normal(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

/// 3D convolution layer (optionally dilated) with bias.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv3d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = spec.in_channels * spec.kernel.pow(3);
        let weight = params.add(
            format!("{name}.weight"),
            vec![
                spec.out_channels,
                spec.in_channels,
                spec.kernel,
                spec.kernel,
                spec.kernel,
            ],
            kaiming_normal(rng, spec.weight_len(), fan_in),
            true,
        );
        let bias = params.add(
            format!("{name}.bias"),
            vec![spec.out_channels],
            vec![0.0; spec.out_channels],
            true,
        );
        Conv3d { spec, weight, bias }
    }

    pub fn forward(&self, sess: &mut Session, params: &ParamSet, x: Tensor) -> Result<Tensor> {
        let w = sess.bind(params, self.weight)?;
        let b = sess.bind(params, self.bias)?;
        sess.graph.conv3d(x, w, b, &self.spec)
    }
}

/// Transposed convolution, kernel 2 stride 2: doubles each spatial extent.
#[derive(Debug, Clone)]
pub struct TransposedConv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TransposedConv3d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let len = in_channels * out_channels * 8;
        let weight = params.add(
            format!("{name}.weight"),
            vec![in_channels, out_channels, 2, 2, 2],
            kaiming_normal(rng, len, in_channels),
            true,
        );
        let bias = params.add(
            format!("{name}.bias"),
            vec![out_channels],
            vec![0.0; out_channels],
            true,
        );
        TransposedConv3d {
            in_channels,
            out_channels,
            weight,
            bias,
        }
    }

    pub fn forward(&self, sess: &mut Session, params: &ParamSet, x: Tensor) -> Result<Tensor> {
        let w = sess.bind(params, self.weight)?;
        let b = sess.bind(params, self.bias)?;
        sess.graph
            .transposed_conv3d(x, w, b, self.in_channels, self.out_channels)
    }
}

/// 3D batch normalization with running-statistics tracking for eval mode.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm3d {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = params.add(
            format!("{name}.gamma"),
            vec![channels],
            vec![1.0; channels],
            true,
        );
        let beta = params.add(
            format!("{name}.beta"),
            vec![channels],
            vec![0.0; channels],
            true,
        );
        let running_mean = params.add(
            format!("{name}.running_mean"),
            vec![channels],
            vec![0.0; channels],
            false,
        );
        let running_var = params.add(
            format!("{name}.running_var"),
            vec![channels],
            vec![1.0; channels],
            false,
        );
        BatchNorm3d {
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    /// Training-mode forward: batch statistics, with running statistics
    /// updated in place.
    pub fn forward_train(
        &self,
        sess: &mut Session,
        params: &mut ParamSet,
        x: Tensor,
    ) -> Result<Tensor> {
        let gamma = sess.bind(params, self.gamma)?;
        let beta = sess.bind(params, self.beta)?;
        let (out, stats) = sess
            .graph
            .batchnorm3d(x, gamma, beta, self.eps, BnMode::Train)?;
        let stats = stats.expect("training mode returns stats");
        // Running variance tracks the unbiased batch variance.
        let unbias = stats.count as f64 / (stats.count as f64 - 1.0);
        let m = self.momentum;
        let rm = params.value_mut(self.running_mean);
        for (r, &b) in rm.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let rv = params.value_mut(self.running_var);
        for (r, &b) in rv.iter_mut().zip(&stats.var_biased) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
        Ok(out)
    }

    /// Eval-mode forward: frozen running statistics, no mutation.
    pub fn forward_eval(&self, sess: &mut Session, params: &ParamSet, x: Tensor) -> Result<Tensor> {
        let gamma = sess.bind(params, self.gamma)?;
        let beta = sess.bind(params, self.beta)?;
        let mode = BnMode::Eval {
            mean: params.value(self.running_mean).to_vec(),
            var: params.value(self.running_var).to_vec(),
        };
        let (out, _) = sess.graph.batchnorm3d(x, gamma, beta, self.eps, mode)?;
        Ok(out)
    }
}

/// conv3d + batchnorm + ReLU, the repeated block of both networks.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv3d,
    pub bn: BatchNorm3d,
}

impl ConvBnRelu {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = Conv3d::new(params, &format!("{name}.conv"), spec, rng);
        let bn = BatchNorm3d::new(params, &format!("{name}.bn"), spec.out_channels);
        ConvBnRelu { conv, bn }
    }

    pub fn forward_train(
        &self,
        sess: &mut Session,
        params: &mut ParamSet,
        x: Tensor,
    ) -> Result<Tensor> {
        let x = self.conv.forward(sess, params, x)?;
        let x = self.bn.forward_train(sess, params, x)?;
        sess.graph.relu(x)
    }

    pub fn forward_eval(&self, sess: &mut Session, params: &ParamSet, x: Tensor) -> Result<Tensor> {
        let x = self.conv.forward(sess, params, x)?;
        let x = self.bn.forward_eval(sess, params, x)?;
        sess.graph.relu(x)
    }
}

/// Collects `(name, error)` if a checkpoint's parameters do not match the
/// freshly built model's declaration order and shapes.
pub fn check_compatible(built: &ParamSet, loaded: &ParamSet) -> Result<()> {
    if built.len() != loaded.len() {
        return Err(Error::format(format!(
            "checkpoint has {} parameters, model declares {}",
            loaded.len(),
            built.len()
        )));
    }
    for (b, l) in built.params().iter().zip(loaded.params()) {
        if b.name != l.name || b.dims != l.dims || b.trainable != l.trainable {
            return Err(Error::format(format!(
                "checkpoint parameter `{}` ({:?}) does not match model `{}` ({:?})",
                l.name, l.dims, b.name, b.dims
            )));
        }
    }
    Ok(())
}
