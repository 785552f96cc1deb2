//! Runtime networks built from specs and their forward passes on a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{Activation, Init, LayerKind, LayerSpec, NetworkSpec, Norm, Role};
use crate::autograd::{Pointwise, Tape, Var};
use crate::error::{dim_err, Result, UnitError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnParams {
    fn ids(&self) -> [ParamId; 4] {
        [self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    /// Parameterless row (max-pool).
    Empty,
    /// conv, transposed conv or fully connected.
    Affine { weight: ParamId, bias: ParamId, bn: Option<BnParams> },
    Residual {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        proj: Option<(ParamId, ParamId)>,
        bn1: Option<BnParams>,
        bn2: Option<BnParams>,
    },
}

impl LayerParams {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            LayerParams::Empty => vec![],
            LayerParams::Affine { weight, bias, bn } => {
                let mut v = vec![*weight, *bias];
                if let Some(bn) = bn {
                    v.extend(bn.ids());
                }
                v
            }
            LayerParams::Residual { w1, b1, w2, b2, proj, bn1, bn2 } => {
                let mut v = vec![*w1, *b1, *w2, *b2];
                if let Some((a, b)) = proj {
                    v.extend([*a, *b]);
                }
                for bn in [bn1, bn2].into_iter().flatten() {
                    v.extend(bn.ids());
                }
                v
            }
        }
    }
}

/// Training/inference switch plus the randomness source for dropout.
pub struct Mode<'r> {
    pub training: bool,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Mode<'r> {
    pub fn eval() -> Self {
        Self { training: false, rng: None }
    }
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Self { training: true, rng: Some(rng) }
    }
    /// Training mode without dropout randomness (dropout rows are an error).
    pub fn train_deterministic() -> Self {
        Self { training: true, rng: None }
    }
}

/// Outputs of a discriminator pass.
pub struct DiscOutput {
    /// Trunk activations feeding the adversarial layer.
    pub features: Var,
    /// Probability map in (0, 1).
    pub prob: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub name: String,
    pub spec: NetworkSpec,
    pub layers: Vec<LayerParams>,
    pub head: Vec<LayerParams>,
}

fn alloc_bn<F: Real>(store: &mut ParamStore<F>, name: &str, c: usize) -> BnParams {
    BnParams {
        gamma: store.insert(format!("{name}.bn.gamma"), Tensor::full(&[c], F::one()), true),
        beta: store.insert(format!("{name}.bn.beta"), Tensor::zeros(&[c]), true),
        running_mean: store.insert(format!("{name}.bn.running_mean"), Tensor::zeros(&[c]), false),
        running_var: store.insert(format!("{name}.bn.running_var"), Tensor::full(&[c], F::one()), false),
    }
}

fn alloc_layer<F: Real>(
    store: &mut ParamStore<F>,
    name: &str,
    l: &LayerSpec,
    c_in: usize,
    size: usize,
    init: Init,
    rng: &mut ChaCha8Rng,
) -> LayerParams {
    let bn = |store: &mut ParamStore<F>, suffix: &str, c| {
        (l.norm == Norm::BatchNorm).then(|| alloc_bn(store, &format!("{name}{suffix}"), c))
    };
    let (k, n) = (l.kernel, l.neurons);
    match l.kind {
        LayerKind::MaxPool => LayerParams::Empty,
        LayerKind::Conv | LayerKind::TransposedConv | LayerKind::FullyConnected => {
            let shape = match l.kind {
                LayerKind::Conv => vec![n, c_in, k, k],
                LayerKind::TransposedConv => vec![c_in, n, k, k],
                _ => vec![n, c_in * size * size],
            };
            let fan = match l.kind {
                LayerKind::Conv => c_in * k * k,
                LayerKind::TransposedConv => c_in * k * k / (l.stride * l.stride).max(1),
                _ => c_in * size * size,
            };
            let weight = store.insert_normal(format!("{name}.weight"), &shape, init.std(fan), rng);
            let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[n]), true);
            LayerParams::Affine { weight, bias, bn: bn(store, "", n) }
        }
        LayerKind::ResidualBlock => {
            let w1 = store.insert_normal(format!("{name}.conv1.weight"), &[n, c_in, 3, 3], init.std(c_in * 9), rng);
            let b1 = store.insert(format!("{name}.conv1.bias"), Tensor::zeros(&[n]), true);
            let w2 = store.insert_normal(format!("{name}.conv2.weight"), &[n, n, 3, 3], init.std(n * 9), rng);
            let b2 = store.insert(format!("{name}.conv2.bias"), Tensor::zeros(&[n]), true);
            let proj = (c_in != n).then(|| {
                (
                    store.insert_normal(format!("{name}.proj.weight"), &[n, c_in, 1, 1], init.std(c_in), rng),
                    store.insert(format!("{name}.proj.bias"), Tensor::zeros(&[n]), true),
                )
            });
            LayerParams::Residual { w1, b1, w2, b2, proj, bn1: bn(store, ".bn1", n), bn2: bn(store, ".bn2", n) }
        }
    }
}

impl Network {
    /// Allocates parameters for `spec` in `store`.
    pub fn build<F: Real>(
        name: &str,
        spec: &NetworkSpec,
        init: Init,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        init.validate()?;
        let dims = spec.layer_dims()?;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| alloc_layer(store, &format!("{name}.{}", i + 1), l, dims[i].0, dims[i].1, init, rng))
            .collect();
        let mut head = Vec::new();
        if !spec.classifier_head.is_empty() {
            let (mut c, mut s) = spec.feature_dims()?;
            for (i, l) in spec.classifier_head.iter().enumerate() {
                head.push(alloc_layer(store, &format!("{name}.head{}", i + 1), l, c, s, init, rng));
                (c, s) = l.output_dims(c, s)?;
            }
        }
        Ok(Self { name: name.to_string(), spec: spec.clone(), layers, head })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().chain(&self.head).flat_map(|l| l.ids()).collect()
    }

    /// One parameter group per spec row (empty for max-pool rows).
    pub fn param_groups(&self) -> Vec<Vec<ParamId>> {
        self.layers.iter().map(|l| l.ids()).collect()
    }

    pub fn role(&self) -> Role {
        self.spec.role
    }

    fn check_input<F: Real>(&self, tape: &Tape<'_, F>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != self.spec.input_channels || s[2] != self.spec.input_size || s[3] != self.spec.input_size {
            return Err(dim_err!(
                "{} expects [N, {}, {}, {}], got {:?}",
                self.name,
                self.spec.input_channels,
                self.spec.input_size,
                self.spec.input_size,
                s
            ));
        }
        Ok(())
    }

    /// Full forward pass (encoder: mu map, generator: image, discriminator:
    /// probability map).
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut h = x;
        for (l, p) in self.spec.layers.iter().zip(&self.layers) {
            h = layer_forward(tape, l, p, h, mode, self.spec.leaky_slope)?;
        }
        Ok(h)
    }

    /// Discriminator pass returning trunk features alongside the output.
    pub fn discriminate<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var, mode: &mut Mode<'_>) -> Result<DiscOutput> {
        if self.spec.role != Role::Discriminator {
            return Err(UnitError::Spec(format!("{} is not a discriminator", self.name)));
        }
        self.check_input(tape, x)?;
        let n = self.layers.len();
        let mut h = x;
        for (l, p) in self.spec.layers[..n - 1].iter().zip(&self.layers) {
            h = layer_forward(tape, l, p, h, mode, self.spec.leaky_slope)?;
        }
        let features = h;
        let prob = layer_forward(tape, &self.spec.layers[n - 1], &self.layers[n - 1], h, mode, self.spec.leaky_slope)?;
        Ok(DiscOutput { features, prob })
    }

    /// Classifier head applied to trunk features; returns `[N, classes]`
    /// probabilities.
    pub fn classify<F: Real>(&self, tape: &mut Tape<'_, F>, features: Var, mode: &mut Mode<'_>) -> Result<Var> {
        if self.head.is_empty() {
            return Err(UnitError::Spec(format!("{} has no classifier head", self.name)));
        }
        let mut h = features;
        for (l, p) in self.spec.classifier_head.iter().zip(&self.head) {
            h = layer_forward(tape, l, p, h, mode, self.spec.leaky_slope)?;
        }
        Ok(h)
    }
}

fn apply_bn<F: Real>(tape: &mut Tape<'_, F>, x: Var, bn: &Option<BnParams>, mode: &Mode<'_>) -> Result<Var> {
    match bn {
        None => Ok(x),
        Some(bn) => {
            let (g, b) = (tape.param(bn.gamma), tape.param(bn.beta));
            tape.batch_norm(x, g, b, (bn.running_mean, bn.running_var), mode.training, F::of(BN_MOMENTUM), F::of(BN_EPS))
        }
    }
}

fn apply_act<F: Real>(tape: &mut Tape<'_, F>, x: Var, a: Activation, slope: f64) -> Result<Var> {
    Ok(match a {
        Activation::None => x,
        Activation::LeakyRelu => tape.act(x, Pointwise::LeakyRelu(slope)),
        Activation::Relu => tape.act(x, Pointwise::Relu),
        Activation::Tanh => tape.act(x, Pointwise::Tanh),
        Activation::Sigmoid => tape.act(x, Pointwise::Sigmoid),
        Activation::Softmax => tape.softmax(x)?,
    })
}

fn apply_dropout<F: Real>(tape: &mut Tape<'_, F>, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    if p == 0.0 || !mode.training {
        return Ok(x);
    }
    let rng = mode
        .rng
        .as_deref_mut()
        .ok_or_else(|| UnitError::Config("dropout in training mode needs a random source".into()))?;
    let keep = F::of(1.0 / (1.0 - p));
    let mask = (0..tape.value(x).len()).map(|_| if rng.random::<f64>() < p { F::zero() } else { keep }).collect();
    tape.dropout_with_mask(x, mask)
}

fn layer_forward<F: Real>(
    tape: &mut Tape<'_, F>,
    l: &LayerSpec,
    p: &LayerParams,
    x: Var,
    mode: &mut Mode<'_>,
    slope: f64,
) -> Result<Var> {
    let h = match (l.kind, p) {
        (LayerKind::MaxPool, _) => tape.max_pool(x, l.kernel, l.stride)?,
        (LayerKind::Conv, LayerParams::Affine { weight, bias, bn }) => {
            let (w, b) = (tape.param(*weight), tape.param(*bias));
            let y = tape.conv2d(x, w, Some(b), l.stride, l.resolved_padding())?;
            apply_bn(tape, y, bn, mode)?
        }
        (LayerKind::TransposedConv, LayerParams::Affine { weight, bias, bn }) => {
            let (w, b) = (tape.param(*weight), tape.param(*bias));
            let y = tape.conv_t2d(x, w, Some(b), l.stride, l.resolved_padding(), l.resolved_output_padding())?;
            apply_bn(tape, y, bn, mode)?
        }
        (LayerKind::FullyConnected, LayerParams::Affine { weight, bias, bn }) => {
            let (w, b) = (tape.param(*weight), tape.param(*bias));
            let y = tape.linear(x, w, Some(b))?;
            apply_bn(tape, y, bn, mode)?
        }
        (LayerKind::ResidualBlock, LayerParams::Residual { w1, b1, w2, b2, proj, bn1, bn2 }) => {
            let (w1, b1, w2, b2) = (tape.param(*w1), tape.param(*b1), tape.param(*w2), tape.param(*b2));
            let h = tape.conv2d(x, w1, Some(b1), 1, 1)?;
            let h = apply_bn(tape, h, bn1, mode)?;
            let h = tape.act(h, Pointwise::LeakyRelu(slope));
            let h = tape.conv2d(h, w2, Some(b2), 1, 1)?;
            let h = apply_bn(tape, h, bn2, mode)?;
            let skip = match proj {
                Some((pw, pb)) => {
                    let (pw, pb) = (tape.param(*pw), tape.param(*pb));
                    tape.conv2d(x, pw, Some(pb), 1, 0)?
                }
                None => x,
            };
            tape.add(skip, h)?
        }
        _ => return Err(UnitError::Spec(format!("parameters do not match layer kind {:?}", l.kind))),
    };
    let h = apply_act(tape, h, l.activation, slope)?;
    apply_dropout(tape, h, l.dropout, mode)
}

/// Builds one network in a fresh store with the default initialization.
pub fn build_network<F: Real>(spec: &NetworkSpec, init_seed: u64) -> Result<(Network, ParamStore<F>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let name = match spec.role {
        Role::Encoder => "encoder",
        Role::Generator => "generator",
        Role::Discriminator => "discriminator",
    };
    let net = Network::build(name, spec, Init::default(), &mut store, &mut rng)?;
    Ok((net, store))
}

/// Tied rows between two networks.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedGroup {
    pub first: String,
    pub second: String,
    /// Row index in the spec (classifier head rows are reported past the trunk).
    pub row: usize,
    pub ids: Vec<ParamId>,
}

/// Points the selected rows of `b` at the storage of `a` and frees the
/// storage `b` used before. Encoders and discriminators share rows counted
/// from the back-end, generators from the front-end; a discriminator that
/// shares any row also shares its classifier head.
pub fn tie_parameters<F: Real>(
    store: &mut ParamStore<F>,
    a: &Network,
    b: &mut Network,
    count: usize,
) -> Result<Vec<SharedGroup>> {
    if a.spec.role != b.spec.role {
        return Err(UnitError::Sharing(format!("cannot tie {:?} to {:?}", a.spec.role, b.spec.role)));
    }
    let depth = a.spec.layers.len();
    if count > depth || count > b.spec.layers.len() {
        return Err(UnitError::Sharing(format!(
            "{} shared rows requested but {} has {} rows and {} has {}",
            count,
            a.name,
            depth,
            b.name,
            b.spec.layers.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let from_back = a.spec.role != Role::Generator;
    let mut rows: Vec<(usize, usize)> = (0..count)
        .map(|i| if from_back { (depth - 1 - i, b.spec.layers.len() - 1 - i) } else { (i, i) })
        .collect();
    rows.sort();
    let mut groups = Vec::new();
    for (ra, rb) in rows {
        let (la, lb) = (&a.spec.layers[ra], &b.spec.layers[rb]);
        if !la.same_structure(lb) {
            return Err(UnitError::Sharing(format!("row {} of {} differs from row {} of {}", ra + 1, a.name, rb + 1, b.name)));
        }
        check_shapes(store, &a.layers[ra], &b.layers[rb], &a.name, ra)?;
        for id in b.layers[rb].ids() {
            store.remove(id);
        }
        b.layers[rb] = a.layers[ra].clone();
        b.spec.layers[rb].shared = true;
        groups.push(SharedGroup { first: a.name.clone(), second: b.name.clone(), row: ra, ids: a.layers[ra].ids() });
    }
    if a.spec.role == Role::Discriminator && !a.head.is_empty() {
        if a.spec.classifier_head.len() != b.spec.classifier_head.len()
            || a.spec.classifier_head.iter().zip(&b.spec.classifier_head).any(|(x, y)| !x.same_structure(y))
        {
            return Err(UnitError::Sharing("classifier heads differ".into()));
        }
        for i in 0..a.head.len() {
            check_shapes(store, &a.head[i], &b.head[i], &a.name, depth + i)?;
            for id in b.head[i].ids() {
                store.remove(id);
            }
            b.head[i] = a.head[i].clone();
            groups.push(SharedGroup { first: a.name.clone(), second: b.name.clone(), row: depth + i, ids: a.head[i].ids() });
        }
    }
    Ok(groups)
}

fn check_shapes<F: Real>(store: &ParamStore<F>, pa: &LayerParams, pb: &LayerParams, name: &str, row: usize) -> Result<()> {
    let (ia, ib) = (pa.ids(), pb.ids());
    if ia.len() != ib.len() || ia.iter().zip(&ib).any(|(x, y)| store.value(*x).shape() != store.value(*y).shape()) {
        return Err(UnitError::Sharing(format!("row {} of {}: parameter shapes differ between the pair", row + 1, name)));
    }
    Ok(())
}
