//! Online encoder, momentum target encoder and predictor.
//!
//! The encoder is a Linear-BN-ReLU backbone followed by an FC-BN-ReLU-FC
//! projector; the predictor has the same FC-BN-ReLU-FC shape. Parameters
//! live outside the tape and are bound to it once per training step.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BnState, Tape, Tensor, Var, L2_EPS};
use crate::error::{NccError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub projector_hidden: usize,
    pub projection_dim: usize,
    pub predictor_hidden: usize,
}

impl EncoderConfig {
    /// Desk-scale widths for a given ambient dimension.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            backbone_hidden: vec![64],
            projector_hidden: 64,
            projection_dim: 32,
            predictor_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self
            .backbone_hidden
            .iter()
            .chain([&self.input_dim, &self.projector_hidden, &self.predictor_hidden]);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(NccError::Config("all layer widths must be >= 1".into()));
        }
        if self.projection_dim < 2 {
            return Err(NccError::Config("projection_dim must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Tensor,
    /// `1 x out`
    pub bias: Tensor,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(fan_in, fan_out, data).expect("sized"),
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BnState,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Tensor::full(1, features, 1.0),
            beta: Tensor::zeros(1, features),
            state: BnState::new(features),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Backbone (Linear-BN-ReLU per hidden width) followed by the projector.
    pub fn encoder(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut width = cfg.input_dim;
        for &h in &cfg.backbone_hidden {
            layers.push(Layer::Linear(Linear::he_uniform(width, h, rng)));
            layers.push(Layer::BatchNorm(BatchNorm::new(h)));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.extend(fc_bn_relu_fc(width, cfg.projector_hidden, cfg.projection_dim, rng));
        Self { layers }
    }

    pub fn predictor(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        Self {
            layers: fc_bn_relu_fc(cfg.projection_dim, cfg.predictor_hidden, cfg.projection_dim, rng),
        }
    }

    pub fn params(&self) -> Vec<(&Tensor, ParamKind)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    out.push((&l.weight, ParamKind::Weight));
                    out.push((&l.bias, ParamKind::Bias));
                }
                Layer::BatchNorm(b) => {
                    out.push((&b.gamma, ParamKind::BnScale));
                    out.push((&b.beta, ParamKind::BnShift));
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Records every parameter on `tape`, as leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params()
            .into_iter()
            .map(|(t, _)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn forward<'t>(
        &mut self,
        x: Var<'t>,
        params: &[Var<'t>],
        training: bool,
    ) -> Result<Var<'t>> {
        let mut h = x;
        let mut p = params.iter();
        let mut next = || {
            p.next()
                .copied()
                .ok_or_else(|| NccError::Contract("parameter binding too short".into()))
        };
        for layer in &mut self.layers {
            h = match layer {
                Layer::Linear(_) => {
                    let (w, b) = (next()?, next()?);
                    h.matmul(w)?.add_row(b)?
                }
                Layer::BatchNorm(bn) => {
                    let (g, b) = (next()?, next()?);
                    h.batchnorm1d(g, b, &mut bn.state, training)?
                }
                Layer::Relu => h.relu(),
            };
        }
        Ok(h)
    }

    /// Named tensors for checkpoints, including BN running statistics.
    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    out.push((format!("{prefix}.{i}.weight"), l.weight.clone()));
                    out.push((format!("{prefix}.{i}.bias"), l.bias.clone()));
                }
                Layer::BatchNorm(b) => {
                    out.push((format!("{prefix}.{i}.gamma"), b.gamma.clone()));
                    out.push((format!("{prefix}.{i}.beta"), b.beta.clone()));
                    out.push((
                        format!("{prefix}.{i}.running_mean"),
                        Tensor::row_vector(b.state.running_mean.clone()),
                    ));
                    out.push((
                        format!("{prefix}.{i}.running_var"),
                        Tensor::row_vector(b.state.running_var.clone()),
                    ));
                }
                Layer::Relu => {}
            }
        }
        out
    }

    fn load_named(&mut self, prefix: &str, tensors: &BTreeMap<String, StoredTensor>) -> Result<()> {
        let fetch = |name: String, like: &Tensor| -> Result<Tensor> {
            let stored = tensors
                .get(&name)
                .ok_or_else(|| NccError::Contract(format!("checkpoint is missing {name}")))?;
            let t = stored.to_tensor()?;
            if t.shape() != like.shape() {
                return Err(NccError::Dimension(format!(
                    "{name}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t)
        };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    l.weight = fetch(format!("{prefix}.{i}.weight"), &l.weight)?;
                    l.bias = fetch(format!("{prefix}.{i}.bias"), &l.bias)?;
                }
                Layer::BatchNorm(b) => {
                    b.gamma = fetch(format!("{prefix}.{i}.gamma"), &b.gamma)?;
                    b.beta = fetch(format!("{prefix}.{i}.beta"), &b.beta)?;
                    let like = Tensor::zeros(1, b.state.running_mean.len());
                    b.state.running_mean =
                        fetch(format!("{prefix}.{i}.running_mean"), &like)?.into_data();
                    b.state.running_var =
                        fetch(format!("{prefix}.{i}.running_var"), &like)?.into_data();
                }
                Layer::Relu => {}
            }
        }
        Ok(())
    }
}

fn fc_bn_relu_fc(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Vec<Layer> {
    vec![
        Layer::Linear(Linear::he_uniform(input, hidden, rng)),
        Layer::BatchNorm(BatchNorm::new(hidden)),
        Layer::Relu,
        Layer::Linear(Linear::he_uniform(hidden, output, rng)),
    ]
}

/// Online encoder θ, target encoder θ′ and predictor φ.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkPair {
    pub config: EncoderConfig,
    pub online: Mlp,
    pub target: Mlp,
    pub predictor: Mlp,
    pub momentum: f64,
}

/// Parameters of a [`NetworkPair`] recorded on one tape.
pub struct BoundPair<'t> {
    pub online: Vec<Var<'t>>,
    pub target: Vec<Var<'t>>,
    pub predictor: Vec<Var<'t>>,
}

fn check_finite(x: &Tensor) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(NccError::Numeric("network input contains NaN or infinity".into()))
    }
}

impl NetworkPair {
    /// Random θ and φ; θ′ starts as an exact copy of θ.
    pub fn init(cfg: &EncoderConfig, momentum: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(NccError::Config(format!("momentum {momentum} not in [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = Mlp::encoder(cfg, &mut rng);
        let predictor = Mlp::predictor(cfg, &mut rng);
        Ok(Self {
            config: cfg.clone(),
            target: online.clone(),
            online,
            predictor,
            momentum,
        })
    }

    /// θ and φ as leaves, θ′ as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundPair<'t> {
        BoundPair {
            online: self.online.bind(tape, true),
            target: self.target.bind(tape, false),
            predictor: self.predictor.bind(tape, true),
        }
    }

    /// ℓ2-normalized f(x), before the predictor.
    pub fn forward_online<'t>(
        &mut self,
        x: Var<'t>,
        bound: &BoundPair<'t>,
        training: bool,
    ) -> Result<Var<'t>> {
        check_finite(&x.value())?;
        Ok(self.online.forward(x, &bound.online, training)?.l2_normalize(L2_EPS))
    }

    /// ℓ2-normalized f′(x), always detached.
    pub fn forward_target<'t>(
        &mut self,
        x: Var<'t>,
        bound: &BoundPair<'t>,
        training: bool,
    ) -> Result<Var<'t>> {
        check_finite(&x.value())?;
        let out = self
            .target
            .forward(x.detach(), &bound.target, training)?
            .l2_normalize(L2_EPS);
        Ok(if out.requires_grad() { out.detach() } else { out })
    }

    /// ℓ2-normalized g(v); `v` need not lie on the sphere.
    pub fn predict<'t>(
        &mut self,
        v: Var<'t>,
        bound: &BoundPair<'t>,
        training: bool,
    ) -> Result<Var<'t>> {
        check_finite(&v.value())?;
        Ok(self.predictor.forward(v, &bound.predictor, training)?.l2_normalize(L2_EPS))
    }

    /// Eval-mode features of either branch, one unit row per input row.
    pub fn embed(&self, x: &Tensor, branch: Branch) -> Result<Tensor> {
        check_finite(x)?;
        let net = match branch {
            Branch::Online => &self.online,
            Branch::Target => &self.target,
        };
        // eval mode never touches running statistics, so a scratch copy is fine
        let mut net = net.clone();
        let tape = Tape::new();
        let params = net.bind(&tape, false);
        let out = net
            .forward(tape.constant(x.clone()), &params, false)?
            .l2_normalize(L2_EPS);
        let v = out.value();
        Ok((*v).clone())
    }

    /// θ′ ← mθ′ + (1 − m)θ. The predictor and BN running statistics are untouched.
    pub fn momentum_update(&mut self) {
        let m = self.momentum;
        let online = self.online.params();
        for (t, (o, _)) in self.target.params_mut().into_iter().zip(online) {
            for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
                *tv = m * *tv + (1.0 - m) * ov;
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (prefix, net) in [
            ("online", &self.online),
            ("target", &self.target),
            ("predictor", &self.predictor),
        ] {
            for (name, t) in net.named_tensors(prefix) {
                tensors.insert(name, StoredTensor::from_tensor(&t));
            }
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            momentum: self.momentum,
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(NccError::Contract(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut pair = Self::init(&ckpt.config, ckpt.momentum, 0)?;
        pair.online.load_named("online", &ckpt.tensors)?;
        pair.target.load_named("target", &ckpt.tensors)?;
        pair.predictor.load_named("predictor", &ckpt.tensors)?;
        Ok(pair)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Online,
    Target,
}

pub const CHECKPOINT_FORMAT: &str = "ncc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl StoredTensor {
    fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape(),
            data: t.data().to_vec(),
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape[0], self.shape[1], self.data.clone())
    }
}

/// Versioned JSON map of tensor name to shape and values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    pub momentum: f64,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check_many, norm};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            input_dim: 5,
            backbone_hidden: vec![6],
            projector_hidden: 7,
            projection_dim: 3,
            predictor_hidden: 4,
        }
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn checksum(m: &Mlp) -> f64 {
        m.params().iter().flat_map(|(t, _)| t.data()).sum()
    }

    #[test]
    fn init_copies_target_and_is_seeded() {
        let a = NetworkPair::init(&tiny(), 0.996, 1).unwrap();
        assert_eq!(a.online, a.target);
        let b = NetworkPair::init(&tiny(), 0.996, 1).unwrap();
        assert_eq!(a, b);
        let c = NetworkPair::init(&tiny(), 0.996, 2).unwrap();
        assert_ne!(checksum(&a.online), checksum(&c.online));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny();
        cfg.projection_dim = 1;
        assert!(NetworkPair::init(&cfg, 0.9, 0).is_err());
        let mut cfg = tiny();
        cfg.backbone_hidden = vec![0];
        assert!(NetworkPair::init(&cfg, 0.9, 0).is_err());
        assert!(NetworkPair::init(&tiny(), 1.0, 0).is_err());
    }

    #[test]
    fn online_rows_unit_and_eval_deterministic() {
        let mut pair = NetworkPair::init(&tiny(), 0.996, 3).unwrap();
        let x = batch(8, 5, 4);
        let tape = Tape::new();
        let bound = pair.bind(&tape);
        let q = pair.forward_online(tape.constant(x.clone()), &bound, true).unwrap();
        for r in q.value().iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
        let e1 = pair.embed(&x, Branch::Online).unwrap();
        let e2 = pair.embed(&x, Branch::Online).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn training_forward_depends_on_batch() {
        let mut pair = NetworkPair::init(&tiny(), 0.996, 3).unwrap();
        let x = batch(8, 5, 4);
        let mut y = x.clone();
        y.row_mut(7).copy_from_slice(&[0.9, -0.9, 0.5, 0.1, 0.0]);
        let run = |pair: &mut NetworkPair, x: &Tensor| {
            let tape = Tape::new();
            let bound = pair.bind(&tape);
            let q = pair.forward_online(tape.constant(x.clone()), &bound, true).unwrap();
            let v = q.value();
            (*v).clone()
        };
        let a = run(&mut pair, &x);
        let b = run(&mut pair, &y);
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut pair = NetworkPair::init(&tiny(), 0.996, 3).unwrap();
        let mut x = batch(4, 5, 4);
        x.data_mut()[3] = f64::NAN;
        let tape = Tape::new();
        let bound = pair.bind(&tape);
        assert!(matches!(
            pair.forward_online(tape.constant(x), &bound, true),
            Err(NccError::Numeric(_))
        ));
    }

    #[test]
    fn target_is_detached_and_matches_online_at_init() {
        let mut pair = NetworkPair::init(&tiny(), 0.996, 5).unwrap();
        let x = batch(8, 5, 6);
        assert_eq!(
            pair.embed(&x, Branch::Online).unwrap(),
            pair.embed(&x, Branch::Target).unwrap()
        );
        let tape = Tape::new();
        let bound = pair.bind(&tape);
        let xin = tape.constant(x);
        let q = pair.forward_online(xin, &bound, true).unwrap();
        let k = pair.forward_target(xin, &bound, true).unwrap();
        assert!(!k.requires_grad());
        let loss = q.mse_rowwise(k).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(bound.target.iter().all(|v| grads.get(*v).is_none()));
        assert!(bound.online.iter().any(|v| grads.get(*v).is_some()));
        for r in k.value().iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn predict_grad_check() {
        let pair = NetworkPair::init(&tiny(), 0.996, 7).unwrap();
        let v = batch(8, 3, 8);
        let k = pair.embed(&batch(8, 5, 9), Branch::Target).unwrap();
        let params: Vec<Tensor> = pair.predictor.params().into_iter().map(|(t, _)| t.clone()).collect();
        let mut inputs = vec![v];
        inputs.extend(params);
        let err = grad_check_many(
            |tape, vars| {
                let mut net = pair.predictor.clone();
                let out = net.forward(vars[0], &vars[1..], true)?.l2_normalize(L2_EPS);
                out.mse_rowwise(tape.constant(k.clone()))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn predict_unit_rows_off_sphere_input() {
        let mut pair = NetworkPair::init(&tiny(), 0.996, 7).unwrap();
        let tape = Tape::new();
        let bound = pair.bind(&tape);
        let v = tape.constant(batch(6, 3, 10));
        let p = pair.predict(v, &bound, true).unwrap();
        for r in p.value().iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
        let a = pair.predict(v, &bound, false).unwrap().value();
        let b = pair.predict(v, &bound, false).unwrap().value();
        assert_eq!(a, b);
    }

    #[test]
    fn momentum_rule_cases() {
        let mut pair = NetworkPair::init(&tiny(), 0.996, 11).unwrap();
        for t in pair.target.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for t in pair.online.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let predictor = pair.predictor.clone();
        pair.momentum_update();
        for (t, _) in pair.target.params() {
            assert!(t.data().iter().all(|v| (v - 0.004).abs() < 1e-15));
        }
        assert_eq!(pair.predictor, predictor);

        let mut pair = NetworkPair::init(&tiny(), 0.0, 12).unwrap();
        for t in pair.online.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        pair.momentum_update();
        let o: Vec<_> = pair.online.params().into_iter().map(|(t, _)| t.clone()).collect();
        let t: Vec<_> = pair.target.params().into_iter().map(|(t, _)| t.clone()).collect();
        assert_eq!(o, t);
    }

    #[test]
    fn momentum_decay_is_geometric() {
        let mut pair = NetworkPair::init(&tiny(), 0.9, 13).unwrap();
        for t in pair.target.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v -= 0.25);
        }
        let dist = |p: &NetworkPair| -> f64 {
            p.online
                .params()
                .iter()
                .zip(p.target.params())
                .flat_map(|((a, _), (b, _))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(&pair);
        for t in 1..=25 {
            pair.momentum_update();
            let expect = 0.9f64.powi(t) * d0;
            assert!(((dist(&pair) - expect) / expect).abs() < 1e-10);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut pair = NetworkPair::init(&tiny(), 0.99, 14).unwrap();
        let tape = Tape::new();
        let bound = pair.bind(&tape);
        pair.forward_target(tape.constant(batch(4, 5, 1)), &bound, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        pair.to_checkpoint().save(&path).unwrap();
        let back = NetworkPair::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back, pair);
    }
}
