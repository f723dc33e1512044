//! The EM training loop: spherical k-means pseudo-labels on target features
//! every `r` epochs, SGD on the NCC objective in between.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::clustering::{spherical_kmeans, KMeansConfig};
use crate::data::{augment, AugmentSpec, Dataset};
use crate::error::{NccError, Result};
use crate::losses::{byol_loss, infonce_pair_loss, ncc_loss, LossConfig};
use crate::metrics::{ami, ari, cluster_acc, imbalance_ratio, nmi, uniformity_std, MetricsReport};
use crate::model::{Branch, EncoderConfig, Mlp, NetworkPair, ParamKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ncc,
    Byol,
    SimclrInfonce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` means `0.05 × batch_size / 256`.
    pub base_lr: Option<f64>,
    /// `None` means 5% of `epochs`, rounded.
    pub warmup_epochs: Option<usize>,
    pub predictor_lr_mult: f64,
    /// Target-network EMA coefficient.
    pub momentum: f64,
    /// Heavy-ball SGD momentum.
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub r: usize,
    pub k: usize,
    pub loss: LossConfig,
    pub augment: AugmentSpec,
    pub encoder: EncoderConfig,
    pub kmeans: KMeansConfig,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    /// Sized for the K=4, d=32 benchmark.
    fn default() -> Self {
        Self::desk(32, 4, 0)
    }
}

impl TrainConfig {
    pub fn desk(input_dim: usize, k: usize, seed: u64) -> Self {
        Self {
            method: Method::Ncc,
            epochs: 200,
            batch_size: 256,
            base_lr: None,
            warmup_epochs: None,
            predictor_lr_mult: 10.0,
            momentum: 0.996,
            sgd_momentum: 0.0,
            weight_decay: 1e-4,
            r: 1,
            k,
            loss: LossConfig::default(),
            augment: AugmentSpec::default(),
            encoder: EncoderConfig::desk(input_dim),
            kmeans: KMeansConfig::default(),
            seed,
            eval_every: 10,
        }
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or(0.05 * self.batch_size as f64 / 256.0)
    }

    pub fn warmup_epochs(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| (self.epochs as f64 * 0.05).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(NccError::Config(msg));
        if self.r == 0 {
            return fail("r must be ≥ 1".into());
        }
        if self.k == 0 {
            return fail("k must be ≥ 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be ≥ 2, got {}", self.batch_size));
        }
        if self.epochs > 0 && self.warmup_epochs() >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs(),
                self.epochs
            ));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be ≥ 1".into());
        }
        let lr = self.base_lr();
        if !(lr.is_finite() && lr >= 0.0) {
            return fail(format!("learning rate must be ≥ 0, got {lr}"));
        }
        for (name, v) in [
            ("predictor_lr_mult", self.predictor_lr_mult),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be ≥ 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return fail(format!("sgd_momentum must lie in [0, 1), got {}", self.sgd_momentum));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.kmeans.n_init == 0 {
            return fail("kmeans.n_init must be ≥ 1".into());
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.encoder.validate()
    }
}

/// Encoder and predictor learning rates at `epoch + step_frac`: linear
/// warmup from 0, then half-cosine decay to 0 at the last epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: usize, step_frac: f64) -> (f64, f64) {
    let base = cfg.base_lr();
    let warm = cfg.warmup_epochs() as f64;
    let t = epoch as f64 + step_frac;
    let lr = if t < warm {
        base * t / warm
    } else {
        let span = (cfg.epochs as f64 - warm).max(f64::MIN_POSITIVE);
        let progress = ((t - warm) / span).min(1.0);
        0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
    };
    (lr, lr * cfg.predictor_lr_mult)
}

#[derive(Clone, Copy)]
enum Stream {
    Init = 1,
    Order,
    Augment,
    Sampling,
    KMeans,
    Eval,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream(seed: u64, kind: Stream, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ epoch as u64));
    rng.set_stream(kind as u64);
    rng
}

fn stream_seed(seed: u64, kind: Stream, epoch: usize) -> u64 {
    stream(seed, kind, epoch).gen()
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub loss_align: f64,
    pub loss_pcl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kmeans_obj: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ami: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub imbalance: Option<f64>,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub loss: f64,
    pub loss_align: f64,
    pub loss_pcl: f64,
    pub batches: usize,
}

/// Clustering of the full dataset with a fresh k-means on target features.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub kmeans_obj: f64,
    pub imbalance: f64,
    /// Present when the dataset carries true labels.
    pub report: Option<MetricsReport>,
}

pub struct TrainState {
    pub pair: NetworkPair,
    pub pseudo: Option<Vec<usize>>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// E-step k-means objectives as `(epoch, objective, within-run trace)`.
    pub estep_log: Vec<(usize, f64, Vec<f64>)>,
    velocity: Option<[Vec<Tensor>; 2]>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if cfg.encoder.input_dim != ds.dim() {
            return Err(NccError::Config(format!(
                "encoder input_dim {} does not match data dimension {}",
                cfg.encoder.input_dim,
                ds.dim()
            )));
        }
        if ds.len() < cfg.k {
            return Err(NccError::Infeasible(format!("{} samples for {} clusters", ds.len(), cfg.k)));
        }
        let pair = NetworkPair::init(&cfg.encoder, cfg.momentum, stream_seed(cfg.seed, Stream::Init, 0))?;
        Ok(Self {
            pair,
            pseudo: None,
            epoch: 0,
            history: Vec::new(),
            estep_log: Vec::new(),
            velocity: None,
        })
    }
}

/// Eval-mode features of one branch, one unit row per sample in id order.
pub fn extract_features(pair: &NetworkPair, ds: &Dataset, branch: Branch) -> Result<Tensor> {
    pair.embed(&ds.features, branch)
}

/// Pseudo-labels from spherical k-means on the target features.
pub fn e_step(state: &mut TrainState, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<usize>> {
    let z = extract_features(&state.pair, ds, Branch::Target)?;
    let seed = stream_seed(cfg.seed, Stream::KMeans, state.epoch);
    let km = spherical_kmeans(&z, cfg.k, seed, &cfg.kmeans)?;
    state.estep_log.push((state.epoch, km.objective, km.trace));
    state.pseudo = Some(km.assignments.clone());
    Ok(km.assignments)
}

fn sgd(
    net: &mut Mlp,
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    cfg: &TrainConfig,
) {
    let kinds: Vec<ParamKind> = net.params().into_iter().map(|(_, k)| k).collect();
    for (((p, g), v), kind) in net.params_mut().into_iter().zip(grads).zip(velocity).zip(kinds) {
        let decay = match kind {
            ParamKind::Weight | ParamKind::Bias => cfg.weight_decay,
            ParamKind::BnScale | ParamKind::BnShift => 0.0,
        };
        let mu = cfg.sgd_momentum;
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let step = gv + decay * *pv;
            if mu > 0.0 {
                *vv = mu * *vv + step;
                *pv -= lr * *vv;
            } else {
                *pv -= lr * step;
            }
        }
    }
}

/// One pass over a fixed per-epoch shuffle. Batches of a single row are
/// dropped.
pub fn m_step_epoch(state: &mut TrainState, ds: &Dataset, cfg: &TrainConfig) -> Result<EpochSummary> {
    let epoch = state.epoch;
    let pseudo = match (&state.pseudo, cfg.method) {
        (Some(p), _) => p.clone(),
        (None, Method::Ncc) => {
            return Err(NccError::Contract("m-step needs pseudo-labels".into()));
        }
        (None, _) => Vec::new(),
    };
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut stream(cfg.seed, Stream::Order, epoch));
    let mut aug_rng = stream(cfg.seed, Stream::Augment, epoch);
    let mut sample_rng = stream(cfg.seed, Stream::Sampling, epoch);
    let warmup = epoch < cfg.warmup_epochs();

    let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).filter(|b| b.len() >= 2).collect();
    let n_batches = batches.len();
    let velocity = state.velocity.get_or_insert_with(|| {
        let zeros = |net: &Mlp| -> Vec<Tensor> {
            net.params().iter().map(|(t, _)| Tensor::zeros(t.rows(), t.cols())).collect()
        };
        [zeros(&state.pair.online), zeros(&state.pair.predictor)]
    });

    let mut sums = (0.0, 0.0, 0.0);
    for (b, idx) in batches.into_iter().enumerate() {
        let x = ds.features.select_rows(idx);
        let view1 = augment(&x, &cfg.augment, &mut aug_rng);
        let view2 = augment(&x, &cfg.augment, &mut aug_rng);

        let tape = Tape::new();
        let bound = state.pair.bind(&tape);
        let (total, align, pcl) = match cfg.method {
            Method::Ncc => {
                let labels: Vec<usize> = idx.iter().map(|&i| pseudo[i]).collect();
                let out = ncc_loss(
                    &tape,
                    &mut state.pair,
                    &bound,
                    &view1,
                    &view2,
                    &labels,
                    cfg.k,
                    &cfg.loss,
                    warmup,
                    &mut sample_rng,
                )?;
                (out.total, out.align, out.pcl)
            }
            Method::Byol => {
                let l = byol_loss(&tape, &mut state.pair, &bound, &view1, &view2)?;
                (l, l.item(), 0.0)
            }
            Method::SimclrInfonce => {
                let l = infonce_pair_loss(&tape, &mut state.pair, &bound, &view1, &view2, cfg.loss.tau)?;
                (l, l.item(), 0.0)
            }
        };
        let loss = total.item();
        if !loss.is_finite() {
            return Err(NccError::NonFiniteLoss {
                epoch,
                batch: b,
                loss_align: align,
                loss_pcl: pcl,
            });
        }
        let grads = tape.backward(total)?;
        let g_online: Vec<Tensor> = bound.online.iter().map(|&v| grads.wrt(v)).collect();
        let g_pred: Vec<Tensor> = bound.predictor.iter().map(|&v| grads.wrt(v)).collect();
        drop(grads);
        drop(bound);
        drop(tape);

        let (lr, lr_pred) = lr_at(cfg, epoch, b as f64 / n_batches as f64);
        let [v_online, v_pred] = velocity;
        sgd(&mut state.pair.online, &g_online, v_online, lr, cfg);
        sgd(&mut state.pair.predictor, &g_pred, v_pred, lr_pred, cfg);
        state.pair.momentum_update();

        sums.0 += loss;
        sums.1 += align;
        sums.2 += pcl;
    }
    let denom = n_batches.max(1) as f64;
    Ok(EpochSummary {
        loss: sums.0 / denom,
        loss_align: sums.1 / denom,
        loss_pcl: sums.2 / denom,
        batches: n_batches,
    })
}

/// Fresh k-means on target features with the run's fixed evaluation seed,
/// scored against the true labels when present.
pub fn evaluate(pair: &NetworkPair, ds: &Dataset, cfg: &TrainConfig) -> Result<Evaluation> {
    let features = extract_features(pair, ds, Branch::Target)?;
    let online = extract_features(pair, ds, Branch::Online)?;
    let km = spherical_kmeans(&features, cfg.k, stream_seed(cfg.seed, Stream::Eval, 0), &cfg.kmeans)?;
    let imbalance = imbalance_ratio(&km.assignments)?;
    let report = match &ds.labels {
        Some(truth) => Some(MetricsReport {
            nmi: nmi(truth, &km.assignments)?,
            ami: ami(truth, &km.assignments)?,
            ari: ari(truth, &km.assignments)?,
            acc: cluster_acc(truth, &km.assignments)?,
            imbalance_ratio: imbalance,
            uniformity_std: uniformity_std(&online),
        }),
        None => None,
    };
    Ok(Evaluation {
        features,
        labels: km.assignments,
        kmeans_obj: km.objective,
        imbalance,
        report,
    })
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub final_eval: Evaluation,
}

/// Hooks called during [`train_with`].
pub trait Observer {
    fn on_epoch(&mut self, _record: &EpochRecord, _state: &TrainState) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _epoch: usize, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, &mut ())
}

/// E-step at every epoch divisible by `r`, an M-step every epoch, and a
/// fresh evaluation every `eval_every` epochs and after the last one.
pub fn train_with(cfg: &TrainConfig, ds: &Dataset, observer: &mut dyn Observer) -> Result<TrainOutcome> {
    let mut state = TrainState::new(cfg, ds)?;
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let kmeans_obj = if epoch % cfg.r == 0 {
            e_step(&mut state, ds, cfg)?;
            state.estep_log.last().map(|e| e.1)
        } else {
            None
        };
        let summary = m_step_epoch(&mut state, ds, cfg)?;
        let online = extract_features(&state.pair, ds, Branch::Online)?;
        let mut record = EpochRecord {
            epoch,
            loss: summary.loss,
            loss_align: summary.loss_align,
            loss_pcl: summary.loss_pcl,
            kmeans_obj,
            nmi: None,
            ami: None,
            ari: None,
            acc: None,
            imbalance: None,
            std: uniformity_std(&online),
        };
        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        if evaluate_now {
            let ev = evaluate(&state.pair, ds, cfg)?;
            record.imbalance = Some(ev.imbalance);
            if let Some(r) = &ev.report {
                record.nmi = Some(r.nmi);
                record.ami = Some(r.ami);
                record.ari = Some(r.ari);
                record.acc = Some(r.acc);
            }
        }
        state.history.push(record);
        observer.on_epoch(state.history.last().expect("just pushed"), &state)?;
        if evaluate_now {
            observer.on_eval(epoch, &state)?;
        }
    }
    state.epoch = cfg.epochs;
    let final_eval = evaluate(&state.pair, ds, cfg)?;
    Ok(TrainOutcome { state, final_eval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_vmf_mixture, SyntheticSpec};

    fn small(method: Method) -> (TrainConfig, Dataset) {
        let ds = gen_vmf_mixture(&SyntheticSpec::balanced(3, 8, 20.0, 40, 1)).unwrap();
        let mut cfg = TrainConfig::desk(8, 3, 5);
        cfg.method = method;
        cfg.epochs = 4;
        cfg.batch_size = 32;
        cfg.encoder.backbone_hidden = vec![16];
        cfg.encoder.projector_hidden = 16;
        cfg.encoder.projection_dim = 8;
        cfg.encoder.predictor_hidden = 16;
        cfg.kmeans.n_init = 2;
        cfg.eval_every = 2;
        (cfg, ds)
    }

    #[test]
    fn lr_schedule_endpoints() {
        let mut cfg = TrainConfig::desk(4, 2, 0);
        assert_eq!(cfg.base_lr(), 0.05);
        assert_eq!(cfg.warmup_epochs(), 10);
        assert_eq!(lr_at(&cfg, 0, 0.0), (0.0, 0.0));
        let (lr, pred) = lr_at(&cfg, 10, 0.0);
        assert_eq!(lr, 0.05);
        assert!((pred - 0.5).abs() < 1e-15);
        assert!(lr_at(&cfg, 199, 1.0).0.abs() < 1e-15);
        assert!((lr_at(&cfg, 105, 0.0).0 - 0.025).abs() < 1e-15);
        cfg.batch_size = 512;
        assert_eq!(cfg.base_lr(), 0.1);
    }

    #[test]
    fn config_invariants() {
        let ok = TrainConfig::desk(4, 2, 0);
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.r = 0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.warmup_epochs = Some(200);
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&ok).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ok);
        let bad = json.replacen("\"epochs\"", "\"epoch_count\"", 1);
        assert!(serde_json::from_str::<TrainConfig>(&bad).is_err());
    }

    #[test]
    fn zero_epochs_reports_initial_state() {
        let (mut cfg, ds) = small(Method::Ncc);
        cfg.epochs = 0;
        let out = train(&cfg, &ds).unwrap();
        assert!(out.state.history.is_empty());
        let init = TrainState::new(&cfg, &ds).unwrap();
        assert_eq!(out.state.pair, init.pair);
        assert!(out.final_eval.report.is_some());
    }

    #[test]
    fn estep_schedule_follows_r() {
        let (mut cfg, ds) = small(Method::Ncc);
        cfg.epochs = 9;
        cfg.r = 4;
        let out = train(&cfg, &ds).unwrap();
        let epochs: Vec<usize> = out.state.estep_log.iter().map(|e| e.0).collect();
        assert_eq!(epochs, vec![0, 4, 8]);
        cfg.r = 100;
        let out = train(&cfg, &ds).unwrap();
        assert_eq!(out.state.estep_log.len(), 1);
        for (_, obj, trace) in &out.state.estep_log {
            assert!(obj.is_finite());
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn zero_lr_only_moves_the_target() {
        let (mut cfg, ds) = small(Method::Ncc);
        cfg.base_lr = Some(0.0);
        cfg.momentum = 0.5;
        let mut state = TrainState::new(&cfg, &ds).unwrap();
        // give the target something to move toward
        state.pair.target.params_mut().into_iter().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v += 1.0));
        let before = state.pair.clone();
        e_step(&mut state, &ds, &cfg).unwrap();
        m_step_epoch(&mut state, &ds, &cfg).unwrap();
        let params = |m: &Mlp| -> Vec<Tensor> { m.params().into_iter().map(|(t, _)| t.clone()).collect() };
        assert_eq!(params(&state.pair.online), params(&before.online));
        assert_eq!(params(&state.pair.predictor), params(&before.predictor));
        let gap = |p: &NetworkPair| -> f64 {
            params(&p.target)
                .iter()
                .zip(params(&p.online))
                .map(|(t, o)| t.data().iter().zip(o.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max)
        };
        assert!(gap(&state.pair) < gap(&before));
    }

    #[test]
    fn warmup_pcl_is_zero() {
        let (mut cfg, ds) = small(Method::Ncc);
        cfg.warmup_epochs = Some(2);
        let out = train(&cfg, &ds).unwrap();
        assert_eq!(out.state.history[0].loss_pcl, 0.0);
        assert_eq!(out.state.history[1].loss_pcl, 0.0);
        assert!(out.state.history[2].loss_pcl > 0.0);
    }

    #[test]
    fn training_is_deterministic() {
        for method in [Method::Ncc, Method::Byol, Method::SimclrInfonce] {
            let (cfg, ds) = small(method);
            let a = train(&cfg, &ds).unwrap();
            let b = train(&cfg, &ds).unwrap();
            assert_eq!(a.state.history, b.state.history);
            assert_eq!(a.state.pair, b.state.pair);
            assert_eq!(a.final_eval, b.final_eval);
        }
    }

    #[test]
    fn byol_reduction_is_bitwise() {
        let (mut cfg, ds) = small(Method::Ncc);
        cfg.loss.sigma = 0.0;
        cfg.loss.lambda_pcl = 0.0;
        let ncc = train(&cfg, &ds).unwrap();
        cfg.method = Method::Byol;
        let byol = train(&cfg, &ds).unwrap();
        assert_eq!(ncc.state.history, byol.state.history);
        assert_eq!(ncc.state.pair, byol.state.pair);
    }

    #[test]
    fn features_are_unit_and_branches_agree_at_init() {
        let (cfg, ds) = small(Method::Ncc);
        let state = TrainState::new(&cfg, &ds).unwrap();
        let on = extract_features(&state.pair, &ds, Branch::Online).unwrap();
        let tg = extract_features(&state.pair, &ds, Branch::Target).unwrap();
        assert_eq!(on, tg);
        assert_eq!(on, extract_features(&state.pair, &ds, Branch::Online).unwrap());
        for row in on.iter_rows() {
            assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn records_carry_metrics_on_eval_epochs() {
        let (cfg, ds) = small(Method::Ncc);
        let out = train(&cfg, &ds).unwrap();
        let h = &out.state.history;
        assert_eq!(h.len(), 4);
        assert!(h[0].nmi.is_none() && h[1].nmi.is_some() && h[3].nmi.is_some());
        assert!(h.iter().all(|r| r.kmeans_obj.is_some()));
        let line = serde_json::to_string(&h[0]).unwrap();
        assert!(!line.contains("nmi"));
        let back: EpochRecord = serde_json::from_str(&serde_json::to_string(&h[1]).unwrap()).unwrap();
        assert_eq!(&back, &h[1]);
    }

    #[test]
    fn unlabeled_data_trains_without_reports() {
        let (cfg, mut ds) = small(Method::Ncc);
        ds.labels = None;
        let out = train(&cfg, &ds).unwrap();
        assert!(out.final_eval.report.is_none());
        assert!(out.state.history[1].imbalance.is_some());
    }
}
