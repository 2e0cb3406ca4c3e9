//! Training loop, loss head, optimizer, checkpoints and run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Gradients, Tape};
use crate::chain::ChainModel;
use crate::data::{load_idx, preprocess, FeatureMap, FeatureSet, ImageDataset, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::init::{copy_node_init, init_dense, init_per_tensor, CopyInitPlan, DenseSelection, Distribution, InitSpec, Scheme};
use crate::network::{build_mps, inputs_from_flat, NodeId, TensorNetwork};
use crate::rankreg::{
    insert_regularizers, penalty_with_grad, spectrum, truncate_and_absorb, Absorb, MaskMode, Penalty, RankRegularizer,
    SpectrumRow,
};
use crate::tensor::Label;

pub const N_CLASSES: usize = 10;
/// Logit magnitudes outside `[COLLAPSE, BLOWUP]` count as divergence.
pub const BLOWUP: f64 = 1e100;
pub const COLLAPSE: f64 = 1e-100;
/// Samples per parallel work item; fixed so that reductions do not depend
/// on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMethod {
    Copy,
    Dense,
    PerTensor,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "dense" => Ok(Self::Dense),
            "per_tensor" | "naive" => Ok(Self::PerTensor),
            _ => Err(Error::Config(format!("unknown init method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub n_runs: usize,
    pub seed: u64,
    pub n_sites: usize,
    pub bond_dim: usize,
    /// Defaults to the middle site.
    pub output_site: Option<usize>,
    pub init: InitMethod,
    pub scheme: Scheme,
    pub distribution: Distribution,
    pub n_dense: usize,
    pub pin_vector: Vec<f64>,
    pub dense_selection: DenseSelection,
    pub rank_reg: bool,
    pub gamma: f64,
    pub gamma_final: Option<f64>,
    pub lambda: f64,
    pub threshold: f64,
    pub penalty: Penalty,
    pub subset: usize,
    pub data_dir: PathBuf,
    pub feature_map: FeatureMap,
    /// Fold the test file into the train/validation pool (no test score).
    pub pool_test: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            train_fraction: 0.8,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            n_runs: 10,
            seed: 0,
            n_sites: 196,
            bond_dim: 10,
            output_site: None,
            init: InitMethod::Copy,
            scheme: Scheme::Glorot,
            distribution: Distribution::Normal,
            n_dense: 4,
            pin_vector: vec![1.0, 0.0],
            dense_selection: DenseSelection::Contiguous,
            rank_reg: false,
            gamma: 10.0,
            gamma_final: None,
            lambda: 0.0,
            threshold: 0.5,
            penalty: Penalty::SoftParams,
            subset: 60_000,
            data_dir: PathBuf::from("data/mnist"),
            feature_map: FeatureMap::Trig,
            pool_test: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

impl TrainConfig {
    /// Small-scale settings: 10,000 images, 30 epochs, a single run.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            n_runs: 1,
            subset: 10_000,
            ..Self::default()
        }
    }

    pub fn output_site(&self) -> usize {
        self.output_site.unwrap_or(self.n_sites / 2)
    }

    pub fn init_spec(&self, run: usize) -> InitSpec {
        InitSpec {
            scheme: self.scheme,
            distribution: self.distribution,
            seed: self.seed.wrapping_add(run as u64),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "split" | "train_fraction" => self.train_fraction = parse_split(v)?,
            "lr" | "alpha" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "n_runs" => self.n_runs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "n_sites" => self.n_sites = parse(key, v)?,
            "bond_dim" | "d_max" => self.bond_dim = parse(key, v)?,
            "output_site" => {
                self.output_site = if v == "middle" { None } else { Some(parse(key, v)?) };
            }
            "init" => self.init = v.parse()?,
            "scheme" => self.scheme = v.parse()?,
            "distribution" => self.distribution = v.parse()?,
            "n_dense" => self.n_dense = parse(key, v)?,
            "pin_vector" => self.pin_vector = parse_list(key, v)?,
            "dense_selection" => {
                self.dense_selection = match v {
                    "contiguous" => DenseSelection::Contiguous,
                    _ if v.starts_with("random") => {
                        DenseSelection::Random(v.strip_prefix("random:").map_or(Ok(self.seed), |s| parse(key, s))?)
                    }
                    _ => DenseSelection::Explicit(parse_list::<usize>(key, v)?.into_iter().map(NodeId).collect()),
                }
            }
            "rank_reg" => self.rank_reg = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "gamma_final" => self.gamma_final = if v == "none" { None } else { Some(parse(key, v)?) },
            "lambda" => self.lambda = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "penalty" => self.penalty = v.parse()?,
            "subset" => self.subset = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "feature_map" => self.feature_map = v.parse()?,
            "pool_test" => self.pool_test = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.n_runs == 0 || self.n_sites < 2 || self.bond_dim == 0 {
            return bad("counts must be positive (n_sites at least 2)");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("split must lie in (0, 1)");
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad("lambda must be non-negative");
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.gamma.is_nan() || self.gamma <= 0.0 {
            return bad("lr and gamma must be positive");
        }
        if self.output_site() >= self.n_sites {
            return bad("output site outside the chain");
        }
        if self.pin_vector.len() != FEATURE_DIM {
            return bad("pin vector must have two entries");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let sel = match &self.dense_selection {
            DenseSelection::Contiguous => "contiguous".to_string(),
            DenseSelection::Random(s) => format!("random:{s}"),
            DenseSelection::Explicit(set) => set.iter().map(|n| n.0.to_string()).collect::<Vec<_>>().join(","),
        };
        let pin = self.pin_vector.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let fm = match self.feature_map {
            FeatureMap::Trig => "trig",
            FeatureMap::Linear => "linear",
        };
        let init = match self.init {
            InitMethod::Copy => "copy",
            InitMethod::Dense => "dense",
            InitMethod::PerTensor => "per_tensor",
        };
        let dist = match self.distribution {
            Distribution::Normal => "normal",
            Distribution::Uniform => "uniform",
        };
        let pen = match self.penalty {
            Penalty::SoftParams => "soft_params",
            Penalty::L1 => "l1",
            Penalty::L2 => "l2",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("train_fraction", self.train_fraction.to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("n_runs", self.n_runs.to_string());
        kv("seed", self.seed.to_string());
        kv("n_sites", self.n_sites.to_string());
        kv("bond_dim", self.bond_dim.to_string());
        kv("output_site", self.output_site.map_or("middle".into(), |o| o.to_string()));
        kv("init", init.into());
        kv("scheme", self.scheme.to_string());
        kv("distribution", dist.into());
        kv("n_dense", self.n_dense.to_string());
        kv("pin_vector", pin);
        kv("dense_selection", sel);
        kv("rank_reg", self.rank_reg.to_string());
        kv("gamma", self.gamma.to_string());
        kv("gamma_final", self.gamma_final.map_or("none".into(), |g| g.to_string()));
        kv("lambda", self.lambda.to_string());
        kv("threshold", self.threshold.to_string());
        kv("penalty", pen.into());
        kv("subset", self.subset.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("feature_map", fm.into());
        kv("pool_test", self.pool_test.to_string());
        s
    }
}

fn parse_split(v: &str) -> Result<f64> {
    if let Some((a, b)) = v.split_once(':') {
        let a: f64 = parse("split", a)?;
        let b: f64 = parse("split", b)?;
        Ok(a / (a + b))
    } else {
        parse("split", v)
    }
}

/// Numerically stable softmax cross-entropy and its logit gradient.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if let Some(bad) = logits.iter().find(|x| !x.is_finite()) {
        return Err(Error::Divergence(format!("non-finite logit {bad}")));
    }
    if label >= logits.len() {
        return Err(Error::Range(format!("label {label} for {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let b1t = 1.0 - cfg.beta1.powi(state.t as i32);
    let b2t = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / b1t;
        let vh = state.v[i] / b2t;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Nodes in id order, then soft dimensions.
pub fn flatten_params(net: &TensorNetwork, regs: &[RankRegularizer]) -> Vec<f64> {
    let mut p: Vec<f64> = net.nodes().flat_map(|(_, n)| n.tensor.data().iter().copied()).collect();
    p.extend(regs.iter().map(|r| r.soft_dim));
    p
}

pub fn flatten_grads(g: &Gradients) -> Vec<f64> {
    let mut p: Vec<f64> = g.nodes.values().flat_map(|t| t.data().iter().copied()).collect();
    p.extend(&g.soft_dims);
    p
}

pub fn unflatten_params(net: &mut TensorNetwork, regs: &mut [RankRegularizer], p: &[f64]) -> Result<()> {
    let mut at = 0;
    for id in net.node_ids() {
        let t = net.node_mut(id)?.tensor.data_mut();
        let n = t.len();
        t.copy_from_slice(&p[at..at + n]);
        at += n;
    }
    for r in regs.iter_mut() {
        r.soft_dim = p[at];
        r.clamp();
        at += 1;
    }
    if at != p.len() {
        return Err(Error::Dimension(format!("{} parameters for {at} slots", p.len())));
    }
    Ok(())
}

/// Evaluates a network on flat feature buffers, through the chain fast path
/// when the topology allows it and the tape otherwise.
pub struct Evaluator<'a> {
    net: &'a TensorNetwork,
    regs: &'a [RankRegularizer],
    mode: MaskMode,
    chain: Option<ChainModel>,
}

#[derive(Clone, Debug)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
    pub max_abs: f64,
    /// Largest logit magnitude seen.
    pub max_logit: f64,
    /// Summed over the batch; `None` when gradients were not requested.
    pub grads: Option<Gradients>,
}

fn check_logits(logits: &[f64]) -> Result<()> {
    let m = logits.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !m.is_finite() || m > BLOWUP {
        return Err(Error::Divergence(format!("logit magnitude {m:e} exceeds {BLOWUP:e}")));
    }
    if m < COLLAPSE {
        return Err(Error::Divergence(format!("logit magnitude {m:e} collapsed below {COLLAPSE:e}")));
    }
    Ok(())
}

impl<'a> Evaluator<'a> {
    pub fn new(net: &'a TensorNetwork, regs: &'a [RankRegularizer], mode: MaskMode) -> Result<Self> {
        let chain = match ChainModel::new(net, regs, mode) {
            Ok(c) => Some(c),
            Err(Error::Structure(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self { net, regs, mode, chain })
    }

    pub fn uses_fast_path(&self) -> bool {
        self.chain.is_some()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.chain {
            Some(c) => c.logits(x),
            None => Ok(Tape::record(self.net, self.regs, self.mode, &inputs_from_flat(x, FEATURE_DIM), None)?
                .output()
                .data()
                .to_vec()),
        }
    }

    fn chunk(&self, fs: &FeatureSet, idx: &[usize], want_grad: bool, strict: bool) -> Result<BatchStats> {
        let mut stats = BatchStats {
            loss_sum: 0.0,
            correct: 0,
            count: idx.len(),
            max_abs: 0.0,
            max_logit: 0.0,
            grads: None,
        };
        match &self.chain {
            Some(c) => {
                let mut pass = crate::chain::ChainPass::default();
                let mut acc = want_grad.then(|| c.zero_grads());
                for &i in idx {
                    let x = fs.sample(i);
                    c.forward(x, &mut pass)?;
                    if strict {
                        check_logits(&pass.logits)?;
                    }
                    stats.max_abs = stats.max_abs.max(pass.max_abs);
                    stats.max_logit = pass.logits.iter().fold(stats.max_logit, |m, x| m.max(x.abs()));
                    let (loss, g) = softmax_cross_entropy(&pass.logits, fs.labels[i])?;
                    stats.loss_sum += loss;
                    stats.correct += usize::from(argmax(&pass.logits) == fs.labels[i]);
                    if let Some(acc) = acc.as_mut() {
                        c.backward(x, &pass, &g, acc);
                    }
                }
                if let Some(acc) = acc {
                    stats.grads = Some(c.to_gradients(self.net, &acc)?);
                }
            }
            None => {
                let mut acc = if want_grad {
                    Some(Gradients::zeros_like(self.net, self.regs.len())?)
                } else {
                    None
                };
                for &i in idx {
                    let tape = Tape::record(
                        self.net,
                        self.regs,
                        self.mode,
                        &inputs_from_flat(fs.sample(i), FEATURE_DIM),
                        None,
                    )?;
                    let logits = tape.output().data();
                    if strict {
                        check_logits(logits)?;
                    }
                    stats.max_abs = stats.max_abs.max(tape.max_abs_intermediate());
                    stats.max_logit = logits.iter().fold(stats.max_logit, |m, x| m.max(x.abs()));
                    let (loss, g) = softmax_cross_entropy(logits, fs.labels[i])?;
                    stats.loss_sum += loss;
                    stats.correct += usize::from(argmax(logits) == fs.labels[i]);
                    if let Some(acc) = acc.as_mut() {
                        acc.add_scaled(&tape.backward(&g)?, 1.0);
                    }
                }
                stats.grads = acc;
            }
        }
        Ok(stats)
    }

    /// Loss, accuracy and (optionally) summed gradients over `idx`.
    ///
    /// Work is split into fixed chunks and reduced in chunk order, so the
    /// result does not depend on the thread count. With `strict`, collapsed
    /// or exploding logits are reported as divergence.
    pub fn batch(&self, fs: &FeatureSet, idx: &[usize], want_grad: bool, strict: bool) -> Result<BatchStats> {
        let parts: Vec<BatchStats> = idx
            .par_chunks(CHUNK)
            .map(|c| self.chunk(fs, c, want_grad, strict))
            .collect::<Result<_>>()?;
        let mut total = BatchStats {
            loss_sum: 0.0,
            correct: 0,
            count: 0,
            max_abs: 0.0,
            max_logit: 0.0,
            grads: None,
        };
        for p in parts {
            total.loss_sum += p.loss_sum;
            total.correct += p.correct;
            total.count += p.count;
            total.max_abs = total.max_abs.max(p.max_abs);
            total.max_logit = total.max_logit.max(p.max_logit);
            match (&mut total.grads, p.grads) {
                (Some(t), Some(g)) => t.add_scaled(&g, 1.0),
                (t @ None, g) => *t = g,
                _ => {}
            }
        }
        Ok(total)
    }

    pub fn accuracy(&self, fs: &FeatureSet) -> Result<f64> {
        if fs.is_empty() {
            return Ok(0.0);
        }
        let idx: Vec<usize> = (0..fs.len()).collect();
        let s = self.batch(fs, &idx, false, false)?;
        Ok(s.correct as f64 / s.count as f64)
    }
}

/// A trained (or freshly initialized) model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: TensorNetwork,
    pub regs: Vec<RankRegularizer>,
}

const CKPT_MAGIC: &[u8; 8] = b"TNMLCKP1";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CKPT_MAGIC.to_vec();
        let topo = self.net.topology_text();
        out.extend((topo.len() as u64).to_le_bytes());
        out.extend(topo.as_bytes());
        for (_, n) in self.net.nodes() {
            for x in n.tensor.data() {
                out.extend(x.to_le_bytes());
            }
        }
        out.extend((self.regs.len() as u64).to_le_bytes());
        for r in &self.regs {
            out.extend(r.edge.0.to_le_bytes());
            out.extend((r.max_dim as u64).to_le_bytes());
            out.extend(r.soft_dim.to_le_bytes());
            out.extend(r.sharpness.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Format("checkpoint truncated".into()));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(8)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
        let topo_len = u64_at(take(8)?) as usize;
        let topo = std::str::from_utf8(take(topo_len)?).map_err(|e| Error::Format(e.to_string()))?;
        let mut net = TensorNetwork::from_topology_text(topo)?;
        for id in net.node_ids() {
            let n = net.node(id)?.tensor.len();
            let raw = take(8 * n)?;
            let t = net.node_mut(id)?.tensor.data_mut();
            for (x, c) in t.iter_mut().zip(raw.chunks(8)) {
                *x = f64_at(c);
            }
        }
        let n_regs = u64_at(take(8)?) as usize;
        let mut regs = Vec::with_capacity(n_regs);
        for _ in 0..n_regs {
            let edge = Label(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")));
            let max_dim = u64_at(take(8)?) as usize;
            let soft_dim = f64_at(take(8)?);
            let sharpness = f64_at(take(8)?);
            regs.push(RankRegularizer {
                edge,
                soft_dim,
                sharpness,
                max_dim,
            });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        crate::rankreg::check_regularizers(&net, &regs)?;
        Ok(Self { net, regs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// The network used for inference: regularizers rounded and absorbed.
    pub fn inference_net(&self, threshold: f64) -> Result<TensorNetwork> {
        if self.regs.is_empty() {
            Ok(self.net.clone())
        } else {
            truncate_and_absorb(&self.net, &self.regs, threshold, Absorb::Rounded)
        }
    }

    pub fn spectrum(&self, threshold: f64) -> Vec<SpectrumRow> {
        spectrum(&self.regs, threshold)
    }
}

fn error_rate(s: &BatchStats) -> f64 {
    if s.count == 0 {
        0.0
    } else {
        1.0 - s.correct as f64 / s.count as f64
    }
}

/// Accuracy and parameter count of the inference network.
pub fn evaluate(ckpt: &Checkpoint, fs: &FeatureSet, threshold: f64) -> Result<(f64, usize)> {
    let net = ckpt.inference_net(threshold)?;
    let n_in = net.input_edges().len();
    if n_in != fs.n_features {
        return Err(Error::Dimension(format!(
            "checkpoint expects {n_in} features, data has {}",
            fs.n_features
        )));
    }
    let acc = Evaluator::new(&net, &[], MaskMode::Soft)?.accuracy(fs)?;
    Ok((acc, net.param_count()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: f64,
    pub params: usize,
    pub max_abs_intermediate: f64,
    pub soft_dims: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochRow>,
    /// Validation error of the model before any update.
    pub initial_val_error: f64,
    /// Largest validation logit magnitude before any update.
    pub initial_max_logit: f64,
    /// Validation error of the final inference network (regularizers
    /// truncated and absorbed).
    pub final_val_error: f64,
    pub test_accuracy: Option<f64>,
    pub final_params: usize,
    /// Set when training stopped on divergence.
    pub halted: Option<String>,
}

impl RunRecord {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_error,params,max_abs_intermediate\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_error, r.params, r.max_abs_intermediate
            );
        }
        s
    }
}

/// Per-epoch mean and sample standard deviation of the validation error and
/// training loss across runs, over the epochs every run completed.
pub fn aggregate(runs: &[RunRecord]) -> Vec<(usize, f64, f64, f64, f64)> {
    let n_epochs = runs.iter().map(|r| r.epochs.len()).min().unwrap_or(0);
    let stats = |xs: &[f64]| -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    (0..n_epochs)
        .map(|e| {
            let v: Vec<f64> = runs.iter().map(|r| r.epochs[e].val_error).collect();
            let l: Vec<f64> = runs.iter().map(|r| r.epochs[e].train_loss).collect();
            let (vm, vs) = stats(&v);
            let (lm, ls) = stats(&l);
            (e + 1, vm, vs, lm, ls)
        })
        .collect()
}

pub fn aggregate_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("epoch,val_error_mean,val_error_std,train_loss_mean,train_loss_std\n");
    for (e, vm, vs, lm, ls) in aggregate(runs) {
        let _ = writeln!(s, "{e},{vm},{vs},{lm},{ls}");
    }
    s
}

/// Train/validation/test features.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: FeatureSet,
    pub val: FeatureSet,
    pub test: Option<FeatureSet>,
}

fn find_file(dir: &Path, stem: &str) -> PathBuf {
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(stem)
    }
}

pub fn load_mnist_pair(dir: &Path, prefix: &str) -> Result<ImageDataset> {
    load_idx(
        find_file(dir, &format!("{prefix}-images-idx3-ubyte")),
        find_file(dir, &format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Loads MNIST from `data_dir` and produces the configured splits.
pub fn prepare_splits(cfg: &TrainConfig) -> Result<Splits> {
    let train = load_mnist_pair(&cfg.data_dir, "train")?;
    let test = load_mnist_pair(&cfg.data_dir, "t10k").ok();
    let (pool, test) = match (cfg.pool_test, test) {
        (true, Some(t)) => (train.concat(&t)?, None),
        (_, t) => (train, t),
    };
    let pool = pool.take(cfg.subset);
    let (tr, va) = pool.split(cfg.train_fraction, cfg.seed)?;
    let pre = |d: &ImageDataset| preprocess(d, cfg.feature_map);
    Ok(Splits {
        train: pre(&tr)?,
        val: pre(&va)?,
        test: test.as_ref().map(pre).transpose()?,
    })
}

/// Builds and initializes the model described by `cfg` for run `run`.
pub fn initial_checkpoint(cfg: &TrainConfig, run: usize) -> Result<Checkpoint> {
    cfg.validate()?;
    let net = build_mps(cfg.n_sites, FEATURE_DIM, cfg.bond_dim, N_CLASSES, cfg.output_site())?;
    let spec = cfg.init_spec(run);
    let net = match cfg.init {
        InitMethod::Copy => {
            let plan = CopyInitPlan {
                n_dense: cfg.n_dense,
                pin_vector: cfg.pin_vector.clone(),
                selection: cfg.dense_selection.clone(),
            };
            copy_node_init(&net, &plan, &spec)?.0
        }
        InitMethod::Dense => init_dense(&net, &spec)?.0,
        InitMethod::PerTensor => init_per_tensor(&net, &spec)?,
    };
    let regs = if cfg.rank_reg {
        insert_regularizers(&net, cfg.gamma)?.1
    } else {
        Vec::new()
    };
    Ok(Checkpoint { net, regs })
}

fn params_now(ckpt: &Checkpoint, threshold: f64) -> Result<usize> {
    Ok(ckpt.inference_net(threshold)?.param_count())
}

/// Trains from `start` on `splits`, following `cfg`.
pub fn train_from(cfg: &TrainConfig, splits: &Splits, start: Checkpoint, run: usize) -> Result<(RunRecord, Checkpoint)> {
    cfg.validate()?;
    if splits.train.n_features != start.net.input_edges().len() {
        return Err(Error::Config(format!(
            "model has {} input legs, data has {} features",
            start.net.input_edges().len(),
            splits.train.n_features
        )));
    }
    let mut ckpt = start;
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let mut params = flatten_params(&ckpt.net, &ckpt.regs);
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(run as u64).wrapping_mul(0x9E37_79B9).wrapping_add(1));
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let val_idx: Vec<usize> = (0..splits.val.len()).collect();

    let initial = Evaluator::new(&ckpt.net, &ckpt.regs, MaskMode::Soft)?.batch(&splits.val, &val_idx, false, false)?;
    let mut record = RunRecord {
        epochs: Vec::new(),
        initial_val_error: error_rate(&initial),
        initial_max_logit: initial.max_logit,
        final_val_error: error_rate(&initial),
        test_accuracy: None,
        final_params: params_now(&ckpt, cfg.threshold)?,
        halted: None,
    };

    'epochs: for epoch in 0..cfg.epochs {
        if let Some(gf) = cfg.gamma_final {
            let frac = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 1.0 };
            for r in ckpt.regs.iter_mut() {
                r.sharpness = cfg.gamma + (gf - cfg.gamma) * frac;
            }
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut max_abs = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let stats = {
                let ev = Evaluator::new(&ckpt.net, &ckpt.regs, MaskMode::Soft)?;
                ev.batch(&splits.train, batch, true, true)
            };
            let stats = match stats {
                Ok(s) => s,
                Err(Error::Divergence(msg)) => {
                    log::warn!("run {run} epoch {}: {msg}", epoch + 1);
                    record.halted = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let n = batch.len() as f64;
            let mut grads = stats.grads.expect("gradients requested");
            for t in grads.nodes.values_mut() {
                for x in t.data_mut() {
                    *x /= n;
                }
            }
            for x in grads.soft_dims.iter_mut() {
                *x /= n;
            }
            let mut batch_loss = stats.loss_sum / n;
            if !ckpt.regs.is_empty() && cfg.lambda > 0.0 {
                let (pen, pg) = penalty_with_grad(&ckpt.net, &ckpt.regs, cfg.penalty);
                batch_loss += cfg.lambda * pen;
                for (g, p) in grads.soft_dims.iter_mut().zip(pg) {
                    *g += cfg.lambda * p;
                }
            }
            loss_sum += batch_loss * n;
            max_abs = max_abs.max(stats.max_abs);
            adam_step(&mut params, &flatten_grads(&grads), &mut state, &adam);
            if let Some(bad) = params.iter().find(|x| !x.is_finite()) {
                record.halted = Some(format!("non-finite parameter {bad}"));
                break 'epochs;
            }
            unflatten_params(&mut ckpt.net, &mut ckpt.regs, &params)?;
            // clamping may have moved soft dims
            let k = params.len() - ckpt.regs.len();
            for (p, r) in params[k..].iter_mut().zip(&ckpt.regs) {
                *p = r.soft_dim;
            }
        }
        let ev = Evaluator::new(&ckpt.net, &ckpt.regs, MaskMode::Soft)?;
        let val = ev.batch(&splits.val, &val_idx, false, false)?;
        let row = EpochRow {
            epoch: epoch + 1,
            train_loss: loss_sum / splits.train.len().max(1) as f64,
            val_error: error_rate(&val),
            params: params_now(&ckpt, cfg.threshold)?,
            max_abs_intermediate: max_abs.max(val.max_abs),
            soft_dims: ckpt.regs.iter().map(|r| r.soft_dim).collect(),
        };
        log::info!(
            "run {run} epoch {}: loss {:.4} val_error {:.4} params {}",
            row.epoch,
            row.train_loss,
            row.val_error,
            row.params
        );
        record.epochs.push(row);
    }
    record.final_params = params_now(&ckpt, cfg.threshold)?;
    if !splits.val.is_empty() {
        record.final_val_error = 1.0 - evaluate(&ckpt, &splits.val, cfg.threshold)?.0;
    }
    if let Some(test) = &splits.test {
        record.test_accuracy = Some(evaluate(&ckpt, test, cfg.threshold)?.0);
    }
    Ok((record, ckpt))
}

/// Initializes and trains run `run` of `cfg`.
pub fn train(cfg: &TrainConfig, splits: &Splits, run: usize) -> Result<(RunRecord, Checkpoint)> {
    let start = initial_checkpoint(cfg, run)?;
    train_from(cfg, splits, start, run)
}

/// All `cfg.n_runs` runs, each seeded by `seed + run`.
pub fn train_runs(cfg: &TrainConfig, splits: &Splits) -> Result<Vec<(RunRecord, Checkpoint)>> {
    (0..cfg.n_runs).map(|r| train(cfg, splits, r)).collect()
}

/// Final soft dimension per regularized edge, keyed by edge id.
pub fn soft_dim_snapshot(regs: &[RankRegularizer]) -> BTreeMap<Label, f64> {
    regs.iter().map(|r| (r.edge, r.soft_dim)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = softmax_cross_entropy(&[0.0; 10], 3).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        let mut big = vec![0.0; 10];
        big[0] = 1000.0;
        let (l, g) = softmax_cross_entropy(&big, 0).unwrap();
        assert!(l.abs() < 1e-12 && g.iter().all(|x| x.is_finite()));
        assert!(matches!(softmax_cross_entropy(&[f64::NAN, 0.0], 0), Err(Error::Divergence(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_exact() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let (_, g) = softmax_cross_entropy(&z, 2).unwrap();
        for k in 0..4 {
            let h = 1e-6;
            let mut up = z;
            up[k] += h;
            let mut dn = z;
            dn[k] -= h;
            let fd = (softmax_cross_entropy(&up, 2).unwrap().0 - softmax_cross_entropy(&dn, 2).unwrap().0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_first_step() {
        let mut p = vec![0.5, -0.5, 2.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[1.0, -3.0, 0.0], &mut s, &AdamConfig::default());
        assert!((p[0] - (0.5 - 0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-0.5 + 0.001 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(p[2], 2.0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![0.1, 0.2];
            let mut s = AdamState::new(2);
            for t in 0..5 {
                adam_step(&mut p, &[0.3 * t as f64, -0.7], &mut s, &AdamConfig::default());
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = TrainConfig::desk();
        c.apply_text("epochs = 3 # short\nsplit = 70:30\nscheme = target:0.5\ndense_selection = 0,1,5\nrank_reg = true\n")
            .unwrap();
        assert_eq!(c.epochs, 3);
        assert!((c.train_fraction - 0.7).abs() < 1e-15);
        assert_eq!(c.scheme, Scheme::Target(0.5));
        let mut d = TrainConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert!(c.clone().set("nope", "1").is_err());
        assert!(c.set("epochs", "x").is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = TrainConfig::desk();
        cfg.n_sites = 5;
        cfg.bond_dim = 3;
        cfg.rank_reg = true;
        let ck = initial_checkpoint(&cfg, 0).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut bytes = ck.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn aggregate_statistics() {
        let rec = |v: f64| RunRecord {
            epochs: vec![EpochRow {
                epoch: 1,
                train_loss: 1.0,
                val_error: v,
                params: 1,
                max_abs_intermediate: 1.0,
                soft_dims: vec![],
            }],
            initial_val_error: 0.9,
            initial_max_logit: 1.0,
            final_val_error: v,
            test_accuracy: None,
            final_params: 1,
            halted: None,
        };
        let a = aggregate(&[rec(0.1), rec(0.3)]);
        assert_eq!(a.len(), 1);
        assert!((a[0].1 - 0.2).abs() < 1e-15);
        assert!((a[0].2 - 0.02f64.sqrt()).abs() < 1e-15);
    }
}
