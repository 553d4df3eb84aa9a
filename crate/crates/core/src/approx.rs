//! Small feed-forward approximators with exact reverse-mode gradients,
//! organized as one value network and one policy network per automaton
//! state of the active level.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, RngCore};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("automaton state {0} has no network")]
    UnknownAutomatonState(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fully connected network with rectified-linear hidden layers and a
/// linear output layer. Weights are row-major `out x in` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Post-activation values per layer from one forward pass;
/// `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    pub acts: Vec<Vec<f64>>,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientTape {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &GradientTape) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for w in &mut self.weights {
            for x in w {
                *x *= c;
            }
        }
        for b in &mut self.biases {
            for x in b {
                *x *= c;
            }
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .flat_map(|v| v.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

impl Mlp {
    /// Hidden weights are uniform in ±1/sqrt(fan_in); the output layer is
    /// zero so initial values are 0 and initial policies uniform.
    pub fn new(widths: &[usize], rng: &mut dyn RngCore) -> Self {
        assert!(widths.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 1..widths.len() {
            let (fan_in, fan_out) = (widths[l - 1], widths[l]);
            let last = l == widths.len() - 1;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| {
                    if last {
                        0.0
                    } else {
                        rng.gen_range(-bound..bound)
                    }
                })
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Self {
            widths: widths.to_vec(),
            weights,
            biases,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).0
    }

    pub fn forward_trace(&self, x: &[f64]) -> (Vec<f64>, Trace) {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let layers = self.weights.len();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let prev = &acts[l];
            let mut out = self.biases[l].clone();
            for i in 0..n_out {
                let row = &self.weights[l][i * n_in..(i + 1) * n_in];
                let mut acc = 0.0;
                for (w, a) in row.iter().zip(prev) {
                    acc += w * a;
                }
                out[i] += acc;
            }
            if l + 1 < layers {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
        }
        let out = acts.last().unwrap().clone();
        (out, Trace { acts })
    }

    /// Accumulates the exact gradient of `grad_out · output` into `tape`.
    pub fn backprop_into(&self, trace: &Trace, grad_out: &[f64], tape: &mut GradientTape) {
        assert_eq!(grad_out.len(), self.output_dim());
        let layers = self.weights.len();
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let prev = &trace.acts[l];
            for i in 0..n_out {
                tape.biases[l][i] += delta[i];
                let row = &mut tape.weights[l][i * n_in..(i + 1) * n_in];
                for (g, a) in row.iter_mut().zip(prev) {
                    *g += delta[i] * a;
                }
            }
            if l > 0 {
                let mut prev_delta = vec![0.0; n_in];
                for i in 0..n_out {
                    let row = &self.weights[l][i * n_in..(i + 1) * n_in];
                    for (pd, w) in prev_delta.iter_mut().zip(row) {
                        *pd += delta[i] * w;
                    }
                }
                // rectifier gate: inactive units pass no gradient
                for (pd, a) in prev_delta.iter_mut().zip(prev) {
                    if *a <= 0.0 {
                        *pd = 0.0;
                    }
                }
                delta = prev_delta;
            }
        }
    }

    pub fn backprop(&self, trace: &Trace, grad_out: &[f64]) -> GradientTape {
        let mut tape = GradientTape::zeros_like(self);
        self.backprop_into(trace, grad_out, &mut tape);
        tape
    }

    /// θ ← θ − η · tape.
    pub fn sgd_step(&mut self, tape: &GradientTape, eta: f64) {
        for (w, g) in self.weights.iter_mut().zip(&tape.weights) {
            for (x, d) in w.iter_mut().zip(g) {
                *x -= eta * d;
            }
        }
        for (b, g) in self.biases.iter_mut().zip(&tape.biases) {
            for (x, d) in b.iter_mut().zip(g) {
                *x -= eta * d;
            }
        }
    }

    /// Serializes as a JSON header line followed by the parameters as
    /// little-endian 64-bit floats.
    pub fn to_bytes(&self, level: usize, q: Option<usize>) -> Vec<u8> {
        let header = serde_json::json!({
            "widths": self.widths,
            "level": level,
            "q": q,
        });
        let mut out = Vec::new();
        out.extend_from_slice(header.to_string().as_bytes());
        out.push(b'\n');
        for layer in self.weights.iter().zip(&self.biases) {
            for v in layer.0.iter().chain(layer.1.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<(Mlp, usize, Option<usize>), ApproxError> {
        let nl = data
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ApproxError::BadCheckpoint("missing header".into()))?;
        let header: serde_json::Value = serde_json::from_slice(&data[..nl])
            .map_err(|e| ApproxError::BadCheckpoint(e.to_string()))?;
        let widths: Vec<usize> = serde_json::from_value(header["widths"].clone())
            .map_err(|e| ApproxError::BadCheckpoint(e.to_string()))?;
        let level = header["level"].as_u64().unwrap_or(0) as usize;
        let q = header["q"].as_u64().map(|x| x as usize);
        let mut blob = &data[nl + 1..];
        let mut read = |n: usize| -> Result<Vec<f64>, ApproxError> {
            if blob.len() < n * 8 {
                return Err(ApproxError::BadCheckpoint("truncated blob".into()));
            }
            let v = blob[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blob = &blob[n * 8..];
            Ok(v)
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 1..widths.len() {
            weights.push(read(widths[l - 1] * widths[l])?);
            biases.push(read(widths[l])?);
        }
        Ok((
            Mlp {
                widths,
                weights,
                biases,
            },
            level,
            q,
        ))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    m: GradientTape,
    v: GradientTape,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        Self {
            m: GradientTape::zeros_like(net),
            v: GradientTape::zeros_like(net),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, tape: &GradientTape, eta: f64) {
        self.t += 1;
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let b1c = 1.0 - beta1.powi(self.t as i32);
        let b2c = 1.0 - beta2.powi(self.t as i32);
        let update =
            |p: &mut Vec<f64>, g: &Vec<f64>, m: &mut Vec<f64>, v: &mut Vec<f64>| {
                for i in 0..p.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let mhat = m[i] / b1c;
                    let vhat = v[i] / b2c;
                    p[i] -= eta * mhat / (vhat.sqrt() + eps);
                }
            };
        for l in 0..net.weights.len() {
            update(
                &mut net.weights[l],
                &tape.weights[l],
                &mut self.m.weights[l],
                &mut self.v.weights[l],
            );
            update(
                &mut net.biases[l],
                &tape.biases[l],
                &mut self.m.biases[l],
                &mut self.v.biases[l],
            );
        }
    }
}

/// How continuous states are routed to networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// One value and one policy network per in-scope automaton state.
    PerState,
    /// Single shared pair with the integer automaton state appended to the
    /// input vector (ablation baseline).
    Shared,
}

/// Value/policy networks routed by automaton state. Lower-level networks
/// are frozen (no gradients); final and sink states report value zero and
/// a uniform policy.
#[derive(Debug, Clone)]
pub struct ModularApproximator {
    pub routing: Routing,
    pub input_dim: usize,
    pub action_count: usize,
    pub hidden: Vec<usize>,
    pub level: usize,
    /// Uniform mixture weight folded into every reported policy:
    /// `(1 − ε)·softmax(logits) + ε/|A|`. Keeps action probabilities (and
    /// hence the −τ log π terms of the losses) bounded away from zero no
    /// matter how far the logits saturate.
    pub policy_mix: f64,
    pub scope: BTreeSet<usize>,
    pub zero_states: BTreeSet<usize>,
    pub value_nets: BTreeMap<usize, Mlp>,
    pub policy_nets: BTreeMap<usize, Mlp>,
    pub frozen_value: BTreeMap<usize, Mlp>,
    pub frozen_policy: BTreeMap<usize, Mlp>,
}

/// Gradient accumulators matching an approximator's active networks.
#[derive(Debug, Clone)]
pub struct ModularTapes {
    pub value: BTreeMap<usize, GradientTape>,
    pub policy: BTreeMap<usize, GradientTape>,
}

const SHARED_KEY: usize = usize::MAX;

impl ModularApproximator {
    pub fn new(
        routing: Routing,
        input_dim: usize,
        action_count: usize,
        hidden: &[usize],
        scope: impl IntoIterator<Item = usize>,
        zero_states: impl IntoIterator<Item = usize>,
        rng: &mut dyn RngCore,
    ) -> Self {
        let scope: BTreeSet<usize> = scope.into_iter().collect();
        let zero_states: BTreeSet<usize> = zero_states.into_iter().collect();
        let mut out = Self {
            routing,
            input_dim,
            action_count,
            hidden: hidden.to_vec(),
            level: 0,
            policy_mix: 0.0,
            scope: BTreeSet::new(),
            zero_states,
            value_nets: BTreeMap::new(),
            policy_nets: BTreeMap::new(),
            frozen_value: BTreeMap::new(),
            frozen_policy: BTreeMap::new(),
        };
        out.install_scope(scope, rng);
        out
    }

    fn widths(&self, out_dim: usize) -> Vec<usize> {
        let extra = if self.routing == Routing::Shared { 1 } else { 0 };
        let mut w = vec![self.input_dim + extra];
        w.extend_from_slice(&self.hidden);
        w.push(out_dim);
        w
    }

    fn install_scope(&mut self, scope: BTreeSet<usize>, rng: &mut dyn RngCore) {
        self.scope = scope;
        self.value_nets.clear();
        self.policy_nets.clear();
        match self.routing {
            Routing::PerState => {
                for &q in &self.scope.clone() {
                    self.value_nets.insert(q, Mlp::new(&self.widths(1), rng));
                    self.policy_nets
                        .insert(q, Mlp::new(&self.widths(self.action_count), rng));
                }
            }
            Routing::Shared => {
                self.value_nets
                    .insert(SHARED_KEY, Mlp::new(&self.widths(1), rng));
                self.policy_nets
                    .insert(SHARED_KEY, Mlp::new(&self.widths(self.action_count), rng));
            }
        }
    }

    /// Freezes the active level's networks and installs fresh ones for the
    /// next scope.
    pub fn advance_level(&mut self, next_scope: impl IntoIterator<Item = usize>, rng: &mut dyn RngCore) {
        assert_eq!(self.routing, Routing::PerState, "shared routing has no level curriculum");
        let value = std::mem::take(&mut self.value_nets);
        let policy = std::mem::take(&mut self.policy_nets);
        self.frozen_value.extend(value);
        self.frozen_policy.extend(policy);
        self.level += 1;
        self.install_scope(next_scope.into_iter().collect(), rng);
    }

    fn net_input(&self, s: &[f64], q: usize) -> Vec<f64> {
        match self.routing {
            Routing::PerState => s.to_vec(),
            Routing::Shared => {
                let mut x = s.to_vec();
                x.push(q as f64);
                x
            }
        }
    }

    fn net_key(&self, q: usize) -> usize {
        match self.routing {
            Routing::PerState => q,
            Routing::Shared => SHARED_KEY,
        }
    }

    pub fn is_trainable(&self, q: usize) -> bool {
        !self.zero_states.contains(&q)
            && match self.routing {
                Routing::PerState => self.scope.contains(&q),
                Routing::Shared => true,
            }
    }

    pub fn value(&self, s: &[f64], q: usize) -> Result<f64, ApproxError> {
        if self.zero_states.contains(&q) {
            return Ok(0.0);
        }
        let key = self.net_key(q);
        if let Some(net) = self.value_nets.get(&key) {
            if self.routing == Routing::Shared || self.scope.contains(&q) {
                return Ok(net.forward(&self.net_input(s, q))[0]);
            }
        }
        if let Some(net) = self.frozen_value.get(&q) {
            return Ok(net.forward(s)[0]);
        }
        Err(ApproxError::UnknownAutomatonState(q))
    }

    /// Forward pass with trace for gradient work; only for trainable q.
    pub fn value_trace(&self, s: &[f64], q: usize) -> Result<(f64, Trace), ApproxError> {
        if !self.is_trainable(q) {
            return Err(ApproxError::UnknownAutomatonState(q));
        }
        let net = self
            .value_nets
            .get(&self.net_key(q))
            .ok_or(ApproxError::UnknownAutomatonState(q))?;
        let (out, trace) = net.forward_trace(&self.net_input(s, q));
        Ok((out[0], trace))
    }

    /// Applies the uniform `policy_mix` smoothing to a softmax output.
    pub fn mix(&self, mut pi: Vec<f64>) -> Vec<f64> {
        if self.policy_mix > 0.0 {
            let u = self.policy_mix / pi.len() as f64;
            for p in &mut pi {
                *p = (1.0 - self.policy_mix) * *p + u;
            }
        }
        pi
    }

    pub fn policy_dist(&self, s: &[f64], q: usize) -> Result<Vec<f64>, ApproxError> {
        if self.zero_states.contains(&q) {
            return Ok(vec![1.0 / self.action_count as f64; self.action_count]);
        }
        let key = self.net_key(q);
        if let Some(net) = self.policy_nets.get(&key) {
            if self.routing == Routing::Shared || self.scope.contains(&q) {
                return Ok(self.mix(softmax(&net.forward(&self.net_input(s, q)))));
            }
        }
        if let Some(net) = self.frozen_policy.get(&q) {
            return Ok(self.mix(softmax(&net.forward(s))));
        }
        Err(ApproxError::UnknownAutomatonState(q))
    }

    pub fn policy_trace(&self, s: &[f64], q: usize) -> Result<(Vec<f64>, Trace), ApproxError> {
        if !self.is_trainable(q) {
            return Err(ApproxError::UnknownAutomatonState(q));
        }
        let net = self
            .policy_nets
            .get(&self.net_key(q))
            .ok_or(ApproxError::UnknownAutomatonState(q))?;
        let (logits, trace) = net.forward_trace(&self.net_input(s, q));
        Ok((softmax(&logits), trace))
    }

    pub fn fresh_tapes(&self) -> ModularTapes {
        ModularTapes {
            value: self
                .value_nets
                .iter()
                .map(|(&k, n)| (k, GradientTape::zeros_like(n)))
                .collect(),
            policy: self
                .policy_nets
                .iter()
                .map(|(&k, n)| (k, GradientTape::zeros_like(n)))
                .collect(),
        }
    }

    pub fn accumulate_value_grad(
        &self,
        q: usize,
        trace: &Trace,
        grad_out: f64,
        tapes: &mut ModularTapes,
    ) {
        let key = self.net_key(q);
        let net = &self.value_nets[&key];
        net.backprop_into(trace, &[grad_out], tapes.value.get_mut(&key).unwrap());
    }

    /// Accumulates `Σ_a grad_logits[a] ∂logit_a/∂φ` for the policy network
    /// serving `q`. Callers convert probability-space gradients to logit
    /// space themselves (softmax Jacobian).
    pub fn accumulate_policy_grad(
        &self,
        q: usize,
        trace: &Trace,
        grad_logits: &[f64],
        tapes: &mut ModularTapes,
    ) {
        let key = self.net_key(q);
        let net = &self.policy_nets[&key];
        net.backprop_into(trace, grad_logits, tapes.policy.get_mut(&key).unwrap());
    }

    pub fn sgd_step(&mut self, tapes: &ModularTapes, eta_value: f64, eta_policy: f64) {
        for (k, net) in &mut self.value_nets {
            net.sgd_step(&tapes.value[k], eta_value);
        }
        for (k, net) in &mut self.policy_nets {
            net.sgd_step(&tapes.policy[k], eta_policy);
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), ApproxError> {
        std::fs::create_dir_all(dir)?;
        let write = |name: String, bytes: Vec<u8>| -> Result<(), ApproxError> {
            let mut f = std::fs::File::create(dir.join(name))?;
            f.write_all(&bytes)?;
            Ok(())
        };
        let tag = |k: &usize| {
            if *k == SHARED_KEY {
                "shared".to_string()
            } else {
                format!("q{k}")
            }
        };
        for (k, net) in self.value_nets.iter().chain(self.frozen_value.iter()) {
            let q = if *k == SHARED_KEY { None } else { Some(*k) };
            write(format!("value_{}.mlp", tag(k)), net.to_bytes(self.level, q))?;
        }
        for (k, net) in self.policy_nets.iter().chain(self.frozen_policy.iter()) {
            let q = if *k == SHARED_KEY { None } else { Some(*k) };
            write(format!("policy_{}.mlp", tag(k)), net.to_bytes(self.level, q))?;
        }
        let meta = serde_json::json!({
            "routing": if self.routing == Routing::Shared { "shared" } else { "per_state" },
            "input_dim": self.input_dim,
            "action_count": self.action_count,
            "hidden": self.hidden,
            "level": self.level,
            "policy_mix": self.policy_mix,
            "scope": self.scope.iter().cloned().collect::<Vec<_>>(),
            "zero_states": self.zero_states.iter().cloned().collect::<Vec<_>>(),
            "frozen": self.frozen_value.keys().cloned().collect::<Vec<_>>(),
        });
        write("approximator.json".into(), meta.to_string().into_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self, ApproxError> {
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.join("approximator.json"))?)
                .map_err(|e| ApproxError::BadCheckpoint(e.to_string()))?;
        let routing = if meta["routing"] == "shared" {
            Routing::Shared
        } else {
            Routing::PerState
        };
        let get_usizes = |v: &serde_json::Value| -> Vec<usize> {
            v.as_array()
                .map(|a| a.iter().filter_map(|x| x.as_u64()).map(|x| x as usize).collect())
                .unwrap_or_default()
        };
        let mut out = Self {
            routing,
            input_dim: meta["input_dim"].as_u64().unwrap_or(0) as usize,
            action_count: meta["action_count"].as_u64().unwrap_or(0) as usize,
            hidden: get_usizes(&meta["hidden"]),
            level: meta["level"].as_u64().unwrap_or(0) as usize,
            policy_mix: meta["policy_mix"].as_f64().unwrap_or(0.0),
            scope: get_usizes(&meta["scope"]).into_iter().collect(),
            zero_states: get_usizes(&meta["zero_states"]).into_iter().collect(),
            value_nets: BTreeMap::new(),
            policy_nets: BTreeMap::new(),
            frozen_value: BTreeMap::new(),
            frozen_policy: BTreeMap::new(),
        };
        let frozen: BTreeSet<usize> = get_usizes(&meta["frozen"]).into_iter().collect();
        let load = |name: String| -> Result<Mlp, ApproxError> {
            Ok(Mlp::from_bytes(&std::fs::read(dir.join(name))?)?.0)
        };
        match routing {
            Routing::Shared => {
                out.value_nets
                    .insert(SHARED_KEY, load("value_shared.mlp".into())?);
                out.policy_nets
                    .insert(SHARED_KEY, load("policy_shared.mlp".into())?);
            }
            Routing::PerState => {
                for &q in &out.scope.clone() {
                    out.value_nets.insert(q, load(format!("value_q{q}.mlp"))?);
                    out.policy_nets.insert(q, load(format!("policy_q{q}.mlp"))?);
                }
                for &q in &frozen {
                    out.frozen_value.insert(q, load(format!("value_q{q}.mlp"))?);
                    out.frozen_policy
                        .insert(q, load(format!("policy_q{q}.mlp"))?);
                }
            }
        }
        Ok(out)
    }
}
