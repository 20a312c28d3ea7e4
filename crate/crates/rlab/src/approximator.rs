//! Multi-head sequence-to-sequence approximator of a frozen agent.
//!
//! Three heads consume the attacker-visible inputs — the action history,
//! the observation history, and the current observation — and each reduces
//! to an embedding of shared width. The summed embedding feeds one output
//! layer producing all `m` future-action logit blocks at once, so every
//! output step sees the current observation and the heads stay the only
//! game-dependent part.
//!
//! Also here: the full training pipeline (bootstrapped minibatch SGD) and
//! the input-length search that picks `n` from short proxy trainings.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvKind;
use crate::derive_seed;
use crate::tensor::{
    collect_gradients, lstm, sgd_step, Graph, GraphBuilder, NodeId, ParameterStore, Tensor, TensorError,
};
use crate::trajectory::{resolve, windows, Dataset, Role, TrajectoryError, WindowRef};

#[derive(Debug, Error)]
pub enum ApproximatorError {
    #[error("bad head spec: {0}")]
    BadHeadSpec(String),
    #[error("head incompatible with observation shape: {0}")]
    IncompatibleShapes(String),
    #[error("input length mismatch: model expects n={expected}, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error("no search candidate yields any valid window")]
    NoValidWindows,
    #[error("eval split is empty (or has no windows) for this model size")]
    EmptyEval,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// Layer kinds available to head specs; exactly the tensor-core inventory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { units: usize },
    Lstm { units: usize },
    Conv { filters: usize, kernel: usize, stride: usize, padding: usize },
}

/// Per-head layer lists plus the shared embedding width each head must end
/// in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub obs_head: Vec<LayerSpec>,
    pub action_head: Vec<LayerSpec>,
    pub current_head: Vec<LayerSpec>,
    pub embedding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub env: EnvKind,
    pub head: HeadSpec,
    /// Input sequence length n.
    pub input_len: usize,
    /// Output sequence length m.
    pub output_len: usize,
}

impl Seq2SeqConfig {
    /// Table-style CartPole preset: recurrent observation and action heads,
    /// a dense current-observation head, n = 50.
    pub fn cartpole_preset(output_len: usize) -> Seq2SeqConfig {
        let e = 128;
        let action_head = if output_len > 1 {
            vec![LayerSpec::Lstm { units: 8 }, LayerSpec::Lstm { units: 8 }, LayerSpec::Dense { units: e }]
        } else {
            vec![LayerSpec::Lstm { units: 8 }, LayerSpec::Dense { units: e }]
        };
        Seq2SeqConfig {
            env: EnvKind::CartPole,
            head: HeadSpec {
                obs_head: vec![
                    LayerSpec::Lstm { units: 16 },
                    LayerSpec::Lstm { units: 16 },
                    LayerSpec::Dense { units: e },
                ],
                action_head,
                current_head: vec![LayerSpec::Dense { units: e }],
                embedding: e,
            },
            input_len: 50,
            output_len,
        }
    }

    /// MiniPong preset: the Atari-style conv heads scaled to 16x16 inputs
    /// (2 conv + 1 recurrent + 1 dense observation head), n = 2 for single
    /// action and 10 for sequences.
    pub fn minipong_preset(output_len: usize) -> Seq2SeqConfig {
        let e = 48;
        let conv = |filters| LayerSpec::Conv { filters, kernel: 3, stride: 2, padding: 1 };
        Seq2SeqConfig {
            env: EnvKind::MiniPong,
            head: HeadSpec {
                obs_head: vec![conv(8), conv(16), LayerSpec::Lstm { units: 16 }, LayerSpec::Dense { units: e }],
                action_head: vec![LayerSpec::Lstm { units: 8 }, LayerSpec::Dense { units: e }],
                current_head: vec![conv(8), conv(16), LayerSpec::Dense { units: e }],
                embedding: e,
            },
            input_len: if output_len > 1 { 10 } else { 2 },
            output_len,
        }
    }

    pub fn preset(env: EnvKind, output_len: usize) -> Seq2SeqConfig {
        match env {
            EnvKind::CartPole => Seq2SeqConfig::cartpole_preset(output_len),
            EnvKind::MiniPong => Seq2SeqConfig::minipong_preset(output_len),
        }
    }

    pub fn with_input_len(mut self, n: usize) -> Seq2SeqConfig {
        self.input_len = n;
        self
    }

    fn validate(&self) -> Result<(), ApproximatorError> {
        if self.input_len == 0 || self.output_len == 0 {
            return Err(ApproximatorError::BadHeadSpec("n and m must be >= 1".into()));
        }
        for (name, head) in
            [("obs", &self.head.obs_head), ("action", &self.head.action_head), ("current", &self.head.current_head)]
        {
            match head.last() {
                Some(LayerSpec::Dense { units }) if *units == self.head.embedding => {}
                other => {
                    return Err(ApproximatorError::BadHeadSpec(format!(
                        "{name} head must end in a dense layer of embedding width {}, got {:?}",
                        self.head.embedding, other
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Feature shape cursor while assembling a head.
#[derive(Clone, Copy)]
enum Feat {
    Vector(usize),
    Image(usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Xavier,
    /// Xavier with a gain multiplier; used on the current-observation
    /// head so its features start genuinely nonlinear.
    Scaled(f64),
    Zeros,
}

/// The trained approximator: config plus the op tape and parameters.
pub struct Seq2SeqModel {
    config: Seq2SeqConfig,
    graph: Graph,
    store: ParameterStore,
    logits: Vec<NodeId>,
    probs: Vec<NodeId>,
    step_loss: Vec<NodeId>,
    loss: NodeId,
    current_input: NodeId,
}

/// Init gain for the current-observation head's dense layers. At plain
/// Xavier scale with inputs in [-1, 1] the tanh features stay in their
/// linear region and the head cannot express the policy's curvature at
/// the pipeline's small fixed learning rate.
const CURRENT_HEAD_GAIN: f64 = 3.0;

/// Input names for the per-step bound tensors; public so verification
/// code can bind graphs directly.
pub fn obs_input_name(i: usize) -> String {
    format!("past_obs_{i}")
}
pub fn action_input_name(i: usize) -> String {
    format!("past_act_{i}")
}
pub fn label_input_name(j: usize) -> String {
    format!("label_{j}")
}
pub fn current_input_name() -> &'static str {
    "current"
}

fn obs_name(i: usize) -> String {
    obs_input_name(i)
}
fn act_name(i: usize) -> String {
    action_input_name(i)
}
fn label_name(j: usize) -> String {
    label_input_name(j)
}

impl Seq2SeqModel {
    pub fn config(&self) -> &Seq2SeqConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    pub fn set_parameters(&mut self, params: Vec<(String, Tensor)>) -> Result<(), ApproximatorError> {
        for (name, value) in params {
            self.store.set_value(&name, value)?;
        }
        Ok(())
    }
}

/// Builds a model with deterministic Xavier initialization.
pub fn build_model(config: &Seq2SeqConfig, seed: u64) -> Result<Seq2SeqModel, ApproximatorError> {
    build_with_init(config, seed, Init::Xavier)
}

/// All-zero initialization; with symmetric zero weights every output
/// distribution is exactly uniform. Used by tests and oracles.
pub fn build_model_zero_init(config: &Seq2SeqConfig) -> Result<Seq2SeqModel, ApproximatorError> {
    build_with_init(config, 0, Init::Zeros)
}

fn build_with_init(config: &Seq2SeqConfig, seed: u64, init: Init) -> Result<Seq2SeqModel, ApproximatorError> {
    config.validate()?;
    let n = config.input_len;
    let m = config.output_len;
    let action_count = config.env.action_count();
    let obs_shape = config.env.obs_shape();
    let mut gb = GraphBuilder::new(seed);

    let obs_steps: Vec<NodeId> = (0..n)
        .map(|i| gb.input(&obs_name(i), &obs_shape))
        .collect::<Result<_, _>>()?;
    let act_steps: Vec<NodeId> = (0..n)
        .map(|i| gb.input(&act_name(i), &[action_count]))
        .collect::<Result<_, _>>()?;
    let current = gb.input("current", &obs_shape)?;

    let start_feat = match obs_shape.as_slice() {
        [d] => Feat::Vector(*d),
        [c, h, w] => Feat::Image(*c, *h, *w),
        other => {
            return Err(ApproximatorError::IncompatibleShapes(format!("observation shape {other:?}")))
        }
    };

    // History heads get a zero-initialized final projection so the summed
    // embedding starts as the current-observation signal alone; they fade
    // in as their gradients grow. Without this the randomly initialized
    // history embeddings drown the informative path at the paper's small
    // learning rate.
    let e_obs =
        build_sequence_head(&mut gb, "obs_head", &config.head.obs_head, &obs_steps, start_feat, init, true)?;
    let e_act = build_sequence_head(
        &mut gb,
        "act_head",
        &config.head.action_head,
        &act_steps,
        Feat::Vector(action_count),
        init,
        true,
    )?;
    let cur_init = match init {
        Init::Xavier => Init::Scaled(CURRENT_HEAD_GAIN),
        other => other,
    };
    let e_cur = build_sequence_head(
        &mut gb,
        "cur_head",
        &config.head.current_head,
        &[current],
        start_feat,
        cur_init,
        false,
    )?;

    let partial = gb.add(e_obs, e_act)?;
    let embedding = gb.add(partial, e_cur)?;
    gb.mark_output("embedding", embedding)?;

    // Output block: the summed embedding, duplicated per step, through one
    // output layer holding every step's logit weights.
    let mut logits = Vec::with_capacity(m);
    let mut probs = Vec::with_capacity(m);
    let mut step_loss = Vec::with_capacity(m);
    let mut total: Option<NodeId> = None;
    for j in 0..m {
        let w = add_param(
            &mut gb,
            &format!("out.step{j}.w"),
            &[config.head.embedding, action_count],
            config.head.embedding,
            action_count,
            init,
        )?;
        let b = gb.param_zeros(&format!("out.step{j}.b"), &[action_count])?;
        let z = gb.matmul(embedding, w)?;
        let z = gb.add_bias(z, b)?;
        gb.mark_output(&format!("logits_{j}"), z)?;
        logits.push(z);
        let p = gb.softmax(z)?;
        gb.mark_output(&format!("probs_{j}"), p)?;
        probs.push(p);
        let label = gb.input_rows(&label_name(j))?;
        let ce = gb.softmax_xent(z, label, None)?;
        gb.mark_output(&format!("step_loss_{j}"), ce)?;
        step_loss.push(ce);
        total = Some(match total {
            None => ce,
            Some(t) => gb.add(t, ce)?,
        });
    }
    let loss = gb.scale(total.expect("m >= 1"), 1.0 / m as f64);
    gb.mark_output("loss", loss)?;

    let (graph, store) = gb.finish();
    Ok(Seq2SeqModel { config: config.clone(), graph, store, logits, probs, step_loss, loss, current_input: current })
}

fn add_param(
    gb: &mut GraphBuilder,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    init: Init,
) -> Result<NodeId, TensorError> {
    match init {
        Init::Xavier => gb.param_xavier(name, shape, fan_in, fan_out),
        Init::Scaled(gain) => gb.param_scaled(name, shape, fan_in, fan_out, gain),
        Init::Zeros => gb.param_zeros(name, shape),
    }
}

/// Applies a head's layer list to a sequence of per-step inputs and reduces
/// it to one embedding node. Conv and pre-recurrent dense layers apply per
/// step with shared weights; an LSTM folds the steps into hidden states;
/// layers after the first LSTM consume the final hidden state.
fn build_sequence_head(
    gb: &mut GraphBuilder,
    prefix: &str,
    layers: &[LayerSpec],
    steps: &[NodeId],
    start: Feat,
    init: Init,
    fade_in: bool,
) -> Result<NodeId, ApproximatorError> {
    let mut per_step: Vec<NodeId> = steps.to_vec();
    let mut feat = start;
    let mut collapsed = false;

    for (li, layer) in layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv { filters, kernel, stride, padding } => {
                if collapsed {
                    return Err(ApproximatorError::BadHeadSpec(format!(
                        "{prefix}: conv after the sequence was collapsed"
                    )));
                }
                let Feat::Image(c, h, w) = feat else {
                    return Err(ApproximatorError::IncompatibleShapes(format!(
                        "{prefix}: conv layer over vector features"
                    )));
                };
                let name = format!("{prefix}.l{li}");
                let fan_in = c * kernel * kernel;
                let fan_out = filters * kernel * kernel;
                let k = add_param(gb, &format!("{name}.k"), &[filters, c, kernel, kernel], fan_in, fan_out, init)?;
                let b = gb.param_zeros(&format!("{name}.b"), &[filters])?;
                for node in per_step.iter_mut() {
                    let conv = gb.conv2d(*node, k, stride, padding)?;
                    let biased = gb.add_channel_bias(conv, b)?;
                    *node = gb.relu(biased);
                }
                let (oh, ow) = crate::tensor::conv2d_out_dims(h, w, kernel, kernel, stride, padding)
                    .expect("validated by conv2d");
                feat = Feat::Image(filters, oh, ow);
            }
            LayerSpec::Lstm { units } => {
                if collapsed {
                    return Err(ApproximatorError::BadHeadSpec(format!(
                        "{prefix}: second recurrent stage after collapse"
                    )));
                }
                let in_dim = flattened_width(gb, &mut per_step, &mut feat)?;
                let hs = lstm(gb, &format!("{prefix}.l{li}"), &per_step, in_dim, units)
                    .map_err(ApproximatorError::Tensor)?;
                per_step = hs;
                feat = Feat::Vector(units);
            }
            LayerSpec::Dense { units } => {
                let in_dim = flattened_width(gb, &mut per_step, &mut feat)?;
                let name = format!("{prefix}.l{li}");
                if per_step.len() > 1 && !infers_sequence_end(layers, li) {
                    // Pre-recurrent dense: shared projection applied per step.
                    let w = add_param(gb, &format!("{name}.w"), &[in_dim, units], in_dim, units, init)?;
                    let b = gb.param_zeros(&format!("{name}.b"), &[units])?;
                    for node in per_step.iter_mut() {
                        let z = gb.matmul(*node, w)?;
                        let z = gb.add_bias(z, b)?;
                        *node = gb.tanh(z);
                    }
                } else {
                    // Collapse the sequence: dense over the last step only.
                    let last = *per_step.last().expect("non-empty sequence");
                    let layer_init = if fade_in && infers_sequence_end(layers, li) { Init::Zeros } else { init };
                    let out = dense_with_init(gb, &name, last, in_dim, units, layer_init)?;
                    per_step = vec![out];
                    collapsed = true;
                }
                feat = Feat::Vector(units);
            }
        }
    }
    if per_step.len() != 1 {
        // Head never collapsed (e.g. no dense at the end); take last step.
        return Err(ApproximatorError::BadHeadSpec(format!("{prefix}: head did not end in a dense layer")));
    }
    Ok(per_step[0])
}

/// A dense layer whose init mode is selectable; tanh activation.
fn dense_with_init(
    gb: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    in_dim: usize,
    units: usize,
    init: Init,
) -> Result<NodeId, ApproximatorError> {
    let w = add_param(gb, &format!("{name}.w"), &[in_dim, units], in_dim, units, init)?;
    let b = gb.param_zeros(&format!("{name}.b"), &[units])?;
    let z = gb.matmul(x, w)?;
    let z = gb.add_bias(z, b)?;
    Ok(gb.tanh(z))
}

/// Whether the dense layer at `li` is the last layer (the embedding).
fn infers_sequence_end(layers: &[LayerSpec], li: usize) -> bool {
    li == layers.len() - 1
}

/// Flattens image features into vectors where a vector consumer follows.
fn flattened_width(
    gb: &mut GraphBuilder,
    per_step: &mut [NodeId],
    feat: &mut Feat,
) -> Result<usize, ApproximatorError> {
    match *feat {
        Feat::Vector(d) => Ok(d),
        Feat::Image(c, h, w) => {
            for node in per_step.iter_mut() {
                *node = gb.flatten(*node)?;
            }
            *feat = Feat::Vector(c * h * w);
            Ok(c * h * w)
        }
    }
}

// ── inference ───────────────────────────────────────────────────────

/// A borrowed batch of model inputs; each past step has `B` rows.
pub struct InputBatch {
    bindings: Vec<(String, Tensor)>,
}

impl InputBatch {
    pub fn bindings(&self) -> &[(String, Tensor)] {
        &self.bindings
    }
}

impl Seq2SeqModel {
    /// Assembles a batch of bindings from per-sample window views.
    /// `samples` yields (past_actions, past_observations, current).
    pub fn batch_inputs(
        &self,
        samples: &[(&[usize], &[&Tensor], &Tensor)],
    ) -> Result<InputBatch, ApproximatorError> {
        let n = self.config.input_len;
        let k = self.config.env.action_count();
        let b = samples.len();
        assert!(b > 0);
        for (acts, obs, _) in samples {
            if acts.len() != n || obs.len() != n {
                return Err(ApproximatorError::InputLength { expected: n, got: acts.len().min(obs.len()) });
            }
        }
        let obs_shape = self.config.env.obs_shape();
        let obs_len: usize = obs_shape.iter().product();
        let mut bindings = Vec::with_capacity(2 * n + 1);
        for i in 0..n {
            let mut data = Vec::with_capacity(b * obs_len);
            for (_, obs, _) in samples {
                data.extend_from_slice(obs[i].data());
            }
            let mut shape = obs_shape.clone();
            shape.insert(0, b);
            bindings.push((obs_name(i), Tensor::new(shape, data)?));

            let mut adata = vec![0.0; b * k];
            for (bi, (acts, _, _)) in samples.iter().enumerate() {
                adata[bi * k + acts[i]] = 1.0;
            }
            bindings.push((act_name(i), Tensor::new(vec![b, k], adata)?));
        }
        let mut cdata = Vec::with_capacity(b * obs_len);
        for (_, _, cur) in samples {
            cdata.extend_from_slice(cur.data());
        }
        let mut cshape = obs_shape.clone();
        cshape.insert(0, b);
        bindings.push(("current".into(), Tensor::new(cshape, cdata)?));
        Ok(InputBatch { bindings })
    }

    fn bound<'a>(&self, batch: &'a InputBatch, extra: &'a [(String, Tensor)]) -> Vec<(&'a str, &'a Tensor)> {
        batch
            .bindings
            .iter()
            .chain(extra.iter())
            .map(|(n, t)| (n.as_str(), t))
            .collect()
    }

    /// Batched per-step logits: `m` tensors of shape `[B, action_count]`.
    pub fn logits_batch(&self, batch: &InputBatch) -> Result<Vec<Tensor>, ApproximatorError> {
        let run = self.graph.forward_to(&self.store, &self.bound(batch, &[]), &self.logits)?;
        Ok(self.logits.iter().map(|&id| run.value(id).expect("computed").clone()).collect())
    }

    /// Sequence of `m` action distributions for a single sample.
    pub fn predict(
        &self,
        past_actions: &[usize],
        past_obs: &[&Tensor],
        current: &Tensor,
    ) -> Result<Vec<Vec<f64>>, ApproximatorError> {
        let batch = self.batch_inputs(&[(past_actions, past_obs, current)])?;
        let run = self.graph.forward_to(&self.store, &self.bound(&batch, &[]), &self.probs)?;
        Ok(self.probs.iter().map(|&id| run.value(id).expect("computed").data().to_vec()).collect())
    }

    /// Argmax action at one output step for a single sample.
    pub fn predicted_action(
        &self,
        past_actions: &[usize],
        past_obs: &[&Tensor],
        current: &Tensor,
        step: usize,
    ) -> Result<usize, ApproximatorError> {
        assert!(step < self.config.output_len);
        let batch = self.batch_inputs(&[(past_actions, past_obs, current)])?;
        let id = self.logits[step];
        let run = self.graph.forward_to(&self.store, &self.bound(&batch, &[]), &[id])?;
        Ok(crate::tensor::argmax_slice(run.value(id)?.data()))
    }

    /// Gradient of the step-`step` cross-entropy (against `label`) with
    /// respect to the current observation, for a single sample. Returns
    /// (input gradient, loss value). Gradients are taken only for s_t.
    pub fn input_gradient(
        &self,
        past_actions: &[usize],
        past_obs: &[&Tensor],
        current: &Tensor,
        step: usize,
        label: usize,
    ) -> Result<(Tensor, f64), ApproximatorError> {
        assert!(step < self.config.output_len);
        let batch = self.batch_inputs(&[(past_actions, past_obs, current)])?;
        let extra = vec![(label_name(step), Tensor::from_vec(vec![label as f64]))];
        let ce = self.step_loss[step];
        let mut run = self.graph.forward_to(&self.store, &self.bound(&batch, &extra), &[ce])?;
        let loss = run.value(ce)?.data()[0];
        self.graph.backward(&self.store, &mut run, ce)?;
        let grad = run
            .grad(self.current_input)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(current.shape()));
        let grad = grad.reshaped(current.shape().to_vec())?;
        Ok((grad, loss))
    }
}

// ── training ────────────────────────────────────────────────────────

/// Training knobs; learning rate and batch size default to the pipeline's
/// fixed values (plain SGD at 1e-4, bootstrapped batches of 32).
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl TrainOptions {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainOptions { epochs, seed, lr: 1e-4, batch_size: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Mean per-step eval accuracy after each epoch.
    pub accuracy_history: Vec<f64>,
}

/// Per-step and aggregate prediction accuracy on a split.
#[derive(Debug, Clone)]
pub struct AccuracyReport {
    pub per_step: Vec<f64>,
    pub mean: f64,
    /// Fraction of samples with every output step correct (secondary).
    pub exact_match: f64,
    pub samples: usize,
}

/// Accuracy over every window of the given split.
pub fn accuracy(
    model: &Seq2SeqModel,
    dataset: &Dataset,
    role: Role,
) -> Result<AccuracyReport, ApproximatorError> {
    let n = model.config.input_len;
    let m = model.config.output_len;
    let refs = windows(dataset, role, n, m)?;
    if refs.is_empty() {
        return Err(ApproximatorError::EmptyEval);
    }
    let mut per_step_hits = vec![0usize; m];
    let mut exact = 0usize;
    let kcount = model.config.env.action_count();
    for chunk in refs.chunks(32) {
        let resolved: Vec<_> = chunk.iter().map(|&w| resolve(dataset, w, n, m)).collect();
        let obs_refs: Vec<Vec<&Tensor>> =
            resolved.iter().map(|s| s.past_observations.iter().collect()).collect();
        let samples: Vec<(&[usize], &[&Tensor], &Tensor)> = resolved
            .iter()
            .zip(&obs_refs)
            .map(|(s, r)| (s.past_actions, r.as_slice(), s.current_observation))
            .collect();
        let batch = model.batch_inputs(&samples)?;
        let logits = model.logits_batch(&batch)?;
        for (bi, s) in resolved.iter().enumerate() {
            let mut all = true;
            for j in 0..m {
                let row = &logits[j].data()[bi * kcount..(bi + 1) * kcount];
                if crate::tensor::argmax_slice(row) == s.future_actions[j] {
                    per_step_hits[j] += 1;
                } else {
                    all = false;
                }
            }
            if all {
                exact += 1;
            }
        }
    }
    let total = refs.len();
    let per_step: Vec<f64> = per_step_hits.iter().map(|&h| h as f64 / total as f64).collect();
    let mean = per_step.iter().sum::<f64>() / m as f64;
    Ok(AccuracyReport { per_step, mean, exact_match: exact as f64 / total as f64, samples: total })
}

/// One epoch of bootstrapped minibatches: ceil(windows / batch) batches
/// sampled with replacement.
pub fn train_seq2seq(
    model: &mut Seq2SeqModel,
    dataset: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainResult, ApproximatorError> {
    let n = model.config.input_len;
    let m = model.config.output_len;
    let train_refs = windows(dataset, Role::Train, n, m)?;
    if train_refs.is_empty() {
        return Err(ApproximatorError::NoValidWindows);
    }
    let batches_per_epoch = train_refs.len().div_ceil(opts.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut history = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        for batch_idx in 0..batches_per_epoch {
            let picks: Vec<WindowRef> =
                (0..opts.batch_size).map(|_| train_refs[rng.gen_range(0..train_refs.len())]).collect();
            let loss = train_batch(model, dataset, &picks, opts.lr)?;
            if !loss.is_finite() {
                return Err(ApproximatorError::NonFiniteLoss { epoch, batch: batch_idx });
            }
        }
        let report = accuracy(model, dataset, Role::Eval)?;
        history.push(report.mean);
    }
    Ok(TrainResult { accuracy_history: history })
}

fn train_batch(
    model: &mut Seq2SeqModel,
    dataset: &Dataset,
    picks: &[WindowRef],
    lr: f64,
) -> Result<f64, ApproximatorError> {
    let n = model.config.input_len;
    let m = model.config.output_len;
    let b = picks.len();

    let resolved: Vec<_> = picks.iter().map(|&w| resolve(dataset, w, n, m)).collect();
    let obs_ref_vecs: Vec<Vec<&Tensor>> =
        resolved.iter().map(|s| s.past_observations.iter().collect()).collect();
    let samples: Vec<(&[usize], &[&Tensor], &Tensor)> = resolved
        .iter()
        .zip(&obs_ref_vecs)
        .map(|(s, refs)| (s.past_actions, refs.as_slice(), s.current_observation))
        .collect();
    let batch = model.batch_inputs(&samples)?;

    let mut extra = Vec::with_capacity(m);
    for j in 0..m {
        let labels: Vec<f64> = resolved.iter().map(|s| s.future_actions[j] as f64).collect();
        debug_assert_eq!(labels.len(), b);
        extra.push((label_name(j), Tensor::from_vec(labels)));
    }

    let bindings = model.bound(&batch, &extra);
    let mut run = model.graph.forward_to(&model.store, &bindings, &[model.loss])?;
    let loss = run.value(model.loss)?.data()[0];
    model.graph.backward(&model.store, &mut run, model.loss)?;
    let grads = collect_gradients(&model.graph, &run, &model.store);
    sgd_step(&mut model.store, &grads, lr)?;
    Ok(loss)
}

// ── input-length search ─────────────────────────────────────────────

/// Search grid: log-spaced candidates instead of every integer up to
/// n_max; n = 0 is degenerate (empty history heads) and excluded.
pub const LENGTH_SEARCH_GRID: [usize; 7] = [1, 2, 5, 10, 20, 35, 50];

#[derive(Debug, Clone)]
pub struct LengthSearchResult {
    /// (candidate n, early-training eval accuracy); None when the dataset
    /// has no valid window at that length.
    pub candidates: Vec<(usize, Option<f64>)>,
    pub chosen: usize,
    pub search_epochs: usize,
}

/// Algorithm-1-style input-length selection: each grid candidate trains a
/// fresh model for `ceil(0.01 * full_epochs)` epochs and the best
/// early-eval accuracy wins (first max on ties).
pub fn select_input_length(
    dataset: &Dataset,
    template: &Seq2SeqConfig,
    n_max: usize,
    full_epochs: usize,
    seed: u64,
) -> Result<LengthSearchResult, ApproximatorError> {
    let search_epochs = ((0.01 * full_epochs as f64).ceil() as usize).max(1);
    let mut candidates = Vec::new();
    for (ci, &cand) in LENGTH_SEARCH_GRID.iter().filter(|&&c| c <= n_max).enumerate() {
        let config = template.clone().with_input_len(cand);
        let acc = match build_model(&config, derive_seed(seed, ci as u64)) {
            Ok(mut model) => {
                let opts = TrainOptions::new(search_epochs, derive_seed(seed, 1000 + ci as u64));
                match train_seq2seq(&mut model, dataset, &opts) {
                    Ok(result) => result.accuracy_history.last().copied(),
                    Err(ApproximatorError::NoValidWindows) | Err(ApproximatorError::EmptyEval) => None,
                    Err(e) => return Err(e),
                }
            }
            Err(e) => return Err(e),
        };
        candidates.push((cand, acc));
    }
    let chosen = candidates
        .iter()
        .filter_map(|&(n, acc)| acc.map(|a| (n, a)))
        .fold(None::<(usize, f64)>, |best, (n, a)| match best {
            Some((_, ba)) if ba >= a => best,
            _ => Some((n, a)),
        });
    let Some((chosen, _)) = chosen else {
        return Err(ApproximatorError::NoValidWindows);
    };
    Ok(LengthSearchResult { candidates, chosen, search_epochs })
}
