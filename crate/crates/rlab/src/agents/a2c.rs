//! Synchronous advantage actor-critic with short bootstrapped rollouts
//! across a bank of lockstepped environments.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    eval_seeds, evaluate_agent, net, stack_frames, stacked_shape, AgentConfig, AgentError, FrameWindow,
    Policy, TrainedAgent,
};
use crate::derive_seed;
use crate::envs::{EnvKind, Environment};
use crate::tensor::{
    adam_step, argmax_slice, clip_grad_norm, collect_gradients, Graph, ParameterStore, Tensor,
};

struct GreedyView<'a> {
    graph: &'a Graph,
    store: &'a ParameterStore,
    env: EnvKind,
    k: usize,
}

impl Policy for GreedyView<'_> {
    fn act(&self, window: &[Tensor]) -> Result<usize, AgentError> {
        if window.len() != self.k {
            return Err(AgentError::WrongWindow { expected: self.k, got: window.len() });
        }
        let input = stack_frames(window, &self.env.obs_shape(), self.k)?;
        let out = self.graph.output_id("out")?;
        let run = self.graph.forward_to(self.store, &[("obs", &input)], &[out])?;
        Ok(argmax_slice(run.value(out)?.data()))
    }

    fn frame_stack(&self) -> usize {
        self.k
    }

    fn action_count(&self) -> usize {
        self.env.action_count()
    }
}

/// One environment lane: the env, its frame window, and its reseed counter.
struct Lane {
    env: Box<dyn Environment>,
    window: FrameWindow,
    episode: u64,
}

pub fn train(config: &AgentConfig, env_kind: EnvKind, seed: u64) -> Result<TrainedAgent, AgentError> {
    let (policy_graph, mut store) = net::policy_graph_for(env_kind, config, derive_seed(seed, 1))?;
    let (train_graph, loss) = net::a2c_train_graph(env_kind, config, derive_seed(seed, 1))?;
    let out_id = policy_graph.output_id("out")?;
    let value_id = policy_graph.output_id("value")?;

    let k = config.frame_stack;
    let frame_shape = env_kind.obs_shape();
    let actions = env_kind.action_count();
    let h = &config.a2c;
    let n = h.n_envs;
    let rollout = h.rollout_len;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));

    let mut lanes: Vec<Lane> = (0..n)
        .map(|i| {
            let mut env = env_kind.build();
            let episode = 0;
            let obs = env.reset(derive_seed(seed, (i as u64 + 1) << 24 | episode));
            Lane { env, window: FrameWindow::new(k, obs), episode }
        })
        .collect();

    let mut curve: Vec<(u64, f64)> = Vec::new();
    let mut best: Option<(f64, ParameterStore)> = None;
    let mut env_steps: u64 = 0;
    let mut next_eval = config.eval_every;
    let evaluation_seeds = eval_seeds(seed, config.eval_episodes);
    let stacked_len: usize = stacked_shape(&frame_shape, k).iter().product();

    while env_steps < config.train_steps {
        // Rollout storage, time-major then lane-major.
        let mut states: Vec<f64> = Vec::with_capacity(rollout * n * stacked_len);
        let mut taken: Vec<f64> = Vec::with_capacity(rollout * n);
        let mut rewards = vec![0.0f64; rollout * n];
        let mut masks = vec![1.0f64; rollout * n];
        let mut values = vec![0.0f64; rollout * n];

        for t in 0..rollout {
            let batch = batch_obs(&lanes, &frame_shape, k)?;
            let run = policy_graph.forward_to(&store, &[("obs", &batch)], &[out_id, value_id])?;
            let logits = run.value(out_id)?;
            let vals = run.value(value_id)?;
            states.extend_from_slice(batch.data());

            for (li, lane) in lanes.iter_mut().enumerate() {
                let row = &logits.data()[li * actions..(li + 1) * actions];
                let action = sample_softmax(row, &mut rng);
                taken.push(action as f64);
                values[t * n + li] = vals.data()[li];

                let sr = lane.env.step(action)?;
                rewards[t * n + li] = sr.reward;
                if sr.done {
                    masks[t * n + li] = 0.0;
                    lane.episode += 1;
                    let obs = lane
                        .env
                        .reset(derive_seed(seed, ((li as u64 + 1) << 24) | lane.episode));
                    lane.window = FrameWindow::new(k, obs);
                } else {
                    lane.window.push(sr.observation);
                }
            }
            env_steps += n as u64;
        }

        // Bootstrap from the value of the post-rollout states.
        let batch = batch_obs(&lanes, &frame_shape, k)?;
        let run = policy_graph.forward_to(&store, &[("obs", &batch)], &[value_id])?;
        let mut ret: Vec<f64> = run.value(value_id)?.data().to_vec();

        let mut returns = vec![0.0f64; rollout * n];
        for t in (0..rollout).rev() {
            for li in 0..n {
                ret[li] = rewards[t * n + li] + config.gamma * masks[t * n + li] * ret[li];
                returns[t * n + li] = ret[li];
            }
        }
        let advantages: Vec<f64> = returns.iter().zip(&values).map(|(r, v)| r - v).collect();

        let mut shape = stacked_shape(&frame_shape, k);
        shape.insert(0, rollout * n);
        let states = Tensor::new(shape, states)?;
        let actions_t = Tensor::from_vec(taken);
        let adv_t = Tensor::from_vec(advantages);
        let ret_t = Tensor::new(vec![rollout * n, 1], returns)?;

        let mut run = train_graph.forward_to(
            &store,
            &[("obs", &states), ("actions", &actions_t), ("advantages", &adv_t), ("returns", &ret_t)],
            &[loss],
        )?;
        train_graph.backward(&store, &mut run, loss)?;
        let mut grads = collect_gradients(&train_graph, &run, &store);
        clip_grad_norm(&mut grads, h.grad_clip);
        adam_step(&mut store, &grads, config.learning_rate, 0.9, 0.999, 1e-8)?;

        if env_steps >= next_eval {
            next_eval += config.eval_every;
            let view = GreedyView { graph: &policy_graph, store: &store, env: env_kind, k };
            let stats = evaluate_agent(&view, env_kind, &evaluation_seeds)?;
            curve.push((env_steps, stats.mean));
            if best.as_ref().map_or(true, |(b, _)| stats.mean >= *b) {
                best = Some((stats.mean, store.clone()));
            }
        }
    }

    match best {
        Some((score, params)) if score >= config.competence_bar => {
            Ok(TrainedAgent::new(env_kind, config.clone(), policy_graph, params, curve))
        }
        _ => Err(AgentError::CompetenceBar {
            bar: config.competence_bar,
            best: best.map_or(f64::NEG_INFINITY, |(b, _)| b),
            steps: config.train_steps,
        }),
    }
}

fn batch_obs(lanes: &[Lane], frame_shape: &[usize], k: usize) -> Result<Tensor, AgentError> {
    let mut data = Vec::new();
    for lane in lanes {
        let stacked = stack_frames(lane.window.frames(), frame_shape, k)?;
        data.extend_from_slice(stacked.data());
    }
    let mut shape = stacked_shape(frame_shape, k);
    shape.insert(0, lanes.len());
    Ok(Tensor::new(shape, data)?)
}

fn sample_softmax(logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut u = rng.gen::<f64>() * sum;
    for (i, e) in exps.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i;
        }
    }
    logits.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sampling_is_seed_deterministic_and_covers_support() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let logits = [0.2, 0.8, -0.1];
        let a: Vec<usize> = (0..50).map(|_| sample_softmax(&logits, &mut r1)).collect();
        let b: Vec<usize> = (0..50).map(|_| sample_softmax(&logits, &mut r2)).collect();
        assert_eq!(a, b);
        for action in 0..3 {
            assert!(a.contains(&action), "action {action} never sampled");
        }
    }
}
