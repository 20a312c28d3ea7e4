//! DQN and Double-DQN training.
//!
//! Online/target network pair over a shared graph layout; the target store
//! is a value copy synced every `target_sync` updates. Double-DQN decouples
//! action selection (online net) from evaluation (target net) in the TD
//! target; everything else is identical.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    eval_seeds, evaluate_agent, net, stack_frames, AgentConfig, AgentError, FrameWindow, Policy, Replay,
    TrainedAgent,
};
use crate::derive_seed;
use crate::envs::EnvKind;
use crate::tensor::{adam_step, argmax_slice, collect_gradients, Graph, ParameterStore, Tensor};

/// Borrowed greedy view used for evaluation checkpoints during training.
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

pub fn train(
    config: &AgentConfig,
    env_kind: EnvKind,
    seed: u64,
    double: bool,
) -> Result<TrainedAgent, AgentError> {
    let (policy_graph, mut store) = net::policy_graph_for(env_kind, config, derive_seed(seed, 1))?;
    let (train_graph, loss) = net::dqn_train_graph(env_kind, config, derive_seed(seed, 1))?;
    let mut target_store = store.clone();

    let out_id = policy_graph.output_id("out")?;
    let actions = env_kind.action_count();
    let k = config.frame_stack;
    let frame_shape = env_kind.obs_shape();
    let h = &config.dqn;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut replay = Replay::new(h.replay_capacity, k, &frame_shape);
    let mut env = env_kind.build();
    let mut episode: u64 = 0;
    let obs = env.reset(derive_seed(seed, 1_000_000 + episode));
    replay.begin_episode(&obs);
    let mut window = FrameWindow::new(k, obs);

    let mut curve: Vec<(u64, f64)> = Vec::new();
    let mut best: Option<(f64, ParameterStore)> = None;
    let mut updates: u64 = 0;
    let decay_steps = (config.train_steps as f64 * h.eps_decay_fraction).max(1.0);
    let evaluation_seeds = eval_seeds(seed, config.eval_episodes);

    for step in 0..config.train_steps {
        let eps = h.eps_start + (h.eps_end - h.eps_start) * (step as f64 / decay_steps).min(1.0);
        let action = if rng.gen::<f64>() < eps {
            rng.gen_range(0..actions)
        } else {
            let input = stack_frames(window.frames(), &frame_shape, k)?;
            let run = policy_graph.forward_to(&store, &[("obs", &input)], &[out_id])?;
            argmax_slice(run.value(out_id)?.data())
        };

        let sr = env.step(action)?;
        replay.push(action, sr.reward, &sr.observation, sr.done);
        if sr.done {
            episode += 1;
            let obs = env.reset(derive_seed(seed, 1_000_000 + episode));
            replay.begin_episode(&obs);
            window = FrameWindow::new(k, obs);
        } else {
            window.push(sr.observation);
        }

        if replay.len() >= h.learn_start && step % h.train_every == 0 {
            let batch = replay.sample(&mut rng, h.batch_size);

            // TD targets from the frozen target network.
            let next_run = target_store_q(&policy_graph, &target_store, &batch.next_states, out_id)?;
            let online_next = if double {
                Some(policy_graph.forward_to(&store, &[("obs", &batch.next_states)], &[out_id])?)
            } else {
                None
            };
            let mut targets = Vec::with_capacity(h.batch_size);
            for bi in 0..h.batch_size {
                let row = &next_run.data()[bi * actions..(bi + 1) * actions];
                let future = if batch.dones[bi] {
                    0.0
                } else if let Some(online) = &online_next {
                    let orow = &online.value(out_id)?.data()[bi * actions..(bi + 1) * actions];
                    row[argmax_slice(orow)]
                } else {
                    row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
                };
                targets.push(batch.rewards[bi] + config.gamma * future);
            }

            let mut mask = vec![0.0; h.batch_size * actions];
            for (bi, &a) in batch.actions.iter().enumerate() {
                mask[bi * actions + a] = 1.0;
            }
            let mask = Tensor::new(vec![h.batch_size, actions], mask)?;
            let target = Tensor::from_vec(targets);

            let mut run = train_graph.forward_to(
                &store,
                &[("obs", &batch.states), ("action_mask", &mask), ("target", &target)],
                &[loss],
            )?;
            train_graph.backward(&store, &mut run, loss)?;
            let grads = collect_gradients(&train_graph, &run, &store);
            adam_step(&mut store, &grads, config.learning_rate, 0.9, 0.999, 1e-8)?;
            updates += 1;
            if updates % h.target_sync == 0 {
                target_store.copy_values_from(&store)?;
            }
        }

        if (step + 1) % config.eval_every == 0 && replay.len() >= h.learn_start {
            let view = GreedyView { graph: &policy_graph, store: &store, env: env_kind, k };
            let stats = evaluate_agent(&view, env_kind, &evaluation_seeds)?;
            curve.push((step + 1, stats.mean));
            // Keep the latest checkpoint among the best: training runs the
            // whole budget so the frozen policy is converged, not merely
            // the first one over the bar.
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

fn target_store_q(
    graph: &Graph,
    target_store: &ParameterStore,
    next_states: &Tensor,
    out_id: crate::tensor::NodeId,
) -> Result<Tensor, AgentError> {
    let run = graph.forward_to(target_store, &[("obs", next_states)], &[out_id])?;
    Ok(run.value(out_id)?.clone())
}
