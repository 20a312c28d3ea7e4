//! Agent network builders.
//!
//! Policy and training graphs are built with identical parameter naming so
//! they can share one store: the policy graph owns the store, the training
//! graph is built from the same construction sequence and keeps only the
//! tape.

use super::{stacked_shape, AgentConfig, Algorithm};
use crate::envs::EnvKind;
use crate::tensor::{
    conv2d_layer, dense, Activation, Graph, GraphBuilder, NodeId, ParameterStore, TensorError,
};

/// Shared feature trunk; returns (feature node, feature width).
fn trunk(gb: &mut GraphBuilder, env: EnvKind, k: usize, obs: NodeId) -> Result<(NodeId, usize), TensorError> {
    match env {
        EnvKind::CartPole => {
            let h = dense(gb, "t1", obs, 4 * k, 64, Activation::Relu)?;
            let h = dense(gb, "t2", h, 64, 64, Activation::Relu)?;
            Ok((h, 64))
        }
        EnvKind::MiniPong => {
            let c = conv2d_layer(gb, "c1", obs, k, 8, 3, 2, 1, Activation::Relu)?;
            let c = conv2d_layer(gb, "c2", c, 8, 16, 3, 2, 1, Activation::Relu)?;
            let f = gb.flatten(c)?;
            let h = dense(gb, "t1", f, 256, 128, Activation::Relu)?;
            Ok((h, 128))
        }
    }
}

/// Builds trunk and output heads; returns (action-output node, value node).
fn body(
    gb: &mut GraphBuilder,
    env: EnvKind,
    config: &AgentConfig,
) -> Result<(NodeId, Option<NodeId>), TensorError> {
    let obs = gb.input("obs", &stacked_shape(&env.obs_shape(), config.frame_stack))?;
    let (feat, width) = trunk(gb, env, config.frame_stack, obs)?;
    let out = dense(gb, "out", feat, width, env.action_count(), Activation::Linear)?;
    gb.mark_output("out", out)?;
    let value = if config.algorithm == Algorithm::A2c {
        let v = dense(gb, "value", feat, width, 1, Activation::Linear)?;
        gb.mark_output("value", v)?;
        Some(v)
    } else {
        None
    };
    Ok((out, value))
}

/// Greedy evaluation graph: observation in, action values (and for A2C the
/// state value) out.
pub fn policy_graph_for(
    env: EnvKind,
    config: &AgentConfig,
    seed: u64,
) -> Result<(Graph, ParameterStore), TensorError> {
    let mut gb = GraphBuilder::new(seed);
    body(&mut gb, env, config)?;
    Ok(gb.finish())
}

/// DQN training graph: MSE between the Q value of the taken action and an
/// externally computed TD target. Parameter names match the policy graph.
pub fn dqn_train_graph(env: EnvKind, config: &AgentConfig, seed: u64) -> Result<(Graph, NodeId), TensorError> {
    let mut gb = GraphBuilder::new(seed);
    let (q, _) = body(&mut gb, env, config)?;
    let onehot = gb.input("action_mask", &[env.action_count()])?;
    let target = gb.input_rows("target")?;
    let masked = gb.mul(q, onehot)?;
    let q_sel = gb.row_sum(masked)?;
    let diff = gb.sub(q_sel, target)?;
    let sq = gb.mul(diff, diff)?;
    let loss = gb.mean_all(sq);
    gb.mark_output("loss", loss)?;
    Ok((gb.finish_graph_only(), loss))
}

/// A2C training graph: advantage-weighted policy cross-entropy plus value
/// MSE minus an entropy bonus. Advantages and returns are computed outside
/// the graph, so no gradient flows through them.
pub fn a2c_train_graph(env: EnvKind, config: &AgentConfig, seed: u64) -> Result<(Graph, NodeId), TensorError> {
    let mut gb = GraphBuilder::new(seed);
    let (logits, value) = body(&mut gb, env, config)?;
    let value = value.expect("a2c config builds a value head");
    let actions = gb.input_rows("actions")?;
    let advantages = gb.input_rows("advantages")?;
    let returns = gb.input("returns", &[1])?;

    let policy_loss = gb.softmax_xent(logits, actions, Some(advantages))?;

    let vdiff = gb.sub(value, returns)?;
    let vsq = gb.mul(vdiff, vdiff)?;
    let value_loss = gb.mean_all(vsq);

    // Entropy bonus: mean over the batch of sum_k p log p (negative entropy).
    let probs = gb.softmax(logits)?;
    let safe = gb.add_scalar(probs, 1e-12);
    let logp = gb.log(safe);
    let plogp = gb.mul(probs, logp)?;
    let neg_ent_rows = gb.row_sum(plogp)?;
    let neg_ent = gb.mean_all(neg_ent_rows);

    let scaled_v = gb.scale(value_loss, config.a2c.value_coef);
    let scaled_e = gb.scale(neg_ent, config.a2c.entropy_coef);
    let partial = gb.add(policy_loss, scaled_v)?;
    let loss = gb.add(partial, scaled_e)?;
    gb.mark_output("loss", loss)?;
    Ok((gb.finish_graph_only(), loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn policy_and_train_graphs_share_parameter_names() {
        let cfg = AgentConfig::preset(EnvKind::CartPole, Algorithm::Dqn);
        let (policy, store) = policy_graph_for(EnvKind::CartPole, &cfg, 9).unwrap();
        let (train, loss) = dqn_train_graph(EnvKind::CartPole, &cfg, 9).unwrap();

        let obs = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.0, 0.0, 0.1, -0.1, 0.2]).unwrap();
        let out = policy.output_id("out").unwrap();
        let run = policy.forward_to(&store, &[("obs", &obs)], &[out]).unwrap();
        assert_eq!(run.value(out).unwrap().shape(), &[2, 2]);

        let mask = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let target = Tensor::from_vec(vec![0.7, -0.3]);
        let mut trun = train
            .forward_to(&store, &[("obs", &obs), ("action_mask", &mask), ("target", &target)], &[loss])
            .unwrap();
        train.backward(&store, &mut trun, loss).unwrap();
        let grads = crate::tensor::collect_gradients(&train, &trun, &store);
        assert!(grads.get("t1.w").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn minipong_policy_shapes_line_up() {
        let cfg = AgentConfig::preset(EnvKind::MiniPong, Algorithm::Dqn);
        let (policy, store) = policy_graph_for(EnvKind::MiniPong, &cfg, 3).unwrap();
        let obs = Tensor::zeros(&[1, 2, 16, 16]);
        let out = policy.output_id("out").unwrap();
        let run = policy.forward_to(&store, &[("obs", &obs)], &[out]).unwrap();
        assert_eq!(run.value(out).unwrap().shape(), &[1, 3]);
    }

    #[test]
    fn a2c_train_graph_differentiates() {
        let cfg = AgentConfig::preset(EnvKind::CartPole, Algorithm::A2c);
        let (_, store) = policy_graph_for(EnvKind::CartPole, &cfg, 4).unwrap();
        let (train, loss) = a2c_train_graph(EnvKind::CartPole, &cfg, 4).unwrap();
        let obs = Tensor::new(vec![3, 4], vec![0.1; 12]).unwrap();
        let actions = Tensor::from_vec(vec![0.0, 1.0, 0.0]);
        let adv = Tensor::from_vec(vec![0.5, -0.2, 1.0]);
        let ret = Tensor::new(vec![3, 1], vec![1.0, 0.5, 2.0]).unwrap();
        let mut run = train
            .forward_to(
                &store,
                &[("obs", &obs), ("actions", &actions), ("advantages", &adv), ("returns", &ret)],
                &[loss],
            )
            .unwrap();
        train.backward(&store, &mut run, loss).unwrap();
        let grads = crate::tensor::collect_gradients(&train, &run, &store);
        assert!(grads.get("value.w").unwrap().data().iter().any(|&v| v != 0.0));
        assert!(grads.get("out.w").unwrap().data().iter().any(|&v| v != 0.0));
    }
}
