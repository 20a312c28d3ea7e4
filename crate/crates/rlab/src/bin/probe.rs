use rlab::agents::{train_agent, AgentConfig, Algorithm};
use rlab::approximator::{accuracy, build_model, train_seq2seq, LayerSpec, Seq2SeqConfig, TrainOptions};
use rlab::envs::EnvKind;
use rlab::trajectory::{collect_episodes, split_dataset, Role};

fn with_embedding(mut cfg: Seq2SeqConfig, e: usize) -> Seq2SeqConfig {
    let old = cfg.head.embedding;
    cfg.head.embedding = e;
    for h in cfg.head.obs_head.iter_mut().chain(&mut cfg.head.action_head).chain(&mut cfg.head.current_head) {
        if let LayerSpec::Dense { units } = h {
            if *units == old {
                *units = e;
            }
        }
    }
    cfg
}

fn main() {
    let mut acfg = AgentConfig::preset(EnvKind::CartPole, Algorithm::Dqn);
    acfg.train_steps = 12_000;
    let agent = train_agent(&acfg, EnvKind::CartPole, 1).unwrap();
    let mut dataset = collect_episodes(&agent, EnvKind::CartPole, 32, 77).unwrap();
    split_dataset(&mut dataset, 78).unwrap();

    for (m, e, epochs) in [(1usize, 256usize, 120usize), (10, 512, 120)] {
        let cfg = with_embedding(Seq2SeqConfig::cartpole_preset(m), e);
        let mut model = build_model(&cfg, 5).unwrap();
        let t = std::time::Instant::now();
        for round in 0..(epochs / 10) {
            train_seq2seq(&mut model, &dataset, &TrainOptions::new(10, 100 + round as u64)).unwrap();
            let rep = accuracy(&model, &dataset, Role::Eval).unwrap();
            println!(
                "m={m} E={e} epoch {}: mean {:.4} per-step {:?} [{:.0?}]",
                (round + 1) * 10,
                rep.mean,
                rep.per_step.iter().map(|a| (a * 100.0).round() / 100.0).collect::<Vec<_>>(),
                t.elapsed()
            );
        }
    }
}
