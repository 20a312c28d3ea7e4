use rlab::agents::{train_agent, AgentConfig, Algorithm};
use rlab::approximator::{accuracy, build_model, train_seq2seq, Seq2SeqConfig, TrainOptions};
use rlab::envs::EnvKind;
use rlab::trajectory::{collect_episodes, split_dataset, Role};

fn main() {
    let t0 = std::time::Instant::now();
    let acfg = AgentConfig::preset(EnvKind::MiniPong, Algorithm::Dqn);
    let agent = match train_agent(&acfg, EnvKind::MiniPong, 1) {
        Ok(a) => a,
        Err(e) => {
            println!("minipong agent FAILED: {e}");
            return;
        }
    };
    let last = agent.training_curve().last().unwrap();
    println!("minipong dqn trained: best eval {:.1} [{:.0?}]", last.1, t0.elapsed());

    let mut dataset = collect_episodes(&agent, EnvKind::MiniPong, 24, 177).unwrap();
    split_dataset(&mut dataset, 178).unwrap();
    let steps: usize = dataset.episodes.iter().map(|e| e.len()).sum();
    println!("dataset: {} episodes, {steps} steps", dataset.episodes.len());

    let cfg = Seq2SeqConfig::minipong_preset(1);
    let mut model = build_model(&cfg, 5).unwrap();
    let t = std::time::Instant::now();
    for round in 0..8 {
        train_seq2seq(&mut model, &dataset, &TrainOptions::new(5, 300 + round)).unwrap();
        let rep = accuracy(&model, &dataset, Role::Eval).unwrap();
        println!("minipong m=1 epoch {}: mean {:.4} [{:.0?}]", (round + 1) * 5, rep.mean, t.elapsed());
    }
}
