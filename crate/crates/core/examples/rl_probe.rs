// temporary probe: full A2C with strong entropy regularization
use viper_core::envs::EnvId;
use viper_core::rewards::RewardSpec;
use viper_core::rl::{collect, evaluate, update, AgentConfig, Collector, PolicyParams, RewardSource};
use viper_core::optim::OptimizerConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("oracle");
    let ent: f32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let mut cfg = AgentConfig::for_actions(5);
    cfg.learning_rate = 3e-4;
    cfg.entropy_coef = ent;
    let mut policy = PolicyParams::init(&cfg, 0);
    let spec = RewardSpec { beta: 0.0, k: 1, ..Default::default() };
    let mut col = Collector::new(EnvId::Reach, 0, 8, spec, 4, 0).unwrap();
    let mut source = if mode == "oracle" { RewardSource::OracleRelabel } else { RewardSource::GroundTruth };
    let opt = OptimizerConfig { epsilon: 1e-5, ..Default::default() };
    let mut steps = 0u64;
    let mut it = 0;
    while steps < 150_000 {
        let mut buf = collect(&mut col, &policy, &mut source, 32).unwrap();
        buf.compute_advantages(cfg.discount, cfg.gae_lambda).unwrap();
        let stats = update(&mut policy, &buf, &opt).unwrap();
        steps += buf.len() as u64;
        if it % 60 == 0 {
            let ev = evaluate(&policy, EnvId::Reach, 0, 20, 123).unwrap();
            println!("steps {steps}: eval {:.2} r {:.3} H {:.3}", ev.mean, stats.mean_reward, stats.entropy);
            if ev.mean >= 0.95 { break; }
        }
        it += 1;
    }
    let ev = evaluate(&policy, EnvId::Reach, 0, 50, 321).unwrap();
    println!("final {mode} ent={ent}: steps {steps} eval mean {:.3}", ev.mean);
}
