use uavlas_core::ddpg::{run_episode, AgentConfig, DdpgAgent, QuadraticBandit};

fn bandit_cfg() -> AgentConfig {
    AgentConfig {
        discount: 0.0,
        lr_actor: 3e-3,
        lr_critic: 3e-3,
        hidden_width: 64,
        hidden_layers: 2,
        noise_decay_steps: 2000,
        ..AgentConfig::default()
    }
}

#[test]
fn bandit_optimum_recovered_and_critic_loss_falls() {
    for seed in 0..5 {
        let mut agent = DdpgAgent::new(bandit_cfg(), 1, 1, seed).unwrap();
        let mut env = QuadraticBandit::new(0.3, 1);
        let mut losses = Vec::new();
        for _ in 0..2000 {
            let s = run_episode(&mut agent, &mut env, true).unwrap();
            losses.extend(s.diagnostics.iter().map(|d| d.critic_loss));
        }
        let a = agent.greedy(&[1.0]).unwrap()[0];
        let head = losses[..100].iter().sum::<f64>() / 100.0;
        let tail = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
        assert!((a - 0.3).abs() < 0.05, "seed {seed}: {a}");
        assert!(head >= 10.0 * tail, "seed {seed}: {head} vs {tail}");
    }
}

#[test]
fn identical_seeds_give_identical_diagnostics() {
    let run = || {
        let mut agent = DdpgAgent::new(AgentConfig { warmup_steps: 64, hidden_width: 16, ..bandit_cfg() }, 1, 1, 11).unwrap();
        let mut env = QuadraticBandit::new(0.3, 10);
        (0..30).flat_map(|_| run_episode(&mut agent, &mut env, true).unwrap().diagnostics).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}
