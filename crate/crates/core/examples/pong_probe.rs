use wsa_core::env::{Env, GameId, Variation};

fn main() {
    let mut wins = 0;
    let mut total = 0.0;
    let mut lens = 0u32;
    for ep in 0..30u64 {
        let mut env = Env::new(GameId::MiniPong);
        env.reset(1000 + ep, Variation::default()).unwrap();
        let mut ret = 0.0;
        loop {
            let r = env.step(env.expert_action()).unwrap();
            ret += r.reward;
            if r.done { break; }
        }
        lens += env.steps();
        total += ret;
        if ret > 0.0 { wins += 1; }
        if ep < 8 { println!("ep {ep}: return {ret:+.0} in {} steps", env.steps()); }
    }
    println!("expert mean return {:.2}, wins {wins}/30, mean len {}", total / 30.0, lens / 30);
}
