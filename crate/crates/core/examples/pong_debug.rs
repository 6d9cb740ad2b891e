use wsa_core::env::{Env, GameId, Variation};

fn main() {
    let mut env = Env::new(GameId::MiniPong);
    env.reset(1001, Variation::default()).unwrap();
    for t in 0..220 {
        let a = env.expert_action();
        let r = env.step(a).unwrap();
        let i = &r.info;
        if t % 4 == 0 || r.reward != 0.0 {
            println!(
                "t={t:3} a={a} ball=({:5.1},{:5.1}) player_y={:4.1} r={:+.0}",
                i["ball_x"] * 23.0, i["ball_y"] * 23.0, i["player_y"] * 23.0, r.reward
            );
        }
        if r.done { break; }
    }
}
