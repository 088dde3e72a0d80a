//! Sweep the pruning-vs-random comparison over seeds and toy sizes.
//!
//! `cargo run --release --example prune_probe -- <reps> [steps d_model d_ff experts layers kept lr profile eval first_seed]`

use std::time::Instant;

use moe_lens::experiment::{pruning_vs_random, ToySetup, KEPT_TARGET};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() {
    let reps: u64 = arg(1, 1);
    let mut setup = ToySetup::default();
    setup.train.steps = arg(2, setup.train.steps);
    setup.model.d_model = arg(3, setup.model.d_model);
    setup.model.d_ff = arg(4, setup.model.d_ff);
    setup.n_experts = arg(5, setup.n_experts);
    setup.model.n_layers = arg(6, setup.model.n_layers);
    let kept: f64 = arg(7, KEPT_TARGET.0);
    setup.train.learning_rate = arg(8, setup.train.learning_rate);
    setup.profile_samples = arg(9, setup.profile_samples);
    setup.eval_samples = arg(10, setup.eval_samples);
    let first: u64 = arg(11, 0);
    let mut wins = 0;
    for seed in first..first + reps {
        let t = Instant::now();
        let o = pruning_vs_random(&setup, seed, (kept, KEPT_TARGET.1, KEPT_TARGET.2), &[1, 2, 3]).unwrap();
        let all = o.languages.iter().all(|l| l.experts_beat_random());
        wins += all as usize;
        println!("seed {seed} loss {:.3} ({:.1}s) {}", o.final_loss, t.elapsed().as_secs_f64(), if all { "PASS" } else { "fail" });
        for l in &o.languages {
            println!(
                "  {} kept {:.3} origin {:.3} experts {:.3} random-mean {:.3}",
                l.tag, l.kept_proportion, l.origin_ppl, l.expert_ppl, l.random_mean()
            );
        }
    }
    println!("wins {wins}/{reps}");
}
