//! Trains on warped copies of a phantom and registers a held-out pair,
//! printing ABD and weighted Dice before and after.
//!
//! ```text
//! cargo run --release -p streamreg --example recovery -- [epochs] [pool]
//! ```

use std::time::Instant;

use streamreg::pipeline::{evaluate, register, Matcher, RegisterOptions};
use streamreg::synth::{gen_phantom, make_pair, PhantomConfig, WarpFamily};
use streamreg::{Trainer, TrainConfig};

fn main() -> streamreg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: u64 = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(100);
    let pool_size: u64 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(8);
    let extra: Vec<String> = args.iter().skip(3).cloned().collect();

    let phantom = gen_phantom(&PhantomConfig::default())?;
    let mut pool = vec![phantom.clone()];
    for s in 1..pool_size {
        pool.push(make_pair(&phantom, 5.0, 1000 + s, WarpFamily::Tps)?.0);
    }
    let mut config = TrainConfig::from_toml_with_overrides(
        "[model]\nkeypoints = 32\nhidden = 32\nlayers = 2\n[train]\npatch_streamlines = 300\n",
        &extra,
    )?;
    config.train.epochs = epochs;
    let mut trainer = Trainer::new(config.clone(), pool)?;
    let start = Instant::now();
    while !trainer.is_finished() {
        let s = trainer.run_epoch(|_| {})?;
        if s.epoch % 10 == 0 || trainer.is_finished() {
            println!("epoch {} loss {:.4} failed {} t={:.1}s", s.epoch, s.mean_loss, s.failed, start.elapsed().as_secs_f64());
        }
    }
    for lambda in [config.inference.lambda] {
        let mut ratios = Vec::new();
        let mut wins = 0;
        let mut all_up = 0;
        for seed in 0..10u64 {
            let (moving, fixed, _) = make_pair(&phantom, 5.0, seed, WarpFamily::Tps)?;
            let pre = evaluate(&moving, &fixed, 2.0)?;
            let opts = RegisterOptions { lambda, ..RegisterOptions::default() };
            let net = register(&moving, &fixed, Some(trainer.params()), &opts)?;
            let post = evaluate(&net.moved, &fixed, 2.0)?;
            let nn = register(&moving, &fixed, None, &RegisterOptions { matcher: Matcher::NearestNeighbor, nn_keypoints: 32, ..opts.clone() })?;
            let nnr = evaluate(&nn.moved, &fixed, 2.0)?;
            let up = pre.bundles.iter().zip(&post.bundles).all(|(a, b)| b.wdice > a.wdice);
            ratios.push(post.mean_abd() / pre.mean_abd());
            wins += (post.mean_abd() <= nnr.mean_abd()) as usize;
            all_up += up as usize;
            println!("lambda {lambda} seed {seed}: pre {:.3} net {:.3} ({:.2}x) nn {:.3} wdice-up {up}", pre.mean_abd(), post.mean_abd(), ratios.last().unwrap(), nnr.mean_abd());
        }
        println!("lambda {lambda}: max ratio {:.3} wins {wins} all-up {all_up}", ratios.iter().cloned().fold(0.0, f64::max));
    }
    Ok(())
}
