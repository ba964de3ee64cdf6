//! End-to-end benchmark run: generate the G1 preset (or a seed variant),
//! train the adapter over several training seeds, and print held-out
//! baseline vs adapted Recall@1.
//!
//! Usage: g1_oracle [gen_seed] [d] [w_re]

use std::time::Instant;

use cvadapt::adapter::adapt;
use cvadapt::inspect::{delta_sims, median};
use cvadapt::retrieval::evaluate;
use cvadapt::synthbench::{g1, generate};
use cvadapt::trainer::{train_adapter, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gen_seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(23);
    let d: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(256);
    let w_re: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);

    let mut synth_cfg = g1();
    synth_cfg.seed = gen_seed;
    let started = Instant::now();
    let data = generate(&synth_cfg).expect("generate");
    let eval_queries = data.eval_queries.as_ref().expect("eval split");
    let eval_gt = data.eval_gt.as_ref().expect("eval gt");

    let baseline = evaluate(eval_queries, &data.references, eval_gt, &[1, 5], 5).expect("eval");
    println!(
        "gen_seed={gen_seed} d={d} w_re={w_re}: baseline R@1 = {:.4}  (gen+eval {:.2}s)",
        baseline.recall[&1],
        started.elapsed().as_secs_f64()
    );

    let mut gains = Vec::new();
    for train_seed in 1..=5u64 {
        let t0 = Instant::now();
        let cfg = TrainConfig {
            iterations: 60,
            queries_per_iter: 700,
            w_re,
            seed: train_seed,
            d: Some(d),
            ..TrainConfig::default()
        };
        let out = train_adapter(&cfg, &data.queries, &data.references).expect("train");
        let zq = adapt(&out.adapter, eval_queries).expect("adapt queries");
        let zr = adapt(&out.adapter, &data.references).expect("adapt refs");
        let report = evaluate(&zq, &zr, eval_gt, &[1, 5], 5).expect("eval");
        let r1 = report.recall[&1];
        let deltas: Vec<f64> = delta_sims(&report)
            .expect("delta sims")
            .into_iter()
            .map(|r| r.delta_sim)
            .collect();
        let gain = (r1 - baseline.recall[&1]) * 100.0;
        gains.push(gain);
        println!(
            "  train_seed={train_seed}: adapted R@1 = {:.4}  gain = {gain:+.1} pts  dsim_median = {:+.4}  ({:.1}s)",
            r1,
            median(&deltas),
            t0.elapsed().as_secs_f64()
        );
    }
    gains.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "median gain = {:+.1} pts  total {:.1}s",
        gains[2],
        started.elapsed().as_secs_f64()
    );
}
