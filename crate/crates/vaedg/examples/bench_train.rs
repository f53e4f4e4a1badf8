use std::time::Instant;
use vaedg::config::ExperimentConfig;
use vaedg::harness::{make_split, synthetic_domains_for, train};

fn main() {
    let mut config = ExperimentConfig::desk();
    config.steps = 500;
    config.eval_every = 100;
    config.num_domains = 4;
    config.per_domain_count = 67; // ~200 examples in the 3-source train pool at 0.8
    config.target_domain = 0;
    let datasets = synthetic_domains_for(&config).unwrap();
    let split = make_split(&datasets, 0, config.val_fraction, config.seed).unwrap();
    let t = Instant::now();
    let record = train(&config, &datasets, &split, None).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!("500 steps in {dt:.1}s ({:.1} steps/s)", 500.0 / dt);
    for e in &record.evals {
        println!(
            "step {:>5}: recon {:>9.3} kl {:>8.4} cls {:>7.4} total {:>10.2} val {:.3} target {:.3}",
            e.step, e.loss.recon, e.loss.kl, e.loss.cls, e.loss.total, e.val_accuracy, e.target_accuracy
        );
    }
    let first = &record.evals[0];
    let last = record.evals.last().unwrap();
    println!("recon ratio {:.3}  final val acc {:.3}", last.loss.recon / first.loss.recon, last.val_accuracy);
}
