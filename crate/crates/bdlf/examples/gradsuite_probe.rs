use bdlf::config::ExperimentConfig;
use bdlf::objective::{epoch_correlation_means, train, TrainState};
use bdlf::synthdata::make_dataset;

fn main() {
    let t0 = std::time::Instant::now();
    let cfg = ExperimentConfig::desk_default();
    let dataset = make_dataset(&cfg.synth).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    match train(&mut state, &dataset, &cfg.train) {
        Ok(out) => {
            let epochs = epoch_correlation_means(&out.metrics);
            for (e, cb, cd) in &epochs {
                println!("epoch {e:2}  c_base {cb:+.4}  c_detail {cd:+.4}  total {:.4}", 
                    out.metrics.iter().filter(|r| r.epoch == *e).map(|r| r.breakdown.total).sum::<f64>() / 8.0);
            }
            let first = epochs.first().unwrap();
            let last = epochs.last().unwrap();
            println!("\nfirst->last: c_base {:+.4} -> {:+.4}, c_detail {:+.4} -> {:+.4}, gap {:.4}",
                first.1, last.1, first.2, last.2, last.1 - last.2);
            println!("criterion: gap>=0.2: {}, cb up: {}, cd down: {}",
                last.1 - last.2 >= 0.2, last.1 > first.1, last.2 < first.2);
        }
        Err(e) => println!("TRAIN ERROR: {e}"),
    }
    println!("elapsed: {:?}", t0.elapsed());
}
