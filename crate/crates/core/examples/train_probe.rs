use queueseq::eval::{model_losses, valid_fraction};
use queueseq::events::extract_interarrival_times;
use queueseq::queuesim::{sample_dataset, MmnConfig, SystemConfig};
use queueseq::rng::SplitMix64;
use queueseq::seqmodel::{
    encode_trajectory, generate, train, GenerateOptions, ModelConfig, ModelParams, OptConfig,
};
use queueseq::stats::{ks_critical, ks_statistic_cdf};
use std::time::Instant;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(25);
    let sim = MmnConfig::mm1(0.5, 1.0);
    let schema = sim.schema();
    let system = SystemConfig::Mmn(sim);
    let t0 = Instant::now();
    let train_data = sample_dataset(&system, None, 2000, 200, 70_001).unwrap();
    let test_data = sample_dataset(&system, None, 200, 200, 70_002).unwrap();
    let cfg = ModelConfig::desk(&schema, 200);
    let enc = |d: &[queueseq::events::Trajectory]| -> Vec<_> {
        d.iter()
            .map(|t| encode_trajectory(t, &schema, &cfg).unwrap())
            .collect()
    };
    let train_seqs = enc(&train_data);
    let test_seqs = enc(&test_data);
    eprintln!("data ready in {:?}", t0.elapsed());

    let opt = OptConfig {
        epochs,
        warmup_epochs: 3,
        seed: 70_003,
        ..Default::default()
    };
    let init = ModelParams::init(cfg.clone(), 70_004).unwrap();
    let t1 = Instant::now();
    let report = train(init, &train_seqs, &test_seqs[..50], &opt).unwrap();
    eprintln!("trained {epochs} epochs in {:?}", t1.elapsed());

    let losses = model_losses(&report.params, &test_seqs);
    eprintln!(
        "test: event {:.4} (<= 0.5275?) time_sq {:.4} (1.20..1.466?) nll {:.4} se {:.4}",
        losses.event_loss, losses.time_loss, losses.time_nll, losses.event_se
    );
    let t2 = Instant::now();
    let gen: Vec<_> = (0..100)
        .map(|j| {
            generate(
                &report.params,
                &schema,
                &schema.empty_state(),
                &[],
                None,
                &GenerateOptions {
                    n_events: 200,
                    seed: SplitMix64::stream(70_005, j).next_u64(),
                    temperature: 1.0,
                },
            )
            .unwrap()
        })
        .collect();
    eprintln!("generated 100x200 in {:?}", t2.elapsed());
    eprintln!("valid fraction: {}", valid_fraction(&gen, &schema));
    let gaps: Vec<f64> = gen
        .iter()
        .flat_map(|t| extract_interarrival_times(t, &schema, None))
        .collect();
    let d = ks_statistic_cdf(&gaps, |x| 1.0 - (-0.5 * x).exp());
    eprintln!(
        "interarrival KS {d:.5} vs crit {:.5} (n={})",
        ks_critical(gaps.len(), 0.01),
        gaps.len()
    );
}
