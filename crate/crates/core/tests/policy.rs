//! Policy conditioning: after training with a policy token, changing the
//! policy changes the generated event-rate statistics.

use queueseq::events::extract_interarrival_times;
use queueseq::queuesim::{
    counterfactual_base, sample_dataset, PolicyParams, PolicyPrior, SystemConfig,
};
use queueseq::rng::SplitMix64;
use queueseq::seqmodel::{
    encode_trajectory, generate, train, GenerateOptions, ModelConfig, ModelParams, OptConfig,
};
use queueseq::stats::{ks_critical_two_sample, ks_statistic_two_sample};

#[test]
fn policy_token_shifts_generated_arrival_rates() {
    let base = counterfactual_base();
    let system = SystemConfig::Counterfactual {
        base: base.clone(),
        policy: None,
        policy_prior: Some(PolicyPrior::default()),
    };
    // Policies sampled from c in [-5,-1] u [5,8]: strongly different
    // arrival regimes for the model to separate.
    let data = sample_dataset(&system, None, 300, 80, 55_001).unwrap();
    let schema = system.schema();

    let mut cfg = ModelConfig::desk(&schema, 80);
    cfg.use_policy_token = true;
    let seqs: Vec<_> = data
        .iter()
        .map(|t| encode_trajectory(t, &schema, &cfg).unwrap())
        .collect();
    let opt = OptConfig {
        epochs: 10,
        warmup_epochs: 1,
        batch_size: 32,
        seed: 55_002,
        ..Default::default()
    };
    let report = train(ModelParams::init(cfg, 55_003).unwrap(), &seqs, &[], &opt).unwrap();

    let mean_gaps = |c: f64, stream: u64| -> Vec<f64> {
        (0..60u64)
            .map(|j| {
                let traj = generate(
                    &report.params,
                    &schema,
                    &schema.empty_state(),
                    &[],
                    Some(PolicyParams { c, n_servers: 5 }),
                    &GenerateOptions {
                        n_events: 80,
                        seed: SplitMix64::stream(stream, j).next_u64(),
                        temperature: 1.0,
                    },
                )
                .unwrap();
                let gaps = extract_interarrival_times(&traj, &schema, None);
                gaps.iter().sum::<f64>() / gaps.len().max(1) as f64
            })
            .collect()
    };
    let low = mean_gaps(-5.0, 55_004);
    let high = mean_gaps(8.0, 55_005);
    let d = ks_statistic_two_sample(&low, &high);
    let crit = ks_critical_two_sample(low.len(), high.len(), 0.01);
    assert!(
        d > crit,
        "policy change did not shift inter-arrival means: KS {d} <= {crit}"
    );
    // Direction check: larger c means more arrivals, so shorter gaps.
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(
        mean(&high) < mean(&low),
        "c = 8 should shorten inter-arrival times: {} vs {}",
        mean(&high),
        mean(&low)
    );
}
