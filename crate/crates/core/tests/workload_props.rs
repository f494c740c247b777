use proptest::prelude::*;
use qlb_core::workload::{generate_arrivals, ArrivalProcess, WorkloadConfig};

fn cfg(seed: u64, horizon: f64, arrival: ArrivalProcess) -> WorkloadConfig {
    WorkloadConfig {
        horizon,
        arrival,
        seed,
        secured_fraction: 0.3,
        ..WorkloadConfig::default()
    }
}

fn arrival_strategy() -> impl Strategy<Value = ArrivalProcess> {
    prop_oneof![
        (0.1f64..20.0).prop_map(|rate| ArrivalProcess::Poisson { rate }),
        (0.05f64..3.0).prop_map(|interval| ArrivalProcess::Deterministic { interval }),
        (0.1f64..3.0, 1.0f64..20.0, 0.5f64..5.0, 0.5f64..5.0).prop_map(|(b, r, bl, gl)| ArrivalProcess::Bursty {
            base_rate: b,
            burst_rate: r,
            burst_len: bl,
            gap_len: gl,
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn same_seed_same_sequence(seed in any::<u32>(), horizon in 1.0f64..200.0, arrival in arrival_strategy()) {
        let c = cfg(seed as u64, horizon, arrival);
        prop_assert_eq!(generate_arrivals(&c).unwrap(), generate_arrivals(&c).unwrap());
    }

    #[test]
    fn arrivals_sorted_below_horizon_with_dense_ids(seed in any::<u32>(), horizon in 1.0f64..200.0, arrival in arrival_strategy()) {
        let reqs = generate_arrivals(&cfg(seed as u64, horizon, arrival)).unwrap();
        for (i, r) in reqs.iter().enumerate() {
            prop_assert_eq!(r.id, i as u64);
            prop_assert!(r.arrival_time >= 0.0 && r.arrival_time < horizon);
            prop_assert!(r.service_demand > 0.0);
        }
        prop_assert!(reqs.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
    }

    #[test]
    fn longer_horizon_extends_the_same_prefix(seed in any::<u32>(), horizon in 1.0f64..100.0, extra in 0.0f64..100.0, arrival in arrival_strategy()) {
        let short = generate_arrivals(&cfg(seed as u64, horizon, arrival)).unwrap();
        let long = generate_arrivals(&cfg(seed as u64, horizon + extra, arrival)).unwrap();
        prop_assert!(long.len() >= short.len());
        prop_assert_eq!(&long[..short.len()], &short[..]);
    }

    #[test]
    fn fields_respect_config(seed in any::<u32>(), pool in 1u32..50, paths in 1usize..10) {
        let mut c = cfg(seed as u64, 50.0, ArrivalProcess::Poisson { rate: 5.0 });
        c.source_pool = pool;
        c.url_paths = qlb_core::workload::default_url_paths(paths);
        for r in generate_arrivals(&c).unwrap() {
            prop_assert!(r.source_ip.wrapping_sub(0x0A00_0000) < pool);
            prop_assert!(c.url_paths.contains(&r.url_path));
            prop_assert_eq!(r.priority, c.priorities[r.rtype.index()]);
        }
    }
}

#[test]
fn different_seeds_differ() {
    let a = generate_arrivals(&cfg(1, 100.0, ArrivalProcess::Poisson { rate: 5.0 })).unwrap();
    let b = generate_arrivals(&cfg(2, 100.0, ArrivalProcess::Poisson { rate: 5.0 })).unwrap();
    assert_ne!(a, b);
}

#[test]
fn secured_fraction_extremes() {
    let mut c = cfg(3, 100.0, ArrivalProcess::Poisson { rate: 5.0 });
    c.secured_fraction = 0.0;
    assert!(generate_arrivals(&c).unwrap().iter().all(|r| !r.secured));
    c.secured_fraction = 1.0;
    assert!(generate_arrivals(&c).unwrap().iter().all(|r| r.secured));
}
