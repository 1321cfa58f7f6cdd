use chrono::NaiveDate;
use metaorder_core::assignment::{assign_day, assign_trades, Assignment, Participation, ParticipationProfile};
use metaorder_core::lmf::{acf, run_lengths, AcfVariant};
use metaorder_core::market_data::{compute_daily_stats, Sign, TradeEvent};
use metaorder_core::metaorder::build_metaorders;
use metaorder_core::rng::substream;
use metaorder_core::simulator::{simulate, SimConfig, TruncatedDiscretePowerLaw};
use proptest::prelude::*;

fn trades_from(rows: &[(bool, u32)]) -> Vec<TradeEvent> {
    let date = NaiveDate::from_ymd_opt(2023, 2, 1).unwrap();
    let open = date.and_hms_opt(9, 0, 0).unwrap();
    let mut mid = 100.0;
    rows.iter()
        .enumerate()
        .map(|(i, &(buy, vol))| {
            let before = mid;
            mid += if buy { 0.5 } else { -0.5 };
            TradeEvent {
                mic: "XTST".into(),
                ticker: "TST".into(),
                listing_id: 1,
                date,
                timestamp: open + chrono::Duration::seconds(i as i64),
                seq_no: i as u64,
                sign: if buy { Sign::Buy } else { Sign::Sell },
                price: before,
                volume: f64::from(vol),
                mid_before: before,
                mid_after: mid,
                mid_after_delayed: None,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metaorders_conserve_volume(
        rows in prop::collection::vec((any::<bool>(), 1u32..5000), 1..300),
        n in 1usize..12,
        seed in any::<u64>(),
    ) {
        let trades = trades_from(&rows);
        let stats = compute_daily_stats(&trades).unwrap();
        let (_, a) = assign_day(&trades, n, &Participation::Homogeneous, seed, "TST", trades[0].date).unwrap();
        let day = build_metaorders(&trades, &a, &stats).unwrap();
        let q: f64 = day.metaorders.iter().map(|m| m.total_volume).sum();
        prop_assert_eq!(q + day.filtered_volume, stats.daily_volume);
        prop_assert!(day.metaorders.iter().all(|m| m.n_children >= 2));
        let children: usize = day.metaorders.iter().map(|m| m.n_children).sum();
        prop_assert_eq!(children + day.filtered_runs, trades.len());
    }

    #[test]
    fn assignment_is_a_partition(n_trades in 0usize..2000, n in 1usize..30, seed in any::<u64>()) {
        let mut rng = substream(seed, "profile", &[]);
        let profile = ParticipationProfile::build(
            n,
            Participation::power_law(2.0).resolve(n_trades.max(1)),
            &mut rng,
        ).unwrap();
        let a = assign_trades(n_trades, &profile, &mut substream(seed, "assign", &[]));
        prop_assert_eq!(a.len(), n_trades);
        let per = a.per_trader(n);
        prop_assert_eq!(per.iter().map(Vec::len).sum::<usize>(), n_trades);
        for list in per {
            prop_assert!(list.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn homogeneous_prefix_is_stable(n in 1usize..10, seed in any::<u64>(), short in 1usize..500) {
        let profile = ParticipationProfile::homogeneous(n).unwrap();
        let long = assign_trades(short + 500, &profile, &mut substream(seed, "assign", &[]));
        let prefix = assign_trades(short, &profile, &mut substream(seed, "assign", &[]));
        prop_assert_eq!(&long.trader_ids[..short], &prefix.trader_ids[..]);
    }

    #[test]
    fn acf_is_bounded(signs in prop::collection::vec(any::<bool>(), 10..400)) {
        let s: Vec<Sign> = signs.iter().map(|&b| if b { Sign::Buy } else { Sign::Sell }).collect();
        let c = acf(&s, 5, AcfVariant::Raw).unwrap();
        prop_assert!(c.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        let lengths = run_lengths(&s);
        prop_assert_eq!(lengths.iter().sum::<usize>(), s.len());
    }

    #[test]
    fn length_law_quantile_inverts_cdf(exponent in 1.5f64..4.0, u in 0.0f64..1.0) {
        let law = TruncatedDiscretePowerLaw::new(exponent, 2, 1000).unwrap();
        let l = law.quantile(u);
        prop_assert!((2..=1000).contains(&l));
        prop_assert!(law.cdf(l) >= u - 1e-12);
        if l > 2 {
            prop_assert!(law.cdf(l - 1) < u + 1e-12);
        }
    }
}

#[test]
fn simulated_traders_decompose_into_their_metaorders() {
    let cfg = SimConfig {
        n_traders: 7,
        alpha: 1.5,
        l_min: 2,
        l_cap: Some(500),
        n_orders: 20_000,
        participation: Participation::power_law(2.0),
        seed: 11,
    };
    let out = simulate(&cfg).unwrap();
    assert_eq!(out.signs.len(), 20_000);
    let total: u64 = out.metaorders.iter().map(|m| m.length).sum();
    assert_eq!(total, 20_000);
    for m in &out.metaorders {
        assert_eq!(out.trader_ids[m.start], m.trader);
        assert_eq!(out.signs[m.start].value(), m.sign);
        assert!(m.length <= m.target_length);
        assert_eq!(m.truncated, m.length < m.target_length);
    }
    // at most one unfinished metaorder per trader
    let mut open = std::collections::BTreeSet::new();
    for m in out.metaorders.iter().filter(|m| m.truncated) {
        assert!(open.insert(m.trader));
    }
    assert_eq!(simulate(&cfg).unwrap(), out);
}

#[test]
fn single_trader_day_forms_one_metaorder_per_sign_run() {
    let trades = trades_from(&[(true, 10), (true, 20), (false, 5), (true, 1), (true, 2), (true, 3)]);
    let stats = compute_daily_stats(&trades).unwrap();
    let day = build_metaorders(&trades, &Assignment { trader_ids: vec![1; 6] }, &stats).unwrap();
    let sizes: Vec<(usize, f64)> = day.metaorders.iter().map(|m| (m.n_children, m.total_volume)).collect();
    assert_eq!(sizes, [(2, 30.0), (3, 6.0)]);
    assert_eq!(day.filtered_runs, 1);
    assert_eq!(day.filtered_volume, 5.0);
}
