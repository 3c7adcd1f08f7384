use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volnp_core::market::{generate_market, SyntheticMarketConfig};
use volnp_core::ssvi::calibrate_ssvi;
use volnp_core::volnp::{ModelConfig, VolNp};
use volnp_core::{make_task, Coordinate, DayRecord, Quote, TaskSource};

fn model(seed: u64) -> VolNp {
    let cfg = ModelConfig { d_r: 16, encoder_blocks: 1, decoder_blocks: 1, heads: 2, mlp_layers: 1, mlp_width: 16, ffn_mult: 2, ..ModelConfig::default() };
    VolNp::new(cfg, seed).unwrap()
}

fn quotes(n: usize, rng: &mut ChaCha8Rng) -> Vec<Quote> {
    (0..n)
        .map(|_| {
            let k = rng.gen_range(-0.6..0.6);
            let tau = rng.gen_range(0.02..3.0);
            Quote::new(k, tau, rng.gen_range(0.05..0.8)).unwrap()
        })
        .collect()
}

fn day() -> DayRecord {
    generate_market(&SyntheticMarketConfig { n_days: 1, ..Default::default() }).unwrap().remove(0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn context_order_does_not_matter(seed in 0u64..1000, n in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = model(seed);
        let mut ctx = quotes(n, &mut rng);
        let targets: Vec<Coordinate> = quotes(5, &mut rng).iter().map(|q| q.coord).collect();
        let a = m.predict(&ctx, &targets).unwrap();
        ctx.shuffle(&mut rng);
        let b = m.predict(&ctx, &targets).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.mu - y.mu).abs() < 1e-12);
            prop_assert!((x.log_var - y.log_var).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_are_decoded_independently(seed in 0u64..1000, n in 1usize..10, m_t in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = model(seed);
        let ctx = quotes(n, &mut rng);
        let targets: Vec<Coordinate> = quotes(m_t, &mut rng).iter().map(|q| q.coord).collect();
        let joint = m.predict(&ctx, &targets).unwrap();
        for (t, j) in targets.iter().zip(&joint) {
            let alone = m.predict(&ctx, std::slice::from_ref(t)).unwrap()[0];
            prop_assert_eq!(alone.mu.to_bits(), j.mu.to_bits());
            prop_assert_eq!(alone.log_var.to_bits(), j.log_var.to_bits());
        }
    }

    #[test]
    fn predictions_are_finite_with_clamped_variance(seed in 0u64..1000, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = model(seed);
        for t in m.params.leaves_mut() {
            for v in t.data_mut() {
                *v *= 20.0;
            }
        }
        let ctx = quotes(n, &mut rng);
        let targets: Vec<Coordinate> = quotes(8, &mut rng).iter().map(|q| q.coord).collect();
        for p in m.predict(&ctx, &targets).unwrap() {
            prop_assert!(p.mu.is_finite());
            prop_assert!((-12.0..=4.0).contains(&p.log_var));
        }
    }

    #[test]
    fn tasks_split_a_day_without_overlap(seed in 0u64..1000, n_ctx in 1usize..200, n_tgt in proptest::option::of(1usize..100)) {
        let d = day();
        let task = make_task(&d, n_ctx, n_tgt, TaskSource::RealToReal, seed).unwrap();
        prop_assert_eq!(task.context.len(), n_ctx);
        let rest = d.quotes.len() - n_ctx;
        prop_assert_eq!(task.targets.len(), n_tgt.map_or(rest, |m| m.min(rest)));
        let key = |q: &Quote| (q.coord.k.to_bits(), q.coord.tau.to_bits(), q.vol.to_bits());
        let day_keys: Vec<_> = d.quotes.iter().map(key).collect();
        for q in task.context.iter().chain(&task.targets) {
            prop_assert!(day_keys.contains(&key(q)));
        }
        for q in &task.targets {
            prop_assert!(!task.context.iter().any(|c| key(c) == key(q)));
        }
        let again = make_task(&d, n_ctx, n_tgt, TaskSource::RealToReal, seed).unwrap();
        prop_assert_eq!(again.context, task.context);
    }
}

#[test]
fn checkpoint_file_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = model(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path).unwrap();
    let back = VolNp::load(&path).unwrap();
    let ctx = quotes(7, &mut rng);
    let targets: Vec<Coordinate> = quotes(9, &mut rng).iter().map(|q| q.coord).collect();
    let a = m.predict(&ctx, &targets).unwrap();
    let b = back.predict(&ctx, &targets).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.mu.to_bits() == y.mu.to_bits() && x.log_var.to_bits() == y.log_var.to_bits()));
}

#[test]
fn ssvi_fits_to_sparse_contexts_are_arbitrage_free() {
    let d = day();
    for seed in 0..5 {
        let task = make_task(&d, 30, None, TaskSource::RealToReal, seed).unwrap();
        let p = calibrate_ssvi(&task.context, None).unwrap();
        assert!(p.is_arbitrage_free(), "seed {seed}: {p:?}");
    }
}
