//! Property tests over the crate's structural invariants.

use mos_core::adapter_file::{decode, encode};
use mos_core::composer::{compose, compose_effective, delta_w, forward, merge};
use mos_core::matrix::{matmul, outer, Matrix};
use mos_core::pool::{LayerTypeSpec, ModelState, MosConfig, Side};
use mos_core::rng::SeededRng;
use proptest::prelude::*;

fn random_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, rng.sample_normal(r * c)).unwrap()
}

/// Any valid (spec, cfg) pair across every variant.
fn arb_state_params() -> impl Strategy<Value = (LayerTypeSpec, MosConfig, u64)> {
    let variant = 0..5u8;
    (
        variant,
        1usize..=3,       // e
        1usize..=4,       // L
        prop_oneof![Just(1usize), Just(2), Just(4)], // l
        1usize..=4,       // raw rank knob
        0usize..=2,       // raw private knob
        any::<u64>(),     // seed
    )
        .prop_map(|(variant, e, big_l, l, rank_knob, p_knob, seed)| {
            let width = 8usize; // divisible by every l choice
            let spec = LayerTypeSpec::new("block", width, width, big_l);
            let cfg = match variant {
                0 => MosConfig::lora(rank_knob),
                1 => MosConfig::pure_sharing(e, big_l),
                2 => MosConfig::random_scaling(e, big_l),
                3 => MosConfig::subset_selection(e, rank_knob.min(e * big_l)),
                _ => {
                    // Keep the public pool at least r*l: p <= e and
                    // (e - p) * L >= r.
                    let p = p_knob.min(e.saturating_sub(1));
                    let max_rank = ((e - p) * big_l).max(1);
                    let rank = rank_knob.clamp(p.max(1), max_rank + p);
                    let rank = rank.min(max_rank + p).max(p.max(1));
                    MosConfig::mos(e, rank, l, p.min(rank))
                }
            };
            (spec, cfg, seed)
        })
        .prop_filter("config valid for spec", |(spec, cfg, _)| {
            cfg.check_against(spec).is_ok()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outer_sum_equals_matmul(seed in any::<u64>(), o in 1usize..6, r in 1usize..8, h in 1usize..6) {
        let mut rng = SeededRng::new(seed);
        let b = random_matrix(&mut rng, o, r);
        let a = random_matrix(&mut rng, r, h);
        let mut sum = Matrix::zeros(o, h);
        for i in 0..r {
            sum.add_scaled_in_place(&outer(&b.col(i), a.row(i)), 1.0);
        }
        let prod = matmul(&b, &a).unwrap();
        for (s, p) in sum.data().iter().zip(prod.data()) {
            prop_assert!((s - p).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_associativity(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let c = random_matrix(&mut rng, 3, 2);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            prop_assert!((l - r).abs() < 1e-9);
        }
    }

    #[test]
    fn compose_is_pure_and_matches_gather_contract(params in arb_state_params()) {
        let (spec, cfg, seed) = params;
        let mut state = ModelState::init(vec![spec.clone()], cfg.with_seed(seed)).unwrap();
        let mut rng = SeededRng::derive(seed, 99);
        state.randomize_pools(&mut rng, 0.5);
        let ty = &state.types[0];
        let l = state.cfg.shards_per_vector;
        for k in 0..spec.num_blocks {
            let once = compose(ty, k, &state.cfg).unwrap();
            let twice = compose(ty, k, &state.cfg).unwrap();
            prop_assert_eq!(&once, &twice);
            // Row i of A is the ordered concatenation of its l shards.
            let slen = ty.pool_a.shard_len();
            for i in 0..state.cfg.rank {
                for j in 0..l {
                    let shard = ty.pool_a.shard(ty.index_for(k, Side::A).entry(j, i) as usize);
                    prop_assert_eq!(&once.a.row(i)[j * slen..(j + 1) * slen], shard);
                }
            }
        }
    }

    #[test]
    fn zero_start_and_budget_identity(params in arb_state_params()) {
        let (spec, cfg, seed) = params;
        let state = ModelState::init(vec![spec.clone()], cfg.with_seed(seed)).unwrap();
        let e = state.cfg.equivalent_rank as u64;
        let expect = e * (spec.num_blocks * (spec.in_dim + spec.out_dim)) as u64;
        prop_assert_eq!(state.trainable_params(), expect);
        for k in 0..spec.num_blocks {
            let adapter = compose_effective(&state.types[0], k, &state.cfg).unwrap();
            prop_assert_eq!(delta_w(&adapter).unwrap().max_abs(), 0.0);
        }
        prop_assert!(state.validate().passed());
    }

    #[test]
    fn merge_equivalence(params in arb_state_params()) {
        let (spec, cfg, seed) = params;
        let mut state = ModelState::init(vec![spec.clone()], cfg.with_seed(seed)).unwrap();
        let mut rng = SeededRng::derive(seed, 99);
        state.randomize_pools(&mut rng, 0.5);
        let w0 = random_matrix(&mut rng, spec.out_dim, spec.in_dim);
        for k in 0..spec.num_blocks {
            let adapter = compose_effective(&state.types[0], k, &state.cfg).unwrap();
            let merged = merge(&adapter, &w0).unwrap();
            let x = rng.sample_normal(spec.in_dim);
            let direct = forward(&adapter, &w0, &x).unwrap();
            let via = merged.matvec(&x).unwrap();
            for (d, v) in direct.iter().zip(&via) {
                prop_assert!((d - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn file_round_trip(params in arb_state_params()) {
        let (spec, cfg, seed) = params;
        let mut state = ModelState::init(vec![spec], cfg.with_seed(seed)).unwrap();
        let mut rng = SeededRng::derive(seed, 99);
        state.randomize_pools(&mut rng, 0.5);
        let loaded = decode(&encode(&state)).unwrap();
        prop_assert_eq!(&loaded.cfg, &state.cfg);
        prop_assert_eq!(loaded.structure_hash(), state.structure_hash());
        for (lt, st) in loaded.types.iter().zip(&state.types) {
            for (lp, sp) in [(&lt.pool_a, &st.pool_a), (&lt.pool_b, &st.pool_b)] {
                for (l, s) in lp.data().data().iter().zip(sp.data().data()) {
                    let rel = (l - s).abs() / s.abs().max(1e-12);
                    prop_assert!(rel <= 1e-6 || (l - s).abs() < 1e-12);
                }
            }
        }
        // Re-encoding the loaded state is byte-stable.
        prop_assert_eq!(encode(&loaded), encode(&decode(&encode(&state)).unwrap()));
    }
}
