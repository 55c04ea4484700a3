use fedwba::barycenter::{aggregate, aggregate_detailed, objective_value, AggregationConfig};
use fedwba::metrics::{calibration, gaussian_kl};
use fedwba::ot::{cost_matrix, solve_exact, w2_distance};
use fedwba::wire::{decode, encode, message_size};
use fedwba::{Exec, Matrix, SeededRng};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..7, 1usize..4).prop_flat_map(|(n, m)| (matrix(n, m), matrix(n, m)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn plans_have_uniform_marginals((a, b) in pair()) {
        let (plan, obj) = solve_exact(&cost_matrix(&a, &b).unwrap()).unwrap();
        let n = a.rows() as f64;
        for s in plan.row_sums().into_iter().chain(plan.col_sums()) {
            prop_assert!((s - 1.0 / n).abs() < 1e-12);
        }
        prop_assert!(obj >= 0.0);
    }

    #[test]
    fn w2_is_symmetric_and_zero_on_self((a, b) in pair()) {
        let ab = w2_distance(&a, &b).unwrap();
        let ba = w2_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        prop_assert_eq!(w2_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn w2_triangle_inequality(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let a = rng.normal_matrix(n, 2, 0.0, 1.0);
        let b = rng.normal_matrix(n, 2, 1.0, 2.0);
        let c = rng.normal_matrix(n, 2, -1.0, 0.5);
        let (ab, bc, ac) = (w2_distance(&a, &b).unwrap(), w2_distance(&b, &c).unwrap(), w2_distance(&a, &c).unwrap());
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn barycenter_objective_never_increases(k in 1usize..5, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let global = rng.normal_matrix(n, 2, 0.0, 1.0);
        let clients: Vec<Matrix> = (0..k).map(|_| rng.normal_matrix(n, 2, 0.5, 1.0)).collect();
        let agg = aggregate_detailed(&global, &clients, 4, None, Exec::Sequential).unwrap();
        for w in agg.objectives.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", agg.objectives);
        }
        let with_plans = objective_value(&agg.particles, &clients, &agg.plans).unwrap();
        prop_assert!(agg.objectives[4] <= with_plans + 1e-12);
    }

    #[test]
    fn barycenter_of_identical_clients_is_that_cloud((g, c) in pair(), k in 1usize..4) {
        let clients = vec![c.clone(); k];
        let out = aggregate(&g, &clients, &AggregationConfig::default(), Exec::Sequential).unwrap();
        prop_assert!(w2_distance(&out, &c).unwrap() < 1e-9);
    }

    #[test]
    fn wire_round_trip_is_f32_exact((a, _) in pair(), round in any::<u32>(), id in any::<u32>()) {
        let bytes = encode(round, id, &a).unwrap();
        prop_assert_eq!(bytes.len(), message_size(a.rows(), a.cols()));
        let frame = decode(&bytes).unwrap();
        prop_assert_eq!((frame.round, frame.client_id), (round, id));
        for (x, y) in a.as_slice().iter().zip(frame.particles.as_slice()) {
            prop_assert_eq!(*x as f32 as f64, *y);
        }
    }

    /// The checksum covers the payload; round and client id (bytes 6..14)
    /// are the only unprotected fields.
    #[test]
    fn flipping_a_checked_byte_is_detected((a, _) in pair(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode(1, 2, &a).unwrap();
        let checked: Vec<usize> = (0..bytes.len()).filter(|i| !(6..14).contains(i)).collect();
        let i = checked[pos.index(checked.len())];
        bytes[i] ^= 1 << bit;
        prop_assert!(decode(&bytes).is_err());
    }

    #[test]
    fn ece_is_bounded(samples in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200), bins in 1usize..20) {
        let (e, rel) = calibration(&samples, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(rel.total(), samples.len());
    }

    #[test]
    fn gaussian_kl_is_nonnegative(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let spd = |rng: &mut SeededRng| {
            let a = rng.normal_matrix(3, 3, 0.0, 1.0);
            let mut s = a.matmul(&a.transpose()).unwrap();
            for i in 0..3 {
                s.set(i, i, s.get(i, i) + 0.1);
            }
            s
        };
        let (s0, s1) = (spd(&mut rng), spd(&mut rng));
        let mu0: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
        let mu1: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
        prop_assert!(gaussian_kl(&mu0, &s0, &mu1, &s1).unwrap() >= -1e-12);
        prop_assert!(gaussian_kl(&mu0, &s0, &mu0, &s0).unwrap().abs() < 1e-10);
    }
}
