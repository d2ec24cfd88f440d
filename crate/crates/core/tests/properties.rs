use iemf_core::iemf::{iemf_coefficient, Gating};
use iemf_core::tensor::{softmax, softmax_rows};
use iemf_core::{IemfConfig, Tensor};
use proptest::prelude::*;

fn gating() -> impl Strategy<Value = Gating> {
    prop_oneof![Just(Gating::Tanh), Just(Gating::Softsign), Just(Gating::Arctan)]
}

fn unit_score() -> impl Strategy<Value = f64> {
    // (0, 1]
    (1u64..=1 << 52).prop_map(|k| k as f64 / (1u64 << 52) as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn coefficient_is_bounded_and_ordered(u in unit_score(), m in unit_score(), g in 0.01f64..10.0, gate in gating()) {
        let cfg = IemfConfig { gamma: g, gating: gate, enabled: true };
        let xi = iemf_coefficient(u, m, &cfg);
        prop_assert!(xi > 0.0 && xi < 2.0 * g, "xi {xi} outside (0, {})", 2.0 * g);
        match (u / m).partial_cmp(&1.0).unwrap() {
            std::cmp::Ordering::Greater => prop_assert!(xi < g),
            std::cmp::Ordering::Equal => prop_assert_eq!(xi, g),
            std::cmp::Ordering::Less => prop_assert!(xi > g),
        }
    }

    #[test]
    fn coefficient_decreases_as_probes_strengthen(m in unit_score(), a in unit_score(), b in unit_score()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let cfg = IemfConfig::default();
        prop_assert!(iemf_coefficient(lo, m, &cfg) >= iemf_coefficient(hi, m, &cfg));
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
        let p = softmax(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = softmax(&shifted).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_match_per_row(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((seed.wrapping_add(i as u64) % 997) as f64 - 498.0) / 50.0).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let p = softmax_rows(&t).unwrap();
        for i in 0..rows {
            prop_assert_eq!(p.row(i).to_vec(), softmax(t.row(i)).unwrap());
        }
    }
}

#[test]
fn softmax_worked_values() {
    assert_eq!(softmax(&[3.0; 4]).unwrap(), vec![0.25; 4]);
    let p = softmax(&[0.0, 2f64.ln()]).unwrap();
    assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
}
