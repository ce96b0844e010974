use ddbridge::bridge::BridgeSchedule;
use ddbridge::data::{aux_decode, aux_encode, AuxRaw, AuxStats, ClassLabel, N_AUX_VARS};
use ddbridge::metrics::{
    mae_mse, psnr, ssim3d, wilcoxon_one_sided_with, MetricReport, SubjectRow, WilcoxonMode,
    DATA_RANGE,
};
use ddbridge::sampler::{make_timesteps, SamplerConfig};
use ddbridge::Volume;
use proptest::prelude::*;

fn schedule() -> impl Strategy<Value = BridgeSchedule> {
    prop_oneof![
        (0.1f64..8.0).prop_map(BridgeSchedule::vp),
        (0.2f64..5.0).prop_map(BridgeSchedule::ve),
    ]
}

fn volume_pair(side: usize) -> impl Strategy<Value = (Volume, Volume)> {
    let n = side * side * side;
    (
        prop::collection::vec(0f32..1.0, n),
        prop::collection::vec(0f32..1.0, n),
    )
        .prop_map(move |(a, b)| {
            (
                Volume::from_vec([side; 3], a).unwrap(),
                Volume::from_vec([side; 3], b).unwrap(),
            )
        })
}

fn aux_raw() -> impl Strategy<Value = AuxRaw> {
    prop::array::uniform13(prop::option::of(-50f64..150.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bridge_coefficients_are_well_formed(s in schedule(), u in 0.0f64..1.0) {
        let t = s.t_min + u * (s.t_max - s.t_min);
        let c = s.bridge_coeffs(t).unwrap();
        prop_assert!(c.c >= 0.0);
        prop_assert!(c.a >= 0.0 && c.b >= 0.0);
        // Constant data passes through the bridge mean like the unpinned marginal.
        let alpha_t = s.eval(t).unwrap().alpha;
        let alpha_end = s.eval(s.t_max).unwrap().alpha;
        prop_assert!((c.a * alpha_end + c.b - alpha_t).abs() < 1e-12);
    }

    #[test]
    fn bridge_variance_vanishes_at_both_ends(s in schedule()) {
        let lo = s.bridge_coeffs(s.t_min).unwrap().c;
        let hi = s.bridge_coeffs(s.t_max).unwrap().c;
        let mid = s.bridge_coeffs(0.5 * (s.t_min + s.t_max)).unwrap().c;
        prop_assert!(lo < mid && hi < mid);
        prop_assert_eq!(hi, 0.0);
    }

    #[test]
    fn timesteps_strictly_decrease(n in 2usize..300, rho in 1.0f64..10.0, emf in 0.0f64..1.0) {
        let cfg = SamplerConfig { n_step: n, rho, em_fraction: emf, ..Default::default() };
        let ts = make_timesteps(&cfg, 1e-4, 1.0).unwrap();
        prop_assert_eq!(ts.len(), n);
        prop_assert_eq!(ts[0], 1.0);
        prop_assert!((ts[n - 1] - 1e-4).abs() < 1e-12);
        prop_assert!(ts.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn pair_metrics_are_symmetric((a, b) in volume_pair(7)) {
        let (m1, s1) = mae_mse(&a, &b).unwrap();
        let (m2, s2) = mae_mse(&b, &a).unwrap();
        prop_assert_eq!(m1, m2);
        prop_assert_eq!(s1, s2);
        prop_assert_eq!(psnr(&a, &b, DATA_RANGE).unwrap(), psnr(&b, &a, DATA_RANGE).unwrap());
        let (q1, q2) = (ssim3d(&a, &b).unwrap(), ssim3d(&b, &a).unwrap());
        prop_assert!((q1 - q2).abs() < 1e-12);
        prop_assert!(q1 <= 1.0 + 1e-12);
    }

    #[test]
    fn squared_mae_bounded_by_mse((a, b) in volume_pair(4)) {
        let (mae, mse) = mae_mse(&a, &b).unwrap();
        prop_assert!(mae * mae <= mse * (1.0 + 1e-12));
    }

    #[test]
    fn aux_encoding_roundtrips(raws in prop::collection::vec(aux_raw(), 3..20), probe in aux_raw()) {
        let stats = AuxStats::fit(&raws);
        let back = aux_decode(&aux_encode(&probe, &stats), &stats);
        for j in 0..N_AUX_VARS {
            match (probe[j], back[j]) {
                (None, None) => {}
                (Some(x), Some(y)) => {
                    if stats.std[j] > 1e-6 {
                        prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()) * (1.0 + (x - stats.mean[j]).abs() / stats.std[j]));
                    } else {
                        prop_assert_eq!(y, stats.mean[j]);
                    }
                }
                _ => prop_assert!(false, "presence changed at {}", j),
            }
        }
    }

    #[test]
    fn overall_mean_is_weighted_stratum_mean(
        rows in prop::collection::vec((0usize..3, 0usize..4, 0usize..3, 0f64..1.0, 0f64..1.0), 1..60)
    ) {
        let bands = ["<65", "65-74", "75+", "unknown"];
        let genders = ["F", "M", "unknown"];
        let rows: Vec<SubjectRow> = rows
            .iter()
            .enumerate()
            .map(|(i, &(c, a, g, mae, ssim))| SubjectRow {
                id: format!("s{i:03}"),
                class: ClassLabel::ALL[c],
                age_band: bands[a].into(),
                gender: genders[g].into(),
                mae,
                mse: mae * mae,
                psnr: 10.0 * (1.0 / (mae * mae)).log10(),
                ssim,
            })
            .collect();
        let report = MetricReport::from_rows(rows);
        let total = report.overall.n as f64;
        for axis in ["class", "ageBand", "gender"] {
            let strata = report.axis(axis);
            prop_assert_eq!(strata.iter().map(|(_, a)| a.n).sum::<usize>(), report.overall.n);
            let mae: f64 = strata.iter().map(|(_, a)| a.n as f64 * a.mae.mean).sum::<f64>() / total;
            let ssim: f64 = strata.iter().map(|(_, a)| a.n as f64 * a.ssim.mean).sum::<f64>() / total;
            prop_assert!((mae - report.overall.mae.mean).abs() < 1e-10);
            prop_assert!((ssim - report.overall.ssim.mean).abs() < 1e-10);
        }
    }

    #[test]
    fn wilcoxon_normal_tracks_exact(diffs in prop::collection::vec(
        prop_oneof![-1.0f64..-0.01, 0.01f64..1.0], 15)
    ) {
        let exact = wilcoxon_one_sided_with(&diffs, WilcoxonMode::Exact).unwrap();
        let normal = wilcoxon_one_sided_with(&diffs, WilcoxonMode::Normal).unwrap();
        prop_assert!((exact - normal).abs() < 0.02, "exact {} normal {}", exact, normal);
    }

    #[test]
    fn wilcoxon_is_monotone_in_shift(diffs in prop::collection::vec(-1.0f64..1.0, 8), shift in 0.0f64..0.5) {
        prop_assume!(diffs.iter().all(|d| d.abs() > 1e-9 && (d + shift).abs() > 1e-9));
        let shifted: Vec<f64> = diffs.iter().map(|d| d + shift).collect();
        let p0 = wilcoxon_one_sided_with(&diffs, WilcoxonMode::Exact).unwrap();
        let p1 = wilcoxon_one_sided_with(&shifted, WilcoxonMode::Exact).unwrap();
        prop_assert!(p1 <= p0 + 1e-12);
    }
}
