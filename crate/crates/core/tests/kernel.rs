use bnmf::verification::{check_sampler, check_sampler_against, normalizer_sweep, tn_settings, KernelFamily};

const DRAWS: usize = 100_000;

#[test]
fn normalizer_matches_quadrature_across_grid() {
    let sweep = normalizer_sweep(9).unwrap();
    assert_eq!(sweep.points, 729);
    assert!(sweep.max_relative_error < 1e-5, "{sweep:?}");
}

#[test]
fn truncated_normal_sampler_matches_moments_and_cdf() {
    for (i, family) in tn_settings(20, 2024).into_iter().enumerate() {
        let c = check_sampler(family, DRAWS, 100 + i as u64).unwrap();
        assert!(c.mean_ok(), "mean off by {:.2} SE: {c:?}", c.z());
        assert!(c.ks_ok(), "KS {} > {}: {c:?}", c.ks, c.ks_critical);
    }
}

#[test]
fn other_families_match_moments_and_cdf() {
    let families = [
        KernelFamily::RectifiedNormal { mean: 0.0, precision: 1.0, rate: 1.0 },
        KernelFamily::RectifiedNormal { mean: 2.0, precision: 4.0, rate: 3.0 },
        KernelFamily::RectifiedNormal { mean: -1.0, precision: 0.5, rate: 0.2 },
        KernelFamily::Gaussian { mean: -0.7, precision: 2.5 },
        KernelFamily::Gamma { shape: 1.0, rate: 2.0 },
        KernelFamily::Gamma { shape: 3.0, rate: 1.0 },
        KernelFamily::Gamma { shape: 0.5, rate: 0.3 },
        KernelFamily::InverseGamma { shape: 3.0, scale: 2.0 },
        KernelFamily::InverseGamma { shape: 12.5, scale: 40.0 },
        KernelFamily::Exponential { rate: 0.1 },
        KernelFamily::Exponential { rate: 7.0 },
    ];
    for (i, family) in families.into_iter().enumerate() {
        let c = check_sampler(family, DRAWS, 900 + i as u64).unwrap();
        assert!(c.passed(), "z {:.2}, KS {:.5} (critical {:.5}): {c:?}", c.z(), c.ks, c.ks_critical);
    }
}

#[test]
fn mismatched_oracle_is_caught() {
    let draws = KernelFamily::TruncatedNormal { mean: 0.0, precision: 1.0 };
    let oracle = KernelFamily::TruncatedNormal { mean: 0.05, precision: 1.0 };
    let c = check_sampler_against(draws, oracle, DRAWS, 1).unwrap();
    assert!(!c.passed(), "{c:?}");
    let gamma = check_sampler_against(
        KernelFamily::Gamma { shape: 3.0, rate: 1.0 },
        KernelFamily::Gamma { shape: 3.0, rate: 1.02 },
        DRAWS,
        2,
    )
    .unwrap();
    assert!(!gamma.passed(), "{gamma:?}");
}
