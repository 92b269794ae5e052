use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rydberg_vmc::ed;
use rydberg_vmc::lattice::{encode_patch, HamiltonianSpec, Observable};
use rydberg_vmc::vmc::{self, AmplitudeTable, TrainConfig, Trainer, VmcError};
use rydberg_vmc::wavefunction::{LogAmplitude, ModelError, Wavefunction};
use rydberg_vmc::{LatticeSpec, ModelConfig, ModelKind, PatchScheme, SpinConfiguration};

fn lattice(rows: usize, cols: usize) -> LatticeSpec {
    LatticeSpec::new(rows, cols).unwrap()
}

fn ham(lat: LatticeSpec, omega: f64, delta: f64, rb6: f64) -> HamiltonianSpec<f64> {
    HamiltonianSpec::new(lat, omega, delta, rb6.powf(1.0 / 6.0))
}

fn small(kind: ModelKind, scheme: PatchScheme, seed: u64) -> ModelConfig {
    ModelConfig::new(kind)
        .with_scheme(scheme)
        .with_widths(16, 24, 2, 4)
        .with_seed(seed)
}

fn kinds_4x4(seed: u64) -> Vec<ModelConfig> {
    vec![
        small(ModelKind::Rnn, PatchScheme::single_site(), seed),
        small(ModelKind::PatchedRnn, PatchScheme::square(2), seed),
        small(ModelKind::PatchedTransformer, PatchScheme::square(2), seed),
        small(ModelKind::PatchedTransformer, PatchScheme::single_site(), seed),
        small(ModelKind::LargePatchedTransformer, PatchScheme::with_sub(2, 2, 1, 1), seed),
        small(ModelKind::LargePatchedTransformer, PatchScheme::with_sub(2, 4, 2, 2), seed),
    ]
}

fn kinds_2x2(seed: u64) -> Vec<ModelConfig> {
    vec![
        small(ModelKind::Rnn, PatchScheme::single_site(), seed),
        small(ModelKind::PatchedRnn, PatchScheme::with_sub(1, 2, 1, 2), seed),
        small(ModelKind::PatchedTransformer, PatchScheme::with_sub(1, 2, 1, 2), seed),
        small(ModelKind::LargePatchedTransformer, PatchScheme::with_sub(1, 2, 1, 1), seed),
    ]
}

/// Moves every parameter off zero so no relu input sits on its kink.
fn jitter(model: &mut Wavefunction<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.parameters_mut() {
        p.mapv_inplace(|x| x + rng.random_range(-0.3..0.3));
    }
}

fn random_configs(rng: &mut ChaCha8Rng, count: usize, n: usize) -> Vec<SpinConfiguration> {
    (0..count)
        .map(|_| SpinConfiguration::new((0..n).map(|_| rng.random_range(0..2u8)).collect()))
        .collect()
}

fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    // blocks whose exact gradient vanishes (key biases) are compared absolutely
    diff / b.mapv(|x| x * x).sum().sqrt().max(1e-5)
}

/// Central differences of `f` with respect to every entry of every block.
fn finite_differences(model: &Wavefunction<f64>, f: impl Fn(&Wavefunction<f64>) -> f64) -> Vec<Array2<f64>> {
    let step = 1e-5;
    let mut probe = model.clone();
    let mut out = Vec::new();
    for b in 0..model.parameters().len() {
        let mut grad = Array2::zeros(model.parameters()[b].dim());
        for (idx, g) in grad.indexed_iter_mut() {
            let orig = probe.parameters()[b][idx];
            probe.parameters_mut()[b][idx] = orig + step;
            let up = f(&probe);
            probe.parameters_mut()[b][idx] = orig - step;
            let down = f(&probe);
            probe.parameters_mut()[b][idx] = orig;
            *g = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

struct Constant;

impl LogAmplitude<f64> for Constant {
    fn log_amplitude(&self, _: &SpinConfiguration) -> Result<f64, ModelError> {
        Ok(-1.7)
    }
}

#[test]
fn local_energy_examples() {
    for (rows, cols) in [(1, 1), (2, 2), (3, 2)] {
        let h = HamiltonianSpec::new(lattice(rows, cols), 1.0, 0.0, 0.0);
        let n = rows * cols;
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        for c in random_configs(&mut rng, 5, n) {
            let e = vmc::local_energy(&Constant, &c, &h).unwrap();
            assert!((e - -(n as f64) / 2.0).abs() < 1e-15);
        }
    }
    let h = ham(lattice(2, 2), 1.0, 1.0, 7.0);
    let e = vmc::local_energy(&Constant, &SpinConfiguration::zeros(4), &h).unwrap();
    assert_eq!(e, -2.0);
}

#[test]
fn overflowing_ratio_names_the_flip() {
    struct Spiky;
    impl LogAmplitude<f64> for Spiky {
        fn log_amplitude(&self, c: &SpinConfiguration) -> Result<f64, ModelError> {
            Ok(if c.get(2) == 1 { 1e4 } else { 0.0 })
        }
    }
    let h = ham(lattice(2, 2), 1.0, 1.0, 7.0);
    assert_eq!(
        vmc::local_energy(&Spiky, &SpinConfiguration::zeros(4), &h),
        Err(VmcError::NonFiniteRatio { flip: 2 })
    );
}

#[test]
fn exact_ground_state_has_zero_variance() {
    let h = ham(lattice(2, 2), 1.0, 1.0, 7.0);
    let gs = ed::ed_ground_state(&h).unwrap();
    let table = AmplitudeTable::<f64>::from_amplitudes(&gs.amplitudes);
    let eloc: Vec<f64> = (0..16)
        .map(|k| vmc::local_energy(&table, &SpinConfiguration::from_index(k, 4), &h).unwrap())
        .collect();
    for e in &eloc {
        assert!((e - gs.ground_energy).abs() < 1e-10, "{e} vs {}", gs.ground_energy);
    }
    let est = vmc::energy_estimate(&eloc).unwrap();
    assert!(est.variance <= 1e-16 * gs.ground_energy.powi(2));
}

#[test]
fn grouped_local_energy_matches_naive() {
    let h = ham(lattice(4, 4), 1.0, 1.0, 7.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for (m, cfg) in kinds_4x4(11).into_iter().enumerate() {
        let mut model = Wavefunction::<f64>::new(cfg, &h.lattice).unwrap();
        jitter(&mut model, m as u64);
        let groups = model.n_groups();
        let configs = random_configs(&mut rng, 17, 16);
        let naive: Vec<f64> = configs
            .iter()
            .map(|c| vmc::local_energy(&model, c, &h).unwrap())
            .collect();
        for d in [1, 2, groups] {
            if !groups.is_multiple_of(d) {
                continue;
            }
            let grouped = vmc::local_energies_grouped(&model, &configs, &h, d).unwrap();
            for (a, b) in grouped.iter().zip(&naive) {
                assert!((a - b).abs() < 1e-10, "{:?} D={d}: {a} vs {b}", cfg.kind);
            }
            let single = vmc::local_energy_grouped(&model, &configs[0], &h, d).unwrap();
            assert!((single - naive[0]).abs() < 1e-10);
        }
        checked += configs.len();
    }
    assert!(checked >= 100);
}

#[test]
fn gradient_is_independent_of_mini_batch_size() {
    let h = ham(lattice(4, 4), 1.0, 1.0, 7.0);
    for cfg in [kinds_4x4(2)[1], kinds_4x4(2)[4]] {
        let model = Wavefunction::<f64>::new(cfg, &h.lattice).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let configs = model.sample(64, &mut rng).unwrap().configs;
        let eloc = vmc::local_energies_grouped(&model, &configs, &h, model.n_groups()).unwrap();
        let (_, full) = vmc::energy_gradient(&model, &configs, &eloc, 64).unwrap();
        for k in [32, 16] {
            let (_, split) = vmc::energy_gradient(&model, &configs, &eloc, k).unwrap();
            for (a, b) in split.iter().zip(&full) {
                assert!((a - b).iter().all(|d| d.abs() < 1e-10));
            }
        }
    }
}

#[test]
fn estimator_matches_term_by_term_sum() {
    let h = ham(lattice(2, 2), 1.0, 1.0, 7.0);
    for cfg in kinds_2x2(4) {
        let mut model = Wavefunction::<f64>::new(cfg, &h.lattice).unwrap();
        jitter(&mut model, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let configs = model.sample(12, &mut rng).unwrap().configs;
        let eloc = vmc::local_energies_grouped(&model, &configs, &h, model.n_groups()).unwrap();
        let (est, grad) = vmc::energy_gradient(&model, &configs, &eloc, 4).unwrap();
        let mut manual: Vec<Array2<f64>> = grad.iter().map(|g| Array2::zeros(g.dim())).collect();
        for (c, e) in configs.iter().zip(&eloc) {
            let single = vmc::surrogate_gradient(&model, std::slice::from_ref(c), &[1.0], 1).unwrap();
            let w = 2.0 / configs.len() as f64 * (e - est.mean);
            for (acc, s) in manual.iter_mut().zip(&single) {
                acc.scaled_add(w, s);
            }
        }
        for (a, b) in grad.iter().zip(&manual) {
            assert!((a - b).iter().all(|d| d.abs() < 1e-12));
        }
    }
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    let h = ham(lattice(2, 2), 1.0, 1.0, 7.0);
    for cfg in kinds_2x2(6) {
        let mut model = Wavefunction::<f64>::new(cfg, &h.lattice).unwrap();
        jitter(&mut model, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let configs = model.sample(8, &mut rng).unwrap().configs;
        let eloc = vmc::local_energies_grouped(&model, &configs, &h, model.n_groups()).unwrap();
        let est = vmc::energy_estimate(&eloc).unwrap();
        let coeffs: Vec<f64> = eloc.iter().map(|e| 2.0 / 8.0 * (e - est.mean)).collect();
        let grad = vmc::surrogate_gradient(&model, &configs, &coeffs, 8).unwrap();
        let fd = finite_differences(&model, |m| {
            m.log_amplitudes(&configs)
                .unwrap()
                .iter()
                .zip(&coeffs)
                .map(|(l, c)| l * c)
                .sum()
        });
        for (name, (a, b)) in model.parameter_names().iter().zip(grad.iter().zip(&fd)) {
            let err = relative_error(a, b);
            assert!(err < 1e-4, "{:?} {name}: {err:.2e}", cfg.kind);
        }
    }
}

#[test]
fn exact_gradient_matches_finite_differences_of_energy() {
    let h = ham(lattice(2, 2), 1.0, 1.0, 7.0);
    for cfg in kinds_2x2(7) {
        let mut model = Wavefunction::<f64>::new(cfg, &h.lattice).unwrap();
        jitter(&mut model, 3);
        let (energy, grad) = vmc::exact_energy_gradient(&model, &h).unwrap();
        assert!((energy - ed::model_energy(&model, &h).unwrap()).abs() < 1e-12);
        let fd = finite_differences(&model, |m| ed::model_energy(m, &h).unwrap());
        for (name, (a, b)) in model.parameter_names().iter().zip(grad.iter().zip(&fd)) {
            let err = relative_error(a, b);
            assert!(err < 1e-4, "{:?} {name}: {err:.2e}", cfg.kind);
        }
    }
}

/// Sets the output bias so that the single patch almost surely takes `bits`.
fn pin_single_patch(model: &mut Wavefunction<f64>, bits: &[u8]) {
    let b2 = model.parameter_names().iter().position(|n| n == "head.b2").unwrap();
    let p = &mut model.parameters_mut()[b2];
    p.fill(0.0);
    p[[0, encode_patch(bits)]] = 100.0;
}

#[test]
fn pinned_model_gives_exact_checkerboard() {
    let lat = lattice(2, 2);
    let cfg = ModelConfig::new(ModelKind::PatchedRnn).with_widths(8, 8, 1, 1);
    let mut model = Wavefunction::<f64>::zeros(cfg, &lat).unwrap();
    pin_single_patch(&mut model, &[1, 0, 0, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let est = vmc::measure_observable(&model, 500, Observable::StaggeredMagnetization, &mut rng).unwrap();
    assert_eq!(est.mean, 0.5);
    assert_eq!(est.std_error, 0.0);
}

#[test]
fn uniform_model_observable_matches_enumeration() {
    let lat = lattice(2, 2);
    for cfg in kinds_2x2(0) {
        let model = Wavefunction::<f64>::zeros(cfg, &lat).unwrap();
        let exact = ed::model_expectation(&model, Observable::StaggeredMagnetization).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let est = vmc::measure_observable(&model, 4000, Observable::StaggeredMagnetization, &mut rng).unwrap();
        assert!((est.mean - exact).abs() < 3.0 * est.std_error, "{} vs {exact}", est.mean);
    }
}

#[test]
fn eigenstate_model_gets_zero_gradient_and_stays_put() {
    // without transverse field every basis state is an eigenstate
    let h = ham(lattice(2, 2), 0.0, -1.0, 7.0);
    let cfg = ModelConfig::new(ModelKind::PatchedRnn).with_widths(8, 8, 1, 1).with_seed(1);
    let mut model = Wavefunction::<f64>::new(cfg, &h.lattice).unwrap();
    pin_single_patch(&mut model, &[0, 0, 0, 0]);
    let before = model.parameters().to_vec();
    let mut trainer = Trainer::new(
        model,
        h,
        TrainConfig {
            n_samples: 32,
            mini_batch: 16,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let rec = trainer.step().unwrap();
    assert_eq!(rec.energy.variance, 0.0);
    assert_eq!(rec.energy.mean, 0.0);
    assert_eq!(trainer.model.parameters(), &before[..]);
}

fn short_run(seed: u64, steps: usize) -> (Vec<f64>, Vec<Array2<f64>>) {
    let h = ham(lattice(2, 2), 1.0, 1.0, 7.0);
    let model = Wavefunction::<f64>::new(kinds_2x2(3)[1], &h.lattice).unwrap();
    let mut trainer = Trainer::new(
        model,
        h,
        TrainConfig {
            n_samples: 64,
            mini_batch: 32,
            seed,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let recs = vmc::train::<_, VmcError>(&mut trainer, steps, |_, _| Ok(())).unwrap();
    (
        recs.iter().map(|r| r.energy.mean).collect(),
        trainer.model.parameters().to_vec(),
    )
}

#[test]
fn training_is_deterministic() {
    let a = short_run(4, 5);
    let b = short_run(4, 5);
    assert_eq!(a, b);
    let c = short_run(5, 5);
    assert_ne!(a.0, c.0);
    assert!(short_run(4, 0).0.is_empty());
}

#[test]
fn training_lowers_the_energy_on_two_by_two() {
    let h = ham(lattice(2, 2), 1.0, 1.0, 7.0);
    let e0 = ed::ed_ground_state(&h).unwrap().ground_energy;
    let model = Wavefunction::<f64>::new(kinds_2x2(3)[1], &h.lattice).unwrap();
    let start = ed::model_energy(&model, &h).unwrap();
    let mut trainer = Trainer::new(
        model,
        h.clone(),
        TrainConfig {
            n_samples: 128,
            mini_batch: 64,
            adam: rydberg_vmc::tensor::AdamConfig {
                lr: 5e-3,
                ..Default::default()
            },
            ..TrainConfig::default()
        },
    )
    .unwrap();
    vmc::train::<_, VmcError>(&mut trainer, 150, |rec, _| {
        assert!(rec.energy.mean >= e0 - 3.0 * rec.energy.std_error - 1e-12);
        Ok(())
    })
    .unwrap();
    let end = ed::model_energy(&trainer.model, &h).unwrap();
    assert!(end < start);
    assert!((end - e0).abs() / e0.abs() < 2e-2, "{end} vs {e0}");
}

#[test]
fn trainer_rejects_inconsistent_setups() {
    let h = ham(lattice(2, 2), 1.0, 1.0, 7.0);
    let other = Wavefunction::<f64>::new(kinds_2x2(0)[0], &lattice(1, 4)).unwrap();
    assert!(Trainer::new(other, h.clone(), TrainConfig::default()).is_err());
    let model = Wavefunction::<f64>::new(kinds_2x2(0)[0], &h.lattice).unwrap();
    let bad_parts = TrainConfig {
        parts: Some(3),
        ..TrainConfig::default()
    };
    assert!(Trainer::new(model.clone(), h.clone(), bad_parts).is_err());
    let bad_batch = TrainConfig {
        n_samples: 100,
        mini_batch: 30,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(model, h, bad_batch).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimate_invariants(values in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let e = vmc::energy_estimate(&values).unwrap();
        prop_assert!(e.variance >= 0.0);
        prop_assert!((e.std_error - (e.variance / values.len() as f64).sqrt()).abs() < 1e-12);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(e.mean >= lo - 1e-12 && e.mean <= hi + 1e-12);
    }

    #[test]
    fn observable_estimate_stays_in_range(seed in 0u64..1000, kind in 0usize..4) {
        let model = Wavefunction::<f64>::new(kinds_2x2(seed)[kind], &lattice(2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = vmc::measure_observable(&model, 50, Observable::StaggeredMagnetization, &mut rng).unwrap();
        prop_assert!((0.0..=0.5).contains(&est.mean));
    }

    #[test]
    fn grouped_flips_count_every_atom(seed in 0u64..1000) {
        // one flip per atom: with zero coupling and no detuning E_loc of a uniform state is -N/2
        let lat = lattice(2, 4);
        let h = HamiltonianSpec::new(lat, 1.0, 0.0, 0.0);
        let model = Wavefunction::<f64>::zeros(small(ModelKind::PatchedRnn, PatchScheme::square(2), seed), &lat).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let configs = random_configs(&mut rng, 3, 8);
        for d in [1, 2] {
            for e in vmc::local_energies_grouped(&model, &configs, &h, d).unwrap() {
                prop_assert!((e + 4.0).abs() < 1e-12);
            }
        }
    }
}
