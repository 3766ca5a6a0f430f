//! Property tests of the schedule algebra, the negative-feature
//! normalization and the adapter's zero initialization.

use proptest::prelude::*;
use sunplug::adapter::{attention_normalize, plug_into, SunAdapter};
use sunplug::denoiser::{TeacherModel, UNetConfig};
use sunplug::prompt::{sample_negative_prompt, Prompt};
use sunplug::rng::{normal_tensor, stream};
use sunplug::schedule::NoiseSchedule;
use sunplug::{Tape, Tensor};

fn vec_tensor(v: Vec<f64>) -> Tensor<f64> {
    Tensor::new(&[v.len()], v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pseudo_epsilon_inverts_a_ddim_step(
        t in 0.05f64..1.0,
        frac in 0.01f64..0.99,
        z in prop::collection::vec(-3.0f64..3.0, 8),
        e in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let sch = NoiseSchedule::default();
        let s = sch.floor + frac * (t - sch.floor);
        prop_assume!(t - s > 1e-4);
        let (z, e) = (vec_tensor(z), vec_tensor(e));
        let zs = sch.ddim_step(&z, &e, t, s).unwrap();
        let back = sch.pseudo_epsilon(&z, t, &zs, s).unwrap();
        for (a, b) in back.data().iter().zip(e.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn ddim_with_true_noise_recovers_the_forward_process(
        t in 0.05f64..1.0,
        frac in 0.0f64..0.99,
        x0 in prop::collection::vec(-1.0f64..1.0, 8),
        e in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let sch = NoiseSchedule::default();
        let s = sch.floor + frac * (t - sch.floor);
        prop_assume!(t - s > 1e-4);
        let (x0, e) = (vec_tensor(x0), vec_tensor(e));
        let zt = sch.add_noise(&x0, &e, t).unwrap();
        let zs = sch.ddim_step(&zt, &e, t, s).unwrap();
        let direct = sch.add_noise(&x0, &e, s).unwrap();
        for (a, b) in zs.data().iter().zip(direct.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn normalized_gain_is_scale_invariant(
        seed in any::<u64>(),
        c in prop::sample::select(vec![1e-3f64, 1.0, 1e3]),
        alpha in -2.0f64..2.0,
        beta in -1.0f64..1.0,
    ) {
        let mut rng = stream(seed, "inv-scale", 0);
        let zp = normal_tensor(&mut rng, &[5, 12]).cast::<f64>();
        let zn = normal_tensor(&mut rng, &[5, 12]).cast::<f64>();
        let g = |scale: f64| {
            let mut tape = Tape::<f64>::new();
            let p = tape.constant(zp.clone()).unwrap();
            let n = tape.constant(zn.map(|v| v * scale)).unwrap();
            let a = tape.constant(Tensor::full(&[1], alpha)).unwrap();
            let b = tape.constant(Tensor::full(&[1], beta)).unwrap();
            let out = attention_normalize(&mut tape, p, n, a, b, true).unwrap();
            tape.value(out).clone()
        };
        let (base, scaled) = (g(1.0), g(c));
        for (a, b) in scaled.data().iter().zip(base.data()) {
            prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn untrained_adapter_reproduces_the_host(seed in any::<u64>(), t in 0.01f64..1.0) {
        let host = TeacherModel::new(UNetConfig::tiny(), seed % 7);
        let adapter = SunAdapter::new(&host);
        let student = plug_into(&adapter, &host).unwrap();
        let mut rng = stream(seed, "inv-identity", 0);
        let z = normal_tensor(&mut rng, &[2, 1, 16, 16]);
        let pos = vec![Prompt::parse("cross large").unwrap(), Prompt::empty()];
        let neg = vec![sample_negative_prompt(&mut rng), sample_negative_prompt(&mut rng)];
        let a = student.predict(&z, &[t, t], &pos, &neg).unwrap();
        let b = host.predict(&z, &[t, t], &pos).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }
}
