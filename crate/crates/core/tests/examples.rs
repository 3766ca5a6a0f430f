//! Every example runs at its built-in toy scale.

macro_rules! example {
    ($name:ident) => {
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }

        #[test]
        fn $name() {
            $name::run_example().expect(concat!(stringify!($name), " should run"));
        }
    };
}

example!(autodiff_gradcheck);
example!(noise_schedule);
example!(synthetic_data);
example!(teacher_training);
example!(guided_sampling);
example!(sun_adapter);
example!(adapter_distillation);
example!(evaluation);
example!(speed_benchmark);
example!(pipeline_cli);
