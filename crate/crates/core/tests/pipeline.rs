use moduleport::{
    plan_layers, read_container, realize_plan, transfer, write_container, AdapterParams, DType, LayerModules, LayerStrategy,
    Matrix, PeftModuleSet, SampleBatch, SamplePair,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn random_adapters(layers: usize, d: usize, bottleneck: usize, rng: &mut ChaCha8Rng) -> PeftModuleSet {
    let layers = (0..layers)
        .map(|_| {
            LayerModules::Adapter(
                AdapterParams::from_parts(
                    Matrix::random_normal(bottleneck, d, 1.0, rng),
                    Matrix::random_normal(1, bottleneck, 1.0, rng).into_data(),
                    Matrix::random_normal(d, bottleneck, 1.0, rng),
                    Matrix::random_normal(1, d, 1.0, rng).into_data(),
                )
                .unwrap(),
            )
        })
        .collect();
    PeftModuleSet::new(layers).unwrap()
}

fn relabel(set: &PeftModuleSet, sigma: &[usize]) -> PeftModuleSet {
    let layers = (0..set.num_layers())
        .map(|l| {
            let LayerModules::Adapter(a) = set.layer(l) else { unreachable!() };
            LayerModules::Adapter(AdapterParams {
                down_weight: a.down_weight.gather_cols(sigma).unwrap(),
                down_bias: a.down_bias.clone(),
                up_weight: a.up_weight.gather_rows(sigma).unwrap(),
                up_bias: sigma.iter().map(|&i| a.up_bias[i]).collect(),
            })
        })
        .collect();
    PeftModuleSet::new(layers).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Renaming teacher hidden units, consistently in activations and modules, must not change a
    // narrower student. Equal widths skip alignment and keep the teacher labels.
    #[test]
    fn transfer_is_equivariant_to_teacher_relabelling(seed in any::<u64>(), d_s in 2usize..6, extra in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_t = d_s + extra;
        let teacher = random_adapters(2, d_t, 3, &mut rng);
        let plan = plan_layers(2, 1, LayerStrategy::Skip, 1).unwrap();
        let xs = Matrix::random_normal(24, d_s, 1.0, &mut rng);
        let xt = Matrix::random_normal(24, d_t, 1.0, &mut rng);
        let mut sigma: Vec<usize> = (0..d_t).collect();
        sigma.shuffle(&mut rng);

        let batch = SampleBatch::new(plan.clone(), vec![SamplePair { student: xs.clone(), teacher: xt.clone() }]).unwrap();
        let relabelled = SampleBatch::new(plan.clone(), vec![SamplePair { student: xs, teacher: xt.gather_cols(&sigma).unwrap() }]).unwrap();
        let a = transfer(&teacher, &plan, Some(&batch), d_s).unwrap();
        let b = transfer(&relabel(&teacher, &sigma), &plan, Some(&relabelled), d_s).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn avg_layers_are_group_means(seed in any::<u64>(), stride in 1usize..4, student in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = random_adapters(stride * student, 4, 2, &mut rng);
        let plan = plan_layers(stride * student, student, LayerStrategy::Avg, 0).unwrap();
        let out = realize_plan(&teacher, &plan).unwrap();
        for l in 0..student {
            let LayerModules::Adapter(got) = out.layer(l) else { unreachable!() };
            for (idx, v) in got.up_bias.iter().enumerate() {
                let mean = (0..stride)
                    .map(|k| match teacher.layer(l * stride + k) {
                        LayerModules::Adapter(a) => a.up_bias[idx],
                        _ => unreachable!(),
                    })
                    .sum::<f64>()
                    / stride as f64;
                prop_assert!((v - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn files_through_transfer_and_back() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let teacher = random_adapters(4, 10, 3, &mut rng);
    let plan = plan_layers(4, 2, LayerStrategy::Skip, 1).unwrap();
    let pairs = (0..2)
        .map(|_| SamplePair {
            student: Matrix::random_normal(40, 6, 1.0, &mut rng),
            teacher: Matrix::random_normal(40, 10, 1.0, &mut rng),
        })
        .collect();
    let batch = SampleBatch::new(plan.clone(), pairs).unwrap();

    let (tp, sp, op) = (dir.path().join("t.mpc"), dir.path().join("s.mpc"), dir.path().join("o.mpc"));
    write_container(&teacher.to_container(DType::F64).unwrap(), &tp).unwrap();
    write_container(&batch.to_container().unwrap(), &sp).unwrap();
    let teacher_back = PeftModuleSet::from_container(&read_container(&tp).unwrap()).unwrap();
    let batch_back = SampleBatch::from_container(&read_container(&sp).unwrap()).unwrap();
    assert_eq!(teacher_back, teacher);
    assert_eq!(batch_back.pairs(), batch.pairs());

    let out = transfer(&teacher_back, &plan, Some(&batch_back), 6).unwrap();
    assert_eq!(out, transfer(&teacher, &plan, Some(&batch), 6).unwrap());
    write_container(&out.to_container(DType::F64).unwrap(), &op).unwrap();
    let reread = PeftModuleSet::from_container(&read_container(&op).unwrap()).unwrap();
    assert_eq!(reread, out);
    assert_eq!((reread.num_layers(), reread.d_model()), (2, 6));
}
