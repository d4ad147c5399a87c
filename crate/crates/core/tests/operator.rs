use pionm::exec::stream_rng;
use pionm::mfg::{build_crowd_motion_with, BoundaryCode, CodeLayout, MfgProblem, Scenario};
use pionm::nn::Adam;
use pionm::operator::{
    loss_pino, oracle_l1, train_pionm, OperatorArch, OperatorModel, OperatorTrainConfig, OracleTeacher, Teacher,
    TrainSample,
};
use pionm::scenarios::{toy_1d_settings, ScenarioSampler, UniformSampler};
use pionm::Result;

fn toy_build(code: &BoundaryCode) -> Result<MfgProblem> {
    let (settings, horizon, steps) = toy_1d_settings();
    build_crowd_motion_with(code, steps, horizon, &settings)
}

fn teacher() -> OracleTeacher {
    OracleTeacher {
        points: 64,
        levels_per_step: 10,
        ..Default::default()
    }
}

fn arch() -> OperatorArch {
    OperatorArch {
        width: 16,
        layers: 3,
        modes: 6,
        steps: 10,
        feature_scale: 2.0,
    }
}

#[test]
fn recall_on_a_training_code_is_within_ten_percent() {
    let s = Scenario {
        init_mean: vec![-1.0],
        init_std: 0.5,
        target: vec![1.0],
        obstacles: vec![],
        sigma: 0.5,
    };
    let code = BoundaryCode::encode(&s, CodeLayout::circles(1, 0)).unwrap();
    let problem = toy_build(&code).unwrap();
    let sample = teacher().solve(&problem, &code, None, 1000, 4).unwrap().sample;
    let small = OperatorArch {
        width: 12,
        layers: 2,
        ..arch()
    };
    let mut model = OperatorModel::new(*code.layout(), small, 2).unwrap();
    let mut adam = Adam::new(model.param_len(), 1e-2);
    let mut grad = vec![0.0; model.param_len()];
    let batch = 200;
    let mut rng = stream_rng(8, 0);
    for step in 0..3000 {
        use rand::Rng;
        let start = rng.random_range(0..sample.len() - batch);
        let q = sample.queries[start..start + batch].to_vec();
        let t = sample.targets[start * 10..(start + batch) * 10].to_vec();
        let part = TrainSample::new(code.clone(), q, t, 10).unwrap();
        grad.iter_mut().for_each(|g| *g = 0.0);
        pionm::operator::loss_pino_grad(&model, &part, &mut grad).unwrap();
        adam.lr = 1e-2 / (1.0 + step as f64 / 500.0);
        adam.step(model.params_mut(), &grad);
    }
    let out = model.eval(&code, &sample.queries).unwrap();
    let mut worst: f64 = 0.0;
    for n in 0..10 {
        let peak = (0..sample.len()).map(|i| sample.targets[i * 10 + n]).fold(0.0, f64::max);
        for i in 0..sample.len() {
            worst = worst.max((out[i * 10 + n] - sample.targets[i * 10 + n]).abs() / peak);
        }
    }
    println!("recall: max error relative to the step peak {worst:.4}");
    assert!(worst <= 0.10, "{worst}");
}

#[test]
fn thirty_two_codes_beat_the_untrained_baseline_fivefold() {
    let cfg = OperatorTrainConfig {
        codes: 32,
        updates_per_code: 32,
        queries: 96,
        lr: 1e-2,
        lr_half_life: 8.0,
        arch: arch(),
        warm_points: 0,
        ..Default::default()
    };
    let sampler = UniformSampler::toy_1d();
    let session = train_pionm(&sampler, &toy_build, &teacher(), &cfg).unwrap();
    let untrained = OperatorModel::new(sampler.layout(), arch(), 0).unwrap();
    let mut rng = stream_rng(77, 0);
    let (mut base, mut trained) = (0.0, 0.0);
    for _ in 0..6 {
        let code = sampler.draw(&mut rng);
        let sol = teacher().solve_grid(&toy_build(&code).unwrap()).unwrap();
        base += oracle_l1(&untrained, &code, &sol).unwrap().iter().sum::<f64>();
        trained += oracle_l1(&session.model, &code, &sol).unwrap().iter().sum::<f64>();
    }
    println!("held-out L1: untrained {base:.3}, trained {trained:.3}");
    assert!(trained * 5.0 <= base, "{trained} vs {base}");
    let best = session.report.best_trace();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
    assert!(loss_pino(&session.model, &session.samples[0]).unwrap() >= 0.0);
}

#[test]
fn canonical_layouts_make_obstacle_order_irrelevant() {
    use pionm::mfg::Obstacle;
    let layout = CodeLayout::circles(2, 2).with_canonical(true);
    let a = Obstacle::circle(&[0.0, 1.0], 2.0);
    let b = Obstacle::circle(&[-1.0, -2.0], 1.0);
    let mk = |obs: Vec<Obstacle>| {
        let s = Scenario {
            init_mean: vec![-7.0, 0.0],
            init_std: 0.2,
            target: vec![7.0, 0.0],
            obstacles: obs,
            sigma: 0.3,
        };
        BoundaryCode::encode(&s, layout).unwrap()
    };
    let model = OperatorModel::new(layout, OperatorArch::default(), 1).unwrap();
    let q = vec![0.0, 0.0, 3.0, -1.0];
    let x = model.eval(&mk(vec![a.clone(), b.clone()]), &q).unwrap();
    let y = model.eval(&mk(vec![b, a]), &q).unwrap();
    assert_eq!(x, y);
}
