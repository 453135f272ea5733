use iterseg_core::data::{synth_corpus, ShapeFamily, Split};
use iterseg_core::engine::{evaluate, mean_curve, train, IterationConfig};
use iterseg_core::metrics::LossConfig;
use iterseg_core::network::{NetworkConfig, ParameterSet};
use iterseg_core::optim::{OptimizerConfig, OptimizerKind};

#[test]
fn adam_blob() {
    let config = NetworkConfig::desk_scale();
    let samples = synth_corpus::<f32>(64, 64, 80, ShapeFamily::Blob, 20260810).unwrap();
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = Split::seeded(&ids, 48, 1).unwrap();
    let (train_set, test_set) = split.partition(&samples).unwrap();

    let mut train_cfg = IterationConfig::for_resolution(64, 80);
    train_cfg.max_iterations = 3;
    train_cfg.threshold = 0.0;
    let eval_cfg = IterationConfig::for_resolution(64, 80);
    let mut params = ParameterSet::<f32>::build(&config, 7).unwrap();
    let start = std::time::Instant::now();
    let phases: Vec<(f64, usize)> = vec![
        (1e-3, 22),
        (1e-3, 2),
        (1e-3, 2),
        (1e-3, 2),
        (1e-3, 2),
        (1e-4, 3),
        (1e-4, 3),
    ];
    let mut done = 0;
    for (round, &(lr, epochs)) in phases.iter().enumerate() {
        let opt = OptimizerConfig {
            kind: OptimizerKind::adam(),
            learning_rate: lr,
            momentum: 0.0,
            batch_size: 4,
            epochs,
        };
        let s = train(
            &mut params,
            &train_set,
            &train_cfg,
            &LossConfig::default(),
            &opt,
        )
        .unwrap();
        let last = s.last().unwrap();
        let curves = evaluate(&params, &test_set, &eval_cfg, 3).unwrap();
        let means = mean_curve(&curves);
        done += epochs;
        let _ = round;
        println!(
            "epochs {:2} (lr {lr}): train_dice {:.3} | test {} | {:.0}s",
            done,
            last.rows[0].mean_dice,
            means
                .iter()
                .map(|(i, d, _)| format!("it{i}={d:.3}"))
                .collect::<Vec<_>>()
                .join(" "),
            start.elapsed().as_secs_f64()
        );
    }
}
