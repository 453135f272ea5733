//! End-to-end tests of the `iterseg` binary: artifacts, exit codes,
//! determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn iterseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iterseg"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    iterseg()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_desk_config(dir: &Path) -> PathBuf {
    let path = dir.join("desk.cfg");
    std::fs::write(
        &path,
        "seed = 11\n\
         network.height = 32\n\
         network.width = 32\n\
         network.stages = 2\n\
         network.base_channels = 4\n\
         iter.max_iterations = 3\n\
         opt.lr = 0.02\n\
         opt.momentum = 0.6\n\
         opt.batch_size = 4\n\
         opt.epochs = 2\n\
         synth.count = 8\n\
         synth.family = disk\n\
         synth.train = 6\n",
    )
    .unwrap();
    path
}

#[test]
fn train_writes_checkpoint_that_reloads_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_desk_config(dir.path());
    let out = run(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let checkpoint = dir.path().join("run/checkpoint.iseg");
    assert!(checkpoint.is_file());
    assert!(dir.path().join("run/train_trace.csv").is_file());
    assert!(dir.path().join("run/resolved.cfg").is_file());

    // reload through the library and save again: bytes must match
    let net = iterseg_core::NetworkConfig {
        input_height: 32,
        input_width: 32,
        stages: 2,
        base_channels: 4,
        merge_points: vec![1, 2],
    };
    let params = iterseg_core::ParameterSet::<f32>::load_checkpoint(&checkpoint, &net).unwrap();
    let copy = dir.path().join("copy.iseg");
    params.save_checkpoint(&copy).unwrap();
    assert_eq!(
        std::fs::read(&checkpoint).unwrap(),
        std::fs::read(&copy).unwrap()
    );
}

#[test]
fn missing_masks_directory_exits_3_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("data/images")).unwrap();
    // no masks/ directory
    let config = dir.path().join("bad.cfg");
    std::fs::write(
        &config,
        "network.height = 32\nnetwork.width = 32\nnetwork.stages = 2\nnetwork.base_channels = 4\ndata.root = data\n",
    )
    .unwrap();
    let out = run(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("masks"),
        "stderr should name the path: {stderr}"
    );
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "no.such.key = 1\n").unwrap();
    let out = run(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_config_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_desk_config(dir.path());
    let out = run(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success());

    // other.cfg implies a different topology
    let other = dir.path().join("other.cfg");
    std::fs::write(
        &other,
        "network.height = 32\nnetwork.width = 32\nnetwork.stages = 2\nnetwork.base_channels = 8\n",
    )
    .unwrap();
    let out = run(
        &[
            "evaluate",
            "--config",
            other.to_str().unwrap(),
            "--checkpoint",
            "run/checkpoint.iseg",
            "--out",
            "eval",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rerun_with_identical_config_and_seed_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_desk_config(dir.path());
    for out_dir in ["a", "b"] {
        let out = run(
            &[
                "train",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out_dir,
            ],
            dir.path(),
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(
        std::fs::read(dir.path().join("a/train_trace.csv")).unwrap(),
        std::fs::read(dir.path().join("b/train_trace.csv")).unwrap(),
        "train traces must be byte-identical"
    );
    assert_eq!(
        std::fs::read(dir.path().join("a/checkpoint.iseg")).unwrap(),
        std::fs::read(dir.path().join("b/checkpoint.iseg")).unwrap(),
        "checkpoints must be byte-identical"
    );
}

fn train_and_synth(dir: &Path) -> PathBuf {
    let config = write_desk_config(dir);
    let out = run(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "run",
        ],
        dir,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = run(
        &[
            "synth",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "corpus",
        ],
        dir,
    );
    assert!(out.status.success());
    config
}

#[test]
fn infer_writes_binary_mask_soft_map_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = train_and_synth(dir.path());
    let out = run(
        &[
            "infer",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            "run/checkpoint.iseg",
            "--image",
            "corpus/images/disk_000.pgm",
            "--out",
            "inf",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // mask PNG holds only {0, 255}
    let mask = image::open(dir.path().join("inf/disk_000_mask.png")).unwrap();
    let gray = mask.to_luma8();
    assert!(gray.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));

    // soft map is a 16-bit PGM
    let soft = std::fs::read(dir.path().join("inf/disk_000_soft.pgm")).unwrap();
    assert!(soft.starts_with(b"P5\n32 32\n65535\n"));

    // the trace parses and its final row satisfies the stopping rule that
    // the run reported (converged=true on stdout -> conv_sum < Th)
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let traces = iterseg_core::trace::read_trace_csv(dir.path().join("inf/trace.csv")).unwrap();
    assert_eq!(traces.len(), 1);
    let threshold = 0.001 * 32.0 * 32.0;
    if stdout.contains("converged=true") {
        assert!(traces[0].records.last().unwrap().conv_sum < threshold);
    }
    for (i, rec) in traces[0].records.iter().enumerate() {
        assert_eq!(rec.iteration, i + 1);
    }
}

#[test]
fn infer_with_max_iter_1_gives_single_row_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = train_and_synth(dir.path());
    let out = run(
        &[
            "infer",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            "run/checkpoint.iseg",
            "--image",
            "corpus/images/disk_001.pgm",
            "--max-iter",
            "1",
            "--out",
            "inf1",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let traces = iterseg_core::trace::read_trace_csv(dir.path().join("inf1/trace.csv")).unwrap();
    assert_eq!(traces[0].records.len(), 1);
}

#[test]
fn evaluate_csv_has_expected_rows_and_metric_identity() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_desk_config(dir.path());
    let out = run(
        &[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let out = run(
        &[
            "evaluate",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            "run/checkpoint.iseg",
            "--out",
            "eval",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let mut rdr = csv::Reader::from_path(dir.path().join("eval/evaluate.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    // 2 test images x 3 iterations + 1 summary row
    assert_eq!(rows.len(), 2 * 3 + 1);
    assert_eq!(&rows[rows.len() - 1][0], "mean");
    for row in &rows[..rows.len() - 1] {
        let dc: f64 = row[2].parse().unwrap();
        let jc: f64 = row[3].parse().unwrap();
        assert!(
            (jc - dc / (2.0 - dc)).abs() < 1e-6,
            "JC = DC/(2-DC) must hold per row: dc={dc} jc={jc}"
        );
    }
}

#[test]
fn identity_augment_spec_copies_files() {
    let dir = tempfile::tempdir().unwrap();
    let base = write_desk_config(dir.path());
    let out = run(
        &[
            "synth",
            "--config",
            base.to_str().unwrap(),
            "--out",
            "corpus",
        ],
        dir.path(),
    );
    assert!(out.status.success());

    let config = dir.path().join("augment.cfg");
    std::fs::write(
        &config,
        "network.height = 32\nnetwork.width = 32\nnetwork.stages = 2\nnetwork.base_channels = 4\n\
         data.root = corpus\n\
         augment.flips = identity\n\
         augment.rotation_min = 0\naugment.rotation_max = 0\naugment.rotation_step = 1\n\
         augment.offsets_x = 0\naugment.offsets_y = 0\n",
    )
    .unwrap();
    let out = run(
        &[
            "augment",
            "--config",
            config.to_str().unwrap(),
            "--out",
            "aug",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // train split (6 ids) -> 6 output files, each byte-identical to its source
    let entries: Vec<_> = std::fs::read_dir(dir.path().join("aug/images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(entries.len(), 6);
    for path in entries {
        let name = path.file_name().unwrap().to_str().unwrap();
        let source = name.replace("_a0000", "");
        let original = dir.path().join("corpus/images").join(&source);
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&original).unwrap(),
            "identity variant must copy {source}"
        );
    }
}
