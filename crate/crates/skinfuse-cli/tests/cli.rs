//! End-to-end checks of the `skinfuse` binary: determinism of each command,
//! exit codes, settings-file precedence, and agreement between the CLI's
//! artifacts and the library's own computations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use skinfuse::data::{load_dataset, Split, TaskSchema};
use skinfuse::eval::dump::read_prediction_dump;
use skinfuse::eval::{compute_metrics, fuse_cases, FusionWeights};
use skinfuse::model::{load_checkpoint, Model, ModelConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skinfuse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn assert_exit_2(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(out.status.code(), Some(2), "command {:?} should exit 2", args);
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under a directory, keyed by relative path.
fn dir_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, rel: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(root.join(rel)).expect("readable dir") {
            let entry = entry.unwrap();
            let child = rel.join(entry.file_name());
            if entry.file_type().unwrap().is_dir() {
                walk(root, &child, out);
            } else {
                out.insert(child.clone(), std::fs::read(root.join(&child)).unwrap());
            }
        }
    }
    let mut map = BTreeMap::new();
    walk(root, Path::new(""), &mut map);
    map
}

fn gen_small_dataset(dir: &Path) {
    run_ok(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--cases",
        "12",
        "--size",
        "16",
        "--seed",
        "1",
    ]);
}

fn content_hash_line(manifest: &Path) -> String {
    std::fs::read_to_string(manifest)
        .unwrap()
        .lines()
        .find(|l| l.starts_with("content_hash"))
        .expect("manifest carries a content hash")
        .to_string()
}

#[test]
fn generated_datasets_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for dir in [&a, &b] {
        gen_small_dataset(dir);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b), "same flags and seed must give the same bytes");

    run_ok(&["gen-data", "--out", c.to_str().unwrap(), "--cases", "12", "--size", "16",
             "--seed", "2"]);
    assert_ne!(dir_bytes(&a), dir_bytes(&c), "a different seed must change the data");
}

#[test]
fn usage_errors_exit_2() {
    // Required flag missing (clap's own usage error).
    let out = run(&["gen-data", "--cases", "5"]);
    assert_eq!(out.status.code(), Some(2));

    // Unknown settings key.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("settings.txt");
    std::fs::write(&cfg, "epoochs = 3\n").unwrap();
    let stderr = assert_exit_2(&[
        "gen-data",
        "--out",
        tmp.path().join("d").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert!(stderr.contains("epoochs"), "error names the bad key: {stderr}");
}

#[test]
fn inverted_snr_warns_but_still_generates() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    let out = run_ok(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--cases",
        "6",
        "--size",
        "8",
        "--derm-snr",
        "1.0",
        "--clin-snr",
        "4.0",
    ]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning:"), "stderr should warn: {stderr}");
    assert!(dir.join("index.csv").is_file());
}

#[test]
fn zero_epoch_training_writes_the_untrained_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_dataset(&data);
    let out = tmp.path().join("run");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "0",
        "--seed",
        "3",
    ]);

    let schema = TaskSchema::seven_point();
    let from_disk = load_checkpoint(&out.join("checkpoint"), &schema).unwrap();
    let mut config = ModelConfig::toy(
        skinfuse::model::Framework::Aff,
        skinfuse::blocks::FusionKind::Aab,
    );
    config.input_size = (16, 16);
    let fresh = Model::build(&config, &schema, 3).unwrap();
    let (a, b) = (from_disk.named_params(), fresh.named_params());
    assert_eq!(a.len(), b.len());
    for ((name_a, ta), (name_b, tb)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert!(ta.bit_eq(tb), "untrained checkpoint differs from a fresh build at {name_a}");
    }

    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace, "epoch,derm,clin,fusion,total\n");
}

#[test]
fn identical_training_runs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_dataset(&data);
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for out in [&r1, &r2] {
        run_ok(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "2",
            "--seed",
            "7",
        ]);
    }
    assert_eq!(
        dir_bytes(&r1.join("checkpoint")),
        dir_bytes(&r2.join("checkpoint")),
        "checkpoints must be bit-identical"
    );
    assert_eq!(
        std::fs::read(r1.join("trace.csv")).unwrap(),
        std::fs::read(r2.join("trace.csv")).unwrap()
    );
    assert_eq!(
        content_hash_line(&r1.join("manifest.txt")),
        content_hash_line(&r2.join("manifest.txt")),
        "run manifests must agree on the content hash"
    );
}

/// Trains once into `tmp/run` (2 epochs, seed 7) over `tmp/data`.
fn train_once(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = tmp.join("data");
    gen_small_dataset(&data);
    let run_dir = tmp.join("run");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--epochs",
        "2",
        "--seed",
        "7",
    ]);
    (data, run_dir.join("checkpoint"))
}

#[test]
fn corner_weights_reproduce_the_dermoscopic_branch_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = train_once(tmp.path());
    let eval_dir = tmp.path().join("eval");
    run_ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--weights",
        "1,0,0",
    ]);
    for table in ["accuracy.csv", "auc.csv"] {
        let text = std::fs::read_to_string(eval_dir.join(table)).unwrap();
        let row_of = |name: &str| {
            let row = text
                .lines()
                .find(|l| l.starts_with(&format!("{name},")))
                .unwrap_or_else(|| panic!("{table} has a {name} row"));
            row.split_once(',').unwrap().1.to_string()
        };
        assert_eq!(
            row_of("derm"),
            row_of("final"),
            "{table}: weights 1,0,0 must reproduce the derm row cell for cell"
        );
    }
}

#[test]
fn searched_weights_are_at_least_as_good_as_every_corner_on_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = train_once(tmp.path());
    let eval_dir = tmp.path().join("eval");
    run_ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--weights",
        "search",
        "--step",
        "0.5",
    ]);

    // Reconstruct the searched weights from the run manifest.
    let manifest = std::fs::read_to_string(eval_dir.join("manifest.txt")).unwrap();
    let field = |key: &str| -> f64 {
        manifest
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .unwrap_or_else(|| panic!("manifest records {key}"))
            .parse()
            .unwrap()
    };
    let searched = FusionWeights::new(
        field("eval.weights.derm"),
        field("eval.weights.clin"),
        field("eval.weights.fusion"),
    )
    .unwrap();

    // Score them on the validation dump against the three corner triples.
    let schema = TaskSchema::seven_point();
    let dump = read_prediction_dump(&eval_dir.join("predictions_val.csv"), &schema).unwrap();
    let preds: Vec<_> = dump.iter().map(|(_, p)| p.clone()).collect();
    let records = load_dataset(&data, &schema).unwrap();
    let val_labels: Vec<Vec<usize>> = records
        .iter()
        .filter(|r| r.split == Some(Split::Val))
        .map(|r| r.labels.clone())
        .collect();
    assert_eq!(val_labels.len(), preds.len());

    let avg_acc = |w: FusionWeights| -> f64 {
        let fused = fuse_cases(&preds, w).unwrap();
        compute_metrics(&fused, &val_labels, &schema).unwrap().avg_accuracy
    };
    let searched_score = avg_acc(searched);
    for corner in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)] {
        let corner_score = avg_acc(FusionWeights::new(corner.0, corner.1, corner.2).unwrap());
        assert!(
            searched_score >= corner_score,
            "searched weights scored {searched_score} but corner {corner:?} scored {corner_score}"
        );
    }
}

#[test]
fn evaluating_a_missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_dataset(&data);
    let stderr = assert_exit_2(&[
        "eval",
        "--checkpoint",
        tmp.path().join("no-such-checkpoint").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("eval").to_str().unwrap(),
    ]);
    assert!(stderr.contains("checkpoint"), "{stderr}");
}

/// `params` output parsed into name -> numeric value (non-numeric config
/// lines are skipped).
fn audit_map(framework: &str, block: &str) -> BTreeMap<String, u64> {
    let out = run_ok(&["params", "--framework", framework, "--block", block]);
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            let name = it.next()?.to_string();
            let value = it.next()?.parse().ok()?;
            Some((name, value))
        })
        .collect()
}

#[test]
fn parameter_audits_are_internally_consistent() {
    let mut totals = BTreeMap::new();
    for framework in ["sff", "aff"] {
        for block in ["cat", "bab", "aab"] {
            let audit = audit_map(framework, block);
            let parts = audit["clin_backbone"]
                + audit["derm_backbone"]
                + audit["attention"]
                + audit["alignment"]
                + audit["heads"];
            assert_eq!(audit["total"], parts, "{framework}/{block}: total must equal the sum");
            totals.insert((framework, block), audit.clone());
        }
    }
    // With twin backbones, two-directional attention is exactly twice the
    // one-directional projections.
    assert_eq!(
        totals[&("sff", "bab")]["attention"],
        2 * totals[&("sff", "aab")]["attention"],
        "sff: two-directional attention is twice one-directional"
    );
    // With unequal backbones, the extra direction refines the light stream,
    // so it adds one-way projections at the light widths instead.
    let light = skinfuse::model::BackboneConfig::toy_light();
    let light_way: u64 = (1..light.widths.len())
        .map(|s| skinfuse::blocks::fusion_param_count(skinfuse::blocks::FusionKind::Aab, light.widths[s]))
        .sum();
    assert_eq!(
        totals[&("aff", "bab")]["attention"],
        totals[&("aff", "aab")]["attention"] + light_way,
        "aff: the reverse direction prices at the light stream's widths"
    );
    // With no fusion parameters in play, the framework difference is exactly
    // the clinical-backbone swap.
    assert_eq!(
        totals[&("sff", "cat")]["total"] - totals[&("aff", "cat")]["total"],
        totals[&("sff", "cat")]["clin_backbone"] - totals[&("aff", "cat")]["clin_backbone"],
    );
    // Concatenation really carries zero attention and alignment parameters.
    for fw in ["sff", "aff"] {
        assert_eq!(totals[&(fw, "cat")]["attention"], 0);
        assert_eq!(totals[&(fw, "cat")]["alignment"], 0);
    }

    let bad = run(&["params", "--preset", "huge"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn ablation_grid_is_complete_consistent_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_dataset(&data);
    let (a1, a2) = (tmp.path().join("a1"), tmp.path().join("a2"));
    for out in [&a1, &a2] {
        run_ok(&[
            "ablate",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seeds",
            "2",
            "--epochs",
            "1",
            "--step",
            "0.5",
        ]);
    }
    let csv = std::fs::read_to_string(a1.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6, "one row per framework x block:\n{csv}");
    for row in &rows {
        let cells: Vec<&str> = row.split(',').collect();
        let (label, params) = (cells[0], cells[3].parse::<u64>().unwrap());
        let (fw, block) = label.split_once('/').unwrap();
        assert_eq!(
            params,
            audit_map(fw, block)["total"],
            "{label}: table params column must match the audit"
        );
    }
    assert_eq!(
        std::fs::read(a1.join("ablation.csv")).unwrap(),
        std::fs::read(a2.join("ablation.csv")).unwrap(),
        "rerunning the grid must reproduce the table bytes"
    );
}

#[test]
fn settings_files_feed_defaults_and_flags_override_them() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_dataset(&data);
    let cfg = tmp.path().join("settings.txt");
    std::fs::write(&cfg, "epochs = 0\nseed = 5\n").unwrap();

    let from_file = tmp.path().join("from_file");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        from_file.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    let trace = std::fs::read_to_string(from_file.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1, "epochs=0 from the file leaves only the header");

    let overridden = tmp.path().join("overridden");
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        overridden.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    let trace = std::fs::read_to_string(overridden.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2, "the --epochs flag must beat the file value");
}
