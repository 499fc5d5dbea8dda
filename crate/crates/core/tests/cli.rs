use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
charset = "abcdefghijklmnopqrstuvwxyz"

[corpus]
count = 6

[render]
line_height = 32

[data]
target_count = 4
eval_count = 3

[model]
compact_channels = [2, 3, 3, 4, 4]
height = 32
encoder_hidden = 4
decoder_hidden = 4
attention_dim = 4
embed_dim = 3
max_decode_len = 14
batch_size = 4

[pretrain]
epochs = 1

[adapt]
cycles = 2

[adapt.selection]
kind = "none"
"#;

fn selftrain(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selftrain"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .arg("--run-dir")
        .arg(dir.join("run"))
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_gen_is_deterministic() {
    let dir = setup();
    let out = selftrain(dir.path(), &["synth-gen", "--split", "target"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let split = dir.path().join("run/synth/target");
    let manifest = std::fs::read_to_string(split.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    assert!(split.join("config.resolved.toml").exists());
    let first: Vec<Vec<u8>> = (0..4).map(|i| std::fs::read(split.join(format!("images/{i:06}.png"))).unwrap()).collect();

    let again = selftrain(dir.path(), &["synth-gen", "--split", "target"]);
    assert!(again.status.success());
    assert_eq!(std::fs::read_to_string(split.join("manifest.tsv")).unwrap(), manifest);
    for (i, bytes) in first.iter().enumerate() {
        assert_eq!(&std::fs::read(split.join(format!("images/{i:06}.png"))).unwrap(), bytes);
    }

    let reseeded = selftrain(dir.path(), &["--seed", "4", "synth-gen", "--split", "target"]);
    assert!(reseeded.status.success());
    assert_ne!(std::fs::read_to_string(split.join("manifest.tsv")).unwrap(), manifest);
}

#[test]
fn full_pipeline_writes_its_artifacts() {
    let dir = setup();
    let run = dir.path().join("run");
    for args in [&["pretrain"][..], &["adapt"], &["adapt", "--name", "t", "--set", "adapt.selection.kind=threshold", "--set", "adapt.selection.tau=0.01"], &["report"]] {
        let out = selftrain(dir.path(), args);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
    }
    for f in ["model0.ckpt", "model0.ckpt.meta", "pretrain.json", "model0_eval/records.tsv", "model0_eval/eval.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let cycles = std::fs::read_to_string(run.join("adapt_none/cycles.jsonl")).unwrap();
    assert_eq!(cycles.lines().count(), 2);
    assert!(run.join("adapt_none/checkpoints/last.ckpt").exists());
    assert!(run.join("adapt_none/summary.json").exists());

    let sweep = std::fs::read_to_string(run.join("report/sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "tau,cer,wer,status");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("none,"));
    assert!(lines[2].starts_with("0.01,"));
    let curve = std::fs::read_to_string(run.join("report/confidence_curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("fraction,count,cer,wer"));

    let eval = selftrain(dir.path(), &["evaluate", "--checkpoint", run.join("adapt_none/checkpoints/last.ckpt").to_str().unwrap()]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    assert_eq!(
        std::fs::read_to_string(run.join("eval/eval.csv")).unwrap().lines().next(),
        Some("cer,wer,count")
    );

    // Rerunning with the same seeds reproduces the metrics byte for byte.
    let before = std::fs::read(run.join("adapt_none/cycles.jsonl")).unwrap();
    let out = selftrain(dir.path(), &["adapt"]);
    assert!(out.status.success());
    assert_eq!(std::fs::read(run.join("adapt_none/cycles.jsonl")).unwrap(), before);
    let resumed = selftrain(dir.path(), &["adapt", "--resume"]);
    assert!(resumed.status.success());
    assert_eq!(std::fs::read(run.join("adapt_none/cycles.jsonl")).unwrap(), before);
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = setup();
    let out = selftrain(dir.path(), &["adapt"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("model0.ckpt"));
    let out = selftrain(dir.path(), &["evaluate", "--checkpoint", "/nonexistent/x.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn inconsistent_configs_name_the_field() {
    let dir = setup();
    let cases: &[(&[&str], &str)] = &[
        (&["adapt.selection.kind=threshold"], "adapt.selection.tau"),
        (&["adapt.selection.tau=0.5"], "adapt.selection.tau"),
        (&["adapt.selection.kind=threshold", "adapt.selection.tau=0.5", "adapt.selection.tau_quantile=0.3"], "adapt.selection.tau_quantile"),
        (&["adapt.selection.kind=top_fraction", "adapt.selection.tau_quantile=0.3"], "adapt.selection.tau_quantile"),
        (&["adapt.selection.schedule=[[1, 0.5]]"], "adapt.selection.schedule"),
        (&["adapt.selection.kind=top_fraction", "adapt.selection.schedule=[[1, 1.5], [1, 1.0]]"], "adapt.selection"),
        (&["model.label_smoothing=1.0"], "model.label_smoothing"),
        (&["model.height=40"], "model.height"),
        (&["model.max_decode_len=0"], "model.max_decode_len"),
        (&["model.bogus=1"], "model.bogus"),
        (&["model.encoder_hidden=\"wide\""], "model.encoder_hidden"),
        (&["charset=\"aa\""], "charset"),
        (&["corpus.count=0"], "corpus.count"),
        (&["corpus.mode=\"poetry\""], "corpus.mode"),
        (&["render.target.fg_intensity=[0.5, 0.6]", "render.target.bg_intensity=[0.5, 0.6]"], "render.target"),
        (&["augment.strong.grid=false"], "augment.strong.grid"),
        (&["pretrain.epochs=0"], "pretrain.epochs"),
        (&["data.target_count=0"], "data.target_count"),
    ];
    for (sets, field) in cases {
        let mut args = vec![];
        for s in sets.iter() {
            args.push("--set");
            args.push(*s);
        }
        args.push("synth-gen");
        let out = selftrain(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{sets:?}: {}", stderr(&out));
        assert!(stderr(&out).contains(&format!("`{field}")), "{sets:?} should name {field}: {}", stderr(&out));
    }
}
