use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use meshqa_annotator::{checkpoint, AnnotatorConfig, BackboneSpec, TrainedAnnotator};
use meshqa_core::curation::FilterSpec;
use meshqa_core::fixtures::release_manifest;
use meshqa_core::gltf_io::encode_glb;
use meshqa_core::manifest::{read_all, write_all};
use meshqa_core::mesh::unit_cube;
use meshqa_core::{MeshAsset, QualityScore, Source, Tag, Vec3};

fn meshqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshqa")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tetrahedron(id: &str) -> MeshAsset {
    MeshAsset::new(
        id,
        vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)],
        vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
    )
}

fn write_glb(path: &Path, mesh: &MeshAsset) {
    fs::write(path, encode_glb(&[mesh])).unwrap();
}

fn small_model(dir: &Path) -> std::path::PathBuf {
    let mut cfg = AnnotatorConfig::new(BackboneSpec::tiny(4, (8, 8), (2, 3)), 0.05, 1, 2);
    cfg.rnn_hidden = 5;
    cfg.attention_dim = 3;
    cfg.metadata_dim = 2;
    cfg.n_views = 3;
    let path = dir.join("model.ckpt");
    checkpoint::save(&TrainedAnnotator::init(&cfg).unwrap(), &path).unwrap();
    path
}

#[test]
fn help_everywhere() {
    for sub in ["render", "train", "predict", "eval", "filter", "stats", "chamfer", "serve"] {
        let o = meshqa(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage:"), "{sub}");
    }
    assert_eq!(meshqa(&["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(meshqa(&[]).status.code(), Some(2));
    assert_eq!(meshqa(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(meshqa(&["stats", "--manifest", "m.jsonl", "--bogus"]).status.code(), Some(2));
    assert_eq!(meshqa(&["filter", "--manifest", "m.jsonl"]).status.code(), Some(2));
    assert_eq!(meshqa(&["render", "--glb", "x.glb", "--out", "o", "--res", "12"]).status.code(), Some(2));
}

#[test]
fn predict_missing_inputs_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing_model = dir.path().join("ckpt.bin");
    let o = meshqa(&["predict", "--model", p(&missing_model), "--glb", "x.glb"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(p(&missing_model)), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().count(), 1);

    let model = small_model(dir.path());
    let missing_glb = dir.path().join("x.glb");
    let o = meshqa(&["predict", "--model", p(&model), "--glb", p(&missing_glb)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(p(&missing_glb)), "{}", stderr(&o));
}

#[test]
fn predict_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path());
    let cube = dir.path().join("cube.glb");
    write_glb(&cube, &unit_cube("cube"));
    let tet = dir.path().join("tet.glb");
    write_glb(&tet, &tetrahedron("tet"));
    let args = ["predict", "--model", p(&model), "--glb", p(&cube), p(&tet), "--seed", "3"];
    let a = meshqa(&args);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = meshqa(&[&args[..], &["--jobs", "1"]].concat());
    assert_eq!(a.stdout, b.stdout);
    let records = read_all(a.stdout.as_slice()).unwrap();
    assert_eq!(records.iter().map(|r| r.object_id.as_str()).collect::<Vec<_>>(), ["cube", "tet"]);
    assert!(records.iter().all(|r| r.source == Source::Model && r.confidences.is_some()));
    assert_eq!(records[0].created_at.timestamp(), 0);
}

#[test]
fn filter_writes_manifest_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let records = release_manifest(11);
    let manifest = dir.path().join("m.jsonl");
    write_all(fs::File::create(&manifest).unwrap(), &records).unwrap();
    let spec = dir.path().join("trainB.toml");
    fs::write(&spec, FilterSpec::training_set_b().to_toml()).unwrap();

    let expected: Vec<&str> = records
        .iter()
        .filter(|r| {
            r.score >= QualityScore::High
                && !r.tags.get(Tag::IsSingleColor)
                && !r.tags.get(Tag::IsScene)
                && !r.tags.get(Tag::IsTransparent)
        })
        .map(|r| r.object_id.as_str())
        .collect();

    let out = dir.path().join("b.jsonl");
    let o = meshqa(&["filter", "--manifest", p(&manifest), "--spec", p(&spec), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let kept = read_all(fs::read(&out).unwrap().as_slice()).unwrap();
    assert_eq!(kept.iter().map(|r| r.object_id.as_str()).collect::<Vec<_>>(), expected);
    let text = stdout(&o);
    assert!(text.contains(&format!("kept {} of 10000", expected.len())), "{text}");
    assert!(text.contains("0 (No)") && text.contains("1 (Yes)"));
    // every kept record has is_scene = 0
    assert!(text.contains("100.00%"));

    let out2 = dir.path().join("b2.jsonl");
    let o = meshqa(&["filter", "--manifest", p(&manifest), "--preset", "training-set-b", "--out", p(&out2)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "min_score = \"great\"\n").unwrap();
    let o = meshqa(&["filter", "--manifest", p(&manifest), "--spec", p(&bad), "--out", p(&out2)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.toml"));
}

#[test]
fn stats_reports_release_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    write_all(fs::File::create(&manifest).unwrap(), &release_manifest(3)).unwrap();
    let o = meshqa(&["stats", "--manifest", p(&manifest)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for pct in ["5.02%", "40.55%", "2.36%", "2.33%", "18.68%"] {
        assert!(text.contains(pct), "{pct} missing from\n{text}");
    }
    assert!(text.contains("n = 10000"));
}

#[test]
fn chamfer_fixture_directories() {
    let dir = tempfile::tempdir().unwrap();
    let (r, a, b) = (dir.path().join("ref"), dir.path().join("a"), dir.path().join("b"));
    for d in [&r, &a, &b] {
        fs::create_dir(d).unwrap();
    }
    // Identical meshes sample identical clouds, so their distance is 0
    // exactly; a tetrahedron against a cube is not.
    write_glb(&r.join("box.glb"), &unit_cube("box"));
    write_glb(&a.join("box.glb"), &unit_cube("box"));
    write_glb(&b.join("box.glb"), &tetrahedron("box"));
    write_glb(&r.join("pyr.glb"), &tetrahedron("pyr"));
    write_glb(&a.join("pyr.glb"), &unit_cube("pyr"));
    write_glb(&b.join("pyr.glb"), &tetrahedron("pyr"));
    write_glb(&r.join("same.glb"), &unit_cube("same"));
    write_glb(&a.join("same.glb"), &unit_cube("same"));
    write_glb(&b.join("same.glb"), &unit_cube("same"));

    let csv_path = dir.path().join("rows.csv");
    let chart = dir.path().join("chart.json");
    let args =
        ["chamfer", "--ref", p(&r), "--a", p(&a), "--b", p(&b), "--points", "500", "--seed", "7", "--out", p(&csv_path)];
    let o = meshqa(&[&args[..], &["--chart", p(&chart)]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "object_name,cd_a,cd_b,winner");
    let row = |name: &str| lines.iter().find(|l| l.starts_with(&format!("{name},"))).unwrap().split(',').collect::<Vec<_>>();
    assert_eq!(row("box")[1], "0");
    assert!(row("box")[2].parse::<f64>().unwrap() > 0.0);
    assert_eq!(row("box")[3], "A");
    assert_eq!(row("pyr")[2], "0");
    assert_eq!(row("pyr")[3], "B");
    assert_eq!(&row("same")[1..], ["0", "0", "TIE"]);
    assert_eq!(lines.last().unwrap(), &"# wins: A=1 B=1 TIE=1");
    let chart: serde_json::Value = serde_json::from_str(&fs::read_to_string(&chart).unwrap()).unwrap();
    assert_eq!(chart["objects"], serde_json::json!(["box", "pyr", "same"]));

    let again = meshqa(&args[..args.len() - 2]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(stdout(&again), csv);

    fs::remove_file(b.join("pyr.glb")).unwrap();
    let o = meshqa(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pyr"), "{}", stderr(&o));
}

#[test]
fn render_writes_identical_stacks() {
    let dir = tempfile::tempdir().unwrap();
    let cube = dir.path().join("cube.glb");
    write_glb(&cube, &unit_cube("cube"));
    let run = |out: &Path| {
        let o = meshqa(&["render", "--glb", p(&cube), "--out", p(out), "--views", "4", "--res", "16x20", "--seed", "9", "--edges"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    let (o1, o2) = (dir.path().join("r1"), dir.path().join("r2"));
    run(&o1);
    run(&o2);
    let mut names: Vec<String> =
        fs::read_dir(o1.join("cube")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["poses.json", "view_000.png", "view_001.png", "view_002.png", "view_003.png"]);
    for n in &names {
        assert_eq!(fs::read(o1.join("cube").join(n)).unwrap(), fs::read(o2.join("cube").join(n)).unwrap(), "{n}");
    }
    let img = image_size(&fs::read(o1.join("cube/view_000.png")).unwrap());
    assert_eq!(img, (20, 16));
}

/// (width, height) from a PNG IHDR chunk.
fn image_size(png: &[u8]) -> (u32, u32) {
    let be = |b: &[u8]| u32::from_be_bytes(b.try_into().unwrap());
    (be(&png[16..20]), be(&png[20..24]))
}

#[test]
fn toy_train_then_predict_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("toy.ckpt");
    let o = meshqa(&["train", "--toy", "12", "--epochs", "1", "--seed", "4", "--out", p(&model)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("epoch   1"), "{}", stdout(&o));
    let loaded = checkpoint::load(&model).unwrap();
    assert_eq!(loaded.config.epochs, 1);
    assert_eq!(loaded.config.seed, 4);

    let cube = dir.path().join("cube.glb");
    write_glb(&cube, &unit_cube("cube"));
    let tet = dir.path().join("tet.glb");
    write_glb(&tet, &tetrahedron("tet"));
    let preds = dir.path().join("preds.jsonl");
    let o = meshqa(&["predict", "--model", p(&model), "--glb", p(&tet), p(&cube), "--out", p(&preds)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    // labels listed in a different order than the predictions
    let mut labels = read_all(fs::read(&preds).unwrap().as_slice()).unwrap();
    labels.reverse();
    for l in &mut labels {
        l.source = Source::Human;
        l.confidences = None;
        l.annotator_id = Some("ann".into());
    }
    let label_path = dir.path().join("labels.jsonl");
    write_all(fs::File::create(&label_path).unwrap(), &labels).unwrap();
    let json = dir.path().join("report.json");
    let o = meshqa(&["eval", "--predictions", p(&preds), "--labels", p(&label_path), "--json", p(&json)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["score_accuracy"], 1.0);
    assert_eq!(report["n_samples"], 2);

    labels[0].object_id = "ghost".into();
    write_all(fs::File::create(&label_path).unwrap(), &labels).unwrap();
    let o = meshqa(&["eval", "--predictions", p(&preds), "--labels", p(&label_path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ghost"));
}
