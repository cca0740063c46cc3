use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn foldgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foldgen"))
        .args(args)
        .env("SGVL_THREADS", "1")
        .output()
        .expect("spawn foldgen")
}

fn ok(args: &[&str]) -> String {
    let out = foldgen(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let text = format!(
        "run.out_dir = {}\nrun.checkpoint_every = 1\nmodel.d = 16\nmodel.n_heads = 4\nmodel.ffn_hidden = 32\n\
         data.n_understand = 1\ndata.n_generate = 1\ndata.pretrain_batch = 2\ndata.sft_pool = 8\ndata.sft_batch = 2\n\
         pretrain.steps = 3\ns1.steps = 2\ns2.steps = 2\nsft.steps = 2\n{extra}",
        dir.join("run").display()
    );
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

/// `name -> (group, crc)` from `inspect-checkpoint` output.
fn tensor_crcs(listing: &str) -> Vec<(String, String, String)> {
    listing
        .lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f.len() == 4).then(|| (f[0].to_string(), f[2].to_string(), f[3].to_string()))
        })
        .collect()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(foldgen(&[]).status.code(), Some(2));
    assert_eq!(foldgen(&["train", "s9"]).status.code(), Some(2));
}

#[test]
fn gen_data_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["gen-data", "--seed", "5", "--count", "3", "--out", out.to_str().unwrap()]);
    let manifest = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    assert!(manifest.starts_with("5\t"));
    assert!(out.join("scene_000007.ppm").exists());

    let missing = foldgen(&["caption", "/nonexistent.sgvl", "x.ppm"]);
    assert_eq!(missing.status.code(), Some(4));
    let err = String::from_utf8(missing.stderr).unwrap();
    assert!(err.starts_with("error: io: "), "{err}");
    assert_eq!(err.lines().count(), 1);

    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "model.wings = 2\n").unwrap();
    let r = foldgen(&["pretrain-text", "--config", bad_cfg.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8(r.stderr).unwrap().starts_with("error: config: "));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let run = dir.path().join("run");
    let p = |n: &str| run.join(n).to_str().unwrap().to_string();

    // stages out of order are refused
    assert_eq!(foldgen(&["train", "--config", &cfg, "s2"]).status.code(), Some(4));

    ok(&["pretrain-text", "--config", &cfg]);
    let pre = fs::read(p("pretrain.sgvl")).unwrap();
    ok(&["train", "--config", &cfg, "s1"]);
    let pre_list = tensor_crcs(&ok(&["inspect-checkpoint", &p("pretrain.sgvl")]));
    let s1_list = tensor_crcs(&ok(&["inspect-checkpoint", &p("s1.sgvl")]));
    let mut compared = 0;
    for (name, group, crc) in &s1_list {
        if group == "text_core" || group == "attention" {
            let before = pre_list.iter().find(|t| &t.0 == name).unwrap();
            assert_eq!(&before.2, crc, "{name}");
            compared += 1;
        }
    }
    assert!(compared > 10);
    assert!(s1_list.iter().any(|t| t.1 == "vision_specific"));

    ok(&["train", "--config", &cfg, "s2"]);
    ok(&["train", "--config", &cfg, "sft"]);
    let info = ok(&["inspect-checkpoint", &p("sft.sgvl")]);
    assert!(info.contains("train.provenance=pretrain:3,s1:2,s2:2,sft:2"), "{info}");
    let metrics = fs::read_to_string(p("metrics_sft.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,stage,text_loss,image_loss,total,lr"));
    assert_eq!(metrics.lines().count(), 3);

    // same config, same seed: byte-identical artifacts
    let dir2 = tempfile::tempdir().unwrap();
    let cfg2 = tiny_config(dir2.path(), "");
    ok(&["pretrain-text", "--config", &cfg2]);
    assert_eq!(fs::read(dir2.path().join("run/pretrain.sgvl")).unwrap(), pre);
    assert_eq!(
        fs::read(dir2.path().join("run/metrics_pretrain.csv")).unwrap(),
        fs::read(p("metrics_pretrain.csv")).unwrap()
    );

    // a run with a different fold refuses the checkpoints
    let dir3 = tempfile::tempdir().unwrap();
    let cfg3 = tiny_config(dir3.path(), "fold.n = 2\n");
    fs::create_dir_all(dir3.path().join("run")).unwrap();
    fs::copy(p("pretrain.sgvl"), dir3.path().join("run/pretrain.sgvl")).unwrap();
    assert_eq!(foldgen(&["train", "--config", &cfg3, "s1"]).status.code(), Some(3));

    // inference commands
    let data = dir.path().join("data");
    ok(&["gen-data", "--count", "1", "--out", data.to_str().unwrap()]);
    let img = data.join("scene_000000.ppm");
    let cap = ok(&["caption", &p("sft.sgvl"), img.to_str().unwrap()]);
    assert_eq!(cap.lines().count(), 1);

    let out_a = dir.path().join("a.ppm");
    let out_b = dir.path().join("b.ppm");
    let prompt = "a red circle at top left";
    ok(&["generate", &p("sft.sgvl"), prompt, "--cfg-scale", "1.0", "--seed", "3", "-o", out_a.to_str().unwrap()]);
    ok(&["generate", &p("sft.sgvl"), prompt, "--conditional", "--seed", "3", "-o", out_b.to_str().unwrap()]);
    assert_eq!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap());

    let sim = ok(&["analyze", &p("sft.sgvl"), img.to_str().unwrap(), "--similarity"]);
    assert_eq!(sim.lines().next(), Some("layer,similarity"));
    assert_eq!(sim.lines().count(), 4);
    let dump = dir.path().join("attn");
    let loc = ok(&[
        "analyze",
        &p("sft.sgvl"),
        img.to_str().unwrap(),
        "--locality",
        "--dump-attention",
        dump.to_str().unwrap(),
    ]);
    assert_eq!(loc.lines().next(), Some("layer,task,mean_distance"));
    assert_eq!(loc.lines().count(), 5);
    assert!(ok(&["inspect-checkpoint", dump.join("attention_generation.sgvl").to_str().unwrap()]).contains("attn.layer1"));

    let eval = ok(&["eval", &p("sft.sgvl"), "--n", "2", "--n-generations", "1"]);
    assert!(eval.starts_with("caption_exact_match,"));

    // a flipped byte is caught
    let mut bytes = fs::read(p("sft.sgvl")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = dir.path().join("bad.sgvl");
    fs::write(&bad, bytes).unwrap();
    let r = foldgen(&["inspect-checkpoint", bad.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8(r.stderr).unwrap().contains("CRC"));

    // malformed image
    let junk = dir.path().join("junk.ppm");
    fs::write(&junk, b"P3\n1 1\n255\n0 0 0\n").unwrap();
    assert_eq!(foldgen(&["caption", &p("sft.sgvl"), junk.to_str().unwrap()]).status.code(), Some(4));
}
