use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn smot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smot")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(str::to_owned)
        .collect()
}

fn hash(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn minimal_scene_has_one_row_per_frame_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("scene.cfg");
    fs::write(&cfg, "# one object\nscene.n_objects=1\nscene.frames=5\nseed=4\n").unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        let o = smot(&["simulate", "-c", p(&cfg), "--out", p(d)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(data_lines(&a.join("gt.txt")).len(), 5);
    for f in ["gt.txt", "embeddings.txt", "manifest.txt"] {
        assert_eq!(hash(&a.join(f)), hash(&b.join(f)), "{f}");
    }
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=4") && manifest.contains("config_sha256="));

    // --seed overrides the file
    let c = t.path().join("c");
    smot(&["simulate", "-c", p(&cfg), "--out", p(&c), "--seed", "5"]);
    assert!(fs::read_to_string(c.join("manifest.txt")).unwrap().contains("seed=5"));
    assert_ne!(hash(&a.join("gt.txt")), hash(&c.join("gt.txt")));
}

#[test]
fn errors_map_to_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let o = smot(&["simulate", "--out", p(t.path()), "--set", "scene.frames=0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("scene.frames"), "{}", stderr(&o));

    let cfg = t.path().join("bad.cfg");
    fs::write(&cfg, "seed=1\n\nscene.frames=ten\n").unwrap();
    let o = smot(&["simulate", "-c", p(&cfg), "--out", p(t.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(&format!("{}:3", cfg.display())), "{}", stderr(&o));

    assert_eq!(code(&smot(&["track", "--bogus"])), 1);
    assert_eq!(code(&smot(&[])), 1);
    assert_eq!(code(&smot(&["simulate", "--set", "scene.nope=1"])), 1);
    assert_eq!(code(&smot(&["--help"])), 0);

    let gt = t.path().join("gt.txt");
    fs::write(&gt, "1,1,0,0,10,10,1,1,1\n2,1,0,0,10,oops,1,1,1\n").unwrap();
    let o = smot(&["eval", "--gt", p(&gt), "--results", p(&gt)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gt.txt:2"), "{}", stderr(&o));
    let o = smot(&["eval", "--gt", p(&gt), "--results", p(&gt), "--gate", "1.5"]);
    assert_eq!(code(&o), 1);
    let o = smot(&["track", "--scene", p(&t.path().join("missing"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn static_oracle_scene_reproduces_gt_up_to_renaming() {
    let t = tempfile::tempdir().unwrap();
    let s = t.path().join("s");
    let o = smot(&[
        "simulate", "--out", p(&s), "--seed", "2",
        "--set", "scene.n_objects=3", "--set", "scene.frames=10",
        "--set", "scene.velocity_x=0,0", "--set", "scene.velocity_y=0,0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = t.path().join("r.txt");
    let o = smot(&["track", "--scene", p(&s), "--out", p(&r), "--set", "detector.confidence_noise_sigma=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(&r).unwrap().starts_with("# frame,id,x,y,w,h,conf,-1,-1,-1\n"));

    let boxes = |path: &Path| -> BTreeMap<(String, String), String> {
        data_lines(path)
            .into_iter()
            .map(|l| {
                let c: Vec<&str> = l.split(',').collect();
                ((c[0].to_string(), c[1].to_string()), c[2..6].join(","))
            })
            .collect()
    };
    let gt = boxes(&s.join("gt.txt"));
    let res = boxes(&r);
    assert_eq!(gt.len(), res.len());
    // a single renaming maps every gt row onto a result row with the same box
    let mut rename: BTreeMap<String, String> = BTreeMap::new();
    for ((f, id), b) in &gt {
        let (pid, _) = res
            .iter()
            .find(|((rf, _), rb)| rf == f && *rb == b)
            .map(|((_, rid), rb)| (rid.clone(), rb))
            .expect("box reproduced");
        assert_eq!(rename.entry(id.clone()).or_insert(pid.clone()), &pid);
    }
    assert_eq!(rename.values().collect::<BTreeSet<_>>().len(), rename.len());

    let o = smot(&["eval", "--gt", p(&s.join("gt.txt")), "--results", p(&r), "--json", p(&t.path().join("m.json"))]);
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(m["mota"], 1.0);
    assert_eq!(m["idf1"], 1.0);
}

#[test]
fn empty_scene_gives_header_only_results() {
    let t = tempfile::tempdir().unwrap();
    let s = t.path().join("s");
    assert_eq!(code(&smot(&["simulate", "--out", p(&s), "--set", "scene.n_objects=0", "--set", "scene.frames=3"])), 0);
    let r = t.path().join("r.txt");
    let o = smot(&["track", "--scene", p(&s), "--out", p(&r)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&r).unwrap(), "# frame,id,x,y,w,h,conf,-1,-1,-1\n");
}

#[test]
fn disabling_the_linker_splits_an_occluded_identity() {
    let t = tempfile::tempdir().unwrap();
    let s = t.path().join("s");
    let o = smot(&[
        "simulate", "--out", p(&s), "--seed", "9",
        "--set", "scene.n_objects=1", "--set", "scene.frames=40",
        "--set", "scene.occlusions_per_object=1", "--set", "scene.occlusion_len=5,5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ids = |path: &Path| data_lines(path).iter().map(|l| l.split(',').nth(1).unwrap().to_string()).collect::<BTreeSet<_>>().len();
    let (on, off) = (t.path().join("on.txt"), t.path().join("off.txt"));
    assert_eq!(code(&smot(&["track", "--scene", p(&s), "--out", p(&on)])), 0);
    assert_eq!(code(&smot(&["track", "--scene", p(&s), "--out", p(&off), "--no-linker"])), 0);
    assert_eq!(ids(&on), 1);
    assert!(ids(&off) > 1);
}

#[test]
fn eval_swap_instance_and_frame_union() {
    let t = tempfile::tempdir().unwrap();
    let gt = t.path().join("gt.txt");
    let pr = t.path().join("pred.txt");
    let mut g = String::new();
    let mut q = String::new();
    for f in 1..=4 {
        g += &format!("{f},1,0,0,10,10,1,1,1\n{f},2,100,0,10,10,1,1,1\n");
        let (a, b) = if f < 3 { (0, 100) } else { (100, 0) };
        q += &format!("{f},1,{a},0,10,10,1,-1,-1,-1\n{f},2,{b},0,10,10,1,-1,-1,-1\n");
    }
    fs::write(&gt, &g).unwrap();
    fs::write(&pr, &q).unwrap();
    let json = t.path().join("m.json");
    let o = smot(&["eval", "--gt", p(&gt), "--results", p(&pr), "--json", p(&json)]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("MOTA") && stdout.contains("IDF1"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!((m["mota"].as_f64(), m["idf1"].as_f64()), (Some(0.75), Some(0.5)));
    assert_eq!((m["id_switches"].as_u64(), m["transfers"].as_u64()), (Some(2), Some(2)));

    // predictions on a frame the ground truth never mentions are false positives
    fs::write(&pr, format!("{g}9,7,0,0,10,10,1,-1,-1,-1\n")).unwrap();
    smot(&["eval", "--gt", p(&gt), "--results", p(&pr), "--json", p(&json)]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!((m["fp"].as_u64(), m["fn"].as_u64()), (Some(1), Some(0)));
}

#[test]
fn replay_reproduces_recorded_run() {
    let t = tempfile::tempdir().unwrap();
    let s = t.path().join("s");
    smot(&["simulate", "--out", p(&s), "--seed", "6", "--set", "scene.frames=15", "--set", "scene.jitter_sigma=1"]);
    let (live, rec, replayed) = (t.path().join("live.txt"), t.path().join("run.replay"), t.path().join("replayed.txt"));
    let o = smot(&["track", "--scene", p(&s), "--out", p(&live), "--record", p(&rec), "--set", "detector.regression_noise_sigma=2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = smot(&["track", "--scene", p(&s), "--replay", p(&rec), "--out", p(&replayed)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&live).unwrap(), fs::read(&replayed).unwrap());

    fs::write(&rec, "Q,1,0,0.5,1,2,3\n").unwrap();
    let o = smot(&["track", "--scene", p(&s), "--replay", p(&rec), "--out", p(&replayed)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(":1"), "{}", stderr(&o));
}

#[test]
fn bench_reports_exact_query_counts() {
    let t = tempfile::tempdir().unwrap();
    let json = t.path().join("bench.json");
    let o = smot(&[
        "bench", "--json", p(&json),
        "--set", "bench.objects=1,10,50", "--set", "bench.frames=12", "--set", "bench.warmup=2",
        "--set", "scene.velocity_x=0,0", "--set", "scene.velocity_y=0,0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    for (b, n) in r["buckets"].as_array().unwrap().iter().zip([1u64, 10, 50]) {
        assert_eq!(b["objects"].as_u64(), Some(n));
        // every frame after the first queries one anchor per object
        assert_eq!(b["queries"].as_u64(), Some(n * 11));
        assert_eq!(b["query_contract_violations"].as_u64(), Some(0));
        assert_eq!(b["births_after_first_frame"].as_u64(), Some(0));
        assert!(b["timing"]["p95_ms"].as_f64().unwrap() > 0.0);
    }
}
