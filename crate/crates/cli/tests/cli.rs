use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pairforge");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("PAIRFORGE_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn accuracy(report: &str) -> f64 {
    let field = report.split_whitespace().next().unwrap();
    field.strip_prefix("accuracy=").unwrap().parse().unwrap()
}

const SUBCOMMANDS: [&str; 10] =
    ["synth", "annotate", "graph", "partition", "mine", "train", "embed", "index", "retrieve", "evaluate"];

#[test]
fn usage_errors_exit_2() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["annotate"]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["mine", "--poslists", "a", "--recon", "b", "--out", "c", "--strategy", "nope"]).status.code(), Some(2));
}

#[test]
fn every_subcommand_has_help() {
    for cmd in SUBCOMMANDS {
        let out = run(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{cmd}");
    }
}

#[test]
fn domain_errors_exit_1_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = p(dir.path(), "bad.txt");
    std::fs::write(&bad, "SCENE 0 s\nIMAGE 1 0 a 10 10\nPOINT3D 1 0 0 0 TRACK 1:0 9:0\n").unwrap();
    let out = run(&["annotate", "--recon", &bad, "--out", &p(dir.path(), "o.txt")]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error: "), "{stderr}");
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    assert!(stderr.contains("line 3"), "{stderr}");

    let out = run(&["evaluate", "--pairs", &p(dir.path(), "missing"), "--matches", &bad, "--recon", &bad]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_dump_round_trips_every_subcommand() {
    let invocations: [&[&str]; 10] = [
        &["synth", "--scenes", "3", "--grid", "2x5", "--overlap", "0.4", "--seed", "9", "--out", "d"],
        &["annotate", "--recon", "r", "--epsilon", "7", "--out", "o"],
        &["graph", "--recon", "r", "--matches", "m", "--rew", "0.25", "--out", "o"],
        &["partition", "--graph", "g", "--max-size", "12", "--out", "o"],
        &["mine", "--poslists", "p", "--recon", "r", "--strategy", "global-hard", "--b", "4", "--m", "2", "--t", "9", "--seed", "3", "--desc", "d", "--out", "o"],
        &["train", "--batches", "b", "--inputs", "i", "--recon", "r", "--head", "netvlad", "--loss", "triplet", "--alpha", "1.35", "--margin", "0.2", "--epochs", "3", "--iters", "7", "--seed", "5", "--out", "o"],
        &["embed", "--maps", "m", "--head", "gem", "--params", "p", "--out", "o"],
        &["index", "--desc", "d", "--m", "8", "--out", "o"],
        &["retrieve", "--index", "i", "--desc", "d", "--k", "12", "--out", "o"],
        &["evaluate", "--pairs", "p", "--matches", "m", "--recon", "r", "--inlier-threshold", "20"],
    ];
    let dir = tempfile::tempdir().unwrap();
    for (i, args) in invocations.iter().enumerate() {
        let mut full = vec!["--deterministic", "--threads", "3", "--dump-config"];
        full.extend_from_slice(args);
        let dumped = ok(&full);
        let file = p(dir.path(), &format!("c{i}.json"));
        std::fs::write(&file, &dumped).unwrap();
        assert_eq!(ok(&["--config", &file, "--dump-config"]), dumped, "{args:?}");
        let flag_values: Vec<&&str> = args.iter().skip(1).filter(|a| !a.starts_with("--")).collect();
        for v in flag_values {
            assert!(dumped.contains(*v), "{v} missing from {dumped}");
        }
    }
}

#[test]
fn evaluate_disjoint_pairs_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let recon = p(dir.path(), "r.txt");
    let matches = p(dir.path(), "m.txt");
    let pairs = p(dir.path(), "p.txt");
    std::fs::write(&recon, "SCENE 0 s\nIMAGE 1 0 a 10 10\nIMAGE 2 0 b 10 10\nIMAGE 3 0 c 10 10\n").unwrap();
    let rows: String = (0..16).map(|_| "1 1 2 2\n").collect();
    std::fs::write(&matches, format!("PAIR 1 2 16\n{rows}")).unwrap();
    std::fs::write(&pairs, "a c 1 0.5\n").unwrap();
    let out = ok(&["evaluate", "--pairs", &pairs, "--matches", &matches, "--recon", &recon]);
    assert_eq!(out.trim(), "accuracy=0.0 pairs=1 correct=0");
    std::fs::write(&pairs, "b a 1 0.5\n").unwrap();
    let out = ok(&["evaluate", "--pairs", &pairs, "--matches", &matches, "--recon", &recon]);
    assert_eq!(out.trim(), "accuracy=1.0 pairs=1 correct=1");
}

/// synth → annotate → mine → train → embed → index → retrieve → evaluate.
#[test]
fn full_pipeline_beats_untrained_head() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = p(d, "synth");
    ok(&["synth", "--scenes", "6", "--grid", "4x4", "--seed", "2", "--out", &s]);
    let recon = format!("{s}/recon.txt");
    let matches = format!("{s}/matches.txt");
    let desc = format!("{s}/descriptors.dvec");
    for f in [&recon, &matches, &desc, &format!("{s}/descriptors.names"), &format!("{s}/maps/s00_r00_c00.fmap")] {
        assert!(Path::new(f).is_file(), "{f}");
    }
    ok(&["annotate", "--recon", &recon, "--out", &p(d, "pos.txt")]);
    ok(&["graph", "--recon", &recon, "--matches", &matches, "--out", &p(d, "graph.txt")]);
    ok(&["partition", "--graph", &p(d, "graph.txt"), "--max-size", "16", "--out", &p(d, "part.txt")]);
    let part = std::fs::read_to_string(p(d, "part.txt")).unwrap();
    assert_eq!(part.lines().filter(|l| l.starts_with("CLUSTER")).count(), 6);
    ok(&["mine", "--poslists", &p(d, "pos.txt"), "--recon", &recon, "--t", "200", "--seed", "2", "--out", &p(d, "batches.txt")]);
    let metrics = p(d, "metrics.txt");
    ok(&[
        "train", "--batches", &p(d, "batches.txt"), "--inputs", &desc, "--recon", &recon, "--head", "linear", "--loss", "rll",
        "--epochs", "1", "--iters", "200", "--lr", "1e-3", "--seed", "2", "--metrics", &metrics, "--out", &p(d, "ck.bin"),
    ]);
    let log = std::fs::read_to_string(&metrics).unwrap();
    assert_eq!(log.lines().count(), 200);
    assert!(log.lines().all(|l| l.split_whitespace().count() == 5));

    let mut scores = Vec::new();
    for (tag, params) in [("base", None), ("trained", Some(p(d, "ck.bin")))] {
        let emb = p(d, &format!("{tag}.dvec"));
        let mut args = vec!["embed", "--maps", &desc, "--head", "linear", "--out", &emb];
        if let Some(params) = &params {
            args.extend(["--params", params]);
        }
        ok(&args);
        let idx = p(d, &format!("{tag}.hnsw"));
        ok(&["index", "--desc", &emb, "--out", &idx]);
        let pairs = p(d, &format!("{tag}.pairs"));
        ok(&["retrieve", "--index", &idx, "--desc", &emb, "--k", "30", "--out", &pairs]);
        scores.push(accuracy(&ok(&["evaluate", "--pairs", &pairs, "--matches", &matches, "--recon", &recon])));
    }
    assert!(scores[1] > scores[0], "trained {} vs untrained {}", scores[1], scores[0]);
}

#[test]
fn deterministic_runs_and_resume_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = p(d, "synth");
    ok(&["synth", "--scenes", "4", "--grid", "3x3", "--seed", "5", "--out", &s]);
    let recon = format!("{s}/recon.txt");
    ok(&["annotate", "--recon", &recon, "--epsilon", "20", "--out", &p(d, "pos.txt")]);
    ok(&["mine", "--poslists", &p(d, "pos.txt"), "--recon", &recon, "--b", "3", "--m", "2", "--t", "30", "--out", &p(d, "b.txt")]);
    let maps = format!("{s}/maps");
    let batches = p(d, "b.txt");
    let train = |epochs: &str, out: &str, resume: Option<&str>| {
        let out = p(d, out);
        let mut args = vec![
            "--deterministic", "train", "--batches", &batches, "--inputs", &maps, "--recon", &recon, "--head", "gem",
            "--epochs", epochs, "--iters", "10", "--lr", "1e-2", "--metrics", "/dev/null", "--out", &out,
        ];
        if let Some(r) = resume {
            args.extend(["--resume", r]);
        }
        ok(&args);
        std::fs::read(out).unwrap()
    };
    let full = train("2", "full.bin", None);
    assert_eq!(train("2", "again.bin", None), full);
    train("1", "half.bin", None);
    let resumed = train("2", "resumed.bin", Some(&p(d, "half.bin")));
    assert_eq!(resumed, full);

    let embed = |out: &str| {
        let out = p(d, out);
        ok(&["--deterministic", "embed", "--maps", &maps, "--head", "gem", "--params", &p(d, "full.bin"), "--out", &out]);
        std::fs::read(out).unwrap()
    };
    assert_eq!(embed("e1.dvec"), embed("e2.dvec"));
}
