use std::fs;
use std::path::Path;

use mambo::backbone::{count_parameters, Backbone, BackboneConfig, Checkpoint, Topology};
use mambo::cli::{run_command, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use mambo::mixers::MixerKind;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn mambo(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("mambo").chain(args.iter().copied());
    let code = run_command(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn separated_fixture(dir: &Path) -> (String, String) {
    let scores = dir.join("scores.txt");
    let protocol = dir.join("protocol.txt");
    fs::write(&scores, "a 2.0\nb 1.5\nc -1.0\nd -3.0\n").unwrap();
    fs::write(
        &protocol,
        "SYN a - - bonafide\nSYN b - - bonafide\nSYN c - A01 spoof\nSYN d - A02 spoof\n",
    )
    .unwrap();
    (p(&scores).into(), p(&protocol).into())
}

#[test]
fn help_and_usage_errors() {
    let help = mambo(&["--help"]);
    assert_eq!(help.code, EXIT_OK);
    assert!(help.out.contains("metrics"));
    assert_eq!(mambo(&["frobnicate"]).code, EXIT_USAGE);
    let missing = mambo(&["metrics", "--scores", "x"]);
    assert_eq!(missing.code, EXIT_USAGE);
    assert!(missing.err.contains("--protocol"), "{}", missing.err);
    assert_eq!(mambo(&["score", "--t-fixed", "abc"]).code, EXIT_USAGE);
}

#[test]
fn metrics_on_perfect_separation() {
    let dir = tempfile::tempdir().unwrap();
    let (scores, protocol) = separated_fixture(dir.path());
    let r = mambo(&["metrics", "--scores", &scores, "--protocol", &protocol]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert_eq!(r.out, "EER=0.00\n");

    let r = mambo(&[
        "metrics", "--scores", &scores, "--protocol", &protocol, "--tdcf-c0", "0.25", "--tdcf-c1",
        "1", "--tdcf-c2", "2",
    ]);
    assert_eq!(r.out, "EER=0.00\nmin_tDCF=0.2500\n");
}

#[test]
fn metrics_percent_formatting() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("s.txt");
    let protocol = dir.path().join("p.txt");
    // bona {0.9, 0.2, 0.8}, spoof {0.1, 0.7, 0.3}: EER 1/3
    fs::write(&scores, "b1 0.9\nb2 0.2\nb3 0.8\ns1 0.1\ns2 0.7\ns3 0.3\n").unwrap();
    let lines: String = ["b1", "b2", "b3"]
        .iter()
        .map(|id| format!("X {id} - - bonafide\n"))
        .chain(["s1", "s2", "s3"].iter().map(|id| format!("X {id} - A spoof\n")))
        .collect();
    fs::write(&protocol, lines).unwrap();
    let r = mambo(&["metrics", "--scores", p(&scores), "--protocol", p(&protocol)]);
    assert_eq!(r.out, "EER=33.33\n");
}

#[test]
fn partial_cost_coefficients_are_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (scores, protocol) = separated_fixture(dir.path());
    let r = mambo(&["metrics", "--scores", &scores, "--protocol", &protocol, "--tdcf-c1", "1"]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("--tdcf-c0"), "{}", r.err);
    let r = mambo(&[
        "report", "--scores", &scores, "--protocol", &protocol, "--tdcf-c0", "-1", "--tdcf-c1",
        "1", "--tdcf-c2", "1",
    ]);
    assert_eq!(r.code, EXIT_USAGE);
}

#[test]
fn data_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let (scores, protocol) = separated_fixture(dir.path());
    let absent = dir.path().join("absent.txt");
    let r = mambo(&["metrics", "--scores", p(&absent), "--protocol", &protocol]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("absent.txt"), "{}", r.err);

    let bad_protocol = dir.path().join("bad_protocol.txt");
    fs::write(&bad_protocol, "SYN a - - genuine\n").unwrap();
    let r = mambo(&["metrics", "--scores", &scores, "--protocol", p(&bad_protocol)]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("bad_protocol.txt") && r.err.contains("line 1"), "{}", r.err);

    let bad_scores = dir.path().join("bad_scores.txt");
    fs::write(&bad_scores, "a 1.0\na 2.0\n").unwrap();
    let r = mambo(&["report", "--scores", p(&bad_scores), "--protocol", &protocol]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("bad_scores.txt"), "{}", r.err);

    let ckpt = dir.path().join("broken.ckpt");
    fs::write(&ckpt, b"NOPE").unwrap();
    let r = mambo(&["inspect", "--checkpoint", p(&ckpt)]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("broken.ckpt"), "{}", r.err);
}

#[test]
fn report_best_and_avg() {
    let dir = tempfile::tempdir().unwrap();
    let (perfect, protocol) = separated_fixture(dir.path());
    let half = dir.path().join("half.txt");
    // one bonafide below both spoofs: EER 50%
    fs::write(&half, "a 2.0\nb -5.0\nc -1.0\nd -3.0\n").unwrap();
    let r = mambo(&["report", "--scores", &perfect, p(&half), "--protocol", &protocol]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.starts_with("# 2 score files"));
    assert!(r.out.contains("\nBest\t0.00\n"), "{}", r.out);
    assert!(r.out.contains("\nAvg\t25.00\n"), "{}", r.out);
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let r = mambo(&[
        "synth", "--out", p(&out), "--n-bonafide", "3", "--n-spoof", "2", "--frames", "20",
        "--dims", "8", "--local-dims", "2", "--global-dims", "2", "--local-frames", "4", "--seed",
        "5",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let data = mambo::data::load_dataset(&out.join("manifest.txt"), &out.join("protocol.txt")).unwrap();
    assert_eq!(data.len(), 5);
    assert_eq!(data[0].features.dim(), (20, 8));

    let r = mambo(&["synth", "--out", p(&out), "--n-bonafide", "3", "--n-spoof", "2", "--dims", "0"]);
    assert_eq!(r.code, EXIT_USAGE);
    let r = mambo(&["synth", "--out", p(&out), "--n-bonafide", "0", "--n-spoof", "2"]);
    assert_eq!(r.code, EXIT_USAGE);
}

#[test]
fn inspect_echoes_the_flagship_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BackboneConfig {
        n: 3,
        ..BackboneConfig::new(Topology::Mambo3, MixerKind::Hydra)
    };
    let (model, params) = Backbone::new::<f32>(&cfg, 1).unwrap();
    let path = dir.path().join("flagship.ckpt");
    Checkpoint::new(&model, params, 4, 0.125).write(&path).unwrap();
    let r = mambo(&["inspect", "--checkpoint", p(&path)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    for line in [
        "topology = \"MAMBO3\"",
        "L = 5",
        "N = 3",
        "D = 128",
        "kind = \"HYDRA\"",
        "epoch = 4",
    ] {
        assert!(r.out.lines().any(|l| l == line), "missing {line:?} in\n{}", r.out);
    }
    let count = format!("parameters = {}", count_parameters(&cfg).unwrap());
    assert!(r.out.lines().any(|l| l == count), "{}", r.out);
}

#[test]
fn train_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[backbone]\ntopology = \"MAMBO3\"\nlearning_rate = 1\n").unwrap();
    let r = mambo(&["train", "--config", p(&config), "--out", p(&dir.path().join("run"))]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("bad.toml") && r.err.contains("learning_rate"), "{}", r.err);

    let config = dir.path().join("no_out.toml");
    fs::write(&config, "[backbone]\ntopology = \"MAMBO1\"\n").unwrap();
    let r = mambo(&["train", "--config", p(&config)]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("--out"), "{}", r.err);

    let r = mambo(&["train", "--config", p(&config), "--out", p(&dir.path().join("run"))]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.contains("[data.train]"), "{}", r.err);
}

#[test]
fn train_and_score_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(
        &config,
        "out_dir = \"run\"\n\
         [backbone]\ntopology = \"MAMBO2\"\nmixer = \"MAMBA2\"\nL = 1\nD = 8\ninput_dim = 6\nn_attn_heads = 2\n\
         [backbone.mixer]\nkind = \"MAMBA2\"\nstate_dim = 4\nhead_dim = 4\nexpand = 1\n\
         [train]\nmax_epochs = 2\npatience = 2\ntopk = 1\nbatch_size = 4\n\
         [data]\nt_fixed = 10\n\
         [data.synth]\nframes = 12\ndims = 6\nlocal_dims = 2\nglobal_dims = 2\nlocal_frames = 3\n\
         [data.train]\nn_bonafide = 4\nn_spoof = 4\n\
         [data.dev]\nn_bonafide = 2\nn_spoof = 2\n\
         [data.eval]\nn_bonafide = 3\nn_spoof = 3\n",
    )
    .unwrap();
    let r = mambo(&["train", "--config", p(&config), "--seed", "9"]);
    assert_eq!(r.code, EXIT_DATA, "duplicate mixer key must be rejected: {}", r.err);

    let text = fs::read_to_string(&config).unwrap().replace("mixer = \"MAMBA2\"\n", "");
    fs::write(&config, text).unwrap();
    let r = mambo(&["train", "--config", p(&config), "--seed", "9"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let run = dir.path().join("run");
    assert_eq!(fs::read_to_string(run.join("run.log")).unwrap().lines().count(), 2);
    let resolved = mambo::config::ExperimentConfig::read(&run.join("config.toml")).unwrap();
    assert_eq!((resolved.train.seed, resolved.data.synth.seed), (9, 9));

    let again = mambo(&["train", "--config", p(&config), "--seed", "9"]);
    assert_eq!(again.code, EXIT_DATA, "existing run must not be overwritten");

    let index = fs::read_to_string(run.join("checkpoints/index.txt")).unwrap();
    let rel = index.split_whitespace().find_map(|f| f.strip_prefix("path=")).unwrap();
    let scores = run.join("eval_scores.txt");
    let r = mambo(&[
        "score", "--checkpoint", p(&run.join(rel)), "--manifest",
        p(&run.join("data/eval/manifest.txt")), "--out", p(&scores), "--t-fixed", "10",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let lines: Vec<String> = fs::read_to_string(&scores).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("SYN_000012 "), "{lines:?}");
    let r = mambo(&[
        "metrics", "--scores", p(&scores), "--protocol", p(&run.join("data/eval/protocol.txt")),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.starts_with("EER="));

    let wrong_dims = dir.path().join("wide");
    mambo(&["synth", "--out", p(&wrong_dims), "--n-bonafide", "1", "--n-spoof", "1", "--dims", "9", "--local-dims", "2", "--global-dims", "2"]);
    let r = mambo(&[
        "score", "--checkpoint", p(&run.join(rel)), "--manifest", p(&wrong_dims.join("manifest.txt")),
        "--out", p(&dir.path().join("x.txt")),
    ]);
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("manifest.txt"), "{}", r.err);
}
