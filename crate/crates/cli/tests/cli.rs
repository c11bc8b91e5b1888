use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xmrbench_core::embed::table::save_embeddings;
use xmrbench_core::embed::{EmbeddingTable, EmbeddingVector, OcclusionVariant};
use xmrbench_core::report::{parse_csv, parse_json};

fn xmrbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmrbench"))
        .args(args)
        .env_remove("XMRBENCH_SEED")
        .output()
        .expect("spawn xmrbench")
}

fn ok(args: &[&str]) -> String {
    let out = xmrbench(args);
    assert!(
        out.status.success(),
        "xmrbench {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// A 40-study synthetic dataset and a briefly trained model.
    fn new(objective: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        ok(&["toy-gen", "--out", s(&f.path("ds")), "--studies", "40", "--seed", "1"]);
        ok(&[
            "toy-train",
            "--objective",
            objective,
            "--studies",
            "40",
            "--epochs",
            "5",
            "--seed",
            "1",
            "--out",
            s(&f.path("m.xtoy")),
        ]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn manifest(&self) -> PathBuf {
        self.path("ds/manifest.jsonl")
    }
}

#[test]
fn run_writes_default_grid_with_provenance() {
    let f = Fixture::new("infonce");
    let out = f.path("r.csv");
    ok(&[
        "run",
        "--manifest",
        s(&f.manifest()),
        "--toy-params",
        s(&f.path("m.xtoy")),
        "--out",
        s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let parsed = parse_csv(text.as_bytes()).unwrap();
    assert_eq!(parsed.k_values, vec![5, 10, 20, 30, 50, 100]);
    assert_eq!(parsed.ratios, vec![0.0, 0.25, 1.0, 4.0, 9.0, 25.0, 49.0, 81.0]);
    assert!(parsed.cells.iter().all(|r| r.len() == 8));
    assert_eq!(parsed.random[0], 12.5);
    let config = parsed.comments.iter().find_map(|c| c.strip_prefix("config ")).unwrap();
    let config: serde_json::Value = serde_json::from_str(config).unwrap();
    assert_eq!(config["seed"], 0);
    assert_eq!(config["mode"], "per-image");
    assert_eq!(config["scorer"], "cosine");
    assert_eq!(config["text_sections"], serde_json::json!(["findings", "impression"]));
    assert!(config["embedder"].as_str().unwrap().starts_with("toy:"));
    assert_eq!(config["output"], s(&out));
    assert_eq!(config["format"], "csv");
    assert_eq!(config["normalize"], false);
    assert_eq!(config["verbosity"], 0);
    assert!(config.get("jobs").is_none());
    assert!(parsed.comments[0].starts_with("xmrbench "));
    assert_eq!(parsed.meta.unwrap().n_queries, 40);
}

#[test]
fn json_output_and_seed_from_environment() {
    let f = Fixture::new("infonce");
    let out = f.path("r.json");
    let status = Command::new(env!("CARGO_BIN_EXE_xmrbench"))
        .args([
            "run",
            "--manifest",
            s(&f.manifest()),
            "--embedder",
            "random:dim=8",
            "--ratios",
            "0,25",
        ])
        .args(["--k", "1,5", "--out", s(&out)])
        .env("XMRBENCH_SEED", "77")
        .status()
        .unwrap();
    assert!(status.success());
    let (grid, prov) = parse_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(grid.shape(), (2, 2));
    assert_eq!(grid.meta.seed, 77);
    assert_eq!(prov.config["seed"], 77);
    assert_eq!(prov.tool, "xmrbench");
}

#[test]
fn normalize_flag_keeps_cosine_rankings() {
    let f = Fixture::new("infonce");
    let (a, b) = (f.path("a.csv"), f.path("b.csv"));
    let (manifest, params) = (f.manifest(), f.path("m.xtoy"));
    let base = [
        "run",
        "--manifest",
        s(&manifest),
        "--toy-params",
        s(&params),
        "--ratios",
        "0,25",
    ];
    ok(&[&base[..], &["--out", s(&a)]].concat());
    ok(&[&base[..], &["--normalize", "--out", s(&b)]].concat());
    let grid = |p: &Path| parse_csv(std::fs::read(p).unwrap().as_slice()).unwrap();
    let (ga, gb) = (grid(&a), grid(&b));
    assert_eq!(ga.cells, gb.cells);
    assert!(gb.comments.iter().any(|c| c.contains("\"normalize\":true")));
}

#[test]
fn exit_codes() {
    let f = Fixture::new("infonce");
    let out = f.path("never.csv");
    let code = |args: &[&str]| xmrbench(args).status.code().unwrap();

    let missing = f.path("nope/manifest.jsonl");
    assert_eq!(
        code(&[
            "run",
            "--manifest",
            s(&missing),
            "--embedder",
            "random",
            "--out",
            s(&out)
        ]),
        3
    );
    assert_eq!(
        code(&[
            "run",
            "--manifest",
            s(&f.manifest()),
            "--embedder",
            "random",
            "--k",
            "0",
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "run",
            "--manifest",
            s(&f.manifest()),
            "--embedder",
            "random",
            "--k",
            "5,1",
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "run",
            "--manifest",
            s(&f.manifest()),
            "--embedder",
            "random",
            "--out",
            s(&f.path("r.txt"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "run",
            "--manifest",
            s(&f.manifest()),
            "--embedder",
            "bogus",
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(code(&["run", "--manifest", s(&f.manifest()), "--out", s(&out)]), 2);
    // Cosine-only model asked for classifier scores.
    assert_eq!(
        code(&[
            "run",
            "--manifest",
            s(&f.manifest()),
            "--toy-params",
            s(&f.path("m.xtoy")),
            "--scorer",
            "classifier",
            "--out",
            s(&out)
        ]),
        2
    );
    std::fs::write(f.path("bad.jsonl"), "{not json}\n").unwrap();
    assert_eq!(
        code(&[
            "run",
            "--manifest",
            s(&f.path("bad.jsonl")),
            "--embedder",
            "random",
            "--out",
            s(&out)
        ]),
        4
    );
    assert_eq!(code(&["conformance", "--timeout", "2", "--", "true"]), 5);
    assert!(!out.exists(), "no report may be written on failure");
}

#[test]
fn classifier_scoring_with_a_bce_model() {
    let f = Fixture::new("bce");
    let out = f.path("r.csv");
    ok(&[
        "run",
        "--manifest",
        s(&f.manifest()),
        "--toy-params",
        s(&f.path("m.xtoy")),
        "--scorer",
        "classifier",
        "--ratios",
        "0,81",
        "--out",
        s(&out),
    ]);
    let parsed = parse_csv(std::fs::read(&out).unwrap().as_slice()).unwrap();
    assert_eq!(parsed.meta.unwrap().scorer.to_string(), "classifier");
}

#[test]
fn dump_scores_writes_one_matrix_per_ratio_and_trial() {
    let f = Fixture::new("infonce");
    let dumps = f.path("scores");
    ok(&[
        "run",
        "--manifest",
        s(&f.manifest()),
        "--embedder",
        "random:dim=4",
        "--ratios",
        "0,25",
        "--trials",
        "2",
        "--dump-scores",
        s(&dumps),
        "--out",
        s(&f.path("r.csv")),
    ]);
    let mut names: Vec<String> = std::fs::read_dir(&dumps)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "scores_p0.00_t0.csv",
            "scores_p0.00_t1.csv",
            "scores_p25.00_t0.csv",
            "scores_p25.00_t1.csv"
        ]
    );
    let body = std::fs::read_to_string(dumps.join("scores_p25.00_t1.csv")).unwrap();
    assert_eq!(body.lines().next(), Some("image_id,report_id,score"));
    assert_eq!(body.lines().count(), 1 + 40 * 40);
}

#[test]
fn file_embedder_reads_precomputed_variants() {
    let f = Fixture::new("infonce");
    let ratios = [0.0, 49.0];
    let manifest = xmrbench_core::data::load_manifest(&f.manifest()).unwrap();
    let mut images = EmbeddingTable::new(2).unwrap();
    let mut reports = EmbeddingTable::new(2).unwrap();
    for (i, study) in manifest.studies().iter().enumerate() {
        let v = vec![(i as f32).cos(), (i as f32).sin()];
        reports
            .push(EmbeddingVector::new(study.study_id.clone(), v.clone()))
            .unwrap();
        for &ratio_percent in &ratios {
            let key = OcclusionVariant {
                ratio_percent,
                trial: 0,
                pair: None,
            }
            .key(&study.image_refs[0]);
            images.push(EmbeddingVector::new(key, v.clone())).unwrap();
        }
    }
    save_embeddings(&images, &f.path("img.xemb")).unwrap();
    save_embeddings(&reports, &f.path("rep.xemb")).unwrap();
    let summary = ok(&["inspect-embeddings", s(&f.path("img.xemb")), "--head", "1"]);
    assert!(
        summary.contains("entries: 80") && summary.contains("dim: 2"),
        "{summary}"
    );

    let spec = format!("file:{},{}", s(&f.path("img.xemb")), s(&f.path("rep.xemb")));
    let out = f.path("r.csv");
    ok(&[
        "run",
        "--manifest",
        s(&f.manifest()),
        "--embedder",
        &spec,
        "--ratios",
        "0,49",
        "--k",
        "1",
        "--out",
        s(&out),
    ]);
    let parsed = parse_csv(std::fs::read(&out).unwrap().as_slice()).unwrap();
    assert_eq!(parsed.cells, vec![vec![100.0, 100.0]]);

    // A ratio with no precomputed vectors is an embedder failure.
    let code = xmrbench(&[
        "run",
        "--manifest",
        s(&f.manifest()),
        "--embedder",
        &spec,
        "--ratios",
        "0,25",
        "--out",
        s(&out),
    ])
    .status
    .code();
    assert_eq!(code, Some(5));
}

#[test]
fn process_embedder_runs_through_the_protocol() {
    let f = Fixture::new("infonce");
    let bin = env!("CARGO_BIN_EXE_xmrbench");
    let served = format!("process:{bin} serve-embedder --embedder random:dim=6,seed=3");
    let (a, b) = (f.path("a.csv"), f.path("b.csv"));
    ok(&[
        "run",
        "--manifest",
        s(&f.manifest()),
        "--embedder",
        &served,
        "--ratios",
        "0,9",
        "--out",
        s(&a),
    ]);
    ok(&[
        "run",
        "--manifest",
        s(&f.manifest()),
        "--embedder",
        "random:dim=6,seed=3",
        "--ratios",
        "0,9",
        "--out",
        s(&b),
    ]);
    let grid = |p: &Path| parse_csv(std::fs::read(p).unwrap().as_slice()).unwrap();
    let (ga, gb) = (grid(&a), grid(&b));
    assert_eq!(ga.random, gb.random);
    assert_eq!(ga.k_values, gb.k_values);
}

#[test]
fn occlude_preserves_format_and_zeroes_the_block() {
    let f = Fixture::new("infonce");
    let src = f.path("ds/images/s00000.png");
    let dst = f.path("o.png");
    ok(&["occlude", "--in", s(&src), "--p", "25", "--seed", "9", "--out", s(&dst)]);
    let bytes = std::fs::read(&dst).unwrap();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    let img = xmrbench_core::data::decode_image(&bytes).unwrap();
    let (h, w) = (img.height(), img.width());
    let spec = xmrbench_core::OcclusionSpec::new(25.0, 9).unwrap();
    let block = xmrbench_core::occlusion::place_block(&spec, h, w);
    assert_eq!(block.area(), h * w / 4);
    for r in block.top..block.top + block.block_h {
        for c in block.left..block.left + block.block_w {
            assert_eq!(img.get(r, c, 0), 0.0);
        }
    }
}

#[test]
fn random_baseline_prints_analytic_and_simulated_columns() {
    let text = ok(&["random-baseline", "--n", "994", "--k", "5,100"]);
    assert_eq!(text, "k,analytic\n5,0.5030\n100,10.0604\n");
    let text = ok(&[
        "random-baseline",
        "--n",
        "50",
        "--k",
        "5",
        "--mc",
        "--queries",
        "60",
        "--trials",
        "20",
    ]);
    let row: Vec<f64> = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row[1], 10.0);
    assert!((row[2] - 10.0).abs() < 4.0 * row[3].max(0.5));
}

#[test]
fn conformance_command_passes_for_the_builtin_server() {
    let bin = env!("CARGO_BIN_EXE_xmrbench");
    let text = ok(&["conformance", "--", bin, "serve-embedder", "--embedder", "random:dim=5"]);
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("[PASS]")), "{text}");
}
