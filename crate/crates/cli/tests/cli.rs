//! End-to-end tests for the `chronovec` binary.
//!
//! Every subcommand is exercised against the library call it delegates to:
//! the CLI's files/stdout must reproduce the direct result exactly, which
//! keeps numerical logic out of the binary. Exit codes are pinned to the
//! 0/1/2 contract.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use chronovec_core::analysis::{self, MisalignmentMatrix};
use chronovec_core::sweep::{self, AlphaGrid, EvaluatorSpec};
use chronovec_core::tensorio::{self, to_container_bytes, Tensor};
use chronovec_core::toylab::{self, InitMode, ToyModel, TrainSpec};
use chronovec_core::vecalg::{self, GroupSelector, LoraAdapter, LoraPair, ParamGroupRules};
use chronovec_core::{Checkpoint, TimePeriod, TimeVector};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chronovec"))
}

/// Run the binary and require exit code 0.
fn ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn chronovec");
    assert!(
        out.status.success(),
        "command failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON value")
}

fn tensor(shape: Vec<usize>, f: impl Fn(usize) -> f32) -> Tensor {
    let n: usize = shape.iter().product();
    let vals: Vec<f32> = (0..n).map(f).collect();
    Tensor::from_f32(shape, &vals).unwrap()
}

/// A toy-shaped checkpoint (embed/ff/out names) whose values are offset by
/// `shift` so distinct shifts give distinct models over a common inventory.
fn toy_shaped_ckpt(shift: f32) -> Checkpoint {
    let mut c = Checkpoint::new();
    c.insert(
        "embed.weight",
        tensor(vec![2, 3], |i| i as f32 * 0.25 + shift),
    )
    .unwrap();
    c.insert(
        "ff.w1",
        tensor(vec![2, 2], |i| 1.0 - i as f32 * 0.5 + shift),
    )
    .unwrap();
    c.insert("out.bias", tensor(vec![3], |i| (i as f32).sin() + shift))
        .unwrap();
    c
}

/// Base checkpoint plus three time vectors diffed from it, all on disk.
struct VectorFixture {
    base_path: PathBuf,
    base: Checkpoint,
    vector_paths: Vec<PathBuf>,
    vectors: Vec<TimeVector>,
}

fn vector_fixture(dir: &Path) -> VectorFixture {
    let base = toy_shaped_ckpt(0.0);
    let base_path = dir.join("base.ckpt");
    tensorio::write_checkpoint(&base, &base_path, None).unwrap();
    let mut vector_paths = Vec::new();
    let mut vectors = Vec::new();
    for (i, shift) in [0.5, -0.25, 1.5].into_iter().enumerate() {
        let finetuned = toy_shaped_ckpt(shift);
        let v = vecalg::diff(&finetuned, &base, TimePeriod::Year(2012 + i as i64)).unwrap();
        let path = dir.join(format!("v{i}.tv"));
        vecalg::save_time_vector(&v, &path, None).unwrap();
        vector_paths.push(path);
        vectors.push(v);
    }
    VectorFixture {
        base_path,
        base,
        vector_paths,
        vectors,
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes_follow_the_contract() {
    // Help goes to stdout and succeeds.
    let help = bin().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(!help.stdout.is_empty());

    // Unknown subcommands and bad flag values are usage errors.
    let unknown = bin().arg("not-a-command").output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
    assert!(!unknown.stderr.is_empty());
    let bad_period = bin()
        .args(["diff", "--finetuned", "a", "--pretrained", "b"])
        .args(["--period", "fortnight:3", "--out", "v"])
        .output()
        .unwrap();
    assert_eq!(bad_period.status.code(), Some(1));

    // Delegate errors surface with exit 1 and the delegate's message.
    let missing = bin()
        .args(["toy-eval", "--model", "nope.ckpt", "--corpus", "nope.toyc"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&missing.stderr);
    assert!(msg.contains("nope.ckpt"), "unhelpful message: {msg}");

    // Panics exit with 2.
    let panic = bin().arg("debug-panic").output().unwrap();
    assert_eq!(panic.status.code(), Some(2));

    // The experiment list in the help stays in sync with the library.
    let exp_help = ok(bin().args(["toy-experiment", "--help"]));
    let text = String::from_utf8_lossy(&exp_help.stdout).to_string();
    for name in toylab::EXPERIMENT_NAMES {
        assert!(text.contains(name), "help does not mention {name}");
    }
}

#[test]
fn diff_apply_identity_composition() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    tensorio::write_checkpoint(&toy_shaped_ckpt(0.25), &a, None).unwrap();

    let v = dir.path().join("v.tv");
    ok(bin()
        .args(["diff", "--finetuned", s(&a), "--pretrained", s(&a)])
        .args(["--period", "year:2015", "--out", s(&v)]));
    let zero = vecalg::load_time_vector(&v).unwrap();
    for (name, t) in zero.delta.iter() {
        assert!(
            t.to_f32().iter().all(|&x| x == 0.0),
            "diff(a, a) left a nonzero delta in {name}"
        );
    }

    let b = dir.path().join("b.ckpt");
    ok(bin()
        .args(["apply", "--base", s(&a), "--vector", s(&v)])
        .args(["--out", s(&b)]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn vector_arithmetic_commands_delegate() {
    let dir = tempfile::tempdir().unwrap();
    let fx = vector_fixture(dir.path());
    let [v0, v1, v2] = [
        &fx.vector_paths[0],
        &fx.vector_paths[1],
        &fx.vector_paths[2],
    ];

    // interp == direct interpolate
    let out = dir.path().join("interp.tv");
    ok(bin().args(["interp", "--vj", s(v0), "--vk", s(v1)]).args([
        "--alpha",
        "0.25",
        "--out",
        s(&out),
    ]));
    let direct = vecalg::interpolate(&fx.vectors[0], &fx.vectors[1], 0.25).unwrap();
    let expected = dir.path().join("interp_direct.tv");
    vecalg::save_time_vector(&direct, &expected, None).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&expected).unwrap());

    // lincomb == direct lincomb, including a negative coefficient
    let out = dir.path().join("lincomb.tv");
    ok(bin().args(["lincomb", "--coeffs", "2,-1"]).args([
        "--vectors",
        s(v0),
        s(v1),
        "--out",
        s(&out),
    ]));
    let direct = vecalg::lincomb(&[(2.0, &fx.vectors[0]), (-1.0, &fx.vectors[1])]).unwrap();
    let expected = dir.path().join("lincomb_direct.tv");
    vecalg::save_time_vector(&direct, &expected, None).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&expected).unwrap());

    // analogy == direct analogy
    let out = dir.path().join("analogy.tv");
    ok(bin()
        .args([
            "analogy",
            "--task-j",
            s(v0),
            "--lm-j",
            s(v1),
            "--lm-k",
            s(v2),
        ])
        .args([
            "--a1",
            "1.0",
            "--a2",
            "0.3",
            "--a3",
            "0.3",
            "--out",
            s(&out),
        ]));
    let direct = vecalg::analogy(
        &fx.vectors[0],
        &fx.vectors[1],
        &fx.vectors[2],
        1.0,
        0.3,
        0.3,
    )
    .unwrap();
    let expected = dir.path().join("analogy_direct.tv");
    vecalg::save_time_vector(&direct, &expected, None).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&expected).unwrap());

    // soup-uniform == direct uniform_soup
    let out = dir.path().join("soup.ckpt");
    ok(bin()
        .args(["soup-uniform", "--vectors", s(v0), s(v1), s(v2)])
        .args(["--base", s(&fx.base_path), "--out", s(&out)]));
    let refs: Vec<&TimeVector> = fx.vectors.iter().collect();
    let direct = vecalg::uniform_soup(&refs, &fx.base).unwrap();
    assert_eq!(fs::read(&out).unwrap(), to_container_bytes(&direct, None).0);
}

#[test]
fn cossim_matrix_project_and_group_norms_delegate() {
    let dir = tempfile::tempdir().unwrap();
    let fx = vector_fixture(dir.path());
    let paths: Vec<&str> = fx.vector_paths.iter().map(|p| s(p)).collect();

    // cossim-matrix: unit diagonal, and cells equal the direct grid.
    let m_csv = dir.path().join("m.csv");
    ok(bin()
        .args(["cossim-matrix", "--vectors"])
        .args(&paths)
        .args(["--out", s(&m_csv)]));
    let text = fs::read_to_string(&m_csv).unwrap();
    let parsed = analysis::read_matrix_csv(&text, true, "cosine").unwrap();
    let direct = vecalg::cosine_matrix(&fx.vectors, None).unwrap();
    assert_eq!(parsed.values, direct);
    for i in 0..3 {
        assert_eq!(parsed.values[i][i], 1.0);
    }

    // project: rows follow input order and equal the direct projection.
    let p_out = ok(bin().args(["project", "--vectors"]).args(&paths));
    let coords = analysis::project_2d(&fx.vectors, None).unwrap();
    let mut expected = String::from("period,x,y\n");
    for (v, (x, y)) in fx.vectors.iter().zip(&coords) {
        expected.push_str(&format!("{},{x},{y}\n", v.period));
    }
    assert_eq!(String::from_utf8_lossy(&p_out.stdout), expected);

    // group-norms under the toy rules == direct group_norms.
    let g_out = ok(bin()
        .args(["group-norms", "--vector", paths[0]])
        .args(["--rules", "builtin:toy"]));
    let norms = vecalg::group_norms(&fx.vectors[0], &ParamGroupRules::toy());
    let mut expected = String::from("group,l2_norm,tensors\n");
    for (group, &(norm, count)) in norms.iter() {
        expected.push_str(&format!("{},{norm},{count}\n", group.as_str()));
    }
    assert_eq!(String::from_utf8_lossy(&g_out.stdout), expected);
}

#[test]
fn swap_writes_model_and_lists_donor_names() {
    let dir = tempfile::tempdir().unwrap();
    let base = toy_shaped_ckpt(0.0);
    let donor = toy_shaped_ckpt(2.0);
    let base_path = dir.path().join("base.ckpt");
    let donor_path = dir.path().join("donor.ckpt");
    tensorio::write_checkpoint(&base, &base_path, None).unwrap();
    tensorio::write_checkpoint(&donor, &donor_path, None).unwrap();

    let out = dir.path().join("swapped.ckpt");
    let run = ok(bin()
        .args([
            "swap",
            "--base-model",
            s(&base_path),
            "--donor-model",
            s(&donor_path),
        ])
        .args([
            "--groups",
            "embeddings,feed_forward",
            "--rules",
            "builtin:toy",
        ])
        .args(["--out", s(&out)]));

    let groups = [
        GroupSelector::parse("embeddings").unwrap(),
        GroupSelector::parse("feed_forward").unwrap(),
    ];
    let (direct, from_donor) =
        vecalg::swap_groups(&base, &donor, &groups, &ParamGroupRules::toy()).unwrap();
    assert_eq!(fs::read(&out).unwrap(), to_container_bytes(&direct, None).0);
    let printed: Vec<String> = String::from_utf8_lossy(&run.stdout)
        .lines()
        .map(str::to_string)
        .collect();
    assert_eq!(printed, from_donor);
}

#[test]
fn merge_lora_delegates() {
    let dir = tempfile::tempdir().unwrap();
    let base = toy_shaped_ckpt(0.0);
    let base_path = dir.path().join("base.ckpt");
    tensorio::write_checkpoint(&base, &base_path, None).unwrap();

    let mut pairs = BTreeMap::new();
    pairs.insert(
        "embed.weight".to_string(),
        LoraPair {
            a: tensor(vec![1, 3], |i| 0.1 * (i as f32 + 1.0)),
            b: tensor(vec![2, 1], |i| 1.0 - 0.5 * i as f32),
        },
    );
    let adapter = LoraAdapter {
        pairs,
        rank: 1,
        alpha: 2.0,
    };
    let adapter_path = dir.path().join("adapter.ckpt");
    vecalg::save_lora_adapter(&adapter, &adapter_path).unwrap();

    let out = dir.path().join("merged.ckpt");
    ok(bin().args(["merge-lora", "--base", s(&base_path)]).args([
        "--adapter",
        s(&adapter_path),
        "--out",
        s(&out),
    ]));
    let direct = vecalg::merge_lora(&base, &adapter).unwrap();
    assert_eq!(fs::read(&out).unwrap(), to_container_bytes(&direct, None).0);
}

/// Shell evaluator whose score depends on both placeholders: checkpoint
/// file size plus the numeric eval-set argument.
fn size_plus_evalset() -> Vec<String> {
    vec![
        "/bin/sh".to_string(),
        "-c".to_string(),
        "echo $(( $(wc -c < {checkpoint}) + {evalset} ))".to_string(),
    ]
}

fn size_only() -> Vec<String> {
    vec![
        "/bin/sh".to_string(),
        "-c".to_string(),
        "wc -c < {checkpoint}".to_string(),
    ]
}

/// The CLI's evaluator defaults: minimize, 300 s timeout.
fn default_spec(command: Vec<String>) -> EvaluatorSpec {
    EvaluatorSpec::new(command, false, Duration::from_secs(300))
}

#[test]
fn matrix_and_analyze_commands_delegate() {
    let dir = tempfile::tempdir().unwrap();
    // Different inventories give the two models different file sizes, so
    // both matrix dimensions vary.
    let small = toy_shaped_ckpt(0.0);
    let mut large = toy_shaped_ckpt(1.0);
    large
        .insert("extra.weight", tensor(vec![8], |i| i as f32))
        .unwrap();
    let small_path = dir.path().join("small.ckpt");
    let large_path = dir.path().join("large.ckpt");
    tensorio::write_checkpoint(&small, &small_path, None).unwrap();
    tensorio::write_checkpoint(&large, &large_path, None).unwrap();

    let m_csv = dir.path().join("m.csv");
    ok(bin()
        .args(["matrix"])
        .args(["--model", &format!("year:2012={}", s(&small_path))])
        .args(["--model", &format!("year:2013={}", s(&large_path))])
        .args(["--eval-set", "year:2012=10", "--eval-set", "year:2013=20"])
        .args(["--out", s(&m_csv), "--"])
        .args(size_plus_evalset()));

    let mut models = BTreeMap::new();
    models.insert(TimePeriod::Year(2012), small);
    models.insert(TimePeriod::Year(2013), large);
    let mut eval_sets = BTreeMap::new();
    eval_sets.insert(TimePeriod::Year(2012), "10".to_string());
    eval_sets.insert(TimePeriod::Year(2013), "20".to_string());
    let direct = sweep::build_misalignment_matrix(
        &models,
        &eval_sets,
        &default_spec(size_plus_evalset()),
        "score",
        1,
    )
    .unwrap();
    let text = fs::read_to_string(&m_csv).unwrap();
    assert_eq!(text, analysis::write_matrix_csv(&direct));

    // analyze-td on the written CSV matches the direct report.
    let td_out = ok(bin().args(["analyze-td", "--matrix", s(&m_csv)]));
    let td_json = stdout_json(&td_out);
    let direct_td = analysis::td_score(
        &analysis::read_matrix_csv(&text, false, "score").unwrap(),
        false,
    )
    .unwrap();
    assert_eq!(td_json["slope"].as_f64().unwrap(), direct_td.slope);
    assert_eq!(td_json["r2"].as_f64().unwrap(), direct_td.r2);
    assert_eq!(
        td_json["normalized"].as_bool().unwrap(),
        direct_td.normalized
    );

    // analyze-normalize round-trips through the library normalizer.
    let n_out = ok(bin().args(["analyze-normalize", "--matrix", s(&m_csv)]));
    let direct_norm = analysis::normalize_percent_from_mean(
        &analysis::read_matrix_csv(&text, false, "score").unwrap(),
    )
    .unwrap();
    assert_eq!(
        String::from_utf8_lossy(&n_out.stdout),
        analysis::write_matrix_csv(&direct_norm)
    );
}

#[test]
fn analyze_corr_season_and_online_delegate() {
    let dir = tempfile::tempdir().unwrap();

    // Correlation: a 3x3 degradation matrix and a similarity grid with the
    // same labels.
    let years: Vec<TimePeriod> = (2012..2015).map(TimePeriod::Year).collect();
    let deg = MisalignmentMatrix::new(
        years.clone(),
        years.clone(),
        vec![
            vec![1.0, 2.0, 3.5],
            vec![2.2, 1.1, 2.4],
            vec![3.9, 2.6, 1.3],
        ],
        false,
        "ppl",
    )
    .unwrap();
    let sim = MisalignmentMatrix::new(
        years.clone(),
        years.clone(),
        vec![
            vec![1.0, 0.8, 0.5],
            vec![0.8, 1.0, 0.7],
            vec![0.5, 0.7, 1.0],
        ],
        true,
        "cosine",
    )
    .unwrap();
    let deg_path = dir.path().join("deg.csv");
    let sim_path = dir.path().join("sim.csv");
    fs::write(&deg_path, analysis::write_matrix_csv(&deg)).unwrap();
    fs::write(&sim_path, analysis::write_matrix_csv(&sim)).unwrap();

    let corr_out = ok(bin()
        .args(["analyze-corr", "--similarity", s(&sim_path)])
        .args(["--matrix", s(&deg_path)]));
    let corr_json = stdout_json(&corr_out);
    let direct = analysis::correlate_similarity_degradation(&sim.values, &deg).unwrap();
    assert_eq!(corr_json["pearson_r"].as_f64().unwrap(), direct.pearson_r);
    assert_eq!(corr_json["p_value"].as_f64().unwrap(), direct.p_value);
    assert_eq!(corr_json["n"].as_u64().unwrap() as usize, direct.n);

    // Seasonality: 13 months so the +/-12 stripe is populated.
    let months: Vec<TimePeriod> = (0..13)
        .map(|i| TimePeriod::month(2015 + i / 12, (i % 12 + 1) as u8))
        .collect();
    let values: Vec<Vec<f64>> = (0..13)
        .map(|f: i64| {
            (0..13)
                .map(|e: i64| {
                    ((f - e).abs() as f64) * 0.3 - if (f - e).abs() == 12 { 2.0 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let monthly = MisalignmentMatrix::new(months.clone(), months, values, false, "ppl").unwrap();
    let monthly_path = dir.path().join("monthly.csv");
    fs::write(&monthly_path, analysis::write_matrix_csv(&monthly)).unwrap();

    let season_out = ok(bin().args(["analyze-season", "--matrix", s(&monthly_path)]));
    let stats = analysis::seasonality_stats(&monthly).unwrap();
    let expected = format!(
        "group,mean,cells\naligned,{},{}\nstripe,{},{}\nother,{},{}\n",
        stats.aligned.mean,
        stats.aligned.count,
        stats.stripe.mean,
        stats.stripe.count,
        stats.other.mean,
        stats.other.count,
    );
    assert_eq!(String::from_utf8_lossy(&season_out.stdout), expected);

    // Online normalization row-rescales the series values.
    let online = MisalignmentMatrix::new(
        (0..3).map(TimePeriod::Index).collect(),
        (0..2).map(TimePeriod::Index).collect(),
        vec![vec![0.2, 0.6], vec![0.9, 0.3], vec![0.5, 0.5]],
        true,
        "cosine",
    )
    .unwrap();
    let online_path = dir.path().join("online.csv");
    fs::write(&online_path, analysis::write_matrix_csv(&online)).unwrap();
    let online_out = ok(bin().args(["analyze-online", "--matrix", s(&online_path)]));
    let direct_norm = MisalignmentMatrix::new(
        online.train_periods.clone(),
        online.eval_periods.clone(),
        analysis::normalize_online_similarity(&online.values).unwrap(),
        true,
        "cosine_normalized",
    )
    .unwrap();
    assert_eq!(
        String::from_utf8_lossy(&online_out.stdout),
        analysis::write_matrix_csv(&direct_norm)
    );
}

#[test]
fn sweep_commands_delegate() {
    let dir = tempfile::tempdir().unwrap();
    let fx = vector_fixture(dir.path());
    let [v0, v1, v2] = [
        &fx.vector_paths[0],
        &fx.vector_paths[1],
        &fx.vector_paths[2],
    ];

    let run = ok(bin()
        .args([
            "sweep-interp",
            "--vj",
            s(v0),
            "--vk",
            s(v1),
            "--base",
            s(&fx.base_path),
        ])
        .args(["--alphas", "0,0.5,1", "--"])
        .args(size_only()));
    let direct = sweep::sweep_interpolation(
        &fx.vectors[0],
        &fx.vectors[1],
        &fx.base,
        &[0.0, 0.5, 1.0],
        &default_spec(size_only()),
        1,
    )
    .unwrap();
    assert_eq!(String::from_utf8_lossy(&run.stdout), direct.to_csv());
    assert!(String::from_utf8_lossy(&run.stderr).contains("best: alpha="));

    let run = ok(bin()
        .args([
            "sweep-analogy",
            "--task-j",
            s(v0),
            "--lm-j",
            s(v1),
            "--lm-k",
            s(v2),
        ])
        .args(["--base", s(&fx.base_path)])
        .args(["--a1", "0,1", "--a2", "0,0.5", "--a3", "0", "--"])
        .args(size_only()));
    let grid = AlphaGrid::new(vec![0.0, 1.0], vec![0.0, 0.5], vec![0.0]).unwrap();
    let direct = sweep::sweep_analogy(
        &fx.vectors[0],
        &fx.vectors[1],
        &fx.vectors[2],
        &fx.base,
        &grid,
        &default_spec(size_only()),
        sweep::Ablation::Full,
        1,
    )
    .unwrap();
    assert_eq!(String::from_utf8_lossy(&run.stdout), direct.to_csv());
}

#[test]
fn soup_greedy_delegates() {
    let dir = tempfile::tempdir().unwrap();
    let fx = vector_fixture(dir.path());
    let paths: Vec<&str> = fx.vector_paths.iter().map(|p| s(p)).collect();

    let out = dir.path().join("greedy.ckpt");
    let run = ok(bin()
        .args(["soup-greedy", "--vectors"])
        .args(&paths)
        .args(["--base", s(&fx.base_path), "--max-passes", "2"])
        .args(["--out", s(&out), "--"])
        .args(size_only()));
    let direct =
        sweep::greedy_soup(&fx.vectors, &fx.base, &default_spec(size_only()), 2, 1).unwrap();
    assert_eq!(
        fs::read(&out).unwrap(),
        to_container_bytes(&direct.soup, None).0
    );
    let report = stdout_json(&run);
    assert_eq!(report["soup_score"].as_f64().unwrap(), direct.soup_score);
    let ingredients: Vec<usize> = report["ingredients"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as usize)
        .collect();
    assert_eq!(ingredients, direct.ingredients);
    let scores: Vec<f64> = report["candidate_scores"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(scores, direct.candidate_scores);
}

#[test]
fn toy_gen_train_eval_delegate() {
    let dir = tempfile::tempdir().unwrap();
    let corp = dir.path().join("corp");
    ok(bin()
        .args(["toy-gen", "--periods", "index:0,index:1"])
        .args(["--tokens-per-period", "3000", "--drift-rate", "0.3"])
        .args(["--seed", "11", "--out", s(&corp)]));

    let mut spec = toylab::ToyCorpusSpec::new(vec![TimePeriod::Index(0), TimePeriod::Index(1)], 11);
    spec.tokens_per_period = 3000;
    spec.drift_rate = 0.3;
    let direct = toylab::generate_corpus(&spec).unwrap();
    for (period, tokens) in &direct {
        let path = corp.join(format!("{}.toyc", toylab::slug(*period)));
        let (vocab, read) = toylab::read_corpus(&path).unwrap();
        assert_eq!(vocab, spec.vocab_size);
        assert_eq!(&read, tokens);
    }

    let model_path = dir.path().join("m.ckpt");
    ok(bin()
        .args(["toy-train", "--corpus", s(&corp.join("index_0.toyc"))])
        .args(["--epochs", "1", "--seed", "4", "--period", "index:0"])
        .args(["--out", s(&model_path)]));
    let init = ToyModel::init(
        spec.vocab_size,
        toylab::DEFAULT_EMBED_DIM,
        toylab::DEFAULT_HIDDEN_DIM,
        4,
    );
    let train_spec = TrainSpec {
        learning_rate: 0.1,
        epochs: 1,
        batch_size: 256,
        seed: 4,
        init: InitMode::FromCheckpoint,
    };
    let direct_model =
        toylab::train(&direct[&TimePeriod::Index(0)], &train_spec, Some(&init)).unwrap();
    let mut direct_ckpt = direct_model.to_checkpoint();
    vecalg::stamp_model_metadata(&mut direct_ckpt, Some(TimePeriod::Index(0)));
    assert_eq!(
        fs::read(&model_path).unwrap(),
        to_container_bytes(&direct_ckpt, None).0
    );

    let eval_out = ok(bin()
        .args(["toy-eval", "--model", s(&model_path)])
        .args(["--corpus", s(&corp.join("index_1.toyc"))]));
    let (ce, ppl) = toylab::evaluate(&direct_model, &direct[&TimePeriod::Index(1)]).unwrap();
    let eval_json = stdout_json(&eval_out);
    assert_eq!(eval_json["cross_entropy"].as_f64().unwrap(), ce);
    assert_eq!(eval_json["perplexity"].as_f64().unwrap(), ppl);
}

#[test]
fn toy_experiment_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("d1");
    let d2 = dir.path().join("d2");
    for d in [&d1, &d2] {
        ok(bin()
            .args(["toy-experiment", "--name", "soups", "--seed", "7"])
            .args(["--out", s(d)]));
    }
    let mut names: Vec<String> = fs::read_dir(&d1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        assert_eq!(
            fs::read(d1.join(&name)).unwrap(),
            fs::read(d2.join(&name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}
