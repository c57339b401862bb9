//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use adaicl_cli::{cmd_run, Overrides, RunArgs};
use adaicl_core::coverage::{brute_force_maxcover, greedy_maxcover, greedy_weighted_maxcover, CoverInstance};
use adaicl_core::graph::{build_cover_sets, CoverSet, GraphKind, Hops, SemanticGraph};
use adaicl_core::strategies::{
    run_strategy, GraphChoice, GroundTruth, SelectionContext, SelectionState, StrategyConfig, StrategyName,
};
use adaicl_core::synthetic::{gaussian_mixture, MixtureSpec};
use adaicl_core::{build_delta_graph, build_mnn_graph, ece, init_pool_kmeans, ExactTiers, ExactWeight, KernelOracle};
use adaicl_core::{Feedback, Pool, PromptTemplate, RngSeed};
use adaicl_harness::{run_experiment, ExperimentConfig, StrategyEntry, Summary};
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> CoverInstance {
    let universe_size = rng.random_range(1..=20);
    let n_sets = rng.random_range(1..=12);
    let budget = rng.random_range(1..=4);
    let universe: BTreeSet<usize> = (0..universe_size).collect();
    let density: f64 = rng.random_range(0.05..0.5);
    let sets = (0..n_sets)
        .map(|c| CoverSet {
            center: c,
            members: (0..universe_size).filter(|_| rng.random_bool(density)).collect(),
            hops: Hops::One,
        })
        .collect();
    CoverInstance::new(universe, sets, budget)
}

/// Greedy reaches (1 − 1/e) of the exhaustive optimum on every instance.
fn greedy_bound() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances = 500;
    let ratio = 1.0 - (-1.0f64).exp();
    let mut held = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..instances {
        let inst = random_instance(&mut rng);
        let greedy = greedy_maxcover(&inst).covered.len();
        let optimum = brute_force_maxcover(&inst).expect("small instance");
        if greedy as f64 >= ratio * optimum as f64 {
            held += 1;
        }
        if optimum > 0 {
            worst = worst.min(greedy as f64 / optimum as f64);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        held == instances && elapsed < Duration::from_secs(10),
        format!(
            "{held}/{instances} instances within (1-1/e) of optimal, worst ratio {worst:.3}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Every weighted pick maximizes the exact tier-weight objective.
fn weighted_step_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let instances = 200;
    let mut steps = 0;
    let mut violations = 0;
    for _ in 0..instances {
        let inst = random_instance(&mut rng);
        let picks = rng.random_range(1..=6);
        let base = [2u64, 3, 10][rng.random_range(0..3)];
        let mut tiers = ExactTiers::with_base(base);
        let chosen = greedy_weighted_maxcover(&inst, &mut tiers, picks);
        let mut replay = ExactTiers::with_base(base);
        let mut used = BTreeSet::new();
        for pick in &chosen {
            let best = inst
                .sets
                .iter()
                .enumerate()
                .filter(|(i, s)| !used.contains(i) && !s.members.is_empty())
                .map(|(_, s)| replay.score(&s.members))
                .fold(ExactWeight::zero(), |a, b| if b > a { b } else { a });
            let got = replay.score(&inst.sets[pick.set_index].members);
            steps += 1;
            if got != best || pick.gain != best {
                violations += 1;
            }
            used.insert(pick.set_index);
            for &m in &inst.sets[pick.set_index].members {
                replay.bump(m);
            }
        }
    }
    outcome(
        violations == 0 && instances >= 100,
        format!("{instances} instances, {steps} picks checked exhaustively, {violations} non-maximal"),
    )
}

/// `heuristic-m` prints lower bound 15 for the default 1-hop setting.
fn heuristic_m() -> Outcome {
    let output = Command::new(env!("CARGO_BIN_EXE_adaicl"))
        .args([
            "heuristic-m",
            "--budget",
            "20",
            "--iterations-hat",
            "2",
            "--theta",
            "0.5",
            "--theta-hat",
            "0.5",
            "--n",
            "300",
            "--hops",
            "1",
        ])
        .output()
        .expect("run adaicl");
    let stdout = String::from_utf8_lossy(&output.stdout);
    let lower = stdout
        .lines()
        .find_map(|l| l.strip_prefix("m lower bound: "))
        .unwrap_or("<missing>")
        .to_string();
    outcome(
        output.status.success() && lower == "15",
        format!("printed lower bound {lower}"),
    )
}

/// The v1..v7 egonet example, nodes numbered from 0.
fn worked_egonets() -> Outcome {
    let (v1, v2, v3, v4, v5, v6, v7) = (0, 1, 2, 3, 4, 5, 6);
    let edges = [(v2, v1), (v3, v1), (v5, v1), (v1, v2), (v4, v2), (v6, v3), (v7, v3)];
    let graph = SemanticGraph::from_edges(7, edges.map(|(u, v)| (u, v, 1.0f64)), GraphKind::Mnn { m: 2 });
    let hard: BTreeSet<usize> = [v1, v2, v3, v4].into();
    let one = build_cover_sets(&graph, &hard, Hops::One);
    let two = build_cover_sets(&graph, &hard, Hops::Two);
    let set = |sets: &[CoverSet], c: usize| sets.iter().find(|s| s.center == c).map(|s| s.members.clone());
    let checks = [
        ("S1", set(&one, v1), BTreeSet::from([v2, v3])),
        ("S2", set(&one, v2), BTreeSet::from([v1, v4])),
        ("S3", set(&one, v3), BTreeSet::new()),
        ("S1(2)", set(&two, v1), BTreeSet::from([v2, v3, v4])),
    ];
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, got, want)| got.as_ref() != Some(want))
        .map(|(name, ..)| *name)
        .collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            "S1={v2,v3}, S2={v1,v4}, S3=∅, S1(2)={v2,v3,v4}".to_string()
        } else {
            format!("mismatch in {failed:?}")
        },
    )
}

fn synthetic_config(dir: &Path, strategies: &[StrategyName], schedule: &[usize]) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.strategies = strategies.iter().copied().map(StrategyEntry::new).collect();
    config.budget_schedule = schedule.to_vec();
    config.seeds = (0..20).collect();
    config.output_dir = dir.to_path_buf();
    config
}

fn accuracies(summary: &Summary, strategy: &str, budget: usize) -> Vec<f64> {
    summary.cell(strategy, budget).expect("cell present").accuracies.clone()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// AdaICL and AdaICL+ beat random on the synthetic mixture.
fn synthetic_trend(dir: &Path) -> Outcome {
    let start = Instant::now();
    let config = synthetic_config(
        dir,
        &[StrategyName::Random, StrategyName::Adaicl, StrategyName::AdaiclPlus],
        &[20],
    );
    let summary = match run_experiment(&config) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let elapsed = start.elapsed();
    let random = accuracies(&summary, "random", 20);
    let ada = accuracies(&summary, "adaicl", 20);
    let plus = accuracies(&summary, "adaicl-plus", 20);
    let wins = ada.iter().zip(&random).filter(|(a, r)| a >= r).count();
    let pass = mean(&ada) >= mean(&random)
        && mean(&plus) >= mean(&random)
        && wins >= 14
        && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "mean acc random {:.4}, adaicl {:.4}, adaicl-plus {:.4}; adaicl >= random in {wins}/20 seeds; {:.1}s",
            mean(&random),
            mean(&ada),
            mean(&plus),
            elapsed.as_secs_f64()
        ),
    )
}

/// AdaICL+ with half the budget matches random with all of it.
fn budget_efficiency(dir: &Path) -> Outcome {
    let config = synthetic_config(dir, &[StrategyName::Random, StrategyName::AdaiclPlus], &[5, 10, 15, 20]);
    let summary = match run_experiment(&config) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let target = mean(&accuracies(&summary, "random", 20));
    let plus10 = accuracies(&summary, "adaicl-plus", 10);
    let reached = plus10.iter().filter(|&&a| a >= target).count();
    outcome(
        reached >= 12,
        format!(
            "adaicl-plus@10 (mean {:.4}) >= random@20 mean {target:.4} in {reached}/20 seeds",
            mean(&plus10)
        ),
    )
}

/// The documented ECE examples and the single-bin identity.
fn ece_exactness() -> Outcome {
    let mut failures = Vec::new();
    let examples: [(&[f64], &[bool], f64); 3] = [
        (&[1.0; 5], &[true; 5], 0.0),
        (&[1.0; 5], &[false; 5], 1.0),
        (&[0.9; 4], &[true, true, false, false], 0.4),
    ];
    for (i, (conf, ok, want)) in examples.iter().enumerate() {
        let got = ece(conf, ok, 10).expect("valid input").ece;
        if (got - want).abs() > 1e-12 {
            failures.push(format!("example {i}: {got} != {want}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..50 {
        let n = rng.random_range(1..=40);
        let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let ok: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let accuracy = ok.iter().filter(|&&b| b).count() as f64 / n as f64;
        let mean_conf = conf.iter().fold(0.0, |a, &c| a + c) / n as f64;
        let got = ece(&conf, &ok, 1).expect("valid input").ece;
        if got != (accuracy - mean_conf).abs() {
            failures.push(format!("random input {trial}: {got} != {}", (accuracy - mean_conf).abs()));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "3 examples within 1e-12; 50/50 single-bin inputs exact".to_string()
        } else {
            failures.join("; ")
        },
    )
}

/// Two default `run`s produce the same summary bytes.
fn determinism(dir: &Path) -> Outcome {
    let mut bytes = Vec::new();
    for name in ["first", "second"] {
        let args = RunArgs {
            config: None,
            overrides: Overrides {
                output_dir: Some(dir.join(name)),
                ..Overrides::default()
            },
        };
        if let Err(e) = cmd_run(&args) {
            return outcome(false, format!("{name} run failed: {e:#}"));
        }
        match std::fs::read(dir.join(name).join("summary.json")) {
            Ok(b) => bytes.push(b),
            Err(e) => return outcome(false, format!("{name} summary unreadable: {e}")),
        }
    }
    outcome(
        bytes[0] == bytes[1],
        format!("summary.json {} bytes, identical: {}", bytes[0].len(), bytes[0] == bytes[1]),
    )
}

/// Every strategy spends exactly its budget under every config variant.
fn budget_accounting() -> Outcome {
    let spec = MixtureSpec {
        train: 120,
        test: 16,
        ..MixtureSpec::default()
    };
    let full: Pool<f64> = gaussian_mixture(&spec).expect("mixture");
    let pool = full.split_pool("train").expect("train split");
    let oracle = KernelOracle::new(0.1, full.label_space());
    let template = PromptTemplate::default();
    let variants: Vec<(&str, Vec<usize>, f64, Option<(Hops, usize)>, usize, GraphChoice)> = vec![
        ("B=20", vec![20], 0.5, None, 2, GraphChoice::Mnn),
        ("B=5", vec![5], 0.5, None, 2, GraphChoice::Mnn),
        ("schedule 5..20", vec![5, 5, 5, 5], 0.5, None, 2, GraphChoice::Mnn),
        ("theta=0.1", vec![20], 0.1, None, 2, GraphChoice::Mnn),
        ("theta=1", vec![20], 1.0, None, 2, GraphChoice::Mnn),
        ("1-hop m=15", vec![20], 0.5, Some((Hops::One, 15)), 3, GraphChoice::Mnn),
        ("2-hop m=2", vec![20], 0.5, Some((Hops::Two, 2)), 1, GraphChoice::Mnn),
        ("delta graph", vec![12], 0.5, Some((Hops::One, 8)), 4, GraphChoice::Delta),
    ];
    let mut runs = 0;
    let mut failures = Vec::new();
    for &name in StrategyName::ALL.iter() {
        for (label, increments, theta, shape, iterations, graph_choice) in &variants {
            for seed in [0u64, 1] {
                let mut config = StrategyConfig::new(name);
                config.seed = seed;
                config.theta = *theta;
                config.iterations = *iterations;
                config.graph = *graph_choice;
                if let Some((hops, m)) = shape {
                    config.hops = *hops;
                    config.m = *m;
                }
                let graph = match config.graph {
                    GraphChoice::Mnn => build_mnn_graph(&pool, config.m),
                    GraphChoice::Delta => build_delta_graph(&pool, config.m),
                }
                .expect("graph");
                let ctx = SelectionContext::new(
                    &pool,
                    Some(&graph),
                    Some(&oracle as &dyn Feedback<f64>),
                    &template,
                    &config,
                );
                let initial = init_pool_kmeans(&pool, 10, RngSeed(seed)).expect("initial pool");
                let l0 = initial.len();
                let mut state = SelectionState::new(initial, 0);
                let mut result = Ok(());
                for &inc in increments {
                    state.extend_budget(inc);
                    result = run_strategy(&ctx, &mut state, &mut GroundTruth);
                    if result.is_err() {
                        break;
                    }
                }
                runs += 1;
                let budget: usize = increments.iter().sum();
                let added = state.annotated.len() - l0;
                if let Err(e) = result {
                    failures.push(format!("{name}/{label}/seed {seed}: {e}"));
                } else if state.budget.spent() != budget || added != budget {
                    failures.push(format!(
                        "{name}/{label}/seed {seed}: spent {} added {added} of {budget}",
                        state.budget.spent()
                    ));
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{runs} runs ({} strategies x {} configs x 2 seeds) spent exactly B", StrategyName::ALL.len(), variants.len())
        } else {
            failures.join("; ")
        },
    )
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("scratch dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("greedy MaxCover (1-1/e) bound", Box::new(greedy_bound)),
        ("weighted greedy step-optimality", Box::new(weighted_step_optimality)),
        ("heuristic-m 1-hop lower bound = 15", Box::new(heuristic_m)),
        ("worked egonet example", Box::new(worked_egonets)),
        ("synthetic end-to-end trend", Box::new(|| synthetic_trend(&scratch.path().join("trend")))),
        ("budget-efficiency trend", Box::new(|| budget_efficiency(&scratch.path().join("efficiency")))),
        ("ECE exactness", Box::new(ece_exactness)),
        ("determinism of run", Box::new(|| determinism(&scratch.path().join("determinism")))),
        ("budget accounting", Box::new(budget_accounting)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = check();
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {} [{}] {name}: {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
