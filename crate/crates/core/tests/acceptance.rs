//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use prunebench::calib::{CalibStats, DEFAULT_DAMPING_FRACTION};
use prunebench::eval::{corpus_sequences, evaluate, perplexity};
use prunebench::fixture::{fixture_dir, LEXICON_FILE, NSA_SAMPLES_FILE};
use prunebench::linalg::{matmul, matmul_transb, spd_inverse, Matrix};
use prunebench::metrics::{
    ria_metric, sparsegpt_metric, wanda_metric, Method, SparseGptSaliency,
};
use prunebench::model::{forward, valid_sites, weight_name, ModelBundle};
use prunebench::nsa::{
    collect_traces, compare_pruned, load_lexicon, prepare_samples, score_neurons, select_and_match, NsaReport,
};
use prunebench::pipeline::{cmd_run, cmd_sweep, load_config, RunArgs, RunConfig, SweepArgs, SweepConfig};
use prunebench::report::{max_abs_activation, parse_heatmap_cells, parse_sweep_csv};
use prunebench::sparsify::{
    apply_mask, channel_permutation, n_of_m_mask, obs_prune, prune_model, retained_with_permutation,
    ObsConfig, Pattern, PruneConfig,
};
use prunebench::util::sha256_hex;

use common::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| gaussian(rng))
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) || (a == 0.0 && b == 0.0)
}

fn stats_for(x: &Matrix) -> CalibStats {
    let inputs = BTreeMap::from([("l".to_string(), x.clone())]);
    CalibStats::from_inputs(&inputs, DEFAULT_DAMPING_FRACTION, "acceptance").unwrap()
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0usize;
    for trial in 0..100 {
        let rows = rng.random_range(1..=16);
        let cols = rng.random_range(1..=16);
        let tokens = rng.random_range(cols + 1..=cols + 24);
        let w = random_matrix(&mut rng, rows, cols);
        // a few exact zeros exercise the 0/0 convention of RIA
        let w = w.map(|v| if v.abs() < 0.05 { 0.0 } else { v });
        let x = random_matrix(&mut rng, tokens, cols);
        let stats = stats_for(&x);

        let xd = DMatrix::from_row_slice(tokens, cols, x.data());
        let norms: Vec<f64> = (0..cols).map(|j| xd.column(j).norm()).collect();
        let wd = DMatrix::from_row_slice(rows, cols, w.data());
        let gram = xd.transpose() * &xd;
        let lambda = DEFAULT_DAMPING_FRACTION * gram.diagonal().mean();
        let h = gram + DMatrix::identity(cols, cols) * lambda;
        let h_inv = h.try_inverse().ok_or("oracle inverse failed")?;

        let check = |name: &str, got: &Matrix, want: &dyn Fn(usize, usize) -> f64| -> Result<(), String> {
            for i in 0..rows {
                for j in 0..cols {
                    let (g, e) = (got[(i, j)], want(i, j));
                    ensure(rel_close(g, e, 1e-8), || format!("trial {trial} {name}[{i},{j}]: {g} vs oracle {e}"))?;
                }
            }
            Ok(())
        };

        let wanda = wanda_metric(&w, &stats, "l").map_err(|e| e.to_string())?;
        check("wanda", &wanda, &|i, j| wd[(i, j)].abs() * norms[j])?;

        let row_abs: Vec<f64> = (0..rows).map(|i| wd.row(i).iter().map(|v| v.abs()).sum()).collect();
        let col_abs: Vec<f64> = (0..cols).map(|j| wd.column(j).iter().map(|v| v.abs()).sum()).collect();
        for a in [0.0, 0.5, 1.0] {
            let ria = ria_metric(&w, &stats, "l", a).map_err(|e| e.to_string())?;
            check(&format!("ria(a={a})"), &ria, &|i, j| {
                let v = wd[(i, j)].abs();
                let rel = |s: f64| if s == 0.0 { 0.0 } else { v / s };
                (rel(col_abs[j]) + rel(row_abs[i])) * norms[j].powf(a)
            })?;
        }

        let sg = sparsegpt_metric(&w, &stats, "l", SparseGptSaliency::Squared).map_err(|e| e.to_string())?;
        check("sparsegpt", &sg.metric, &|i, j| wd[(i, j)].powi(2) / h_inv[(j, j)].powi(2))?;
        let sg1 = sparsegpt_metric(&w, &stats, "l", SparseGptSaliency::Unsquared).map_err(|e| e.to_string())?;
        check("sparsegpt-unsquared", &sg1.metric, &|i, j| wd[(i, j)].powi(2) / h_inv[(j, j)])?;
        checked += 1;
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!("{checked} layers, 6 metric variants each, rel tol 1e-8, {:.2} s", start.elapsed().as_secs_f64()))
}

fn mask_exactness(bundle: &ModelBundle, stats: &CalibStats) -> Outcome {
    let start = Instant::now();
    let mut layers_checked = 0usize;
    for method in Method::ALL {
        for step in 1..=8 {
            let ratio = step as f64 / 10.0;
            let cfg = PruneConfig::new(method, Pattern::Unstructured { ratio });
            let out = prune_model(bundle, stats, &cfg, false).map_err(|e| e.to_string())?;
            for mask in &out.masks {
                let (rows, cols) = (mask.rows, mask.cols);
                let expect = ((1.0 - ratio) * cols as f64).round() as usize;
                let w = out.bundle.linear_weight(&mask.layer).map_err(|e| e.to_string())?;
                for i in 0..rows {
                    let kept = (0..cols).filter(|&j| mask.keeps(i, j)).count();
                    ensure(kept == expect, || {
                        format!("{method} r={ratio} {} row {i}: kept {kept}, rule says {expect}", mask.layer)
                    })?;
                    let zeroed = (0..cols).filter(|&j| !mask.keeps(i, j) && w[(i, j)] != 0.0).count();
                    ensure(zeroed == 0, || format!("{method} {} row {i}: pruned weights not zero", mask.layer))?;
                }
                let achieved = 1.0 - mask.kept() as f64 / (rows * cols) as f64;
                let rule = 1.0 - (expect * rows) as f64 / (rows * cols) as f64;
                ensure(achieved == rule, || format!("{} sparsity {achieved} != {rule}", mask.layer))?;
                layers_checked += 1;
            }
        }
        let cfg = PruneConfig::new(method, Pattern::NOfM { n: 2, m: 4 });
        let out = prune_model(bundle, stats, &cfg, false).map_err(|e| e.to_string())?;
        let mut groups = 0usize;
        for mask in &out.masks {
            let w = out.bundle.linear_weight(&mask.layer).map_err(|e| e.to_string())?;
            for i in 0..mask.rows {
                for g in (0..mask.cols).step_by(4) {
                    let kept = (g..g + 4).filter(|&j| mask.keeps(i, j)).count();
                    let nonzero = (g..g + 4).filter(|&j| w[(i, j)] != 0.0).count();
                    ensure(kept <= 2 && nonzero <= 2, || {
                        format!("{method} 2:4 {} row {i} group {g}: {kept} kept, {nonzero} nonzero", mask.layer)
                    })?;
                    groups += 1;
                }
            }
        }
        ensure(groups > 0, || "no 2:4 groups checked".into())?;
    }
    within(start.elapsed(), 10.0)?;
    Ok(format!(
        "{layers_checked} layer masks at 0.1..0.8 exact, all 2:4 groups valid, {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

fn obs_dominance() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut wins = 0;
    let mut worst_gap: f64 = 0.0;
    let mut ratio_sum = 0.0;
    for _ in 0..100 {
        let w = random_matrix(&mut rng, 16, 32);
        // correlated inputs, as real activations are
        let z = random_matrix(&mut rng, 64, 32);
        let mix = Matrix::from_fn(32, 32, |i, j| if i == j { 1.0 } else { 0.3 * gaussian(&mut rng) });
        let x = matmul(&z, &mix).map_err(|e| e.to_string())?;
        let h = stats_for(&x).damped_gram("l").map_err(|e| e.to_string())?;
        let h_inv = spd_inverse(&h).map_err(|e| e.to_string())?;
        let (w_obs, mask) = obs_prune("l", &w, &h_inv, Pattern::Unstructured { ratio: 0.5 }, None, &ObsConfig::default())
            .map_err(|e| e.to_string())?;
        let w_mask = apply_mask(&w, &mask).map_err(|e| e.to_string())?;
        let err = |wh: &Matrix| matmul_transb(&w.sub(wh).unwrap(), &x).unwrap().frobenius_norm();
        let (e_obs, e_mask) = (err(&w_obs), err(&w_mask));
        if e_obs <= e_mask + 1e-9 {
            wins += 1;
        } else {
            worst_gap = worst_gap.max(e_obs - e_mask);
        }
        ratio_sum += e_obs / e_mask;
    }
    within(start.elapsed(), 10.0)?;
    ensure(wins >= 95, || format!("OBS no worse in only {wins}/100 trials (worst excess {worst_gap:.3e})"))?;
    Ok(format!(
        "{wins}/100 trials no worse than the same mask without the update, mean error ratio {:.3}, {:.2} s",
        ratio_sum / 100.0,
        start.elapsed().as_secs_f64()
    ))
}

fn hessian_inverse(stats: &CalibStats) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for layer in stats.layer_names() {
        let h = stats.damped_gram(layer).map_err(|e| e.to_string())?;
        let h_inv = spd_inverse(&h).map_err(|e| e.to_string())?;
        let prod = matmul(&h, &h_inv).map_err(|e| e.to_string())?;
        let dev = prod.max_abs_diff(&Matrix::identity(h.rows()));
        ensure(dev <= 1e-6, || format!("{layer}: ‖H·H⁻¹ − I‖_max = {dev:e}"))?;
        worst = worst.max(dev);
        n += 1;
    }
    Ok(format!("{n} layers, worst ‖H·H⁻¹ − I‖_max = {worst:.2e}"))
}

/// Best N:M retained importance over every grouping of the columns.
fn brute_force_optimum(metric: &Matrix, n: usize, m: usize) -> f64 {
    fn rec(metric: &Matrix, left: Vec<usize>, n: usize, m: usize) -> f64 {
        if left.is_empty() {
            return 0.0;
        }
        let first = left[0];
        let rest: Vec<usize> = left[1..].to_vec();
        let mut best = f64::NEG_INFINITY;
        let mut choose = |picked: &[usize]| {
            let mut group = vec![first];
            group.extend_from_slice(picked);
            let remaining: Vec<usize> = rest.iter().copied().filter(|c| !picked.contains(c)).collect();
            let here = retained_with_permutation(metric, &group, n, m);
            best = best.max(here + rec(metric, remaining, n, m));
        };
        combos(&rest, m - 1, &mut Vec::new(), 0, &mut choose);
        best
    }
    fn combos(items: &[usize], k: usize, cur: &mut Vec<usize>, from: usize, f: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in from..items.len() {
            cur.push(items[i]);
            combos(items, k, cur, i + 1, f);
            cur.pop();
        }
    }
    rec(metric, (0..metric.cols()).collect(), n, m)
}

fn channel_permutation_quality(bundle: &ModelBundle, stats: &CalibStats) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_ratio: f64 = 1.0;
    let mut instances = 0;
    for (n, m, cols) in [(2, 4, 8), (2, 4, 4), (1, 2, 8), (1, 2, 6), (1, 4, 8), (3, 4, 8)] {
        for _ in 0..60 {
            let rows = rng.random_range(1..=6);
            let metric = Matrix::from_fn(rows, cols, |_, _| {
                let v: f64 = gaussian(&mut rng);
                v.abs() * if rng.random_bool(0.2) { 5.0 } else { 1.0 }
            });
            let (perm, mask) = channel_permutation("t", &metric, n, m).map_err(|e| e.to_string())?;
            let got = mask.retained_importance(&metric);
            ensure((got - retained_with_permutation(&metric, &perm, n, m)).abs() <= 1e-9 * got.abs().max(1.0), || {
                "mask retained importance disagrees with its permutation".into()
            })?;
            let identity = n_of_m_mask("t", &metric, n, m).map_err(|e| e.to_string())?.retained_importance(&metric);
            ensure(got >= identity, || format!("{n}:{m} x{cols}: {got} below identity {identity}"))?;
            let best = brute_force_optimum(&metric, n, m);
            ensure(got >= 0.95 * best, || format!("{n}:{m} x{cols}: {got} below 0.95 x optimum {best}"))?;
            worst_ratio = worst_ratio.min(got / best);
            instances += 1;
        }
    }
    let mut layers = 0;
    for method in Method::ALL {
        let cfg = PruneConfig::new(method, Pattern::NOfM { n: 2, m: 4 });
        let out = prune_model(bundle, stats, &cfg, true).map_err(|e| e.to_string())?;
        for (layer, metric) in out.metrics.as_ref().expect("metrics kept") {
            let (_, searched) = channel_permutation(layer, metric, 2, 4).map_err(|e| e.to_string())?;
            let identity = n_of_m_mask(layer, metric, 2, 4).map_err(|e| e.to_string())?;
            let (got, base) = (searched.retained_importance(metric), identity.retained_importance(metric));
            ensure(got >= base, || format!("{method} {layer}: permuted {got} < identity {base}"))?;
            layers += 1;
        }
    }
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "{instances} exhaustive instances (worst {:.4} of optimum), {layers} fixture layers never below identity, {:.1} s",
        worst_ratio,
        start.elapsed().as_secs_f64()
    ))
}

fn score_properties(bundle: &ModelBundle) -> Outcome {
    let lexicon = load_lexicon(&fixture_path(LEXICON_FILE)).map_err(|e| e.to_string())?;
    let mut texts = corpus_lines_of(&fixture_path(NSA_SAMPLES_FILE))?;
    texts.extend(corpus("reviews").into_iter().take(20));
    let samples = prepare_samples(bundle, &texts, &lexicon).map_err(|e| e.to_string())?;
    let mut neurons = 0;
    for site in valid_sites(bundle.spec()) {
        let traces = collect_traces(bundle, &samples, &site).map_err(|e| e.to_string())?;
        let members: Vec<Vec<usize>> = samples.iter().map(|s| s.members.clone()).collect();
        let s = score_neurons(&traces, &members, false).map_err(|e| e.to_string())?;
        for (j, v) in s.scores.iter().enumerate() {
            ensure((0.0..=1.0).contains(v), || format!("{site} neuron {j}: score {v}"))?;
        }
        let all: Vec<Vec<usize>> = traces.iter().map(|t| (0..t.rows()).collect()).collect();
        let full = score_neurons(&traces, &all, false).map_err(|e| e.to_string())?;
        for (j, v) in full.scores.iter().enumerate() {
            let nonzero = !full.zero_denominator.contains(&j);
            ensure(!nonzero || *v == 1.0, || format!("{site} neuron {j}: full cover gives {v}"))?;
        }
        let none = vec![Vec::new(); traces.len()];
        let empty = score_neurons(&traces, &none, false).map_err(|e| e.to_string())?;
        ensure(empty.scores.iter().all(|v| *v == 0.0), || format!("{site}: empty S gives nonzero score"))?;
        neurons += s.scores.len();
    }

    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (1usize..4, 1usize..7, 1usize..5, any::<u64>());
    runner
        .run(&strategy, |(n_samples, max_tokens, width, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let traces: Vec<Matrix> = (0..n_samples)
                .map(|_| {
                    let t = rng.random_range(1..=max_tokens);
                    Matrix::from_fn(t, width, |_, _| if rng.random_bool(0.2) { 0.0 } else { gaussian(&mut rng) })
                })
                .collect();
            let small: Vec<Vec<usize>> = traces
                .iter()
                .map(|t| (0..t.rows()).filter(|_| rng.random_bool(0.4)).collect())
                .collect();
            let large: Vec<Vec<usize>> = traces
                .iter()
                .zip(&small)
                .map(|(t, s)| (0..t.rows()).filter(|p| s.contains(p) || rng.random_bool(0.4)).collect())
                .collect();
            let a = score_neurons(&traces, &small, false).unwrap();
            let b = score_neurons(&traces, &large, false).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                prop_assert!((0.0..=1.0).contains(x) && (0.0..=1.0).contains(y));
                prop_assert!(y >= x, "score fell from {} to {} when S grew", x, y);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{neurons} fixture neurons over all sites in [0,1], full/empty cover exact, 1000 monotonicity cases"))
}

fn corpus_lines_of(path: &Path) -> Result<Vec<String>, String> {
    prunebench::calib::load_corpus(path).map_err(|e| e.to_string())
}

fn nsa_null(bundle: &ModelBundle) -> Outcome {
    let lexicon = load_lexicon(&fixture_path(LEXICON_FILE)).map_err(|e| e.to_string())?;
    let texts = corpus_lines_of(&fixture_path(NSA_SAMPLES_FILE))?;
    let samples = prepare_samples(bundle, &texts, &lexicon).map_err(|e| e.to_string())?;
    let site = "layer.1.mlp.act";
    let traces = collect_traces(bundle, &samples, site).map_err(|e| e.to_string())?;
    let members: Vec<Vec<usize>> = samples.iter().map(|s| s.members.clone()).collect();
    let scores = score_neurons(&traces, &members, false).map_err(|e| e.to_string())?;
    let fresh = || select_and_match(site, &scores, &samples, &traces, &lexicon, 8, 3).map_err(|e| e.to_string());

    let mut records = fresh()?;
    compare_pruned(&mut records, bundle, bundle, &samples, 0.5).map_err(|e| e.to_string())?;
    let mut words = 0;
    for r in &records {
        for w in &r.matched_words {
            if w.dense_mean > 0.0 {
                ensure(w.drop_ratio == Some(0.0), || {
                    format!("neuron {} word {}: self drop {:?}", r.neuron, w.word, w.drop_ratio)
                })?;
                words += 1;
            } else {
                ensure(w.drop_undefined, || "zero dense mean not flagged".into())?;
            }
        }
    }

    let target = records[0].neuron;
    let fc1 = weight_name("layer.1.mlp.fc1");
    let mut w = bundle.tensor(&fc1).ok_or("fc1 missing")?.clone();
    w.row_mut(target).fill(0.0);
    let zeroed = bundle
        .apply_weights(BTreeMap::from([(fc1, w)]))
        .map_err(|e| e.to_string())?;
    let mut records = fresh()?;
    compare_pruned(&mut records, bundle, &zeroed, &samples, 0.5).map_err(|e| e.to_string())?;
    let rec = records.iter().find(|r| r.neuron == target).ok_or("target neuron missing")?;
    for w in &rec.matched_words {
        if w.dense_mean > 0.0 {
            ensure(w.drop_ratio == Some(1.0), || format!("zeroed neuron word {}: drop {:?}", w.word, w.drop_ratio))?;
        }
    }
    Ok(format!(
        "{} records / {words} words drop 0 against self; zeroing neuron {target} gives drop 1",
        records.len()
    ))
}

fn identity_pipeline(bundle: &ModelBundle, stats: &CalibStats) -> Outcome {
    let tasks = tasks();
    let lines: Vec<String> = corpus("wiki").into_iter().take(32).collect();
    let seqs = corpus_sequences(bundle, &lines);
    let dense_ppl = perplexity(bundle, &seqs).map_err(|e| e.to_string())?;
    let dense_eval: Vec<_> = tasks.iter().map(|t| evaluate(bundle, t).unwrap()).collect();
    let dense_logits: Vec<Matrix> = seqs
        .iter()
        .take(8)
        .map(|s| forward::<&str>(bundle, s, &[]).unwrap().logits)
        .collect();
    for method in Method::ALL {
        let cfg = PruneConfig::new(method, Pattern::Unstructured { ratio: 0.0 });
        let out = prune_model(bundle, stats, &cfg, false).map_err(|e| e.to_string())?;
        let pruned = &out.bundle;
        for (s, want) in seqs.iter().zip(&dense_logits) {
            let got = forward::<&str>(pruned, s, &[]).map_err(|e| e.to_string())?.logits;
            ensure(got.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                format!("{method}: logits differ")
            })?;
        }
        for (t, want) in tasks.iter().zip(&dense_eval) {
            let got = evaluate(pruned, t).map_err(|e| e.to_string())?;
            ensure(&got == want, || format!("{method}: EvalResult for {} differs", t.task))?;
        }
        let ppl = perplexity(pruned, &seqs).map_err(|e| e.to_string())?;
        ensure(ppl.to_bits() == dense_ppl.to_bits(), || format!("{method}: perplexity {ppl} vs {dense_ppl}"))?;
    }
    Ok(format!(
        "3 methods at sparsity 0: logits, {} EvalResults and perplexity {dense_ppl:.3} bit-identical",
        tasks.len()
    ))
}

fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, sha256_hex(&std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn run_fixture_pipeline(out_root: &Path) -> Result<std::path::PathBuf, String> {
    let config_path = fixture_dir().join("configs/pipeline.json");
    let config: RunConfig = load_config(&config_path).map_err(|e| e.to_string())?;
    let args = RunArgs {
        config,
        base_dir: config_path.parent().unwrap().to_path_buf(),
        config_hash: Some(prunebench::util::file_sha256(&config_path).map_err(|e| e.to_string())?),
        out_root: out_root.to_path_buf(),
        run_id: None,
        record_timings: false,
    };
    let command = vec!["prunebench".into(), "run".into(), "--config".into(), "configs/pipeline.json".into()];
    cmd_run(&args, &command).map(|(root, _)| root).map_err(|e| e.to_string())
}

fn determinism(first: &Path) -> Outcome {
    let other = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = run_fixture_pipeline(other.path())?;
    let (a, b) = (tree_hashes(first), tree_hashes(&second));
    ensure(a.keys().eq(b.keys()), || "output trees list different files".into())?;
    for (k, v) in &a {
        ensure(&b[k] == v, || format!("{k} differs between runs"))?;
    }
    ensure(a.contains_key("nsa/sentiment.html") && a.contains_key("manifest.json"), || {
        "run tree lacks the report or manifest".into()
    })?;
    Ok(format!("{} files byte-identical across two runs", a.len()))
}

fn sweep(config: &str, out_root: &Path) -> Result<prunebench::pipeline::SweepOutcome, String> {
    let path = fixture_dir().join(config);
    let cfg: SweepConfig = load_config(&path).map_err(|e| e.to_string())?;
    let args = SweepArgs {
        config: cfg,
        base_dir: path.parent().unwrap().to_path_buf(),
        config_hash: None,
        out_root: out_root.to_path_buf(),
        run_id: Some("sweep".into()),
        record_timings: false,
    };
    cmd_sweep(&args, &["prunebench".into(), "sweep".into()]).map_err(|e| e.to_string())
}

fn calibration_sensitivity(bundle: &ModelBundle) -> Outcome {
    let start = Instant::now();
    let settings = quick_settings(42);
    let wiki = calibrate_on(bundle, "wiki", &settings);
    let reviews = calibrate_on(bundle, "reviews", &settings);
    let cfg = PruneConfig::new(Method::Wanda, Pattern::Unstructured { ratio: 0.5 });
    let a = prune_model(bundle, &wiki, &cfg, false).map_err(|e| e.to_string())?;
    let b = prune_model(bundle, &reviews, &cfg, false).map_err(|e| e.to_string())?;
    let mut differing = 0;
    let mut total_hamming = 0;
    for (ma, mb) in a.masks.iter().zip(&b.masks) {
        let h = ma.keep.iter().zip(&mb.keep).filter(|(x, y)| x != y).count();
        differing += usize::from(h > 0);
        total_hamming += h;
    }
    ensure(differing >= 1, || "masks identical across calibration corpora".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg: SweepConfig = load_config(&fixture_dir().join("configs/sweep_corpora.json")).map_err(|e| e.to_string())?;
    cfg.calib_corpora.truncate(2);
    let args = SweepArgs {
        config: cfg,
        base_dir: fixture_dir().join("configs"),
        config_hash: None,
        out_root: dir.path().to_path_buf(),
        run_id: Some("corpora".into()),
        record_timings: false,
    };
    let outcome = cmd_sweep(&args, &["prunebench".into(), "sweep".into()]).map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(outcome.root.join("sweep.csv")).map_err(|e| e.to_string())?;
    let rows = parse_sweep_csv(&csv).map_err(|e| e.to_string())?;
    ensure(rows.len() == outcome.grid.cells.len() * 4, || "sweep CSV is missing cells".into())?;
    // per (method, task): accuracy of each corpus cell
    let mut by_key: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_key.entry((r.method.clone(), r.task.clone())).or_default().push(r.accuracy);
    }
    let distinct = by_key.values().filter(|v| v.windows(2).any(|w| w[0] != w[1])).count();
    ensure(distinct >= 1, || "every corpus cell has the same accuracy".into())?;
    let report = std::fs::read_to_string(outcome.root.join("sweep_report.md")).map_err(|e| e.to_string())?;
    let spread = prunebench::report::corpus_spread(&rows);
    let max_spread = spread.iter().map(|s| s.spread).fold(0.0, f64::max);
    ensure(report.contains("Calibration corpus spread") && max_spread > 0.0, || {
        "report does not surface the corpus spread".into()
    })?;
    within(start.elapsed(), 120.0)?;
    Ok(format!(
        "{differing}/{} layers differ (Hamming {total_hamming}); {distinct}/{} method×task groups differ by corpus, max spread {max_spread:.3}; {:.1} s",
        a.masks.len(),
        by_key.len(),
        start.elapsed().as_secs_f64()
    ))
}

/// Wiki perplexity of the Wanda sparsity sweep, as first measured when the
/// fixture was frozen: 103.657 at 0.1 and 3.797e9 at 0.8.
const FROZEN_PPL_LOW: f64 = 103.657;
const FROZEN_PPL_HIGH: f64 = 3.797e9;

fn sparsity_degradation() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outcome = sweep("configs/sweep_sparsity.json", dir.path())?;
    ensure(outcome.rows.len() == 8, || format!("{} rows, expected 8", outcome.rows.len()))?;
    let ppl = |pattern: &str| {
        outcome
            .rows
            .iter()
            .find(|r| r.pattern == pattern)
            .and_then(|r| r.perplexity)
            .ok_or_else(|| format!("no perplexity for sparsity {pattern}"))
    };
    let (low, high) = (ppl("0.1")?, ppl("0.8")?);
    ensure(high >= low, || format!("perplexity at 0.8 ({high}) below 0.1 ({low})"))?;
    ensure(low <= FROZEN_PPL_LOW * 1.05, || format!("perplexity at 0.1 regressed: {low} vs frozen {FROZEN_PPL_LOW}"))?;
    let (ratio, frozen_ratio) = (high / low, FROZEN_PPL_HIGH / FROZEN_PPL_LOW);
    ensure(ratio >= 0.5 * frozen_ratio, || {
        format!("degradation ratio {ratio:.3e} fell below half the frozen {frozen_ratio:.3e}")
    })?;
    within(start.elapsed(), 120.0)?;
    Ok(format!(
        "perplexity {low:.3} at 0.1 → {high:.4e} at 0.8 (ratio {ratio:.3e}, frozen {frozen_ratio:.3e}), {:.1} s",
        start.elapsed().as_secs_f64()
    ))
}

fn heatmap_fidelity(run_root: &Path) -> Outcome {
    let json = std::fs::read_to_string(run_root.join("nsa/sentiment.json")).map_err(|e| e.to_string())?;
    let report: NsaReport = serde_json::from_str(&json).map_err(|e| e.to_string())?;
    let html = std::fs::read_to_string(run_root.join("nsa/sentiment.html")).map_err(|e| e.to_string())?;
    let cells = parse_heatmap_cells(&html).map_err(|e| e.to_string())?;
    let mut expected = Vec::new();
    for r in &report.records {
        for s in &r.per_token {
            expected.extend(s.dense.iter().map(|v| ("dense", *v)));
            expected.extend(s.pruned.as_ref().ok_or("record without pruned side")?.iter().map(|v| ("pruned", *v)));
        }
    }
    ensure(cells.len() == expected.len(), || format!("{} cells for {} activations", cells.len(), expected.len()))?;
    let max = max_abs_activation(&report.records);
    for (i, ((row, _, label, alpha), (side, a))) in cells.iter().zip(&expected).enumerate() {
        ensure(row == side, || format!("cell {i} in row {row}, expected {side}"))?;
        ensure((label - a).abs() <= 0.5e-4 + 1e-12, || format!("cell {i}: label {label} vs recorded {a}"))?;
        ensure((alpha - a.abs() / max).abs() <= 0.5e-6 + 1e-12, || format!("cell {i}: alpha {alpha} vs |A|/max"))?;
    }
    let mut order: Vec<(f64, f64)> = expected.iter().zip(&cells).map(|((_, a), c)| (a.abs(), c.3)).collect();
    order.sort_by(|x, y| x.0.total_cmp(&y.0));
    ensure(order.windows(2).all(|w| w[1].1 >= w[0].1), || "intensity not monotone in |A|".into())?;
    ensure(!html.contains("http://") && !html.contains("https://") && !html.contains("src="), || {
        "report references external resources".into()
    })?;
    Ok(format!("{} cells: labels match to 4 decimals, intensity monotone in |A|", cells.len()))
}

fn main() {
    let total = Instant::now();
    let bundle = fixture_model();
    let stats = calibrate_on(&bundle, "wiki", &quick_settings(0));
    let run_dir = tempfile::tempdir().expect("temp dir");
    let first_run = run_fixture_pipeline(run_dir.path());

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("metric oracle equivalence", Box::new(metric_oracles)),
        ("mask exactness", Box::new(|| mask_exactness(&bundle, &stats))),
        ("OBS dominance", Box::new(obs_dominance)),
        ("Hessian inverse quality", Box::new(|| hessian_inverse(&stats))),
        ("channel permutation", Box::new(|| channel_permutation_quality(&bundle, &stats))),
        ("score properties", Box::new(|| score_properties(&bundle))),
        ("attribution self-comparison null", Box::new(|| nsa_null(&bundle))),
        ("identity pipeline", Box::new(|| identity_pipeline(&bundle, &stats))),
        ("determinism", Box::new(|| determinism(first_run.as_ref().map_err(Clone::clone)?))),
        ("calibration sensitivity", Box::new(|| calibration_sensitivity(&bundle))),
        ("sparsity degradation", Box::new(sparsity_degradation)),
        ("heatmap fidelity", Box::new(|| heatmap_fidelity(first_run.as_ref().map_err(Clone::clone)?))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {p:?}")));
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        criteria.len() - failed,
        total.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
