//! Acceptance gate. Runs each criterion in sequence, so runtimes are not
//! distorted by sibling tests, and writes one PASS/FAIL line per criterion
//! straight to stdout (visible without `--nocapture`).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use protopad::data::Label;
use protopad::episodes::{extend_support, sample_episode};
use protopad::metrics::{apcer, apcer_worst_case, bpcer, bpcer_at_ap, det_curve, eer};
use protopad::protonet::{classify_query, compute_prototypes, episode_loss, softmax_neg};
use protopad::synthetic::generate_synthetic;
use protopad::trainer::{gradient_check, EpisodeFixture, PrototypePool};
use protopad::{
    Activation, CountrySpec, Dataset64, DistanceMetric, EmbeddingConfig, EpisodeSpec,
    ExtensionSpec, ScoreSet, SyntheticSpec,
};
use protopad_cli::{cmd_extend, cmd_train, RetrainMode, RunConfig};
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

/// Failure details as a `; `-joined suffix, empty when there are none.
fn listed(items: &[String]) -> String {
    if items.is_empty() {
        String::new()
    } else {
        format!(" [{}]", items.join("; "))
    }
}

fn report(n: usize, name: &str, elapsed: Duration, o: &Outcome) {
    let line = format!(
        "criterion {n} {:<4} {name}: {} [{:.1}s]\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

// ---------------------------------------------------------------- criterion 1

/// Counting oracle over every candidate threshold. Returns (threshold, worst
/// APCER, BPCER) rows in increasing threshold order.
fn sweep(s: &ScoreSet<f64>) -> Vec<(f64, f64, f64)> {
    let mut candidates: Vec<f64> = s
        .bona_fide
        .iter()
        .chain(s.attacks.values().flatten())
        .copied()
        .collect();
    candidates.push(0.0);
    let top = candidates.iter().copied().fold(0.0, f64::max);
    candidates.push(if top < 1.0 { 1.0 } else { f64::INFINITY });
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    candidates
        .into_iter()
        .map(|t| {
            let mut worst: f64 = 0.0;
            for v in s.attacks.values() {
                let accepted = v.iter().filter(|&&x| x >= t).count();
                worst = worst.max(accepted as f64 / v.len() as f64);
            }
            let rejected = s.bona_fide.iter().filter(|&&x| x < t).count();
            (t, worst, rejected as f64 / s.bona_fide.len() as f64)
        })
        .collect()
}

/// Equality point if one exists, else linear interpolation across the first
/// sign change of APCER − BPCER.
fn oracle_eer(rows: &[(f64, f64, f64)]) -> f64 {
    const TIE: f64 = 1e-12;
    if let Some(r) = rows.iter().find(|r| (r.1 - r.2).abs() < TIE) {
        return r.1;
    }
    for w in rows.windows(2) {
        let (da, db) = (w[0].1 - w[0].2, w[1].1 - w[1].2);
        if da > 0.0 && db < 0.0 {
            return w[0].1 + da / (da - db) * (w[1].1 - w[0].1);
        }
    }
    unreachable!("the sweep starts at APCER 1 and ends at APCER 0")
}

/// BPCER at the first threshold meeting APCER ≤ 1/ap, interpolated from the
/// previous row when the target is not hit exactly.
fn oracle_bpcer_ap(rows: &[(f64, f64, f64)], ap: u32) -> f64 {
    let target = 1.0 / ap as f64;
    let j = rows.iter().position(|r| r.1 <= target + 1e-12).unwrap();
    if (rows[j].1 - target).abs() < 1e-12 || j == 0 {
        return rows[j].2;
    }
    let (p, h) = (rows[j - 1], rows[j]);
    p.2 + (p.1 - target) / (p.1 - h.1) * (h.2 - p.2)
}

fn random_score_set(rng: &mut ChaCha8Rng) -> ScoreSet<f64> {
    // Mix coarse grids (many ties) with continuous scores.
    let levels: Option<u32> = if rng.random_bool(0.5) {
        Some(rng.random_range(1..15))
    } else {
        None
    };
    let score = |rng: &mut ChaCha8Rng| match levels {
        Some(l) => rng.random_range(0..=l) as f64 / l as f64,
        None => rng.random_range(0.0..=1.0),
    };
    let total = rng.random_range(2..=100usize);
    let n_bf = rng.random_range(1..total);
    let n_pais = rng.random_range(1..=3usize).min(total - n_bf);
    let bona_fide = (0..n_bf).map(|_| score(rng)).collect();
    let mut attacks = BTreeMap::new();
    let n_att = total - n_bf;
    for k in 0..n_pais {
        let share = n_att / n_pais + usize::from(k < n_att % n_pais);
        attacks.insert(format!("pais{k}"), (0..share).map(|_| score(rng)).collect());
    }
    ScoreSet { bona_fide, attacks }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_diff: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..1000 {
        let s = random_score_set(&mut rng);
        let rows = sweep(&s);
        let curve = det_curve(&s).unwrap();
        let mut diffs = vec![];
        if rows.len() != curve.points.len() {
            failures += 1;
            continue;
        }
        for (r, p) in rows.iter().zip(&curve.points) {
            if r.0 != p.threshold {
                diffs.push(1.0);
            }
            diffs.push((r.1 - p.apcer).abs());
            diffs.push((r.2 - p.bpcer).abs());
            // Individual operations at this threshold, per PAIS and worst case.
            let t = r.0;
            for v in s.attacks.values() {
                let counted = v.iter().filter(|&&x| x >= t).count() as f64 / v.len() as f64;
                diffs.push((apcer(v, t).unwrap() - counted).abs());
            }
            diffs.push((apcer_worst_case(&s.attacks, t).unwrap() - r.1).abs());
            diffs.push((bpcer(&s.bona_fide, t).unwrap() - r.2).abs());
        }
        diffs.push((eer(&curve) - oracle_eer(&rows)).abs());
        for ap in [10, 20, 100] {
            diffs.push((bpcer_at_ap(&curve, ap) - oracle_bpcer_ap(&rows, ap)).abs());
        }
        let d = diffs.into_iter().fold(0.0, f64::max);
        worst_diff = worst_diff.max(d);
        failures += usize::from(d > 1e-9);
    }
    outcome(
        failures == 0,
        format!(
            "1000 random score sets, {failures} mismatches, max |diff| {worst_diff:.2e} (tol 1e-9)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let attacks = [0.1, 0.2, 0.3, 0.8];
    let a = apcer(&attacks, 0.5).unwrap();
    let mut bf = vec![0.9; 9];
    bf.push(0.2);
    let b = bpcer(&bf, 0.5).unwrap();
    let curve = det_curve(&ScoreSet::new(vec![0.9, 0.6, 0.4], vec![0.5, 0.3, 0.1])).unwrap();
    let e = eer(&curve);
    let pass = a == 0.25 && b == 0.1 && e == 1.0 / 3.0;
    outcome(
        pass,
        format!("APCER {a} (0.25), BPCER {b} (0.1), EER {e} (1/3)"),
    )
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for depth in 1..=3 {
        for activation in [Activation::Relu, Activation::Tanh] {
            for seed in 0..4u64 {
                let data_seed = 100 * depth as u64 + seed;
                let spec = SyntheticSpec {
                    countries: vec![CountrySpec::new("ESP", 4, 2)],
                    images_per_user_per_condition: 2,
                    dimension: 6,
                    class_separation: 2.0,
                    seed: data_seed,
                    ..SyntheticSpec::default()
                };
                let ds: Dataset64 = generate_synthetic(&spec).unwrap();
                let mut ep_spec = EpisodeSpec::baseline(&["ESP"], data_seed);
                ep_spec.shots_per_country_class = 2;
                ep_spec.query_size = 4;
                // 4 support + 4 query samples, d = 6.
                let fx = EpisodeFixture::from_episode(&sample_episode(&ds, &ep_spec, 0).unwrap());
                let hidden = vec![5; depth - 1];
                let cfg = EmbeddingConfig {
                    activation,
                    seed: data_seed,
                    ..EmbeddingConfig::new(6, hidden, 3)
                };
                worst = worst.max(gradient_check(&cfg, &fx).unwrap());
                count += 1;
            }
        }
    }
    outcome(
        worst < 1e-5 && count >= 20,
        format!("{count} fixtures over 1-3 layers x relu/tanh, max relative error {worst:.2e} (tol 1e-5)"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..500 {
        let n_classes = rng.random_range(2..5usize);
        let dim = rng.random_range(1..6usize);
        let n_support = rng.random_range(n_classes..12);
        let mut classes: Vec<usize> = (0..n_classes).collect();
        classes.extend((n_classes..n_support).map(|_| rng.random_range(0..n_classes)));
        let scale = if rng.random_bool(0.2) { 300.0 } else { 3.0 };
        let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
        };
        let support: Vec<Vec<f64>> = (0..n_support).map(|_| vec(&mut rng)).collect();
        let protos = compute_prototypes(&classes, &support, n_classes).unwrap();
        let mut brute = vec![vec![0.0; dim]; n_classes];
        #[allow(clippy::needless_range_loop)]
        for k in 0..n_classes {
            let members: Vec<&Vec<f64>> = support
                .iter()
                .zip(&classes)
                .filter(|(_, &c)| c == k)
                .map(|(v, _)| v)
                .collect();
            for j in 0..dim {
                brute[k][j] = members.iter().map(|v| v[j]).sum::<f64>() / members.len() as f64;
                worst = worst.max((protos.prototypes[k][j] - brute[k][j]).abs());
            }
        }

        let queries: Vec<Vec<f64>> = (0..rng.random_range(1..6)).map(|_| vec(&mut rng)).collect();
        let truth: Vec<usize> = queries
            .iter()
            .map(|_| rng.random_range(0..n_classes))
            .collect();
        let mut posteriors = vec![];
        let mut brute_loss = 0.0;
        for (q, &y) in queries.iter().zip(&truth) {
            let (post, pred) =
                classify_query(q, &protos, DistanceMetric::SquaredEuclidean).unwrap();
            let d: Vec<f64> = brute
                .iter()
                .map(|c| c.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            // p_k = 1 / Σ_j exp(d_k − d_j): no shared shift, overflow gives p = 0.
            let p: Vec<f64> = d
                .iter()
                .map(|dk| 1.0 / d.iter().map(|dj| (dk - dj).exp()).sum::<f64>())
                .collect();
            let argmin = (0..n_classes).fold(0, |b, k| if d[k] < d[b] { k } else { b });
            for (got, want) in post.probabilities.iter().zip(&p) {
                worst = worst.max((got - want).abs());
            }
            if pred != argmin {
                worst = f64::INFINITY;
            }
            brute_loss -= p[y].max(1e-12).ln();
            posteriors.push(post);
        }
        brute_loss /= queries.len() as f64;
        let loss = episode_loss(&posteriors, &truth).unwrap();
        worst = worst.max((loss - brute_loss).abs() / brute_loss.abs().max(1.0));
    }
    for _ in 0..500 {
        let n = rng.random_range(1..8);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1e6)).collect();
        let sum: f64 = softmax_neg(&d).iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
    }
    outcome(
        worst <= 1e-12 && worst_sum <= 1e-9,
        format!("max deviation {worst:.2e} (tol 1e-12), max |sum p - 1| {worst_sum:.2e} at distances up to 1e6 (tol 1e-9)"),
    )
}

// ---------------------------------------------------------------- criterion 5

const EPISODE: &str = r#"
[episode]
shots_per_country_class = 2
support_countries = ["ESP", "CHL"]
query_size = 42
"#;

fn base_config(out: &Path, synthetic: SyntheticSpec, extra: &str) -> RunConfig {
    let mut cfg = RunConfig::from_toml(&format!("{EPISODE}{extra}")).unwrap();
    cfg.synthetic = Some(synthetic);
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn best_history_row(path: &Path) -> (usize, f64, f64) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut best: Option<(usize, f64, f64)> = None;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let row = (
            f[0].parse().unwrap(),
            f[2].parse().unwrap(),
            f[3].parse().unwrap(),
        );
        if best.is_none_or(|b: (usize, f64, f64)| row.1 < b.1) {
            best = Some(row);
        }
    }
    best.unwrap()
}

fn criterion_5() -> Outcome {
    let mut ok = 0;
    let mut misses = vec![];
    for seed in 0..20u64 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = base_config(
            dir.path(),
            SyntheticSpec::separable(seed),
            "[train]\nmax_epochs = 200\n",
        );
        cfg.override_seed(seed);
        cfg.validate().unwrap();
        cmd_train(&cfg).unwrap();
        let (epoch, val_loss, val_eer) = best_history_row(&dir.path().join("history.csv"));
        if val_eer == 0.0 && val_loss < 0.05 {
            ok += 1;
        } else {
            misses.push(format!(
                "seed {seed}: epoch {epoch} loss {val_loss:.4} eer {val_eer:.4}"
            ));
        }
    }
    outcome(
        ok >= 18,
        format!(
            "{ok}/20 seeds reach val EER 0 and val loss < 0.05 within 200 epochs (need 18){}",
            listed(&misses)
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn eer_of(report: &serde_json::Value, column: &str, country: &str) -> f64 {
    report[column][country]["eer"].as_f64().unwrap()
}

fn criterion_6() -> Outcome {
    let (mut effect, mut precondition, mut support_only) = (0, 0, 0);
    let mut max_added = 0;
    let mut misses = vec![];
    for seed in 0..20u64 {
        let dir = tempfile::tempdir().unwrap();
        let extra = "[extension]\nnew_country = \"CRI\"\n[train]\nmax_epochs = 200\n";
        let mut cfg = base_config(dir.path(), SyntheticSpec::displaced(seed), extra);
        cfg.prototype_pool = PrototypePool::PerCountry;
        cfg.override_seed(seed);
        cfg.validate().unwrap();
        cmd_train(&cfg).unwrap();

        let read = || -> serde_json::Value {
            serde_json::from_str(
                &std::fs::read_to_string(dir.path().join("extend_report.json")).unwrap(),
            )
            .unwrap()
        };
        cmd_extend(&cfg, None, None).unwrap();
        support_only += usize::from(eer_of(&read(), "extended", "CRI") < 0.10);

        cmd_extend(&cfg, None, Some(RetrainMode::Fresh)).unwrap();
        let r = read();
        let added = r["extension"]["added_images"].as_u64().unwrap() as usize;
        let users = r["extension"]["selected_users"].as_array().unwrap().len();
        max_added = max_added.max(added);
        let pre = eer_of(&r, "base", "CRI") >= 0.25
            && ["ESP", "CHL"].iter().all(|c| eer_of(&r, "base", c) <= 0.05);
        let degradation = ["ESP", "CHL"]
            .iter()
            .map(|c| eer_of(&r, "extended", c) - eer_of(&r, "base", c))
            .fold(f64::NEG_INFINITY, f64::max);
        let new_eer = eer_of(&r, "extended", "CRI");
        precondition += usize::from(pre);
        if pre && new_eer < 0.10 && degradation < 0.02 && added < 100 && users == 5 {
            effect += 1;
        } else {
            misses.push(format!(
                "seed {seed}: base CRI {:.3} ext CRI {new_eer:.3} degradation {degradation:.3}",
                eer_of(&r, "base", "CRI")
            ));
        }
    }
    outcome(
        effect >= 18,
        format!(
            "{effect}/20 seeds: new-country EER < 0.10 with base degradation < 0.02 (need 18); \
             displaced geometry held in {precondition}/20; 5 users, at most {max_added} images added; \
             support-only extension without retraining reached < 0.10 in {support_only}/20{}",
            listed(&misses)
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let ds: Dataset64 = generate_synthetic(&SyntheticSpec::four_country(7)).unwrap();
    let spec = EpisodeSpec::baseline(&["ESP", "CHL"], 7);
    let mut problems = vec![];
    for draw in 0..50 {
        let ep = sample_episode(&ds, &spec, draw).unwrap();
        let mut cells: BTreeMap<(String, Label), usize> = BTreeMap::new();
        for s in &ep.support {
            *cells.entry((s.country.clone(), s.label)).or_default() += 1;
        }
        let bf = ep
            .query
            .iter()
            .filter(|s| s.label == Label::BonaFide)
            .count();
        if ep.support.len() != 8 || cells.len() != 4 || cells.values().any(|&n| n != 2) {
            problems.push(format!("draw {draw}: support cells {cells:?}"));
        }
        if ep.query.len() != 42 || bf != 21 {
            problems.push(format!(
                "draw {draw}: query {} with {bf} bona fide",
                ep.query.len()
            ));
        }
    }
    let (ext_spec, summary) = extend_support(&spec, &ds, &ExtensionSpec::new("CRI")).unwrap();
    let per_source_ok = summary.images_per_source.len() == 6
        && summary.images_per_source.values().all(|&n| n == 15);
    if summary.selected_users.len() != 5
        || !per_source_ok
        || summary.added_images != 90
        || summary.attack_images != 75
        || ext_spec.support_countries != ["ESP", "CHL", "CRI"]
    {
        problems.push(format!("extension {summary:?}"));
    }
    let ep = sample_episode(&ds, &ext_spec, 0).unwrap();
    let pool = &ext_spec.support_pools["CRI"];
    let cri: Vec<_> = ep.support.iter().filter(|s| s.country == "CRI").collect();
    if cri.len() != 4 || cri.iter().any(|s| !pool.contains(&s.sample_id)) {
        problems.push("extended support leaves the selected pool".into());
    }
    outcome(
        problems.is_empty(),
        format!(
            "support 8 = 2 countries x 2 classes x 2, query 42 = 21/21 over 50 draws; extension {} users, \
             {:?} images per source, {} added ({} attack){}",
            summary.selected_users.len(),
            summary.images_per_source.values().collect::<Vec<_>>(),
            summary.added_images,
            summary.attack_images,
            listed(&problems)
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

const SMALL_RUN: &str = r#"
[synthetic]
images_per_user_per_condition = 3
[[synthetic.countries]]
code = "ESP"
users = 10
screen_sources = 3
[[synthetic.countries]]
code = "CHL"
users = 10
screen_sources = 3
[[synthetic.countries]]
code = "CRI"
users = 10
screen_sources = 2
class_axis_angle_deg = 90.0

[episode]
shots_per_country_class = 2
support_countries = ["ESP", "CHL"]
query_size = 10

[extension]
new_country = "CRI"
n_new_users = 2
images_per_screen_source = 4

[train]
max_epochs = 3
episodes_per_epoch = 5
val_episodes = 3
"#;

fn run_cli(config: &Path, out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_protopad"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&status.stderr)
        ))
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let work = tempfile::tempdir().unwrap();
    let config = work.path().join("run.toml");
    std::fs::write(&config, SMALL_RUN).unwrap();
    let steps: [&[&str]; 6] = [
        &["gen-data"],
        &["train"],
        &["eval"],
        &["det-export"],
        &["extend"],
        &["extend", "--retrain", "finetune"],
    ];
    let mut problems = vec![];
    let mut compared = 0;
    let (a, b) = (work.path().join("a"), work.path().join("b"));
    for step in steps {
        for out in [&a, &b] {
            if let Err(e) = run_cli(&config, out, step) {
                problems.push(e);
            }
        }
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        compared = sa.len();
        for (name, bytes) in &sa {
            if sb.get(name) != Some(bytes) {
                problems.push(format!("{name} differs after {step:?}"));
            }
        }
        if sa.len() != sb.len() {
            problems.push(format!("file sets differ after {step:?}"));
        }
    }
    problems.dedup();
    outcome(
        problems.is_empty(),
        format!("gen-data, train, eval, det-export, extend, extend --retrain run twice; {compared} output files byte-identical{}", listed(&problems)),
    )
}

#[test]
fn acceptance_criteria() {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check, Option<Duration>); 8] = [
        (
            "metric oracle equivalence",
            criterion_1,
            Some(Duration::from_secs(30)),
        ),
        ("hand-check fixtures", criterion_2, None),
        (
            "gradient correctness",
            criterion_3,
            Some(Duration::from_secs(60)),
        ),
        ("prototypical correctness", criterion_4, None),
        ("trainability", criterion_5, Some(Duration::from_secs(600))),
        (
            "few-shot extension effect",
            criterion_6,
            Some(Duration::from_secs(900)),
        ),
        ("protocol-shape fidelity", criterion_7, None),
        ("determinism", criterion_8, None),
    ];
    let mut failed = vec![];
    for (i, (name, check, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let mut o = check();
        let elapsed = start.elapsed();
        if let Some(limit) = budget {
            if elapsed > limit {
                o.pass = false;
                o.detail
                    .push_str(&format!("; over the {}s budget", limit.as_secs()));
            }
        }
        report(i + 1, name, elapsed, &o);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
