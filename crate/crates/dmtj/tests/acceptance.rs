//! Acceptance report: one line per criterion.
//!
//! Criteria 1-5, 8 and 9 are correctness invariants and set the exit code.
//! Criterion 6 is a training-efficacy measurement; it prints PASS or FAIL
//! but only fails the process under `ACCEPTANCE_STRICT=1`. Criterion 7 is
//! logged with effect sizes and never fails the process.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dmtj::config::{DataSource, RunConfig};
use dmtj::corpus::{read_corpus, write_corpus};
use dmtj::data::{probe_splits, train_images, Labeled, Unlabeled};
use dmtj::evaluate::{baseline_model, probe};
use dmtj::export::{export_attention, export_similarity};
use dmtj::train::{pretrain, thread_pool, Outputs, StepMetrics, TrainState, CHECKPOINT_FILE, METRICS_FILE};
use dmtj::checkpoint;
use dmtj_core::aggregation::{build_dense_targets, cross_attend, HeadKind};
use dmtj_core::model::{GroupStatus, Model, ModelConfig, Objective};
use dmtj_core::neighbors::{select_for, select_topk, NeighborhoodSpec, Window};
use dmtj_core::optim::Schedules;
use dmtj_core::params::normal;
use dmtj_core::probe::{ProbeKind, ProbeReport};
use dmtj_core::synthetic::{generate_synthetic, SyntheticShapesSpec};
use dmtj_core::visualize::top_count;
use dmtj_core::{Rng, Tensor};
use rand::{Rng as _, SeedableRng};

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Logged,
}

struct Line {
    id: u8,
    verdict: Verdict,
    hard: bool,
    detail: String,
}

impl Line {
    fn new(id: u8, ok: bool, detail: String) -> Self {
        Self {
            id,
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            hard: true,
            detail,
        }
    }

    fn print(&self) {
        let v = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Logged => "LOGGED",
        };
        println!("criterion {}: {v} {}", self.id, self.detail);
    }
}

fn guarded(id: u8, f: impl FnOnce() -> Result<Line, String>) -> Line {
    let line = f().unwrap_or_else(|e| Line::new(id, false, format!("error: {e}")));
    line.print();
    line
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn criterion_1() -> Result<Line, String> {
    let start = Instant::now();
    let mut rng = Rng::seed_from_u64(0);
    let model = Model::new(&ModelConfig::tiny(), &mut rng).map_err(err)?;
    let img = generate_synthetic(&SyntheticShapesSpec::benchmark(), 1).map_err(err)?.images.remove(0);
    let plan = model.sample_plan(&mut rng).map_err(err)?;
    let report = model
        .check_gradients(&img, &plan, 1e-5, 1e-3, Some((6, 0)), None)
        .map_err(err)?;
    let elapsed = start.elapsed();
    let checked = report.groups.iter().filter(|(_, s)| matches!(s, GroupStatus::Checked(_))).count();
    let silent = report
        .groups
        .iter()
        .filter(|(_, s)| matches!(s, GroupStatus::NoGradientExpected(true)))
        .count();
    let targets = report.groups.len() - checked;
    let ok = report.passed() && silent == targets && targets > 0 && elapsed < Duration::from_secs(120);
    Ok(Line::new(
        1,
        ok,
        format!(
            "max_rel_err={:.2e} (< 1e-3) over {checked} groups, {silent}/{targets} target groups gradient-free, {:.1}s (< 120s)",
            report.max_error(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn criterion_2() -> Result<Line, String> {
    let mut cfg = ModelConfig::tiny();
    cfg.neighbors = NeighborhoodSpec {
        window: Window::Size(3),
        include_self: true,
        k: 1,
    };
    cfg.objective = Objective::Mix(0.5);
    let mut rng = Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut raw_rows = true;
    for _ in 0..100 {
        let model = Model::new(&cfg, &mut rng).map_err(err)?;
        let img = normal(&mut rng, &[1, 32, 32], 1.0);
        let plan = model.sample_plan(&mut rng).map_err(err)?;
        let parts = model.loss(&img, &plan).map_err(err)?;
        let (dmt, ijepa) = parts.dmt.zip(parts.ijepa).ok_or("mixed objective reports both terms")?;
        worst = worst.max((dmt - ijepa).abs());

        let feats = normal(&mut rng, &[16, 8], 1.0);
        let masked: Vec<usize> = (0..16).filter(|_| rng.random_bool(0.5)).chain([3]).collect();
        let sel = select_for(&masked, &feats, 4, 4, &cfg.neighbors).map_err(err)?;
        let t = build_dense_targets(&feats, &sel, &masked, HeadKind::CrossAttention).map_err(err)?;
        raw_rows &= masked.iter().enumerate().all(|(r, &j)| t.row(r) == feats.row(j));
    }
    Ok(Line::new(
        2,
        worst <= 1e-12 && raw_rows,
        format!("max |dmt - ijepa| = {worst:.1e} (<= 1e-12) on 100 instances; self-only targets equal raw rows: {raw_rows}"),
    ))
}

fn oracle_topk(i: usize, feats: &Tensor, rows: usize, cols: usize, spec: &NeighborhoodSpec) -> Vec<usize> {
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = feats.row(i);
    let (ri, ci) = ((i / cols) as i64, (i % cols) as i64);
    let mut all: Vec<(f64, usize)> = (0..rows * cols)
        .filter(|&j| j != i || spec.include_self)
        .filter(|&j| match spec.window {
            Window::All => true,
            Window::Size(n) => {
                let h = (n / 2) as i64;
                ((j / cols) as i64 - ri).abs() <= h && ((j % cols) as i64 - ci).abs() <= h
            }
        })
        .map(|j| {
            let f = feats.row(j);
            let dot: f64 = q.iter().zip(f).map(|(a, b)| a * b).sum();
            ((dot / (norm(q) * norm(f))).clamp(-1.0, 1.0), j)
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(spec.k).map(|(_, j)| j).collect()
}

fn criterion_3() -> Result<Line, String> {
    let mut rng = Rng::seed_from_u64(3);
    let (mut mismatches, mut ties, mut borders) = (0, 0, 0);
    for trial in 0..1000 {
        let (rows, cols, d) = (rng.random_range(2..7), rng.random_range(2..7), rng.random_range(2..5));
        let coarse = trial % 3 == 0;
        let data: Vec<f64> = (0..rows * cols * d)
            .map(|_| if coarse { rng.random_range(1..3) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let feats = Tensor::new(vec![rows * cols, d], data).map_err(err)?;
        let spec = NeighborhoodSpec {
            window: if trial % 4 == 0 { Window::All } else { Window::Size([3, 5][trial % 2]) },
            include_self: trial % 5 == 0,
            k: rng.random_range(1..7),
        };
        let i = rng.random_range(0..rows * cols);
        let (r, c) = (i / cols, i % cols);
        borders += (r == 0 || c == 0 || r + 1 == rows || c + 1 == cols) as usize;
        ties += coarse as usize;
        let got = select_topk(i, &feats, rows, cols, &spec).map_err(err)?;
        mismatches += (got.indices != oracle_topk(i, &feats, rows, cols, &spec)) as usize;
    }
    let mut variant = 0;
    let spec = NeighborhoodSpec::default();
    let masked: Vec<usize> = (0..16).collect();
    for _ in 0..100 {
        let feats = normal(&mut rng, &[16, 6], 1.0);
        let c = rng.random_range(0.01..100.0);
        let a = select_for(&masked, &feats, 4, 4, &spec).map_err(err)?;
        let b = select_for(&masked, &feats.map(|v| v * c), 4, 4, &spec).map_err(err)?;
        variant += masked.iter().filter(|&&i| a.get(i).map(|e| &e.indices) != b.get(i).map(|e| &e.indices)).count();
    }
    Ok(Line::new(
        3,
        mismatches == 0 && variant == 0,
        format!("{mismatches}/1000 oracle mismatches ({ties} tie grids, {borders} border queries); {variant} selection changes over 100 scalings"),
    ))
}

fn criterion_4() -> Result<Line, String> {
    let mut rng = Rng::seed_from_u64(4);
    let (mut worst, mut identity, mut hull): (f64, bool, bool) = (0.0, true, true);
    for _ in 0..1000 {
        let (n, d) = (rng.random_range(1..8), rng.random_range(1..6));
        let q = normal(&mut rng, &[1, d], 1.0);
        let kv = normal(&mut rng, &[n, d], 1.0);
        let out = cross_attend(&q, &kv).map_err(err)?;
        let logits: Vec<f64> = (0..n)
            .map(|r| q.data().iter().zip(kv.row(r)).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..d {
            let want: f64 = (0..n).map(|r| e[r] / z * kv.row(r)[c]).sum();
            worst = worst.max((out.data()[c] - want).abs());
            let lo = (0..n).map(|r| kv.row(r)[c]).fold(f64::INFINITY, f64::min);
            let hi = (0..n).map(|r| kv.row(r)[c]).fold(f64::NEG_INFINITY, f64::max);
            hull &= out.data()[c] >= lo - 1e-12 && out.data()[c] <= hi + 1e-12;
        }
        if n == 1 {
            identity &= out.data() == kv.data();
        }
    }
    Ok(Line::new(
        4,
        worst <= 1e-12 && identity && hull,
        format!("max |out - softmax oracle| = {worst:.1e} (<= 1e-12); n=1 identity: {identity}; convex hull: {hull}"),
    ))
}

fn criterion_5() -> Result<Line, String> {
    let s = Schedules::paper(10);
    let at = |step: u64| -> Result<(f64, f64, f64), String> {
        Ok((s.lr_at(step).map_err(err)?, s.wd_at(step).map_err(err)?, s.ema_at(step).map_err(err)?))
    };
    let (w, t) = (s.warmup_steps(), s.total_steps());
    let first = at(0)?;
    let junction = s.lr_at(w).map_err(err)?;
    let last = at(t)?;
    // Continuity: the jump across the junction is no larger than one warmup
    // increment, and it vanishes as steps get finer.
    let ramp = (s.lr_peak - s.lr_start) / w as f64;
    let gap = |sch: &Schedules| -> Result<f64, String> {
        let w = sch.warmup_steps();
        let l = sch.lr_at(w - 1).map_err(err)?;
        let m = sch.lr_at(w).map_err(err)?;
        let r = sch.lr_at(w + 1).map_err(err)?;
        Ok((m - l).abs().max((r - m).abs()))
    };
    let coarse = gap(&s)?;
    let fine = gap(&Schedules::paper(10_000))?;
    let ok = first == (1e-4, 0.04, 0.996)
        && junction == 1e-3
        && last == (1e-6, 0.4, 1.0)
        && coarse <= ramp * (1.0 + 1e-9)
        && fine < 1e-7;
    Ok(Line::new(
        5,
        ok,
        format!(
            "step 0 {first:?}; warmup end lr={junction}; final {last:?}; junction jump {coarse:.2e} (ramp step {ramp:.2e}), {fine:.2e} at 10k steps/epoch"
        ),
    ))
}

struct Trained {
    state: TrainState,
    metrics: Vec<StepMetrics>,
    elapsed: Duration,
    knn: ProbeReport,
}

fn train_and_probe(cfg: RunConfig, splits: &(Labeled, Labeled), pool: &rayon::ThreadPool) -> Result<Trained, String> {
    let images = train_images(&cfg.data).map_err(err)?;
    let mut state = TrainState::new(cfg).map_err(err)?;
    let start = Instant::now();
    let metrics = pretrain(&mut state, Unlabeled::new(&images), &Outputs::default(), pool).map_err(err)?;
    let elapsed = start.elapsed();
    let knn = probe(&state.model, &splits.0, &splits.1, &state.config.probe, ProbeKind::Knn, pool).map_err(err)?;
    Ok(Trained {
        state,
        metrics,
        elapsed,
        knn,
    })
}

/// Means of consecutive, non-overlapping windows of `window` epochs.
fn window_means(metrics: &[StepMetrics], steps_per_epoch: usize, window: usize) -> Vec<f64> {
    let per_epoch: Vec<f64> = metrics
        .chunks(steps_per_epoch)
        .map(|c| c.iter().map(|m| m.loss).sum::<f64>() / c.len() as f64)
        .collect();
    per_epoch
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

fn criterion_6(default: &Trained, splits: &(Labeled, Labeled), pool: &rayon::ThreadPool) -> Result<Line, String> {
    let cfg = &default.state.config;
    let baseline = baseline_model(&default.state.model, cfg.seed).map_err(err)?;
    let base = probe(&baseline, &splits.0, &splits.1, &cfg.probe, ProbeKind::Knn, pool).map_err(err)?;
    let lift = default.knn.accuracy - base.accuracy;
    let spe = match &cfg.data {
        DataSource::Synthetic { train_count, .. } => train_count / cfg.batch_size,
        DataSource::Corpus { .. } => return Err("criterion 6 needs the synthetic benchmark".into()),
    };
    let windows = window_means(&default.metrics, spe, 10);
    let rises = windows.windows(2).filter(|w| w[1] > w[0]).count();
    let minutes = default.elapsed.as_secs_f64() / 60.0;
    let ok = lift >= 0.15 && rises == 0 && minutes < 30.0;
    let trace: Vec<String> = windows.iter().map(|v| format!("{v:.3}")).collect();
    let mut line = Line::new(
        6,
        ok,
        format!(
            "knn trained={:.3} baseline={:.3} lift={lift:+.3} (>= +0.150); 10-epoch loss means [{}] with {rises} rises (0 allowed); {minutes:.1} min (< 30)",
            default.knn.accuracy,
            base.accuracy,
            trace.join(" ")
        ),
    );
    line.hard = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    Ok(line)
}

fn criterion_7(default: &Trained, splits: &(Labeled, Labeled), pool: &rayon::ThreadPool) -> Result<Line, String> {
    let mut avg = default.state.config.clone();
    avg.model.head.context = HeadKind::AveragePool;
    avg.model.head.target = HeadKind::AveragePool;
    let mut all = default.state.config.clone();
    all.model.neighbors.window = Window::All;
    let a = train_and_probe(avg, splits, pool)?.knn.accuracy;
    let b = train_and_probe(all, splits, pool)?.knn.accuracy;
    let d = default.knn.accuracy;
    let verdict = |x: f64| if d >= x { "holds" } else { "inverted" };
    Ok(Line {
        id: 7,
        verdict: Verdict::Logged,
        hard: false,
        detail: format!(
            "knn default={d:.3}; average-pool={a:.3} (effect {:+.3}, {}); window=all={b:.3} (effect {:+.3}, {})",
            d - a,
            verdict(a),
            d - b,
            verdict(b)
        ),
    })
}

fn short_config() -> RunConfig {
    let mut cfg = RunConfig::tiny();
    cfg.schedule.epochs = 2;
    cfg.schedule.warmup_epochs = 1;
    cfg.batch_size = 8;
    if let DataSource::Synthetic { train_count, .. } = &mut cfg.data {
        *train_count = 32;
    }
    cfg
}

fn short_run(dir: &Path, pool: &rayon::ThreadPool) -> Result<(), String> {
    let cfg = short_config();
    let images = train_images(&cfg.data).map_err(err)?;
    let mut state = TrainState::new(cfg).map_err(err)?;
    let out = Outputs {
        dir: Some(dir.to_path_buf()),
        max_epochs: None,
    };
    pretrain(&mut state, Unlabeled::new(&images), &out, pool).map_err(err)?;
    Ok(())
}

fn criterion_8(pool: &rayon::ThreadPool) -> Result<Line, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    short_run(&a, pool)?;
    short_run(&b, pool)?;
    let read = |p: &Path| std::fs::read(p).map_err(err);
    let log_a = read(&a.join(METRICS_FILE))?;
    let same_logs = log_a == read(&b.join(METRICS_FILE))?;
    let lines = log_a.iter().filter(|&&c| c == b'\n').count();

    let saved = read(&a.join(CHECKPOINT_FILE))?;
    let reloaded = checkpoint::decode(&saved).map_err(err)?;
    let same_ckpt = checkpoint::encode(&reloaded).map_err(err)? == saved;

    let set = generate_synthetic(&SyntheticShapesSpec::benchmark(), 64).map_err(err)?;
    let path = tmp.path().join("shapes.bin");
    write_corpus(&path, &set.images).map_err(err)?;
    let (_, back) = read_corpus(&path).map_err(err)?;
    let same_corpus = back == set.images;
    Ok(Line::new(
        8,
        same_logs && same_ckpt && same_corpus,
        format!(
            "metrics logs identical: {same_logs} ({lines} lines); checkpoint save-load-save identical: {same_ckpt} ({} bytes); corpus round trip exact: {same_corpus}",
            saved.len()
        ),
    ))
}

fn criterion_9(models: &[&Model]) -> Result<Line, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let images = generate_synthetic(&SyntheticShapesSpec::benchmark(), 3).map_err(err)?.images;
    let (mut worst, mut sizes, mut self_in, mut maps): (f64, bool, bool, usize) = (0.0, true, true, 0);
    for (mi, model) in models.iter().enumerate() {
        let depth = model.config.encoder.depth as isize;
        for (ii, img) in images.iter().enumerate() {
            for layer in [0, -1] {
                let dir = tmp.path().join(format!("attn_{mi}_{ii}_{}", layer + depth));
                export_attention(model, img, layer, &dir).map_err(err)?;
                let (_, raw) = read_corpus(&dir.join("attention.raw")).map_err(err)?;
                let m = &raw[0];
                let n = m.shape()[1];
                for r in 0..n {
                    let sum: f64 = m.data()[r * n..(r + 1) * n].iter().sum();
                    worst = worst.max((sum - 1.0).abs());
                }
            }
            let n = model.config.encoder.grid_rows() * model.config.encoder.grid_cols();
            let want = top_count(0.10, n);
            let dir = tmp.path().join(format!("sim_{mi}_{ii}"));
            for q in 0..n {
                let (map, _) = export_similarity(model, img, q, 0.10, &dir).map_err(err)?;
                sizes &= map.mask.iter().filter(|&&b| b).count() == want && want == (0.10 * n as f64).ceil() as usize;
                self_in &= map.mask[q];
                maps += 1;
            }
        }
    }
    Ok(Line::new(
        9,
        worst <= 1e-6 && sizes && self_in,
        format!("max |row sum - 1| = {worst:.1e} (<= 1e-6); {maps} masks of size ceil(0.10*N): {sizes}; query in own mask: {self_in}"),
    ))
}

fn main() -> ExitCode {
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("thread pool: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut lines = vec![
        guarded(1, criterion_1),
        guarded(2, criterion_2),
        guarded(3, criterion_3),
        guarded(4, criterion_4),
        guarded(5, criterion_5),
    ];

    let cfg = RunConfig::tiny();
    let trained = probe_splits(&cfg.data)
        .map_err(err)
        .and_then(|splits| train_and_probe(cfg, &splits, &pool).map(|t| (splits, t)));
    match &trained {
        Ok((splits, t)) => {
            lines.push(guarded(6, || criterion_6(t, splits, &pool)));
            lines.push(guarded(7, || criterion_7(t, splits, &pool)));
        }
        Err(e) => {
            for id in [6, 7] {
                lines.push(guarded(id, || Err(format!("default run failed: {e}"))));
            }
        }
    }
    lines.push(guarded(8, || criterion_8(&pool)));
    lines.push(guarded(9, || {
        let mut rng = Rng::seed_from_u64(9);
        let random = Model::new(&ModelConfig::tiny(), &mut rng).map_err(err)?;
        let mut models = vec![&random];
        if let Ok((_, t)) = &trained {
            models.push(&t.state.model);
        }
        criterion_9(&models)
    }));

    let passed = lines.iter().filter(|l| l.verdict == Verdict::Pass).count();
    let judged = lines.iter().filter(|l| l.verdict != Verdict::Logged).count();
    println!("acceptance: {passed}/{judged} judged criteria pass");
    if lines.iter().any(|l| l.hard && l.verdict == Verdict::Fail) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
