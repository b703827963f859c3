//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use permubench::aggregate::{Regime, SettingGrid};
use permubench::attacks::{AttackSpec, EPSILONS_255};
use permubench::autodiff::check::{central_difference, relative_error};
use permubench::autodiff::{AutodiffError, Element, Tape, Tensor, Var};
use permubench::corruptions::{self, CorruptionKind, CorruptionSpec, SeverityTable};
use permubench::data::{self, DatasetName, ImageBatch, CHANNELS, IMAGE_SIZE};
use permubench::models::{self, Architecture, Classifier, ForwardOptions, ModelError, ModelParams, ModelSpec, Network};
use permubench::orchestrator::{self, ReportScope, RunConfig, DATA_DIR_ENV};
use permubench::rng;
use permubench::trainer::{self, TrainConfig};
use rand::Rng;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/reference_means.csv");

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(got: &[f64], want: &[f64], tol: f64) -> bool {
    got.iter().zip(want).all(|(g, w)| (g - w).abs() <= tol)
}

fn fmt_row(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
}

fn time_limit(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed <= limit, format!("{:.2}s of {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

// ---- 1 and 2: aggregation from injected published means ----

fn injected_report() -> (orchestrator::Report, Duration) {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    orchestrator::inject(Path::new(FIXTURE), tmp.path()).unwrap();
    let r = orchestrator::report(tmp.path(), &ReportScope::default(), &SettingGrid::default()).unwrap();
    (r, start.elapsed())
}

#[allow(clippy::approx_constant)]
fn criterion_1() -> Outcome {
    let (r, elapsed) = injected_report();
    let published = [
        (Regime::Clean, [3.29, 3.43, 1.71, 1.57]),
        (Regime::Corruption, [3.14, 3.29, 2.00, 1.57]),
        (Regime::Fgsm, [3.00, 2.57, 2.43, 2.00]),
        (Regime::Pgd, [2.00, 2.86, 2.86, 2.29]),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (regime, want) in published {
        let got = Architecture::ALL.map(|m| r.ranks[&regime][&m]);
        let ok = within(&got, &want, 0.01);
        pass &= ok;
        parts.push(format!("{regime} [{}] {}", fmt_row(&got), if ok { "ok" } else { "MISMATCH" }));
    }
    let (fast, t) = time_limit(elapsed, Duration::from_secs(1));
    outcome(pass && fast, format!("{}; {t}", parts.join("; ")))
}

fn criterion_2() -> Outcome {
    let (r, elapsed) = injected_report();
    let regimes = [Regime::Corruption, Regime::Fgsm, Regime::Pgd];
    let mut pass = true;
    let mut parts = Vec::new();
    for (model, want) in [(Architecture::Abmil, [0.96, 0.31, 0.30]), (Architecture::ZachVit, [0.92, 0.23, 0.18])] {
        let got = regimes.map(|g| r.retention[&model][&g]);
        pass &= within(&got, &want, 0.01);
        parts.push(format!("{model} [{}]", fmt_row(&got)));
    }
    let (fast, t) = time_limit(elapsed, Duration::from_secs(1));
    outcome(pass && fast, format!("{}; {t}", parts.join("; ")))
}

// ---- 3: permutation invariance ----

fn max_perm_delta(spec: &ModelSpec, p: &ModelParams, x: &Tensor<f32>, seed: u64, n: usize) -> f64 {
    let base = models::logits(spec, p, x, &ForwardOptions::default()).unwrap();
    let mut r = rng::stream(seed, &["acceptance", "perm", spec.arch.key()]);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let opts = ForwardOptions { token_order: Some(rng::permutation(&mut r, spec.num_patches())), ..Default::default() };
        worst = worst.max(base.max_abs_diff(&models::logits(spec, p, x, &opts).unwrap()));
    }
    worst
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let ds = data::synthetic(DatasetName::BreastMnist, [40, 8, 8], 21).unwrap();
    let x = ds.test.select(&[0, 1]).images().clone();
    let cfg = TrainConfig { per_class: 8, epochs: 3, validate: false, ..TrainConfig::default() };
    let mut pass = true;
    let mut parts = Vec::new();
    for arch in [Architecture::ZachVit, Architecture::Abmil, Architecture::TransMil] {
        let spec = ModelSpec::default_for(arch, 2);
        let init = models::build(&spec, 3).unwrap();
        let (trained, _) = trainer::train(&spec, ds.training_splits(), &cfg, 3).unwrap();
        let d_init = max_perm_delta(&spec, &init, &x, 1, 100);
        let d_trained = max_perm_delta(&spec, &trained, &x, 2, 100);
        pass &= d_init < 1e-5 && d_trained < 1e-5;
        parts.push(format!("{arch} {d_init:.1e}/{d_trained:.1e}"));
    }
    let spec = ModelSpec::default_for(Architecture::MinimalVit, 2);
    let p = models::build(&spec, 3).unwrap();
    let pos_norm: f64 = p.get("pos_embed").unwrap().data().iter().map(|v| f64::from(v * v)).sum::<f64>().sqrt();
    let witness = max_perm_delta(&spec, &p, &x, 3, 100);
    pass &= pos_norm > 0.0 && witness > 1e-3;
    parts.push(format!("Minimal-ViT witness {witness:.1e} (|pos| {pos_norm:.2})"));
    let (fast, t) = time_limit(start.elapsed(), Duration::from_secs(30));
    outcome(pass && fast, format!("max |Δlogit| init/trained: {}; {t}", parts.join(", ")))
}

// ---- 4: gradients against central differences ----

type Builder = fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>;

fn random_values(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut r = rng::stream(seed, &["acceptance", "gradcheck"]);
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn op_error(build: Builder, shapes: &[Vec<usize>]) -> f64 {
    let inputs: Vec<Vec<f64>> =
        shapes.iter().enumerate().map(|(i, s)| random_values(10 + i as u64, s.iter().product(), -2.0, 2.0)).collect();
    let projected = |inputs: &[Vec<f64>], grad: bool| {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = shapes.iter().zip(inputs).map(|(s, x)| tape.leaf(Tensor::from_f64_slice(s, x).unwrap(), grad)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let shape = tape.shape(out).to_vec();
        let w = random_values(99, tape.value(out).numel(), -1.0, 1.0);
        let w = tape.constant(Tensor::from_f64_slice(&shape, &w).unwrap());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = projected(&inputs, true);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap().data().to_vec();
        let all: Vec<usize> = (0..x.len()).collect();
        let numeric = central_difference(
            |probe| {
                let mut perturbed = inputs.clone();
                perturbed[k] = probe.to_vec();
                let (tape, _, loss) = projected(&perturbed, false);
                tape.value(loss).item()
            },
            x,
            &all,
            1e-5,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 5]], |t, v| t.bmm(v[0], v[1], false)),
        ("bmm_t", vec![vec![2, 3, 4], vec![2, 5, 4]], |t, v| t.bmm(v[0], v[1], true)),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[0]).and_then(|a| t.mul(a, v[1]))),
        ("add_broadcast", vec![vec![2, 3, 4], vec![3, 4]], |t, v| t.add_broadcast(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("gelu", vec![vec![4, 5]], |t, v| Ok(t.gelu(v[0]))),
        ("sigmoid", vec![vec![4, 5]], |t, v| Ok(t.sigmoid(v[0]))),
        ("tanh", vec![vec![4, 5]], |t, v| Ok(t.tanh(v[0]))),
        ("softmax", vec![vec![3, 4, 5]], |t, v| t.softmax(v[0], 1)),
        ("layer_norm", vec![vec![4, 8], vec![8], vec![8]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("sum", vec![vec![3, 4]], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![vec![3, 4]], |t, v| Ok(t.mean(v[0]))),
        ("sum_axis", vec![vec![2, 3, 4]], |t, v| t.sum_axis(v[0], 1)),
        ("mean_axis", vec![vec![2, 3, 4]], |t, v| t.mean_axis(v[0], 0)),
        ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0], 0, 1)),
        ("permute", vec![vec![2, 3, 4, 5]], |t, v| t.permute(v[0], &[0, 2, 1, 3])),
        ("concat", vec![vec![2, 1, 3], vec![2, 4, 3]], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![2, 5, 3]], |t, v| t.slice(v[0], 1, 1, 3)),
        ("index_select", vec![vec![2, 4, 3]], |t, v| t.index_select(v[0], 1, &[3, 0, 0, 2])),
        ("repeat", vec![vec![2, 3]], |t, v| t.repeat(v[0], 4)),
        ("linear", vec![vec![2, 3, 4], vec![4, 5], vec![5]], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        ("cross_entropy", vec![vec![4, 3]], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
    ]
}

fn model_input_gradient<E: Element>(spec: &ModelSpec, p: &ModelParams, x: &[f64], label: usize) -> Vec<f64> {
    let mut tape = Tape::<E>::new();
    let xs: Vec<E> = x.iter().map(|&v| E::from_f64(v)).collect();
    let xv = tape.leaf(Tensor::new(vec![1, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], xs).unwrap(), true);
    let out = Network::new(spec, p).forward(&mut tape, xv).unwrap();
    let loss = models::classification_loss(&mut tape, out, &[label]).unwrap();
    let g = tape.backward(loss).unwrap();
    g.get(xv).unwrap().data().iter().map(|v| v.as_f64()).collect()
}

fn model_loss(spec: &ModelSpec, p: &ModelParams, x: &[f64], label: usize) -> f64 {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::from_f64_slice(&[1, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], x).unwrap());
    let out = Network::new(spec, p).forward(&mut tape, xv).unwrap();
    let loss = models::classification_loss(&mut tape, out, &[label]).unwrap();
    tape.value(loss).item()
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut worst_op = ("", 0.0f64);
    let ops = op_table();
    for (name, shapes, build) in &ops {
        let e = op_error(*build, shapes);
        pass &= e < 1e-5;
        if e >= worst_op.1 {
            worst_op = (name, e);
        }
    }
    let mut r = rng::stream(12, &["acceptance", "pixels"]);
    let x: Vec<f64> = (0..IMAGE_SIZE * IMAGE_SIZE * CHANNELS).map(|_| r.gen::<f64>()).collect();
    let pixels: Vec<usize> = (0..12).map(|_| r.gen_range(0..x.len())).collect();
    let mut parts = Vec::new();
    for arch in Architecture::ALL {
        let spec = ModelSpec::default_for(arch, 3);
        let mut p = models::build(&spec, 4).unwrap();
        // a larger scale keeps the loss surface away from flat
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 5.0);
        }
        let numeric = central_difference(|probe| model_loss(&spec, &p, probe, 1), &x, &pixels, 1e-5);
        let pick = |g: Vec<f64>| pixels.iter().map(|&i| g[i]).collect::<Vec<f64>>();
        let e64 = relative_error(&pick(model_input_gradient::<f64>(&spec, &p, &x, 1)), &numeric);
        let e32 = relative_error(&pick(model_input_gradient::<f32>(&spec, &p, &x, 1)), &numeric);
        pass &= e64 < 1e-5 && e32 < 1e-3;
        parts.push(format!("{arch} f64 {e64:.1e} f32 {e32:.1e}"));
    }
    let (fast, t) = time_limit(start.elapsed(), Duration::from_secs(120));
    outcome(
        pass && fast,
        format!("{} ops, worst {} {:.1e}; models: {}; {t}", ops.len(), worst_op.0, worst_op.1, parts.join(", ")),
    )
}

// ---- 5: attack feasibility and the linear oracle ----

/// Logits `[wᵀx, 0]`; label 1 makes the loss increasing in `wᵀx`.
struct Linear {
    w: Vec<f64>,
}

impl Classifier for Linear {
    fn forward<E: Element>(&self, tape: &mut Tape<E>, images: Var) -> Result<Var, ModelError> {
        let b = tape.shape(images)[0];
        let d = self.w.len();
        let flat = tape.reshape(images, &[b, d])?;
        let mut cols = Vec::with_capacity(2 * d);
        for &wi in &self.w {
            cols.push(E::from_f64(wi));
            cols.push(E::zero());
        }
        let wv = tape.constant(Tensor::new(vec![d, 2], cols)?);
        Ok(tape.matmul(flat, wv)?)
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let ds = data::synthetic(DatasetName::BreastMnist, [4, 4, 32], 17).unwrap();
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut worst_excess = f64::NEG_INFINITY;
    for arch in Architecture::ALL {
        let spec = ModelSpec::default_for(arch, 2);
        let p = models::build(&spec, 5).unwrap();
        let net = Network::new(&spec, &p);
        for &eps in &EPSILONS_255 {
            for a in [AttackSpec::fgsm(eps), AttackSpec::pgd(eps)] {
                let adv = a.run_chunked(&net, &ds.test, 16).unwrap();
                let pixels = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
                for (x0, x1) in ds.test.images().data().chunks(pixels).zip(adv.images().data().chunks(pixels)) {
                    let linf = x0.iter().zip(x1).map(|(a, b)| (f64::from(*b) - f64::from(*a)).abs()).fold(0.0, f64::max);
                    worst_excess = worst_excess.max(linf - a.epsilon());
                    if linf > a.epsilon() + 1e-7 || x1.iter().any(|v| !(0.0..=1.0).contains(v)) {
                        violations += 1;
                    }
                    checked += 1;
                }
            }
        }
    }

    let d = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
    let mut r = rng::stream(8, &["acceptance", "linear"]);
    let w: Vec<f64> = (0..d).map(|_| r.gen_range(-0.01..0.01)).collect();
    let x: Vec<f32> = (0..2 * d).map(|_| r.gen_range(0.1f32..0.9)).collect();
    let batch = ImageBatch::new(Tensor::new(vec![2, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], x).unwrap(), vec![1, 1], vec![0, 1]).unwrap();
    let model = Linear { w: w.clone() };
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    let margin = |img: &[f32]| img.iter().zip(&w).map(|(a, b)| f64::from(*a) * b).sum::<f64>();
    let mut oracle_err = 0.0f64;
    for &eps in &EPSILONS_255 {
        let a = AttackSpec::fgsm(eps);
        let adv = a.run(&model, &batch).unwrap();
        for i in 0..2 {
            let increase = margin(adv.image(i)) - margin(batch.image(i));
            oracle_err = oracle_err.max((increase - a.epsilon() * l1).abs());
        }
    }
    let pass = checked >= 1000 && violations == 0 && oracle_err < 1e-6;
    let (fast, t) = time_limit(start.elapsed(), Duration::from_secs(120));
    outcome(
        pass && fast,
        format!(
            "{checked} attacked images, {violations} violations (max ‖δ‖∞ − ε = {worst_excess:.1e}); linear oracle |Δloss − ε‖w‖₁| ≤ {oracle_err:.1e}; {t}"
        ),
    )
}

// ---- 6, 7, 8: smoke reproduction ----

struct Smoke {
    source: String,
    real: bool,
    clean: f64,
    corruption: f64,
    fgsm: f64,
    pgd: f64,
    elapsed: Duration,
    files: BTreeMap<PathBuf, Vec<u8>>,
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn real_data_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os(DATA_DIR_ENV).map(PathBuf::from),
        Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")),
    ];
    candidates.into_iter().flatten().find(|d| d.join(DatasetName::PneumoniaMnist.file_name()).is_file())
}

/// ZACH-ViT, PneumoniaMNIST, seed 3, default protocol; synthetic stand-in
/// data when no archive is available.
fn smoke_run(real: Option<&Path>) -> Smoke {
    let tmp = tempfile::tempdir().unwrap();
    let (data_dir, source) = match real {
        Some(d) => (d.to_path_buf(), format!("{}", d.join(DatasetName::PneumoniaMnist.file_name()).display())),
        None => {
            let d = tmp.path().join("data");
            fs::create_dir_all(&d).unwrap();
            let bytes = data::synthetic_archive(DatasetName::PneumoniaMnist, [120, 32, 64], 3).unwrap();
            fs::write(d.join(DatasetName::PneumoniaMnist.file_name()), bytes).unwrap();
            (d, "synthetic PneumoniaMNIST-shaped archive (120/32/64)".to_string())
        }
    };
    let cfg = RunConfig {
        data_dir: Some(data_dir),
        out_dir: tmp.path().join("out"),
        models: vec![Architecture::ZachVit],
        datasets: vec![DatasetName::PneumoniaMnist],
        seeds: vec![3],
        ..RunConfig::default()
    };
    let start = Instant::now();
    let summary = orchestrator::run_matrix(&cfg).unwrap();
    assert!(summary.ok(), "{:?}", summary.failed);
    let report = orchestrator::report(&cfg.out_dir, &ReportScope::default(), &cfg.setting_grid()).unwrap();
    let elapsed = start.elapsed();
    let cell = |r| report.table.get(DatasetName::PneumoniaMnist, Architecture::ZachVit, r).unwrap().mean;
    Smoke {
        source,
        real: real.is_some(),
        clean: cell(Regime::Clean),
        corruption: cell(Regime::Corruption),
        fgsm: cell(Regime::Fgsm),
        pgd: cell(Regime::Pgd),
        elapsed,
        files: snapshot(&cfg.out_dir),
    }
}

fn smoke_numbers(s: &Smoke) -> String {
    format!(
        "clean {:.3}, corruption {:.3}, FGSM {:.3}, PGD {:.3} in {:.0}s",
        s.clean,
        s.corruption,
        s.fgsm,
        s.pgd,
        s.elapsed.as_secs_f64()
    )
}

fn missing_data(s: &Smoke) -> Outcome {
    let dirs = format!("${DATA_DIR_ENV} or <workspace>/data");
    outcome(false, format!("pneumoniamnist.npz not found in {dirs}; not evaluated. Synthetic stand-in (not counted): {}", smoke_numbers(s)))
}

fn criterion_6(s: &Smoke) -> Outcome {
    if !s.real {
        return missing_data(s);
    }
    let pass = s.clean >= 0.70 && s.pgd < 0.5 * s.clean && s.elapsed <= Duration::from_secs(600);
    outcome(pass, format!("{} on {}", smoke_numbers(s), s.source))
}

fn ordering(s: &Smoke) -> (usize, String) {
    let chain = [("clean", s.clean), ("corruption", s.corruption), ("FGSM", s.fgsm), ("PGD", s.pgd)];
    let mut violated = 0;
    let mut parts = Vec::new();
    for w in chain.windows(2) {
        let margin = w[0].1 - w[1].1;
        if margin < 0.01 {
            violated += 1;
        }
        parts.push(format!("{} − {} = {margin:+.3}", w[0].0, w[1].0));
    }
    (violated, parts.join(", "))
}

fn criterion_7(s: &Smoke) -> Outcome {
    let (violated, detail) = ordering(s);
    if !s.real {
        let mut o = missing_data(s);
        o.detail.push_str(&format!("; synthetic ordering: {detail}"));
        return o;
    }
    outcome(violated == 0, format!("{detail}; {violated} of 3 below the 0.01 margin"))
}

fn criterion_8(a: &Smoke) -> Outcome {
    let b = smoke_run(real_data_dir().as_deref());
    let same = a.files == b.files;
    let differing: Vec<String> = a
        .files
        .keys()
        .chain(b.files.keys())
        .filter(|k| a.files.get(*k) != b.files.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let detail = if same {
        format!("{} files identical across two runs on {}", a.files.len(), a.source)
    } else {
        format!("differing: {}", differing.join(", "))
    };
    outcome(same, detail)
}

// ---- 9: corruption suite ----

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let ds = data::synthetic(DatasetName::DermaMnist, [7, 7, 28], 9).unwrap();
    let mut problems = Vec::new();
    for spec in corruptions::corruption_grid(5) {
        let a = corruptions::apply(&spec, &ds.test).unwrap();
        let b = corruptions::apply(&spec, &ds.test).unwrap();
        if a.images().data() != b.images().data() {
            problems.push(format!("{} not deterministic", spec.setting()));
        }
        if a.images().data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            problems.push(format!("{} leaves [0, 1]", spec.setting()));
        }
        for value in [0.0f32, 1.0] {
            let edge = ds.test.with_images(Tensor::full(ds.test.images().shape(), value)).unwrap();
            let out = corruptions::apply(&spec, &edge).unwrap();
            if out.images().data().iter().any(|p| !(0.0..=1.0).contains(p)) {
                problems.push(format!("{} leaves [0, 1] on a constant {value} image", spec.setting()));
            }
        }
    }
    let table = SeverityTable::default();
    if let Err(e) = table.validate() {
        problems.push(e.to_string());
    }
    // Zero-signal image at mid-gray: at 0.0 the closure clamp would fold the
    // noise into a half-normal.
    let gray = ds.test.with_images(Tensor::full(ds.test.images().shape(), 0.5)).unwrap();
    let mut ratios = Vec::new();
    for (level, sigma) in table.gaussian_noise_sigma.iter().enumerate() {
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, level as u8 + 1, 7).unwrap();
        let out = corruptions::apply(&spec, &gray).unwrap();
        let noise: Vec<f64> = out.images().data().iter().map(|&p| f64::from(p) - 0.5).collect();
        let n = noise.len() as f64;
        let m = noise.iter().sum::<f64>() / n;
        let var = noise.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        let ratio = var / (sigma * sigma);
        if (ratio - 1.0).abs() >= 0.1 {
            problems.push(format!("noise severity {}: variance ratio {ratio:.3}", level + 1));
        }
        ratios.push(ratio);
    }
    let (fast, t) = time_limit(start.elapsed(), Duration::from_secs(30));
    let detail = if problems.is_empty() {
        format!("15 settings deterministic and closed, table monotone, noise variance / σ² = [{}]; {t}", fmt_row(&ratios))
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty() && fast, detail)
}

fn main() {
    // `cargo test` passes harness flags such as --nocapture; a name filter
    // that matches nothing here skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance criterion".contains(a.as_str())) {
        return;
    }
    let smoke: OnceCell<Smoke> = OnceCell::new();
    let smoke = || smoke.get_or_init(|| smoke_run(real_data_dir().as_deref()));
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "mean-rank oracle", Box::new(criterion_1)),
        (2, "retention oracle", Box::new(criterion_2)),
        (3, "permutation invariance", Box::new(criterion_3)),
        (4, "gradient suite", Box::new(criterion_4)),
        (5, "attack constraints", Box::new(criterion_5)),
        (6, "smoke reproduction", Box::new(|| criterion_6(smoke()))),
        (7, "robustness ordering", Box::new(|| criterion_7(smoke()))),
        (8, "determinism", Box::new(|| criterion_8(smoke()))),
        (9, "corruption suite", Box::new(criterion_9)),
    ];
    let mut failed = 0;
    for (n, name, check) in &criteria {
        let result = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
            });
        if !result.pass {
            failed += 1;
        }
        println!("criterion {n} ({name}): {} | {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
