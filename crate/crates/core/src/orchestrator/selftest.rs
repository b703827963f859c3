//! Fast invariant checks runnable without any dataset on disk.

use crate::aggregate::{self, Cell, Regime, SummaryTable};
use crate::attacks::AttackSpec;
use crate::corruptions::{self, SeverityTable};
use crate::data::{self, DatasetName};
use crate::models::{self, Architecture, ForwardOptions, ModelSpec, Network};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

/// Runs every check; the caller decides how to report failures.
pub fn selftest() -> Vec<CheckResult> {
    vec![
        check("permutation invariance", permutation_invariance),
        check("positional sensitivity", positional_sensitivity),
        check("corruption closure and determinism", corruption_closure),
        check("severity tables", || SeverityTable::default().validate().map(|_| "monotone".into()).map_err(|e| e.to_string())),
        check("attack constraints", attack_constraints),
        check("rank aggregation", rank_aggregation),
    ]
}

fn max_perm_delta(arch: Architecture, seed: u64) -> Result<f64, String> {
    let spec = ModelSpec::default_for(arch, 3);
    let params = models::build(&spec, seed).map_err(|e| e.to_string())?;
    let ds = data::synthetic(DatasetName::BloodMnist, [4, 2, 2], seed).map_err(|e| e.to_string())?;
    let images = ds.train.images().clone();
    let base = models::logits::<f32>(&spec, &params, &images, &ForwardOptions::default()).map_err(|e| e.to_string())?;
    let mut r = rng::stream(seed, &["selftest", arch.key()]);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let order = rng::permutation(&mut r, spec.num_patches());
        let opts = ForwardOptions { token_order: Some(order), ..Default::default() };
        let out = models::logits::<f32>(&spec, &params, &images, &opts).map_err(|e| e.to_string())?;
        for (a, b) in base.data().iter().zip(out.data()) {
            worst = worst.max(f64::from((a - b).abs()));
        }
    }
    Ok(worst)
}

fn permutation_invariance() -> Result<String, String> {
    let mut parts = Vec::new();
    for arch in Architecture::ALL.into_iter().filter(|a| a.is_permutation_invariant()) {
        let d = max_perm_delta(arch, 1)?;
        if d >= 1e-5 {
            return Err(format!("{arch}: max |Δlogit| = {d:e}"));
        }
        parts.push(format!("{arch} {d:.1e}"));
    }
    Ok(parts.join(", "))
}

fn positional_sensitivity() -> Result<String, String> {
    let d = max_perm_delta(Architecture::MinimalVit, 1)?;
    if d > 1e-3 {
        Ok(format!("Minimal-ViT max |Δlogit| = {d:.1e}"))
    } else {
        Err(format!("Minimal-ViT ignores token order (max |Δlogit| = {d:e})"))
    }
}

fn corruption_closure() -> Result<String, String> {
    let ds = data::synthetic(DatasetName::BreastMnist, [2, 2, 6], 2).map_err(|e| e.to_string())?;
    for spec in corruptions::corruption_grid(9) {
        let a = corruptions::apply(&spec, &ds.test).map_err(|e| e.to_string())?;
        let b = corruptions::apply(&spec, &ds.test).map_err(|e| e.to_string())?;
        if a.images().data() != b.images().data() {
            return Err(format!("{} is not deterministic", spec.setting()));
        }
        if a.images().data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(format!("{} leaves [0, 1]", spec.setting()));
        }
    }
    Ok("15 settings".into())
}

fn attack_constraints() -> Result<String, String> {
    let spec = ModelSpec::default_for(Architecture::Abmil, 2);
    let params = models::build(&spec, 4).map_err(|e| e.to_string())?;
    let net = Network::new(&spec, &params);
    let ds = data::synthetic(DatasetName::BreastMnist, [2, 2, 4], 3).map_err(|e| e.to_string())?;
    let mut n = 0;
    for a in [AttackSpec::fgsm(8), AttackSpec::pgd(8)] {
        let adv = a.run(&net, &ds.test).map_err(|e| e.to_string())?;
        for (x, y) in ds.test.images().data().iter().zip(adv.images().data()) {
            if (f64::from(*y) - f64::from(*x)).abs() > a.epsilon() + 1e-7 || !(0.0..=1.0).contains(y) {
                return Err(format!("{} leaves the feasible set", a.setting()));
            }
        }
        n += adv.len();
    }
    Ok(format!("{n} images"))
}

fn rank_aggregation() -> Result<String, String> {
    let mut t = SummaryTable::new();
    let means = [[0.2, 0.5, 0.6, 0.6], [0.9, 0.1, 0.3, 0.4]];
    for (d, row) in [DatasetName::BloodMnist, DatasetName::PathMnist].into_iter().zip(means) {
        for (m, v) in Architecture::ALL.into_iter().zip(row) {
            t.insert(d, m, Regime::Clean, Cell { mean: v, std: 0.0, n_seeds: 1, metric: None });
        }
    }
    let ranks = aggregate::mean_ranks(&t, Regime::Clean).map_err(|e| e.to_string())?;
    let got: Vec<f64> = Architecture::ALL.iter().map(|m| ranks[m]).collect();
    let want = [2.5, 3.5, 2.25, 1.75];
    if got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-12) {
        Ok(format!("{got:?}"))
    } else {
        Err(format!("ranks {got:?}, expected {want:?}"))
    }
}
