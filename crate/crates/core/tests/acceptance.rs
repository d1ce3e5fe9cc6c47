//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Pipeline stages are cached under the cargo test scratch directory, so a
//! rerun only retrains when the model or training inputs change. The
//! determinism check always starts from two fresh directories.

mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use genunc::metrics::MetricReport;
use genunc::pipeline::{cmd_run, cmd_run_to, ExperimentConfig, RunManifest, Target};
use support::oracles;

const TOY: &str = r#"
schema_version = 1
seed = 1
[dataset]
grid_side = 5
num_samples = 10000
reference_samples = 10000
[schedule]
steps = 1000
[posterior]
kind = "ensemble"
members = 5
[sampling]
kind = "ddpm"
steps = 200
num_samples = 10000
seed = 11
[scoring]
mc_samples = 5
steps = 50
[filter]
keep = [5000]
scores = ["entropy"]
"#;

const KEEP: usize = 5000;
const FID_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

struct Suite {
    cache: PathBuf,
    failed: Vec<String>,
}

impl Suite {
    fn check(&mut self, id: &str, pass: bool, detail: String) {
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }

    fn run(&self, label: &str, cfg: &ExperimentConfig) -> genunc::Result<RunManifest> {
        let t = Instant::now();
        let m = cmd_run_to(cfg, &self.cache, Target::Eval)?;
        m.save(&self.cache.join(format!("manifest-{label}.json")))?;
        let ran: Vec<&str> = m
            .stages
            .iter()
            .filter(|s| !s.cache_hit)
            .map(|s| s.name.as_str())
            .collect();
        eprintln!("  [{label}] {:.1}s, ran {:?}", t.elapsed().as_secs_f64(), ran);
        Ok(m)
    }

    fn report(&self, m: &RunManifest, subset: &str) -> genunc::Result<MetricReport> {
        let entry = m
            .reports
            .iter()
            .find(|r| r.score == "entropy" && r.n == KEEP && r.subset == subset)
            .ok_or_else(|| genunc::Error::Decode(format!("no entropy/{KEEP}/{subset} report")))?;
        MetricReport::parse(&String::from_utf8_lossy(&read(&self.cache.join(&entry.path))?))
    }
}

fn config(edit: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(TOY).expect("acceptance config parses");
    edit(&mut cfg);
    cfg.validate().expect("acceptance config is valid");
    cfg
}

struct Filtering {
    kept: f64,
    random: f64,
    min_coverage: f64,
    kept_fid: f64,
    random_fid: f64,
}

fn filtering(suite: &Suite, m: &RunManifest) -> genunc::Result<Filtering> {
    let kept = suite.report(m, "filtered")?;
    let random = suite.report(m, "random")?;
    Ok(Filtering {
        kept: kept.hallucination_rate.unwrap_or(f64::NAN),
        random: random.hallucination_rate.unwrap_or(f64::NAN),
        min_coverage: kept.mode_coverage.iter().copied().fold(f64::INFINITY, f64::min),
        kept_fid: kept.fid,
        random_fid: random.fid,
    })
}

fn ratio_line(f: &Filtering, bound: f64) -> (bool, String) {
    let pass = f.kept <= bound * f.random;
    (
        pass,
        format!(
            "hallucination kept {:.4} vs random {:.4} (ratio {:.3}, need <= {bound})",
            f.kept,
            f.random,
            f.kept / f.random
        ),
    )
}

fn criterion_1_and_3(suite: &mut Suite) -> genunc::Result<()> {
    let mut kept_fid = Vec::new();
    let mut random_fid = Vec::new();
    for (i, &seed) in FID_SEEDS.iter().enumerate() {
        let cfg = config(|c| c.sampling.seed = Some(seed));
        let m = suite.run(&format!("ensemble-seed-{seed}"), &cfg)?;
        let f = filtering(suite, &m)?;
        if i == 0 {
            let (ratio_ok, detail) = ratio_line(&f, 0.5);
            let coverage_ok = f.min_coverage > 0.0;
            suite.check(
                "criterion 1 (ensemble M=5 filtering)",
                ratio_ok && coverage_ok,
                format!("{detail}; smallest kept mode share {:.4}", f.min_coverage),
            );
        }
        eprintln!("  seed {seed}: fid kept {:.5} random {:.5}", f.kept_fid, f.random_fid);
        kept_fid.push(f.kept_fid);
        random_fid.push(f.random_fid);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (k, r) = (mean(&kept_fid), mean(&random_fid));
    suite.check(
        "criterion 3 (Frechet distance under filtering)",
        k < r,
        format!("mean over {} seeds: kept {k:.5} vs random {r:.5}", FID_SEEDS.len()),
    );
    Ok(())
}

fn criterion_2(suite: &mut Suite) -> genunc::Result<()> {
    let cfg = config(|c| {
        c.posterior.kind = genunc::pipeline::PosteriorKind::Laplace;
        c.posterior.prior_precision = 1.0;
        c.posterior.sigma = 1.0;
    });
    let m = suite.run("laplace", &cfg)?;
    let f = filtering(suite, &m)?;
    let pass = f.kept < f.random;
    suite.check(
        "criterion 2 (last-layer Laplace parity)",
        pass,
        format!(
            "hallucination kept {:.4} vs random {:.4} (ratio {:.3}, need < 1)",
            f.kept,
            f.random,
            f.kept / f.random
        ),
    );
    Ok(())
}

fn criterion_4(suite: &mut Suite) -> genunc::Result<()> {
    let cfg = config(|c| {
        c.scoring.mc_samples = 1;
        c.scoring.steps = 25;
    });
    let m = suite.run("single-replica", &cfg)?;
    let f = filtering(suite, &m)?;
    let (ratio_ok, detail) = ratio_line(&f, 0.8);
    let nfe = m.nfe.map(|n| n.scoring_per_seed);
    suite.check(
        "criterion 4 (M=1, T=25 distance scoring)",
        ratio_ok && nfe == Some(25),
        format!("{detail}; scoring NFE per seed {nfe:?}, need 25"),
    );
    Ok(())
}

fn criterion_5(suite: &mut Suite) {
    let mut failed = Vec::new();
    for (name, check) in oracles::ALL {
        let ok = std::panic::catch_unwind(check).is_ok();
        println!("    {} {name}", if ok { "ok  " } else { "FAIL" });
        if !ok {
            failed.push(*name);
        }
    }
    suite.check(
        "criterion 5 (formula oracles)",
        failed.is_empty(),
        format!(
            "{} of {} oracles hold{}",
            oracles::ALL.len() - failed.len(),
            oracles::ALL.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failing {failed:?}")
            }
        ),
    );
}

fn criterion_6(suite: &mut Suite) -> genunc::Result<()> {
    let cfg = config(|c| {
        c.train.objective = genunc::diffusion::Objective::FlowVelocity;
        c.sampling.kind = genunc::diffusion::SamplerKind::FlowEuler;
        c.sampling.steps = 50;
        c.scoring.steps = 50;
    });
    let m = suite.run("flow", &cfg)?;
    let f = filtering(suite, &m)?;
    let (pass, detail) = ratio_line(&f, 0.8);
    suite.check("criterion 6 (flow matching with Euler sampling)", pass, detail);
    Ok(())
}

fn criterion_7(suite: &mut Suite) -> genunc::Result<()> {
    let cfg = ExperimentConfig::parse(
        r#"
schema_version = 1
seed = 21
[dataset]
num_samples = 2000
reference_samples = 500
[model]
hidden_dims = [32, 32]
[schedule]
steps = 200
[train]
epochs = 5
[posterior]
members = 3
[sampling]
steps = 50
num_samples = 1000
[scoring]
mc_samples = 3
steps = 10
[filter]
keep = [500]
"#,
    )
    .expect("determinism config parses");
    let root = suite.cache.join("determinism");
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let dir = root.join(run);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| genunc::Error::io(&dir, e))?;
        }
        let mut c = cfg.clone();
        c.output_dir = Some(dir.clone());
        let m = cmd_run(&c)?;
        let path = m
            .artifact("score", "entropy.csv")
            .ok_or_else(|| genunc::Error::Decode("score stage wrote no entropy.csv".into()))?;
        bytes.push(read(&dir.join(path))?);
    }
    let same = bytes[0] == bytes[1];
    suite.check(
        "criterion 7 (determinism)",
        same && !bytes[0].is_empty(),
        format!(
            "entropy CSVs of two fresh runs: {} bytes vs {} bytes, identical {same}",
            bytes[0].len(),
            bytes[1].len()
        ),
    );
    Ok(())
}

fn read(path: &Path) -> genunc::Result<Vec<u8>> {
    fs::read(path).map_err(|e| genunc::Error::io(path, e))
}

fn main() -> ExitCode {
    let cache = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut suite = Suite {
        cache,
        failed: Vec::new(),
    };
    let started = Instant::now();
    criterion_5(&mut suite);
    type Check = fn(&mut Suite) -> genunc::Result<()>;
    let runs: [(&str, Check); 5] = [
        ("criterion 7", criterion_7),
        ("criteria 1 and 3", criterion_1_and_3),
        ("criterion 2", criterion_2),
        ("criterion 4", criterion_4),
        ("criterion 6", criterion_6),
    ];
    for (id, f) in runs {
        if let Err(e) = f(&mut suite) {
            suite.check(id, false, format!("pipeline error: {e}"));
        }
    }
    println!(
        "acceptance: {} failing, {:.0}s",
        suite.failed.len(),
        started.elapsed().as_secs_f64()
    );
    if suite.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
