//! One PASS/FAIL line per acceptance criterion. Criteria 1 to 6 come from
//! the self-test suite; 7 to 9 drive the `seqplace` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use seqplace_cli::suite::{run_suite, Check};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_seqplace");
const AR1_MIN: f64 = 0.85;
const SEGMENT_GAP_MAX: f64 = 0.05;
const END_TO_END_BUDGET: Duration = Duration::from_secs(30 * 60);
const MEDIAN_LATENCY_MAX_MS: f64 = 100.0;

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

fn seqplace(config: &Path, out: &Path, args: &[&str]) -> Result<String, String> {
    let o = Command::new(BIN)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("SEQPLACE_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "`seqplace {}` exited with {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn read_json(p: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
}

fn check<F>(id: u8, name: &'static str, f: F) -> Check
where
    F: FnOnce() -> Result<(bool, String), String>,
{
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        id,
        name,
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

fn end_to_end(out: &Path) -> Check {
    let c = check(7, "desk-scale end-to-end", || {
        let cfg = desk_config();
        for step in [
            &["project"][..],
            &["label"],
            &["train", "--phase", "1"],
            &["train", "--phase", "2"],
            &["describe"],
            &["index"],
            &["eval"],
        ] {
            seqplace(&cfg, out, step)?;
        }
        let eval = read_json(&out.join("eval.json"))?;
        let ar1 = eval["ar1"].as_f64().ok_or("eval.json has no ar1")?;
        let fwd = eval["forward"]["ar"][0][1]
            .as_f64()
            .ok_or("no forward AR@1")?;
        let rev = eval["reversed"]["ar"][0][1]
            .as_f64()
            .ok_or("no reversed AR@1")?;
        let nrev = eval["reversed"]["evaluated"].as_u64().unwrap_or(0);
        let gap = (rev - fwd).abs();
        Ok((
            ar1 >= AR1_MIN && gap <= SEGMENT_GAP_MAX && nrev > 0,
            format!(
                "AR@1 {ar1:.3} (min {AR1_MIN}), forward {fwd:.3}, reversed {rev:.3} over {nrev} queries, gap {gap:.3} (max {SEGMENT_GAP_MAX})"
            ),
        ))
    });
    if c.elapsed > END_TO_END_BUDGET {
        return Check {
            passed: false,
            detail: format!("{}; took longer than 30 min", c.detail),
            ..c
        };
    }
    c
}

/// Criterion 5, second half: recall is monotone on the end-to-end eval.
fn eval_recall_monotone(out: &Path) -> Result<(bool, String), String> {
    let eval = read_json(&out.join("eval.json"))?;
    let ar: Vec<f64> = ["ar1", "ar5", "ar20"]
        .iter()
        .map(|k| eval[k].as_f64().ok_or(format!("eval.json has no {k}")))
        .collect::<Result<_, _>>()?;
    Ok((
        ar[0] <= ar[1] && ar[1] <= ar[2],
        format!(
            "end-to-end eval AR@1 {:.3} <= AR@5 {:.3} <= AR@20 {:.3}",
            ar[0], ar[1], ar[2]
        ),
    ))
}

fn latency(out: &Path) -> Check {
    check(8, "latency budget", || {
        let stdout = seqplace(&desk_config(), out, &["bench"])?;
        let b = read_json(&out.join("bench.json"))?;
        let median = b["median_ms"]
            .as_f64()
            .ok_or("bench.json has no median_ms")?;
        let params = b["param_count"]
            .as_u64()
            .ok_or("bench.json has no param_count")?;
        let reference = b["reference_param_count"]
            .as_f64()
            .ok_or("bench.json has no reference count")?;
        Ok((
            median < MEDIAN_LATENCY_MAX_MS && stdout.contains("parameters"),
            format!(
                "median {median:.2} ms per scan (max {MEDIAN_LATENCY_MAX_MS}), {params} parameters vs {:.2} M reference",
                reference / 1e6
            ),
        ))
    })
}

fn determinism(src: &Path, scratch: &Path) -> Check {
    check(9, "determinism", || {
        let mut cfg = read_json(&desk_config())?;
        cfg["train"]["epochs_phase1"] = 2.into();
        cfg["train"]["queries_per_epoch"] = 12.into();
        let cfg_path = scratch.join("short.json");
        fs::write(&cfg_path, cfg.to_string()).map_err(|e| e.to_string())?;
        let mut sums = Vec::new();
        for run in ["a", "b"] {
            let out = scratch.join(run);
            fs::create_dir_all(out.join("images")).map_err(|e| e.to_string())?;
            for e in fs::read_dir(src.join("images")).map_err(|e| e.to_string())? {
                let p = e.map_err(|e| e.to_string())?.path();
                fs::copy(&p, out.join("images").join(p.file_name().unwrap()))
                    .map_err(|e| e.to_string())?;
            }
            fs::copy(src.join("overlap.sqot"), out.join("overlap.sqot"))
                .map_err(|e| e.to_string())?;
            seqplace(
                &cfg_path,
                &out,
                &["--workers", "1", "train", "--phase", "1"],
            )?;
            sums.push(fs::read(out.join("phase1/checkpoint.sqwt")).map_err(|e| e.to_string())?);
        }
        Ok((
            !sums[0].is_empty() && sums[0] == sums[1],
            format!(
                "two --workers 1 runs: checkpoints of {} bytes {}",
                sums[0].len(),
                if sums[0] == sums[1] {
                    "identical"
                } else {
                    "differ"
                }
            ),
        ))
    })
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let out = dir.path().join("desk");
    let mut checks = run_suite();

    let e2e = end_to_end(&out);
    let monotone = eval_recall_monotone(&out);
    if let Some(c5) = checks.iter_mut().find(|c| c.id == 5) {
        match monotone {
            Ok((ok, detail)) => {
                c5.passed &= ok;
                c5.detail = format!("{}; {detail}", c5.detail);
            }
            Err(e) => {
                c5.passed = false;
                c5.detail = format!("{}; {e}", c5.detail);
            }
        }
    }
    checks.push(e2e);
    checks.push(latency(&out));
    checks.push(determinism(&out, dir.path()));

    for c in &checks {
        println!("{c}");
    }
    let failed: Vec<u8> = checks.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    if !failed.is_empty() {
        eprintln!("acceptance failed: criteria {failed:?}");
        std::process::exit(1);
    }
}
