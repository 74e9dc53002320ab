use std::fmt::Write as _;

use qrd_core::hwsim::LatencyReport;

use super::eval::{EvalSummary, METRICS_JSON};
use super::hwsim::LATENCY_JSON;
use super::sweep::SWEEP_SUMMARY_FILE;
use super::{create_dir, emit};
use crate::cli::ReportArgs;
use crate::config::read_json;
use crate::error::{io_at, CliError, CliResult};
use crate::manifest::{manifest_in, Manifest};

pub fn run(args: &ReportArgs) -> CliResult<()> {
    let mut manifest = Manifest::new("report", &serde_json::json!({ "inputs": args.inputs }));
    let mut evals: Vec<(String, EvalSummary)> = Vec::new();
    let mut sweeps = String::new();
    let mut latencies: Vec<(String, LatencyReport)> = Vec::new();

    for dir in &args.inputs {
        let source = dir.display().to_string();
        let mut found = false;
        let metrics = dir.join(METRICS_JSON);
        if metrics.exists() {
            manifest.input(&metrics)?;
            evals.push((source.clone(), read_json(&metrics)?));
            found = true;
        }
        let sweep = dir.join(SWEEP_SUMMARY_FILE);
        if sweep.exists() {
            manifest.input(&sweep)?;
            let text = std::fs::read_to_string(&sweep).map_err(io_at(&sweep))?;
            for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
                let _ = writeln!(sweeps, "{},{line}", csv_source(&source));
            }
            found = true;
        }
        let latency = dir.join(LATENCY_JSON);
        if latency.exists() {
            manifest.input(&latency)?;
            latencies.push((source.clone(), read_json(&latency)?));
            found = true;
        }
        if !found {
            return Err(CliError::Runtime(format!("{}: no {METRICS_JSON}, {SWEEP_SUMMARY_FILE} or {LATENCY_JSON}", dir.display())));
        }
    }

    create_dir(&args.out_dir)?;
    let out = &args.out_dir;
    let mut md = String::from("# Run report\n");
    if !evals.is_empty() {
        let n = evals.iter().map(|(_, e)| e.report.n_qubits()).max().unwrap_or(0);
        let qcols: Vec<String> = (0..n).map(|q| format!("f_q{q}")).collect();
        let mut csv = format!("source,discriminator,n_shots,f_gm,mean_abs_off_diagonal,{}\n", qcols.join(","));
        let mut cf = String::from("source,discriminator,row,col,cross_fidelity\n");
        let _ =
            write!(md, "\n## Fidelity\n\n| source | discriminator | shots | F_GM | mean abs CF off-diagonal |\n|---|---|---|---|---|\n");
        for (src, e) in &evals {
            let mut fs: Vec<String> = e.report.fidelity.iter().map(|f| f.to_string()).collect();
            fs.resize(n, String::new());
            let s = csv_source(src);
            let _ = writeln!(csv, "{s},{},{},{},{},{}", e.discriminator, e.n_shots, e.report.f_gm, e.mean_abs_off_diagonal, fs.join(","));
            for (i, row) in e.report.cross_fidelity.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let _ = writeln!(cf, "{s},{},{i},{j},{v}", e.discriminator);
                }
            }
            let _ = writeln!(md, "| {src} | {} | {} | {:.4} | {:.4} |", e.discriminator, e.n_shots, e.report.f_gm, e.mean_abs_off_diagonal);
        }
        emit(&mut manifest, &out.join("metrics_summary.csv"), csv)?;
        emit(&mut manifest, &out.join("cross_fidelity_long.csv"), cf)?;
    }
    if !sweeps.is_empty() {
        emit(
            &mut manifest,
            &out.join("sweep_summary.csv"),
            format!("source,axis,value,n_ok,mean_f_gm,std_f_gm,min_f_gm,max_f_gm\n{sweeps}"),
        )?;
        let _ = write!(md, "\n## Sweeps\n\nSee `sweep_summary.csv`.\n");
    }
    if !latencies.is_empty() {
        let mut csv = String::from("source,total_cycles,total_ns,clock_mhz\n");
        let _ = write!(md, "\n## Latency\n\n| source | cycles | ns |\n|---|---|---|\n");
        for (src, l) in &latencies {
            let _ = writeln!(csv, "{},{},{},{}", csv_source(src), l.total_cycles, l.total_ns, l.clock_mhz);
            let _ = writeln!(md, "| {src} | {} | {:.1} |", l.total_cycles, l.total_ns);
        }
        emit(&mut manifest, &out.join("latency_summary.csv"), csv)?;
    }
    emit(&mut manifest, &out.join("report.md"), md)?;
    manifest.write(&manifest_in(out))?;
    println!("wrote report for {} inputs to {}", args.inputs.len(), out.display());
    Ok(())
}

fn csv_source(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
