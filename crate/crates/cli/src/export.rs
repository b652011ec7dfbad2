//! Plot-ready CSV series from a results directory.

use std::path::{Path, PathBuf};

use anyhow::Result;

use quadleague::eval::{cause_counts, CauseFractions, DownwashReport, RaceResult, SelfEvalSummary, ValueField};

use crate::commands::{
    read_jsonl, TournamentSummary, DOWNWASH_FILE, SELF_EVAL_DIR, SUMMARY_FILE, TOURNAMENT_DIR, VALUE_FIELD_FILE,
};

pub const FIGURES: [&str; 5] = ["completion-vs-agents", "crash-types", "rank-dist", "value-field", "downwash-traces"];

fn self_eval_summary(dir: &Path) -> PathBuf {
    dir.join(SELF_EVAL_DIR).join(SUMMARY_FILE)
}

fn tournament_summary(dir: &Path) -> PathBuf {
    dir.join(TOURNAMENT_DIR).join(SUMMARY_FILE)
}

/// Figures whose source files exist under `results`.
pub fn available(results: &Path) -> Vec<String> {
    let se = self_eval_summary(results).is_file();
    let tour = tournament_summary(results).is_file();
    FIGURES
        .iter()
        .filter(|f| match **f {
            "completion-vs-agents" => se,
            "crash-types" => se || tour,
            "rank-dist" => tour,
            "value-field" => results.join(VALUE_FIELD_FILE).is_file(),
            "downwash-traces" => results.join(DOWNWASH_FILE).is_file(),
            _ => false,
        })
        .map(|f| f.to_string())
        .collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn crash_row(w: &mut csv::Writer<std::fs::File>, method: &str, agents: usize, c: &CauseFractions) -> Result<()> {
    w.write_record([
        method.to_string(),
        agents.to_string(),
        c.gate.to_string(),
        c.wall.to_string(),
        c.opponent.to_string(),
    ])?;
    Ok(())
}

/// Writes `<out>/<figure>.csv` and returns its path.
pub fn export_plot_data(results: &Path, figure: &str, out: &Path) -> Result<PathBuf> {
    let avail = available(results);
    if !avail.iter().any(|f| f == figure) {
        return Err(quadleague::Error::MissingSeries {
            requested: figure.to_string(),
            available: avail,
        }
        .into());
    }
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("{figure}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    match figure {
        "completion-vs-agents" => {
            let s: Vec<SelfEvalSummary> = read_json(&self_eval_summary(results))?;
            w.write_record(["agents", "mean", "std"])?;
            for x in &s {
                w.write_record([x.n_agents.to_string(), x.mean_completion.to_string(), x.completion_std.to_string()])?;
            }
        }
        "crash-types" => {
            w.write_record(["method", "agents", "gate", "wall", "opponent"])?;
            if self_eval_summary(results).is_file() {
                let s: Vec<SelfEvalSummary> = read_json(&self_eval_summary(results))?;
                for x in &s {
                    crash_row(&mut w, "self-eval", x.n_agents, &x.causes)?;
                }
            }
            if tournament_summary(results).is_file() {
                let t: TournamentSummary = read_json(&tournament_summary(results))?;
                let races: Vec<RaceResult> = read_jsonl(&results.join(TOURNAMENT_DIR).join("results.jsonl"))?;
                for (p, name) in t.pool.iter().enumerate() {
                    let c = cause_counts(races.iter().filter(|r| r.policy == p));
                    crash_row(&mut w, name, 4, &CauseFractions::from_counts(&c))?;
                }
            }
        }
        "rank-dist" => {
            let t: TournamentSummary = read_json(&tournament_summary(results))?;
            w.write_record(["method", "rank", "count", "fraction"])?;
            for m in &t.report.methods {
                for (k, &c) in m.rank_counts.iter().enumerate() {
                    let frac = c as f64 / m.races.max(1) as f64;
                    w.write_record([t.pool[m.policy].clone(), (k + 1).to_string(), c.to_string(), frac.to_string()])?;
                }
            }
        }
        "value-field" => {
            let f: ValueField = read_json(&results.join(VALUE_FIELD_FILE))?;
            w.write_record(["x", "z", "value"])?;
            for (iz, z) in f.zs.iter().enumerate() {
                for (ix, x) in f.xs.iter().enumerate() {
                    w.write_record([x.to_string(), z.to_string(), f.at(ix, iz).to_string()])?;
                }
            }
        }
        "downwash-traces" => {
            let r: DownwashReport = read_json(&results.join(DOWNWASH_FILE))?;
            w.write_record(["variant", "condition", "flight", "time", "lower_z", "upper_z", "gap"])?;
            for c in &r.conditions {
                for (k, f) in c.flights.iter().enumerate() {
                    for (t, time) in f.time.iter().enumerate() {
                        let opt = |v: &Vec<f64>| v.get(t).map_or(String::new(), |x| x.to_string());
                        w.write_record([
                            c.variant.clone(),
                            c.condition.label(),
                            k.to_string(),
                            time.to_string(),
                            f.lower_z[t].to_string(),
                            opt(&f.upper_z),
                            opt(&f.gap),
                        ])?;
                    }
                }
            }
        }
        _ => unreachable!("checked against the available figures"),
    }
    w.flush()?;
    Ok(path)
}
