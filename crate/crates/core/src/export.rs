//! CSV exporters and the SVG trajectory map.

use std::fmt::Write as _;
use std::path::Path;

use crate::action::DiscreteEntry;
use crate::env::Outcome;
use crate::env::WorldConfig;
use crate::error::{Error, Result};
use crate::eval::{EpisodeRecord, MetricsRow};
use crate::robot::ModelIndex;
use crate::train::TrainLogRow;

pub const METRICS_HEADER: [&str; 15] = [
    "method",
    "success_pct",
    "rollover_pct",
    "collision_pct",
    "boundary_pct",
    "maxstep_pct",
    "calls_base",
    "mean_dtp_base_ms",
    "std_dtp_base_ms",
    "calls_arm",
    "mean_dtp_arm_ms",
    "std_dtp_arm_ms",
    "calls_wb",
    "mean_dtp_wb_ms",
    "std_dtp_wb_ms",
];

pub const TRAJECTORY_HEADER: [&str; 8] = [
    "episode",
    "step",
    "t",
    "x_b",
    "y_b",
    "model_index",
    "target_type",
    "outcome",
];

pub const TRAINING_HEADER: [&str; 5] = ["episode", "reward", "outcome", "loss", "epsilon"];

pub const ACTION_TABLE_HEADER: [&str; 4] = ["index", "model", "target_type", "target"];

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new().from_path(path)?)
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let mut rec = vec![r.method.clone()];
        for o in [
            Outcome::Success,
            Outcome::Rollover,
            Outcome::Collision,
            Outcome::Boundary,
            Outcome::MaxStep,
        ] {
            rec.push(format!("{:.4}", r.pct(o)));
        }
        for t in &r.timing {
            rec.push(t.calls().to_string());
            rec.push(format!("{:.4}", t.mean_ms()));
            rec.push(format!("{:.4}", t.std_ms()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per executed control step; `episode` numbers follow slice order.
pub fn write_trajectories(records: &[EpisodeRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(TRAJECTORY_HEADER)?;
    for (e, rec) in records.iter().enumerate() {
        for row in &rec.result.trace {
            w.write_record([
                e.to_string(),
                row.step.to_string(),
                row.t.to_string(),
                row.x_b.to_string(),
                row.y_b.to_string(),
                row.model.index().to_string(),
                row.target_type.name().to_string(),
                row.outcome.name().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A trajectory CSV row read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub step: usize,
    pub t: f64,
    pub x_b: f64,
    pub y_b: f64,
    pub model: ModelIndex,
    pub target_type: String,
    pub outcome: String,
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::config(format!("trajectory.{name}"), format!("unreadable value in row {rec:?}")))
}

pub fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRAJECTORY_HEADER {
        return Err(Error::config(
            "trajectory.header",
            format!("unexpected header {header:?}"),
        ));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let m: usize = field(&rec, 5, "model_index")?;
        out.push(TrajectoryRow {
            episode: field(&rec, 0, "episode")?,
            step: field(&rec, 1, "step")?,
            t: field(&rec, 2, "t")?,
            x_b: field(&rec, 3, "x_b")?,
            y_b: field(&rec, 4, "y_b")?,
            model: ModelIndex::from_index(m).ok_or_else(|| Error::config("trajectory.model_index", format!("{m}")))?,
            target_type: field(&rec, 6, "target_type")?,
            outcome: field(&rec, 7, "outcome")?,
        });
    }
    Ok(out)
}

/// Fraction of control steps spent in each model.
pub fn model_usage<'a>(models: impl IntoIterator<Item = &'a ModelIndex>) -> [f64; ModelIndex::COUNT] {
    let mut counts = [0usize; ModelIndex::COUNT];
    let mut n = 0;
    for m in models {
        counts[m.index()] += 1;
        n += 1;
    }
    counts.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
}

pub fn write_training_log(rows: &[TrainLogRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(TRAINING_HEADER)?;
    for r in rows {
        w.write_record([
            r.episode.to_string(),
            r.reward.to_string(),
            r.outcome.clone(),
            r.loss.map(|l| l.to_string()).unwrap_or_default(),
            r.epsilon.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_action_table(table: &[DiscreteEntry], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(ACTION_TABLE_HEADER)?;
    for (i, e) in table.iter().enumerate() {
        w.write_record([
            i.to_string(),
            e.model.name().to_string(),
            e.target_type().name().to_string(),
            e.target.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn model_color(m: ModelIndex) -> &'static str {
    match m {
        ModelIndex::Base => "#1f77b4",
        ModelIndex::Arm => "#2ca02c",
        ModelIndex::WholeBody => "#d62728d0",
    }
}

/// Top-down map of base paths. Segments are colored by model; steps whose
/// target was the goal get a red underlay.
pub fn render_svg(rows: &[TrajectoryRow], world: &WorldConfig) -> String {
    let scale = 100.0;
    let [x0, x1] = world.x_limits;
    let [y0, y1] = world.y_limits;
    let width = (x1 - x0) * scale;
    let height = (y1 - y0) * scale;
    let px = |x: f64| (x - x0) * scale;
    let py = |y: f64| (y1 - y) * scale;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.1} {height:.1}">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{width:.1}" height="{height:.1}" fill="#ffffff" stroke="#000000"/>"##
    );
    for b in &world.obstacles {
        let h = b.half_extents();
        let (hx, hy) = (h.x, h.y);
        let c = b.center();
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#cccccc" transform="rotate({:.3} {:.1} {:.1})"/>"##,
            px(c.x - hx),
            py(c.y + hy),
            2.0 * hx * scale,
            2.0 * hy * scale,
            -b.yaw.to_degrees(),
            px(c.x),
            py(c.y)
        );
    }
    let gy = world.goal.y;
    let _ = writeln!(
        s,
        r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ff7f0e" stroke-width="3"/>"##,
        px(world.goal.x_range[0]),
        py(gy),
        px(world.goal.x_range[1]),
        py(gy)
    );
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.episode != b.episode {
            continue;
        }
        if b.target_type == "goal" {
            let _ = writeln!(
                s,
                r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ff0000" stroke-opacity="0.35" stroke-width="5"/>"##,
                px(a.x_b),
                py(a.y_b),
                px(b.x_b),
                py(b.y_b)
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="2"/>"#,
            px(a.x_b),
            py(a.y_b),
            px(b.x_b),
            py(b.y_b),
            model_color(b.model)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::TargetType;
    use crate::eval::MetricsRow;
    use crate::pipeline::{EpisodeResult, TraceRow};

    fn first_line(path: &Path) -> String {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    }

    #[test]
    fn empty_exports_are_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        let t = dir.path().join("t.csv");
        write_metrics(&[], &m).unwrap();
        write_trajectories(&[], &t).unwrap();
        assert_eq!(
            std::fs::read_to_string(&m).unwrap(),
            "method,success_pct,rollover_pct,collision_pct,boundary_pct,maxstep_pct,calls_base,mean_dtp_base_ms,std_dtp_base_ms,calls_arm,mean_dtp_arm_ms,std_dtp_arm_ms,calls_wb,mean_dtp_wb_ms,std_dtp_wb_ms\n"
        );
        assert_eq!(
            std::fs::read_to_string(&t).unwrap(),
            "episode,step,t,x_b,y_b,model_index,target_type,outcome\n"
        );
        assert!(read_trajectories(&t).unwrap().is_empty());
    }

    fn record(models: &[ModelIndex], outcome: Outcome) -> EpisodeRecord {
        let mut result = EpisodeResult::new();
        result.outcome = outcome;
        for (i, m) in models.iter().enumerate() {
            result.trace.push(TraceRow {
                step: i,
                t: 0.05 * (i + 1) as f64,
                x_b: 0.1 * i as f64 + 1.0 / 3.0,
                y_b: -0.2 * i as f64,
                yaw: 0.0,
                tilt: [0.0; 2],
                model: *m,
                target_type: if i % 2 == 0 {
                    TargetType::Goal
                } else {
                    TargetType::SubGoal
                },
                outcome: if i + 1 == models.len() {
                    outcome
                } else {
                    Outcome::Running
                },
            });
            result.timing[m.index()].record(1e-3);
        }
        EpisodeRecord {
            config_index: 0,
            run: 0,
            seed: 0,
            result,
        }
    }

    #[test]
    fn trajectory_round_trip_preserves_model_usage() {
        use ModelIndex::*;
        let recs = vec![
            record(&[Base, Base, Arm, WholeBody], Outcome::Success),
            record(&[WholeBody, WholeBody, Arm], Outcome::Rollover),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trajectories(&recs, &path).unwrap();
        let back = read_trajectories(&path).unwrap();
        assert_eq!(back.len(), 7);
        let in_memory = model_usage(recs.iter().flat_map(|r| r.result.trace.iter().map(|t| &t.model)));
        let from_disk = model_usage(back.iter().map(|r| &r.model));
        assert_eq!(in_memory, from_disk);
        assert_eq!(back[0].x_b, 1.0 / 3.0);
        assert_eq!(back[6].outcome, "rollover");
        let svg = render_svg(&back, &WorldConfig::default());
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn metrics_row_values() {
        use ModelIndex::*;
        let recs = [
            record(&[Base, WholeBody], Outcome::Success),
            record(&[WholeBody], Outcome::Collision),
        ];
        let row = MetricsRow::from_results("m", recs.iter().map(|r| &r.result));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&[row], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert_eq!(
            line,
            "m,50.0000,0.0000,50.0000,0.0000,0.0000,1,1.0000,0.0000,0,0.0000,0.0000,2,1.0000,0.0000"
        );
        assert_eq!(first_line(&path).split(',').count(), 15);
    }
}
