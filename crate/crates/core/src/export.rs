use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::SwarmConfig;
use crate::dynamics::EpisodeStatus;
use crate::error::{Error, Result};
use crate::eval::{EpisodeMetrics, EpisodeRecord, MeanStd, MetricsReport};

pub const TRAJECTORY_FORMAT: &str = "swarmnet-trajectory";
pub const TRAJECTORY_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "# swarmnet-metrics 1";

type Rows = Vec<Vec<f64>>;

fn rows(a: &Array2<f64>) -> Rows {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub format: String,
    pub version: u32,
    pub policy: String,
    pub seed: u64,
    pub status: EpisodeStatus,
    pub steps: usize,
    pub config: SwarmConfig,
    pub initial_positions: Rows,
    pub initial_velocities: Rows,
}

/// One executed step: the state reached at time `t`, the leader at `t`, and
/// the controls applied at `t - 1` that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLine {
    pub t: usize,
    pub positions: Rows,
    pub velocities: Rows,
    pub control: Rows,
    pub expert_u: Rows,
    pub alpha: Rows,
    pub beta: Rows,
    pub gamma: Rows,
    pub leader_position: Vec<f64>,
    pub leader_velocity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub lines: Vec<TrajectoryLine>,
}

impl Trajectory {
    pub fn from_record(record: &EpisodeRecord) -> Self {
        let first = &record.steps[0].state;
        let header = TrajectoryHeader {
            format: TRAJECTORY_FORMAT.into(),
            version: TRAJECTORY_VERSION,
            policy: record.policy.clone(),
            seed: record.seed,
            status: record.status,
            steps: record.steps.len(),
            config: record.config.clone(),
            initial_positions: rows(&first.positions),
            initial_velocities: rows(&first.velocities),
        };
        let lines = record
            .steps
            .iter()
            .zip(record.post_step_states())
            .map(|(s, (next, leader))| TrajectoryLine {
                t: next.time_step,
                positions: rows(&next.positions),
                velocities: rows(&next.velocities),
                control: rows(&s.control),
                expert_u: rows(&s.expert.u),
                alpha: rows(&s.expert.alpha_term),
                beta: rows(&s.expert.beta_term),
                gamma: rows(&s.expert.gamma_term),
                leader_position: leader.position.to_vec(),
                leader_velocity: leader.velocity.to_vec(),
            })
            .collect();
        Self { header, lines }
    }

    /// Mean robot-to-leader distance over all data lines.
    pub fn tau(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for line in &self.lines {
            for p in &line.positions {
                let d2: f64 = p
                    .iter()
                    .zip(&line.leader_position)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                total += d2.sqrt();
                count += 1;
            }
        }
        total / count as f64
    }

    /// Velocity variance of the last data line.
    pub fn velocity_variance(&self) -> f64 {
        let Some(last) = self.lines.last() else {
            return 0.0;
        };
        let n = last.velocities.len() as f64;
        let dim = last.velocities[0].len();
        let mean: Vec<f64> = (0..dim)
            .map(|k| last.velocities.iter().map(|v| v[k]).sum::<f64>() / n)
            .collect();
        last.velocities
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&mean)
                    .map(|(a, m)| (a - m).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n
    }
}

pub fn write_trajectory(record: &EpisodeRecord, path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let traj = Trajectory::from_record(record);
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    writeln!(w, "{}", json_line(&traj.header)).map_err(|e| Error::io(ctx(), e))?;
    for line in &traj.lines {
        writeln!(w, "{}", json_line(line)).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("trajectory serializes")
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let corrupt = |reason: String| Error::Corrupt {
        kind: "trajectory",
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| corrupt("empty file".into()))?
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let header: TrajectoryHeader =
        serde_json::from_str(&first).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format != TRAJECTORY_FORMAT {
        return Err(corrupt(format!("unknown format `{}`", header.format)));
    }
    if header.version != TRAJECTORY_VERSION {
        return Err(Error::Version {
            kind: "trajectory",
            path: path.to_path_buf(),
            found: header.version,
            expected: TRAJECTORY_VERSION,
        });
    }
    let mut data = Vec::with_capacity(header.steps);
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        data.push(
            serde_json::from_str(&line).map_err(|e| corrupt(format!("line {}: {e}", k + 2)))?,
        );
    }
    if data.len() != header.steps {
        return Err(corrupt(format!(
            "header announces {} steps, found {}",
            header.steps,
            data.len()
        )));
    }
    Ok(Trajectory {
        header,
        lines: data,
    })
}

/// Vector plot of robot paths (x, y), obstacle outlines and the leader path.
pub fn render_svg(record: &EpisodeRecord) -> String {
    let n = record.final_state.n_robots();
    let mut paths: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    let mut leader = Vec::new();
    let states = std::iter::once((&record.steps[0].state, &record.steps[0].leader))
        .chain(record.post_step_states());
    for (s, l) in states {
        for (i, p) in s.positions.rows().into_iter().enumerate() {
            paths[i].push((p[0], p[1]));
        }
        leader.push((l.position[0], l.position[1]));
    }
    let mut xs: Vec<f64> = paths.iter().flatten().chain(&leader).map(|p| p.0).collect();
    let mut ys: Vec<f64> = paths.iter().flatten().chain(&leader).map(|p| p.1).collect();
    for o in &record.config.obstacles {
        xs.extend([o.center[0] - o.radius, o.center[0] + o.radius]);
        ys.extend([o.center[1] - o.radius, o.center[1] + o.radius]);
    }
    let fold = |v: &[f64], f: fn(f64, f64) -> f64, init: f64| v.iter().copied().fold(init, f);
    let margin = 0.5;
    let (x0, x1) = (
        fold(&xs, f64::min, f64::INFINITY) - margin,
        fold(&xs, f64::max, f64::NEG_INFINITY) + margin,
    );
    let (y0, y1) = (
        fold(&ys, f64::min, f64::INFINITY) - margin,
        fold(&ys, f64::max, f64::NEG_INFINITY) + margin,
    );
    let points = |pts: &[(f64, f64)]| {
        let mut s = String::new();
        for (k, (x, y)) in pts.iter().enumerate() {
            if k > 0 {
                s.push(' ');
            }
            write!(s, "{x:.4},{:.4}", y0 + y1 - y).expect("string write");
        }
        s
    };
    let mut svg = String::new();
    let w = &mut svg;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{x0:.4} {y0:.4} {:.4} {:.4}" width="900" height="{:.0}">"#,
        x1 - x0,
        y1 - y0,
        900.0 * (y1 - y0) / (x1 - x0)
    )
    .expect("string write");
    writeln!(
        w,
        "<title>{} seed {} ({})</title>",
        record.policy,
        record.seed,
        record.status.as_str()
    )
    .expect("string write");
    writeln!(
        w,
        r##"<rect x="{x0:.4}" y="{y0:.4}" width="{:.4}" height="{:.4}" fill="#ffffff"/>"##,
        x1 - x0,
        y1 - y0
    )
    .expect("string write");
    for o in &record.config.obstacles {
        writeln!(
            w,
            r##"<circle class="obstacle" cx="{:.4}" cy="{:.4}" r="{:.4}" fill="#d0d0d0" stroke="#404040" stroke-width="0.02"/>"##,
            o.center[0],
            y0 + y1 - o.center[1],
            o.radius
        )
        .expect("string write");
    }
    for (i, p) in paths.iter().enumerate() {
        let hue = 360.0 * i as f64 / n as f64;
        writeln!(
            w,
            r#"<polyline class="robot" fill="none" stroke="hsl({hue:.0},70%,45%)" stroke-width="0.015" points="{}"/>"#,
            points(p)
        )
        .expect("string write");
    }
    writeln!(
        w,
        r##"<polyline class="leader" fill="none" stroke="#000000" stroke-width="0.03" stroke-dasharray="0.1,0.05" points="{}"/>"##,
        points(&leader)
    )
    .expect("string write");
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg(record: &EpisodeRecord, path: &Path) -> Result<()> {
    std::fs::write(path, render_svg(record))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let ctx = || format!("writing {}", path.display());
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
    writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(ctx(), e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| {
        Error::io(
            format!("writing {}", path.display()),
            std::io::Error::other(e),
        )
    }
}

/// One row per episode: seed, status, steps, MAE, V and tau.
pub fn write_episode_csv(episodes: &[EpisodeMetrics], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record([
        "trial",
        "seed",
        "status",
        "steps",
        "mae",
        "velocity_variance",
        "tau",
    ])
    .map_err(&err)?;
    for (k, e) in episodes.iter().enumerate() {
        w.write_record([
            k.to_string(),
            e.seed.to_string(),
            e.status.as_str().to_string(),
            e.steps.to_string(),
            e.mae.to_string(),
            e.velocity_variance.to_string(),
            e.tau.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn report_rows(report: &MetricsReport) -> Vec<(&'static str, String, String)> {
    let ms = |m: &Option<MeanStd>| match m {
        Some(m) => (m.mean.to_string(), m.std.to_string()),
        None => ("NA".into(), "NA".into()),
    };
    let (mae, v, tau) = (
        ms(&report.mae),
        ms(&report.velocity_variance),
        ms(&report.tau),
    );
    vec![
        (
            "completion_rate",
            report.completion_rate.to_string(),
            String::new(),
        ),
        ("mae", mae.0, mae.1),
        ("velocity_variance", v.0, v.1),
        ("tau", tau.0, tau.1),
        ("n_trials", report.n_trials.to_string(), String::new()),
        ("n_completed", report.n_completed.to_string(), String::new()),
    ]
}

pub fn write_report_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["metric", "mean", "std"]).map_err(&err)?;
    for (name, mean, std) in report_rows(report) {
        w.write_record([name, &mean, &std]).map_err(&err)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Fixed-width text table of a report.
pub fn report_table(label: &str, report: &MetricsReport) -> String {
    let fmt = |m: &Option<MeanStd>| match m {
        Some(m) => format!("{:.4} ± {:.4}", m.mean, m.std),
        None => "n/a".into(),
    };
    let mut s = String::new();
    writeln!(
        s,
        "{:<12} {:>6} {:>20} {:>20} {:>20}",
        "model", "C%", "MAE", "V", "tau"
    )
    .expect("string write");
    writeln!(
        s,
        "{:<12} {:>6.2} {:>20} {:>20} {:>20}",
        label,
        report.completion_rate,
        fmt(&report.mae),
        fmt(&report.velocity_variance),
        fmt(&report.tau)
    )
    .expect("string write");
    s
}
