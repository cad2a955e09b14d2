//! Odometry error metrics: translational % and rotational deg/m of the
//! relative-pose error, averaged over subsequences of 100 m to 800 m and
//! over 10 km/h speed bins, with subsequence starts at every frame.

use crate::geometry::{relative_pose, Pose};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Evaluation lengths in meters.
pub const LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
const SPEED_BIN_KMH: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// Length in meters for per-length cells, bin lower edge in km/h for
    /// per-speed cells.
    pub key: f64,
    pub trans_pct: f64,
    pub rot_degpm: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub per_length: Vec<Cell>,
    pub per_speed: Vec<Cell>,
    pub trans_pct: f64,
    pub rot_degpm: f64,
    pub count: usize,
    /// Set when the ground-truth path is shorter than the smallest
    /// evaluation length; such a report is empty.
    pub too_short: bool,
}

struct CellAcc {
    trans: f64,
    rot: f64,
    count: usize,
}

impl CellAcc {
    fn new() -> Self {
        CellAcc {
            trans: 0.0,
            rot: 0.0,
            count: 0,
        }
    }
    fn add(&mut self, t: f64, r: f64) {
        self.trans += t;
        self.rot += r;
        self.count += 1;
    }
}

fn path_distances(poses: &[Pose]) -> Vec<f64> {
    let mut dist = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    dist.push(0.0);
    for w in poses.windows(2) {
        let a = w[0].translation();
        let b = w[1].translation();
        acc += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
        dist.push(acc);
    }
    dist
}

/// Relative-pose errors of an estimated trajectory against ground truth.
/// For every start frame and each length L, the end frame is the first
/// whose accumulated ground-truth path length exceeds L; the error pose is
/// delta_est⁻¹ · delta_gt, normalized by the actual subsequence path length.
/// Every pose step is timed at 1/`frame_rate` seconds. Pass the source
/// sequence rate even for sub-sampled virtual sequences; their speeds then
/// appear multiplied by the sub-sample factor, which is how the reference
/// evaluation treats them.
pub fn trajectory_errors(
    estimated: &[Pose],
    ground_truth: &[Pose],
    frame_rate: f64,
) -> Result<EvalReport> {
    if estimated.len() != ground_truth.len() {
        return Err(EvalError::Contract(format!(
            "trajectory lengths differ: estimated {} vs ground truth {}",
            estimated.len(),
            ground_truth.len()
        )));
    }
    if estimated.len() < 2 {
        return Err(EvalError::Contract(
            "trajectories need at least two poses".to_string(),
        ));
    }
    if !(frame_rate > 0.0) {
        return Err(EvalError::Contract(format!(
            "frame rate must be positive, got {frame_rate}"
        )));
    }
    let dist = path_distances(ground_truth);
    if *dist.last().unwrap() < LENGTHS[0] {
        return Ok(EvalReport {
            too_short: true,
            ..EvalReport::default()
        });
    }

    let mut length_cells: Vec<CellAcc> = LENGTHS.iter().map(|_| CellAcc::new()).collect();
    let mut speed_cells: std::collections::BTreeMap<u64, CellAcc> = Default::default();

    let n = ground_truth.len();
    for i in 0..n {
        for (li, &len) in LENGTHS.iter().enumerate() {
            // First j whose accumulated path length exceeds dist[i] + len.
            let target = dist[i] + len;
            let j = match dist[i..].iter().position(|&d| d > target) {
                Some(off) => i + off,
                None => break,
            };
            let actual = dist[j] - dist[i];
            let delta_gt = relative_pose(&ground_truth[i], &ground_truth[j]);
            let delta_est = relative_pose(&estimated[i], &estimated[j]);
            let err = delta_est.inverse().compose(&delta_gt);
            let trans_pct = err.translation_norm() / actual * 100.0;
            let rot_degpm = err.rotation_angle().to_degrees() / actual;

            length_cells[li].add(trans_pct, rot_degpm);
            let seconds = (j - i) as f64 / frame_rate;
            let speed_kmh = actual / seconds * 3.6;
            let bin = (speed_kmh / SPEED_BIN_KMH).floor() as u64;
            speed_cells
                .entry(bin)
                .or_insert_with(CellAcc::new)
                .add(trans_pct, rot_degpm);
        }
    }

    let per_length: Vec<Cell> = LENGTHS
        .iter()
        .zip(&length_cells)
        .filter(|(_, acc)| acc.count > 0)
        .map(|(&key, acc)| Cell {
            key,
            trans_pct: acc.trans / acc.count as f64,
            rot_degpm: acc.rot / acc.count as f64,
            count: acc.count,
        })
        .collect();
    let per_speed: Vec<Cell> = speed_cells
        .iter()
        .map(|(&bin, acc)| Cell {
            key: bin as f64 * SPEED_BIN_KMH,
            trans_pct: acc.trans / acc.count as f64,
            rot_degpm: acc.rot / acc.count as f64,
            count: acc.count,
        })
        .collect();

    let total: usize = length_cells.iter().map(|c| c.count).sum();
    let trans_pct = length_cells.iter().map(|c| c.trans).sum::<f64>() / total.max(1) as f64;
    let rot_degpm = length_cells.iter().map(|c| c.rot).sum::<f64>() / total.max(1) as f64;
    Ok(EvalReport {
        per_length,
        per_speed,
        trans_pct,
        rot_degpm,
        count: total,
        too_short: false,
    })
}

/// Count-weighted aggregation of per-sequence reports. Empty (too-short)
/// reports contribute nothing.
pub fn summarize(reports: &[EvalReport]) -> EvalReport {
    let mut length: std::collections::BTreeMap<u64, CellAcc> = Default::default();
    let mut speed: std::collections::BTreeMap<u64, CellAcc> = Default::default();
    for rep in reports {
        for cell in &rep.per_length {
            let acc = length.entry(cell.key as u64).or_insert_with(CellAcc::new);
            acc.trans += cell.trans_pct * cell.count as f64;
            acc.rot += cell.rot_degpm * cell.count as f64;
            acc.count += cell.count;
        }
        for cell in &rep.per_speed {
            let acc = speed.entry(cell.key as u64).or_insert_with(CellAcc::new);
            acc.trans += cell.trans_pct * cell.count as f64;
            acc.rot += cell.rot_degpm * cell.count as f64;
            acc.count += cell.count;
        }
    }
    let to_cells = |m: &std::collections::BTreeMap<u64, CellAcc>| -> Vec<Cell> {
        m.iter()
            .map(|(&k, acc)| Cell {
                key: k as f64,
                trans_pct: acc.trans / acc.count as f64,
                rot_degpm: acc.rot / acc.count as f64,
                count: acc.count,
            })
            .collect()
    };
    let per_length = to_cells(&length);
    let per_speed = to_cells(&speed);
    let count: usize = length.values().map(|c| c.count).sum();
    let trans_pct = length.values().map(|c| c.trans).sum::<f64>() / count.max(1) as f64;
    let rot_degpm = length.values().map(|c| c.rot).sum::<f64>() / count.max(1) as f64;
    EvalReport {
        per_length,
        per_speed,
        trans_pct,
        rot_degpm,
        count,
        too_short: count == 0,
    }
}

/// Writes the pose-per-line trajectory (12 floats, shortest round-trip
/// formatting) plus a gnuplot-ready x–z CSV alongside (`<stem>.xz.csv`).
pub fn export_trajectory(poses: &[Pose], path: &Path) -> Result<PathBuf> {
    let mut text = String::new();
    for p in poses {
        let m = p.matrix();
        let fields: Vec<String> = (0..3)
            .flat_map(|i| (0..4).map(move |j| format!("{}", m[i][j])))
            .collect();
        text.push_str(&fields.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text)?;

    let csv_path = path.with_extension("xz.csv");
    let mut csv = String::from("x,z\n");
    for p in poses {
        let t = p.translation();
        csv.push_str(&format!("{},{}\n", t[0], t[2]));
    }
    std::fs::write(&csv_path, csv)?;
    Ok(csv_path)
}

/// Gnuplot script for the x-z trajectory CSV written by
/// [`export_trajectory`]; saved next to the CSV as `<stem>.gp`.
pub fn write_trajectory_plot_script(csv_path: &Path) -> Result<PathBuf> {
    let gp_path = csv_path.with_extension("gp");
    let csv_name = csv_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let script = format!(
        "set datafile separator ','\n\
         set xlabel 'x [m]'\n\
         set ylabel 'z [m]'\n\
         set size ratio -1\n\
         set key top left\n\
         plot '{csv_name}' using 1:2 with lines title 'trajectory'\n"
    );
    std::fs::write(&gp_path, script)?;
    Ok(gp_path)
}

/// Gnuplot script for a report CSV: error against subsequence length.
pub fn write_report_plot_script(csv_path: &Path) -> Result<PathBuf> {
    let gp_path = csv_path.with_extension("gp");
    let csv_name = csv_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let script = format!(
        "set datafile separator ','\n\
         set xlabel 'path length [m]'\n\
         set key top right\n\
         set y2tics\n\
         set ylabel 'translational error [%]'\n\
         set y2label 'rotational error [deg/m]'\n\
         plot '< grep ^length, {csv_name}' using 2:3 with linespoints title 'translation', \\\n\
              '< grep ^length, {csv_name}' using 2:4 axes x1y2 with linespoints title 'rotation'\n"
    );
    std::fs::write(&gp_path, script)?;
    Ok(gp_path)
}

/// Report CSV: `kind,key,trans_pct,rot_degpm,count` with kind one of
/// length | speed | overall.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut text = String::from("kind,key,trans_pct,rot_degpm,count\n");
    for cell in &report.per_length {
        text.push_str(&format!(
            "length,{},{},{},{}\n",
            cell.key, cell.trans_pct, cell.rot_degpm, cell.count
        ));
    }
    for cell in &report.per_speed {
        text.push_str(&format!(
            "speed,{},{},{},{}\n",
            cell.key, cell.trans_pct, cell.rot_degpm, cell.count
        ));
    }
    text.push_str(&format!(
        "overall,all,{},{},{}\n",
        report.trans_pct, report.rot_degpm, report.count
    ));
    std::fs::write(path, text)?;
    Ok(())
}
