use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use super::{SimError, TrajectoryDataset};

const KEY_COLUMNS: [&str; 3] = ["traj_id", "t", "agent_id"];

/// Which state columns a trajectory CSV carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    spatial: usize,
    has_velocity: bool,
}

fn parse_header(header: &csv::StringRecord) -> Result<Layout, SimError> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let err = |m: String| SimError::Csv { line: 1, message: m };
    if cols.len() < 4 || cols[..3] != KEY_COLUMNS {
        return Err(err(format!("header must start with traj_id,t,agent_id, got {}", cols.join(","))));
    }
    let rest = &cols[3..];
    for (spatial, has_velocity) in [(1, false), (2, false), (1, true), (2, true)] {
        let axes = &["x", "y"][..spatial];
        let mut want: Vec<String> = axes.iter().map(|a| format!("p{a}")).collect();
        if has_velocity {
            want.extend(axes.iter().map(|a| format!("v{a}")));
        }
        if rest == want.iter().map(String::as_str).collect::<Vec<_>>() {
            return Ok(Layout { spatial, has_velocity });
        }
    }
    Err(err(format!("unsupported state columns {}", rest.join(","))))
}

/// Reads `traj_id,t,agent_id,px[,py][,vx[,vy]]` rows into a dataset.
///
/// When the file has no velocity columns they are formed by forward
/// differences `(p_{t+1} − p_t)/dt`, the final frame repeating the previous
/// one. Every trajectory must contain the same number of frames and the same
/// agents at every frame.
pub fn import_csv_reader<R: Read>(input: R, name: &str, has_velocity: bool, dt: f64) -> Result<TrajectoryDataset, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::Config(format!("dt must be positive, got {dt}")));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers().map_err(|e| SimError::Csv { line: 1, message: e.to_string() })?.clone();
    let layout = parse_header(&header)?;
    if layout.has_velocity != has_velocity {
        return Err(SimError::Csv {
            line: 1,
            message: format!(
                "velocity columns {} but import requested {}",
                if layout.has_velocity { "present" } else { "absent" },
                if has_velocity { "them" } else { "none" }
            ),
        });
    }
    let width = if has_velocity { 2 * layout.spatial } else { layout.spatial };

    // traj → frame → agent → values; numeric ordering on t
    type Frames = BTreeMap<OrdF64, BTreeMap<String, Vec<f64>>>;
    let mut trajs: BTreeMap<String, Frames> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| SimError::Csv { line, message: e.to_string() })?;
        if rec.len() != 3 + width {
            return Err(SimError::Csv {
                line,
                message: format!("expected {} fields, found {}", 3 + width, rec.len()),
            });
        }
        let num = |j: usize| -> Result<f64, SimError> {
            let v: f64 = rec[j].parse().map_err(|_| SimError::Csv {
                line,
                message: format!("cannot parse '{}' in column {}", &rec[j], &header[j]),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(SimError::Csv { line, message: format!("non-finite value in column {}", &header[j]) })
            }
        };
        let t = num(1)?;
        let values = (3..3 + width).map(num).collect::<Result<Vec<_>, _>>()?;
        let prev = trajs
            .entry(rec[0].to_string())
            .or_default()
            .entry(OrdF64(t))
            .or_default()
            .insert(rec[2].to_string(), values);
        if prev.is_some() {
            return Err(SimError::Csv {
                line,
                message: format!("duplicate row for trajectory {}, t {}, agent {}", &rec[0], t, &rec[2]),
            });
        }
    }

    let mut frames = None;
    let mut agents: Option<Vec<String>> = None;
    let state_dim = 2 * layout.spatial;
    let mut data = Vec::new();
    for (tid, tr) in &trajs {
        match frames {
            None => frames = Some(tr.len()),
            Some(n) if n != tr.len() => {
                return Err(SimError::Ragged(format!("trajectory {tid} has {} frames, expected {n}", tr.len())));
            }
            _ => {}
        }
        let positions: Vec<Vec<Vec<f64>>> = tr
            .iter()
            .map(|(t, row)| {
                let ids: Vec<String> = row.keys().cloned().collect();
                match &agents {
                    None => agents = Some(ids),
                    Some(a) if *a != ids => {
                        return Err(SimError::Ragged(format!(
                            "trajectory {tid} at t {} has agents {:?}, expected {:?}",
                            t.0, ids, a
                        )))
                    }
                    _ => {}
                }
                Ok(row.values().cloned().collect())
            })
            .collect::<Result<_, _>>()?;
        let n_frames = positions.len();
        for f in 0..n_frames {
            for (a, vals) in positions[f].iter().enumerate() {
                if has_velocity {
                    data.extend_from_slice(vals);
                    continue;
                }
                data.extend_from_slice(vals);
                if n_frames < 2 {
                    data.extend(std::iter::repeat(0.0).take(layout.spatial));
                    continue;
                }
                let (lo, hi) = if f + 1 < n_frames { (f, f + 1) } else { (f - 1, f) };
                data.extend((0..layout.spatial).map(|c| (positions[hi][a][c] - positions[lo][a][c]) / dt));
            }
        }
    }
    let frames = frames.unwrap_or(0);
    let n_agents = agents.map_or(0, |a| a.len());
    if frames == 0 || n_agents == 0 {
        return Err(SimError::Csv { line: 1, message: "no data rows".into() });
    }
    TrajectoryDataset::new(name, frames, n_agents, state_dim, dt, data)
}

pub fn import_csv(path: &Path, has_velocity: bool, dt: f64) -> Result<TrajectoryDataset, SimError> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("imported");
    import_csv_reader(std::fs::File::open(path)?, name, has_velocity, dt)
}

/// Writes a dataset in the layout [`import_csv`] reads, velocities included.
pub fn export_csv<W: std::io::Write>(ds: &TrajectoryDataset, out: W) -> Result<(), SimError> {
    let spatial = ds.state_dim / 2;
    if spatial > 2 {
        return Err(SimError::Config(format!("csv export supports at most 2 spatial dims, got {spatial}")));
    }
    let axes = &["x", "y"][..spatial];
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(axes.iter().map(|a| format!("p{a}")));
    header.extend(axes.iter().map(|a| format!("v{a}")));
    w.write_record(&header).map_err(csv_io)?;
    for tr in 0..ds.n_traj() {
        for t in 0..ds.frames {
            let frame = ds.frame(tr, t);
            for a in 0..ds.n_agents {
                let mut rec = vec![tr.to_string(), t.to_string(), a.to_string()];
                rec.extend(frame[a * ds.state_dim..(a + 1) * ds.state_dim].iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> SimError {
    SimError::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
