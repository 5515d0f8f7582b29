//! MOTChallenge-style text files, the embedding sidecar, scene manifests
//! and PGM raster directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::geometry::BBox;
use crate::metrics::TrajectorySet;
use crate::motion::{MotionError, RasterSource};
use crate::pipeline::ResultRow;
use crate::raster::Raster;
use crate::simulator::{GroundTruthScene, GtRow};
use crate::FrameId;

pub const GT_FILE: &str = "gt.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const RASTER_DIR: &str = "rasters";
pub const RESULTS_HEADER: &str = "# frame,id,x,y,w,h,conf,-1,-1,-1";

/// One parsed row of a MOT file. Columns past the box are optional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRow {
    pub frame: FrameId,
    pub id: u32,
    pub bbox: BBox<f64>,
    pub conf: f64,
    pub class: f64,
    pub visibility: f64,
}

pub fn read_text(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Data lines with their 1-based line numbers; blank and `#` lines dropped.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, what: &str, s: &str) -> Result<T, HarnessError> {
    s.trim().parse().map_err(|_| HarnessError::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("bad {what} `{}`", s.trim()),
    })
}

pub fn parse_mot(text: &str, path: &Path) -> Result<Vec<MotRow>, HarnessError> {
    let mut rows = Vec::new();
    for (line, l) in data_lines(text) {
        let cols: Vec<&str> = l.split(',').collect();
        if cols.len() < 6 {
            return Err(HarnessError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected at least 6 columns, got {}", cols.len()),
            });
        }
        let num = |i: usize, what: &str, default: f64| match cols.get(i) {
            Some(s) => field::<f64>(path, line, what, s),
            None => Ok(default),
        };
        let frame: FrameId = field(path, line, "frame", cols[0])?;
        if frame == 0 {
            return Err(HarnessError::Parse {
                path: path.to_path_buf(),
                line,
                msg: "frames are numbered from 1".into(),
            });
        }
        let id: u32 = field(path, line, "id", cols[1])?;
        let (x, y, w, h) = (num(2, "x", 0.0)?, num(3, "y", 0.0)?, num(4, "w", 0.0)?, num(5, "h", 0.0)?);
        let bbox = BBox::new(x, y, w, h).map_err(|e| HarnessError::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        rows.push(MotRow {
            frame,
            id,
            bbox,
            conf: num(6, "conf", 1.0)?,
            class: num(7, "class", -1.0)?,
            visibility: num(8, "visibility", 1.0)?,
        });
    }
    Ok(rows)
}

pub fn read_mot(path: &Path) -> Result<Vec<MotRow>, HarnessError> {
    parse_mot(&read_text(path)?, path)
}

fn duplicate(path: &Path, frame: FrameId, id: u32) -> HarnessError {
    HarnessError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("duplicate row for frame {frame}, id {id}"),
    }
}

/// Ground truth for evaluation: rows marked ignore (conf 0) or fully
/// occluded (visibility 0) are dropped.
pub fn load_gt_trajectories(path: &Path) -> Result<TrajectorySet, HarnessError> {
    let mut set = TrajectorySet::new();
    for r in read_mot(path)? {
        if r.conf == 0.0 || r.visibility == 0.0 {
            continue;
        }
        set.insert(r.frame, r.id, r.bbox).map_err(|_| duplicate(path, r.frame, r.id))?;
    }
    Ok(set)
}

pub fn load_result_trajectories(path: &Path) -> Result<TrajectorySet, HarnessError> {
    let mut set = TrajectorySet::new();
    for r in read_mot(path)? {
        set.insert(r.frame, r.id, r.bbox).map_err(|_| duplicate(path, r.frame, r.id))?;
    }
    Ok(set)
}

pub fn format_gt(rows: &[GtRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let b = r.bbox;
        let _ = writeln!(s, "{},{},{},{},{},{},1,1,{}", r.frame, r.id, b.x(), b.y(), b.w(), b.h(), r.visibility);
    }
    s
}

pub fn format_results(rows: &[ResultRow]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in rows {
        let b = r.bbox;
        let _ = writeln!(s, "{},{},{},{},{},{},{},-1,-1,-1", r.frame, r.id, b.x(), b.y(), b.w(), b.h(), r.confidence);
    }
    s
}

/// Sidecar rows `frame,id,v1,...,vD` for every present (frame, identity).
pub fn format_embeddings(scene: &GroundTruthScene) -> String {
    let mut s = String::new();
    for r in scene.gt_rows() {
        if let Some(v) = scene.embedding(r.frame, r.id) {
            let _ = write!(s, "{},{}", r.frame, r.id);
            for x in v {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn parse_embeddings(text: &str, path: &Path) -> Result<BTreeMap<(FrameId, u32), Vec<f64>>, HarnessError> {
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (line, l) in data_lines(text) {
        let cols: Vec<&str> = l.split(',').collect();
        let err = |msg: String| HarnessError::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if cols.len() < 3 {
            return Err(err("expected frame,id,v1,...".into()));
        }
        let frame: FrameId = field(path, line, "frame", cols[0])?;
        let id: u32 = field(path, line, "id", cols[1])?;
        let v = cols[2..]
            .iter()
            .map(|c| field::<f64>(path, line, "component", c))
            .collect::<Result<Vec<_>, _>>()?;
        if *dim.get_or_insert(v.len()) != v.len() {
            return Err(err(format!("dimension {} differs from earlier rows", v.len())));
        }
        if out.insert((frame, id), v).is_some() {
            return Err(err(format!("duplicate embedding for frame {frame}, id {id}")));
        }
    }
    Ok(out)
}

/// Scene-level facts needed to rebuild a scene from its files.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub frames: usize,
    pub frame_w: f64,
    pub frame_h: f64,
    pub seed: u64,
    pub identities: usize,
    pub config_sha256: String,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "# smot scene\nframes={}\nframe_w={}\nframe_h={}\nseed={}\nidentities={}\nconfig_sha256={}\n",
            self.frames, self.frame_w, self.frame_h, self.seed, self.identities, self.config_sha256
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, HarnessError> {
        let mut kv = BTreeMap::new();
        for (line, l) in data_lines(text) {
            let (k, v) = l.split_once('=').ok_or_else(|| HarnessError::Parse {
                path: path.to_path_buf(),
                line,
                msg: "expected key=value".into(),
            })?;
            kv.insert(k.trim(), (line, v.trim()));
        }
        fn get<T: std::str::FromStr>(
            kv: &BTreeMap<&str, (usize, &str)>,
            path: &Path,
            key: &str,
        ) -> Result<T, HarnessError> {
            let &(line, v) = kv.get(key).ok_or_else(|| HarnessError::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("missing `{key}`"),
            })?;
            field(path, line, key, v)
        }
        Ok(Self {
            frames: get(&kv, path, "frames")?,
            frame_w: get(&kv, path, "frame_w")?,
            frame_h: get(&kv, path, "frame_h")?,
            seed: get(&kv, path, "seed")?,
            identities: get(&kv, path, "identities")?,
            config_sha256: get(&kv, path, "config_sha256")?,
        })
    }
}

pub fn raster_path(dir: &Path, frame: FrameId) -> PathBuf {
    dir.join(format!("{frame:06}.pgm"))
}

/// Rebuilds a scene written by `simulate` from its directory.
pub fn load_scene(dir: &Path) -> Result<GroundTruthScene, HarnessError> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest = Manifest::parse(&read_text(&mpath)?, &mpath)?;
    let gpath = dir.join(GT_FILE);
    let rows: Vec<GtRow> = read_mot(&gpath)?
        .into_iter()
        .map(|r| GtRow {
            frame: r.frame,
            id: r.id,
            bbox: r.bbox,
            visibility: r.visibility,
        })
        .collect();
    let epath = dir.join(EMBEDDINGS_FILE);
    let embeddings = if epath.exists() {
        parse_embeddings(&read_text(&epath)?, &epath)?
    } else {
        BTreeMap::new()
    };
    GroundTruthScene::from_rows(manifest.frames, manifest.frame_w, manifest.frame_h, &rows, embeddings, manifest.seed)
        .map_err(|e| HarnessError::Parse {
            path: gpath,
            line: 0,
            msg: e.to_string(),
        })
}

/// Rasters read from `NNNNNN.pgm` files.
pub struct PgmDirectory {
    pub dir: PathBuf,
}

impl RasterSource for PgmDirectory {
    fn raster(&self, frame: FrameId) -> Result<Raster, MotionError> {
        let path = raster_path(&self.dir, frame);
        let unavailable = |reason: String| MotionError::Unavailable { frame, reason };
        let f = fs::File::open(&path).map_err(|e| unavailable(format!("{}: {e}", path.display())))?;
        Raster::read_pgm(std::io::BufReader::new(f)).map_err(|e| unavailable(format!("{}: {e}", path.display())))
    }
}
