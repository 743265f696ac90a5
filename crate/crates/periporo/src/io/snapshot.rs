//! Legacy ASCII VTK snapshots, the scalar CSV series and the writer thread.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Sender};
use std::thread::JoinHandle;

use crate::error::{Error, Result};
use crate::model::{MaterialPoint, Mat3};

/// Immutable copy of the point fields written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub step: usize,
    pub position: Vec<[f64; 3]>,
    pub pw: Vec<f64>,
    pub sr: Vec<f64>,
    pub porosity: Vec<f64>,
    pub damage: Vec<f64>,
    pub u: Vec<[f64; 3]>,
    pub v: Vec<[f64; 3]>,
    /// xx, yy, zz, yz, xz, xy
    pub sigma_eff: Vec<[f64; 6]>,
    pub interface: Vec<bool>,
}

fn voigt(s: &Mat3) -> [f64; 6] {
    [s[(0, 0)], s[(1, 1)], s[(2, 2)], s[(1, 2)], s[(0, 2)], s[(0, 1)]]
}

impl Snapshot {
    pub fn capture(time: f64, step: usize, points: &[MaterialPoint]) -> Self {
        Snapshot {
            time,
            step,
            position: points.iter().map(|p| p.x_cur.into()).collect(),
            pw: points.iter().map(|p| p.p_w).collect(),
            sr: points.iter().map(|p| p.s_r).collect(),
            porosity: points.iter().map(|p| p.phi).collect(),
            damage: points.iter().map(|p| p.damage).collect(),
            u: points.iter().map(|p| p.u.into()).collect(),
            v: points.iter().map(|p| p.v.into()).collect(),
            sigma_eff: points.iter().map(|p| voigt(&p.sigma_eff)).collect(),
            interface: points.iter().map(|p| p.is_interface).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// Index of the point whose current position is nearest to `x`.
    pub fn nearest(&self, x: [f64; 3]) -> Option<usize> {
        let d2 = |p: &[f64; 3]| (0..3).map(|a| (p[a] - x[a]).powi(2)).sum::<f64>();
        (0..self.len()).min_by(|&a, &b| d2(&self.position[a]).total_cmp(&d2(&self.position[b])))
    }

    /// Values of a named field at point `i`.
    pub fn field(&self, name: &str, i: usize) -> Option<Vec<f64>> {
        Some(match name {
            "pw" | "p_w" => vec![self.pw[i]],
            "sr" | "s_r" => vec![self.sr[i]],
            "porosity" => vec![self.porosity[i]],
            "damage" => vec![self.damage[i]],
            "u" => self.u[i].to_vec(),
            "v" => self.v[i].to_vec(),
            "sigma_eff" => self.sigma_eff[i].to_vec(),
            "interface" => vec![if self.interface[i] { 1.0 } else { 0.0 }],
            _ => return None,
        })
    }

    pub fn to_vtk(&self) -> String {
        let n = self.len();
        let mut s = String::with_capacity(n * 400);
        let f = |s: &mut String, x: f64| write!(s, "{x:.16e}").unwrap();
        let row = |s: &mut String, xs: &[f64]| {
            for (k, x) in xs.iter().enumerate() {
                if k > 0 {
                    s.push(' ');
                }
                f(s, *x);
            }
            s.push('\n');
        };
        s.push_str("# vtk DataFile Version 3.0\n");
        writeln!(s, "periporo snapshot step {}", self.step).unwrap();
        s.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\nFIELD FieldData 1\nTIME 1 1 double\n");
        row(&mut s, &[self.time]);
        writeln!(s, "POINTS {n} double").unwrap();
        for p in &self.position {
            row(&mut s, p);
        }
        writeln!(s, "CELLS {n} {}", 2 * n).unwrap();
        for i in 0..n {
            writeln!(s, "1 {i}").unwrap();
        }
        writeln!(s, "CELL_TYPES {n}").unwrap();
        for _ in 0..n {
            s.push_str("1\n");
        }
        writeln!(s, "POINT_DATA {n}").unwrap();
        for (name, data) in [("pw", &self.pw), ("sr", &self.sr), ("porosity", &self.porosity), ("damage", &self.damage)] {
            writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
            for x in data {
                row(&mut s, &[*x]);
            }
        }
        for (name, data) in [("u", &self.u), ("v", &self.v)] {
            writeln!(s, "VECTORS {name} double").unwrap();
            for x in data {
                row(&mut s, x);
            }
        }
        writeln!(s, "FIELD point_fields 2\nsigma_eff 6 {n} double").unwrap();
        for x in &self.sigma_eff {
            row(&mut s, x);
        }
        writeln!(s, "interface 1 {n} int").unwrap();
        for b in &self.interface {
            s.push_str(if *b { "1\n" } else { "0\n" });
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_vtk()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|message| Error::Snapshot { path: path.to_path_buf(), message })
    }

    /// Parses text produced by [`Snapshot::to_vtk`].
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty file")?;
        if !header.starts_with("# vtk DataFile") {
            return Err("not a legacy VTK file".into());
        }
        let title = lines.next().ok_or("missing title")?;
        let step = title.rsplit(' ').next().and_then(|s| s.parse().ok()).ok_or("title carries no step")?;
        let rest: Vec<&str> = lines.collect();
        let mut tok = rest.iter().flat_map(|l| l.split_whitespace());
        let expect = |want: &str, tok: &mut dyn Iterator<Item = &str>| -> std::result::Result<(), String> {
            match tok.next() {
                Some(t) if t == want => Ok(()),
                Some(t) => Err(format!("expected {want:?}, found {t:?}")),
                None => Err(format!("expected {want:?}, found end of file")),
            }
        };
        fn num<T: std::str::FromStr>(tok: &mut dyn Iterator<Item = &str>) -> std::result::Result<T, String> {
            let t = tok.next().ok_or("unexpected end of file")?;
            t.parse().map_err(|_| format!("bad number {t:?}"))
        }
        for w in ["ASCII", "DATASET", "UNSTRUCTURED_GRID", "FIELD", "FieldData", "1", "TIME", "1", "1", "double"] {
            expect(w, &mut tok)?;
        }
        let time: f64 = num(&mut tok)?;
        expect("POINTS", &mut tok)?;
        let n: usize = num(&mut tok)?;
        expect("double", &mut tok)?;
        let vec3 = |tok: &mut dyn Iterator<Item = &str>| -> std::result::Result<Vec<[f64; 3]>, String> {
            (0..n).map(|_| Ok([num(tok)?, num(tok)?, num(tok)?])).collect()
        };
        let position = vec3(&mut tok)?;
        expect("CELLS", &mut tok)?;
        for _ in 0..2 + 2 * n {
            tok.next().ok_or("truncated cells")?;
        }
        expect("CELL_TYPES", &mut tok)?;
        for _ in 0..1 + n {
            tok.next().ok_or("truncated cell types")?;
        }
        expect("POINT_DATA", &mut tok)?;
        let m: usize = num(&mut tok)?;
        if m != n {
            return Err(format!("POINT_DATA {m} does not match {n} points"));
        }
        let mut scalars = Vec::new();
        for name in ["pw", "sr", "porosity", "damage"] {
            for w in ["SCALARS", name, "double", "1", "LOOKUP_TABLE", "default"] {
                expect(w, &mut tok)?;
            }
            scalars.push((0..n).map(|_| num(&mut tok)).collect::<std::result::Result<Vec<f64>, _>>()?);
        }
        let mut vectors = Vec::new();
        for name in ["u", "v"] {
            for w in ["VECTORS", name, "double"] {
                expect(w, &mut tok)?;
            }
            vectors.push(vec3(&mut tok)?);
        }
        let ns = n.to_string();
        for w in ["FIELD", "point_fields", "2", "sigma_eff", "6", ns.as_str(), "double"] {
            expect(w, &mut tok)?;
        }
        let sigma_eff = (0..n)
            .map(|_| {
                let mut c = [0.0; 6];
                for x in c.iter_mut() {
                    *x = num(&mut tok)?;
                }
                Ok(c)
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        for w in ["interface", "1", ns.as_str(), "int"] {
            expect(w, &mut tok)?;
        }
        let interface = (0..n).map(|_| num::<u8>(&mut tok).map(|b| b != 0)).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut sc = scalars.into_iter();
        let mut vc = vectors.into_iter();
        Ok(Snapshot {
            time,
            step,
            position,
            pw: sc.next().unwrap(),
            sr: sc.next().unwrap(),
            porosity: sc.next().unwrap(),
            damage: sc.next().unwrap(),
            u: vc.next().unwrap(),
            v: vc.next().unwrap(),
            sigma_eff,
            interface,
        })
    }
}

/// One line of the scalar time series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub step: usize,
    pub time: f64,
    pub reactions: Vec<(String, [f64; 3])>,
    pub fluid_mass: f64,
    pub max_damage: f64,
}

impl SeriesRow {
    pub fn header(&self) -> String {
        let mut h = String::from("step,time");
        for (name, _) in &self.reactions {
            for c in ["x", "y", "z"] {
                write!(h, ",reaction_{name}_{c}").unwrap();
            }
        }
        h.push_str(",fluid_mass,max_damage\n");
        h
    }

    pub fn line(&self) -> String {
        let mut s = format!("{},{:.16e}", self.step, self.time);
        for (_, r) in &self.reactions {
            for x in r {
                write!(s, ",{x:.16e}").unwrap();
            }
        }
        writeln!(s, ",{:.16e},{:.16e}", self.fluid_mass, self.max_damage).unwrap();
        s
    }
}

enum Job {
    Snapshot(Box<Snapshot>, PathBuf),
    Row(SeriesRow),
}

/// Output worker: snapshots and series rows are sent over a channel and
/// written in arrival order on a dedicated thread.
pub struct Writer {
    tx: Option<Sender<Job>>,
    handle: Option<JoinHandle<Result<Vec<PathBuf>>>>,
}

impl Writer {
    /// Starts the worker writing into `dir`; the series goes to `series.csv`.
    pub fn spawn(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("series.csv");
        let (tx, rx) = channel::<Job>();
        let handle = std::thread::Builder::new()
            .name("periporo-writer".into())
            .spawn(move || -> Result<Vec<PathBuf>> {
                let mut csv = String::new();
                let mut written = Vec::new();
                for job in rx {
                    match job {
                        Job::Snapshot(s, path) => {
                            s.write(&path)?;
                            written.push(path);
                        }
                        Job::Row(r) => {
                            if csv.is_empty() {
                                csv.push_str(&r.header());
                            }
                            csv.push_str(&r.line());
                        }
                    }
                }
                fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
                written.push(csv_path);
                Ok(written)
            })
            .map_err(|e| Error::io(dir, e))?;
        Ok(Writer { tx: Some(tx), handle: Some(handle) })
    }

    fn send(&self, job: Job) -> Result<()> {
        let tx = self.tx.as_ref().expect("writer already finished");
        tx.send(job).map_err(|_| Error::io("writer", std::io::Error::other("output worker stopped")))
    }

    pub fn snapshot(&self, snapshot: Snapshot, path: PathBuf) -> Result<()> {
        self.send(Job::Snapshot(Box::new(snapshot), path))
    }

    pub fn row(&self, row: SeriesRow) -> Result<()> {
        self.send(Job::Row(row))
    }

    /// Closes the channel and waits for every pending write.
    pub fn finish(mut self) -> Result<Vec<PathBuf>> {
        self.tx.take();
        let h = self.handle.take().expect("writer already finished");
        h.join().map_err(|_| Error::io("writer", std::io::Error::other("output worker panicked")))?
    }
}

impl Drop for Writer {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
