//! Binary dataset container for instances, optional best-known solutions and
//! per-instance objective histories.
//!
//! Layout (little endian):
//! ```text
//! magic    8 bytes "NCODATA\0"
//! version  u32
//! kind     u8 (0 = tsp, 1 = cvrp)
//! episode  u64
//! count    u64
//! record*:
//!   tsp:   n u64, n*(x f64, y f64)
//!   cvrp:  n u64, depot (x, y), n*(x, y), n*demand u32, capacity u32
//!   solution flag u8; when 1: n*u32 order, cvrp only: n*u8 via-depot flags
//!   history length u64, values f64
//! ```
//! Floats are stored by bit pattern so a load reproduces a save exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CvrpInstance, CvrpSolution, Instance, InstanceError, Point, ProblemKind, Solution, TspInstance, TspTour};

pub const DATASET_MAGIC: &[u8; 8] = b"NCODATA\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub instance: Instance,
    pub solution: Option<Solution>,
    /// Objective of the stored solution after each update, oldest first.
    pub history: Vec<f64>,
}

impl Record {
    pub fn new(instance: Instance) -> Self {
        Self { instance, solution: None, history: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: ProblemKind,
    pub episode: u64,
    pub records: Vec<Record>,
}

fn derr(msg: impl Into<String>) -> InstanceError {
    InstanceError::Dataset(msg.into())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], InstanceError> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|_| derr("truncated file"))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8, InstanceError> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, InstanceError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64, InstanceError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64, InstanceError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn point(&mut self) -> Result<Point, InstanceError> {
        Ok([self.f64()?, self.f64()?])
    }
    fn len(&mut self) -> Result<usize, InstanceError> {
        let n = self.u64()?;
        if n > 1 << 32 {
            return Err(derr(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }
}

fn put_point<W: Write>(w: &mut W, p: Point) -> std::io::Result<()> {
    w.write_all(&p[0].to_le_bytes())?;
    w.write_all(&p[1].to_le_bytes())
}

impl Dataset {
    pub fn new(kind: ProblemKind) -> Self {
        Self { kind, episode: 0, records: Vec::new() }
    }

    pub fn from_instances(kind: ProblemKind, instances: Vec<Instance>) -> Self {
        Self { kind, episode: 0, records: instances.into_iter().map(Record::new).collect() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), InstanceError> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&[match self.kind {
            ProblemKind::Tsp => 0,
            ProblemKind::Cvrp => 1,
        }])?;
        w.write_all(&self.episode.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for (i, rec) in self.records.iter().enumerate() {
            if rec.instance.kind() != self.kind {
                return Err(derr(format!("record {i} is {} in a {} dataset", rec.instance.kind(), self.kind)));
            }
            match &rec.instance {
                Instance::Tsp(t) => {
                    w.write_all(&(t.n() as u64).to_le_bytes())?;
                    for p in &t.coords {
                        put_point(w, *p)?;
                    }
                }
                Instance::Cvrp(c) => {
                    w.write_all(&(c.n() as u64).to_le_bytes())?;
                    put_point(w, c.depot)?;
                    for p in &c.customers {
                        put_point(w, *p)?;
                    }
                    for d in &c.demands {
                        w.write_all(&d.to_le_bytes())?;
                    }
                    w.write_all(&c.capacity.to_le_bytes())?;
                }
            }
            match &rec.solution {
                None => w.write_all(&[0])?,
                Some(sol) => {
                    if sol.kind() != self.kind || sol.order().len() != rec.instance.n() {
                        return Err(derr(format!("record {i}: solution does not match its instance")));
                    }
                    w.write_all(&[1])?;
                    for &v in sol.order() {
                        w.write_all(&(v as u32).to_le_bytes())?;
                    }
                    if let Solution::Cvrp(c) = sol {
                        let flags: Vec<u8> = c.via_depot.iter().map(|&f| f as u8).collect();
                        w.write_all(&flags)?;
                    }
                }
            }
            w.write_all(&(rec.history.len() as u64).to_le_bytes())?;
            for h in &rec.history {
                w.write_all(&h.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, InstanceError> {
        let mut r = Reader { inner: r };
        let magic = r.bytes::<8>()?;
        if &magic != DATASET_MAGIC {
            return Err(InstanceError::VersionMismatch {
                found: format!("header {:?}", String::from_utf8_lossy(&magic)),
                expected: DATASET_VERSION,
            });
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(InstanceError::VersionMismatch { found: version.to_string(), expected: DATASET_VERSION });
        }
        let kind = match r.u8()? {
            0 => ProblemKind::Tsp,
            1 => ProblemKind::Cvrp,
            k => return Err(derr(format!("unknown problem kind tag {k}"))),
        };
        let episode = r.u64()?;
        let count = r.len()?;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let n = r.len()?;
            let instance = match kind {
                ProblemKind::Tsp => {
                    let coords = (0..n).map(|_| r.point()).collect::<Result<Vec<_>, _>>()?;
                    Instance::Tsp(TspInstance::new(coords)?)
                }
                ProblemKind::Cvrp => {
                    let depot = r.point()?;
                    let customers = (0..n).map(|_| r.point()).collect::<Result<Vec<_>, _>>()?;
                    let demands = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
                    let capacity = r.u32()?;
                    Instance::Cvrp(CvrpInstance::new(depot, customers, demands, capacity)?)
                }
            };
            let solution = match r.u8()? {
                0 => None,
                1 => {
                    let order = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
                    Some(match kind {
                        ProblemKind::Tsp => Solution::Tsp(TspTour::new(order)),
                        ProblemKind::Cvrp => {
                            let flags = (0..n).map(|_| r.u8().map(|f| f != 0)).collect::<Result<Vec<_>, _>>()?;
                            Solution::Cvrp(CvrpSolution::new(order, flags))
                        }
                    })
                }
                f => return Err(derr(format!("record {i}: bad solution flag {f}"))),
            };
            let hlen = r.len()?;
            let history = (0..hlen).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            records.push(Record { instance, solution, history });
        }
        Ok(Self { kind, episode, records })
    }

    /// Writes to a temporary sibling and renames, so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), InstanceError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, InstanceError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate_cvrp, generate_tsp, objective};

    #[test]
    fn tsp_round_trip_is_exact() {
        let insts = (0..100).map(|s| Instance::Tsp(generate_tsp(200, s).unwrap())).collect();
        let mut ds = Dataset::from_instances(ProblemKind::Tsp, insts);
        ds.episode = 3;
        ds.records[4].solution = Some(Solution::Tsp(TspTour::new((0..200).rev().collect())));
        ds.records[4].history = vec![12.5, 11.25];
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let a = objective(&ds.records[4].instance, ds.records[4].solution.as_ref().unwrap()).unwrap();
        let b = objective(&back.records[4].instance, back.records[4].solution.as_ref().unwrap()).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn cvrp_round_trip_is_exact() {
        let inst = generate_cvrp(10, 20, 5).unwrap();
        let sol = CvrpSolution::from_routes(&(0..10).map(|i| vec![i]).collect::<Vec<_>>());
        let ds = Dataset {
            kind: ProblemKind::Cvrp,
            episode: 0,
            records: vec![Record { instance: Instance::Cvrp(inst), solution: Some(Solution::Cvrp(sol)), history: vec![] }],
        };
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn corrupted_header_and_truncation() {
        let ds = Dataset::from_instances(ProblemKind::Tsp, vec![Instance::Tsp(generate_tsp(5, 1).unwrap())]);
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[3] ^= 0xff;
        assert!(matches!(Dataset::read_from(bad.as_slice()), Err(InstanceError::VersionMismatch { .. })));
        let mut ver = buf.clone();
        ver[8] = 7;
        assert!(matches!(Dataset::read_from(ver.as_slice()), Err(InstanceError::VersionMismatch { .. })));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(Dataset::read_from(cut), Err(InstanceError::Dataset(_))));
    }

    #[test]
    fn mixed_kinds_are_rejected() {
        let mut ds = Dataset::new(ProblemKind::Tsp);
        ds.records.push(Record::new(Instance::Cvrp(generate_cvrp(5, 10, 0).unwrap())));
        assert!(ds.write_to(&mut Vec::new()).is_err());
    }
}
