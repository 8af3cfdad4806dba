//! Labelled flow-pair records built from probe captures, with NDJSON
//! import/export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Coord, Mesh};
use crate::probe::{Direction, IfdArray, ProbeSet};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObfMeta {
    pub chaff: bool,
    pub delay: bool,
    pub pc: f64,
    pub pd: f64,
}

/// Outbound IFDs at `src` paired with inbound IFDs at `dst`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowPairRecord {
    pub pair_id: u64,
    pub mesh: Mesh,
    pub p: f64,
    pub tir: f64,
    pub src: Coord,
    pub dst: Coord,
    pub label: u8,
    pub valid_out: usize,
    pub valid_in: usize,
    pub ifd_out: Vec<u64>,
    pub ifd_in: Vec<u64>,
    pub obf: ObfMeta,
    pub seed: u64,
}

/// Run-level fields shared by every record of one simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordMeta {
    pub mesh: Mesh,
    pub p: f64,
    pub tir: f64,
    pub obf: ObfMeta,
    pub seed: u64,
}

impl FlowPairRecord {
    pub fn new(meta: &RecordMeta, src: Coord, dst: Coord, label: u8, out: IfdArray, inn: IfdArray) -> Self {
        FlowPairRecord {
            pair_id: 0,
            mesh: meta.mesh,
            p: meta.p,
            tir: meta.tir,
            src,
            dst,
            label,
            valid_out: out.valid_len,
            valid_in: inn.valid_len,
            ifd_out: out.values,
            ifd_in: inn.values,
            obf: meta.obf,
            seed: meta.seed,
        }
    }

    pub fn ifd_out(&self) -> IfdArray {
        IfdArray {
            values: self.ifd_out.clone(),
            valid_len: self.valid_out,
        }
    }

    pub fn ifd_in(&self) -> IfdArray {
        IfdArray {
            values: self.ifd_in.clone(),
            valid_len: self.valid_in,
        }
    }

    pub fn l(&self) -> usize {
        self.ifd_out.len()
    }

    fn check(&self, l: Option<usize>) -> std::result::Result<(), String> {
        let len = self.ifd_out.len();
        if self.ifd_in.len() != len {
            return Err(format!(
                "ifd_out has {len} entries but ifd_in has {}",
                self.ifd_in.len()
            ));
        }
        if let Some(l) = l {
            if len != l {
                return Err(format!("IFD length {len} does not match l={l}"));
            }
        }
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        for (name, v, valid) in [
            ("ifd_out", &self.ifd_out, self.valid_out),
            ("ifd_in", &self.ifd_in, self.valid_in),
        ] {
            if valid > len {
                return Err(format!("{name} valid length {valid} exceeds {len}"));
            }
            if v[valid..].iter().any(|&x| x != 0) {
                return Err(format!("{name} has non-zero padding"));
            }
        }
        Ok(())
    }
}

/// One labelled positive for `pair` plus up to `negatives` uncorrelated
/// pairs drawn without replacement from those with traffic on both ends.
/// Returns nothing when the correlated pair saw no traffic.
pub fn assemble_records<R: Rng + ?Sized>(
    probes: &ProbeSet,
    meta: &RecordMeta,
    pair: (Coord, Coord),
    l: usize,
    negatives: usize,
    rng: &mut R,
) -> Vec<FlowPairRecord> {
    let mesh = meta.mesh;
    let out = |c: Coord| probes.ifd(Direction::Outbound, mesh.node_id(c), l);
    let inn = |c: Coord| probes.ifd(Direction::Inbound, mesh.node_id(c), l);
    let (s, d) = pair;
    let (so, di) = (out(s), inn(d));
    if so.valid_len == 0 || di.valid_len == 0 {
        log::warn!("correlated pair {s}->{d} carried no flits; run skipped");
        return Vec::new();
    }
    let mut records = vec![FlowPairRecord::new(meta, s, d, 1, so, di)];
    if negatives == 0 {
        return records;
    }
    let busy_out: Vec<bool> = mesh
        .coords()
        .map(|c| probes.cycles(Direction::Outbound, mesh.node_id(c)).len() >= 2)
        .collect();
    let busy_in: Vec<bool> = mesh
        .coords()
        .map(|c| probes.cycles(Direction::Inbound, mesh.node_id(c)).len() >= 2)
        .collect();
    let candidates: Vec<(Coord, Coord)> = mesh
        .coords()
        .flat_map(|a| mesh.coords().map(move |b| (a, b)))
        .filter(|&(a, b)| a != b && (a, b) != pair && busy_out[mesh.node_id(a)] && busy_in[mesh.node_id(b)])
        .collect();
    for &(a, b) in candidates.choose_multiple(rng, negatives) {
        records.push(FlowPairRecord::new(meta, a, b, 0, out(a), inn(b)));
    }
    records
}

/// Seeded 2:1 train/test split, stratified by label. Errors unless both
/// labels are present.
pub fn split_train_test(records: &[FlowPairRecord], seed: u64) -> Result<(Vec<FlowPairRecord>, Vec<FlowPairRecord>)> {
    let mut rng = stream_rng(seed, Stream::Split, 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for label in [0u8, 1] {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == label).collect();
        if idx.is_empty() {
            return Err(Error::Data(format!(
                "degenerate dataset: no records with label {label}"
            )));
        }
        idx.shuffle(&mut rng);
        // nearest rounding keeps the overall ratio at 2:1
        let cut = (idx.len() * 2 + 1) / 3;
        train.extend(idx[..cut].iter().map(|&i| records[i].clone()));
        test.extend(idx[cut..].iter().map(|&i| records[i].clone()));
    }
    if test.is_empty() {
        return Err(Error::Data("dataset too small for a test split".into()));
    }
    Ok((train, test))
}

/// Write atomically: a temporary file in the target directory is renamed
/// into place once complete.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_ndjson<W: Write + ?Sized>(w: &mut W, records: &[FlowPairRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn export_ndjson(records: &[FlowPairRecord], path: &Path) -> Result<()> {
    write_atomic(path, |w| write_ndjson(w, records))
}

/// Parse NDJSON records; with `l` set every IFD array must have that length.
pub fn read_ndjson<R: BufRead>(r: R, l: Option<usize>) -> Result<Vec<FlowPairRecord>> {
    let mut out = Vec::new();
    let mut file_l = l;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FlowPairRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        rec.check(file_l)
            .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        file_l = Some(rec.l());
        out.push(rec);
    }
    Ok(out)
}

pub fn load_ndjson(path: &Path, l: Option<usize>) -> Result<Vec<FlowPairRecord>> {
    let f = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_ndjson(BufReader::new(f), l)
}
