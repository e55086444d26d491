//! Versioned little-endian container for cached matches, control maps and
//! feature dumps.
//!
//! Layout: magic `SFUS`, `u32` format version, `u32` kind, then a
//! kind-specific header and payload. Integers are 32-bit, reals are `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::correspondence::{CorrespondenceMap, PixelMatch};
use crate::error::{Error, Result};
use crate::feature::{FeatureKind, FeatureMap, Stream};
use crate::geometry::{Coord, Grid, ImageId};

pub const MAGIC: &[u8; 4] = b"SFUS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
enum Kind {
    Matches = 1,
    Control = 2,
    Features = 3,
}

/// Header fields stored alongside a match map.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchCacheHeader {
    pub backend: String,
    pub threshold: f32,
}

/// A cached depth/edge pair for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRecord {
    pub image: ImageId,
    pub provenance: String,
    pub depth: Array2<f32>,
    pub edge: Array2<f32>,
}

/// One dumped feature map with its tap identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub owner: ImageId,
    pub block: usize,
    pub stream: Stream,
    pub kind: FeatureKind,
    pub timestep: usize,
    pub map: FeatureMap,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let n = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn write_header(w: &mut impl Write, kind: Kind) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(kind as u32)
}

fn read_header(r: &mut impl Read, expected: Kind, path: &Path) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let kind = r.read_u32::<LE>()?;
    if kind != expected as u32 {
        return Err(Error::format(path, format!("expected kind {}, found {kind}", expected as u32)));
    }
    Ok(())
}

pub fn encode_matches(w: &mut impl Write, map: &CorrespondenceMap, header: &MatchCacheHeader) -> std::io::Result<()> {
    write_header(w, Kind::Matches)?;
    w.write_u32::<LE>(map.pair.0 as u32)?;
    w.write_u32::<LE>(map.pair.1 as u32)?;
    w.write_u32::<LE>(map.resolution.rows)?;
    w.write_u32::<LE>(map.resolution.cols)?;
    write_str(w, &header.backend)?;
    w.write_f32::<LE>(header.threshold)?;
    w.write_u32::<LE>(map.len() as u32)?;
    for m in map.iter() {
        w.write_i32::<LE>(m.src.row as i32)?;
        w.write_i32::<LE>(m.src.col as i32)?;
        w.write_i32::<LE>(m.dst.row as i32)?;
        w.write_i32::<LE>(m.dst.col as i32)?;
        w.write_f32::<LE>(m.confidence)?;
    }
    Ok(())
}

pub fn decode_matches(r: &mut impl Read, path: &Path) -> Result<(CorrespondenceMap, MatchCacheHeader)> {
    read_header(r, Kind::Matches, path)?;
    let i = r.read_u32::<LE>()? as ImageId;
    let j = r.read_u32::<LE>()? as ImageId;
    let grid = Grid::new(r.read_u32::<LE>()?, r.read_u32::<LE>()?);
    let backend = read_str(r)?;
    let threshold = r.read_f32::<LE>()?;
    let count = r.read_u32::<LE>()?;
    let mut map = CorrespondenceMap::empty((i, j), grid);
    for _ in 0..count {
        let mut coord = || -> Result<u32> {
            let v = r.read_i32::<LE>()?;
            u32::try_from(v).map_err(|_| Error::format(path, format!("negative coordinate {v}")))
        };
        let src = Coord::new(coord()?, coord()?);
        let dst = Coord::new(coord()?, coord()?);
        let confidence = r.read_f32::<LE>()?;
        map.insert(PixelMatch { src, dst, confidence })
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok((map, MatchCacheHeader { backend, threshold }))
}

pub fn write_matches(path: &Path, map: &CorrespondenceMap, header: &MatchCacheHeader) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_matches(&mut w, map, header)?;
    w.flush()?;
    Ok(())
}

pub fn read_matches(path: &Path) -> Result<(CorrespondenceMap, MatchCacheHeader)> {
    let mut r = BufReader::new(File::open(path)?);
    decode_matches(&mut r, path)
}

/// File name used for the ordered pair `(i, j)` inside a cache directory.
pub fn match_file_name(i: ImageId, j: ImageId) -> String {
    format!("match_{i:03}_{j:03}.sfc")
}

pub fn write_control(path: &Path, rec: &ControlRecord) -> Result<()> {
    if rec.depth.dim() != rec.edge.dim() {
        return Err(Error::arg("depth and edge maps differ in shape"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, Kind::Control)?;
    let (rows, cols) = rec.depth.dim();
    w.write_u32::<LE>(rec.image as u32)?;
    w.write_u32::<LE>(rows as u32)?;
    w.write_u32::<LE>(cols as u32)?;
    write_str(&mut w, &rec.provenance)?;
    for v in rec.depth.iter().chain(rec.edge.iter()) {
        w.write_f32::<LE>(*v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_control(path: &Path) -> Result<ControlRecord> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, Kind::Control, path)?;
    let image = r.read_u32::<LE>()? as ImageId;
    let rows = r.read_u32::<LE>()? as usize;
    let cols = r.read_u32::<LE>()? as usize;
    let provenance = read_str(&mut r)?;
    let mut read_plane = || -> Result<Array2<f32>> {
        let mut v = vec![0f32; rows * cols];
        r.read_f32_into::<LE>(&mut v)?;
        Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::format(path, e.to_string()))
    };
    let depth = read_plane()?;
    let edge = read_plane()?;
    Ok(ControlRecord {
        image,
        provenance,
        depth,
        edge,
    })
}

pub fn write_features(path: &Path, rec: &FeatureRecord) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, Kind::Features)?;
    w.write_u32::<LE>(rec.owner as u32)?;
    w.write_u32::<LE>(rec.block as u32)?;
    w.write_u8(match rec.stream {
        Stream::Double => 0,
        Stream::Single => 1,
    })?;
    w.write_u8(match rec.kind {
        FeatureKind::Key => 0,
        FeatureKind::Value => 1,
    })?;
    w.write_u32::<LE>(rec.timestep as u32)?;
    let (rows, cols, dim) = rec.map.data.dim();
    w.write_u32::<LE>(rows as u32)?;
    w.write_u32::<LE>(cols as u32)?;
    w.write_u32::<LE>(dim as u32)?;
    for v in rec.map.data.iter() {
        w.write_f32::<LE>(*v as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureRecord> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, Kind::Features, path)?;
    let owner = r.read_u32::<LE>()? as ImageId;
    let block = r.read_u32::<LE>()? as usize;
    let stream = match r.read_u8()? {
        0 => Stream::Double,
        1 => Stream::Single,
        s => return Err(Error::format(path, format!("unknown stream tag {s}"))),
    };
    let kind = match r.read_u8()? {
        0 => FeatureKind::Key,
        1 => FeatureKind::Value,
        k => return Err(Error::format(path, format!("unknown feature kind tag {k}"))),
    };
    let timestep = r.read_u32::<LE>()? as usize;
    let rows = r.read_u32::<LE>()? as usize;
    let cols = r.read_u32::<LE>()? as usize;
    let dim = r.read_u32::<LE>()? as usize;
    let mut v = vec![0f32; rows * cols * dim];
    r.read_f32_into::<LE>(&mut v)?;
    let data = Array3::from_shape_vec((rows, cols, dim), v.into_iter().map(f64::from).collect())
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(FeatureRecord {
        owner,
        block,
        stream,
        kind,
        timestep,
        map: FeatureMap::new(data),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn match_records_are_little_endian_with_fixed_layout() {
        let mut map = CorrespondenceMap::empty((2, 5), Grid::new(4, 4));
        map.insert(PixelMatch { src: Coord::new(1, 2), dst: Coord::new(3, 0), confidence: 0.5 }).unwrap();
        let mut buf = Vec::new();
        let header = MatchCacheHeader { backend: "ab".into(), threshold: 0.05 };
        encode_matches(&mut buf, &map, &header).unwrap();
        assert_eq!(&buf[..4], b"SFUS");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &5u32.to_le_bytes());
        // rows, cols, name length + "ab", threshold, count, then one 20-byte record
        assert_eq!(buf.len(), 20 + 8 + 4 + 2 + 4 + 4 + 20);
        let rec = &buf[buf.len() - 20..];
        assert_eq!(&rec[0..4], &1i32.to_le_bytes());
        assert_eq!(&rec[16..20], &0.5f32.to_le_bytes());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let map = CorrespondenceMap::empty((0, 1), Grid::new(2, 2));
        let mut buf = Vec::new();
        encode_matches(&mut buf, &map, &MatchCacheHeader { backend: "x".into(), threshold: 0.1 }).unwrap();
        buf[4] = 9;
        let err = decode_matches(&mut buf.as_slice(), Path::new("m.sfc")).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    proptest! {
        #[test]
        fn match_cache_round_trips(raw in prop::collection::vec((0u32..16, 0u32..16, 0u32..16, 0u32..16, 0.0f32..=1.0), 0..50)) {
            let map = CorrespondenceMap::from_matches((0, 3), Grid::new(16, 16),
                raw.into_iter().map(|(a, b, c, d, conf)| PixelMatch { src: Coord::new(a, b), dst: Coord::new(c, d), confidence: conf })).unwrap();
            let header = MatchCacheHeader { backend: "patch-ncc".into(), threshold: 0.05 };
            let mut buf = Vec::new();
            encode_matches(&mut buf, &map, &header).unwrap();
            let (back, h) = decode_matches(&mut buf.as_slice(), Path::new("m")).unwrap();
            prop_assert_eq!(back, map);
            prop_assert_eq!(h, header);
        }
    }

    #[test]
    fn control_and_feature_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = ControlRecord {
            image: 3,
            provenance: "luminance-depth+sobel".into(),
            depth: Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f32 / 12.0),
            edge: Array2::from_elem((3, 4), 0.25),
        };
        let p = dir.path().join("c.sfc");
        write_control(&p, &rec).unwrap();
        assert_eq!(read_control(&p).unwrap(), rec);

        let f = FeatureRecord {
            owner: 1,
            block: 4,
            stream: Stream::Single,
            kind: FeatureKind::Value,
            timestep: 17,
            map: FeatureMap::new(Array3::from_shape_fn((2, 3, 2), |(a, b, c)| (a + b + c) as f64 * 0.5)),
        };
        let p = dir.path().join("f.sfc");
        write_features(&p, &f).unwrap();
        assert_eq!(read_features(&p).unwrap(), f);
        assert!(read_control(&p).is_err());
    }
}
