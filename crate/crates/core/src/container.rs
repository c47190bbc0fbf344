//! Little-endian binary containers and the CSV point reader.
//!
//! | magic  | body |
//! |--------|------|
//! | `PCB1` | u32 points, u32 extra features, then rows of `3 + F` f32 |
//! | `SVT1` | u32 N, u32 C, 3×u32 grid, N×3 u32 coords, N×C f32 |
//! | `BEV1` | u32 X, u32 Y, u32 C, X×Y×C f32 |
//! | `MLP1` | u32 count, then per tensor: u32 name length, name, u32 rank, rank×u32 dims, f32 data |

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LayerNorm, Linear, Matrix};
use crate::voxelgrid::{BevMap, PointCloud, SparseVoxelTensor};

pub const PCB_MAGIC: &[u8; 4] = b"PCB1";
pub const SVT_MAGIC: &[u8; 4] = b"SVT1";
pub const BEV_MAGIC: &[u8; 4] = b"BEV1";
pub const MLP_MAGIC: &[u8; 4] = b"MLP1";

/// Writes through a temp file in the target directory, then renames over `path`.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Reader that remembers how many bytes it has consumed.
struct Tracked<R> {
    inner: R,
    offset: u64,
    what: &'static str,
}

impl<R: Read> Tracked<R> {
    fn new(inner: R, what: &'static str) -> Self {
        Self {
            inner,
            offset: 0,
            what,
        }
    }

    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::format_at_byte(
                        self.what,
                        self.offset + filled as u64,
                        format!(
                            "unexpected end of file ({} more bytes expected)",
                            buf.len() - filled
                        ),
                    ))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let mut m = [0u8; 4];
        self.bytes(&mut m)?;
        if &m != expect {
            return Err(Error::format_at_byte(
                self.what,
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&m),
                    String::from_utf8_lossy(expect)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        self.bytes(&mut raw)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn at_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::format_at_byte(
                self.what,
                self.offset,
                "trailing bytes after payload",
            )),
        }
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::format_at_byte(self.what, self.offset, msg)
    }
}

fn put_u32(w: &mut dyn Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32s(w: &mut dyn Write, vs: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 4);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn checked_u32(v: usize, what: &str) -> io::Result<u32> {
    u32::try_from(v)
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("{what} exceeds u32")))
}

// ---- point clouds ----

pub fn write_point_cloud(w: &mut dyn Write, cloud: &PointCloud) -> io::Result<()> {
    w.write_all(PCB_MAGIC)?;
    put_u32(w, checked_u32(cloud.len(), "point count")?)?;
    put_u32(w, checked_u32(cloud.extra_features(), "feature count")?)?;
    put_f32s(w, cloud.as_slice())
}

pub fn read_point_cloud_binary<R: Read>(r: R) -> Result<PointCloud> {
    let mut r = Tracked::new(r, "PCB1 point cloud");
    r.magic(PCB_MAGIC)?;
    let n = r.u32()? as usize;
    let f = r.u32()? as usize;
    let data = r.f32s(n * (3 + f))?;
    r.at_end()?;
    PointCloud::new(f, data).map_err(|e| r.fail(e.to_string()))
}

/// One point per line: `x,y,z[,f...]`. Blank lines and `#` comments are skipped;
/// a header line is allowed if it does not parse as numbers.
pub fn read_point_cloud_csv<R: BufRead>(r: R) -> Result<PointCloud> {
    let what = "CSV point cloud";
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: std::result::Result<Vec<f32>, _> =
            line.split(',').map(|s| s.trim().parse::<f32>()).collect();
        let fields = match fields {
            Ok(f) => f,
            Err(_) if width.is_none() && data.is_empty() && i == 0 => continue,
            Err(e) => return Err(Error::format_at_line(what, i + 1, e.to_string())),
        };
        if fields.len() < 3 {
            return Err(Error::format_at_line(what, i + 1, "need at least x,y,z"));
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::format_at_line(
                    what,
                    i + 1,
                    format!("{} fields, earlier rows had {w}", fields.len()),
                ))
            }
            _ => {}
        }
        if fields[..3].iter().any(|v| !v.is_finite()) {
            return Err(Error::format_at_line(what, i + 1, "non-finite coordinate"));
        }
        data.extend(fields);
    }
    PointCloud::new(width.map_or(0, |w| w - 3), data)
}

/// Dispatches on the `PCB1` magic; anything else is read as CSV.
pub fn read_point_cloud_file(path: &Path) -> Result<PointCloud> {
    let mut f = BufReader::new(File::open(path)?);
    let head = f.fill_buf()?;
    if head.starts_with(PCB_MAGIC) {
        read_point_cloud_binary(f)
    } else {
        read_point_cloud_csv(f)
    }
}

// ---- sparse voxel tensors ----

pub fn write_voxel_tensor(w: &mut dyn Write, t: &SparseVoxelTensor) -> io::Result<()> {
    w.write_all(SVT_MAGIC)?;
    put_u32(w, checked_u32(t.len(), "voxel count")?)?;
    put_u32(w, checked_u32(t.channels(), "channel count")?)?;
    for g in t.grid_shape() {
        put_u32(w, g)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 12);
    for c in t.coords() {
        for v in c {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    put_f32s(w, t.features().as_slice())
}

pub fn read_voxel_tensor<R: Read>(r: R) -> Result<SparseVoxelTensor> {
    let mut r = Tracked::new(r, "SVT1 voxel tensor");
    r.magic(SVT_MAGIC)?;
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let grid = [r.u32()?, r.u32()?, r.u32()?];
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push([r.u32()?, r.u32()?, r.u32()?]);
    }
    let feats = r.f32s(n * c)?;
    r.at_end()?;
    SparseVoxelTensor::new(coords, Matrix::from_vec(n, c, feats), grid)
        .map_err(|e| r.fail(e.to_string()))
}

// ---- BEV maps ----

pub fn write_bev(w: &mut dyn Write, map: &BevMap) -> io::Result<()> {
    w.write_all(BEV_MAGIC)?;
    for d in map.shape {
        put_u32(w, checked_u32(d, "BEV dimension")?)?;
    }
    put_f32s(w, &map.data)
}

pub fn read_bev<R: Read>(r: R) -> Result<BevMap> {
    let mut r = Tracked::new(r, "BEV1 map");
    r.magic(BEV_MAGIC)?;
    let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let data = r.f32s(shape.iter().product())?;
    r.at_end()?;
    Ok(BevMap { shape, data })
}

// ---- named tensor store ----

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<u32>,
    pub data: Vec<f32>,
}

/// Named, shape-tagged f32 tensors, serialized in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore {
    tensors: BTreeMap<String, StoredTensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<u32>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<u32>() as usize, data.len());
        self.tensors
            .insert(name.into(), StoredTensor { shape, data });
    }

    pub fn put_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.insert(
            name,
            vec![m.rows() as u32, m.cols() as u32],
            m.as_slice().to_vec(),
        );
    }

    pub fn put_vec(&mut self, name: impl Into<String>, v: &[f32]) {
        self.insert(name, vec![v.len() as u32], v.to_vec());
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    fn fetch(&self, name: &str, shape: &[u32]) -> Result<&StoredTensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor `{name}`")))?;
        if t.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let t = self.fetch(name, &[rows as u32, cols as u32])?;
        Ok(Matrix::from_vec(rows, cols, t.data.clone()))
    }

    pub fn vector(&self, name: &str, len: usize) -> Result<Vec<f32>> {
        Ok(self.fetch(name, &[len as u32])?.data.clone())
    }

    pub fn put_linear(&mut self, prefix: &str, l: &Linear) {
        self.put_matrix(format!("{prefix}.weight"), &l.weight);
        self.put_vec(format!("{prefix}.bias"), &l.bias);
    }

    pub fn linear(&self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.matrix(&format!("{prefix}.weight"), fan_in, fan_out)?,
            bias: self.vector(&format!("{prefix}.bias"), fan_out)?,
        })
    }

    pub fn put_layer_norm(&mut self, prefix: &str, n: &LayerNorm) {
        self.put_vec(format!("{prefix}.gamma"), &n.gamma);
        self.put_vec(format!("{prefix}.beta"), &n.beta);
    }

    pub fn layer_norm(&self, prefix: &str, width: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.vector(&format!("{prefix}.gamma"), width)?,
            beta: self.vector(&format!("{prefix}.beta"), width)?,
            eps: LayerNorm::DEFAULT_EPS,
        })
    }

    pub fn write(&self, w: &mut dyn Write) -> io::Result<()> {
        w.write_all(MLP_MAGIC)?;
        put_u32(w, checked_u32(self.tensors.len(), "tensor count")?)?;
        for (name, t) in &self.tensors {
            put_u32(w, checked_u32(name.len(), "name length")?)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, checked_u32(t.shape.len(), "rank")?)?;
            for &d in &t.shape {
                put_u32(w, d)?;
            }
            put_f32s(w, &t.data)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = Tracked::new(r, "MLP1 tensor container");
        r.magic(MLP_MAGIC)?;
        let count = r.u32()?;
        let mut store = TensorStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let mut name = vec![0u8; len];
            r.bytes(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| r.fail("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()?);
            }
            let n = shape.iter().map(|&d| d as usize).product();
            let data = r.f32s(n)?;
            store.insert(name, shape, data);
        }
        r.at_end()?;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svt_round_trip() {
        let t = SparseVoxelTensor::new(
            vec![[1, 2, 3], [0, 0, 0]],
            Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.5, 0.0]),
            [4, 4, 4],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_voxel_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"SVT1");
        assert_eq!(buf.len(), 4 + 4 + 4 + 12 + 2 * 12 + 4 * 4);
        assert_eq!(read_voxel_tensor(&buf[..]).unwrap(), t);
    }

    #[test]
    fn truncated_svt_names_offset() {
        let t = SparseVoxelTensor::new(vec![[1, 2, 3]], Matrix::zeros(1, 1), [4, 4, 4]).unwrap();
        let mut buf = Vec::new();
        write_voxel_tensor(&mut buf, &t).unwrap();
        buf.truncate(30);
        let msg = read_voxel_tensor(&buf[..]).unwrap_err().to_string();
        assert!(msg.contains("byte offset 30"), "{msg}");
    }

    #[test]
    fn svt_rejects_duplicates() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SVT1");
        for v in [2u32, 0, 4, 4, 4, 1, 1, 1, 1, 1, 1] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        assert!(read_voxel_tensor(&buf[..]).is_err());
    }

    #[test]
    fn pcb_round_trip_and_bad_magic() {
        let cloud = PointCloud::new(1, vec![1.0, 2.0, 3.0, 0.5]).unwrap();
        let mut buf = Vec::new();
        write_point_cloud(&mut buf, &cloud).unwrap();
        assert_eq!(read_point_cloud_binary(&buf[..]).unwrap(), cloud);
        buf[0] = b'X';
        assert!(read_point_cloud_binary(&buf[..]).is_err());
    }

    #[test]
    fn csv_points() {
        let text = "x,y,z,i\n1,2,3,4\n\n# comment\n5,6,7,8\n";
        let cloud = read_point_cloud_csv(text.as_bytes()).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.extra_features(), 1);
        let err = read_point_cloud_csv("1,2,3\n4,5\n".as_bytes())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = read_point_cloud_csv("1,2,3\n4,five,6\n".as_bytes())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn tensor_store_round_trip() {
        let mut s = TensorStore::new();
        s.put_matrix(
            "a.w",
            &Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        );
        s.put_vec("a.b", &[7.0, 8.0, 9.0]);
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        let back = TensorStore::read(&buf[..]).unwrap();
        assert_eq!(back, s);
        assert!(back.matrix("a.w", 3, 2).is_err());
        assert!(back.vector("missing", 1).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        write_atomic(&path, |w| w.write_all(b"one")).unwrap();
        write_atomic(&path, |w| w.write_all(b"two")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
