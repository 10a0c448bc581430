//! Binary dataset archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "FBTDATA\0"
//! version    u32      1
//! n_samples  u64
//! rank       u32      3
//! dims       u32 × rank   (channels, height, width)
//! n_classes  u32
//! sample*    center_id u32, label i32 (−1 for pseudo images),
//!            pixels f64 × product(dims)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{CenterDataset, PseudoSample, Sample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"FBTDATA\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub center_id: u32,
    /// `None` for pseudo images.
    pub label: Option<usize>,
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub dims: [usize; 3],
    pub n_classes: usize,
    pub records: Vec<Record>,
}

fn dims_of(t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        &[c, h, w] => Ok([c, h, w]),
        other => Err(Error::contract(format!("archive images must be [C, H, W], got {other:?}"))),
    }
}

impl Archive {
    pub fn from_dataset(ds: &CenterDataset) -> Result<Self> {
        let dims = ds
            .samples
            .first()
            .map(|s| dims_of(&s.image))
            .transpose()?
            .unwrap_or([3, 1, 1]);
        Ok(Archive {
            dims,
            n_classes: ds.n_classes,
            records: ds
                .samples
                .iter()
                .map(|s| Record {
                    center_id: s.center_id,
                    label: Some(s.label),
                    image: s.image.clone(),
                })
                .collect(),
        })
    }

    pub fn from_pseudo(samples: &[PseudoSample], n_classes: usize) -> Result<Self> {
        let dims = samples
            .first()
            .map(|s| dims_of(&s.image))
            .transpose()?
            .unwrap_or([3, 1, 1]);
        Ok(Archive {
            dims,
            n_classes,
            records: samples
                .iter()
                .map(|s| Record {
                    center_id: s.center_id,
                    label: None,
                    image: s.image.clone(),
                })
                .collect(),
        })
    }

    /// Labelled records as a single-center dataset.
    pub fn to_dataset(&self) -> Result<CenterDataset> {
        let center_id = self.records.first().map_or(0, |r| r.center_id);
        let samples = self
            .records
            .iter()
            .map(|r| match r.label {
                Some(label) if r.center_id == center_id => Ok(Sample {
                    image: r.image.clone(),
                    label,
                    center_id,
                }),
                Some(_) => Err(format_err("dataset archive mixes centers")),
                None => Err(format_err("dataset archive contains unlabelled records")),
            })
            .collect::<Result<_>>()?;
        Ok(CenterDataset {
            center_id,
            n_classes: self.n_classes,
            samples,
        })
    }

    pub fn to_pseudo(&self) -> Result<Vec<PseudoSample>> {
        self.records
            .iter()
            .map(|r| match r.label {
                None => Ok(PseudoSample {
                    image: r.image.clone(),
                    center_id: r.center_id,
                }),
                Some(_) => Err(format_err("pseudo archive contains labelled records")),
            })
            .collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&3u32.to_le_bytes())?;
        for d in self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.n_classes as u32).to_le_bytes())?;
        for r in &self.records {
            if r.image.shape() != self.dims {
                return Err(Error::contract(format!(
                    "record image {:?} does not match archive dims {:?}",
                    r.image.shape(),
                    self.dims
                )));
            }
            let label = match r.label {
                Some(l) => i32::try_from(l)
                    .map_err(|_| Error::contract(format!("label {l} does not fit in i32")))?,
                None => -1,
            };
            w.write_all(&r.center_id.to_le_bytes())?;
            w.write_all(&label.to_le_bytes())?;
            for v in r.image.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let rank = u32::from_le_bytes(read_array(&mut r)?);
        if rank != 3 {
            return Err(format_err(format!("expected rank 3, got {rank}")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = u32::from_le_bytes(read_array(&mut r)?) as usize;
        }
        if dims.contains(&0) {
            return Err(format_err("zero image dimension"));
        }
        let n_classes = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let len: usize = dims.iter().product();
        let mut records = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let center_id = u32::from_le_bytes(read_array(&mut r)?);
            let label = i32::from_le_bytes(read_array(&mut r)?);
            let label = match label {
                -1 => None,
                l if l >= 0 && (l as usize) < n_classes.max(1) => Some(l as usize),
                l => return Err(format_err(format!("label {l} outside [0, {n_classes})"))),
            };
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(read_array(&mut r)?));
            }
            records.push(Record {
                center_id,
                label,
                image: Tensor::from_parts(dims.to_vec(), data),
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(format_err("trailing bytes after last record"));
        }
        Ok(Archive {
            dims,
            n_classes,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Archive::read(io::Cursor::new(fs::read(path)?))
    }
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset archive",
        detail: detail.into(),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            format_err("unexpected end of data")
        } else {
            Error::Io(e)
        }
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}
