//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MOEXCKPT"
//! version    u32      1
//! meta_len   u32      length of the UTF-8 metadata that follows
//! meta       bytes    free-form JSON (network configuration)
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   role     u8       0 conv weight, 1 bn gamma, 2 bn beta, 3 fc weight,
//!                     4 fc bias, 5 running mean, 6 running var
//!   updates  u64      running-statistics update count (0 for parameters)
//!   dims     4 x u64  (n, c, h, w)
//!   data     n*c*h*w x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ParamRole, Params, RunningStats};
use crate::tensor::{Real, Shape4, Tensor4};

pub const MAGIC: &[u8; 8] = b"MOEXCKPT";
pub const VERSION: u32 = 1;

const RUNNING_MEAN: u8 = 5;
const RUNNING_VAR: u8 = 6;

fn role_code(r: ParamRole) -> u8 {
    match r {
        ParamRole::ConvWeight => 0,
        ParamRole::BnGamma => 1,
        ParamRole::BnBeta => 2,
        ParamRole::FcWeight => 3,
        ParamRole::FcBias => 4,
    }
}

fn role_from(code: u8) -> Result<ParamRole> {
    Ok(match code {
        0 => ParamRole::ConvWeight,
        1 => ParamRole::BnGamma,
        2 => ParamRole::BnBeta,
        3 => ParamRole::FcWeight,
        4 => ParamRole::FcBias,
        _ => return Err(Error::Checkpoint(format!("unknown tensor role {code}"))),
    })
}

fn put_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_tensor(out: &mut impl Write, name: &str, role: u8, updates: u64, shape: Shape4, data: impl Iterator<Item = f64>) -> Result<()> {
    put_u32(out, name.len())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[role])?;
    out.write_all(&updates.to_le_bytes())?;
    for d in shape.dims() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<T: Real>(mut out: impl Write, params: &Params<T>, meta: &str) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    put_u32(&mut out, meta.len())?;
    out.write_all(meta.as_bytes())?;
    put_u32(&mut out, params.params.len() + 2 * params.running.len())?;
    for p in &params.params {
        put_tensor(&mut out, &p.name, role_code(p.role), 0, p.value.shape(), p.value.data().iter().map(|v| v.as_f64()))?;
    }
    for (name, r) in &params.running {
        let shape = Shape4::new(1, r.mean.len(), 1, 1);
        put_tensor(&mut out, name, RUNNING_MEAN, r.updates, shape, r.mean.iter().map(|v| v.as_f64()))?;
        put_tensor(&mut out, name, RUNNING_VAR, r.updates, shape, r.var.iter().map(|v| v.as_f64()))?;
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, params: &Params<T>, meta: &str) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, params, meta)?;
    f.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Returns the parameters and the metadata string.
pub fn read_checkpoint<T: Real>(input: impl Read) -> Result<(Params<T>, String)> {
    let mut r = Reader { inner: input };
    if r.bytes(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta = r.string()?;
    let count = r.u32()?;
    let mut params = Params::default();
    let mut pending_mean: Option<(String, Vec<T>)> = None;
    for _ in 0..count {
        let name = r.string()?;
        let role = r.u8()?;
        let updates = r.u64()?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?;
        }
        let shape = Shape4::from_dims(dims);
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
        let raw = r.bytes(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?)?;
        let data: Vec<T> = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        match role {
            RUNNING_MEAN => pending_mean = Some((name, data)),
            RUNNING_VAR => match pending_mean.take() {
                Some((mname, mean)) if mname == name && mean.len() == data.len() => {
                    params.push_running(name, RunningStats { mean, var: data, updates });
                }
                _ => return Err(Error::Checkpoint(format!("running variance `{name}` without matching mean"))),
            },
            code => params.push(name, role_from(code)?, Tensor4::new(shape, data)?),
        }
    }
    if pending_mean.is_some() {
        return Err(Error::Checkpoint("dangling running mean".into()));
    }
    Ok((params, meta))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(Params<T>, String)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
