//! Dense row-major `f64` tensors and their on-disk encoding.
//!
//! The binary layout is: magic `DNT1`, a dtype byte (`0x02` for f64), an
//! ndim byte, two reserved zero bytes, `ndim` little-endian `u32` dims, and
//! then the little-endian IEEE-754 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;
pub const MAGIC: &[u8; 4] = b"DNT1";
pub const DTYPE_F64: u8 = 0x02;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::dim(
                "tensor",
                format!("rank {} exceeds {MAX_RANK}", shape.len()),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("rank checked by caller")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("rank checked by caller")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[], vec![value]).unwrap()
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).unwrap()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > MAX_RANK {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let mut header = Vec::with_capacity(8 + 4 * self.shape.len());
        header.extend_from_slice(MAGIC);
        header.push(DTYPE_F64);
        header.push(self.shape.len() as u8);
        header.extend_from_slice(&[0, 0]);
        for &d in &self.shape {
            header.extend_from_slice(&(d as u32).to_le_bytes());
        }
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(8 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(format!("truncated tensor: {e}"));
        let mut prefix = [0u8; 8];
        r.read_exact(&mut prefix).map_err(io)?;
        if &prefix[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &prefix[..4])));
        }
        if prefix[4] != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype 0x{:02x}", prefix[4])));
        }
        let ndim = prefix[5] as usize;
        if ndim > MAX_RANK {
            return Err(Error::Format(format!("rank {ndim} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(io)?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; 8 * n];
        r.read_exact(&mut payload).map_err(io)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}
