use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::ByteCursor;
use crate::error::{Error, Result};
use crate::hashing::{combine, fnv1a};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SPNMTCKP";
const VERSION: u32 = 1;

/// Storage precision of parameter values. Arithmetic is always carried out
/// in `f64`; `Single` rounds every stored value to the nearest `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            other => Err(Error::Config(format!("unknown precision {other}"))),
        }
    }
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    precision: Precision,
}

/// Initialization rule for one parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))` for a matrix.
    Xavier,
    /// Uniform with the given standard deviation.
    Uniform(f64),
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Creates `name` with values drawn from a generator keyed by
    /// `(seed, name)`, so values do not depend on creation order.
    pub fn init(&mut self, name: &str, shape: &[usize], rule: Init, seed: u64) {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(combine([seed, fnv1a(name.as_bytes())]));
        let mut uniform = |a: f64| (0..n).map(|_| rng.gen_range(-a..a)).collect::<Vec<_>>();
        let data = match rule {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [a, b] => (*a, *b),
                    _ => (n, n),
                };
                uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
            }
            Init::Uniform(std) => uniform(std * 3f64.sqrt()),
        };
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches count");
        self.insert(name, t);
    }

    pub fn insert(&mut self, name: &str, mut t: Tensor) {
        let p = self.precision;
        t.data_mut().iter_mut().for_each(|v| *v = p.round(*v));
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Re-applies the storage precision to every value.
    pub fn round_to_precision(&mut self) {
        let p = self.precision;
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = p.round(*v));
        }
    }

    /// Hash over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut words = Vec::with_capacity(self.num_values() + 2 * self.len());
        for (name, t) in &self.params {
            words.push(fnv1a(name.as_bytes()));
            words.extend(t.shape().iter().map(|&d| d as u64));
            words.extend(t.data().iter().map(|v| v.to_bits()));
        }
        combine(words)
    }

    /// Writes the checkpoint format: magic, version, precision width,
    /// an opaque UTF-8 metadata string, then `(name, shape, values)` per
    /// parameter in name order. All integers and floats are little-endian.
    pub fn write_to<W: Write>(&self, mut w: W, meta: &str) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let width: u32 = match self.precision {
            Precision::Single => 4,
            Precision::Double => 8,
        };
        buf.extend_from_slice(&width.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                match self.precision {
                    Precision::Single => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::Double => buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
    }

    /// Returns the store and the metadata string.
    pub fn read_from<R: Read>(mut r: R) -> Result<(Self, String)> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
        let mut c = ByteCursor::new(&bytes);
        if c.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}")));
        }
        let precision = match c.u32()? {
            4 => Precision::Single,
            8 => Precision::Double,
            w => return Err(Error::Format(format!("value width {w}"))),
        };
        let meta_len = c.u32()? as usize;
        let meta =
            String::from_utf8(c.take(meta_len)?.to_vec()).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let count = c.u32()?;
        let mut store = ParamStore::new(precision);
        for _ in 0..count {
            let len = c.u32()? as usize;
            let name = String::from_utf8(c.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let ndim = c.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| c.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(match precision {
                    Precision::Single => f32::from_le_bytes(c.take(4)?.try_into().unwrap()) as f64,
                    Precision::Double => f64::from_le_bytes(c.take(8)?.try_into().unwrap()),
                });
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            store.params.insert(name, t);
        }
        if !c.is_done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f), meta)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        ParamStore::read_from(std::io::BufReader::new(f))
    }
}
