//! Binary checkpoint format.
//!
//! ```text
//! "OATCKPT1"            8 bytes
//! header length         u64 LE
//! header                UTF-8 `key = value` lines; `config.*` keys hold the run config
//!                       (without `output`, which names a location rather than the model)
//! records, until EOF:
//!   name length         u32 LE
//!   name                UTF-8
//!   dtype               u8 (0 = f32, 1 = f64)
//!   ndim                u8
//!   dims                u32 LE each
//!   payload             little-endian elements
//! ```
//!
//! Records appear in a fixed order (encoder, parameters, running statistics), so
//! saving a loaded checkpoint reproduces the file byte for byte.

use std::path::Path;

use oat_core::layers::LambdaEncoder;
use oat_core::tensor::Scalar;
use oat_core::Model;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"OATCKPT1";
const FORMAT: &str = "1";

/// A trained model together with the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint<F> {
    pub config: RunConfig,
    pub model: Model<F>,
    /// Optimizer steps taken.
    pub step: usize,
}

/// One decoded tensor record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Record {
    fn new<F: Scalar>(name: String, dims: Vec<usize>, data: &[F]) -> Self {
        let mut payload = Vec::with_capacity(data.len() * F::BYTES);
        data.iter().for_each(|v| v.to_le_vec(&mut payload));
        Record {
            name,
            dtype: F::DTYPE_CODE,
            dims,
            payload,
        }
    }

    fn values<F: Scalar>(&self) -> Result<Vec<F>> {
        if self.dtype != F::DTYPE_CODE {
            return Err(CliError::Checkpoint(format!(
                "{}: dtype code {} where {} was expected",
                self.name,
                self.dtype,
                F::DTYPE_CODE
            )));
        }
        Ok(self
            .payload
            .chunks_exact(F::BYTES)
            .map(F::from_le_slice)
            .collect())
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.dtype);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.payload);
    }
}

fn dtype_name(code: u8) -> Result<&'static str> {
    match code {
        0 => Ok("f32"),
        1 => Ok("f64"),
        c => Err(CliError::Checkpoint(format!("unknown dtype code {c}"))),
    }
}

/// Byte cursor that reports truncation with the offset.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CliError::Checkpoint(format!(
                "truncated {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Splits a file into its header pairs and records.
pub fn decode(bytes: &[u8]) -> Result<(Vec<(String, String)>, Vec<Record>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CliError::Checkpoint(format!(
            "bad magic, expected {:?}",
            std::str::from_utf8(MAGIC).expect("ascii")
        )));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let hlen = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes"));
    let hlen =
        usize::try_from(hlen).map_err(|_| CliError::Checkpoint("header length overflow".into()))?;
    let header = std::str::from_utf8(r.take(hlen, "header")?)
        .map_err(|_| CliError::Checkpoint("header is not UTF-8".into()))?;
    let mut pairs = Vec::new();
    for line in header.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Checkpoint(format!("malformed header line {line:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut records = Vec::new();
    while !r.done() {
        let nlen = r.u32("record name length")? as usize;
        let name = String::from_utf8(r.take(nlen, "record name")?.to_vec())
            .map_err(|_| CliError::Checkpoint("record name is not UTF-8".into()))?;
        let dtype = r.u8("dtype")?;
        let width = if dtype_name(dtype)? == "f32" { 4 } else { 8 };
        let ndim = r.u8("ndim")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = r.take(n * width, &format!("payload of {name}"))?.to_vec();
        records.push(Record {
            name,
            dtype,
            dims,
            payload,
        });
    }
    Ok((pairs, records))
}

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.model.spec();
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut header = String::new();
        header.push_str(&format!("format = {FORMAT}\n"));
        header.push_str(&format!(
            "dtype = {}\n",
            dtype_name(F::DTYPE_CODE).expect("known dtype")
        ));
        header.push_str(&format!("input = {}\n", join(&spec.input)));
        header.push_str(&format!("classes = {}\n", spec.classes));
        header.push_str(&format!("step = {}\n", self.step));
        header.push_str(&format!("seed = {}\n", self.config.seed));
        for (k, v) in self
            .config
            .pairs()
            .into_iter()
            .filter(|(k, _)| *k != "output")
        {
            header.push_str(&format!("config.{k} = {v}\n"));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for rec in self.records() {
            rec.write(&mut out);
        }
        out
    }

    fn records(&self) -> Vec<Record> {
        let mut recs = Vec::new();
        if let Some(enc) = self.model.encoder() {
            recs.push(Record::new(
                "encoder.grid".into(),
                vec![enc.grid().len()],
                enc.grid(),
            ));
            recs.push(Record::new(
                "encoder.matrix".into(),
                vec![enc.dim(), enc.grid().len()],
                enc.matrix(),
            ));
        }
        for (name, t) in self.model.params() {
            recs.push(Record::new(name, t.shape().to_vec(), t.data()));
        }
        for (name, b) in self.model.buffers() {
            recs.push(Record::new(name, vec![b.len()], b));
        }
        recs
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (pairs, records) = decode(bytes)?;
        let field = |k: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(n, _)| n == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| CliError::Checkpoint(format!("header lacks {k:?}")))
        };
        let bad = |k: &str| CliError::Checkpoint(format!("bad header value for {k:?}"));
        if field("format")? != FORMAT {
            return Err(CliError::Checkpoint(format!(
                "unsupported format {}",
                field("format")?
            )));
        }
        let want = dtype_name(F::DTYPE_CODE)?;
        if field("dtype")? != want {
            return Err(CliError::Checkpoint(format!(
                "stored dtype {} but {want} requested",
                field("dtype")?
            )));
        }
        let input: Vec<usize> = field("input")?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| bad("input")))
            .collect::<Result<_>>()?;
        let input: [usize; 3] = input.try_into().map_err(|_| bad("input"))?;
        let classes: usize = field("classes")?.parse().map_err(|_| bad("classes"))?;
        let step: usize = field("step")?.parse().map_err(|_| bad("step"))?;
        let config_text: String = pairs
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| format!("{k} = {v}\n")))
            .collect();
        let config = RunConfig::parse(&config_text)?;
        let tc = config.train_config()?;
        let spec = tc.model_spec(input, classes)?;

        let mut recs = records.into_iter().peekable();
        let encoder = if spec.conditioned() {
            let grid = expect(recs.next(), "encoder.grid")?;
            let matrix = expect(recs.next(), "encoder.matrix")?;
            let enc = LambdaEncoder::from_parts(
                tc.encoding,
                grid.values::<f64>()?,
                matrix.values::<f64>()?,
            )?;
            if matrix.dims != [enc.dim(), enc.grid().len()] {
                return Err(CliError::Checkpoint(format!(
                    "encoder.matrix has dims {:?}",
                    matrix.dims
                )));
            }
            Some(enc)
        } else {
            None
        };
        let mut model: Model<F> = Model::new(spec, encoder, config.seed)?;

        let names: Vec<(String, Vec<usize>)> = model
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), t) in names.iter().zip(model.params_mut()) {
            let rec = expect(recs.next(), name)?;
            check_dims(&rec, shape)?;
            t.data_mut().copy_from_slice(&rec.values::<F>()?);
        }
        let names: Vec<(String, usize)> = model
            .buffers()
            .into_iter()
            .map(|(n, b)| (n, b.len()))
            .collect();
        for ((name, len), b) in names.iter().zip(model.buffers_mut()) {
            let rec = expect(recs.next(), name)?;
            check_dims(&rec, &[*len])?;
            b.copy_from_slice(&rec.values::<F>()?);
        }
        if let Some(extra) = recs.next() {
            return Err(CliError::Checkpoint(format!(
                "unexpected record {:?}",
                extra.name
            )));
        }
        Ok(Checkpoint {
            config,
            model,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn expect(rec: Option<Record>, name: &str) -> Result<Record> {
    match rec {
        Some(r) if r.name == name => Ok(r),
        Some(r) => Err(CliError::Checkpoint(format!(
            "expected record {name:?}, found {:?}",
            r.name
        ))),
        None => Err(CliError::Checkpoint(format!("missing record {name:?}"))),
    }
}

fn check_dims(rec: &Record, shape: &[usize]) -> Result<()> {
    if rec.dims != shape {
        return Err(CliError::Checkpoint(format!(
            "shape mismatch for {}: stored {:?}, model {:?}",
            rec.name, rec.dims, shape
        )));
    }
    Ok(())
}
