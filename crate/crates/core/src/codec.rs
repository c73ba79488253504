//! Binary model files.
//!
//! Everything is little-endian. A network file starts with `ESMNET1`, an
//! ensemble file with `ESMENS1`; a file carrying either prefix with a
//! different version number is rejected with [`EsmError::Version`].
//!
//! Network layout: magic, widths (`u32` count then `u64` each), learning
//! rate, epochs, batch size, dropout rate, weight decay, clamp bound, init
//! scheme tag (`u8`), seed, then per layer the `outputs × inputs` weight
//! matrix row-major followed by the biases, and finally the last training
//! loss. Floats are `f64`.
//!
//! Ensemble layout: magic, family tag (`u8`) and trial count (`u32`), `n`,
//! `r`, `B`, a completeness flag, the `B` index lists as runs of consecutive
//! rows (`u32` run count, then `u64` start and length per run), master seed,
//! the shared network config, an optional standardizer, feature names, and
//! the `B` networks, each prefixed by its byte length.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{EsmError, Result};
use crate::esm::{EnsembleModel, Standardizer, SubsampleDesign};
use crate::expfam::FamilySpec;
use crate::net::{InitScheme, Layer, Network, NetworkConfig};

pub const NETWORK_MAGIC: &[u8; 7] = b"ESMNET1";
pub const ENSEMBLE_MAGIC: &[u8; 7] = b"ESMENS1";

/// Largest count accepted for any length field, to fail fast on corrupt input.
const MAX_LEN: u64 = 1 << 32;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn usize(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn count(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| EsmError::Format(format!("count {v} too large")))?;
        self.u32(v)
    }

    fn f64s(&mut self, values: &[f64]) -> Result<()> {
        values.iter().try_for_each(|&v| self.f64(v))
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => EsmError::Format("file is truncated".into()),
            _ => EsmError::Io(e),
        })
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(EsmError::Format(format!("length field {v} is implausible")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, len: usize) -> Result<Vec<f64>> {
        (0..len).map(|_| self.f64()).collect()
    }

    fn magic(&mut self, expected: &[u8; 7]) -> Result<()> {
        let found = self.array::<7>()?;
        if &found == expected {
            return Ok(());
        }
        let text = String::from_utf8_lossy(&found).into_owned();
        if found[..6] == expected[..6] {
            Err(EsmError::Version {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: text,
            })
        } else {
            Err(EsmError::Format(format!(
                "expected a {} file, found header {text:?}",
                String::from_utf8_lossy(expected)
            )))
        }
    }
}

fn write_config<W: Write>(w: &mut Writer<W>, config: &NetworkConfig) -> Result<()> {
    w.count(config.widths.len())?;
    for &width in &config.widths {
        w.usize(width)?;
    }
    w.f64(config.learning_rate)?;
    w.usize(config.epochs)?;
    w.usize(config.batch_size)?;
    w.f64(config.dropout_rate)?;
    w.f64(config.weight_decay)?;
    w.f64(config.clamp)?;
    w.u8(match config.init {
        InitScheme::HeUniform => 0,
    })?;
    w.u64(config.seed)
}

fn read_config<R: Read>(r: &mut Reader<R>) -> Result<NetworkConfig> {
    let depth = r.u32()? as usize;
    if depth > 64 {
        return Err(EsmError::Format(format!("{depth} layer widths is implausible")));
    }
    let widths = (0..depth).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let config = NetworkConfig {
        widths,
        learning_rate: r.f64()?,
        epochs: r.usize()?,
        batch_size: r.usize()?,
        dropout_rate: r.f64()?,
        weight_decay: r.f64()?,
        clamp: r.f64()?,
        init: match r.u8()? {
            0 => InitScheme::HeUniform,
            tag => return Err(EsmError::Format(format!("unknown init scheme tag {tag}"))),
        },
        seed: r.u64()?,
    };
    config.validate().map_err(|e| EsmError::Format(format!("stored network config: {e}")))?;
    Ok(config)
}

pub fn write_network<W: Write>(net: &Network, out: W) -> Result<()> {
    let mut w = Writer { inner: out };
    w.bytes(NETWORK_MAGIC)?;
    write_config(&mut w, net.config())?;
    for layer in net.layers() {
        for o in 0..layer.outputs {
            for k in 0..layer.inputs {
                w.f64(layer.weights[k * layer.outputs + o])?;
            }
        }
        w.f64s(&layer.biases)?;
    }
    w.f64(net.final_train_loss())?;
    w.inner.flush()?;
    Ok(())
}

pub fn read_network<R: Read>(input: R) -> Result<Network> {
    let mut r = Reader { inner: input };
    r.magic(NETWORK_MAGIC)?;
    read_network_body(&mut r)
}

fn read_network_body<R: Read>(r: &mut Reader<R>) -> Result<Network> {
    let config = read_config(r)?;
    let mut layers = Vec::with_capacity(config.widths.len() - 1);
    for pair in config.widths.windows(2) {
        let (inputs, outputs) = (pair[0], pair[1]);
        let stored = r.f64s(inputs * outputs)?;
        let mut weights = vec![0.0; inputs * outputs];
        for o in 0..outputs {
            for k in 0..inputs {
                weights[k * outputs + o] = stored[o * inputs + k];
            }
        }
        layers.push(Layer {
            inputs,
            outputs,
            weights,
            biases: r.f64s(outputs)?,
        });
    }
    let loss = r.f64()?;
    Network::from_parts(config, layers, loss)
}

fn write_family<W: Write>(w: &mut Writer<W>, spec: &FamilySpec) -> Result<()> {
    let (tag, trials) = match spec {
        FamilySpec::Gaussian => (0, 0),
        FamilySpec::Bernoulli => (1, 0),
        FamilySpec::Poisson => (2, 0),
        FamilySpec::Binomial { n_trial } => (3, *n_trial),
    };
    w.u8(tag)?;
    w.u32(trials)
}

fn read_family<R: Read>(r: &mut Reader<R>) -> Result<FamilySpec> {
    let tag = r.u8()?;
    let trials = r.u32()?;
    let spec = match tag {
        0 => FamilySpec::Gaussian,
        1 => FamilySpec::Bernoulli,
        2 => FamilySpec::Poisson,
        3 => FamilySpec::Binomial { n_trial: trials },
        _ => return Err(EsmError::Format(format!("unknown family tag {tag}"))),
    };
    spec.validate().map_err(|e| EsmError::Format(e.to_string()))?;
    Ok(spec)
}

/// Sorted indices as `(start, length)` runs of consecutive values.
fn runs(indices: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &i in indices {
        match out.last_mut() {
            Some((start, len)) if *start + *len == i => *len += 1,
            _ => out.push((i, 1)),
        }
    }
    out
}

fn write_string<W: Write>(w: &mut Writer<W>, s: &str) -> Result<()> {
    w.count(s.len())?;
    w.bytes(s.as_bytes())
}

fn read_string<R: Read>(r: &mut Reader<R>) -> Result<String> {
    let len = r.u32()? as usize;
    let mut buf = vec![0u8; len];
    r.fill(&mut buf)?;
    String::from_utf8(buf).map_err(|_| EsmError::Format("feature name is not UTF-8".into()))
}

pub fn write_ensemble<W: Write>(model: &EnsembleModel, out: W) -> Result<()> {
    let mut w = Writer { inner: out };
    w.bytes(ENSEMBLE_MAGIC)?;
    write_family(&mut w, &model.spec)?;
    let design = &model.design;
    w.usize(design.n())?;
    w.usize(design.r())?;
    w.usize(design.len())?;
    w.u8(design.is_complete() as u8)?;
    for subset in design.indices() {
        let runs = runs(subset);
        w.count(runs.len())?;
        for (start, len) in runs {
            w.usize(start)?;
            w.usize(len)?;
        }
    }
    w.u64(model.master_seed)?;
    write_config(&mut w, &model.config)?;
    match &model.standardizer {
        None => w.u8(0)?,
        Some(s) => {
            w.u8(1)?;
            w.count(s.means.len())?;
            w.f64s(&s.means)?;
            w.f64s(&s.scales)?;
        }
    }
    w.count(model.feature_names.len())?;
    for name in &model.feature_names {
        write_string(&mut w, name)?;
    }
    let mut buf = Vec::new();
    for net in &model.networks {
        buf.clear();
        write_network(net, &mut buf)?;
        w.usize(buf.len())?;
        w.bytes(&buf)?;
    }
    w.inner.flush()?;
    Ok(())
}

pub fn read_ensemble<R: Read>(input: R) -> Result<EnsembleModel> {
    let mut r = Reader { inner: input };
    r.magic(ENSEMBLE_MAGIC)?;
    let spec = read_family(&mut r)?;
    let n = r.usize()?;
    let subset_size = r.usize()?;
    let b = r.usize()?;
    let complete = r.u8()? != 0;
    let mut indices = Vec::with_capacity(b.min(1 << 20));
    for _ in 0..b {
        let count = r.u32()?;
        let mut subset = Vec::with_capacity(subset_size.min(n));
        for _ in 0..count {
            let start = r.usize()?;
            let len = r.usize()?;
            if start + len > n || subset.len() + len > subset_size {
                return Err(EsmError::Format("index run outside the design".into()));
            }
            subset.extend(start..start + len);
        }
        indices.push(subset);
    }
    let design = SubsampleDesign::from_indices(n, subset_size, indices)?;
    if design.is_complete() != complete {
        return Err(EsmError::Format("completeness flag disagrees with index lists".into()));
    }
    let master_seed = r.u64()?;
    let config = read_config(&mut r)?;
    let standardizer = match r.u8()? {
        0 => None,
        1 => {
            let p = r.u32()? as usize;
            Some(Standardizer {
                means: r.f64s(p)?,
                scales: r.f64s(p)?,
            })
        }
        tag => return Err(EsmError::Format(format!("unknown standardizer tag {tag}"))),
    };
    let names = r.u32()? as usize;
    let feature_names = (0..names).map(|_| read_string(&mut r)).collect::<Result<Vec<_>>>()?;
    let mut networks = Vec::with_capacity(b.min(1 << 20));
    for index in 0..b {
        let len = r.usize()?;
        let mut body = (&mut r.inner).take(len as u64);
        let net = read_network(&mut body).map_err(|e| EsmError::Ensemble {
            index,
            source: Box::new(e),
        })?;
        if body.limit() != 0 {
            return Err(EsmError::Format(format!("network {index} has trailing bytes")));
        }
        if net.config().widths != config.widths {
            return Err(EsmError::Format(format!("network {index} widths differ from the ensemble")));
        }
        networks.push(net);
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(EsmError::Format("trailing bytes after the last network".into()));
    }
    EnsembleModel::from_parts(spec, design, networks, master_seed, config, standardizer, feature_names)
}

pub fn save_ensemble(model: &EnsembleModel, path: &Path) -> Result<()> {
    write_ensemble(model, BufWriter::new(File::create(path)?))
}

pub fn load_ensemble(path: &Path) -> Result<EnsembleModel> {
    read_ensemble(BufReader::new(File::open(path)?))
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    write_network(net, BufWriter::new(File::create(path)?))
}

pub fn load_network(path: &Path) -> Result<Network> {
    read_network(BufReader::new(File::open(path)?))
}
