//! Synthetic spectra and Gaussian activations with a known population
//! covariance, used as ground truth for the metric and solver code.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::eigen::{Eigenspectrum, SpectrumKind};
use crate::error::{arg, Error, Result};
use crate::ingest::{write_dump, ActivationBatch, Dtype, DumpHeader, Tag};

#[derive(Clone, Debug, PartialEq)]
pub enum SpectrumFamily {
    /// `m` equal eigenvalues followed by zeros.
    UniformOverM(usize),
    OneHot,
    /// `ratioⁱ`, `0 < ratio < 1`.
    Geometric(f64),
    /// `(D − i) / D`.
    LinearDecay,
    /// Given values, sorted descending.
    Explicit(Vec<f64>),
}

impl fmt::Display for SpectrumFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectrumFamily::UniformOverM(m) => write!(f, "uniform:{m}"),
            SpectrumFamily::OneHot => f.write_str("one-hot"),
            SpectrumFamily::Geometric(r) => write!(f, "geometric:{r}"),
            SpectrumFamily::LinearDecay => f.write_str("linear"),
            SpectrumFamily::Explicit(v) => {
                let parts: Vec<String> = v.iter().map(f64::to_string).collect();
                write!(f, "explicit:{}", parts.join(","))
            }
        }
    }
}

/// Parses `uniform:M`, `one-hot`, `geometric:R`, `linear` or
/// `explicit:v1,v2,...`.
impl FromStr for SpectrumFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n.trim(), Some(p.trim())),
            None => (s, None),
        };
        let need = || Error::Format(format!("family {name:?} needs a parameter"));
        let bad = |p: &str| Error::Format(format!("bad parameter {p:?} for family {name:?}"));
        match name.to_ascii_lowercase().as_str() {
            "uniform" => {
                let p = param.ok_or_else(need)?;
                Ok(SpectrumFamily::UniformOverM(p.parse().map_err(|_| bad(p))?))
            }
            "one-hot" | "onehot" | "one_hot" if param.is_none() => Ok(SpectrumFamily::OneHot),
            "geometric" => {
                let p = param.ok_or_else(need)?;
                Ok(SpectrumFamily::Geometric(p.parse().map_err(|_| bad(p))?))
            }
            "linear" if param.is_none() => Ok(SpectrumFamily::LinearDecay),
            "explicit" => {
                let p = param.ok_or_else(need)?;
                let values = p
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad(v)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SpectrumFamily::Explicit(values))
            }
            _ => Err(Error::Format(format!("unknown spectrum family {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumSpec {
    pub family: SpectrumFamily,
    pub d: usize,
    pub scale: f64,
}

impl SpectrumSpec {
    pub fn new(family: SpectrumFamily, d: usize) -> Self {
        SpectrumSpec {
            family,
            d,
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// The descending eigenvalues this spec prescribes.
    pub fn values(&self) -> Result<Vec<f64>> {
        let d = self.d;
        if d == 0 {
            return Err(arg("dimension must be positive"));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(arg(format!(
                "scale must be positive and finite, got {}",
                self.scale
            )));
        }
        let mut v: Vec<f64> = match &self.family {
            SpectrumFamily::UniformOverM(m) => {
                if *m == 0 || *m > d {
                    return Err(arg(format!(
                        "uniform support m must be in 1..={d}, got {m}"
                    )));
                }
                (0..d).map(|i| if i < *m { 1.0 } else { 0.0 }).collect()
            }
            SpectrumFamily::OneHot => (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
            SpectrumFamily::Geometric(r) => {
                if !(*r > 0.0 && *r < 1.0) {
                    return Err(arg(format!("geometric ratio must be in (0, 1), got {r}")));
                }
                (0..d).map(|i| r.powi(i as i32)).collect()
            }
            SpectrumFamily::LinearDecay => (0..d).map(|i| (d - i) as f64 / d as f64).collect(),
            SpectrumFamily::Explicit(values) => {
                if values.len() != d {
                    return Err(arg(format!(
                        "explicit spectrum has {} values, expected {d}",
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(arg("explicit eigenvalues must be finite and non-negative"));
                }
                let mut v = values.clone();
                v.sort_by(|a, b| b.total_cmp(a));
                v
            }
        };
        if self.scale != 1.0 {
            v.iter_mut().for_each(|x| *x *= self.scale);
        }
        Ok(v)
    }
}

pub fn generate_spectrum(spec: &SpectrumSpec) -> Result<Eigenspectrum> {
    Eigenspectrum::new(spec.values()?, spec.d, SpectrumKind::Full)
}

/// Haar-distributed orthogonal matrix from a seeded Gaussian QR.
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// Draws `n` zero-mean Gaussian tokens whose population covariance is
/// `Q diag(λ) Qᵀ` for the requested eigenvalues `λ` and a seeded random
/// orthogonal `Q`. The batch is shaped `[1, n, d]`.
pub fn sample_gaussian_batch(spec: &SpectrumSpec, n: usize, seed: u64) -> Result<ActivationBatch> {
    let d = spec.d;
    let lambdas = spec.values()?;
    if n < 10 * d {
        return Err(arg(format!(
            "need at least {} samples for d = {d}, got {n}",
            10 * d
        )));
    }
    let n32 = u32::try_from(n).map_err(|_| arg("sample count exceeds u32"))?;
    let d32 = u32::try_from(d).map_err(|_| arg("dimension exceeds u32"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_orthogonal(d, &mut rng);
    let root: Vec<f64> = lambdas.iter().map(|l| l.sqrt()).collect();
    // Columns of `mix` are sqrt(λⱼ)·qⱼ, so x = mix · z.
    let mut mix = q;
    for (j, mut col) in mix.column_iter_mut().enumerate() {
        col *= root[j];
    }
    let z = DMatrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
    let x = mix * z;
    // x is d×n column-major: each column is one token, i.e. row-major n×d.
    let data = x.as_slice().to_vec();
    ActivationBatch::new(
        DumpHeader::new(Dtype::F64, 1, n32, d32, 0, 0, Tag::Pre),
        data,
    )
}

/// Derives an independent stream seed for one `(layer, step, tag)` dump.
pub fn derive_seed(seed: u64, layer: u32, step: u64, tag: Tag) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed
        ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ step.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ ((tag == Tag::Post) as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A grid of synthetic dumps: every layer and step gets a pre dump drawn
/// from `pre` and a post dump drawn from `post`, each from its own seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRun {
    pub layers: u32,
    pub steps: Vec<u64>,
    pub dim: usize,
    pub batch: u32,
    pub seq_len: u32,
    pub pre: SpectrumFamily,
    pub post: SpectrumFamily,
    pub seed: u64,
    pub dtype: Dtype,
}

impl SynthRun {
    pub fn dump_name(layer: u32, step: u64, tag: Tag) -> String {
        format!("L{layer:03}_S{step:08}_{}.nrv", tag.as_str())
    }

    pub fn batch_for(&self, layer: u32, step: u64, tag: Tag) -> Result<ActivationBatch> {
        let family = match tag {
            Tag::Pre => &self.pre,
            Tag::Post => &self.post,
        };
        let n = self.batch as usize * self.seq_len as usize;
        let spec = SpectrumSpec::new(family.clone(), self.dim);
        let batch = sample_gaussian_batch(&spec, n, derive_seed(self.seed, layer, step, tag))?
            .reshaped(self.batch, self.seq_len)?
            .with_meta(layer, step, tag);
        Ok(if self.dtype == Dtype::F32 {
            batch.to_dtype(Dtype::F32)
        } else {
            batch
        })
    }

    /// Writes all dumps into `out`, returning how many were written.
    pub fn write(&self, out: &Path) -> Result<usize> {
        fs::create_dir_all(out).map_err(|source| Error::Write {
            path: out.to_path_buf(),
            source,
        })?;
        let mut files = 0;
        for &step in &self.steps {
            for layer in 0..self.layers {
                for tag in [Tag::Pre, Tag::Post] {
                    let batch = self.batch_for(layer, step, tag)?;
                    write_dump(&batch, out.join(Self::dump_name(layer, step, tag)))?;
                    files += 1;
                }
            }
        }
        Ok(files)
    }
}
