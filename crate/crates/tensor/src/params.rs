use std::io::{Read, Write};

use rand::Rng;

use crate::error::{invalid, Result, TensorError};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-a, a]`.
    Uniform(f32),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with `fan_in = shape[0]`.
    FanIn,
    Normal(f32),
}

/// Named, ordered collection of `f32` parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..=a)).collect(),
            Init::FanIn => {
                let a = 1.0 / (shape[0] as f32).sqrt();
                (0..n).map(|_| rng.random_range(-a..=a)).collect()
            }
            Init::Normal(std) => (0..n).map(|_| std * standard_normal(rng)).collect(),
        };
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_values(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Little-endian bytes of every value in store order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.params
            .iter()
            .flat_map(|p| p.data.iter().flat_map(|x| x.to_le_bytes()))
            .collect()
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        write_checkpoint(w, self.params.iter())
    }

    /// Reads a checkpoint written by [`ParamStore::save`] into a fresh store.
    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        Ok(ParamStore {
            params: read_checkpoint(r)?,
        })
    }

    /// Overwrites every parameter of `self` with the same-named record of
    /// `other`, requiring identical shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if src.shape != p.shape {
                return Err(TensorError::Checkpoint(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name, p.shape, src.shape
                )));
            }
            p.data.clone_from(&src.data);
        }
        Ok(())
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    // Box-Muller; u1 in (0, 1].
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LATB";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes the `LATB` checkpoint layout: magic, version, then one record per
/// parameter (name length, name, rank, dims, values), all little-endian.
pub fn write_checkpoint<'a, W: Write>(
    w: &mut W,
    params: impl IntoIterator<Item = &'a Param>,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for x in &p.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<Param>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic, expected LATB".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut params = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Param { name, shape, data });
    }
    Ok(params)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Per-parameter gradients in store order; `None` for parameters the loss
/// never reached.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub grads: Vec<Option<Vec<f32>>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn check_against(&self, store: &ParamStore) -> Result<()> {
        if self.grads.len() > store.len() {
            return Err(invalid("adam", "more gradients than parameters"));
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                let p = &store.params[i];
                if g.len() != p.data.len() {
                    return Err(crate::error::mismatch("adam", &p.shape, &[g.len()]));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFinite { op: "adam" });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_preserves_names_shapes_and_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        ps.add("enc.w", &[3, 4], Init::FanIn, &mut rng);
        ps.add("enc.b", &[4], Init::Zeros, &mut rng);
        ps.add("ünï", &[2, 1, 2], Init::Normal(1.0), &mut rng);
        let mut buf = Vec::new();
        ps.save(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LATB");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        // first record: name length then name
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 5);
        assert_eq!(&buf[12..17], b"enc.w");
        let back = ParamStore::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ps);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let err = ParamStore::load(&mut &b"NOPE\x01\0\0\0"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
        let mut ps = ParamStore::new();
        ps.add_values("x", &[2], vec![1.0, 2.0]);
        let mut buf = Vec::new();
        ps.save(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(ParamStore::load(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn assign_from_checks_shapes() {
        let mut a = ParamStore::new();
        a.add_values("w", &[2], vec![0.0, 0.0]);
        let mut b = ParamStore::new();
        b.add_values("w", &[1, 2], vec![1.0, 2.0]);
        assert!(a.assign_from(&b).is_err());
        let mut c = ParamStore::new();
        c.add_values("w", &[2], vec![1.0, 2.0]);
        a.assign_from(&c).unwrap();
        assert_eq!(a.get(ParamId(0)).data, vec![1.0, 2.0]);
    }
}
