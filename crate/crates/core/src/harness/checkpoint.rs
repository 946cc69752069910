//! Binary checkpoints of an [`EnsembleState`].
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic  "SGFL"
//! u16    version (1)
//! u32    d, n, K, N
//! f64    m, λ, t
//! f64    Φ: N × modes × (re, im)
//! f64    Z: N × modes × (re, im)
//! u64    step (the noise counter of the next step)
//! u64    seed
//! u32    member
//! u8     integrator (0 direct, 1 split)
//! f64    a, b, Wick multiplier
//! f64    Y: N × modes × (re, im)      split integrator only
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::dynamics::{EnsembleState, Integrator};
use crate::error::{Error, Result};
use crate::lattice::{Field, TorusGrid, C64};
use crate::renorm::Counterterms;

const MAGIC: &[u8; 4] = b"SGFL";
const VERSION: u16 = 1;

fn put_fields(out: &mut Vec<u8>, fields: &[Field]) {
    for f in fields {
        for c in f.coeffs() {
            out.extend_from_slice(&c.re.to_le_bytes());
            out.extend_from_slice(&c.im.to_le_bytes());
        }
    }
}

/// Serializes `state` to bytes.
pub fn encode(state: &EnsembleState) -> Vec<u8> {
    let g = state.grid();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [g.dim(), g.n(), g.cutoff(), state.components()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [g.mass(), g.coupling(), state.t()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_fields(&mut out, state.phi());
    put_fields(&mut out, state.z());
    out.extend_from_slice(&state.step_count().to_le_bytes());
    out.extend_from_slice(&state.seed().to_le_bytes());
    out.extend_from_slice(&state.member().to_le_bytes());
    out.push(match state.integrator() {
        Integrator::Direct => 0,
        Integrator::Dpd => 1,
    });
    let ct = state.counterterms();
    for v in [ct.a, ct.b, state.wick_multiplier()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(y) = state.remainder() {
        put_fields(&mut out, y);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn fields(&mut self, grid: &std::sync::Arc<TorusGrid>, count: usize) -> Result<Vec<Field>> {
        (0..count)
            .map(|_| {
                let coeffs = (0..grid.mode_count())
                    .map(|_| Ok(C64::new(self.f64()?, self.f64()?)))
                    .collect::<Result<Vec<_>>>()?;
                let f = Field::from_hermitian(grid, coeffs);
                if !f.is_hermitian() {
                    return Err(Error::Checkpoint("stored field is not Hermitian-symmetric".into()));
                }
                Ok(f)
            })
            .collect()
    }
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<EnsembleState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a sigmaflow checkpoint".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let (d, n, k, comps) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let (m, lam, t) = (r.f64()?, r.f64()?, r.f64()?);
    let grid = TorusGrid::new(d, n, k, m, lam).map_err(|e| Error::Checkpoint(format!("stored grid invalid: {e}")))?;
    if comps == 0 {
        return Err(Error::Checkpoint("stored state has no components".into()));
    }
    let phi = r.fields(&grid, comps)?;
    let z = r.fields(&grid, comps)?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let member = r.u32()?;
    let integrator = match r.u8()? {
        0 => Integrator::Direct,
        1 => Integrator::Dpd,
        other => return Err(Error::Checkpoint(format!("unknown integrator tag {other}"))),
    };
    let (a, b, wick) = (r.f64()?, r.f64()?, r.f64()?);
    let y = match integrator {
        Integrator::Dpd => Some(r.fields(&grid, comps)?),
        Integrator::Direct => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut state = EnsembleState::from_parts(&grid, phi, z, t, step, Counterterms { a, b }, integrator, seed, member)?
        .with_wick_multiplier(wick);
    if let Some(y) = y {
        state.set_remainder(y);
    }
    Ok(state)
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save(state: &EnsembleState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&encode(state))?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<EnsembleState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
