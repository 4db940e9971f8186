//! Bit-exact binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `NWFL` | 4 bytes |
//! | version | u32 |
//! | N | u32 |
//! | L | f64 |
//! | kind | u8 (0 linear, 1 F1, 2 F2, 3 F3) |
//! | q | f64 |
//! | t | f64 |
//! | dt (next trial step) | f64 |
//! | step_count | u64 |
//! | rejected | u64 |
//! | next_record | u64 |
//! | last_dt | f64 |
//! | config digest | 32 bytes |
//! | values | N³ × f64, field index order |

use std::path::Path;

use crate::dynamics::{ControllerState, FlowState, NonlinearityKind};
use crate::error::{Error, Result};
use crate::field::{Field, Grid};

pub const MAGIC: &[u8; 4] = b"NWFL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 1 + 8 + 8 + 8 + 8 + 8 + 8 + 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: NonlinearityKind,
    pub q: f64,
    pub state: FlowState,
    pub ctrl: ControllerState,
    pub digest: [u8; 32],
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const K: usize>(&mut self) -> [u8; K] {
        let mut out = [0u8; K];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + K]);
        self.pos += K;
        out
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Config(format!("invalid checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let g = self.state.u.grid();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * g.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(g.n() as u32).to_le_bytes());
        out.extend_from_slice(&g.side().to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&self.q.to_le_bytes());
        out.extend_from_slice(&self.state.t.to_le_bytes());
        out.extend_from_slice(&self.state.dt.to_le_bytes());
        out.extend_from_slice(&self.state.step_count.to_le_bytes());
        out.extend_from_slice(&self.ctrl.rejected.to_le_bytes());
        out.extend_from_slice(&self.ctrl.next_record.to_le_bytes());
        out.extend_from_slice(&self.ctrl.last_dt.to_le_bytes());
        out.extend_from_slice(&self.digest);
        for v in self.state.u.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("truncated header"));
        }
        let mut r = Reader { bytes, pos: 0 };
        if &r.take::<4>() != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32();
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let n = r.u32() as usize;
        let side = r.f64();
        let code = r.take::<1>()[0];
        let kind = NonlinearityKind::from_code(code).ok_or_else(|| corrupt(format!("unknown kind {code}")))?;
        let q = r.f64();
        let t = r.f64();
        let dt = r.f64();
        let step_count = r.u64();
        let rejected = r.u64();
        let next_record = r.u64();
        let last_dt = r.f64();
        let digest = r.take::<32>();
        let grid = Grid::new(side, n).map_err(|e| corrupt(e.to_string()))?;
        if bytes.len() != HEADER_LEN + 8 * grid.len() {
            return Err(corrupt(format!(
                "expected {} bytes for N = {n}, found {}",
                HEADER_LEN + 8 * grid.len(),
                bytes.len()
            )));
        }
        let values = (0..grid.len()).map(|_| r.f64()).collect();
        Ok(Self {
            kind,
            q,
            state: FlowState { t, u: Field::from_values(grid, values)?, dt, step_count },
            ctrl: ControllerState { last_dt, rejected, next_record },
            digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Rejects a checkpoint written under different dynamics settings.
    pub fn check_digest(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.digest != expected {
            return Err(Error::Config(
                "checkpoint was written with different dynamics settings (digest mismatch)".into(),
            ));
        }
        Ok(())
    }
}
