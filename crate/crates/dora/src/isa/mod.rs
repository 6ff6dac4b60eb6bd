//! Bit-exact instruction set: a 32-bit header routes each instruction to a
//! unit, followed by a little-endian byte-aligned body whose layout depends on
//! the opcode.
//!
//! Header layout (little-endian u32):
//! - bit 0: `is_last` (final instruction for the destination unit)
//! - bits 1..=4: opcode
//! - bits 5..=12: destination unit id
//! - bits 13..=28: body length in bytes
//! - bits 29..=31: reserved, must be zero
//!
//! Unit ids are global: 0 is the memory interface, LMU i is 16+i, MMU j is
//! 64+j, SFU s is 96+s.

pub mod lower;

use serde::{Deserialize, Serialize};

pub const STREAM_MAGIC: [u8; 4] = *b"DORA";
pub const STREAM_VERSION: u16 = 1;

pub const UNIT_MIU: u8 = 0;
pub const UNIT_LMU_BASE: u8 = 16;
pub const UNIT_MMU_BASE: u8 = 64;
pub const UNIT_SFU_BASE: u8 = 96;

pub fn lmu_unit(i: u32) -> u8 {
    UNIT_LMU_BASE + i as u8
}

pub fn mmu_unit(i: u32) -> u8 {
    UNIT_MMU_BASE + i as u8
}

pub fn sfu_unit(i: u32) -> u8 {
    UNIT_SFU_BASE + i as u8
}

/// Human-readable unit name for disassembly and traces.
pub fn unit_name(unit: u8) -> String {
    match unit {
        UNIT_MIU => "miu".to_string(),
        u if (UNIT_LMU_BASE..UNIT_MMU_BASE).contains(&u) => format!("lmu{}", u - UNIT_LMU_BASE),
        u if (UNIT_MMU_BASE..UNIT_SFU_BASE).contains(&u) => format!("mmu{}", u - UNIT_MMU_BASE),
        u => format!("sfu{}", u - UNIT_SFU_BASE),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpType {
    Sync = 0,
    Load = 1,
    Store = 2,
    Forward = 3,
    Compute = 4,
    NonLinear = 5,
}

impl OpType {
    fn from_bits(v: u32) -> Option<Self> {
        Some(match v {
            0 => OpType::Sync,
            1 => OpType::Load,
            2 => OpType::Store,
            3 => OpType::Forward,
            4 => OpType::Compute,
            5 => OpType::NonLinear,
            _ => return None,
        })
    }
}

pub const MARKER_BEGIN: u8 = 0;
pub const MARKER_END: u8 = 1;
/// Closes one LMU-tile iteration window.
pub const MARKER_ITER: u8 = 2;

pub const DEP_NONE: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncBody {
    pub layer_id: u16,
    pub marker: u8,
}

/// Off-chip transfer between a DRAM region window and one LMU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiuBody {
    /// Byte address of the region base in DRAM.
    pub ddr_addr: u32,
    /// LMU endpoint (global unit id).
    pub lmu: u8,
    /// Region dims; the row stride is `n`.
    pub m: u16,
    pub n: u16,
    /// Half-open element window inside the region.
    pub start_row: u16,
    pub end_row: u16,
    pub start_col: u16,
    pub end_col: u16,
    /// Producing layer this load must wait on; `DEP_NONE` for external data.
    pub dep_layer: u16,
    pub layer_id: u16,
}

impl MiuBody {
    pub fn window_bytes(&self, elem_size: u64) -> u64 {
        (self.end_row - self.start_row) as u64 * (self.end_col - self.start_col) as u64 * elem_size
    }
}

/// On-chip move between an LMU buffer and a processing unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmuBody {
    /// Ping-pong buffer select.
    pub ping: u8,
    /// 0 none, 1 write, 2 accumulate (at the destination).
    pub load_op: u8,
    /// 0 none, 1 stream out.
    pub send_op: u8,
    pub src_pu: u8,
    pub des_pu: u8,
    pub count: u16,
    pub start_row: u16,
    pub end_row: u16,
    pub start_col: u16,
    pub end_col: u16,
}

/// One launch on one MMU with dynamic loop bounds in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmuBody {
    pub ping_op: u8,
    pub pong_op: u8,
    pub bound_i: u16,
    pub bound_k: u16,
    pub bound_j: u16,
    pub src_lhs: u8,
    pub src_rhs: u8,
}

pub const NL_SOFTMAX: u8 = 0;
pub const NL_GELU: u8 = 1;
pub const NL_LAYERNORM: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SfuBody {
    pub src_lmu: u8,
    pub des_lmu: u8,
    pub rows: u16,
    pub row_len: u16,
    pub nl_kind: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Body {
    Sync(SyncBody),
    Load(MiuBody),
    Store(MiuBody),
    Forward(LmuBody),
    Compute(MmuBody),
    NonLinear(SfuBody),
}

impl Body {
    pub fn op(&self) -> OpType {
        match self {
            Body::Sync(_) => OpType::Sync,
            Body::Load(_) => OpType::Load,
            Body::Store(_) => OpType::Store,
            Body::Forward(_) => OpType::Forward,
            Body::Compute(_) => OpType::Compute,
            Body::NonLinear(_) => OpType::NonLinear,
        }
    }

    fn byte_len(&self) -> u16 {
        match self {
            Body::Sync(_) => 4,
            Body::Load(_) | Body::Store(_) => 24,
            Body::Forward(_) => 16,
            Body::Compute(_) => 10,
            Body::NonLinear(_) => 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub is_last: bool,
    pub des_unit: u8,
    pub body: Body,
}

impl Instruction {
    pub fn new(des_unit: u8, body: Body) -> Self {
        Self { is_last: false, des_unit, body }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IsaError {
    #[error("malformed header {header:#010x}: {reason}")]
    MalformedHeader { header: u32, reason: String },
    #[error("opcode {op:?} expects a {expected}-byte body, header says {got}")]
    LengthMismatch { op: OpType, expected: u16, got: u16 },
    #[error("stream truncated: need {need} bytes at offset {offset}, have {have}")]
    TruncatedStream { offset: usize, need: usize, have: usize },
    #[error("bad stream magic")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    VersionMismatch(u16),
    #[error("instruction stream built for a different arch config (hash {stream:#018x}, expected {expected:#018x})")]
    ArchHashMismatch { stream: u64, expected: u64 },
    #[error("invalid field: {0}")]
    InvalidField(String),
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_instruction(instr: &Instruction, out: &mut Vec<u8>) {
    let len = instr.body.byte_len();
    let header: u32 = (instr.is_last as u32)
        | ((instr.body.op() as u32) << 1)
        | ((instr.des_unit as u32) << 5)
        | ((len as u32) << 13);
    out.extend_from_slice(&header.to_le_bytes());
    match &instr.body {
        Body::Sync(b) => {
            put_u16(out, b.layer_id);
            out.push(b.marker);
            out.push(0);
        }
        Body::Load(b) | Body::Store(b) => {
            out.extend_from_slice(&b.ddr_addr.to_le_bytes());
            out.push(b.lmu);
            out.push(0);
            for v in [b.m, b.n, b.start_row, b.end_row, b.start_col, b.end_col, b.dep_layer, b.layer_id] {
                put_u16(out, v);
            }
            put_u16(out, 0);
        }
        Body::Forward(b) => {
            out.extend_from_slice(&[b.ping, b.load_op, b.send_op, b.src_pu, b.des_pu, 0]);
            for v in [b.count, b.start_row, b.end_row, b.start_col, b.end_col] {
                put_u16(out, v);
            }
        }
        Body::Compute(b) => {
            out.extend_from_slice(&[b.ping_op, b.pong_op]);
            for v in [b.bound_i, b.bound_k, b.bound_j] {
                put_u16(out, v);
            }
            out.extend_from_slice(&[b.src_lhs, b.src_rhs]);
        }
        Body::NonLinear(b) => {
            out.extend_from_slice(&[b.src_lmu, b.des_lmu]);
            put_u16(out, b.rows);
            put_u16(out, b.row_len);
            out.push(b.nl_kind);
        }
    }
}

fn get_u16(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

/// Decode one instruction at `offset`; returns it with the offset of the next.
pub fn decode_instruction(bytes: &[u8], offset: usize) -> Result<(Instruction, usize), IsaError> {
    if bytes.len() < offset + 4 {
        return Err(IsaError::TruncatedStream { offset, need: 4, have: bytes.len() - offset });
    }
    let header = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
    if header >> 29 != 0 {
        return Err(IsaError::MalformedHeader { header, reason: "reserved bits set".into() });
    }
    let is_last = header & 1 != 0;
    let op = OpType::from_bits((header >> 1) & 0xF)
        .ok_or_else(|| IsaError::MalformedHeader { header, reason: format!("unknown opcode {}", (header >> 1) & 0xF) })?;
    let des_unit = ((header >> 5) & 0xFF) as u8;
    let len = ((header >> 13) & 0xFFFF) as u16;
    let expected = match op {
        OpType::Sync => 4,
        OpType::Load | OpType::Store => 24,
        OpType::Forward => 16,
        OpType::Compute => 10,
        OpType::NonLinear => 7,
    };
    if len != expected {
        return Err(IsaError::LengthMismatch { op, expected, got: len });
    }
    let start = offset + 4;
    if bytes.len() < start + len as usize {
        return Err(IsaError::TruncatedStream {
            offset: start,
            need: len as usize,
            have: bytes.len() - start,
        });
    }
    let b = &bytes[start..start + len as usize];
    let body = match op {
        OpType::Sync => Body::Sync(SyncBody { layer_id: get_u16(b, 0), marker: b[2] }),
        OpType::Load | OpType::Store => {
            let miu = MiuBody {
                ddr_addr: u32::from_le_bytes(b[0..4].try_into().unwrap()),
                lmu: b[4],
                m: get_u16(b, 6),
                n: get_u16(b, 8),
                start_row: get_u16(b, 10),
                end_row: get_u16(b, 12),
                start_col: get_u16(b, 14),
                end_col: get_u16(b, 16),
                dep_layer: get_u16(b, 18),
                layer_id: get_u16(b, 20),
            };
            if miu.end_row < miu.start_row || miu.end_col < miu.start_col {
                return Err(IsaError::InvalidField("inverted transfer window".into()));
            }
            if op == OpType::Load { Body::Load(miu) } else { Body::Store(miu) }
        }
        OpType::Forward => Body::Forward(LmuBody {
            ping: b[0],
            load_op: b[1],
            send_op: b[2],
            src_pu: b[3],
            des_pu: b[4],
            count: get_u16(b, 6),
            start_row: get_u16(b, 8),
            end_row: get_u16(b, 10),
            start_col: get_u16(b, 12),
            end_col: get_u16(b, 14),
        }),
        OpType::Compute => Body::Compute(MmuBody {
            ping_op: b[0],
            pong_op: b[1],
            bound_i: get_u16(b, 2),
            bound_k: get_u16(b, 4),
            bound_j: get_u16(b, 6),
            src_lhs: b[8],
            src_rhs: b[9],
        }),
        OpType::NonLinear => Body::NonLinear(SfuBody {
            src_lmu: b[0],
            des_lmu: b[1],
            rows: get_u16(b, 2),
            row_len: get_u16(b, 4),
            nl_kind: b[6],
        }),
    };
    Ok((Instruction { is_last, des_unit, body }, start + len as usize))
}

// ---------------------------------------------------------------------------
// Stream container
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionStream {
    pub arch_hash: u64,
    pub instructions: Vec<Instruction>,
}

impl InstructionStream {
    /// Set `is_last` on the final instruction of every destination unit.
    pub fn finalize_last_flags(&mut self) {
        use std::collections::HashMap;
        let mut last: HashMap<u8, usize> = HashMap::new();
        for (idx, instr) in self.instructions.iter().enumerate() {
            last.insert(instr.des_unit, idx);
        }
        for (i, instr) in self.instructions.iter_mut().enumerate() {
            instr.is_last = last[&instr.des_unit] == i;
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&STREAM_MAGIC);
        out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&self.arch_hash.to_le_bytes());
        for instr in &self.instructions {
            encode_instruction(instr, &mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, IsaError> {
        if bytes.len() < 16 {
            return Err(IsaError::TruncatedStream { offset: 0, need: 16, have: bytes.len() });
        }
        if bytes[0..4] != STREAM_MAGIC {
            return Err(IsaError::BadMagic);
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != STREAM_VERSION {
            return Err(IsaError::VersionMismatch(version));
        }
        let arch_hash = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let mut instructions = Vec::new();
        let mut offset = 16;
        while offset < bytes.len() {
            let (instr, next) = decode_instruction(bytes, offset)?;
            instructions.push(instr);
            offset = next;
        }
        Ok(Self { arch_hash, instructions })
    }

    pub fn check_arch(&self, expected: u64) -> Result<(), IsaError> {
        if self.arch_hash != expected {
            return Err(IsaError::ArchHashMismatch { stream: self.arch_hash, expected });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        std::fs::write(path, self.encode())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, IsaError> {
        let bytes = std::fs::read(path)
            .map_err(|e| IsaError::InvalidField(format!("io error: {e}")))?;
        Self::decode(&bytes)
    }
}

/// Text form of a stream, one instruction per line.
pub fn disassemble(stream: &InstructionStream) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    writeln!(s, "; arch hash {:#018x}, {} instructions", stream.arch_hash, stream.instructions.len())
        .unwrap();
    for (idx, instr) in stream.instructions.iter().enumerate() {
        let last = if instr.is_last { " last" } else { "" };
        let unit = unit_name(instr.des_unit);
        let detail = match &instr.body {
            Body::Sync(b) => {
                let kind = match b.marker {
                    MARKER_BEGIN => "begin",
                    MARKER_END => "end",
                    MARKER_ITER => "iter",
                    _ => "?",
                };
                format!("sync layer={} {}", b.layer_id, kind)
            }
            Body::Load(b) => format!(
                "load  layer={} {} <- dram@{:#x} [{}..{}, {}..{}] of {}x{}{}",
                b.layer_id,
                unit_name(b.lmu),
                b.ddr_addr,
                b.start_row,
                b.end_row,
                b.start_col,
                b.end_col,
                b.m,
                b.n,
                if b.dep_layer == DEP_NONE { String::new() } else { format!(" dep={}", b.dep_layer) },
            ),
            Body::Store(b) => format!(
                "store layer={} {} -> dram@{:#x} [{}..{}, {}..{}] of {}x{}",
                b.layer_id, unit_name(b.lmu), b.ddr_addr, b.start_row, b.end_row, b.start_col, b.end_col, b.m, b.n,
            ),
            Body::Forward(b) => format!(
                "fwd   {} -> {} load_op={} send_op={} [{}..{}, {}..{}]",
                unit_name(b.src_pu), unit_name(b.des_pu), b.load_op, b.send_op, b.start_row, b.end_row, b.start_col, b.end_col,
            ),
            Body::Compute(b) => format!(
                "mm    {}x{}x{} lhs={} rhs={} ping={} pong={}",
                b.bound_i, b.bound_k, b.bound_j, unit_name(b.src_lhs), unit_name(b.src_rhs), b.ping_op, b.pong_op,
            ),
            Body::NonLinear(b) => {
                let kind = match b.nl_kind {
                    NL_SOFTMAX => "softmax",
                    NL_GELU => "gelu",
                    NL_LAYERNORM => "layernorm",
                    _ => "?",
                };
                format!("nl    {kind} {} rows x {} from {} to {}", b.rows, b.row_len, unit_name(b.src_lmu), unit_name(b.des_lmu))
            }
        };
        writeln!(s, "{idx:6}  {unit:6} {detail}{last}").unwrap();
    }
    s
}
