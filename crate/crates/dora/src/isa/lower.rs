//! Lowering: turn a verified schedule into one dispatch-ordered instruction
//! stream plus the DRAM data layout it addresses.
//!
//! Per layer the stream is bracketed by begin/end sync markers on every unit
//! the layer uses. Inside, one iteration of the LMU tile loop is opened by an
//! iteration marker on the memory interface; the loads, launches, non-linear
//! passes, and stores of that iteration follow in order. The simulator turns
//! each iteration into one overlap window, which is exactly how the analytical
//! model costs it.

use super::*;
use crate::arch::ArchConfig;
use crate::perfmodel::{CandidateTable, RuntimeParams, ResourceReq, ceil_div, chunk_units};
use crate::sched::{Schedule, ScheduleEntry};
use crate::workload::{LayerKind, NonLinearKind, WorkloadDag};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub addr: u32,
    pub rows: u64,
    pub cols: u64,
    /// Layer whose stores fill this region; None for external data.
    pub producer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DataLayout {
    pub regions: Vec<Region>,
}

impl DataLayout {
    pub fn find(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn by_addr(&self, addr: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.addr == addr)
    }

    /// External regions the caller must provide values for.
    pub fn inputs(&self) -> impl Iterator<Item = &Region> {
        self.regions.iter().filter(|r| r.producer.is_none())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoweringError {
    #[error("layer {layer}: {count} data inputs, at most 2 supported")]
    TooManyInputs { layer: usize, count: usize },
    #[error("layer {layer}: dimension {dim} = {value} exceeds the 16-bit instruction field")]
    DimTooLarge { layer: usize, dim: &'static str, value: u64 },
    #[error("DRAM address space exhausted")]
    AddressOverflow,
    #[error("{0}")]
    Unsupported(String),
}

/// Granted units of one entry, split into operand roles in id order.
struct Roles {
    lhs: Vec<u8>,
    rhs: Vec<u8>,
    out: Vec<u8>,
    nl: Vec<u8>,
    mmus: Vec<u8>,
    sfus: Vec<u8>,
}

fn assign_roles(entry: &ScheduleEntry, params: &RuntimeParams, req: ResourceReq) -> Result<Roles, LoweringError> {
    let split = params.lmu_split;
    if (split.total() as usize) > entry.lmu_ids.len() {
        return Err(LoweringError::Unsupported(format!(
            "layer {}: {} LMUs granted, split needs {}",
            entry.layer,
            entry.lmu_ids.len(),
            split.total()
        )));
    }
    let mut it = entry.lmu_ids.iter().map(|&i| lmu_unit(i));
    let take = |it: &mut dyn Iterator<Item = u8>, n: u32| it.take(n as usize).collect::<Vec<u8>>();
    let lhs = take(&mut it, split.lhs);
    let rhs = take(&mut it, split.rhs);
    let out = take(&mut it, split.out);
    let nl = take(&mut it, split.nl);
    let used_mmus = (params.mmu_m * params.mmu_n) as usize;
    let mmus: Vec<u8> = entry.mmu_ids.iter().take(used_mmus).map(|&i| mmu_unit(i)).collect();
    let sfus: Vec<u8> = entry.sfu_ids.iter().take(req.sfu as usize).map(|&i| sfu_unit(i)).collect();
    Ok(Roles { lhs, rhs, out, nl, mmus, sfus })
}

fn nl_code(kind: NonLinearKind) -> u8 {
    match kind {
        NonLinearKind::Softmax => NL_SOFTMAX,
        NonLinearKind::Gelu => NL_GELU,
        NonLinearKind::LayerNorm => NL_LAYERNORM,
    }
}

fn check_u16(layer: usize, dim: &'static str, value: u64) -> Result<u16, LoweringError> {
    u16::try_from(value).map_err(|_| LoweringError::DimTooLarge { layer, dim, value })
}

/// Plan DRAM regions: external inputs and weights in layer order, then every
/// layer's output. 64-byte aligned, addresses are element-region bases.
pub fn plan_layout(dag: &WorkloadDag, cfg: &ArchConfig) -> Result<DataLayout, LoweringError> {
    let mut layout = DataLayout::default();
    let mut cursor: u64 = 64;
    let mut push = |name: String, rows: u64, cols: u64, producer: Option<usize>| -> Result<(), LoweringError> {
        let bytes = rows * cols * cfg.elem_size;
        let addr = u32::try_from(cursor).map_err(|_| LoweringError::AddressOverflow)?;
        cursor = (cursor + bytes).div_ceil(64) * 64;
        if cursor > u32::MAX as u64 {
            return Err(LoweringError::AddressOverflow);
        }
        layout.regions.push(Region { name, addr, rows, cols, producer });
        Ok(())
    };
    for layer in &dag.layers {
        let i = layer.id;
        let (lhs_prod, rhs_prod) = data_producers(dag, i)?;
        if lhs_prod.is_none() {
            if layer.kind.has_matmul() {
                push(format!("in_{i}"), layer.m, layer.k, None)?;
            } else {
                push(format!("in_{i}"), layer.m, layer.n, None)?;
            }
        }
        if layer.kind.has_matmul() && rhs_prod.is_none() {
            push(format!("w_{i}"), layer.k, layer.n, None)?;
        }
        push(format!("out_{i}"), layer.m, layer.n, Some(i))?;
    }
    Ok(layout)
}

/// Resolve which predecessors feed the LHS and RHS slots by matching output
/// shapes; the rest are control-only dependencies.
fn data_producers(dag: &WorkloadDag, layer: usize) -> Result<(Option<usize>, Option<usize>), LoweringError> {
    let l = &dag.layers[layer];
    let preds = dag.predecessors(layer);
    let mut lhs = None;
    let mut rhs = None;
    for &p in &preds {
        let pl = &dag.layers[p];
        if l.kind.has_matmul() {
            if lhs.is_none() && pl.m == l.m && pl.n == l.k {
                lhs = Some(p);
            } else if rhs.is_none() && pl.m == l.k && pl.n == l.n {
                rhs = Some(p);
            }
        } else if lhs.is_none() && pl.m == l.m && pl.n == l.n {
            lhs = Some(p);
        }
    }
    let data_count = preds
        .iter()
        .filter(|&&p| {
            let pl = &dag.layers[p];
            if l.kind.has_matmul() {
                (pl.m == l.m && pl.n == l.k) || (pl.m == l.k && pl.n == l.n)
            } else {
                pl.m == l.m && pl.n == l.n
            }
        })
        .count();
    if data_count > 2 || (!l.kind.has_matmul() && data_count > 1) {
        return Err(LoweringError::TooManyInputs { layer, count: data_count });
    }
    Ok((lhs, rhs))
}

struct Emitter<'a> {
    cfg: &'a ArchConfig,
    out: Vec<Instruction>,
}

impl Emitter<'_> {
    fn sync(&mut self, unit: u8, layer: u16, marker: u8) {
        self.out.push(Instruction::new(unit, Body::Sync(SyncBody { layer_id: layer, marker })));
    }

    #[allow(clippy::too_many_arguments)]
    fn transfer(
        &mut self,
        load: bool,
        region: &Region,
        lmu: u8,
        layer: usize,
        dep: Option<usize>,
        rows: (u64, u64),
        cols: (u64, u64),
    ) -> Result<(), LoweringError> {
        let body = MiuBody {
            ddr_addr: region.addr,
            lmu,
            m: check_u16(layer, "region rows", region.rows)?,
            n: check_u16(layer, "region cols", region.cols)?,
            start_row: check_u16(layer, "start row", rows.0)?,
            end_row: check_u16(layer, "end row", rows.0 + rows.1)?,
            start_col: check_u16(layer, "start col", cols.0)?,
            end_col: check_u16(layer, "end col", cols.0 + cols.1)?,
            dep_layer: dep.map_or(DEP_NONE, |d| d as u16),
            layer_id: layer as u16,
        };
        let _ = self.cfg;
        let body = if load { Body::Load(body) } else { Body::Store(body) };
        self.out.push(Instruction::new(UNIT_MIU, body));
        Ok(())
    }

    fn forward(&mut self, des_unit: u8, body: LmuBody) {
        self.out.push(Instruction::new(des_unit, Body::Forward(body)));
    }
}

/// Lower a schedule to an instruction stream and the layout it addresses.
/// Entries are emitted in start-time order so stream order matches dispatch
/// order.
pub fn lower_schedule(
    dag: &WorkloadDag,
    table: &CandidateTable,
    cfg: &ArchConfig,
    schedule: &Schedule,
) -> Result<(InstructionStream, DataLayout), LoweringError> {
    let layout = plan_layout(dag, cfg)?;
    let mut em = Emitter { cfg, out: Vec::new() };

    for entry in schedule.entries_by_start() {
        let i = entry.layer;
        let layer = &dag.layers[i];
        let mode = table
            .modes(i)
            .get(entry.mode)
            .ok_or_else(|| LoweringError::Unsupported(format!("layer {i}: bad mode index")))?;
        let p = &mode.params;
        let roles = assign_roles(entry, p, mode.req)?;
        let layer_u16 = check_u16(i, "layer id", i as u64)?;

        let (lhs_prod, rhs_prod) = data_producers(dag, i)?;
        let mut controls: Vec<usize> = dag
            .predecessors(i)
            .into_iter()
            .filter(|&pd| Some(pd) != lhs_prod && Some(pd) != rhs_prod)
            .collect();
        controls.reverse();

        let lhs_region = match lhs_prod {
            Some(pd) => layout.find(&format!("out_{pd}")).unwrap().clone(),
            None => layout.find(&format!("in_{i}")).unwrap().clone(),
        };
        let out_region = layout.find(&format!("out_{i}")).unwrap().clone();

        let mut used_units: Vec<u8> = vec![UNIT_MIU];
        used_units.extend(roles.lhs.iter().chain(&roles.rhs).chain(&roles.out).chain(&roles.nl));
        used_units.extend(&roles.mmus);
        used_units.extend(&roles.sfus);
        for &u in &used_units {
            em.sync(u, layer_u16, MARKER_BEGIN);
        }

        match layer.kind {
            LayerKind::NonLinearOnly { nonlinear } => {
                let stripes = ceil_div(layer.m, p.lmu_m);
                for s in 0..stripes {
                    let r0 = s * p.lmu_m;
                    let tm = p.lmu_m.min(layer.m - r0);
                    em.sync(UNIT_MIU, layer_u16, MARKER_ITER);
                    for (idx, &(part0, take)) in chunk_units(tm, p.lmu_split.lhs).iter().enumerate() {
                        let dep = lhs_prod.or_else(|| controls.pop());
                        em.transfer(true, &lhs_region, roles.lhs[idx], i, dep, (r0 + part0, take), (0, layer.n))?;
                    }
                    for (idx, &sfu) in roles.sfus.iter().enumerate() {
                        let parts = chunk_units(tm, mode.req.sfu);
                        if let Some(&(_, take)) = parts.get(idx) {
                            em.out.push(Instruction::new(
                                sfu,
                                Body::NonLinear(SfuBody {
                                    src_lmu: roles.lhs[0],
                                    des_lmu: roles.out[0],
                                    rows: check_u16(i, "sfu rows", take)?,
                                    row_len: check_u16(i, "row length", layer.n)?,
                                    nl_kind: nl_code(nonlinear),
                                }),
                            ));
                        }
                    }
                    for (idx, &(part0, take)) in chunk_units(tm, p.lmu_split.out).iter().enumerate() {
                        em.transfer(false, &out_region, roles.out[idx], i, None, (r0 + part0, take), (0, layer.n))?;
                    }
                }
            }
            LayerKind::MatMul | LayerKind::MatMulFused { .. } => {
                let rhs_region = match rhs_prod {
                    Some(pd) => layout.find(&format!("out_{pd}")).unwrap().clone(),
                    None => layout.find(&format!("w_{i}")).unwrap().clone(),
                };
                let fused = layer.kind.nonlinear();
                let (sm0, sk0, sn0) = cfg.storage_tile();
                let sm = sm0 * p.mmu_m as u64;
                let sn = sn0 * p.mmu_n as u64;
                let ik_count = ceil_div(layer.k, p.lmu_k);
                for im in 0..ceil_div(layer.m, p.lmu_m) {
                    let r0 = im * p.lmu_m;
                    let tm = p.lmu_m.min(layer.m - r0);
                    for in_ in 0..ceil_div(layer.n, p.lmu_n) {
                        let c0 = in_ * p.lmu_n;
                        let tn = p.lmu_n.min(layer.n - c0);
                        for ik in 0..ik_count {
                            let k0 = ik * p.lmu_k;
                            let tk = p.lmu_k.min(layer.k - k0);
                            let last_k = ik + 1 == ik_count;
                            em.sync(UNIT_MIU, layer_u16, MARKER_ITER);
                            // Loads, row-split LHS and col-split RHS.
                            for (idx, &(part0, take)) in chunk_units(tm, p.lmu_split.lhs).iter().enumerate() {
                                let dep = lhs_prod.or_else(|| controls.pop());
                                em.transfer(true, &lhs_region, roles.lhs[idx], i, dep, (r0 + part0, take), (k0, tk))?;
                            }
                            for (idx, &(part0, take)) in chunk_units(tn, p.lmu_split.rhs).iter().enumerate() {
                                let dep = rhs_prod.or_else(|| controls.pop());
                                em.transfer(true, &rhs_region, roles.rhs[idx], i, dep, (k0, tk), (c0 + part0, take))?;
                            }
                            // Feed forwards (stream cost is charged at the MMU).
                            for &l in &roles.lhs {
                                em.forward(l, LmuBody {
                                    ping: (ik % 2) as u8,
                                    load_op: 0,
                                    send_op: 1,
                                    src_pu: l,
                                    des_pu: roles.mmus[0],
                                    count: check_u16(i, "rows", tm)?,
                                    start_row: 0,
                                    end_row: check_u16(i, "rows", tm)?,
                                    start_col: 0,
                                    end_col: check_u16(i, "cols", tk)?,
                                });
                            }
                            for &l in &roles.rhs {
                                em.forward(l, LmuBody {
                                    ping: (ik % 2) as u8,
                                    load_op: 0,
                                    send_op: 1,
                                    src_pu: l,
                                    des_pu: roles.mmus[0],
                                    count: check_u16(i, "rows", tk)?,
                                    start_row: 0,
                                    end_row: check_u16(i, "rows", tk)?,
                                    start_col: 0,
                                    end_col: check_u16(i, "cols", tn)?,
                                });
                            }
                            // Launch grid, one compute per group member.
                            for lm0 in (0..tm).step_by(sm as usize) {
                                let bm = sm.min(tm - lm0);
                                for lk0 in (0..tk).step_by(sk0 as usize) {
                                    let bk = sk0.min(tk - lk0);
                                    for ln0 in (0..tn).step_by(sn as usize) {
                                        let bn = sn.min(tn - ln0);
                                        for gr in 0..p.mmu_m as u64 {
                                            let mr0 = gr * sm0;
                                            if mr0 >= bm {
                                                continue;
                                            }
                                            let bi = sm0.min(bm - mr0);
                                            for gc in 0..p.mmu_n as u64 {
                                                let mc0 = gc * sn0;
                                                if mc0 >= bn {
                                                    continue;
                                                }
                                                let bj = sn0.min(bn - mc0);
                                                let mmu = roles.mmus[(gr * p.mmu_n as u64 + gc) as usize];
                                                em.out.push(Instruction::new(
                                                    mmu,
                                                    Body::Compute(MmuBody {
                                                        ping_op: (ik % 2) as u8,
                                                        pong_op: ((ik + 1) % 2) as u8,
                                                        bound_i: check_u16(i, "bound_i", bi)?,
                                                        bound_k: check_u16(i, "bound_k", bk)?,
                                                        bound_j: check_u16(i, "bound_j", bj)?,
                                                        src_lhs: roles.lhs[0],
                                                        src_rhs: roles.rhs[0],
                                                    }),
                                                ));
                                            }
                                        }
                                    }
                                }
                            }
                            // Drain into the accumulation LMUs.
                            for (idx, &(part0, take)) in chunk_units(tm, p.lmu_split.out).iter().enumerate() {
                                em.forward(roles.out[idx], LmuBody {
                                    ping: (ik % 2) as u8,
                                    load_op: if ik == 0 { 1 } else { 2 },
                                    send_op: 0,
                                    src_pu: roles.mmus[0],
                                    des_pu: roles.out[idx],
                                    count: check_u16(i, "rows", take)?,
                                    start_row: check_u16(i, "rows", part0)?,
                                    end_row: check_u16(i, "rows", part0 + take)?,
                                    start_col: 0,
                                    end_col: check_u16(i, "cols", tn)?,
                                });
                            }
                            if last_k {
                                if let Some(nl) = fused {
                                    for (idx, &sfu) in roles.sfus.iter().enumerate() {
                                        let parts = chunk_units(tm, mode.req.sfu);
                                        if let Some(&(_, take)) = parts.get(idx) {
                                            em.out.push(Instruction::new(
                                                sfu,
                                                Body::NonLinear(SfuBody {
                                                    src_lmu: roles.out[0],
                                                    des_lmu: roles.nl[0],
                                                    rows: check_u16(i, "sfu rows", take)?,
                                                    row_len: check_u16(i, "row length", tn)?,
                                                    nl_kind: nl_code(nl),
                                                }),
                                            ));
                                        }
                                    }
                                }
                                let (store_lmus, store_parts) = if fused.is_some() {
                                    (&roles.nl, p.lmu_split.nl)
                                } else {
                                    (&roles.out, p.lmu_split.out)
                                };
                                for (idx, &(part0, take)) in chunk_units(tm, store_parts).iter().enumerate() {
                                    em.transfer(false, &out_region, store_lmus[idx], i, None, (r0 + part0, take), (c0, tn))?;
                                }
                            }
                        }
                    }
                }
            }
        }

        for &u in &used_units {
            em.sync(u, layer_u16, MARKER_END);
        }
    }

    let mut stream = InstructionStream { arch_hash: cfg.config_hash(), instructions: em.out };
    stream.finalize_last_flags();
    Ok((stream, layout))
}
