use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Binder, ParamGrads};
use crate::model::{region_tokens, slide_from_regions, stage1_forward, stage2_forward, FullOutputs, ModelConfig};
use crate::synth::{RegionSize, PATCHES_PER_LARGE, TOKENS_PER_PATCH, TOKEN_DIM};
use crate::tensor::{BufferId, BufferKind, Element, Graph, MemoryEvent, MemoryTrace, PlannedMove, Pool, PoolMeter, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CheckpointMode {
    #[default]
    None,
    PerRegion,
    PerStage,
}

impl std::str::FromStr for CheckpointMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(CheckpointMode::None),
            "region" | "per_region" => Ok(CheckpointMode::PerRegion),
            "stage" | "per_stage" => Ok(CheckpointMode::PerStage),
            other => Err(Error::Config(format!("unknown checkpoint mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointPolicy {
    pub mode: CheckpointMode,
    pub fast_budget_bytes: Option<u64>,
}

impl CheckpointPolicy {
    pub fn new(mode: CheckpointMode, fast_budget_bytes: Option<u64>) -> Self {
        CheckpointPolicy { mode, fast_budget_bytes }
    }
}

/// One closed group of a checkpointed forward.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub group: usize,
    pub label: String,
    pub start: usize,
    pub end: usize,
    pub outputs: Vec<usize>,
}

pub fn segment_table<T: Element>(g: &Graph<T>) -> Vec<Segment> {
    g.groups()
        .iter()
        .enumerate()
        .filter(|(_, info)| info.closed)
        .map(|(i, info)| Segment {
            group: i,
            label: info.label.clone(),
            start: info.start,
            end: info.end,
            outputs: info.outputs.iter().map(|v| v.index()).collect(),
        })
        .collect()
}

fn check_slide_tokens<T: Element>(slide_tokens: &crate::tensor::Tensor<T>, grid: usize) -> Result<()> {
    let want = [grid * grid * PATCHES_PER_LARGE, TOKENS_PER_PATCH, TOKEN_DIM];
    if slide_tokens.shape() != want {
        return Err(Error::shape("checkpointed_forward", slide_tokens.shape(), &want));
    }
    Ok(())
}

/// The hierarchy under a checkpoint layout.
///
/// `None` builds the plain region-by-region graph. `PerRegion` wraps each
/// region's stage-1/stage-2 work in a group that keeps only the region
/// embedding. `PerStage` runs stage 1 over every region, then stage 2, then
/// stage 3, each as one group. Patch embeddings are only readable under
/// `None` and `PerStage`.
pub fn checkpointed_forward<T: Element>(
    g: &mut Graph<T>,
    p: &mut Binder<T>,
    cfg: &ModelConfig,
    slide_tokens: &crate::tensor::Tensor<T>,
    grid: usize,
    mode: CheckpointMode,
) -> Result<(FullOutputs, Vec<Segment>)> {
    check_slide_tokens(slide_tokens, grid)?;
    let regions = grid * grid;
    let d = cfg.embed_dim();
    let mut patch_embeds = Vec::with_capacity(regions);
    let mut region_embeds = Vec::with_capacity(regions);
    let slide_embed = match mode {
        CheckpointMode::None | CheckpointMode::PerRegion => {
            for r in 0..regions {
                let gid = match mode {
                    CheckpointMode::PerRegion => Some(g.begin_group(format!("region{r}"), true)?),
                    _ => None,
                };
                let x = g.constant(region_tokens(slide_tokens, r)?)?;
                let pe = stage1_forward(g, p, cfg, x)?;
                let seq = g.reshape(pe, &[1, PATCHES_PER_LARGE, d])?;
                let re = stage2_forward(g, p, cfg, seq, RegionSize::Large)?;
                if let Some(gid) = gid {
                    g.end_group(gid, &[re])?;
                }
                patch_embeds.push(pe);
                region_embeds.push(re);
            }
            slide_from_regions(g, p, cfg, &region_embeds, grid)?
        }
        CheckpointMode::PerStage => {
            let gid = g.begin_group("stage1", true)?;
            for r in 0..regions {
                let x = g.constant(region_tokens(slide_tokens, r)?)?;
                patch_embeds.push(stage1_forward(g, p, cfg, x)?);
            }
            g.end_group(gid, &patch_embeds)?;
            let gid = g.begin_group("stage2", true)?;
            for &pe in &patch_embeds {
                let seq = g.reshape(pe, &[1, PATCHES_PER_LARGE, d])?;
                region_embeds.push(stage2_forward(g, p, cfg, seq, RegionSize::Large)?);
            }
            g.end_group(gid, &region_embeds)?;
            let gid = g.begin_group("stage3", true)?;
            let s = slide_from_regions(g, p, cfg, &region_embeds, grid)?;
            g.end_group(gid, &[s])?;
            s
        }
    };
    let outputs = FullOutputs {
        patch_embeds,
        region_embeds,
        slide_embed,
    };
    Ok((outputs, segment_table(g)))
}

/// Reverse pass over a checkpointed graph; released segments are rebuilt
/// from their saved inputs on demand.
pub fn recompute_backward<T: Element>(g: &mut Graph<T>, root: Var, segments: &[Segment]) -> Result<crate::tensor::Gradients<T>> {
    for s in segments {
        match g.groups().get(s.group) {
            Some(info) if info.closed && info.start == s.start && info.end == s.end => {}
            _ => {
                return Err(Error::Checkpoint(format!(
                    "segment {} ({}) does not match the graph",
                    s.group, s.label
                )))
            }
        }
    }
    g.backward(root)
}

struct Live {
    bytes: u64,
    pool: Pool,
    group: Option<usize>,
    pinned: bool,
}

/// Replays a reference trace and decides which completed-group buffers go
/// to HOST (oldest group first) and when they come back.
struct Planner {
    budget: Option<u64>,
    live: BTreeMap<BufferId, Live>,
    by_group: BTreeMap<usize, BTreeSet<usize>>,
    /// FAST bytes of unpinned values per group.
    group_fast: BTreeMap<usize, u64>,
    closed: Vec<usize>,
    closed_set: BTreeSet<usize>,
    rebuilding: Option<usize>,
    protect: BTreeSet<usize>,
    fast: u64,
    required_peak: u64,
    moves: Vec<PlannedMove>,
}

impl Planner {
    fn new(budget: Option<u64>) -> Self {
        Planner {
            budget,
            live: BTreeMap::new(),
            by_group: BTreeMap::new(),
            group_fast: BTreeMap::new(),
            closed: Vec::new(),
            closed_set: BTreeSet::new(),
            rebuilding: None,
            protect: BTreeSet::new(),
            fast: 0,
            required_peak: 0,
            moves: Vec::new(),
        }
    }

    fn is_evictable(&self, id: &BufferId, b: &Live) -> bool {
        id.kind == BufferKind::Value
            && b.pool == Pool::Fast
            && !b.pinned
            && !self.protect.contains(&id.node)
            && b.group.is_some_and(|g| self.closed_set.contains(&g) && self.rebuilding != Some(g))
    }

    fn evictable_bytes(&self) -> u64 {
        let groups: u64 = self
            .closed
            .iter()
            .filter(|&&g| self.rebuilding != Some(g))
            .map(|g| self.group_fast.get(g).copied().unwrap_or(0))
            .sum();
        let shielded: u64 = self
            .protect
            .iter()
            .filter_map(|&n| {
                let b = self.live.get(&value_buf(n))?;
                let counted = b.pool == Pool::Fast
                    && !b.pinned
                    && b.group.is_some_and(|g| self.closed_set.contains(&g) && self.rebuilding != Some(g));
                counted.then_some(b.bytes)
            })
            .sum();
        groups - shielded
    }

    fn set_pool(&mut self, node: usize, pool: Pool) {
        let b = self.live.get_mut(&value_buf(node)).expect("live buffer");
        if b.pool == pool {
            return;
        }
        b.pool = pool;
        let (bytes, group, pinned) = (b.bytes, b.group, b.pinned);
        match pool {
            Pool::Fast => self.fast += bytes,
            Pool::Host => self.fast -= bytes,
        }
        if let (Some(g), false) = (group, pinned) {
            let c = self.group_fast.entry(g).or_default();
            match pool {
                Pool::Fast => *c += bytes,
                Pool::Host => *c -= bytes,
            }
        }
    }

    fn make_room(&mut self, at: usize, need: u64) -> Result<()> {
        let required = self.fast + need - self.evictable_bytes();
        self.required_peak = self.required_peak.max(required);
        let Some(budget) = self.budget else {
            return Ok(());
        };
        if self.fast + need <= budget {
            return Ok(());
        }
        if required > budget {
            return Err(Error::Budget {
                live: self.fast + need,
                peak: self.fast + need,
                budget,
                advisory_min: None,
            });
        }
        for gi in 0..self.closed.len() {
            let group = self.closed[gi];
            let nodes: Vec<usize> = self.by_group.get(&group).map(|s| s.iter().copied().collect()).unwrap_or_default();
            for node in nodes {
                if self.fast + need <= budget {
                    return Ok(());
                }
                let id = value_buf(node);
                let Some(b) = self.live.get(&id) else { continue };
                if !self.is_evictable(&id, b) {
                    continue;
                }
                self.set_pool(node, Pool::Host);
                self.moves.push(PlannedMove { at, node, to: Pool::Host });
            }
        }
        if self.fast + need > budget {
            return Err(Error::Contract("offload planner left the budget unmet".into()));
        }
        Ok(())
    }

    fn step(&mut self, at: usize, e: &MemoryEvent) -> Result<()> {
        match e {
            MemoryEvent::Alloc {
                buffer,
                bytes,
                group,
                pinned,
                ..
            } => {
                self.make_room(at, *bytes)?;
                self.live.insert(
                    *buffer,
                    Live {
                        bytes: *bytes,
                        pool: Pool::Host,
                        group: *group,
                        pinned: *pinned,
                    },
                );
                if buffer.kind == BufferKind::Value {
                    if let Some(g) = group {
                        self.by_group.entry(*g).or_default().insert(buffer.node);
                    }
                    self.set_pool(buffer.node, Pool::Fast);
                } else {
                    self.live.get_mut(buffer).expect("live").pool = Pool::Fast;
                    self.fast += bytes;
                }
            }
            MemoryEvent::Free { buffer, .. } => {
                if buffer.kind == BufferKind::Value && self.live.contains_key(buffer) {
                    self.set_pool(buffer.node, Pool::Host);
                    if let Some(g) = self.live[buffer].group {
                        if let Some(s) = self.by_group.get_mut(&g) {
                            s.remove(&buffer.node);
                        }
                    }
                    self.live.remove(buffer);
                } else if let Some(b) = self.live.remove(buffer) {
                    self.fast -= b.bytes;
                }
            }
            MemoryEvent::Use { nodes } => {
                self.protect = nodes.iter().copied().collect();
                let fetch: BTreeMap<usize, u64> = nodes
                    .iter()
                    .filter_map(|&n| self.live.get(&value_buf(n)).filter(|b| b.pool == Pool::Host).map(|b| (n, b.bytes)))
                    .collect();
                let need = fetch.values().sum();
                self.make_room(at, need)?;
                for node in fetch.into_keys() {
                    self.set_pool(node, Pool::Fast);
                    self.moves.push(PlannedMove { at, node, to: Pool::Fast });
                }
            }
            MemoryEvent::GroupEnd { group } => {
                if self.closed_set.insert(*group) {
                    self.closed.push(*group);
                }
            }
            MemoryEvent::Recompute { group } => self.rebuilding = Some(*group),
            MemoryEvent::Move { .. } => {}
        }
        Ok(())
    }

    fn run(mut self, trace: &MemoryTrace) -> Result<Self> {
        for (at, e) in trace.events.iter().filter(|e| e.is_reference()).enumerate() {
            self.step(at, e)?;
        }
        Ok(self)
    }
}

fn value_buf(node: usize) -> BufferId {
    BufferId {
        node,
        kind: BufferKind::Value,
    }
}

/// Smallest FAST budget an offload schedule can meet for this trace: the
/// peak of everything that cannot leave FAST at each event.
pub fn min_feasible_budget(trace: &MemoryTrace) -> Result<u64> {
    Ok(Planner::new(None).run(trace)?.required_peak)
}

/// Moves that keep a re-run of the traced computation within
/// `fast_budget_bytes`. Buffers of completed groups are sent to HOST
/// oldest-group first and fetched back right before they are read.
pub fn offload_plan(trace: &MemoryTrace, fast_budget_bytes: u64) -> Result<Vec<PlannedMove>> {
    let min = min_feasible_budget(trace)?;
    if fast_budget_bytes < min {
        let peak = trace.replay()?.fast_peak_bytes;
        return Err(Error::Budget {
            live: min,
            peak,
            budget: fast_budget_bytes,
            advisory_min: Some(min),
        });
    }
    Ok(Planner::new(Some(fast_budget_bytes)).run(trace)?.moves)
}

/// Result of one forward/backward under a policy.
#[derive(Clone, Debug)]
pub struct PolicyRun<T> {
    pub loss: f64,
    pub grads: ParamGrads<T>,
    pub meter: PoolMeter,
    pub trace: Option<MemoryTrace>,
    pub plan: Vec<PlannedMove>,
}

/// Builds a graph with `build`, runs backward from the returned root and
/// collects parameter gradients. With a budget, an unbudgeted reference pass
/// is traced first and the computation re-run under an offload schedule.
/// `build` must construct the same graph every time it is called.
pub fn run_under_policy<'a, T, F>(policy: &CheckpointPolicy, keep_trace: bool, mut build: F) -> Result<PolicyRun<T>>
where
    T: Element,
    F: FnMut(&mut Graph<T>) -> Result<(Var, Binder<'a, T>)>,
{
    let plan = match policy.fast_budget_bytes {
        None => Vec::new(),
        Some(budget) => {
            let mut g = Graph::new().with_trace();
            let (root, _) = build(&mut g)?;
            g.backward(root)?;
            let trace = g.take_trace().expect("traced");
            offload_plan(&trace, budget)?
        }
    };
    let mut g = Graph::new().with_budget(policy.fast_budget_bytes).with_plan(plan.clone());
    if keep_trace {
        g = g.with_trace();
    }
    let (root, binder) = build(&mut g)?;
    let loss = g.scalar_value(root)?.as_f64();
    let grads = g.backward(root)?;
    Ok(PolicyRun {
        loss,
        grads: binder.grads(&grads),
        meter: g.meter().clone(),
        trace: g.take_trace(),
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Three "regions" of work, each `x → tanh → tanh`, summed at the end.
    fn toy(g: &mut Graph<f64>, checkpoint: bool) -> Result<Var> {
        let w = g.leaf(Tensor::full(&[64], 0.5), true)?;
        let mut outs = Vec::new();
        for r in 0..3 {
            let gid = g.begin_group(format!("r{r}"), checkpoint)?;
            let x = g.constant(Tensor::full(&[64], r as f64 + 1.0))?;
            let h = g.mul(x, w)?;
            let h = g.tanh(h)?;
            let h = g.tanh(h)?;
            let s = g.sum(h)?;
            g.end_group(gid, &[s])?;
            outs.push(s);
        }
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = g.add(acc, o)?;
        }
        Ok(acc)
    }

    fn traced(checkpoint: bool) -> (MemoryTrace, Tensor<f64>) {
        let mut g = Graph::new().with_trace();
        let root = toy(&mut g, checkpoint).unwrap();
        let grads = g.backward(root).unwrap();
        let gw = grads.iter().next().unwrap().1.clone();
        (g.take_trace().unwrap(), gw)
    }

    fn execute(plan: Vec<PlannedMove>, budget: u64) -> Result<(PoolMeter, Tensor<f64>)> {
        let mut g = Graph::new().with_budget(Some(budget)).with_plan(plan);
        let root = toy(&mut g, true)?;
        let grads = g.backward(root)?;
        let gw = grads.iter().next().unwrap().1.clone();
        Ok((g.meter().clone(), gw))
    }

    #[test]
    fn tight_budget_is_met_and_gradients_unchanged() {
        let (trace, reference) = traced(true);
        let peak = trace.replay().unwrap().fast_peak_bytes;
        let min = min_feasible_budget(&trace).unwrap();
        assert!(min < peak, "offload should lower the requirement: {min} vs {peak}");
        let plan = offload_plan(&trace, min).unwrap();
        assert!(!plan.is_empty());
        let (meter, gw) = execute(plan, min).unwrap();
        assert!(meter.fast_peak_bytes <= min);
        assert!(meter.transfer_bytes_fast_to_host > 0);
        assert!(gw.bit_eq(&reference));
    }

    #[test]
    fn infeasible_budget_reports_minimum() {
        let (trace, _) = traced(true);
        let min = min_feasible_budget(&trace).unwrap();
        match offload_plan(&trace, min - 1) {
            Err(Error::Budget { advisory_min, budget, .. }) => {
                assert_eq!(advisory_min, Some(min));
                assert_eq!(budget, min - 1);
            }
            other => panic!("expected a budget error, got {other:?}"),
        }
    }

    #[test]
    fn generous_budget_needs_no_moves() {
        let (trace, _) = traced(true);
        let peak = trace.replay().unwrap().fast_peak_bytes;
        assert!(offload_plan(&trace, peak).unwrap().is_empty());
    }

    #[test]
    fn without_groups_nothing_is_evictable() {
        let mut g = Graph::new().with_trace();
        let x = g.leaf(Tensor::full(&[32], 1.0), true).unwrap();
        let y = g.exp(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let trace = g.take_trace().unwrap();
        assert_eq!(min_feasible_budget(&trace).unwrap(), trace.replay().unwrap().fast_peak_bytes);
    }

    #[test]
    fn fetches_follow_evictions() {
        let (trace, _) = traced(true);
        let min = min_feasible_budget(&trace).unwrap();
        let plan = offload_plan(&trace, min).unwrap();
        let mut on_host = BTreeSet::new();
        for m in &plan {
            match m.to {
                Pool::Host => assert!(on_host.insert(m.node)),
                Pool::Fast => assert!(on_host.remove(&m.node)),
            }
        }
        let (meter, _) = execute(plan, min).unwrap();
        assert!(meter.transfer_bytes_host_to_fast > 0);
        assert!(meter.transfer_bytes_host_to_fast <= meter.transfer_bytes_fast_to_host);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("region".parse::<CheckpointMode>().unwrap(), CheckpointMode::PerRegion);
        assert_eq!("STAGE".parse::<CheckpointMode>().unwrap(), CheckpointMode::PerStage);
        assert!("layer".parse::<CheckpointMode>().is_err());
    }
}
