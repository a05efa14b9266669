//! Symbolic simulators for how subgraph orders propagate through encoders.
//!
//! Three regimes:
//! - layer-level (`san`): each layer joins pairs from the previous layer's
//!   representation, so the largest reachable order doubles per layer and is
//!   capped by the sentence length;
//! - sentence-level (`rnn`): within a layer, step t joins the running state
//!   with the token at t, so one full pass reaches the sentence length;
//! - `split`: the split-attention regime, where a layer consumes a
//!   (previous, incremental) pair and emits a high group (incremental paired
//!   with itself), a middle group (previous crossed with incremental), and a
//!   low group (previous carried through a linear path with no pairing).
//!
//! Each trace step carries, per slot, the reachable-order set from the
//! order-level recurrence, the interval-arithmetic envelope, and derivation
//! counts. For the split regime the stated high/middle/low intervals
//! ([2^(i-1), 2^i], [2^(i-2), 2^(i-1)], [1, 2^(i-2)]) are reported side by
//! side with the derived ones rather than silently reconciled: the recurrence
//! lets low-order content re-enter the pairing pools, so the derived sets are
//! wider.
//!
//! Derivation counting is order-level: a derivation is the initial order-1
//! item or a join event (left derivation, right derivation, layer). Under the
//! baseline recurrence every ordered pair of existing derivations is re-joined
//! at every later layer; under the split recurrence a pair is joined only at
//! the first layer where both exist, and the low path joins nothing. Node
//! identity and attach-point choices scale both regimes identically and are
//! left out. Counts saturate at `u128::MAX`. The sentence-level grid has no
//! canonical de-duplication across its two feed paths, so counts there are
//! only tracked for layer 0.
//!
//! For sentence lengths up to [`RNN_MASK_EXACT_LIMIT`] the rnn simulator
//! computes reachable node sets exhaustively over bitmasks (the order-level
//! recurrence alone can overshoot when node-disjointness binds, e.g. layer 2
//! at step 2); beyond that the arithmetic recurrence is used and flagged
//! non-exact for layers past the first.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::json::Json;

/// Exhaustive bitmask computation limit for the sentence-level grid.
pub const RNN_MASK_EXACT_LIMIT: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    San,
    Rnn,
    Split,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::San => "san",
            Regime::Rnn => "rnn",
            Regime::Split => "split",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderInterval {
    pub lo: u32,
    pub hi: u32,
}

impl OrderInterval {
    pub fn new(lo: u32, hi: u32) -> Self {
        assert!(lo >= 1 && lo <= hi, "bad interval [{lo}, {hi}]");
        OrderInterval { lo, hi }
    }

    /// Pairing of two intervals: [a,b] + [c,d] = [a+c, b+d], capped at the
    /// sentence length; empty when either side is empty or the low end
    /// exceeds the cap.
    pub fn join(a: Option<Self>, b: Option<Self>, cap: u32) -> Option<Self> {
        let (a, b) = (a?, b?);
        let lo = a.lo + b.lo;
        if lo > cap {
            return None;
        }
        Some(OrderInterval::new(lo, (a.hi + b.hi).min(cap)))
    }

    pub fn hull(a: Option<Self>, b: Option<Self>) -> Option<Self> {
        match (a, b) {
            (Some(x), Some(y)) => Some(OrderInterval::new(x.lo.min(y.lo), x.hi.max(y.hi))),
            (x, None) => x,
            (None, y) => y,
        }
    }

    pub fn from_set(set: &BTreeSet<u32>) -> Option<Self> {
        let lo = *set.iter().next()?;
        let hi = *set.iter().next_back()?;
        Some(OrderInterval::new(lo, hi))
    }

    pub fn contains(&self, o: u32) -> bool {
        self.lo <= o && o <= self.hi
    }
}

pub type CountMap = BTreeMap<u32, u128>;

fn count_add(into: &mut CountMap, order: u32, n: u128) {
    if n == 0 {
        return;
    }
    let slot = into.entry(order).or_insert(0);
    *slot = slot.saturating_add(n);
}

fn count_merge(into: &mut CountMap, from: &CountMap) {
    for (&o, &n) in from {
        count_add(into, o, n);
    }
}

/// Pairing convolution: out[a+b] += x[a] * y[b] for a+b <= cap.
fn count_conv(x: &CountMap, y: &CountMap, cap: u32) -> CountMap {
    let mut out = CountMap::new();
    for (&a, &na) in x {
        for (&b, &nb) in y {
            if a + b > cap {
                break;
            }
            count_add(&mut out, a + b, na.saturating_mul(nb));
        }
    }
    out
}

fn set_join(x: &BTreeSet<u32>, y: &BTreeSet<u32>, cap: u32) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for &a in x {
        for &b in y {
            if a + b > cap {
                break;
            }
            out.insert(a + b);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    /// Whole representation (san and rnn).
    Full,
    /// Previous-representation state after the layer (split).
    Prev,
    /// Incremental-representation state after the layer (split).
    Incr,
    High,
    Middle,
    Low,
    StatedHigh,
    StatedMiddle,
    StatedLow,
}

impl Slot {
    pub fn name(self) -> &'static str {
        match self {
            Slot::Full => "full",
            Slot::Prev => "prev",
            Slot::Incr => "incr",
            Slot::High => "high",
            Slot::Middle => "middle",
            Slot::Low => "low",
            Slot::StatedHigh => "stated_high",
            Slot::StatedMiddle => "stated_middle",
            Slot::StatedLow => "stated_low",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SlotOrders {
    /// Interval-arithmetic envelope; `None` for an empty slot.
    pub interval: Option<OrderInterval>,
    /// Reachable orders from the order-level recurrence (empty = empty slot).
    pub orders: BTreeSet<u32>,
    /// Whether `orders` is exact rather than an upper envelope.
    pub exact: bool,
    /// Derivation counts. Group slots carry the derivations newly generated
    /// there; `Full`/`Prev`/`Incr` carry their cumulative pools.
    pub counts: Option<CountMap>,
}

impl SlotOrders {
    fn stated_interval(iv: Option<OrderInterval>) -> Self {
        SlotOrders {
            interval: iv,
            orders: BTreeSet::new(),
            exact: false,
            counts: None,
        }
    }

    pub fn max_order(&self) -> u32 {
        self.orders.iter().next_back().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct TraceStep {
    pub layer: u32,
    /// Time step within the layer; sentence-level regime only.
    pub time: Option<u32>,
    pub slots: Vec<(Slot, SlotOrders)>,
}

impl TraceStep {
    pub fn slot(&self, s: Slot) -> Option<&SlotOrders> {
        self.slots.iter().find(|(k, _)| *k == s).map(|(_, v)| v)
    }
}

#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub regime: Regime,
    pub layers: u32,
    pub sentence_len: u32,
    pub steps: Vec<TraceStep>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimError {
    OrderOutOfRange { order: u32, max: u32, layer: u32 },
    CountsUnavailable { regime: Regime },
    NoSuchStep { layer: u32 },
}

impl core::fmt::Display for SimError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SimError::OrderOutOfRange { order, max, layer } => {
                write!(f, "order {order} exceeds max {max} at layer {layer}")
            }
            SimError::CountsUnavailable { regime } => write!(
                f,
                "derivation counts are not tracked past layer 0 for regime {}",
                regime.name()
            ),
            SimError::NoSuchStep { layer } => write!(f, "trace has no layer {layer}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SimError {}

impl IterationTrace {
    /// Step for a layer; for the sentence-level regime this is the last time
    /// step of that layer.
    pub fn layer_step(&self, layer: u32) -> Option<&TraceStep> {
        self.steps
            .iter()
            .filter(|s| s.layer == layer)
            .max_by_key(|s| s.time.unwrap_or(0))
    }

    /// Largest reachable order of the representation content at a layer.
    pub fn max_order(&self, layer: u32) -> u32 {
        let Some(step) = self.layer_step(layer) else {
            return 0;
        };
        match self.regime {
            Regime::San | Regime::Rnn => step.slot(Slot::Full).map(|s| s.max_order()).unwrap_or(0),
            Regime::Split => {
                let p = step.slot(Slot::Prev).map(|s| s.max_order()).unwrap_or(0);
                let i = step.slot(Slot::Incr).map(|s| s.max_order()).unwrap_or(0);
                p.max(i)
            }
        }
    }

    /// Max orders for layers 1..=n.
    pub fn max_orders_per_layer(&self) -> Vec<u32> {
        (1..=self.layers).map(|i| self.max_order(i)).collect()
    }

    /// Representation content (reachable orders) at a layer: the full slot,
    /// or the union of the previous/incremental state for the split regime.
    pub fn content_orders(&self, layer: u32) -> BTreeSet<u32> {
        let Some(step) = self.layer_step(layer) else {
            return BTreeSet::new();
        };
        match self.regime {
            Regime::San | Regime::Rnn => step
                .slot(Slot::Full)
                .map(|s| s.orders.clone())
                .unwrap_or_default(),
            Regime::Split => {
                let mut out = step
                    .slot(Slot::Prev)
                    .map(|s| s.orders.clone())
                    .unwrap_or_default();
                if let Some(i) = step.slot(Slot::Incr) {
                    out.extend(i.orders.iter().copied());
                }
                out
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut steps = Json::array();
        for st in &self.steps {
            let mut slots = Json::array();
            for (slot, so) in &st.slots {
                let mut obj = Json::object().str("slot", slot.name());
                match so.interval {
                    Some(iv) => obj = obj.num("lo", iv.lo).num("hi", iv.hi),
                    None => obj = obj.raw("lo", "null").raw("hi", "null"),
                }
                let mut orders = Json::array();
                for &o in &so.orders {
                    orders = orders.item_num(o);
                }
                obj = obj.bool("exact", so.exact).raw("orders", &orders.finish());
                if let Some(counts) = &so.counts {
                    let mut c = Json::object();
                    for (&o, &n) in counts {
                        c = c.str(&format!("{o}"), &format!("{n}"));
                    }
                    obj = obj.raw("counts", &c.finish());
                }
                slots = slots.item(&obj.finish());
            }
            let mut step_obj = Json::object().num("layer", st.layer);
            step_obj = match st.time {
                Some(t) => step_obj.num("time", t),
                None => step_obj.raw("time", "null"),
            };
            steps = steps.item(&step_obj.raw("slots", &slots.finish()).finish());
        }
        Json::object()
            .str("regime", self.regime.name())
            .num("layers", self.layers)
            .num("sentence_len", self.sentence_len)
            .raw("steps", &steps.finish())
            .finish()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime,layer,time,slot,lo,hi,exact,orders\n");
        for st in &self.steps {
            for (slot, so) in &st.slots {
                let (lo, hi) = match so.interval {
                    Some(iv) => (format!("{}", iv.lo), format!("{}", iv.hi)),
                    None => (String::new(), String::new()),
                };
                let orders = so
                    .orders
                    .iter()
                    .map(|o| format!("{o}"))
                    .collect::<Vec<_>>()
                    .join(" ");
                let time = st.time.map(|t| format!("{t}")).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    self.regime.name(),
                    st.layer,
                    time,
                    slot.name(),
                    lo,
                    hi,
                    so.exact,
                    orders
                ));
            }
        }
        out
    }
}

/// Layer-level iteration: layer i pairs anything from layer i-1 with anything
/// from layer i-1 and keeps what it had, so the max order is min(2^i, L).
pub fn simulate_san(layers: u32, sentence_len: u32) -> IterationTrace {
    assert!(sentence_len >= 1);
    let cap = sentence_len;
    let mut orders = BTreeSet::from([1u32]);
    let mut counts = CountMap::from([(1u32, 1u128)]);
    let mut interval = Some(OrderInterval::new(1, 1));
    let mut steps = vec![TraceStep {
        layer: 0,
        time: None,
        slots: vec![(
            Slot::Full,
            SlotOrders {
                interval,
                orders: orders.clone(),
                exact: true,
                counts: Some(counts.clone()),
            },
        )],
    }];
    for layer in 1..=layers {
        let joined = set_join(&orders, &orders, cap);
        orders.extend(joined);
        let new = count_conv(&counts, &counts, cap);
        count_merge(&mut counts, &new);
        interval = OrderInterval::hull(interval, OrderInterval::join(interval, interval, cap));
        steps.push(TraceStep {
            layer,
            time: None,
            slots: vec![(
                Slot::Full,
                SlotOrders {
                    interval,
                    orders: orders.clone(),
                    exact: true,
                    counts: Some(counts.clone()),
                },
            )],
        });
    }
    IterationTrace {
        regime: Regime::San,
        layers,
        sentence_len,
        steps,
    }
}

/// Bitset over all subsets of an n-node universe.
struct MaskSet {
    bits: Vec<u64>,
}

impl MaskSet {
    fn new(universe: u32) -> Self {
        let n_masks = 1usize << universe;
        MaskSet {
            bits: vec![0u64; n_masks.div_ceil(64)],
        }
    }

    #[inline]
    fn insert(&mut self, mask: usize) {
        self.bits[mask / 64] |= 1u64 << (mask % 64);
    }

    #[inline]
    fn contains(&self, mask: usize) -> bool {
        self.bits[mask / 64] & (1u64 << (mask % 64)) != 0
    }

    fn union_into(&self, out: &mut MaskSet) {
        for (o, &b) in out.bits.iter_mut().zip(self.bits.iter()) {
            *o |= b;
        }
    }

    fn popcount_orders(&self, universe: u32) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        for mask in 1usize..(1usize << universe) {
            if self.contains(mask) {
                out.insert(mask.count_ones());
            }
        }
        out
    }
}

/// All disjoint unions a | b of nonempty a from `left`, b from `right`.
fn mask_join(left: &MaskSet, right: &MaskSet, universe: u32, out: &mut MaskSet) {
    for s in 1usize..(1usize << universe) {
        // Enumerate proper submasks a of s; the complement within s is forced.
        let mut a = (s - 1) & s;
        while a != 0 {
            if left.contains(a) && right.contains(s & !a) {
                out.insert(s);
                break;
            }
            a = (a - 1) & s;
        }
    }
}

/// Sentence-level iteration: state at (layer i, time t) merges the lower
/// layer's state at t, its own state at t-1, and their disjoint joins.
pub fn simulate_rnn(layers: u32, sentence_len: u32) -> IterationTrace {
    assert!(sentence_len >= 1);
    let l = sentence_len;
    let use_masks = l <= RNN_MASK_EXACT_LIMIT;

    // Order-level recurrence over the (layer, time) grid.
    let idx = |i: u32, t: u32| (i as usize) * (l as usize + 1) + t as usize;
    let mut sets: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); (layers as usize + 1) * (l as usize + 1)];
    let mut ivs: Vec<Option<OrderInterval>> = vec![None; sets.len()];
    for t in 1..=l {
        sets[idx(0, t)] = BTreeSet::from([1]);
        ivs[idx(0, t)] = Some(OrderInterval::new(1, 1));
    }
    for i in 1..=layers {
        for t in 1..=l {
            let mut s: BTreeSet<u32> = sets[idx(i - 1, t)].clone();
            s.extend(sets[idx(i, t - 1)].iter().copied());
            s.extend(set_join(&sets[idx(i - 1, t)], &sets[idx(i, t - 1)], t));
            sets[idx(i, t)] = s;
            let below = ivs[idx(i - 1, t)];
            let prior = ivs[idx(i, t - 1)];
            ivs[idx(i, t)] = OrderInterval::hull(
                OrderInterval::hull(below, prior),
                OrderInterval::join(below, prior, t),
            );
        }
    }

    // Exhaustive mask computation for small sentences.
    let mask_sets: Option<Vec<MaskSet>> = if use_masks {
        let mut ms: Vec<MaskSet> = (0..(layers as usize + 1) * (l as usize + 1))
            .map(|_| MaskSet::new(l))
            .collect();
        for t in 1..=l {
            ms[idx(0, t)].insert(1usize << (t - 1));
        }
        for i in 1..=layers {
            for t in 1..=l {
                let mut cell = MaskSet::new(l);
                ms[idx(i - 1, t)].union_into(&mut cell);
                ms[idx(i, t - 1)].union_into(&mut cell);
                mask_join(&ms[idx(i - 1, t)], &ms[idx(i, t - 1)], l, &mut cell);
                ms[idx(i, t)] = cell;
            }
        }
        Some(ms)
    } else {
        None
    };

    let mut steps = Vec::new();
    for i in 0..=layers {
        for t in 1..=l {
            let (orders, exact) = match &mask_sets {
                Some(ms) => (ms[idx(i, t)].popcount_orders(l), true),
                None => (sets[idx(i, t)].clone(), i <= 1),
            };
            let counts = if i == 0 {
                Some(CountMap::from([(1u32, 1u128)]))
            } else {
                None
            };
            steps.push(TraceStep {
                layer: i,
                time: Some(t),
                slots: vec![(
                    Slot::Full,
                    SlotOrders {
                        interval: ivs[idx(i, t)],
                        orders,
                        exact,
                        counts,
                    },
                )],
            });
        }
    }
    IterationTrace {
        regime: Regime::Rnn,
        layers,
        sentence_len,
        steps,
    }
}

fn pow2_capped(exp: i64, cap: u32) -> u32 {
    if exp <= 0 {
        return 1;
    }
    if exp >= 32 {
        return cap;
    }
    (1u64 << exp).min(cap as u64) as u32
}

/// Split-attention iteration. The state after layer i is the pair
/// (previous, incremental); layer i+1 consumes it and emits the three groups.
pub fn simulate_split(layers: u32, sentence_len: u32) -> IterationTrace {
    assert!(sentence_len >= 1);
    let cap = sentence_len;

    let mut prev_set: BTreeSet<u32> = BTreeSet::new();
    let mut incr_set: BTreeSet<u32> = BTreeSet::from([1]);
    let mut prev_iv: Option<OrderInterval> = None;
    let mut incr_iv = Some(OrderInterval::new(1, 1));
    let mut prev_counts = CountMap::new();
    let mut incr_counts = CountMap::from([(1u32, 1u128)]);

    let state_slots = |prev_set: &BTreeSet<u32>,
                       incr_set: &BTreeSet<u32>,
                       prev_iv: Option<OrderInterval>,
                       incr_iv: Option<OrderInterval>,
                       prev_counts: &CountMap,
                       incr_counts: &CountMap| {
        vec![
            (
                Slot::Prev,
                SlotOrders {
                    interval: prev_iv,
                    orders: prev_set.clone(),
                    exact: true,
                    counts: Some(prev_counts.clone()),
                },
            ),
            (
                Slot::Incr,
                SlotOrders {
                    interval: incr_iv,
                    orders: incr_set.clone(),
                    exact: true,
                    counts: Some(incr_counts.clone()),
                },
            ),
        ]
    };

    let mut steps = vec![TraceStep {
        layer: 0,
        time: None,
        slots: state_slots(&prev_set, &incr_set, prev_iv, incr_iv, &prev_counts, &incr_counts),
    }];

    for layer in 1..=layers {
        let high_set = set_join(&incr_set, &incr_set, cap);
        let mid_set = set_join(&prev_set, &incr_set, cap);
        let low_set = prev_set.clone();

        let high_iv = OrderInterval::join(incr_iv, incr_iv, cap);
        let mid_iv = OrderInterval::join(prev_iv, incr_iv, cap);
        let low_iv = prev_iv;

        let high_new = count_conv(&incr_counts, &incr_counts, cap);
        // Both directed cross groups: previous x incremental and the reverse.
        let cross = count_conv(&prev_counts, &incr_counts, cap);
        let mut mid_new = cross.clone();
        count_merge(&mut mid_new, &cross);

        // State update: everything so far becomes previous; the incremental
        // content is what the three groups emit (the low path carries the old
        // previous content through without generating anything).
        let mut next_prev = prev_set.clone();
        next_prev.extend(incr_set.iter().copied());
        let next_prev_iv = OrderInterval::hull(prev_iv, incr_iv);
        let mut next_prev_counts = prev_counts.clone();
        count_merge(&mut next_prev_counts, &incr_counts);

        let mut next_incr: BTreeSet<u32> = high_set.clone();
        next_incr.extend(mid_set.iter().copied());
        next_incr.extend(low_set.iter().copied());
        let next_incr_iv = OrderInterval::hull(OrderInterval::hull(high_iv, mid_iv), low_iv);
        let mut next_incr_counts = high_new.clone();
        count_merge(&mut next_incr_counts, &mid_new);

        let i = layer as i64;
        let stated_high = Some(OrderInterval::new(
            pow2_capped(i - 1, cap),
            pow2_capped(i, cap),
        ));
        let stated_mid = Some(OrderInterval::new(
            pow2_capped(i - 2, cap),
            pow2_capped(i - 1, cap),
        ));
        let stated_low = Some(OrderInterval::new(1, pow2_capped(i - 2, cap)));

        let mut slots = vec![
            (
                Slot::High,
                SlotOrders {
                    interval: high_iv,
                    orders: high_set,
                    exact: true,
                    counts: Some(high_new),
                },
            ),
            (
                Slot::Middle,
                SlotOrders {
                    interval: mid_iv,
                    orders: mid_set,
                    exact: true,
                    counts: Some(mid_new),
                },
            ),
            (
                Slot::Low,
                SlotOrders {
                    interval: low_iv,
                    orders: low_set,
                    exact: true,
                    counts: Some(CountMap::new()),
                },
            ),
            (Slot::StatedHigh, SlotOrders::stated_interval(stated_high)),
            (Slot::StatedMiddle, SlotOrders::stated_interval(stated_mid)),
            (Slot::StatedLow, SlotOrders::stated_interval(stated_low)),
        ];

        prev_set = next_prev;
        incr_set = next_incr;
        prev_iv = next_prev_iv;
        incr_iv = next_incr_iv;
        prev_counts = next_prev_counts;
        incr_counts = next_incr_counts;

        slots.extend(state_slots(
            &prev_set,
            &incr_set,
            prev_iv,
            incr_iv,
            &prev_counts,
            &incr_counts,
        ));
        steps.push(TraceStep {
            layer,
            time: None,
            slots,
        });
    }

    IterationTrace {
        regime: Regime::Split,
        layers,
        sentence_len,
        steps,
    }
}

/// Distinct derivations of an order-o subgraph present by layer `layer`.
pub fn repetition_count(trace: &IterationTrace, order: u32, layer: u32) -> Result<u128, SimError> {
    let step = trace
        .layer_step(layer)
        .ok_or(SimError::NoSuchStep { layer })?;
    let max = trace.max_order(layer);
    if order > max {
        return Err(SimError::OrderOutOfRange {
            order,
            max,
            layer,
        });
    }
    match trace.regime {
        Regime::San => {
            let counts = step
                .slot(Slot::Full)
                .and_then(|s| s.counts.as_ref())
                .ok_or(SimError::CountsUnavailable {
                    regime: trace.regime,
                })?;
            Ok(counts.get(&order).copied().unwrap_or(0))
        }
        Regime::Split => {
            let p = step
                .slot(Slot::Prev)
                .and_then(|s| s.counts.as_ref())
                .map(|c| c.get(&order).copied().unwrap_or(0))
                .unwrap_or(0);
            let i = step
                .slot(Slot::Incr)
                .and_then(|s| s.counts.as_ref())
                .map(|c| c.get(&order).copied().unwrap_or(0))
                .unwrap_or(0);
            Ok(p.saturating_add(i))
        }
        Regime::Rnn => {
            if layer == 0 {
                Ok(if order == 1 { 1 } else { 0 })
            } else {
                Err(SimError::CountsUnavailable {
                    regime: trace.regime,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn san_max_orders_double_per_layer() {
        let t = simulate_san(3, 100);
        assert_eq!(t.max_orders_per_layer(), vec![2, 4, 8]);
        assert_eq!(t.max_order(0), 1);
    }

    #[test]
    fn san_zero_layers_is_just_embeddings() {
        let t = simulate_san(0, 9);
        assert!(t.max_orders_per_layer().is_empty());
        assert_eq!(t.max_order(0), 1);
    }

    #[test]
    fn san_caps_at_sentence_length() {
        let t = simulate_san(6, 10);
        assert_eq!(t.max_orders_per_layer(), vec![2, 4, 8, 10, 10, 10]);
        for i in 0..=6 {
            assert!(t.max_order(i) <= 10);
        }
    }

    #[test]
    fn san_orders_are_contiguous() {
        let t = simulate_san(4, 64);
        for i in 1..=4u32 {
            let o = t.content_orders(i);
            let expect: BTreeSet<u32> = (1..=(1u32 << i).min(64)).collect();
            assert_eq!(o, expect, "layer {i}");
        }
    }

    #[test]
    fn rnn_one_layer_steps_reach_sentence_length() {
        let t = simulate_rnn(1, 5);
        let per_step: Vec<u32> = (1..=5)
            .map(|tt| {
                t.steps
                    .iter()
                    .find(|s| s.layer == 1 && s.time == Some(tt))
                    .unwrap()
                    .slot(Slot::Full)
                    .unwrap()
                    .max_order()
            })
            .collect();
        assert_eq!(per_step, vec![1, 2, 3, 4, 5]);
        assert_eq!(t.max_order(1), 5);
    }

    #[test]
    fn rnn_length_one() {
        let t = simulate_rnn(1, 1);
        assert_eq!(t.max_order(1), 1);
    }

    #[test]
    fn rnn_layer_two_respects_disjointness() {
        // At (layer 2, step 2) the naive sum 1+2=3 is not realizable with
        // disjoint node sets inside a 2-token prefix.
        let t = simulate_rnn(2, 3);
        let at = |i: u32, tt: u32| {
            t.steps
                .iter()
                .find(|s| s.layer == i && s.time == Some(tt))
                .unwrap()
                .slot(Slot::Full)
                .unwrap()
                .max_order()
        };
        assert_eq!(at(2, 1), 1);
        assert_eq!(at(2, 2), 2);
        assert_eq!(at(2, 3), 3);
    }

    #[test]
    fn split_layer_one_high_interval() {
        let t = simulate_split(1, 8);
        let step = t.layer_step(1).unwrap();
        let high = step.slot(Slot::High).unwrap();
        assert_eq!(high.interval, Some(OrderInterval::new(2, 2)));
        assert_eq!(high.orders, BTreeSet::from([2]));
        let mid = step.slot(Slot::Middle).unwrap();
        assert!(mid.orders.is_empty());
        assert!(mid.interval.is_none());
    }

    #[test]
    fn split_stated_intervals_at_layer_three() {
        let t = simulate_split(3, 64);
        let step = t.layer_step(3).unwrap();
        assert_eq!(
            step.slot(Slot::StatedHigh).unwrap().interval,
            Some(OrderInterval::new(4, 8))
        );
        assert_eq!(
            step.slot(Slot::StatedMiddle).unwrap().interval,
            Some(OrderInterval::new(2, 4))
        );
        assert_eq!(
            step.slot(Slot::StatedLow).unwrap().interval,
            Some(OrderInterval::new(1, 2))
        );
    }

    #[test]
    fn split_derived_sets_at_layer_three() {
        // Hand-derived under the content recurrence with L=16.
        let t = simulate_split(3, 16);
        let step = t.layer_step(3).unwrap();
        assert_eq!(
            step.slot(Slot::High).unwrap().orders,
            BTreeSet::from([2, 4, 5, 6, 7, 8])
        );
        assert_eq!(
            step.slot(Slot::Middle).unwrap().orders,
            BTreeSet::from([2, 3, 4, 5, 6])
        );
        assert_eq!(step.slot(Slot::Low).unwrap().orders, BTreeSet::from([1, 2]));
    }

    #[test]
    fn split_content_matches_san_content() {
        // The split re-partitions the reachable orders, it never loses any.
        for l in [4u32, 10, 16, 33] {
            let split = simulate_split(5, l);
            let san = simulate_san(5, l);
            for i in 0..=5 {
                assert_eq!(
                    split.content_orders(i),
                    san.content_orders(i),
                    "layer {i} len {l}"
                );
            }
        }
    }

    #[test]
    fn repetition_counts_match_hand_dp() {
        let san = simulate_san(4, 16);
        assert_eq!(repetition_count(&san, 1, 0).unwrap(), 1);
        assert_eq!(repetition_count(&san, 2, 1).unwrap(), 1);
        assert_eq!(repetition_count(&san, 2, 2).unwrap(), 2);
        assert_eq!(repetition_count(&san, 2, 3).unwrap(), 3);
        assert_eq!(repetition_count(&san, 4, 3).unwrap(), 9);

        let split = simulate_split(4, 16);
        assert_eq!(repetition_count(&split, 1, 0).unwrap(), 1);
        assert_eq!(repetition_count(&split, 2, 2).unwrap(), 1);
        assert_eq!(repetition_count(&split, 2, 3).unwrap(), 1);
        assert_eq!(repetition_count(&split, 4, 3).unwrap(), 5);
    }

    #[test]
    fn order_two_count_never_decreases_with_depth() {
        let san = simulate_san(8, 16);
        let mut last = 0u128;
        for i in 1..=8 {
            let c = repetition_count(&san, 2, i).unwrap();
            assert!(c >= last);
            last = c;
        }
    }

    #[test]
    fn split_counts_strictly_below_baseline() {
        let san = simulate_san(4, 16);
        let split = simulate_split(4, 16);
        for i in [2u32, 3, 4] {
            for o in 2..=(1u32 << (i - 1)) {
                let b = repetition_count(&san, o, i).unwrap();
                let s = repetition_count(&split, o, i).unwrap();
                assert!(s < b, "layer {i} order {o}: split {s} vs baseline {b}");
            }
        }
    }

    #[test]
    fn low_path_generates_no_derivations() {
        let t = simulate_split(5, 16);
        for i in 1..=5 {
            let low = t.layer_step(i).unwrap().slot(Slot::Low).unwrap();
            assert!(low.counts.as_ref().unwrap().is_empty());
        }
    }

    #[test]
    fn out_of_range_order_is_an_error() {
        let t = simulate_san(2, 16);
        assert!(matches!(
            repetition_count(&t, 5, 2),
            Err(SimError::OrderOutOfRange { .. })
        ));
    }

    #[test]
    fn traces_respect_sentence_cap() {
        for (t, n) in [
            (simulate_san(7, 5), 7),
            (simulate_split(7, 5), 7),
            (simulate_rnn(3, 5), 3),
        ] {
            for i in 0..=n {
                assert!(t.max_order(i) <= 5);
            }
            for st in &t.steps {
                for (_, so) in &st.slots {
                    if let Some(iv) = so.interval {
                        assert!(iv.hi <= 5);
                    }
                    assert!(so.orders.iter().all(|&o| o <= 5));
                }
            }
        }
    }

    #[test]
    fn csv_and_json_render() {
        let t = simulate_split(2, 8);
        let csv = t.to_csv();
        assert!(csv.starts_with("regime,layer,time,slot,lo,hi,exact,orders\n"));
        assert!(csv.contains("split,1,,high,2,2,true,2"));
        let json = t.to_json();
        assert!(json.contains("\"regime\":\"split\""));
        assert!(json.contains("\"slot\":\"stated_high\""));
    }
}
