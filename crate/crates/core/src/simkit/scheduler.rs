//! Per-sector round-robin uplink scheduler.

/// One vehicle's PRB grant for a tick: a contiguous index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrbAllocation {
    pub vehicle_id: u32,
    pub prb_start: u32,
    pub prb_count: u32,
}

/// Divide `num_prbs` equally among the backlogged vehicles; the remainder
/// goes one PRB each to vehicles in ascending id order starting at the
/// round-robin cursor. PRB ranges are contiguous, assigned in ascending id
/// order from PRB 0. An empty backlog set yields an empty allocation.
///
/// `backlogged` must be sorted ascending; the caller advances the cursor by
/// one every tick.
pub fn schedule_uplink(backlogged: &[u32], num_prbs: u32, cursor: u64) -> Vec<PrbAllocation> {
    let k = backlogged.len();
    if k == 0 {
        return Vec::new();
    }
    debug_assert!(backlogged.windows(2).all(|w| w[0] < w[1]));

    let base = num_prbs / k as u32;
    let remainder = (num_prbs % k as u32) as usize;
    let first_extra = (cursor % k as u64) as usize;

    let mut allocations = Vec::with_capacity(k);
    let mut next_prb = 0u32;
    for (i, &vehicle_id) in backlogged.iter().enumerate() {
        // Is position i within the remainder window starting at the cursor?
        let offset = (i + k - first_extra) % k;
        let extra = u32::from(offset < remainder);
        let count = base + extra;
        if count > 0 {
            allocations.push(PrbAllocation { vehicle_id, prb_start: next_prb, prb_count: count });
            next_prb += count;
        }
    }
    debug_assert!(next_prb <= num_prbs);
    allocations
}
