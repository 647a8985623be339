//! Post-run checks on a finished simulation. Any failure here is a bug in
//! the protocol implementation, not in the scenario.

use cbc_core::sim::{SimOutput, TaskRecord, TaskResult};
use cbc_core::Transaction;

use crate::CliError;

fn committed(out: &SimOutput, r: &TaskRecord) -> [bool; 6] {
    let ci = &out.chains[r.initiator.index()];
    let cj = &out.chains[r.responder.index()];
    [
        ci.is_committed(&Transaction::contract(&r.ctx_initiator, r.initiator).id),
        cj.is_committed(&Transaction::contract(&r.ctx_responder, r.responder).id),
        ci.is_committed(&r.ctx_initiator.local_tx),
        ci.is_committed(&r.ctx_initiator.local_reverse),
        cj.is_committed(&r.ctx_responder.local_tx),
        cj.is_committed(&r.ctx_responder.local_reverse),
    ]
}

/// Every settled task between honest systems either completed on both
/// sides or left no unreversed target behind, with at most four commits.
/// Tasks steered by a forged answer are the attack's measured effect and
/// are skipped.
pub fn check(out: &SimOutput) -> Result<(), CliError> {
    let m = &out.metrics;
    if !m.tasks_balanced() {
        return Err(CliError::Invariant(format!(
            "task counters do not add up: started {} != {} + {} + {} + {}",
            m.tasks_started, m.tasks_succeeded, m.tasks_reversed, m.tasks_aborted, m.tasks_in_flight
        )));
    }
    let adversary = out.attack.as_ref().map(|a| a.adversary);
    for r in &out.tasks {
        if r.result == TaskResult::InFlight
            || r.forged
            || Some(r.initiator) == adversary
            || Some(r.responder) == adversary
        {
            continue;
        }
        let [ctx_i, ctx_j, ti, ri, tj, rj] = committed(out, r);
        let success = ctx_i && ctx_j && ti && tj && !ri && !rj;
        let undone = (!ti || ri) && (!tj || rj) && (!ri || ti) && (!rj || tj);
        let count = [ctx_i, ctx_j, ti, ri, tj, rj].iter().filter(|b| **b).count();
        if !(success || undone) || count > 4 {
            return Err(CliError::Invariant(format!(
                "task {} between {} and {} is not atomic: ctx {ctx_i}/{ctx_j}, targets {ti}/{tj}, reverses {ri}/{rj}",
                r.plan_id, r.initiator, r.responder
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbc_core::sim::{run, SimConfig};

    #[test]
    fn honest_run_passes() {
        let mut cfg = SimConfig::scenario(3, 0.2, 0.2);
        cfg.num_blocks = 300;
        check(&run(&cfg).unwrap()).unwrap();
    }

    #[test]
    fn tampered_counters_fail() {
        let mut cfg = SimConfig::scenario(2, 0.2, 0.2);
        cfg.num_blocks = 100;
        let mut out = run(&cfg).unwrap();
        out.metrics.tasks_started += 1;
        assert!(matches!(check(&out), Err(CliError::Invariant(_))));
    }
}
