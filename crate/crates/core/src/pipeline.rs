//! Graph + layout plan + loop schedules to a program, and the value check
//! against the reference evaluator.

use crate::error::Result;
use crate::exec::{first_mismatch, random_inputs, reference_eval, run_program, Element};
use crate::ir::{DType, Graph};
use crate::layout::rewrite_accesses_pass;
use crate::loops::{lower, Schedules};
use crate::program::Program;
use crate::propagation::{insert_conversions, PropagationPlan};

/// Inserts the plan's conversions, rewrites accesses and lowers.
pub fn compile(g: &Graph, plan: &PropagationPlan, schedules: &Schedules) -> Result<Program> {
    g.validated()?;
    let (g2, seqs) = insert_conversions(g, plan)?;
    lower(&rewrite_accesses_pass(&g2, &seqs)?, schedules)
}

/// First tensor of `g` whose value under `prog` differs from the reference,
/// on seeded random inputs.
pub fn oracle_check(g: &Graph, prog: &Program, seed: u64) -> Result<Option<(String, usize)>> {
    fn run<T: Element>(g: &Graph, prog: &Program, seed: u64) -> Result<Option<(String, usize)>> {
        let inputs = random_inputs::<T>(g, seed);
        let (got, _) = run_program(prog, &inputs)?;
        let want = reference_eval(g, &inputs)?;
        Ok(first_mismatch(&got, &want))
    }
    match g.dtype() {
        DType::Float32 => run::<f32>(g, prog, seed),
        DType::Int32 => run::<i32>(g, prog, seed),
    }
}
