//! Corrupt a field the way a failing sensor network would: zero a random
//! set of columns in a random set of snapshots. The plan is seeded, always
//! includes the final snapshot and serializes to plain text.

use cs_shred::subsample::{apply_plan, make_plan, plan_mask, SubsamplePlan};
use cs_shred::synth::SyntheticSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticSpec {
        n_x: 16,
        n_y: 16,
        n_t: 100,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let field = cs_shred::synth::generate_synthetic(&spec)?;

    let plan = make_plan(field.dims(), 8, 30, 3)?;
    println!("columns hit: {:?}", plan.y_sub);
    println!("snapshots hit: {} of 100, final included: {}",
        plan.t_sub.len(),
        plan.t_sub.contains(&99));

    let corrupted = apply_plan(&field, &plan)?;
    let zeros = corrupted.data().iter().filter(|&&v| v == 0.0).count();
    println!("zeroed entries: {zeros} (n_x * |y_sub| * |t_sub| = {})",
        16 * plan.y_sub.len() * plan.t_sub.len());

    // the exported mask points at exactly the zeroed entries
    let mask = plan_mask(&plan);
    let flagged = mask.iter().filter(|&&m| m).count();
    println!("mask flags {flagged} entries");

    // applying the plan twice changes nothing further
    let twice = apply_plan(&corrupted, &plan)?;
    assert_eq!(twice, corrupted);
    println!("idempotent: ok");

    // plans round trip through their text record
    let text = plan.to_text();
    let back = SubsamplePlan::from_text(&text)?;
    assert_eq!(back, plan);
    println!("\nplan text record:\n{text}");
    Ok(())
}
