//! Structured corruption of a field: whole grid columns are zeroed on a
//! random subset of snapshots, emulating acquisition dropouts that strike the
//! same hardware lines across many frames.
//!
//! Zero doubles as the missingness sentinel, matching how gappy data usually
//! arrives. The plan also exports an explicit boolean mask so downstream code
//! can distinguish genuine zeros when configured (see the bpdn module).

use ndarray::Array3;
use thiserror::Error;

use crate::field::Field;
use crate::rng;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("{what} = {got} outside 1..={bound}")]
    OutOfRange {
        what: &'static str,
        got: usize,
        bound: usize,
    },
    #[error("plan dims {plan:?} do not match field dims {field:?}")]
    DimMismatch {
        plan: (usize, usize, usize),
        field: (usize, usize, usize),
    },
    #[error("unparseable plan record: {0}")]
    Parse(String),
}

/// Which columns vanish on which snapshots. `t_sub` always contains the
/// final snapshot, so the last instant is never seen intact during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsamplePlan {
    pub dims: (usize, usize, usize),
    /// sorted, distinct column indices y
    pub y_sub: Vec<usize>,
    /// sorted, distinct snapshot indices t, last entry = n_t - 1
    pub t_sub: Vec<usize>,
    pub seed: u64,
}

impl SubsamplePlan {
    pub fn column_masked(&self, y: usize) -> bool {
        self.y_sub.binary_search(&y).is_ok()
    }

    pub fn snapshot_masked(&self, t: usize) -> bool {
        self.t_sub.binary_search(&t).is_ok()
    }

    /// True when the entry at column `y`, time `t` is removed.
    pub fn masked(&self, y: usize, t: usize) -> bool {
        self.column_masked(y) && self.snapshot_masked(t)
    }

    /// True when the flat spatial index `p` falls on a masked column.
    pub fn masked_flat(&self, p: usize, t: usize) -> bool {
        self.masked(p % self.dims.1, t)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "seed {}\ndims {} {} {}\ny_sub {}\nt_sub {}\n",
            self.seed,
            self.dims.0,
            self.dims.1,
            self.dims.2,
            join(&self.y_sub),
            join(&self.t_sub),
        )
    }

    pub fn from_text(text: &str) -> Result<Self, PlanError> {
        let bad = |m: &str| PlanError::Parse(m.to_string());
        let mut seed = None;
        let mut dims = None;
        let mut y_sub = None;
        let mut t_sub = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(line))?;
            let nums: Vec<usize> = rest
                .split_whitespace()
                .map(|w| w.parse().map_err(|_| bad(line)))
                .collect::<Result<_, _>>()?;
            match key {
                "seed" => seed = Some(*nums.first().ok_or_else(|| bad(line))? as u64),
                "dims" => {
                    if nums.len() != 3 {
                        return Err(bad(line));
                    }
                    dims = Some((nums[0], nums[1], nums[2]));
                }
                "y_sub" => y_sub = Some(nums),
                "t_sub" => t_sub = Some(nums),
                _ => return Err(bad(line)),
            }
        }
        let plan = SubsamplePlan {
            dims: dims.ok_or_else(|| bad("missing dims"))?,
            y_sub: y_sub.ok_or_else(|| bad("missing y_sub"))?,
            t_sub: t_sub.ok_or_else(|| bad("missing t_sub"))?,
            seed: seed.ok_or_else(|| bad("missing seed"))?,
        };
        if plan.t_sub.last() != Some(&(plan.dims.2 - 1)) {
            return Err(bad("t_sub must end at the final snapshot"));
        }
        Ok(plan)
    }
}

/// Draw `n_cols` columns from all of them and `n_snap` snapshots with the
/// final one forced in: `n_snap - 1` uniform draws from `0..n_t - 1`, then
/// `n_t - 1` appended. Stream "mask" of the master seed.
pub fn make_plan(
    dims: (usize, usize, usize),
    n_cols: usize,
    n_snap: usize,
    master_seed: u64,
) -> Result<SubsamplePlan, PlanError> {
    let (_, n_y, n_t) = dims;
    if n_cols == 0 || n_cols > n_y {
        return Err(PlanError::OutOfRange {
            what: "n_cols",
            got: n_cols,
            bound: n_y,
        });
    }
    if n_snap == 0 || n_snap > n_t {
        return Err(PlanError::OutOfRange {
            what: "n_snap",
            got: n_snap,
            bound: n_t,
        });
    }
    let mut rng = rng::stream_rng(master_seed, "mask");
    let cols: Vec<usize> = (0..n_y).collect();
    let mut y_sub = rng::sample_without_replacement(&cols, n_cols, &mut rng);
    y_sub.sort_unstable();
    let earlier: Vec<usize> = (0..n_t - 1).collect();
    let mut t_sub = rng::sample_without_replacement(&earlier, n_snap - 1, &mut rng);
    t_sub.sort_unstable();
    t_sub.push(n_t - 1);
    Ok(SubsamplePlan {
        dims,
        y_sub,
        t_sub,
        seed: master_seed,
    })
}

/// Zero the planned entries. Already-zero entries stay zero, so applying a
/// plan twice equals applying it once.
pub fn apply_plan(field: &Field, plan: &SubsamplePlan) -> Result<Field, PlanError> {
    if field.dims() != plan.dims {
        return Err(PlanError::DimMismatch {
            plan: plan.dims,
            field: field.dims(),
        });
    }
    let (n_x, n_y, _) = field.dims();
    let mut out = field.clone();
    for &t in &plan.t_sub {
        for &y in &plan.y_sub {
            for x in 0..n_x {
                out.data_mut()[(t, x * n_y + y)] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Boolean view of the plan, true where an entry is removed, indexed
/// (x, y, t) like the field itself.
pub fn plan_mask(plan: &SubsamplePlan) -> Array3<bool> {
    let (n_x, n_y, n_t) = plan.dims;
    let mut mask = Array3::from_elem((n_x, n_y, n_t), false);
    for &t in &plan.t_sub {
        for &y in &plan.y_sub {
            for x in 0..n_x {
                mask[(x, y, t)] = true;
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Field;

    #[test]
    fn final_snapshot_always_masked() {
        for seed in 0..100 {
            let plan = make_plan((4, 8, 30), 3, 5, seed).unwrap();
            assert_eq!(*plan.t_sub.last().unwrap(), 29, "seed {seed}");
            assert_eq!(plan.t_sub.len(), 5);
            assert_eq!(plan.y_sub.len(), 3);
        }
    }

    #[test]
    fn draws_are_sorted_distinct_in_range() {
        let plan = make_plan((2, 40, 60), 17, 21, 99).unwrap();
        for w in plan.y_sub.windows(2) {
            assert!(w[0] < w[1]);
        }
        for w in plan.t_sub.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(*plan.y_sub.last().unwrap() < 40);
        assert!(*plan.t_sub.last().unwrap() < 60);
    }

    #[test]
    fn zero_count_matches_block_size() {
        // all-ones field: zeros after application count the damage exactly
        let f = Field::from_fn("ones", (5, 8, 20), |_, _, _| 1.0).unwrap();
        let plan = make_plan((5, 8, 20), 3, 7, 1).unwrap();
        let sub = apply_plan(&f, &plan).unwrap();
        let zeros = sub.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, 5 * 3 * 7);
        // untouched entries are bit-identical
        for t in 0..20 {
            for x in 0..5 {
                for y in 0..8 {
                    if !plan.masked(y, t) {
                        assert_eq!(sub.value(x, y, t), 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_agrees_with_application() {
        let f = Field::from_fn("pos", (3, 6, 15), |x, y, t| {
            1.0 + (x + y + t) as f64
        })
        .unwrap();
        let plan = make_plan((3, 6, 15), 2, 4, 5).unwrap();
        let sub = apply_plan(&f, &plan).unwrap();
        let mask = plan_mask(&plan);
        for x in 0..3 {
            for y in 0..6 {
                for t in 0..15 {
                    assert_eq!(mask[(x, y, t)], sub.value(x, y, t) == 0.0);
                    assert_eq!(mask[(x, y, t)], plan.masked_flat(x * 6 + y, t));
                }
            }
        }
    }

    #[test]
    fn idempotent_and_deterministic() {
        let f = Field::from_fn("f", (3, 5, 12), |x, y, t| {
            ((x * 31 + y * 7 + t) % 13) as f64 - 6.0
        })
        .unwrap();
        let p1 = make_plan((3, 5, 12), 2, 3, 7).unwrap();
        let p2 = make_plan((3, 5, 12), 2, 3, 7).unwrap();
        assert_eq!(p1, p2);
        let once = apply_plan(&f, &p1).unwrap();
        let twice = apply_plan(&once, &p1).unwrap();
        assert_eq!(once.data(), twice.data());
        assert_ne!(make_plan((3, 5, 12), 2, 3, 8).unwrap(), p1);
    }

    #[test]
    fn text_round_trip() {
        let plan = make_plan((6, 9, 40), 4, 6, 12345).unwrap();
        let parsed = SubsamplePlan::from_text(&plan.to_text()).unwrap();
        assert_eq!(parsed, plan);
    }

    #[test]
    fn bounds_are_validated() {
        assert!(make_plan((2, 4, 10), 5, 2, 0).is_err());
        assert!(make_plan((2, 4, 10), 0, 2, 0).is_err());
        assert!(make_plan((2, 4, 10), 2, 11, 0).is_err());
        assert!(make_plan((2, 4, 10), 2, 0, 0).is_err());
        assert!(make_plan((2, 4, 10), 4, 10, 0).is_ok());
        let f = Field::from_fn("f", (2, 5, 10), |_, _, _| 1.0).unwrap();
        let plan = make_plan((2, 4, 10), 2, 2, 0).unwrap();
        assert!(matches!(
            apply_plan(&f, &plan),
            Err(PlanError::DimMismatch { .. })
        ));
    }
}
