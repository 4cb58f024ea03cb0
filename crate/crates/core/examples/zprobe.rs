// temporary probe binary
use hunt_branch::branching::{HeavyFamily, OffspringLaw};
use hunt_branch::*;
use nalgebra::DMatrix;

fn main() {
    let rates = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let motion = MotionModel::new(vec![1.0, 1.0], rates, vec![0.0, 0.0]).unwrap();
    let heavy = BranchingLaw::homogeneous(
        2, 1.0, OffspringLaw::heavy(HeavyFamily::K2Log2, 1_000_000).unwrap()).unwrap();
    let control = BranchingLaw::homogeneous(2, 1.0, OffspringLaw::point_mass(2).unwrap()).unwrap();
    let t0 = std::time::Instant::now();
    for (reps, cap) in [(1000u64, 10_000_000usize), (2000, 10_000_000)] {
        for seed in [16u64, 17, 99, 7] {
            let config = EnsembleConfig::new(reps, 6.0, vec![2.0, 4.0, 6.0], seed).with_cap(cap);
            match dichotomy_experiment(&motion, &heavy, &control, 0, &config) {
                Ok(r) => println!(
                    "reps={reps} cap={cap:.0e} seed={seed}: heavy_z={:?} heavy_med={:?} ctrl_med={:.3} ovf={} pass={} [{:.0?}]",
                    r.heavy.mean_z.iter().map(|z| format!("{z:.2}")).collect::<Vec<_>>(),
                    r.heavy.w_summaries.iter().map(|s| format!("{:.3}", s.median)).collect::<Vec<_>>(),
                    r.control_terminal_median, r.heavy.n_overflow, r.pass, t0.elapsed()
                ),
                Err(e) => println!("reps={reps} cap={cap} seed={seed}: ERR {e}"),
            }
        }
    }
}
