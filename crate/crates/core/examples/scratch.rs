use std::time::Instant;

use fpcap_core::channel::Params;
use fpcap_core::solver::{solve_maximin, solve_minimax};

fn main() {
    for (c, q) in [(2usize, 2usize), (3, 2), (2, 3)] {
        let params = Params::new(c, q).unwrap();
        let t0 = Instant::now();
        let mm = solve_minimax(params, 1e-5);
        let dt1 = t0.elapsed();
        let t0 = Instant::now();
        let mx = solve_maximin(params, 1e-5);
        let dt2 = t0.elapsed();
        match (mm, mx) {
            (Ok(a), Ok(b)) => println!(
                "c={c} q={q}: minimax={:.9} ({dt1:?}) maximin={:.9} ({dt2:?}) |diff|={:.2e}",
                a.value,
                b.value,
                (a.value - b.value).abs()
            ),
            (a, b) => println!("c={c} q={q}: minimax_err={} maximin_err={} ({dt1:?}/{dt2:?})", a.is_err(), b.is_err()),
        }
    }
}
