use std::sync::Arc;
use std::time::Instant;

use pmlab::experiments::green_kubo_variance;
use pmlab::{Grid, MapParameter, MatrixCache, Observable};

fn gk(beta: f64, n_cells: usize, k_max: usize, cache: &MatrixCache) {
    let t = Instant::now();
    let p = MapParameter::new(beta).unwrap();
    let phi = Observable::map_coboundary(p);
    let grid = Grid::new(n_cells).unwrap();
    match green_kubo_variance(p, &phi, k_max, grid, cache) {
        Ok(r) => println!(
            "GK cobdy beta={beta} N={n_cells} kmax={k_max}: sigma2 {:.3e} diag {:.3e} terms {} tail {:.3e} conv {} sigma2<=10tail {} verdict {:?} [{:?}]",
            r.sigma_sq,
            r.diagonal,
            r.terms_used,
            r.tail_abs_sum,
            r.converged,
            r.sigma_sq <= 10.0 * r.tail_abs_sum,
            r.verdict,
            t.elapsed()
        ),
        Err(e) => println!("GK cobdy beta={beta} N={n_cells} kmax={k_max}: ERR {e}"),
    }
}

fn main() {
    let cache = Arc::new(MatrixCache::new());
    for &(beta, n_cells, k_max) in &[
        (0.5, 1024, 200),
        (0.5, 1024, 100),
        (0.5, 4096, 200),
        (0.3, 1024, 100),
        (0.3, 1024, 200),
        (0.7, 1024, 500),
        (0.9, 4096, 10_000),
        (0.85, 1024, 2000),
    ] {
        gk(beta, n_cells, k_max, &cache);
    }
}
