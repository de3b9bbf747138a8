//! Finite-difference oracle for model-level gradients.

use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;

/// Compares `analytic` gradients against central differences of `loss` at
/// every scalar of `store`. Entries where both values are below `floor` are
/// compared absolutely against `floor`.
pub fn check_store(
    store: &ParamStore,
    analytic: &[Option<Matrix>],
    floor: f64,
    loss: impl Fn(&ParamStore) -> f64,
) {
    assert_eq!(analytic.len(), store.len());
    let mut probe = store.clone();
    let mut checked = 0usize;
    for (pi, name) in store.names().iter().enumerate() {
        let base = store.values().nth(pi).expect("param index").clone();
        let zeros = Matrix::zeros(base.rows(), base.cols());
        let an = analytic[pi].as_ref().unwrap_or(&zeros);
        for e in 0..base.data().len() {
            let id = probe.find(name).expect("param name");
            probe.get_mut(id).data_mut()[e] = base.data()[e] + STEP;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[e] = base.data()[e] - STEP;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[e] = base.data()[e];
            let fd = (up - down) / (2.0 * STEP);
            let a = an.data()[e];
            let scale = fd.abs().max(a.abs());
            let ok = if scale < floor {
                (fd - a).abs() < floor
            } else {
                (fd - a).abs() / scale <= REL_TOL
            };
            assert!(ok, "{name}[{e}]: finite difference {fd} vs analytic {a}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}
