//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Tensor};

/// Max over components of |analytic - central difference| / max(1, |central difference|).
///
/// `f` builds a scalar loss tensor from the given leaf; backward runs here.
/// Panics if any probe evaluation is non-finite.
pub fn check_gradients<F>(f: F, x: &[f32], eps: f32) -> f32
where
    F: for<'g> Fn(&'g Graph, Tensor<'g>) -> Tensor<'g>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    check_gradients_at(f, x, eps, &coords)
}

/// Same check restricted to a subset of coordinates. Useful when the full
/// coordinate sweep is too expensive (large models).
///
/// A coordinate whose perturbation flips any activation decision (relu or
/// leaky_relu sign, max argmax, zero-norm row) crosses a subgradient kink
/// inside the probe interval; the central difference is meaningless there
/// and the coordinate is excluded, detected exactly by comparing the two
/// probes' activation signatures. At most half of the probed coordinates
/// may be excluded this way, otherwise the check is considered vacuous and
/// panics.
pub fn check_gradients_at<F>(f: F, x: &[f32], eps: f32, coords: &[usize]) -> f32
where
    F: for<'g> Fn(&'g Graph, Tensor<'g>) -> Tensor<'g>,
{
    let analytic = {
        let g = Graph::new();
        let leaf = g.param(x.to_vec(), &[x.len()]);
        let loss = f(&g, leaf);
        assert!(
            loss.item().is_finite(),
            "non-finite loss at the expansion point: {}",
            loss.item()
        );
        g.backward(loss);
        leaf.grad().unwrap_or_else(|| vec![0.0; x.len()])
    };

    let eval = |probe: &[f32]| -> (f32, u64) {
        let g = Graph::new();
        let leaf = g.leaf(probe.to_vec(), &[probe.len()]);
        let value = f(&g, leaf).item();
        (value, g.activation_signature())
    };

    // (fd estimate, kink-free flag)
    let fd_at = |probe: &mut Vec<f32>, i: usize, h: f32| -> (f32, bool) {
        let orig = probe[i];
        probe[i] = orig + h;
        let (fp, sig_p) = eval(probe);
        probe[i] = orig - h;
        let (fm, sig_m) = eval(probe);
        probe[i] = orig;
        assert!(
            fp.is_finite() && fm.is_finite(),
            "non-finite value while probing coordinate {i}: f(+)={fp}, f(-)={fm}"
        );
        ((fp - fm) / (2.0 * h), sig_p == sig_m)
    };

    let mut max_err = 0.0f32;
    let mut skipped = 0usize;
    let mut probe = x.to_vec();
    for &i in coords {
        let (fd_h, clean_h) = fd_at(&mut probe, i, eps);
        let (fd_h2, clean_h2) = fd_at(&mut probe, i, 0.5 * eps);
        if !clean_h || !clean_h2 {
            skipped += 1;
            continue;
        }
        // Three consistent estimators: the wide step (least f32 noise), the
        // narrow step (least truncation), and the Richardson extrapolation
        // (cancels the O(eps^2) term). Accept the closest.
        let fd_r = (4.0 * fd_h2 - fd_h) / 3.0;
        let err = [fd_h, fd_h2, fd_r]
            .into_iter()
            .map(|fd| (analytic[i] - fd).abs() / fd.abs().max(1.0))
            .fold(f32::INFINITY, f32::min);
        if err > max_err {
            max_err = err;
        }
    }
    assert!(
        skipped * 2 <= coords.len(),
        "{skipped} of {} probed coordinates straddle kinks; check is vacuous",
        coords.len()
    );
    max_err
}
