//! Central finite-difference checks against recorded gradients.

use moelab::moe::MoeModel;
use moelab::numeric::ParamId;

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-4)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: String,
}

/// Perturbs every `stride`-th coordinate of every parameter. `eval` returns
/// the loss and a signature of the discrete routing decisions; coordinates
/// whose perturbation changes the signature are skipped.
pub fn check_model<F>(model: &mut MoeModel, analytic: &[Vec<f64>], stride: usize, mut eval: F) -> FdReport
where
    F: FnMut(&MoeModel) -> (f64, Vec<usize>),
{
    let (_, base_sig) = eval(model);
    let ids: Vec<ParamId> = model.params.ids().collect();
    let mut report = FdReport::default();
    for id in ids {
        let n = model.params.value(id).len();
        for j in (0..n).step_by(stride.max(1)) {
            let orig = model.params.value(id).data()[j];
            model.params.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let (plus, sig_p) = eval(model);
            model.params.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let (minus, sig_m) = eval(model);
            model.params.get_mut(id).value.data_mut()[j] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[id.index()][j];
            let r = rel_err(a, numeric);
            report.checked += 1;
            if r > report.max_rel {
                report.max_rel = r;
                report.worst = format!("{}[{j}]: analytic {a:e}, numeric {numeric:e}", model.params.get(id).name);
            }
        }
    }
    report
}
