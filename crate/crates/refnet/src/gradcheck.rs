//! Finite-difference verification of analytic gradients.
//!
//! Runs in 64-bit only; central differences at 32-bit are dominated by
//! rounding noise and prove nothing.

use crate::autodiff::{GradSink, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    /// ‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖, 1e-8) over the whole
    /// parameter.
    pub norm_rel_err: f64,
    /// Worst elementwise relative error among resolvable elements.
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Elements whose gradient magnitude sits below the finite-difference
    /// noise floor on both sides; they are excluded from the elementwise
    /// check (the norm check still covers them).
    pub unresolved: usize,
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub max_norm_rel_err: f64,
    /// Smallest gradient magnitude central differences can resolve at the
    /// requested tolerance, given the loss magnitude.
    pub resolvable: f64,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| !e.flagged)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare `analytic` parameter gradients against central finite differences
/// of `loss_fn` with step `h`, flagging parameters whose worst elementwise
/// relative error exceeds `tol`.
pub fn grad_check<L>(
    store: &mut ParamStore<f64>,
    analytic: &GradSink<f64>,
    h: f64,
    tol: f64,
    loss_fn: L,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    grad_check_filtered(store, analytic, h, tol, loss_fn, |_| true)
}

/// Same check restricted to parameters whose name passes `filter`.
///
/// Central differences in f64 quantize the measured gradient to about
/// ULP(loss) / 2h; elements whose analytic and measured magnitudes both sit
/// below quantum/tol cannot be resolved elementwise and are counted instead
/// of flagged. The per-parameter norm ratio covers them.
pub fn grad_check_filtered<L, P>(
    store: &mut ParamStore<f64>,
    analytic: &GradSink<f64>,
    h: f64,
    tol: f64,
    mut loss_fn: L,
    filter: P,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore<f64>) -> Result<f64>,
    P: Fn(&str) -> bool,
{
    let base = loss_fn(store)?;
    if !base.is_finite() {
        return Err(Error::Numeric("non-finite loss at the evaluation point".into()));
    }
    let quantum = (base.abs().max(1.0) * f64::EPSILON) / (2.0 * h);
    let resolvable = 2.0 * quantum / tol;

    let mut entries = Vec::with_capacity(store.len());
    let mut global_max = 0.0f64;
    let mut global_norm_max = 0.0f64;
    for pid in 0..store.len() {
        if !filter(store.name(pid)) {
            continue;
        }
        let grads = analytic.param_grad(store, pid);
        let mut worst = 0.0f64;
        let mut worst_index = 0usize;
        let mut unresolved = 0usize;
        let mut diff_sq = 0.0f64;
        let mut ana_sq = 0.0f64;
        let mut fd_sq = 0.0f64;
        for i in 0..grads.len() {
            let orig = store.value(pid)[i];
            store.value_mut(pid)[i] = orig + h;
            let up = loss_fn(store)?;
            store.value_mut(pid)[i] = orig - h;
            let down = loss_fn(store)?;
            store.value_mut(pid)[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while perturbing {}[{i}] (value {orig}, step {h})",
                    store.name(pid)
                )));
            }
            let fd = (up - down) / (2.0 * h);
            diff_sq += (grads[i] - fd) * (grads[i] - fd);
            ana_sq += grads[i] * grads[i];
            fd_sq += fd * fd;
            if grads[i].abs().max(fd.abs()) < resolvable {
                unresolved += 1;
                continue;
            }
            let rel = relative_error(grads[i], fd);
            if rel > worst {
                worst = rel;
                worst_index = i;
            }
        }
        let norm_rel_err = diff_sq.sqrt() / ana_sq.sqrt().max(fd_sq.sqrt()).max(1e-8);
        global_max = global_max.max(worst);
        global_norm_max = global_norm_max.max(norm_rel_err);
        entries.push(GradCheckEntry {
            name: store.name(pid).to_string(),
            norm_rel_err,
            max_rel_err: worst,
            worst_index,
            unresolved,
            flagged: worst > tol || norm_rel_err > tol,
        });
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err: global_max,
        max_norm_rel_err: global_norm_max,
        resolvable,
        h,
        tol,
    })
}

/// Small full-model fixture: 10-token background, 6-token context, one span
/// unit in the response, every id inside a 30-entry vocabulary.
pub fn mini_model_fixture(
    seed: u64,
) -> Result<(
    ParamStore<f64>,
    crate::model::ModelParams,
    crate::corpus::EncodedSample,
)> {
    mini_model_fixture_at(seed, 0.5)
}

pub fn mini_model_fixture_at(
    seed: u64,
    scale: f64,
) -> Result<(
    ParamStore<f64>,
    crate::model::ModelParams,
    crate::corpus::EncodedSample,
)> {
    use crate::corpus::{SegmentedResponse, Unit, EOS};
    use rand::{Rng, SeedableRng};

    let dims = crate::model::ModelDims {
        vocab: 30,
        embed: 8,
        hidden: 12,
        matching_hidden: 12,
        attn: 12,
        untie_pointer_params: false,
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let params = crate::model::ModelParams::init(&mut store, dims, &mut rng)?;
    // evaluate at a generic point: near the tiny symmetric init, several
    // heads produce gradients below what central differences can resolve
    for pid in 0..store.len() {
        for v in store.value_mut(pid) {
            *v = rng.gen_range(-scale..scale);
        }
    }

    let bg_ids: Vec<u32> = (0..10).map(|_| rng.gen_range(4..30)).collect();
    let ctx_ids: Vec<u32> = (0..6).map(|_| rng.gen_range(4..30)).collect();
    let (span_s, span_e) = (3usize, 6usize);
    let lead = rng.gen_range(4..30);
    let tail = rng.gen_range(4..30);
    let mut flat = vec![lead];
    flat.extend(bg_ids[span_s..=span_e].iter().copied());
    flat.push(tail);
    flat.push(EOS);
    let sample = crate::corpus::EncodedSample {
        bg_embed_ids: bg_ids.clone(),
        bg_copy_ids: bg_ids,
        context_ids: ctx_ids,
        response: SegmentedResponse {
            units: vec![
                Unit::Token(lead),
                Unit::Span {
                    start: span_s,
                    end: span_e,
                },
                Unit::Token(tail),
                Unit::Token(EOS),
            ],
            flat,
        },
        ext_tokens: Vec::new(),
        spans: vec![crate::corpus::SpanAnnotation {
            bg_start: span_s,
            bg_end: span_e,
            resp_start: 1,
            resp_end: 4,
        }],
        response_tokens: Vec::new(),
    };
    Ok((store, params, sample))
}

/// Verifies the analytic gradient of the combined training loss on the mini
/// fixture against central finite differences, over every parameter.
pub fn mini_total_loss_check(h: f64, tol: f64) -> Result<GradCheckReport> {
    mini_total_loss_check_at(0xC0FFEE, 0.5, h, tol)
}

pub fn mini_total_loss_check_at(seed: u64, scale: f64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let (mut store, params, sample) = mini_model_fixture_at(seed, scale)?;
    let opts = crate::train::LossOptions::standard();
    let (_, analytic) = crate::train::sample_loss_and_grads(&store, &params, &sample, &opts)?;
    grad_check(&mut store, &analytic, h, tol, |s| {
        let mut g = crate::autodiff::Graph::new(s);
        let ctx = crate::model::build_sample_ctx(&mut g, &params, &sample)?;
        let steps = crate::model::teacher_forced_pass(&mut g, &params, &ctx, &sample)?;
        let nodes = crate::train::build_losses(&mut g, &params, &ctx, &steps, &opts)?;
        Ok(g.scalar(nodes.total))
    })
}
