//! C ABI over `lcmkit`.
//!
//! Objects cross the boundary as opaque handles created by `*_new` / `*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`LcmStatus`]; on failure a description is available from
//! [`lcm_last_error`] on the same thread. Class arguments use `-1` for the
//! null (unconditional) condition.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lcmkit::checkpoint::{load_model, Checkpoint};
use lcmkit::consistency::{Branch, ConsistencyFn, ConsistencyModel};
use lcmkit::latent::LatentCodec;
use lcmkit::metrics::sliced_w1;
use lcmkit::sampler::{multistep_sample, SampleSchedule};
use lcmkit::solver::{cfg_solver_step, SolverKind};
use lcmkit::teacher::{Component, EpsModel, MixtureSpec, TeacherModel};
use lcmkit::{Condition, Error, NoiseSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Divergence = 6,
    Panic = 7,
    Other = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcmSolver {
    Ddim = 0,
    Dpm2 = 1,
    Dpmpp2 = 2,
}

/// Discrete VP noise schedule.
pub struct LcmSchedule(NoiseSchedule);

/// Analytic Gaussian-mixture teacher.
pub struct LcmTeacher(TeacherModel);

/// Trained consistency model with its latent codec.
pub struct LcmModel {
    model: ConsistencyModel,
    codec: LatentCodec,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut e = e.borrow_mut();
        e.clear();
        e.extend_from_slice(msg.as_bytes());
    });
}

fn status_of(e: &Error) -> LcmStatus {
    match e.exit_code() {
        2 => LcmStatus::Config,
        3 => LcmStatus::Io,
        4 => LcmStatus::Checkpoint,
        5 => LcmStatus::Divergence,
        _ => match e {
            Error::InvalidRange(_)
            | Error::IndexOutOfRange { .. }
            | Error::DimensionMismatch { .. }
            | Error::InvalidK { .. }
            | Error::IndexOrder { .. }
            | Error::MissingCondition(_)
            | Error::Empty(_) => LcmStatus::InvalidArgument,
            _ => LcmStatus::Other,
        },
    }
}

enum Fail {
    Null,
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Run `f`, translating errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LcmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LcmStatus::Ok,
        Ok(Err(Fail::Null)) => {
            set_error("null pointer argument");
            LcmStatus::NullPointer
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(&m);
            LcmStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            LcmStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null);
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null);
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null)
}

fn condition(class: i64) -> Result<Condition, Fail> {
    match class {
        -1 => Ok(Condition::Null),
        c if c >= 0 => Ok(Condition::Class(c as usize)),
        c => Err(Fail::Arg(format!("class {c} must be >= 0 or -1"))),
    }
}

fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null);
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn lcm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn lcm_schedule_new(num_steps: usize, beta_min: f64, beta_max: f64, out: *mut *mut LcmSchedule) -> LcmStatus {
    guard(|| write_out(out, LcmSchedule(NoiseSchedule::new(num_steps, beta_min, beta_max)?)))
}

/// # Safety
/// `s` must be null or a handle from `lcm_schedule_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lcm_schedule_free(s: *mut LcmSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// `alpha(t_n)` and `sigma(t_n)`.
///
/// # Safety
/// `s` must be a live schedule handle; `alpha` and `sigma` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn lcm_alpha_sigma(s: *const LcmSchedule, n: usize, alpha: *mut f64, sigma: *mut f64) -> LcmStatus {
    guard(|| {
        let s = handle(s)?;
        if alpha.is_null() || sigma.is_null() {
            return Err(Fail::Null);
        }
        let (a, g) = s.0.alpha_sigma(n)?;
        *alpha = a;
        *sigma = g;
        Ok(())
    })
}

/// Analytic teacher over `count` isotropic components in `dim` dimensions.
/// `means` is row-major `count x dim`; weights are renormalized.
///
/// # Safety
/// Array arguments must hold `count` (or `count * dim`) elements.
#[no_mangle]
pub unsafe extern "C" fn lcm_teacher_new(
    s: *const LcmSchedule,
    dim: usize,
    count: usize,
    weights: *const f64,
    means: *const f64,
    variances: *const f64,
    labels: *const u32,
    out: *mut *mut LcmTeacher,
) -> LcmStatus {
    guard(|| {
        let s = handle(s)?;
        if dim == 0 || count == 0 {
            return Err(Fail::Arg("dim and count must be positive".into()));
        }
        let w = slice(weights, count)?;
        let m = slice(means, count * dim)?;
        let v = slice(variances, count)?;
        if labels.is_null() {
            return Err(Fail::Null);
        }
        let l = std::slice::from_raw_parts(labels, count);
        let comps = (0..count)
            .map(|i| Component { weight: w[i], mean: m[i * dim..(i + 1) * dim].to_vec(), variance: v[i], label: l[i] as usize })
            .collect();
        let mix = MixtureSpec::normalized(comps)?;
        write_out(out, LcmTeacher(TeacherModel::analytic(mix, s.0.clone())))
    })
}

/// Equal-weight ring of `modes` Gaussians, labels assigned round-robin over `classes`.
///
/// # Safety
/// `s` must be a live schedule handle; `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn lcm_teacher_ring(
    s: *const LcmSchedule,
    modes: usize,
    radius: f64,
    std: f64,
    classes: usize,
    out: *mut *mut LcmTeacher,
) -> LcmStatus {
    guard(|| {
        let s = handle(s)?;
        let mix = MixtureSpec::ring(modes, radius, std, classes)?;
        write_out(out, LcmTeacher(TeacherModel::analytic(mix, s.0.clone())))
    })
}

/// # Safety
/// `t` must be null or a live teacher handle.
#[no_mangle]
pub unsafe extern "C" fn lcm_teacher_free(t: *mut LcmTeacher) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Noise prediction `eps*(z, t_n, c)` written to `out[dim]`.
///
/// # Safety
/// `z` and `out` must hold `dim` elements.
#[no_mangle]
pub unsafe extern "C" fn lcm_teacher_eps(t: *const LcmTeacher, z: *const f64, dim: usize, n: usize, class: i64, out: *mut f64) -> LcmStatus {
    guard(|| {
        let t = handle(t)?;
        let z = slice(z, dim)?;
        let out = slice_mut(out, dim)?;
        let e = t.0.eps(z, n, condition(class)?)?;
        out.copy_from_slice(&e);
        Ok(())
    })
}

/// Guided solver estimate of `z` at `n_to` starting from `n_from`.
///
/// # Safety
/// `z` and `out` must hold `dim` elements.
#[no_mangle]
pub unsafe extern "C" fn lcm_cfg_solver_step(
    t: *const LcmTeacher,
    solver: LcmSolver,
    z: *const f64,
    dim: usize,
    n_from: usize,
    n_to: usize,
    omega: f64,
    class: i64,
    out: *mut f64,
) -> LcmStatus {
    guard(|| {
        let t = handle(t)?;
        let z = slice(z, dim)?;
        let out = slice_mut(out, dim)?;
        let kind = match solver {
            LcmSolver::Ddim => SolverKind::Ddim,
            LcmSolver::Dpm2 => SolverKind::Dpm2,
            LcmSolver::Dpmpp2 => SolverKind::Dpmpp2,
        };
        let r = cfg_solver_step(&t.0, z, n_from, n_to, omega, condition(class)?, kind)?;
        out.copy_from_slice(&r);
        Ok(())
    })
}

/// Load a consistency model checkpoint written by the `lcmkit` CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn lcm_model_load(path: *const c_char, out: *mut *mut LcmModel) -> LcmStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null);
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| Fail::Arg("path is not UTF-8".into()))?;
        let (trainer, codec) = load_model(&Checkpoint::load(Path::new(p))?)?;
        write_out(out, LcmModel { model: trainer.model, codec })
    })
}

/// # Safety
/// `m` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn lcm_model_free(m: *mut LcmModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Latent dimension the model operates in; 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn lcm_model_latent_dim(m: *const LcmModel) -> usize {
    m.as_ref().map_or(0, |m| m.codec.d_latent())
}

/// Data dimension of decoded samples; 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn lcm_model_data_dim(m: *const LcmModel) -> usize {
    m.as_ref().map_or(0, |m| m.codec.d_data())
}

/// One consistency-function evaluation `f(z, omega, c, t_n)` in latent space.
///
/// # Safety
/// `z` and `out` must hold `dim` elements.
#[no_mangle]
pub unsafe extern "C" fn lcm_model_apply(
    m: *const LcmModel,
    z: *const f64,
    dim: usize,
    omega: f64,
    class: i64,
    n: usize,
    out: *mut f64,
) -> LcmStatus {
    guard(|| {
        let m = handle(m)?;
        let z = slice(z, dim)?;
        let out = slice_mut(out, dim)?;
        let r = m.model.apply(z, omega, condition(class)?, n, Branch::Online)?;
        out.copy_from_slice(&r);
        Ok(())
    })
}

/// `count` decoded samples with `steps` uniform sampling steps, row-major
/// into `out[count * data_dim]`.
///
/// # Safety
/// `out` must hold `count * lcm_model_data_dim(m)` elements.
#[no_mangle]
pub unsafe extern "C" fn lcm_model_sample(
    m: *const LcmModel,
    steps: usize,
    omega: f64,
    class: i64,
    count: usize,
    seed: u64,
    out: *mut f64,
) -> LcmStatus {
    guard(|| {
        let m = handle(m)?;
        let d = m.codec.d_data();
        let out = slice_mut(out, count * d)?;
        let s = &m.model.schedule;
        let plan = SampleSchedule::uniform(steps, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = multistep_sample(&m.model, s, &plan, omega, condition(class)?, count, &mut rng, &m.codec)?;
        for (row, x) in out.chunks_exact_mut(d).zip(&xs) {
            row.copy_from_slice(x);
        }
        Ok(())
    })
}

/// Sliced Wasserstein-1 between two row-major sample sets of dimension `dim`.
///
/// # Safety
/// `a` must hold `na * dim` and `b` `nb * dim` elements.
#[no_mangle]
pub unsafe extern "C" fn lcm_sliced_w1(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dim: usize,
    n_projections: usize,
    seed: u64,
    out: *mut f64,
) -> LcmStatus {
    guard(|| {
        if dim == 0 {
            return Err(Fail::Arg("dim must be positive".into()));
        }
        if out.is_null() {
            return Err(Fail::Null);
        }
        let rows = |p, n| -> Result<Vec<Vec<f64>>, Fail> { Ok(slice(p, n * dim)?.chunks_exact(dim).map(<[f64]>::to_vec).collect()) };
        let (a, b) = (rows(a, na)?, rows(b, nb)?);
        *out = sliced_w1(&a, &b, n_projections, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(())
    })
}
