//! Orthogonal space decoupling: a low-rank bottleneck applied at every
//! spatial position of the channel-concatenated component features, with a
//! Frobenius penalty pulling the bottleneck rows toward orthonormality.
//!
//! ```text
//! F_con  = concat(F_1, …, F_L)         (L·d)×n×n
//! F_down = W_inᵀ F_con                  r×n×n
//! F_orth = W_orth F_down                r×n×n
//! F_up   = W_outᵀ F_orth                (L·d)×n×n
//! L_orth = ‖M Mᵀ − I_r‖²_F,  M = F_orth as r×n²
//! ```
//!
//! The output replaces the component features; there is no skip connection.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const DEFAULT_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct OsdParams {
    /// `(L·d)×r`
    pub w_in: Tensor,
    /// `r×r`, a 1×1 convolution.
    pub w_orth: Tensor,
    /// `r×(L·d)`
    pub w_out: Tensor,
}

impl OsdParams {
    /// Fan-in uniform `w_in`/`w_out`, identity `w_orth`.
    pub fn init(channels: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 || channels == 0 {
            return Err(Error::contract("osd rank and channel count must be positive"));
        }
        let mut rng = SplitMix64::new(seed);
        let bound_in = 1.0 / math::sqrt(channels as f64);
        let w_in = Tensor::from_fn([channels, rank], |_| rng.uniform(-bound_in, bound_in) as f32);
        let bound_out = 1.0 / math::sqrt(rank as f64);
        let w_out = Tensor::from_fn([rank, channels], |_| rng.uniform(-bound_out, bound_out) as f32);
        Ok(Self { w_in, w_orth: Tensor::identity(rank), w_out })
    }

    pub fn rank(&self) -> usize {
        self.w_orth.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.w_in.dims()[0]
    }

    pub fn check(&self, channels: usize) -> Result<()> {
        let r = self.w_orth.dims().first().copied().unwrap_or(0);
        let ok = self.w_in.dims() == [channels, r]
            && self.w_orth.dims() == [r, r]
            && self.w_out.dims() == [r, channels];
        if !ok {
            return Err(Error::shape(
                "osd params",
                format!(
                    "w_in {:?}, w_orth {:?}, w_out {:?} for {channels} channels",
                    self.w_in.dims(),
                    self.w_orth.dims(),
                    self.w_out.dims()
                ),
            ));
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        alloc::vec![
            (String::from("osd.w_in"), &self.w_in),
            (String::from("osd.w_orth"), &self.w_orth),
            (String::from("osd.w_out"), &self.w_out),
        ]
    }

    /// Binds to a tape. Source training tracks all three maps; target
    /// finetuning tracks only `w_orth`.
    pub fn bind(&self, tape: &mut Tape, train_projections: bool, train_orth: bool) -> OsdVars {
        let put = |tape: &mut Tape, t: &Tensor, tracked: bool| if tracked { tape.param(t) } else { tape.constant(t) };
        OsdVars {
            w_in: put(tape, &self.w_in, train_projections),
            w_orth: put(tape, &self.w_orth, train_orth),
            w_out: put(tape, &self.w_out, train_projections),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OsdVars {
    pub w_in: Var,
    pub w_orth: Var,
    pub w_out: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsdActivations {
    pub f_con: Tensor,
    pub f_orth: Tensor,
    pub f_up: Tensor,
}

fn spatial(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, format!("expected C×n×n, got {:?}", t.dims()))),
    }
}

/// Stacks components along channels in the given order: component `l`
/// occupies channels `l·d .. (l+1)·d`.
pub fn concat_components(components: &[Tensor]) -> Result<Tensor> {
    let first = components.first().ok_or_else(|| Error::shape("concat_components", "no components"))?;
    let (d, h, w) = spatial(first, "concat_components")?;
    let mut data = Vec::with_capacity(components.len() * first.len());
    for c in components {
        if c.dims() != first.dims() {
            return Err(Error::shape("concat_components", format!("{:?} vs {:?}", c.dims(), first.dims())));
        }
        data.extend_from_slice(c.data());
    }
    Tensor::new([components.len() * d, h, w], data)
}

/// Inverse of [`concat_components`] for components with `d` channels.
pub fn split_components(f_up: &Tensor, d: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = spatial(f_up, "split_components")?;
    if d == 0 || c % d != 0 {
        return Err(Error::shape("split_components", format!("{c} channels not divisible by {d}")));
    }
    f_up.data()
        .chunks(d * h * w)
        .map(|chunk| Tensor::new([d, h, w], chunk.to_vec()))
        .collect()
}

/// Bottleneck on the tape. `f_con` is `(L·d)×M` with one column per position.
/// Returns `(f_orth, f_up)`.
pub fn osd_on(tape: &mut Tape, f_con: Var, vars: &OsdVars) -> Result<(Var, Var)> {
    let w_in_t = tape.transpose(vars.w_in)?;
    let down = tape.matmul(w_in_t, f_con)?;
    let orth = tape.matmul(vars.w_orth, down)?;
    let w_out_t = tape.transpose(vars.w_out)?;
    let up = tape.matmul(w_out_t, orth)?;
    Ok((orth, up))
}

/// `‖M Mᵀ − I‖²_F` on the tape for an `r×M` matrix.
pub fn orth_loss_on(tape: &mut Tape, f_orth: Var) -> Result<Var> {
    let r = *tape
        .dims(f_orth)
        .first()
        .ok_or_else(|| Error::shape("orth_loss", "scalar input"))?;
    let t = tape.transpose(f_orth)?;
    let gram = tape.matmul(f_orth, t)?;
    let eye = tape.constant(&Tensor::identity(r));
    let diff = tape.sub(gram, eye)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum(sq)
}

pub fn osd_forward(f_con: &Tensor, params: &OsdParams) -> Result<OsdActivations> {
    let (c, h, w) = spatial(f_con, "osd_forward")?;
    params.check(c)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false, false);
    let x = tape.constant(&f_con.clone().reshape([c, h * w])?);
    let (orth, up) = osd_on(&mut tape, x, &vars)?;
    Ok(OsdActivations {
        f_con: f_con.clone(),
        f_orth: tape.value(orth).reshape([params.rank(), h, w])?,
        f_up: tape.value(up).reshape([c, h, w])?,
    })
}

/// Orthogonality penalty of an `r×n×n` bottleneck activation.
pub fn orth_loss(f_orth: &Tensor) -> Result<f64> {
    let (r, h, w) = spatial(f_orth, "orth_loss")?;
    let mut tape = Tape::new();
    let m = tape.constant(&f_orth.clone().reshape([r, h * w])?);
    let loss = orth_loss_on(&mut tape, m)?;
    tape.scalar(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    #[test]
    fn concat_orders_channels_by_layer() {
        let a = Tensor::new([2, 1, 1], alloc::vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2, 1, 1], alloc::vec![3.0, 4.0]).unwrap();
        let c = concat_components(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(concat_components(&[a.clone()]).unwrap(), a);
        assert_eq!(split_components(&c, 2).unwrap(), alloc::vec![a, b]);
    }

    #[test]
    fn split_rejects_indivisible_channels() {
        assert!(split_components(&Tensor::zeros([5, 2, 2]), 2).is_err());
        assert!(concat_components(&[Tensor::zeros([2, 2, 2]), Tensor::zeros([3, 2, 2])]).is_err());
    }

    #[test]
    fn zero_weights_zero_outputs() {
        let mut p = OsdParams::init(4, 2, 1).unwrap();
        p.w_in.data_mut().fill(0.0);
        p.w_orth.data_mut().fill(0.0);
        p.w_out.data_mut().fill(0.0);
        let f = Tensor::from_fn([4, 2, 2], |i| i as f32);
        let act = osd_forward(&f, &p).unwrap();
        assert!(act.f_orth.data().iter().all(|&v| v == 0.0));
        assert!(act.f_up.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_pipeline_reproduces_input() {
        let p = OsdParams { w_in: Tensor::identity(4), w_orth: Tensor::identity(4), w_out: Tensor::identity(4) };
        let f = Tensor::from_fn([4, 2, 2], |i| i as f32 * 0.5 - 3.0);
        assert_eq!(osd_forward(&f, &p).unwrap().f_up, f);
    }

    #[test]
    fn orth_loss_all_ones_is_ten() {
        let m = Tensor::ones([2, 1, 2]);
        assert_eq!(orth_loss(&m).unwrap(), 10.0);
    }

    #[test]
    fn orth_loss_zero_for_orthonormal_rows() {
        let s = core::f32::consts::FRAC_1_SQRT_2;
        // Two orthonormal rows over four positions.
        let m = Tensor::new([2, 2, 2], alloc::vec![s, s, 0.0, 0.0, 0.0, 0.0, s, -s]).unwrap();
        assert!(orth_loss(&m).unwrap() < 1e-12);
        let p = Tensor::new([2, 2, 2], alloc::vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(orth_loss(&p).unwrap(), 0.0);
    }

    #[test]
    fn orth_loss_gradient() {
        let mut rng = SplitMix64::new(17);
        let m = Tensor::from_fn([3, 5], |_| rng.uniform(-1.0, 1.0) as f32);
        let err = grad_check(|t, v| orth_loss_on(t, v), &m, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn init_shapes_and_identity_orth() {
        let p = OsdParams::init(12, DEFAULT_RANK, 3).unwrap();
        assert_eq!(p.w_in.dims(), &[12, 8]);
        assert_eq!(p.w_out.dims(), &[8, 12]);
        assert_eq!(p.w_orth, Tensor::identity(8));
        assert!(p.check(12).is_ok());
        assert!(p.check(10).is_err());
    }
}
