use crate::dtype::{Element, Storage};
use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;
use crate::{map_storage, map_storage2};

trait Unary: Send + Sync + 'static {
    fn apply<T: Element>(&self, x: T) -> T;
}

fn map_unary<U: Unary>(s: &Storage, u: &U) -> Storage {
    map_storage!(s, v => v.iter().map(|&x| u.apply(x)).collect())
}

macro_rules! unary_fn {
    ($name:ident, |$x:ident| $body:expr) => {
        struct $name;
        impl Unary for $name {
            fn apply<T: Element>(&self, $x: T) -> T {
                $body
            }
        }
    };
}

unary_fn!(Neg, |x| -x);
unary_fn!(Exp, |x| x.exp());
unary_fn!(Log, |x| x.ln());
unary_fn!(Sqrt, |x| x.sqrt());
unary_fn!(Square, |x| x * x);
unary_fn!(Tanh, |x| x.tanh());
unary_fn!(Sigmoid, |x| {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
});
unary_fn!(Relu, |x| if x > T::zero() { x } else { T::zero() });
unary_fn!(ReluMask, |x| if x > T::zero() { T::one() } else { T::zero() });
unary_fn!(Softplus, |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p());

struct Scale(f64);
impl Unary for Scale {
    fn apply<T: Element>(&self, x: T) -> T {
        x * T::lit(self.0)
    }
}

struct AddScalar(f64);
impl Unary for AddScalar {
    fn apply<T: Element>(&self, x: T) -> T {
        x + T::lit(self.0)
    }
}

struct LeakyRelu(f64);
impl Unary for LeakyRelu {
    fn apply<T: Element>(&self, x: T) -> T {
        if x > T::zero() {
            x
        } else {
            x * T::lit(self.0)
        }
    }
}

struct LeakyMask(f64);
impl Unary for LeakyMask {
    fn apply<T: Element>(&self, x: T) -> T {
        if x > T::zero() {
            T::one()
        } else {
            T::lit(self.0)
        }
    }
}

struct Clamp(f64, f64);
impl Unary for Clamp {
    fn apply<T: Element>(&self, x: T) -> T {
        x.max(T::lit(self.0)).min(T::lit(self.1))
    }
}

struct ClampMask(f64, f64);
impl Unary for ClampMask {
    fn apply<T: Element>(&self, x: T) -> T {
        if x >= T::lit(self.0) && x <= T::lit(self.1) {
            T::one()
        } else {
            T::zero()
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary_storage(op: BinOp, a: &Tensor, b: &Tensor, out: &[usize], name: &'static str) -> Result<Storage> {
    let (ash, bsh) = (a.shape(), b.shape());
    map_storage2!(a.storage(), b.storage(), (x, y) => match op {
        BinOp::Add => kernels::binary(x, ash, y, bsh, out, |p, q| p + q),
        BinOp::Sub => kernels::binary(x, ash, y, bsh, out, |p, q| p - q),
        BinOp::Mul => kernels::binary(x, ash, y, bsh, out, |p, q| p * q),
        BinOp::Div => kernels::binary(x, ash, y, bsh, out, |p, q| p / q),
    })
    .ok_or(TensorError::DTypeMismatch { op: name })
}

impl Tensor {
    fn binary_op(&self, other: &Tensor, op: BinOp, name: &'static str) -> Result<Tensor> {
        let out = kernels::broadcast_shape(self.shape(), other.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        })?;
        let storage = binary_storage(op, self, other, &out, name)?;
        Tensor::from_op(storage, out, name, vec![self.clone(), other.clone()], move |g, inp| {
            let (a, b) = (&inp[0], &inp[1]);
            let ga = a.requires_grad_flag();
            let gb = b.requires_grad_flag();
            Ok(match op {
                BinOp::Add => vec![
                    ga.then(|| g.sum_to(a.shape())).transpose()?,
                    gb.then(|| g.sum_to(b.shape())).transpose()?,
                ],
                BinOp::Sub => vec![
                    ga.then(|| g.sum_to(a.shape())).transpose()?,
                    gb.then(|| g.neg()?.sum_to(b.shape())).transpose()?,
                ],
                BinOp::Mul => vec![
                    ga.then(|| g.mul(b)?.sum_to(a.shape())).transpose()?,
                    gb.then(|| g.mul(a)?.sum_to(b.shape())).transpose()?,
                ],
                BinOp::Div => vec![
                    ga.then(|| g.div(b)?.sum_to(a.shape())).transpose()?,
                    gb.then(|| g.mul(a)?.div(&b.square()?)?.neg()?.sum_to(b.shape()))
                        .transpose()?,
                ],
            })
        })
    }

    /// Broadcasting elementwise sum.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, BinOp::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, BinOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, BinOp::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_op(other, BinOp::Div, "div")
    }

    fn unary_op<U, F>(&self, u: U, name: &'static str, backward: F) -> Result<Tensor>
    where
        U: Unary,
        F: Fn(&Tensor, &Tensor) -> Result<Tensor> + Send + Sync + 'static,
    {
        let storage = map_unary(self.storage(), &u);
        Tensor::from_op(storage, self.shape().to_vec(), name, vec![self.clone()], move |g, inp| {
            Ok(vec![Some(backward(g, &inp[0])?)])
        })
    }

    /// Constant (non-differentiable) tensor derived elementwise from `self`.
    fn mask_of<U: Unary>(&self, u: U) -> Tensor {
        Tensor::leaf(map_unary(self.storage(), &u), self.shape().to_vec(), false)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary_op(Neg, "neg", |g, _| g.neg())
    }

    /// Multiplication by a constant.
    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.unary_op(Scale(s), "scale", move |g, _| g.scale(s))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary_op(AddScalar(c), "add_scalar", |g, _| Ok(g.clone()))
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary_op(Exp, "exp", |g, x| g.mul(&x.exp()?))
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary_op(Log, "log", |g, x| g.div(x))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary_op(Sqrt, "sqrt", |g, x| g.div(&x.sqrt()?.scale(2.0)?))
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary_op(Square, "square", |g, x| g.mul(&x.scale(2.0)?))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary_op(Tanh, "tanh", |g, x| {
            let t = x.tanh()?;
            g.mul(&t.square()?.neg()?.add_scalar(1.0)?)
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary_op(Sigmoid, "sigmoid", |g, x| {
            let s = x.sigmoid()?;
            g.mul(&s.mul(&s.neg()?.add_scalar(1.0)?)?)
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary_op(Relu, "relu", |g, x| g.mul(&x.mask_of(ReluMask)))
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        self.unary_op(LeakyRelu(slope), "leaky_relu", move |g, x| g.mul(&x.mask_of(LeakyMask(slope))))
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(&self) -> Result<Tensor> {
        self.unary_op(Softplus, "softplus", |g, x| g.mul(&x.sigmoid()?))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        self.unary_op(Clamp(lo, hi), "clamp", move |g, x| g.mul(&x.mask_of(ClampMask(lo, hi))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::DType;

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(vec![-3.0, 2.5], &[2]).unwrap();
        assert_eq!(x.relu().unwrap().to_f64_vec(), vec![0.0, 2.5]);
    }

    #[test]
    fn broadcast_mismatch_is_an_error() {
        let a = Tensor::zeros(&[2, 3], DType::F32);
        let b = Tensor::zeros(&[4], DType::F32);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        assert!(matches!(x.log(), Err(TensorError::NonFinite { op: "log" })));
    }

    #[test]
    fn dtype_mixing_is_rejected() {
        let a = Tensor::zeros(&[2], DType::F32);
        let b = Tensor::zeros(&[2], DType::F64);
        assert!(matches!(a.mul(&b), Err(TensorError::DTypeMismatch { .. })));
    }

    #[test]
    fn general_broadcast_matches_manual() {
        let a = Tensor::from_f64((0..12).map(|v| v as f64).collect(), &[2, 3, 2]).unwrap();
        let b = Tensor::from_f64(vec![10.0, 20.0], &[2, 1, 1]).unwrap();
        let c = a.add(&b).unwrap().to_f64_vec();
        for (i, v) in c.iter().enumerate() {
            let expect = i as f64 + if i < 6 { 10.0 } else { 20.0 };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn softplus_is_accurate_in_the_tail() {
        let x = Tensor::from_f64(vec![-30.0, 30.0], &[2]).unwrap();
        let y = x.softplus().unwrap().to_f64_vec();
        assert!((y[0] - (-30f64).exp()).abs() < 1e-20);
        assert!((y[1] - 30.0).abs() < 1e-12);
    }
}
