use ndarray::{Array1, Array2};

/// A named, flat view of one tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Anything the optimizer and checkpoint code can walk tensor by tensor.
/// The order of `tensors` and `tensors_mut` must agree.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, scale: f64, other: &Self) {
        let src: Vec<Vec<f64>> = other.tensors().iter().map(|t| t.data.to_vec()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Flat scalar access used by the finite-difference checker.
    fn get_flat(&self, index: usize) -> f64 {
        let mut i = index;
        for t in self.tensors() {
            if i < t.data.len() {
                return t.data[i];
            }
            i -= t.data.len();
        }
        panic!("flat index {index} out of range")
    }

    fn set_flat(&mut self, index: usize, value: f64) {
        let mut i = index;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("flat index {index} out of range")
    }
}

fn view1<'a>(name: String, a: &'a Array1<f64>) -> TensorView<'a> {
    TensorView {
        name,
        shape: vec![a.len()],
        data: a.as_slice().expect("contiguous"),
    }
}

fn view2<'a>(name: String, a: &'a Array2<f64>) -> TensorView<'a> {
    TensorView {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("contiguous"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }
}

/// Weights of one pre-norm block. Matrices are stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2: LayerNormParams,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNormParams,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl ParamSet for Params {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = vec![view2("tok_emb".into(), &self.tok_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(view1(format!("blocks.{i}.ln1.gain"), &b.ln1.gain));
            out.push(view1(format!("blocks.{i}.ln1.bias"), &b.ln1.bias));
            out.push(view2(format!("blocks.{i}.attn.wq"), &b.wq));
            out.push(view2(format!("blocks.{i}.attn.wk"), &b.wk));
            out.push(view2(format!("blocks.{i}.attn.wv"), &b.wv));
            out.push(view2(format!("blocks.{i}.attn.wo"), &b.wo));
            out.push(view1(format!("blocks.{i}.ln2.gain"), &b.ln2.gain));
            out.push(view1(format!("blocks.{i}.ln2.bias"), &b.ln2.bias));
            out.push(view2(format!("blocks.{i}.mlp.w1"), &b.w1));
            out.push(view1(format!("blocks.{i}.mlp.b1"), &b.b1));
            out.push(view2(format!("blocks.{i}.mlp.w2"), &b.w2));
            out.push(view1(format!("blocks.{i}.mlp.b2"), &b.b2));
        }
        out.push(view1("ln_f.gain".into(), &self.ln_f.gain));
        out.push(view1("ln_f.bias".into(), &self.ln_f.bias));
        out.push(view2("head.w".into(), &self.head_w));
        out.push(view1("head.b".into(), &self.head_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn s<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("contiguous")
        }
        let mut out = vec![s(&mut self.tok_emb)];
        for b in &mut self.blocks {
            out.push(s(&mut b.ln1.gain));
            out.push(s(&mut b.ln1.bias));
            out.push(s(&mut b.wq));
            out.push(s(&mut b.wk));
            out.push(s(&mut b.wv));
            out.push(s(&mut b.wo));
            out.push(s(&mut b.ln2.gain));
            out.push(s(&mut b.ln2.bias));
            out.push(s(&mut b.w1));
            out.push(s(&mut b.b1));
            out.push(s(&mut b.w2));
            out.push(s(&mut b.b2));
        }
        out.push(s(&mut self.ln_f.gain));
        out.push(s(&mut self.ln_f.bias));
        out.push(s(&mut self.head_w));
        out.push(s(&mut self.head_b));
        out
    }
}

/// Gradients with the same layout as the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<P> {
    pub grads: P,
    pub loss: f64,
}

impl<P: ParamSet> GradientSet<P> {
    pub fn zeros(like: &P) -> Self {
        Self {
            grads: like.zeros_like(),
            loss: 0.0,
        }
    }

    pub fn accumulate(&mut self, scale: f64, other: &Self) {
        self.grads.add_scaled(scale, &other.grads);
        self.loss += scale * other.loss;
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.scale(factor);
        self.loss *= factor;
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grads.all_finite()
    }
}

/// Two parameter sets optimized or checked together.
impl<A: ParamSet, B: ParamSet> ParamSet for (A, B) {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = self.0.tensors();
        out.extend(self.1.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.0.tensors_mut();
        out.extend(self.1.tensors_mut());
        out
    }
}
