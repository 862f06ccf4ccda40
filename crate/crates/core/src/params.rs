use crate::autodiff::{Tape, Tensor, Var};

/// A bundle of tensors that can be placed on a tape as leaves.
///
/// `visit`, `visit_mut` and `bind_vars` must walk the tensors in the same
/// order; that order is also the serialization and optimizer order.
pub trait Parameters {
    type Vars;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> Self::Vars;

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.numel());
        n
    }
}

/// Places every tensor of `p` on `tape`, returning the typed handles and
/// the flat leaf list in visit order.
pub fn bind<P: Parameters>(p: &P, tape: &mut Tape, trainable: bool) -> (P::Vars, Vec<Var>) {
    let mut leaves = Vec::new();
    p.visit(&mut |t| leaves.push(tape.leaf(t.clone(), trainable)));
    let mut it = leaves.clone().into_iter();
    let vars = p.bind_vars(&mut || it.next().expect("bind_vars walks the visit order"));
    (vars, leaves)
}

impl<P: Parameters> Parameters for Vec<P> {
    type Vars = Vec<P::Vars>;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.iter().for_each(|p| p.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.iter_mut().for_each(|p| p.visit_mut(f));
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> Self::Vars {
        self.iter().map(|p| p.bind_vars(next)).collect()
    }
}

impl<P: Parameters> Parameters for [P; 3] {
    type Vars = [P::Vars; 3];

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.iter().for_each(|p| p.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.iter_mut().for_each(|p| p.visit_mut(f));
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> Self::Vars {
        let a = self[0].bind_vars(next);
        let b = self[1].bind_vars(next);
        let c = self[2].bind_vars(next);
        [a, b, c]
    }
}

impl Parameters for Tensor {
    type Vars = Var;

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(self)
    }

    fn bind_vars(&self, next: &mut dyn FnMut() -> Var) -> Var {
        next()
    }
}
