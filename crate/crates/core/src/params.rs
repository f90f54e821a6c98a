//! Parameter trees.
//!
//! Every parameter struct is generic over its leaf type so one definition
//! serves values (`Matrix`), tape handles (`Var`) and gradients (`Matrix`).
//! `visit`/`visit_mut` walk leaves in a fixed order with dotted names.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::numerics::Matrix;

/// Generates `map`, `visit`, `visit_mut` and leaf collectors for a struct whose fields are
/// leaves (`T`) or vectors of nested parameter structs.
macro_rules! param_tree {
    ($name:ident { $($leaf:ident),* $(,)? } $(; $($nested:ident),* $(,)?)?) => {
        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name {
                    $($leaf: f(&self.$leaf),)*
                    $($($nested: self.$nested.iter().map(|n| n.map(f)).collect(),)*)?
                }
            }

            pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
                $(f(&format!("{prefix}{}", stringify!($leaf)), &self.$leaf);)*
                $($(
                    for (i, n) in self.$nested.iter().enumerate() {
                        n.visit(&format!("{prefix}{}.{i}.", stringify!($nested)), f);
                    }
                )*)?
            }

            pub fn push_leaves<'a>(&'a self, out: &mut Vec<&'a T>) {
                $(out.push(&self.$leaf);)*
                $($(
                    for n in &self.$nested {
                        n.push_leaves(out);
                    }
                )*)?
            }

            pub fn push_leaves_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
                $(out.push(&mut self.$leaf);)*
                $($(
                    for n in &mut self.$nested {
                        n.push_leaves_mut(out);
                    }
                )*)?
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
                $(f(&format!("{prefix}{}", stringify!($leaf)), &mut self.$leaf);)*
                $($(
                    for (i, n) in self.$nested.iter_mut().enumerate() {
                        n.visit_mut(&format!("{prefix}{}.{i}.", stringify!($nested)), f);
                    }
                )*)?
            }
        }
    };
}

pub(crate) use param_tree;

/// Weight matrix `out × in` drawn from U(±√(6/(in+out))).
pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

pub fn zeros_row(n: usize) -> Matrix {
    Matrix::zeros(1, n)
}

pub fn ones_row(n: usize) -> Matrix {
    Matrix::filled(1, n, 1.0)
}
