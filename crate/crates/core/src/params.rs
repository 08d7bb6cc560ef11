//! Named parameter trees.
//!
//! Parameter structs are generic over the leaf type: `Tensor` for storage,
//! `Var` once bound into a graph. Leaves are addressed by dotted paths
//! such as `blocks.0.attn_occ.q.weight`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::Tensor;

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait ParamTree<T> {
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a T));
    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut T));

    fn leaf_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _| n += 1);
        n
    }
}

/// Declares a parameter struct generic over its leaf type.
///
/// Field kinds: `leaf` is a `T`, `Name` is a nested `Name<T>`, `[Name]` is a
/// `Vec<Name<T>>` with indices as path segments.
macro_rules! param_tree {
    ($(#[$meta:meta])* pub struct $name:ident { $($field:ident : $kind:tt),* $(,)? }) => {
        $(#[$meta])*
        pub struct $name<T> {
            $(pub $field: param_tree!(@ty $kind)),*
        }

        // derives cannot see through the field-type macro
        impl<T: Clone> Clone for $name<T> {
            fn clone(&self) -> Self {
                $name { $($field: self.$field.clone()),* }
            }
        }

        impl<T: PartialEq> PartialEq for $name<T> {
            fn eq(&self, other: &Self) -> bool {
                true $(&& self.$field == other.$field)*
            }
        }

        impl<T: core::fmt::Debug> core::fmt::Debug for $name<T> {
            fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
                f.debug_struct(stringify!($name))
                    $(.field(stringify!($field), &self.$field))*
                    .finish()
            }
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, path: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name {
                    $($field: param_tree!(@map $kind, &self.$field,
                        &$crate::params::join(path, stringify!($field)), f)),*
                }
            }
        }

        impl<T> $crate::params::ParamTree<T> for $name<T> {
            fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $(param_tree!(@visit $kind, &self.$field,
                    &$crate::params::join(path, stringify!($field)), f);)*
            }
            fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut T)) {
                $(param_tree!(@visit_mut $kind, &mut self.$field,
                    &$crate::params::join(path, stringify!($field)), f);)*
            }
        }
    };
    (@ty leaf) => { T };
    (@ty [$n:ident]) => { alloc::vec::Vec<$n<T>> };
    (@ty $n:ident) => { $n<T> };

    (@map leaf, $v:expr, $p:expr, $f:expr) => { $f($p, $v) };
    (@map [$n:ident], $v:expr, $p:expr, $f:expr) => {
        $v.iter()
            .enumerate()
            .map(|(i, x)| x.map(&$crate::params::join($p, &alloc::format!("{i}")), $f))
            .collect()
    };
    (@map $n:ident, $v:expr, $p:expr, $f:expr) => { $v.map($p, $f) };

    (@visit leaf, $v:expr, $p:expr, $f:expr) => { $f($p, $v) };
    (@visit [$n:ident], $v:expr, $p:expr, $f:expr) => {
        for (i, x) in $v.iter().enumerate() {
            $crate::params::ParamTree::visit(x, &$crate::params::join($p, &alloc::format!("{i}")), $f);
        }
    };
    (@visit $n:ident, $v:expr, $p:expr, $f:expr) => {
        $crate::params::ParamTree::visit($v, $p, $f)
    };

    (@visit_mut leaf, $v:expr, $p:expr, $f:expr) => { $f($p, $v) };
    (@visit_mut [$n:ident], $v:expr, $p:expr, $f:expr) => {
        for (i, x) in $v.iter_mut().enumerate() {
            $crate::params::ParamTree::visit_mut(x, &$crate::params::join($p, &alloc::format!("{i}")), $f);
        }
    };
    (@visit_mut $n:ident, $v:expr, $p:expr, $f:expr) => {
        $crate::params::ParamTree::visit_mut($v, $p, $f)
    };
}
pub(crate) use param_tree;

/// Leaves in visiting order with their paths.
pub fn named_leaves<T, P: ParamTree<T>>(p: &P) -> Vec<(String, &T)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| out.push((String::from(name), t)));
    out
}

pub fn total_elements<P: ParamTree<Tensor>>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.len());
    n
}
