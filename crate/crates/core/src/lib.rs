//! Training low-dimensional manifolds of neural-network weights.
//!
//! A manifold `M(s, P) = Σ a_i(s) P_i` maps a modulator `s ∈ [0, 1]` to a full
//! weight set. Basis points `P_i` are trained jointly with gradients rescaled
//! by the inverse integrated metric of the parameterization.

pub mod autodiff;
pub mod bspline;
pub mod error;
pub mod harness;
pub mod manifold;
pub mod network;
pub mod optimizer;
pub mod oracle;
pub mod quadrature;
pub mod tasks;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use manifold::{BasisBundle, ImtMatrix, Manifold, ManifoldKind, ManifoldSpec, Modulator};
pub use network::checkpoint::Checkpoint;
pub use network::{ConditioningMode, LayerSpec, Network, NetworkSpec};
pub use optimizer::{OptimizerState, Rule, UpdateReport};
pub use tasks::{ConditionedBatch, Dataset, Split, Task, TaskFamily, TaskSpec};
pub use tensor::Tensor;
