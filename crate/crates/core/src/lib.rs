//! Model merging by particle swarm optimization over parameter space, plus
//! the usual static baselines (task arithmetic, DARE, TIES, DELLA, RankMean)
//! and an evolution-strategy weight search.
//!
//! ```
//! use swarm_merge::{task_arithmetic, ParameterSet, Tensor};
//!
//! let base = ParameterSet::from_tensors([("w", Tensor::vector(vec![0.0f32, 0.0]))]).unwrap();
//! let a = ParameterSet::from_tensors([("w", Tensor::vector(vec![2.0f32, 0.0]))]).unwrap();
//! let b = ParameterSet::from_tensors([("w", Tensor::vector(vec![0.0f32, 2.0]))]).unwrap();
//! let merged = task_arithmetic(&base, &[a, b], 0.5).unwrap();
//! assert_eq!(merged.get("w").unwrap().data(), &[1.0, 1.0]);
//! ```

pub mod error;
pub mod fitness;
pub mod merge;
pub mod pso;
pub mod rng;
pub mod task_vectors;
pub mod tensor_store;

pub use error::{Error, Result};
pub use fitness::{FitnessEvaluator, FitnessReport};
pub use merge::{
    dare_linear, dare_ties, della_merge, es_weight_search, merge, rankmean_merge, task_arithmetic, ties_merge,
    EsOutcome, EsParams, MergeMethod, MergeOutcome, MergeRecipe,
};
pub use pso::{
    evaluate_swarm, init_swarm, init_swarm_with, run_pso_merge, run_pso_merge_with, step_swarm, update_particle,
    Particle, PsoHyperparams, PsoOutcome, RunTrace, Swarm, SwarmComposition, SwarmSetup, TraceRow,
};
pub use task_vectors::{
    dare_sparsify, della_prune, make_task_vector, rankmean_weights, ties_trim_elect, DropMask, TaskVector, TiesOutcome,
};
pub use tensor_store::{
    axpy, encode_checkpoint, keyspace_check, load_checkpoint, save_checkpoint, save_checkpoint_as, Dtype, ParameterSet,
    Tensor, TensorBuffer, TensorMap,
};
