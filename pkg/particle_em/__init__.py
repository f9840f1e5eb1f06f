# particle_em — particle-based alternatives to expectation maximization
#
# Submodules:
#   particle_em.types       - ModelSpec, ParticleCloud, ParameterState, RunConfig, Trace
#   particle_em.rng         - StepRng counter-based streams per (step, particle)
#   particle_em.samplers    - ula/pga/pqn/pmga/soul steps, Preconditioner, run
#   particle_em.metropolis  - UlaProposal, MhState, marginal and joint MH steps
#   particle_em.models      - ToyHierarchical, LogisticRegressionModel, BnnModel
#   particle_em.oracles     - mean-field recursions, spectral radii, finite-N laws, checkers
#   particle_em.data        - load_wbc, load_mnist_subset, synthetic_dataset
#   particle_em.metrics     - Classifier, test_error, lppd, variance estimates
#   particle_em.outputs     - atomic_output, CSV/NPZ/JSON writers and readers
#   particle_em.experiment  - TOML experiments, replicates, verify suites
#   particle_em.cli         - particle-em run / verify / spectral
#   particle_em.errors      - ParticleEMError hierarchy

__version__ = "0.1.0"
