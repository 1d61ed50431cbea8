"""Implementation-equivalence tooling for mechanistic interpretations."""

__version__ = "0.1.0"

from .causal import (  # noqa: E402
    Alignment,
    CausalModel,
    Intervention,
    Task,
    TransitionFunction,
    Variable,
    apply_intervention,
    build_model,
    check_abstraction,
    check_circuit,
    check_interpretation,
    solve,
    solve_batch,
)
from .congruity import CongruityConfig, CongruityReport, congruity, congruity_matrix, set_congruity  # noqa: E402
from .equiv import (  # noqa: E402
    DistillationMap,
    check_thm1,
    check_thm2,
    check_thm3,
    compression,
    empirical_diameter,
    hausdorff,
    impl_distance,
    sample_size_bound,
)
from .implgen import ImplementationSet, VariantStrategy, generate_implementations  # noqa: E402
from .rasp import builtin_interpretations, compile_program, interpret, parse_program  # noqa: E402
from .reprsim import RepresentationMatrix, get_reprs, repr_dist  # noqa: E402

__all__ = [
    "Alignment", "CausalModel", "CongruityConfig", "CongruityReport", "DistillationMap",
    "ImplementationSet", "Intervention", "RepresentationMatrix", "Task", "TransitionFunction",
    "Variable", "VariantStrategy", "apply_intervention", "build_model", "builtin_interpretations",
    "check_abstraction", "check_circuit", "check_interpretation", "check_thm1", "check_thm2",
    "check_thm3", "compile_program", "compression", "congruity", "congruity_matrix",
    "empirical_diameter", "generate_implementations", "get_reprs", "hausdorff", "impl_distance",
    "interpret", "parse_program", "repr_dist", "sample_size_bound", "set_congruity", "solve",
    "solve_batch",
]
