"""Flatten nested block-diagram models of interconnected uncertain systems
into the standard LFT form used by IQC analysis tools."""

from .flatten import (
    FlattenError,
    FundamentalDescription,
    flatten_tree,
    fundamental_of_leaf,
    merge_children,
    sparsity_report,
)
from .lft import LftError, LftModel, check_wellposed, export_lft, import_lft, to_lft
from .model import (
    ModelError,
    ModelTree,
    Nsb,
    ParseError,
    ValidationError,
    insert_dummy_blocks,
    load_model,
    parse_model,
    render_model,
    validate,
)
from .sparsemat import BlockPartition, SparseBinaryMatrix
from .ssmodel import DynamicBlock, StateSpace, UncertaintyBlock
from .verify import equivalence_check, sample_delta, simulate_lft, simulate_nested

__version__ = "0.1.0"
