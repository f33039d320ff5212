"""Python interface to the sparse-decomposition toolkit.

This package is a thin loader around the compiled extension module built
by ``cargo build -p sparsedec-python`` (``lib_sparsedec.so``). Build that
first, then import this package; set ``SPARSEDEC_LIB`` to the shared
library's path to override the search.

All functions take and return plain nested lists, and all indices are
0-based.
"""

import importlib.machinery
import importlib.util
import os
import pathlib
import sys
import sysconfig

__all__ = [
    "gen_matrix_instance",
    "sparsify_matrices",
    "gen_function_samples",
    "run_pipeline",
    "pattern_from_matrices",
    "sparsity_gap",
    "failure_ratio",
    "sparsity_loss",
    "benchmark_derivative_counts",
    "benchmark_term_norm",
]


def _candidate_paths():
    env = os.environ.get("SPARSEDEC_LIB")
    if env:
        yield pathlib.Path(env)
    here = pathlib.Path(__file__).resolve()
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    for base in [here.parent, *here.parents]:
        yield base / f"_sparsedec{suffix}"
        yield base / "_sparsedec.so"
        for profile in ("release", "debug"):
            yield base / "target" / profile / "lib_sparsedec.so"


def _load():
    tried = []
    for path in _candidate_paths():
        if path.is_file():
            loader = importlib.machinery.ExtensionFileLoader("_sparsedec", str(path))
            spec = importlib.util.spec_from_loader("_sparsedec", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            sys.modules.setdefault("_sparsedec", module)
            return module
        tried.append(str(path))
    raise ImportError(
        "compiled extension not found; run `cargo build -p sparsedec-python` "
        "or set SPARSEDEC_LIB. Tried:\n  " + "\n  ".join(tried)
    )


_native = _load()

gen_matrix_instance = _native.gen_matrix_instance
sparsify_matrices = _native.sparsify_matrices
gen_function_samples = _native.gen_function_samples
run_pipeline = _native.run_pipeline
pattern_from_matrices = _native.pattern_from_matrices
sparsity_gap = _native.sparsity_gap
failure_ratio = _native.failure_ratio
sparsity_loss = _native.sparsity_loss
benchmark_derivative_counts = _native.benchmark_derivative_counts
benchmark_term_norm = _native.benchmark_term_norm
