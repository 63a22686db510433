"""Command-line front end.

Exit codes
----------
0  success
1  ``verify`` ran and the equivalence check failed
2  the model file could not be parsed
3  the model is invalid (or not realized, for ``verify``)
4  flattening or LFT conversion failed
5  I/O error (missing input, unwritable output, unreadable bundle)
6  bad command-line usage
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .flatten import FlattenError, flatten_tree, sparsity_report
from .generate import attach_random_realizations
from .lft import FORMATS, LftError, import_lft, to_lft, write_export
from .model import (
    ModelTree,
    ParseError,
    ValidationError,
    insert_dummy_blocks,
    load_model,
    validate,
)
from .sparsemat import render_grid
from .verify import DEFAULT_TOL, equivalence_check

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_FLATTEN = 4
EXIT_IO = 5
EXIT_USAGE = 6

COMMANDS = ("flatten", "inspect", "verify", "export")


class UsageError(Exception):
    pass


class _Exit(Exception):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message)
        self.code = code
        self.message = message


@dataclass(frozen=True)
class RunConfig:
    command: str
    input_path: Path
    output_path: Optional[Path] = None
    fix_feedthrough: bool = False
    fmt: str = "archive"
    seed: int = 0
    tolerance: float = DEFAULT_TOL
    horizon: int = 200
    trials: int = 20
    workers: int = 1
    bundle: Optional[Path] = None
    random_realizations: bool = False
    show_gamma: bool = False

    def check(self) -> None:
        """Reject inconsistent flags before any work is done."""
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if self.fmt not in FORMATS:
            raise UsageError(f"--format must be one of {', '.join(FORMATS)}")
        if self.seed < 0:
            raise UsageError("--seed must be non-negative")
        if not self.tolerance > 0:
            raise UsageError("--tol must be positive")
        if self.horizon < 1:
            raise UsageError("--horizon must be at least 1")
        if self.trials < 1:
            raise UsageError("--trials must be at least 1")
        if self.workers < 1:
            raise UsageError("--workers must be at least 1")

    @property
    def default_output(self) -> Path:
        stem = self.input_path.with_suffix("")
        return stem.with_name(stem.name + (".lft.zip" if self.fmt == "archive" else ".lft"))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lftflat", description="Flatten nested uncertain-system models into LFT form.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, fmt=False, out=False):
        p.add_argument("model", type=Path, help="model file (YAML or JSON)")
        p.add_argument("--fix-feedthrough", action="store_true",
                       help="insert unity blocks on direct external-in to external-out wires")
        if out:
            p.add_argument("-o", "--output", type=Path, help="bundle path (default: next to the model)")
        if fmt:
            p.add_argument("--format", dest="fmt", choices=FORMATS, default="archive",
                           help="archive: one zip file; mm-bundle: directory with Matrix Market files")

    common(sub.add_parser("flatten", help="flatten, print the sparsity report and write the bundle"),
           fmt=True, out=True)
    common(sub.add_parser("export", help="flatten and write the bundle only"), fmt=True, out=True)
    p = sub.add_parser("inspect", help="show the NSB tree, dimensions and diagnostics")
    common(p)
    p.add_argument("--gamma", dest="show_gamma", action="store_true", help="also print every local routing matrix")
    p = sub.add_parser("verify", help="check the flat model against the nested simulation")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", dest="tolerance", type=float, default=DEFAULT_TOL)
    p.add_argument("--horizon", type=int, default=200)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--workers", type=int, default=1, help="threads for independent trials")
    p.add_argument("--bundle", type=Path, help="compare against this exported bundle instead of a fresh flattening")
    p.add_argument("--random-realizations", action="store_true",
                   help="attach random stable realizations (seeded by --seed) to every dynamic block")
    return parser


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    fields = {k: v for k, v in vars(ns).items() if k not in ("command", "model", "output")}
    return RunConfig(command=ns.command, input_path=ns.model, output_path=getattr(ns, "output", None), **fields)


# pipeline ------------------------------------------------------------------


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load(cfg: RunConfig) -> ModelTree:
    try:
        tree = load_model(cfg.input_path)
    except FileNotFoundError:
        raise _Exit(EXIT_IO, f"cannot read {cfg.input_path}: no such file") from None
    except ValidationError as exc:  # duplicate drive detected while parsing
        raise _Exit(EXIT_VALIDATION, f"invalid model: {exc}") from None
    except ParseError as exc:
        raise _Exit(EXIT_PARSE, f"parse error in {cfg.input_path}: {exc}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise _Exit(EXIT_IO, f"cannot read {cfg.input_path}: {exc}") from None
    if cfg.fix_feedthrough:
        tree = insert_dummy_blocks(tree)
    return tree


def _require_valid(tree: ModelTree) -> None:
    diags = validate(tree)
    if diags:
        for d in diags:
            _err(str(d))
        hint = ""
        if any(d.code == "feedthrough" for d in diags):
            hint = " (direct external wires can be fixed with --fix-feedthrough)"
        raise _Exit(EXIT_VALIDATION, f"model is invalid: {len(diags)} diagnostic(s){hint}")


def _flatten(tree: ModelTree):
    try:
        return flatten_tree(tree)
    except ValidationError as exc:
        raise _Exit(EXIT_VALIDATION, str(exc)) from None
    except FlattenError as exc:
        raise _Exit(EXIT_FLATTEN, f"flattening failed: {exc}") from None


def _to_lft(fd):
    try:
        return to_lft(fd)
    except LftError as exc:
        raise _Exit(EXIT_FLATTEN, f"LFT conversion failed: {exc}") from None


def _write(cfg: RunConfig, lft) -> Path:
    out = cfg.output_path or cfg.default_output
    try:
        return write_export(lft, out, cfg.fmt)
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write {out}: {exc}") from None


def cmd_flatten(cfg: RunConfig) -> int:
    tree = _load(cfg)
    _require_valid(tree)
    fd = _flatten(tree)
    print(sparsity_report(fd).to_text())
    lft = _to_lft(fd)
    path = _write(cfg, lft)
    print(f"wrote {cfg.fmt} bundle: {path}")
    return EXIT_OK


def cmd_export(cfg: RunConfig) -> int:
    tree = _load(cfg)
    _require_valid(tree)
    lft = _to_lft(_flatten(tree))
    print(_write(cfg, lft))
    return EXIT_OK


def _nsb_summary(tree: ModelTree, nid: str) -> str:
    n = tree.nsbs[nid]
    part = n.partition
    rows = " ".join(f"{lab}={k}" for lab, k in zip(part.row_labels, part.row_block_sizes))
    cols = " ".join(f"{lab}={k}" for lab, k in zip(part.col_labels, part.col_block_sizes))
    blocks = [f"{b.id}({b.n_inputs}->{b.n_outputs})" for b in n.dynamics]
    blocks += [f"{u.id}[{u.dim}]" for u in n.uncertainties]
    return (
        f"{nid}  blocks: {' '.join(blocks) or '-'}  ports: {n.n_ext_in} in / {n.n_ext_out} out  "
        f"gamma {n.gamma.nrows}x{n.gamma.ncols} rows({rows}) cols({cols})"
    )


def render_tree(tree: ModelTree) -> list[str]:
    """Indented NSB tree, one line per NSB."""
    lines = []
    seen = set()

    def walk(nid, prefix, last, top):
        connector = "" if top else ("└── " if last else "├── ")
        if nid not in tree.nsbs:
            lines.append(f"{prefix}{connector}{nid}  (undefined)")
            return
        if nid in seen:
            lines.append(f"{prefix}{connector}{nid}  (repeated)")
            return
        seen.add(nid)
        lines.append(prefix + connector + _nsb_summary(tree, nid))
        kids = tree.nsbs[nid].children
        inner = prefix if top else prefix + ("    " if last else "│   ")
        for k, c in enumerate(kids):
            walk(c, inner, k == len(kids) - 1, False)

    walk(tree.root, "", True, True)
    for nid in tree.nsbs:
        if nid not in seen:
            lines.append(f"(detached) {_nsb_summary(tree, nid)}")
    return lines


def cmd_inspect(cfg: RunConfig) -> int:
    tree = _load(cfg)
    for line in render_tree(tree):
        print(line)
    if cfg.show_gamma:
        for nid in tree.nsbs:
            n = tree.nsbs[nid]
            print(f"\n{nid}:")
            try:
                print(render_grid(n.gamma, n.partition))
            except ValueError as exc:
                print(f"  (cannot render: {exc})")
    diags = validate(tree)
    for d in diags:
        _err(str(d))
    if diags:
        print(f"invalid: {len(diags)} diagnostic(s)")
        return EXIT_VALIDATION
    print("valid")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    tree = _load(cfg)
    if cfg.random_realizations:
        tree = attach_random_realizations(tree, cfg.seed)
    _require_valid(tree)
    if not tree.realized:
        missing = [f"{path}" for path, b in tree.iter_blocks() if hasattr(b, "realized") and not b.realized]
        raise _Exit(
            EXIT_VALIDATION,
            f"cannot simulate: {len(missing)} dynamic block(s) have no realization "
            f"(first: {missing[0]}); add 'ss' entries or pass --random-realizations",
        )
    fd = _flatten(tree)
    if cfg.bundle is not None:
        try:
            flat = import_lft(cfg.bundle)
        except OSError as exc:
            raise _Exit(EXIT_IO, f"cannot read bundle {cfg.bundle}: {exc}") from None
        except (LftError, KeyError, ValueError) as exc:
            raise _Exit(EXIT_FLATTEN, f"unusable bundle {cfg.bundle}: {exc}") from None
        if fd.n_ext_in or fd.n_ext_out:
            raise _Exit(EXIT_FLATTEN, "bundles are port-free LFT models; this model has external ports")
        if not flat.realized:
            raise _Exit(EXIT_VALIDATION, f"bundle {cfg.bundle} is structural only (exported without realizations)")
    elif fd.n_ext_in or fd.n_ext_out:
        flat = fd
    else:
        flat = _to_lft(fd)
    report = equivalence_check(
        tree, flat, n_trials=cfg.trials, horizon=cfg.horizon, tol=cfg.tolerance, seed=cfg.seed, workers=cfg.workers
    )
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_VERIFY_FAILED


_HANDLERS = {"flatten": cmd_flatten, "export": cmd_export, "inspect": cmd_inspect, "verify": cmd_verify}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit code."""
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        cfg = config_from_args(ns)
        try:
            cfg.check()
        except UsageError as exc:
            parser.error(str(exc))
    except SystemExit as exc:  # usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return _HANDLERS[cfg.command](cfg)
    except _Exit as exc:
        if exc.message:
            _err(f"lftflat: {exc.message}")
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
