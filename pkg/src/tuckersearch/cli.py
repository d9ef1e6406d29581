"""Command-line front ends: generate problem instances, run the
decomposition search, and execute the verification suite.

All JSON outputs are byte-reproducible for fixed arguments and seed;
anything time-dependent goes to a separate metadata file so the main
artifacts can be compared directly.

Exit codes: 0 converged or success, 1 verification failure, 2 budget
exhausted, 3 no improving direction above the target, 4 input error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass

import numpy as np

from .objective import objective, save_point
from .search import SearchConfig, run
from .tensor_core import (load_tensor, multilinear_transform, norm_f,
                          random_point, save_tensor_binary, save_tensor_json)
from .verify import run_suite, suite_to_json

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_BUDGET = 2
EXIT_NO_DIRECTION = 3
EXIT_INPUT = 4

_STATUS_EXIT = {"converged": EXIT_OK, "budget": EXIT_BUDGET,
                "no_direction": EXIT_NO_DIRECTION}


@dataclass
class RunConfig:
    """Decomposition settings as they arrive from flags or a config file.

    Mode-specific defaults (the theory-mode threshold cascade) are not
    resolved here; search.run applies them exactly once.
    """
    r: int | None = None
    d: int | None = None
    mode: str = "practical"
    lam: float | None = None
    epsilon: float = 1e-4
    seed: int = 0
    budget: int = 50_000
    samples_per_block: int | None = None
    delta_span: float = 100.0
    delta_points: int = 13
    init: str = "zero"
    out: str = "run"

    def validate(self) -> None:
        for name in ("r", "d"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.mode not in ("practical", "theory"):
            raise ValueError(f"mode must be practical or theory, "
                             f"got {self.mode}")
        for name in ("epsilon", "delta_span"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("budget", "delta_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lam is not None and self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RunConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - fields)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        return cls(**doc)

    def search_config(self) -> SearchConfig:
        return SearchConfig(r=self.r, mode=self.mode, epsilon=self.epsilon,
                            lam=self.lam, seed=self.seed, budget=self.budget,
                            samples_per_block=self.samples_per_block,
                            delta_span=self.delta_span,
                            delta_points=self.delta_points, init=self.init)


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_INPUT


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    r, d = args.rank, args.dim
    if r < 1 or d < 1:
        return _fail(f"rank and dim must be positive, got {r}, {d}")
    if r > d:
        return _fail(f"rank {r} exceeds dimension {d}")
    if args.noise < 0:
        return _fail(f"noise must be nonnegative, got {args.noise}")
    rng = np.random.default_rng(args.seed)
    truth = random_point(r, d, rng)
    T = multilinear_transform(truth.S, truth.A, truth.B, truth.C)
    nt = norm_f(T)
    if nt < 1e-12:
        return _fail("degenerate draw, reconstruction is numerically zero")
    T = T / nt
    if args.noise > 0:
        G = rng.standard_normal((d, d, d))
        T = T + (args.noise / norm_f(G)) * G
    meta = {"r": r, "d": d, "seed": args.seed, "noise": args.noise,
            "exact": args.noise == 0.0}
    if args.binary:
        save_tensor_binary(args.out, T)
        _write_json(args.out + ".meta.json", meta)
    else:
        save_tensor_json(args.out, T, meta)
    print(f"wrote {args.out}: d={d} rank {r} norm {norm_f(T):.6f} "
          f"exact={meta['exact']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# decompose


def _load_config(args) -> RunConfig:
    if args.config is not None:
        with open(args.config) as fh:
            cfg = RunConfig.from_json_dict(json.load(fh))
    else:
        cfg = RunConfig()
    overrides = {"rank": "r", "dim": "d", "mode": "mode", "lam": "lam",
                 "epsilon": "epsilon", "seed": "seed", "budget": "budget",
                 "samples_per_block": "samples_per_block",
                 "delta_span": "delta_span", "delta_points": "delta_points",
                 "init": "init", "out": "out"}
    for flag, field in overrides.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, field, v)
    return cfg


def _tensor_meta(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        if isinstance(doc, dict) and isinstance(doc.get("meta"), dict):
            return doc["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError):
        pass
    return {}


def cmd_decompose(args) -> int:
    try:
        cfg = _load_config(args)
        cfg.validate()
    except (OSError, ValueError, TypeError) as exc:
        return _fail(str(exc))
    try:
        T = load_tensor(args.tensor)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    if T.shape[0] != T.shape[1] or T.shape[0] != T.shape[2]:
        return _fail(f"tensor must be cubical, got shape {T.shape}")
    d = T.shape[0]
    if cfg.d is not None and cfg.d != d:
        return _fail(f"config dimension {cfg.d} does not match tensor "
                     f"dimension {d}")
    if cfg.r is None:
        meta_r = _tensor_meta(args.tensor).get("r")
        if meta_r is None:
            return _fail("rank not given and tensor metadata has none; "
                         "pass --rank")
        cfg.r = int(meta_r)
    if cfg.r > d:
        return _fail(f"rank {cfg.r} exceeds tensor dimension {d}")

    restarts = args.restarts
    results = []
    for i in range(restarts):
        sub = dataclasses.replace(cfg, seed=cfg.seed + i)
        prefix = cfg.out if restarts == 1 else f"{cfg.out}-{i}"
        try:
            result = run(T, sub.search_config())
        except ValueError as exc:
            return _fail(str(exc))
        save_point(prefix + ".factors.json", result.point)
        result.trace.to_jsonl(prefix + ".trace.jsonl")
        status = result.status.replace("_", "-")
        _write_json(prefix + ".summary.json", {
            "status": status,
            "f": result.f,
            "L": result.L,
            "R": result.R,
            "grad_evals": result.grad_evals,
            "objective_evals": result.objective_evals,
            "rounds": result.rounds,
            "config": sub.to_json_dict(),
        })
        _write_json(prefix + ".meta.json", {
            "wall_time": result.wall_time,
            "written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        })
        results.append((result, prefix))
        print(f"restart {i}: status={status} f={result.f:.6e} "
              f"grad_evals={result.grad_evals} -> {prefix}.*")
    best = min(results, key=lambda pair: pair[0].f)
    if restarts > 1:
        print(f"best: {best[1]}.* f={best[0].f:.6e} "
              f"status={best[0].status.replace('_', '-')}")
    return _STATUS_EXIT[best[0].status]


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    names = None
    if args.checks is not None:
        names = [s for s in args.checks.split(",") if s]
    try:
        reports = run_suite(seed=args.seed, names=names)
    except ValueError as exc:
        return _fail(str(exc))
    payload = suite_to_json(reports)
    if args.out is not None:
        with open(args.out, "w") as fh:
            fh.write(payload)
            fh.write("\n")
    for rep in reports:
        flag = "pass" if rep.passed else "FAIL"
        print(f"[{flag}] {rep.lemma}: trials={rep.trials} "
              f"failures={rep.failures} worst_margin={rep.worst_margin:.3e}")
    ok = all(r.passed for r in reports)
    print("all checks passed" if ok else "some checks FAILED")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tuckersearch",
        description="Tucker decomposition by regularized local search")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a random exact-rank instance")
    g.add_argument("--rank", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.0,
                   help="additive noise with this Frobenius norm")
    g.add_argument("--out", default="tensor.json")
    g.add_argument("--binary", action="store_true",
                   help="write the binary format with a sidecar meta file")
    g.set_defaults(func=cmd_generate)

    dp = sub.add_parser("decompose", help="run the search on a tensor file")
    dp.add_argument("tensor")
    dp.add_argument("--config", help="JSON file with RunConfig fields; "
                    "explicit flags take precedence")
    dp.add_argument("--rank", type=int)
    dp.add_argument("--dim", type=int)
    dp.add_argument("--mode", choices=("practical", "theory"))
    dp.add_argument("--lambda", dest="lam", type=float)
    dp.add_argument("--epsilon", type=float)
    dp.add_argument("--seed", type=int)
    dp.add_argument("--budget", type=int)
    dp.add_argument("--samples-per-block", dest="samples_per_block", type=int)
    dp.add_argument("--delta-span", dest="delta_span", type=float)
    dp.add_argument("--delta-points", dest="delta_points", type=int)
    dp.add_argument("--init", help="zero | hosvd | random:<scale>")
    dp.add_argument("--out", help="output path prefix")
    dp.add_argument("--restarts", type=int, default=1,
                    help="independent runs with per-restart seeds")
    dp.set_defaults(func=cmd_decompose)

    v = sub.add_parser("verify", help="run the lemma verification suite")
    v.add_argument("--checks", help="comma-separated subset of checks")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="write the JSON report here")
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "restarts", 1) < 1:
        return _fail("restarts must be positive")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
