"""Command-line entry point: ``slemlab {train,eval,grid,diagnose,online,gradcheck}``.

Every command reads the JSON config (defaults in :mod:`slemlab.config`),
applies ``--set a.b=value`` overrides, and writes its results plus a
``manifest_<command>.json`` into ``output_dir``. Outputs carry the config
hash and build id and contain no timestamps, so reruns are byte-identical.
A completed command with the same config hash is not redone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import diagnostics as diag
from . import evaluation as ev
from . import gradcheck as gc
from . import model as mdl
from . import online as onl
from . import rng as rngmod
from .bilevel import StepRecord, meta_train
from .regularizers import head_activation
from .tasks import task_episode

WORKERS_ENV = "SLEMLAB_WORKERS"

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2
EXIT_CONFLICT = 3


class CommandError(RuntimeError):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Output directory, stamp and manifest bookkeeping for one command."""

    def __init__(self, command: str, cfg: dict, force: bool = False):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CommandError(f"output_dir {self.out}: cannot create ({exc.strerror})") from None
        if not os.access(self.out, os.W_OK):
            raise CommandError(f"output_dir {self.out}: not writable")
        self.hash = cfgmod.config_hash(cfg)
        self.build = cfgmod.build_id()
        self.files: list[str] = []
        self.manifest_path = self.out / f"manifest_{command}.json"
        self.force = force

    @property
    def stamp(self) -> dict:
        return {"config_hash": self.hash, "build": self.build}

    def already_done(self) -> bool:
        if not self.manifest_path.exists() or self.force:
            return False
        prev = json.loads(self.manifest_path.read_text())
        if prev.get("config_hash") != self.hash:
            raise CommandError(
                f"{self.manifest_path} records config {prev.get('config_hash')}, current config "
                f"is {self.hash}; refusing to overwrite (use another output_dir or --force)",
                EXIT_CONFLICT,
            )
        return prev.get("status") == "complete"

    def write_json(self, name: str, obj: dict) -> Path:
        body = dict(obj)
        body.update(self.stamp)
        return self.write_text(name, _dumps(body))

    def write_csv(self, name: str, text: str) -> Path:
        header = "".join(f"# {k}: {v}\n" for k, v in sorted(self.stamp.items()))
        return self.write_text(name, header + text)

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        _write(path, text)
        if name not in self.files:
            self.files.append(name)
        return path

    def finish(self, extra: dict | None = None, status: str = "complete") -> None:
        manifest = {
            "command": self.command,
            "status": status,
            "seed": self.cfg["seed"],
            "config": {k: v for k, v in self.cfg.items() if k != "output_dir"},
            "files": {f: _sha256(self.out / f) for f in sorted(self.files)},
        }
        manifest.update(extra or {})
        manifest.update(self.stamp)
        _write(self.manifest_path, _dumps(manifest))


def _workers(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CommandError(f"{WORKERS_ENV}={raw!r} is not an integer") from None


def _load_checkpoint(path: str) -> mdl.MetaLearner:
    try:
        return mdl.from_checkpoint(json.loads(Path(path).read_text()))
    except OSError as exc:
        raise CommandError(f"checkpoint {path}: cannot read ({exc.strerror})") from None
    except (KeyError, ValueError) as exc:
        raise CommandError(f"checkpoint {path}: {exc}") from None


def _check_compatible(h: mdl.MetaLearner, cfg: dict, requested_head: str | None) -> None:
    reg_head = head_activation(cfgmod.regularizer(cfg))
    if requested_head is not None and requested_head != h.head:
        raise CommandError(
            f"checkpoint has a {h.head} head; refusing the eval.head={requested_head} override")
    if reg_head != h.head:
        raise CommandError(
            f"checkpoint has a {h.head} head but the configured regularizer implies {reg_head}")
    t = cfg["train"]
    expected = list(t["sizes"])
    expected[0] += int(h.input_bias)
    actual = [h.weights[0].shape[1]] + [w.shape[0] for w in h.weights]
    if actual != expected or h.input_bias != t["input_bias"]:
        raise CommandError(
            f"checkpoint layer sizes {actual} (input_bias={h.input_bias}) do not match "
            f"train.sizes {t['sizes']} (input_bias={t['input_bias']})")


def _log_line(rec: StepRecord) -> str:
    d = {
        "task_index": rec.task_index,
        "query_loss": rec.query_loss,
        "w_norm": rec.w_norm,
        "sigma_min_buffer": rec.sigma_min_buffer,
        "head_max_norm": rec.head_max_norm,
    }
    return json.dumps(d, sort_keys=True) + "\n"


def cmd_train(cfg: dict, args) -> int:
    run = Run("train", cfg, args.force)
    if run.already_done():
        print(f"train: already complete in {run.out}")
        return EXIT_OK
    tc = cfgmod.train_config(cfg)
    result = meta_train(tc)
    header = json.dumps({"header": run.stamp}, sort_keys=True) + "\n"
    run.write_text("train_log.jsonl", header + "".join(_log_line(r) for r in result.log))
    ckpt = mdl.to_checkpoint(result.h)
    run.write_json("checkpoint.json", ckpt)
    tail = result.log[-min(100, len(result.log)):]
    run.finish({
        "head": result.h.head,
        "final_sigma_min_buffer": result.log[-1].sigma_min_buffer,
        "final_mean_query_loss": float(np.mean([r.query_loss for r in tail])),
    })
    print(f"train: {tc.T} tasks, checkpoint at {run.out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    run = Run("eval", cfg, args.force)
    if run.already_done():
        print(f"eval: already complete in {run.out}")
        return EXIT_OK
    e = cfg["eval"]
    path = e["checkpoint"]
    if path is None:
        raise CommandError("eval needs a checkpoint (eval.checkpoint or --checkpoint)")
    h = _load_checkpoint(path)
    _check_compatible(h, cfg, e["head"])
    res = ev.transfer_error(h, cfgmod.environment(cfg), e["n_test_tasks"],
                            cfgmod.regularizer(cfg), e["test_m"], e["test_n"], e["lr"],
                            _workers(args.workers), e["chunk"])
    rows = ["task_index,loss,w_norm,adapt_steps\n"] + [
        f"{i},{l!r},{w!r},{int(s)}\n"
        for i, (l, w, s) in enumerate(zip(res.losses.tolist(), res.w_norms.tolist(), res.steps))
    ]
    run.write_csv("eval_tasks.csv", "".join(rows))
    run.write_json("eval.json", {
        "transfer_error": res.mean,
        "mean_w_norm": res.mean_w_norm,
        "max_head_norm": res.max_head_norm,
        "n_test_tasks": e["n_test_tasks"],
        "head": h.head,
    })
    run.finish({"head": h.head, "checkpoint": str(path)})
    print(f"eval: transfer error {res.mean:.6g} over {e['n_test_tasks']} tasks")
    return EXIT_OK


def cmd_grid(cfg: dict, args) -> int:
    run = Run("grid", cfg, args.force)
    if run.already_done():
        print(f"grid: already complete in {run.out}")
        return EXIT_OK
    g = cfg["grid"]
    cells = ev.grid_cells(g["strategies"], g["T_grid"], [tuple(mn) for mn in g["mn_grid"]],
                          g["seeds"])
    stamp = dict(run.stamp, cell_config_hash=cfgmod.cell_config_hash(cfg))
    base = cfgmod.train_config(cfg)
    try:
        results, reports = ev.run_grid(cells, base, cfg["eval"]["n_test_tasks"], run.out,
                                       _workers(args.workers), stamp)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_CONFLICT) from None
    run.files += ["results.csv", "summary.json"]
    run.files += sorted(f"curve_m{m}_n{n}.csv" for m, n in {(r.m, r.n) for r in reports})
    run.finish({"cells": len(cells), "cell_config_hash": stamp["cell_config_hash"]})
    print(f"grid: {len(results)} cells, results in {run.out}")
    return EXIT_OK


def _summary_from_dir(train_dir: Path) -> tuple[mdl.MetaLearner, diag.TrainingSummary, dict]:
    manifest = json.loads((train_dir / "manifest_train.json").read_text())
    h = _load_checkpoint(str(train_dir / "checkpoint.json"))
    recs = [json.loads(line) for line in (train_dir / "train_log.jsonl").read_text().splitlines()]
    recs = [r for r in recs if "header" not in r]
    env = manifest["config"]["environment"]
    summary = diag.TrainingSummary(
        len(recs), env["m"], env["n"],
        [r["head_max_norm"] for r in recs], [r["w_norm"] for r in recs],
        float(recs[-1]["sigma_min_buffer"]),
    )
    return h, summary, manifest["config"]


def cmd_diagnose(cfg: dict, args) -> int:
    run = Run("diagnose", cfg, args.force)
    if run.already_done():
        print(f"diagnose: already complete in {run.out}")
        return EXIT_OK
    d = cfg["diagnostics"]
    constants = cfgmod.bound_constants(cfg)
    if d["train_dir"] is not None:
        try:
            h, summary, train_cfg = _summary_from_dir(Path(d["train_dir"]))
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise CommandError(f"diagnostics.train_dir: cannot read training run ({exc})") from None
        _check_compatible(h, cfg, None)
    else:
        tc = cfgmod.train_config(cfg)
        result = meta_train(tc)
        h, summary = result.h, diag.summarize(result, tc)
    env = cfgmod.environment(cfg)
    e = cfg["eval"]
    te = ev.transfer_error(h, env, e["n_test_tasks"], cfgmod.regularizer(cfg),
                           e["test_m"], e["test_n"], e["lr"], _workers(args.workers), e["chunk"])
    summary.test_head_max_norm = te.max_head_norm
    summary.test_w_norms = te.w_norms.tolist()
    report = diag.bound_report(h, summary, constants)

    # Gaussian complexity of the norm-bounded linear learner class on pooled test features
    eps = [task_episode(env, rngmod.TEST_TASKS, i) for i in range(min(20, e["n_test_tasks"]))]
    feats = h.features(np.concatenate([ep.support_x for ep in eps]))
    oracle = diag.LinearBall(report.constants["M"])
    gauss = diag.gaussian_complexity(oracle, feats, d["n_mc"],
                                     rngmod.stream(cfg["seed"], rngmod.DIAGNOSTICS))
    body = report.to_json()
    body["empirical"] = {
        "transfer_error": te.mean,
        "mean_w_norm": te.mean_w_norm,
        "learner_gaussian_complexity": gauss.to_json(),
    }
    run.write_json("bound_report.json", body)
    run.finish({"head": h.head})
    total = report.total
    print(f"diagnose: bound total {'unbounded' if total is None else f'{total:.6g}'}, "
          f"transfer error {te.mean:.6g}")
    return EXIT_OK


def cmd_online(cfg: dict, args) -> int:
    run = Run("online", cfg, args.force)
    if run.already_done():
        print(f"online: already complete in {run.out}")
        return EXIT_OK
    oc = cfgmod.online_config(cfg)
    trace = onl.ftml_run(oc, cfgmod.environment(cfg))
    r = onl.regret(trace)
    run.write_csv("online_trace.csv", trace.to_csv())
    summary = {
        "instantiation": oc.instantiation,
        "T": oc.T,
        "regret": r.total,
        "average_regret": float(r.average[-1]),
        "approximate_comparator": r.approximate_comparator,
    }
    ok = True
    if trace.gradient_norms is not None:
        G = float(np.max(trace.gradient_norms))
        tau = onl.strong_convexity(oc)
        bound = onl.regret_bound(G, tau, oc.T)
        ok = r.total <= bound
        summary.update({"G": G, "tau": tau, "bound": bound, "bound_holds": ok})
    run.write_json("online_summary.json", summary)
    run.finish(status="complete" if ok else "failed")
    print(f"online: R_T = {r.total:.6g}" + ("" if ok else " exceeds the regret bound"))
    return EXIT_OK if ok else EXIT_ASSERTION


def cmd_gradcheck(cfg: dict, args) -> int:
    run = Run("gradcheck", cfg, args.force)
    if run.already_done():
        print(f"gradcheck: already complete in {run.out}")
        return EXIT_OK
    g = cfg["gradcheck"]
    errors = gc.run_suite(g["points"], cfg["seed"])
    failed = sorted(k for k, v in errors.items() if not v < g["tolerance"])
    run.write_json("gradcheck.json", {
        "points": g["points"], "tolerance": g["tolerance"],
        "max_relative_error": errors, "failed": failed,
    })
    run.finish(status="failed" if failed else "complete")
    for name in failed:
        print(f"gradcheck: {name} max relative error {errors[name]:.3g}", file=sys.stderr)
    print(f"gradcheck: {len(errors) - len(failed)}/{len(errors)} ops pass")
    return EXIT_ASSERTION if failed else EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "diagnose": cmd_diagnose,
    "online": cmd_online,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slemlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", nargs="?", help="JSON config file (defaults when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config field by dotted path")
        p.add_argument("--output-dir", help="shorthand for --set output_dir=...")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=...")
        p.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
        p.add_argument("--force", action="store_true", help="redo a completed command")
        if name == "eval":
            p.add_argument("--checkpoint", help="checkpoint JSON to evaluate")
    sub.add_parser("show-config", help="print the resolved default config")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "show-config":
        sys.stdout.write(_dumps(cfgmod.DEFAULTS))
        return EXIT_OK
    overrides = list(args.overrides)
    if args.output_dir is not None:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "checkpoint", None) is not None:
        overrides.append(f"eval.checkpoint={json.dumps(args.checkpoint)}")
    try:
        cfg = cfgmod.load(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
