"""Command-line entrypoint: gen, tokenize, detok, render, train, eval, bench, config.

Exit codes: 0 success, 1 usage error, 2 runtime error. All output is
line-oriented key=value records so runs are trivially diffable; all
randomness flows from the --seed flags. AMRTOK_THREADS caps gen workers
(0 = one per CPU).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from . import _colormap, riemann
from .errors import AmrtokError, ConfigError, UnknownChannelError
from .grid import Field, FrameSequence, read_container, write_container
from .metrics import token_stats
from .solver import SolverConfig, evaluate, load_params, save_params, train
from .tokenizer import (CLAUSE_NAMES, TokenizerConfig, detokenize, read_tokens,
                        tokenize, tokenize_pair, write_tokens)


def _riemann_to_json(cfg):
    return {f.name: getattr(cfg, f.name) for f in dc_fields(riemann.RiemannConfig)}


def _riemann_from_json(d):
    known = {f.name for f in dc_fields(riemann.RiemannConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown riemann config keys {sorted(unknown)}")
    return riemann.RiemannConfig(**d)


@dataclass(frozen=True)
class AppConfig:
    tokenizer: TokenizerConfig
    solver: SolverConfig
    riemann: riemann.RiemannConfig

    @classmethod
    def default(cls):
        return cls(tokenizer=TokenizerConfig(), solver=SolverConfig(),
                   riemann=riemann.RiemannConfig())

    def to_json_dict(self):
        return {"tokenizer": self.tokenizer.to_json_dict(),
                "solver": self.solver.to_json_dict(),
                "riemann": _riemann_to_json(self.riemann)}

    @classmethod
    def from_json_dict(cls, d):
        unknown = set(d) - {"tokenizer", "solver", "riemann"}
        if unknown:
            raise ConfigError(f"unknown config blocks {sorted(unknown)}")
        default = cls.default()
        return cls(
            tokenizer=TokenizerConfig.from_json_dict(d["tokenizer"])
            if "tokenizer" in d else default.tokenizer,
            solver=SolverConfig.from_json_dict(d["solver"])
            if "solver" in d else default.solver,
            riemann=_riemann_from_json(d["riemann"])
            if "riemann" in d else default.riemann,
        )


def load_app_config(path):
    if path is None:
        return AppConfig.default()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return AppConfig.from_json_dict(doc)


def _emit(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()))


# ------------------------------------------------------------------- gen

def _worker_count(n_tasks):
    raw = os.environ.get("AMRTOK_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"AMRTOK_THREADS must be an integer, got {raw!r}") from None
    if cap < 0:
        raise ConfigError(f"AMRTOK_THREADS must be >= 0, got {cap}")
    workers = cap if cap else (os.cpu_count() or 1)
    return max(1, min(workers, n_tasks))


def _gen_case(cfg, idx, out_dir):
    seq = riemann.simulate_case(cfg, idx)
    path = Path(out_dir) / f"case_{idx:03d}.nsgrid"
    write_container(seq, path, meta=riemann.case_meta(cfg, idx))
    return idx, str(path), len(seq.frames)


def cmd_gen(args):
    cfg = riemann.RiemannConfig(resolution=args.res, final_time=args.final_time,
                                frames=args.frames, cases=args.cases,
                                perturb_amplitude=args.amplitude, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = _worker_count(cfg.cases)
    if workers == 1:
        results = [_gen_case(cfg, i, out) for i in range(cfg.cases)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_gen_case, [cfg] * cfg.cases,
                                  range(cfg.cases), [out] * cfg.cases))
    for idx, path, n_frames in sorted(results):
        _emit(case=idx, file=path, frames=n_frames)
    _emit(cases=cfg.cases, workers=workers)
    return 0


# -------------------------------------------------------------- tokenize

def cmd_tokenize(args):
    app = load_app_config(args.config)
    tcfg = app.tokenizer
    seq = read_container(args.infile)
    if args.frame < 0 or args.frame >= len(seq.frames):
        raise ConfigError(
            f"frame {args.frame} out of range: container has {len(seq.frames)} frames")
    cur = seq.frames[args.frame]
    if tcfg.use_virtual_velocity:
        if args.frame == 0:
            raise ConfigError(
                "use_virtual_velocity needs a preceding frame; frame 0 has none")
        tokens = tokenize_pair(seq.frames[args.frame - 1], cur, tcfg)
    else:
        tokens = tokenize(cur, tcfg)
    write_tokens(tokens, args.out,
                 extra_meta={"source": str(args.infile), "frame": args.frame})
    _emit(file=args.out, tokens=len(tokens.tokens),
          stored_cells=tokens.stored_cells(), mode=tcfg.mode)
    return 0


def cmd_detok(args):
    tokens = read_tokens(args.infile)
    field = detokenize(tokens, fill=args.fill)
    seq = FrameSequence(frames=[field], dt=0.0)
    write_container(seq, args.out, meta={"source": str(args.infile)})
    _emit(file=args.out, height=field.height, width=field.width,
          channels=",".join(field.channels))
    return 0


# ---------------------------------------------------------------- render

def _render_rgb(tokens, channel):
    H, W = tokens.height, tokens.width
    if channel not in tokens.channels:
        raise UnknownChannelError(channel, tokens.channels)
    ci = tokens.channels.index(channel)
    canvas = np.full((H, W), np.nan)
    border = np.zeros((H, W), dtype=bool)
    from .tokenizer import _cell_indices

    for tok in sorted(tokens.tokens, key=lambda t: t.parent_depth):
        for cell, ok in zip(tok.cells, tok.valid_mask):
            if not ok:
                continue
            n, i, j = _cell_indices(cell, tokens.k)
            rows, cols = H // n, W // n
            r0, c0 = i * rows, j * cols
            sl = (slice(r0, r0 + rows), slice(c0, c0 + cols))
            canvas[sl] = cell.features[ci]
            border[sl] = False  # deeper cells repaint their interior
            border[r0, c0:c0 + cols] = True
            border[r0:r0 + rows, c0] = True
    border[-1, :] = True
    border[:, -1] = True

    painted = np.isfinite(canvas)
    lo = float(np.nanmin(canvas)) if painted.any() else 0.0
    hi = float(np.nanmax(canvas)) if painted.any() else 1.0
    span = hi - lo if hi > lo else 1.0
    norm = np.where(painted, (canvas - lo) / span, 0.0)
    rgb = _colormap.apply(norm)
    rgb[~painted] = (96, 96, 96)
    rgb[border] = (0, 0, 0)
    return rgb


def write_ppm(rgb, path):
    H, W = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def cmd_render(args):
    tokens = read_tokens(args.infile)
    rgb = _render_rgb(tokens, args.channel)
    write_ppm(rgb, args.out)
    _emit(file=args.out, width=rgb.shape[1], height=rgb.shape[0], channel=args.channel)
    return 0


# ----------------------------------------------------------- train / eval

def _load_dataset(data_dir):
    paths = sorted(Path(data_dir).glob("*.nsgrid"))
    if not paths:
        raise ConfigError(f"no .nsgrid containers under {data_dir}")
    return [read_container(p) for p in paths]


def _check_model_matches(scfg, tcfg, dataset):
    c = len(dataset[0].channels)
    if scfg.c != c:
        raise ConfigError(f"solver c={scfg.c} but containers have {c} channels")
    if scfg.k != tcfg.k:
        raise ConfigError(f"solver k={scfg.k} differs from tokenizer k={tcfg.k}")


def cmd_train(args):
    app = load_app_config(args.config)
    dataset = _load_dataset(args.data)
    _check_model_matches(app.solver, app.tokenizer, dataset)
    params, log = train(dataset, app.solver, app.tokenizer, epochs=args.epochs,
                        seed=args.seed, optimizer=args.optimizer,
                        max_steps=args.max_steps)
    for rec in log["epochs"]:
        _emit(epoch=rec["epoch"], mean_loss=f"{rec['mean_loss']:.6e}", steps=rec["steps"])
    save_params(params, args.out, extra_config={"tokenizer": app.tokenizer.to_json_dict()})
    _emit(file=args.out, steps=len(log["steps"]))
    return 0


def cmd_eval(args):
    params, doc = load_params(args.model)
    if "tokenizer" in doc:
        tcfg = TokenizerConfig.from_json_dict(doc["tokenizer"])
    else:
        tcfg = TokenizerConfig()
    dataset = _load_dataset(args.data)
    report = evaluate(params, dataset, tcfg)
    for case in report["cases"]:
        _emit(case=case["case"], nmse=f"{case['nmse']:.6e}", mse=f"{case['mse']:.6e}",
              mae=f"{case['mae']:.6e}")
    agg = report["aggregate"]
    _emit(aggregate_nmse=f"{agg['nmse']:.6e}", aggregate_mse=f"{agg['mse']:.6e}",
          aggregate_mae=f"{agg['mae']:.6e}",
          identity_nmse=f"{agg['identity_nmse']:.6e}",
          tokenizer_floor_mse=f"{agg['floor_mse']:.6e}")
    return 0


# ----------------------------------------------------------------- bench

def cmd_bench(args):
    app = load_app_config(args.config)
    tcfg = app.tokenizer
    rows = []
    for path in sorted(Path(args.data).glob("*.nsgrid")):
        seq = read_container(path)
        regular = (seq.frames[0].height // tcfg.k) ** 2
        for fi, frame in enumerate(seq.frames):
            if tcfg.use_virtual_velocity and fi > 0:
                tokens = tokenize_pair(seq.frames[fi - 1], frame, tcfg)
            else:
                tokens = tokenize(frame, tcfg)
            stats = token_stats(tokens, regular, app.solver)
            trig = tokens.stats.get("triggers", {})
            rows.append({
                "file": path.name, "frame": fi, "N": stats.token_count,
                "stored_cells": stats.stored_cells,
                "total_flops": stats.total_flops,
                "reduction": float(stats.reduction_vs_regular),
                **{f"trig_{n}": trig.get(n, 0) for n in CLAUSE_NAMES},
            })
    if not rows:
        raise ConfigError(f"no .nsgrid containers under {args.data}")
    with open(args.csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    _emit(file=args.csv, rows=len(rows),
          mean_reduction=f"{np.mean([r['reduction'] for r in rows]):.3f}")
    return 0


def cmd_config(args):
    if args.print_default:
        print(json.dumps(AppConfig.default().to_json_dict(), indent=2, sort_keys=True))
        return 0
    raise ConfigError("config: nothing to do (did you mean --print-default?)")


# ------------------------------------------------------------------ main

def _build_parser():
    p = argparse.ArgumentParser(prog="amrtok",
                                description="shockwave dataset, AMR tokenizer and attention solver")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the 2D Riemann shockwave dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int, default=10)
    g.add_argument("--res", type=int, default=128)
    g.add_argument("--frames", type=int, default=200)
    g.add_argument("--amplitude", type=float, default=0.2)
    g.add_argument("--final-time", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("tokenize", help="tokenize one container frame")
    t.add_argument("--in", dest="infile", required=True)
    t.add_argument("--frame", type=int, default=0)
    t.add_argument("--config", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tokenize)

    d = sub.add_parser("detok", help="reconstruct a regular grid from tokens")
    d.add_argument("--in", dest="infile", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--fill", type=float, default=None)
    d.set_defaults(func=cmd_detok)

    r = sub.add_parser("render", help="render tokens as a PPM heatmap with cell borders")
    r.add_argument("--in", dest="infile", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--channel", default="rho")
    r.set_defaults(func=cmd_render)

    tr = sub.add_parser("train", help="train the attention solver on containers")
    tr.add_argument("--data", required=True)
    tr.add_argument("--config", default=None)
    tr.add_argument("--epochs", type=int, default=1)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    tr.add_argument("--max-steps", type=int, default=None)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on containers")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-frame token and FLOPs statistics")
    b.add_argument("--data", required=True)
    b.add_argument("--config", default=None)
    b.add_argument("--csv", required=True)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("config", help="configuration utilities")
    c.add_argument("--print-default", action="store_true")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse uses 2 for usage errors; this tool reserves 2 for runtime
        return 0 if not e.code else 1
    try:
        return args.func(args) or 0
    except AmrtokError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
